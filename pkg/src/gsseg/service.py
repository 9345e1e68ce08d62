"""HTTP backend for interactive segmentation.

Sessions wrap a loaded scene plus its trained features; segmentation
requests run the prompt pipeline synchronously and keep an undo history.
Scene geometry and features are never mutated by any endpoint.
"""

from __future__ import annotations

import io
import logging
import os
import threading
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import HTMLResponse, Response
from PIL import Image
from pydantic import BaseModel

from . import distill, splat
from .errors import FormatError, GssegError
from .estimator import PromptSegmenter, SceneBundle, load_bundle
from .evaluation import TimingBreakdown
from .match import Segmentation
from .prompt import parse_prompt
from .scene import save_segmentation

log = logging.getLogger(__name__)

OVERLAY_COLOR = np.array([1.0, 0.35, 0.05])
OVERLAY_STRENGTH = 0.55
DEFAULT_PORT = 8008


class Session:
    """One loaded scene with its segmentation history (append-only)."""

    def __init__(self, session_id: str, bundle: SceneBundle,
                 projector=None, trained: bool = False):
        self.id = session_id
        self.bundle = bundle
        self.projector = projector
        self.trained = trained
        self.history = []          # list of (prompt_id, Segmentation)
        self.segmentations = {}    # sid -> Segmentation
        self.lock = threading.Lock()

    @property
    def current(self) -> Segmentation | None:
        return self.history[-1][1] if self.history else None


class ScenePayload(BaseModel):
    scene: str
    cameras: str
    features: str | None = None
    masks: str | None = None
    guidance: str | None = None
    labels: str | None = None


def _float_to_png(img: np.ndarray) -> bytes:
    arr = np.clip(img, 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(data).save(buf, format="PNG")
    return buf.getvalue()


def overlay_image(plain: np.ndarray, member_weight: np.ndarray) -> np.ndarray:
    """Tint pixels where the members' summed blend weight is visible.

    Pixels below the rasterizer's skip threshold are untouched, so the
    overlay differs from the plain render exactly on the member footprint.
    """
    tint = member_weight >= splat.ALPHA_SKIP
    out = plain.copy()
    out[tint] = (1.0 - OVERLAY_STRENGTH) * plain[tint] + OVERLAY_STRENGTH * OVERLAY_COLOR
    return out


def create_app(scene_root=None) -> FastAPI:
    """Build the service; `scene_root` anchors relative scene paths."""
    app = FastAPI(title="gsseg", version="0.1.0")
    app.state.sessions = {}
    app.state.scene_root = Path(scene_root) if scene_root else None

    def resolve(path_str: str) -> Path:
        path = Path(path_str)
        if not path.is_absolute() and app.state.scene_root is not None:
            path = app.state.scene_root / path
        return path

    def get_session(scene_id: str) -> Session:
        session = app.state.sessions.get(scene_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown scene {scene_id!r}")
        return session

    @app.get("/scenes")
    def list_scenes():
        return {
            "scenes": [
                {"id": s.id, "n_gaussians": s.bundle.cloud.count,
                 "views": [c.id for c in s.bundle.cameras],
                 "trained": s.trained}
                for s in app.state.sessions.values()
            ]
        }

    @app.post("/scenes", status_code=201)
    def load_scene(payload: ScenePayload):
        try:
            bundle = load_bundle(
                resolve(payload.scene), resolve(payload.cameras),
                masks_dir=resolve(payload.masks) if payload.masks else None,
                guidance_dir=resolve(payload.guidance) if payload.guidance else None,
                labels_path=resolve(payload.labels) if payload.labels else None,
            )
            projector = None
            trained = False
            if payload.features:
                features, projector, _ = distill.load_features(resolve(payload.features))
                if features.shape[0] != bundle.cloud.count:
                    raise HTTPException(
                        status_code=422,
                        detail="feature sidecar does not match the scene size",
                    )
                bundle.cloud.publish_features(features)
                trained = True
        except FileNotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc
        except (FormatError, GssegError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        session = Session(uuid.uuid4().hex[:12], bundle, projector, trained)
        bundle.warm_cache()
        app.state.sessions[session.id] = session
        return {"id": session.id, "n_gaussians": bundle.cloud.count,
                "views": [c.id for c in bundle.cameras], "trained": trained}

    @app.get("/scenes/{scene_id}/render")
    def render(scene_id: str, view: str, overlay: str | None = None):
        session = get_session(scene_id)
        bundle = session.bundle
        try:
            camera = bundle.camera(view)
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc
        weights = bundle.blend_weights(view)
        img = splat.render_color(bundle.cloud, camera, weights=weights)
        if overlay is not None:
            seg = session.segmentations.get(overlay)
            if seg is None:
                raise HTTPException(status_code=404,
                                    detail=f"unknown segmentation {overlay!r}")
            member_weight = np.asarray(
                weights.matrix[:, seg.membership].sum(axis=1)
            ).reshape(weights.shape)
            img = overlay_image(img, member_weight)
        return Response(content=_float_to_png(img), media_type="image/png")

    @app.post("/scenes/{scene_id}/segment")
    def segment(scene_id: str, prompt_json: dict):
        session = get_session(scene_id)
        if not session.trained:
            raise HTTPException(status_code=409,
                                detail="scene has no trained features")
        try:
            prompt = parse_prompt(prompt_json, base_dir=app.state.scene_root,
                                  prompt_id=uuid.uuid4().hex[:8])
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc

        with session.lock:
            segmenter = PromptSegmenter().fit(
                session.bundle, projector=session.projector, warm=False
            )
            try:
                seg = segmenter.predict(prompt)
            except (GssegError, ValueError, KeyError) as exc:
                stage = "retrieving" if isinstance(exc, (ValueError, KeyError)) \
                    else "post-processing"
                raise HTTPException(
                    status_code=422, detail={"stage": stage, "error": str(exc)}
                ) from exc
            info = segmenter.last_info_
            sid = prompt.id
            session.segmentations[sid] = seg
            session.history.append((sid, seg))
        timing = TimingBreakdown.from_info(info)
        return {
            "segmentation_id": sid,
            "counts": info["counts"],
            "timing_ms": {
                "retrieving_ms": timing.retrieving_ms,
                "filtering_ms": timing.filtering_ms,
                "growing_ms": timing.growing_ms,
                "total_ms": timing.total_ms,
            },
            "metric": info["metric"],
        }

    @app.delete("/scenes/{scene_id}/segmentation")
    def undo(scene_id: str):
        session = get_session(scene_id)
        with session.lock:
            if not session.history:
                raise HTTPException(status_code=409, detail="nothing to undo")
            sid, _ = session.history.pop()
            session.segmentations.pop(sid, None)
            current = session.history[-1][0] if session.history else None
        return {"undone": sid, "current": current}

    @app.get("/scenes/{scene_id}/segmentations/{sid}/export")
    def export(scene_id: str, sid: str):
        session = get_session(scene_id)
        seg = session.segmentations.get(sid)
        if seg is None:
            raise HTTPException(status_code=404, detail=f"unknown segmentation {sid!r}")
        if not seg.membership.any():
            raise HTTPException(status_code=422, detail="segmentation is empty")
        buf = io.BytesIO()
        import tempfile

        with tempfile.NamedTemporaryFile(suffix=".ply") as tmp:
            save_segmentation(session.bundle.cloud, seg.membership, tmp.name)
            buf.write(Path(tmp.name).read_bytes())
        return Response(
            content=buf.getvalue(), media_type="application/octet-stream",
            headers={"Content-Disposition": f"attachment; filename={sid}.ply"},
        )

    @app.get("/scenes/{scene_id}/segmentations/{sid}")
    def segmentation_json(scene_id: str, sid: str):
        session = get_session(scene_id)
        seg = session.segmentations.get(sid)
        if seg is None:
            raise HTTPException(status_code=404, detail=f"unknown segmentation {sid!r}")
        return seg.to_json()

    @app.get("/", response_class=HTMLResponse)
    def index():
        ui = Path(__file__).parent / "static" / "index.html"
        if ui.exists():
            return ui.read_text()
        return "<html><body><h1>gsseg service</h1><p>UI not bundled.</p></body></html>"

    @app.get("/ui/{asset}")
    def ui_asset(asset: str):
        path = Path(__file__).parent / "static" / asset
        if not path.exists() or not path.is_file():
            raise HTTPException(status_code=404, detail="no such asset")
        media = "application/javascript" if asset.endswith(".js") else "text/plain"
        return Response(content=path.read_bytes(), media_type=media)

    return app


def main(host="127.0.0.1", port=None, scene_root=None):
    import uvicorn

    port = port or int(os.environ.get("GSSEG_PORT", DEFAULT_PORT))
    scene_root = scene_root or os.environ.get("GSSEG_SCENES")
    uvicorn.run(create_app(scene_root), host=host, port=port, log_level="info")
