"""Command-line entry points.

Exit codes: 0 success, 2 usage/validation, 3 state (e.g. untrained
features), 4 data (corrupt or inconsistent files).
"""

from __future__ import annotations

import csv
import functools
import hashlib
import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import distill, masks as masks_mod, scene as scene_mod
from .errors import ConfigError, DataError, FormatError, StateError
from .estimator import (FeatureDistiller, PromptSegmenter, SceneBundle,
                        load_bundle, save_bundle)
from .evaluation import (EvalReport, TimingBreakdown, labels3d_protocol,
                         propagate_protocol)
from .prompt import load_prompt

EXIT_USAGE = 2
EXIT_STATE = 3
EXIT_DATA = 4


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except StateError as exc:
            _fail(EXIT_STATE, f"[state] {exc}")
        except (DataError, FormatError) as exc:
            _fail(EXIT_DATA, f"[data] {exc}")
        except (ConfigError, ValueError, KeyError) as exc:
            _fail(EXIT_USAGE, f"[usage] {exc}")
        except FileNotFoundError as exc:
            _fail(EXIT_USAGE, f"[usage] missing file: {exc}")
    return wrapper


@click.group()
def main():
    """Promptable 3D segmentation over Gaussian-splat scenes."""


def _require_dir(path, flag):
    if path is not None and not Path(path).is_dir():
        raise click.UsageError(f"{flag} directory does not exist: {path}")
    return path


def _load_training_bundle(scene, cameras, masks_dir, guidance_dir, labels=None,
                          feature_dim=32):
    bundle = load_bundle(scene, cameras, masks_dir=masks_dir,
                         guidance_dir=guidance_dir, labels_path=labels,
                         feature_dim=feature_dim)
    return bundle


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True),
              help="Synthetic scene spec JSON.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None,
              help="Override the seed in the spec file.")
@handle_errors
def synth(spec_path, out_dir, seed):
    """Generate a synthetic scene bundle (scene, cameras, labels, masks)."""
    payload = json.loads(Path(spec_path).read_text())
    mask_opts = payload.pop("masks", {})
    guidance_opts = payload.pop("guidance", {})
    if seed is not None:
        payload["seed"] = seed
    spec = scene_mod.SynthSpec(**payload)
    cloud, cameras, labels = scene_mod.synth_scene(spec)
    bundle = SceneBundle(cloud=cloud, cameras=cameras, labels=labels)
    bundle.warm_cache()
    bundle.stacks = masks_mod.synth_masks(
        cloud, cameras, labels,
        levels=tuple(mask_opts.get("levels", ("object", "coarse"))),
        parts_per_object=int(mask_opts.get("parts_per_object", 2)),
        min_alpha=float(mask_opts.get("min_alpha", 0.5)),
        merge_jitter=float(mask_opts.get("merge_jitter", 0.0)),
        seed=int(mask_opts.get("seed", spec.seed)),
        weight_cache=bundle.weight_cache,
    )
    if guidance_opts.get("enabled", True):
        bundle.guidance = masks_mod.synth_guidance(
            cloud, cameras, labels,
            c_sam=int(guidance_opts.get("c_sam", 64)),
            grid_divisor=int(guidance_opts.get("grid_divisor", 4)),
            noise=float(guidance_opts.get("noise", 0.05)),
            part_strength=float(guidance_opts.get("part_strength", 0.35)),
            seed=int(guidance_opts.get("seed", spec.seed)),
            weight_cache=bundle.weight_cache,
        )
    save_bundle(bundle, out_dir)
    digest = hashlib.sha256()
    for path in sorted(Path(out_dir).rglob("*")):
        if path.is_file():
            digest.update(path.name.encode())
            digest.update(path.read_bytes())
    click.echo(f"wrote bundle to {out_dir} (digest {digest.hexdigest()[:16]})")


# ---------------------------------------------------------------------------
# extract-check
# ---------------------------------------------------------------------------

@main.command("extract-check")
@click.option("--scene", required=True, type=click.Path(exists=True))
@click.option("--cameras", required=True, type=click.Path(exists=True))
@click.option("--masks", "masks_dir", required=True, type=click.Path())
@click.option("--guidance", "guidance_dir", type=click.Path(), default=None)
@click.option("--seed", type=int, default=0)
@handle_errors
def extract_check(scene, cameras, masks_dir, guidance_dir, seed):
    """Validate mask stacks and guidance maps against a scene's cameras."""
    _require_dir(masks_dir, "--masks")
    cams = scene_mod.load_cameras(cameras)
    cloud = scene_mod.load_ply(scene)
    rng = np.random.default_rng(seed)
    checked = 0
    for cam in cams:
        mask_path = Path(masks_dir) / f"{cam.id}.gsten"
        if not mask_path.exists():
            raise DataError(f"no mask stack for view {cam.id!r} in {masks_dir}")
        stack = masks_mod.load_stack(mask_path, view_id=cam.id,
                                     expect_shape=(cam.height, cam.width))
        masks_mod.validate_stack(stack, cam, rng=rng)
        checked += 1
        if guidance_dir is not None:
            gp = Path(guidance_dir) / f"{cam.id}.gsten"
            if gp.exists():
                masks_mod.load_guidance(gp, view_id=cam.id)
    click.echo(f"ok: {checked} views checked against {cloud.count} Gaussians")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

@main.command()
@click.option("--scene", required=True, type=click.Path(exists=True))
@click.option("--cameras", required=True, type=click.Path(exists=True))
@click.option("--masks", "masks_dir", required=True, type=click.Path())
@click.option("--guidance", "guidance_dir", type=click.Path(), default=None)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--iters", type=int, default=20000, show_default=True)
@click.option("--lambda", "lam", type=float, default=1.0, show_default=True)
@click.option("--lr-features", type=float, default=2.5e-3)
@click.option("--lr-projector", type=float, default=1e-3)
@click.option("--pairs", type=int, default=4096)
@click.option("--masks-per-step", type=int, default=16)
@click.option("--feature-dim", type=int, default=32)
@click.option("--seed", type=int, default=0)
@handle_errors
def train(scene, cameras, masks_dir, guidance_dir, out_path, iters, lam,
          lr_features, lr_projector, pairs, masks_per_step, feature_dim, seed):
    """Distill mask stacks (and optional guidance maps) into 3D features."""
    _require_dir(masks_dir, "--masks")
    if guidance_dir is not None:
        _require_dir(guidance_dir, "--guidance")
    if iters < 1:
        raise click.UsageError("--iters must be >= 1")
    bundle = _load_training_bundle(scene, cameras, masks_dir, guidance_dir,
                                   feature_dim=feature_dim)
    missing = [c.id for c in bundle.cameras if c.id not in bundle.stacks]
    if missing:
        raise DataError(f"mask stacks missing for views: {missing}")
    distiller = FeatureDistiller(
        iterations=iters, lam=lam, lr_features=lr_features,
        lr_projector=lr_projector, pairs_per_view=pairs,
        masks_per_step=masks_per_step, feature_dim=feature_dim, seed=seed,
    )
    t0 = time.perf_counter()
    distiller.fit(bundle)
    elapsed = time.perf_counter() - t0
    distiller.save(out_path)
    trace_path = Path(out_path).with_suffix(".loss.csv")
    with open(trace_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "guidance", "correspondence", "total"])
        for i, row in enumerate(distiller.loss_trace_):
            writer.writerow([i, f"{row[0]:.8f}", f"{row[1]:.8f}", f"{row[2]:.8f}"])
    click.echo(f"trained {iters} iterations in {elapsed:.1f}s -> {out_path}")
    click.echo(f"loss trace -> {trace_path}")


# ---------------------------------------------------------------------------
# segment
# ---------------------------------------------------------------------------

@main.command()
@click.option("--scene", required=True, type=click.Path(exists=True))
@click.option("--cameras", required=True, type=click.Path(exists=True))
@click.option("--features", "features_path", required=True, type=click.Path())
@click.option("--guidance", "guidance_dir", type=click.Path(), default=None)
@click.option("--prompt", "prompt_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--export", "export_path", type=click.Path(), default=None)
@click.option("--no-post", is_flag=True, default=False,
              help="Skip 3D post-processing (raw selection only).")
@click.option("--seed", type=int, default=0)
@handle_errors
def segment(scene, cameras, features_path, guidance_dir, prompt_path,
            out_path, export_path, no_post, seed):
    """Run the prompt -> match -> post pipeline and write the result."""
    if not Path(features_path).exists():
        raise StateError(f"feature sidecar not found: {features_path}")
    bundle = load_bundle(scene, cameras, guidance_dir=guidance_dir)
    features, projector, _ = distill.load_features(features_path)
    if features.shape[0] != bundle.cloud.count:
        raise StateError("feature sidecar does not match the scene size")
    bundle.cloud.publish_features(features)
    prompt = load_prompt(prompt_path)
    segmenter = PromptSegmenter(seed=seed, postprocess=not no_post).fit(
        bundle, projector=projector, warm=False)
    seg = segmenter.predict(prompt)
    seg.save(out_path)
    timing = TimingBreakdown.from_info(segmenter.last_info_)
    counts = segmenter.last_info_["counts"]
    click.echo(
        f"segmented {counts.get('grown', seg.count)} Gaussians "
        f"(raw {counts['raw']}) | retrieving {timing.retrieving_ms:.1f} ms, "
        f"filtering {timing.filtering_ms:.1f} ms, growing {timing.growing_ms:.1f} ms"
    )
    if export_path:
        scene_mod.save_segmentation(bundle.cloud, seg.membership, export_path)
        click.echo(f"exported subset PLY -> {export_path}")


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

@main.command("eval")
@click.option("--scene", required=True, type=click.Path(exists=True))
@click.option("--cameras", required=True, type=click.Path(exists=True))
@click.option("--features", "features_path", required=True, type=click.Path())
@click.option("--labels", "labels_path", required=True, type=click.Path(exists=True))
@click.option("--guidance", "guidance_dir", type=click.Path(), default=None)
@click.option("--protocol", type=click.Choice(["labels3d", "propagate"]),
              default="labels3d", show_default=True)
@click.option("--label", "target_label", default="all", show_default=True,
              help="Object label for propagate (or 'all').")
@click.option("--report", "report_path", required=True, type=click.Path())
@click.option("--csv", "csv_path", type=click.Path(), default=None)
@click.option("--no-post", is_flag=True, default=False,
              help="Skip 3D post-processing (raw selection only).")
@click.option("--seed", type=int, default=0)
@handle_errors
def eval_cmd(scene, cameras, features_path, labels_path, guidance_dir,
             protocol, target_label, report_path, csv_path, no_post, seed):
    """Evaluate trained features against ground-truth labels."""
    if not Path(features_path).exists():
        raise StateError(f"feature sidecar not found: {features_path}")
    bundle = load_bundle(scene, cameras, guidance_dir=guidance_dir,
                         labels_path=labels_path)
    features, projector, _ = distill.load_features(features_path)
    bundle.cloud.publish_features(features)
    segmenter = PromptSegmenter(seed=seed, postprocess=not no_post).fit(
        bundle, projector=projector)

    if protocol == "labels3d":
        report = labels3d_protocol(bundle, segmenter)
    else:
        if target_label == "all":
            targets = [int(v) for v in bundle.labels.object_ids]
        else:
            targets = [int(target_label)]
        reports = [propagate_protocol(bundle, segmenter, t) for t in targets]
        per_view = [row for r in reports for row in r.per_view]
        report = EvalReport(
            protocol="propagate", per_view=per_view,
            miou=float(np.mean([r.miou for r in reports])),
            macc=float(np.mean([r.macc for r in reports])),
            timing=reports[-1].timing,
            metadata={"labels": targets, "n_gaussians": bundle.cloud.count},
        )
    report.save_json(report_path)
    if csv_path:
        Path(csv_path).write_text(report.to_csv())
    click.echo(f"{protocol}: mIoU={report.miou:.4f} mAcc={report.macc:.4f} "
               f"-> {report_path}")


# ---------------------------------------------------------------------------
# serve / bench
# ---------------------------------------------------------------------------

@main.command()
@click.option("--scenes", "scene_root", type=click.Path(), default=None,
              envvar="GSSEG_SCENES")
@click.option("--port", type=int, default=None, envvar="GSSEG_PORT")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--seed", type=int, default=0)
@handle_errors
def serve(scene_root, port, host, seed):
    """Run the interactive segmentation HTTP service."""
    from . import service

    service.main(host=host, port=port, scene_root=scene_root)


@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True))
@click.option("--seeds", type=int, default=3, show_default=True)
@click.option("--iters", type=int, default=2000, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=0)
@handle_errors
def bench(spec_path, seeds, iters, out_path, seed):
    """Synthetic benchmark sweep: train + evaluate across seeds, CSV out."""
    from .bench import run_benchmark

    rows = run_benchmark(Path(spec_path), n_seeds=seeds, iterations=iters,
                         base_seed=seed)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "variant", "label_miou", "label_min_iou",
                         "propagate_miou", "train_s"])
        for row in rows:
            writer.writerow([row["seed"], row["variant"],
                             f"{row['label_miou']:.4f}", f"{row['label_min_iou']:.4f}",
                             f"{row['propagate_miou']:.4f}", f"{row['train_s']:.1f}"])
    click.echo(f"benchmark written -> {out_path}")


if __name__ == "__main__":
    main()
