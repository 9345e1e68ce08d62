"""Score Gaussians against query sets and pick the raw segmentation.

Scores are a per-Gaussian max over the queries under the set's metric.
Cosine selections threshold at the mean of the per-Gaussian maxima; dot
selections (guidance-based prompts) use mean plus one standard deviation.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass

import numpy as np

from . import tensorio
from .prompt import QuerySet

STAGES = ("raw", "filtered", "grown")


@dataclass
class Segmentation:
    """Boolean membership over the cloud plus the scores that produced it."""

    membership: np.ndarray
    scores: np.ndarray
    stage: str = "raw"
    prompt_id: str = "prompt"
    neg_scores: np.ndarray | None = None

    def __post_init__(self):
        self.membership = np.asarray(self.membership, dtype=bool)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.membership.shape != self.scores.shape:
            raise ValueError("membership/scores length mismatch")

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.membership))

    def replaced(self, membership: np.ndarray, stage: str) -> "Segmentation":
        return Segmentation(membership=membership, scores=self.scores,
                            stage=stage, prompt_id=self.prompt_id,
                            neg_scores=self.neg_scores)

    def to_json(self) -> dict:
        bits = np.packbits(self.membership.astype(np.uint8))
        return {
            "size": int(self.membership.size),
            "membership_b64": base64.b64encode(bits.tobytes()).decode("ascii"),
            "scores_gsten_b64": base64.b64encode(
                tensorio.encode_tensor(self.scores.astype(np.float32))
            ).decode("ascii"),
            "stage": self.stage,
            "prompt_id": self.prompt_id,
        }

    @staticmethod
    def from_json(payload: dict) -> "Segmentation":
        size = int(payload["size"])
        bits = np.frombuffer(base64.b64decode(payload["membership_b64"]), dtype=np.uint8)
        membership = np.unpackbits(bits)[:size].astype(bool)
        scores = tensorio.decode_tensor(
            base64.b64decode(payload["scores_gsten_b64"])
        ).astype(np.float64)
        return Segmentation(membership=membership, scores=scores,
                            stage=payload["stage"], prompt_id=payload["prompt_id"])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @staticmethod
    def load(path) -> "Segmentation":
        with open(path) as fh:
            return Segmentation.from_json(json.load(fh))


def _normalized(vectors: np.ndarray):
    norms = np.linalg.norm(vectors, axis=1)
    safe = np.where(norms > 1e-12, norms, 1.0)
    return vectors / safe[:, None], norms <= 1e-12


def _max_similarity(features: np.ndarray, queries: np.ndarray, metric: str) -> np.ndarray:
    if metric == "cosine":
        fn, f_zero = _normalized(features)
        qn, q_zero = _normalized(queries)
        qn = qn[~q_zero]
        if len(qn) == 0:
            raise ValueError("all queries have zero norm under the cosine metric")
        sims = np.max(fn @ qn.T, axis=1)
        sims[f_zero] = -1.0
        return sims
    return np.max(features @ queries.T, axis=1)


def score(features: np.ndarray, qs: QuerySet):
    """Per-Gaussian (positive, negative) scores; negatives None if absent."""
    sp = _max_similarity(features, qs.positives, qs.metric)
    sn = None
    if qs.negatives is not None:
        sn = _max_similarity(features, qs.negatives, qs.metric)
    return sp, sn


def select_cosine(sp: np.ndarray, sn: np.ndarray | None = None,
                  prompt_id: str = "prompt") -> Segmentation:
    """Members beat every negative query and the adaptive positive threshold.

    The threshold is the mean over all Gaussians of the per-Gaussian
    max-positive score; comparisons are strict.
    """
    tau = float(np.mean(sp))
    membership = sp > tau
    if sn is not None:
        membership = membership & (sp > sn)
    return Segmentation(membership=membership, scores=sp, stage="raw",
                        prompt_id=prompt_id, neg_scores=sn)


def select_dot(sp: np.ndarray, prompt_id: str = "prompt") -> Segmentation:
    """Members exceed mean + population standard deviation of the scores."""
    tau = float(np.mean(sp) + np.std(sp))
    return Segmentation(membership=sp > tau, scores=sp, stage="raw",
                        prompt_id=prompt_id)


def select(sp: np.ndarray, sn: np.ndarray | None, metric: str,
           prompt_id: str = "prompt") -> Segmentation:
    if metric == "cosine":
        return select_cosine(sp, sn, prompt_id)
    return select_dot(sp, prompt_id)
