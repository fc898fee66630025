"""Layer importance scoring from calibration hidden states.

The main metric projects a layer's input and output hidden states onto the
vocabulary through the embedding matrix, keeps the top-k token indices of
each projection, and scores the layer as one minus the Jaccard similarity of
the two index sets. A layer whose input and output point at nearly the same
tokens is barely transforming the semantics and is ranked unimportant.

A cosine baseline (one minus cosine similarity of the raw hidden states) is
provided for comparison; both metrics share the orientation "higher score =
more important". All arithmetic is float32 so scores are stable across
platforms.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .bundle import CalibrationBundle

DEFAULT_TOP_K = 10


def project_to_vocab(hidden: np.ndarray, w_e: np.ndarray) -> np.ndarray:
    """Logits over the vocabulary: dot of ``hidden`` with every row of ``w_e``."""
    hidden = np.asarray(hidden, dtype=np.float32)
    w_e = np.asarray(w_e, dtype=np.float32)
    if hidden.ndim != 1 or w_e.ndim != 2 or hidden.shape[0] != w_e.shape[1]:
        raise ValueError(f"dimension mismatch: hidden {hidden.shape} vs embedding {w_e.shape}")
    return w_e @ hidden


def topk_indices(logits: np.ndarray, k: int) -> frozenset[int]:
    """Indices of the k largest logits; ties broken toward the lower index."""
    logits = np.asarray(logits)
    if logits.ndim != 1:
        raise ValueError(f"logits must be 1-D, got shape {logits.shape}")
    if not 1 <= k <= logits.shape[0]:
        raise ValueError(f"k={k} out of range [1, {logits.shape[0]}]")
    # Stable sort on the negated logits keeps equal values in index order.
    order = np.argsort(-logits, kind="stable")
    return frozenset(int(i) for i in order[:k])


def jaccard_importance(c_in: frozenset[int], c_out: frozenset[int]) -> float:
    """1 - |intersection| / |union| of the two top-k token sets."""
    if not c_in or not c_out:
        raise ValueError("token sets must be nonempty")
    if len(c_in) != len(c_out):
        raise ValueError(f"token sets differ in size: {len(c_in)} vs {len(c_out)}")
    union = len(c_in | c_out)
    return 1.0 - len(c_in & c_out) / union


def cosine_importance(x_in: np.ndarray, x_out: np.ndarray) -> float:
    """1 - cos(x_in, x_out), in [0, 2]; higher means more transformation."""
    x_in = np.asarray(x_in, dtype=np.float32)
    x_out = np.asarray(x_out, dtype=np.float32)
    if x_in.shape != x_out.shape or x_in.ndim != 1:
        raise ValueError(f"vector shape mismatch: {x_in.shape} vs {x_out.shape}")
    norm_in = np.linalg.norm(x_in)
    norm_out = np.linalg.norm(x_out)
    if norm_in == 0.0 or norm_out == 0.0:
        raise ValueError("cosine importance is undefined for zero vectors")
    cos = float(np.dot(x_in, x_out) / (norm_in * norm_out))
    return 1.0 - cos


@dataclass(frozen=True)
class ImportanceReport:
    """Per-layer scores plus the ascending-importance ordering.

    ``scores[i]`` is layer i's score; ``ordering`` sorts layers by ascending
    score with ties broken toward the lower layer index. ``k`` is only
    meaningful for the Jaccard metric.
    """

    metric: str
    k: int | None
    scores: list[float]
    ordering: list[int]

    @property
    def num_layers(self) -> int:
        return len(self.scores)

    def to_json(self) -> str:
        doc = {
            "metric": self.metric,
            "k": self.k,
            "scores": [{"layer": i, "score": s} for i, s in enumerate(self.scores)],
            "ordering": self.ordering,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ImportanceReport":
        doc = json.loads(text)
        rows = sorted(doc["scores"], key=lambda r: r["layer"])
        if [r["layer"] for r in rows] != list(range(len(rows))):
            raise ValueError("report must score every layer exactly once")
        return cls(
            metric=doc["metric"],
            k=doc.get("k"),
            scores=[float(r["score"]) for r in rows],
            ordering=[int(i) for i in doc["ordering"]],
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["layer", "score"])
        for i, s in enumerate(self.scores):
            writer.writerow([i, f"{s:.8g}"])
        return buf.getvalue()


def _ascending_order(scores: list[float]) -> list[int]:
    return sorted(range(len(scores)), key=lambda i: (scores[i], i))


def score_layers(bundle: CalibrationBundle, metric: str = "jaccard",
                 k: int = DEFAULT_TOP_K) -> ImportanceReport:
    """Score every layer of a calibration bundle.

    Per sample, the Jaccard metric compares the top-k vocabulary projections
    of the layer's input and output hidden states; the cosine metric compares
    the raw hidden states. A layer's score is the mean over samples.
    """
    bundle.validate()
    if metric not in ("jaccard", "cosine"):
        raise ValueError(f"unknown metric {metric!r}; expected 'jaccard' or 'cosine'")
    if metric == "jaccard" and not 1 <= k <= bundle.vocab_size:
        raise ValueError(f"k={k} out of range [1, {bundle.vocab_size}]")

    scores: list[float] = []
    for i in range(bundle.num_layers):
        per_sample = []
        for s in range(bundle.num_samples):
            if metric == "jaccard":
                c_in = topk_indices(project_to_vocab(bundle.x_in[i, s], bundle.w_e), k)
                c_out = topk_indices(project_to_vocab(bundle.x_out[i, s], bundle.w_e), k)
                per_sample.append(jaccard_importance(c_in, c_out))
            else:
                per_sample.append(cosine_importance(bundle.x_in[i, s], bundle.x_out[i, s]))
        scores.append(float(np.mean(np.asarray(per_sample, dtype=np.float32))))

    return ImportanceReport(
        metric=metric,
        k=k if metric == "jaccard" else None,
        scores=scores,
        ordering=_ascending_order(scores),
    )


def rank_ascending(report: ImportanceReport) -> list[int]:
    """Layer indices least-important first (the allocation order)."""
    if sorted(report.ordering) != list(range(report.num_layers)):
        raise ValueError("report ordering is not a permutation of the layers")
    return list(report.ordering)
