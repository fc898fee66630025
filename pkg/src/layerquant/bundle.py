"""Calibration bundles: per-layer last-token hidden states plus the embedding matrix.

Bundle files are ordinary tensor containers using the naming convention

    layer.{i}.in.sample.{s}   f32 [d]   hidden state entering layer i
    layer.{i}.out.sample.{s}  f32 [d]   hidden state leaving layer i
    embed.W_E                 f32 [V, d]

with metadata ``bundle_version="1"``, ``model_id`` and an optional ``k_hint``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .container import TensorStore, load_store, save_store, write_store

EMBED_NAME = "embed.W_E"
BUNDLE_VERSION = "1"

_ACT_RE = re.compile(r"^layer\.(\d+)\.(in|out)\.sample\.(\d+)$")


class BundleError(ValueError):
    """Bundle store violates the activation naming or shape contract."""


@dataclass(frozen=True)
class CalibrationBundle:
    """Hidden states for every (layer, sample) pair, plus the embedding matrix.

    ``x_in`` and ``x_out`` have shape [L, S, d]; ``w_e`` has shape [V, d].
    """

    x_in: np.ndarray
    x_out: np.ndarray
    w_e: np.ndarray

    @property
    def num_layers(self) -> int:
        return self.x_in.shape[0]

    @property
    def num_samples(self) -> int:
        return self.x_in.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.x_in.shape[2]

    @property
    def vocab_size(self) -> int:
        return self.w_e.shape[0]

    def validate(self) -> "CalibrationBundle":
        if self.x_in.shape != self.x_out.shape or self.x_in.ndim != 3:
            raise BundleError(f"x_in/x_out shape mismatch: {self.x_in.shape} vs {self.x_out.shape}")
        if self.num_samples < 1:
            raise BundleError("bundle needs at least one sample")
        if self.w_e.ndim != 2 or self.w_e.shape[1] != self.hidden_dim:
            raise BundleError(
                f"embedding matrix is {self.w_e.shape} but hidden dim is {self.hidden_dim}"
            )
        return self


def activation_name(layer: int, direction: str, sample: int) -> str:
    return f"layer.{layer}.{direction}.sample.{sample}"


def bundle_tensors(bundle: CalibrationBundle) -> dict[str, np.ndarray]:
    """Flatten a bundle into the named-tensor map of the file convention."""
    tensors: dict[str, np.ndarray] = {EMBED_NAME: bundle.w_e.astype(np.float32, copy=False)}
    for i in range(bundle.num_layers):
        for s in range(bundle.num_samples):
            tensors[activation_name(i, "in", s)] = bundle.x_in[i, s].astype(np.float32, copy=False)
            tensors[activation_name(i, "out", s)] = bundle.x_out[i, s].astype(np.float32, copy=False)
    return tensors


def write_bundle(bundle: CalibrationBundle, model_id: str,
                 extra_metadata: Mapping[str, str] | None = None) -> bytes:
    bundle.validate()
    metadata = {"bundle_version": BUNDLE_VERSION, "model_id": model_id}
    if extra_metadata:
        metadata.update(extra_metadata)
    return write_store(bundle_tensors(bundle), metadata)


def save_bundle(path: str | Path, bundle: CalibrationBundle, model_id: str,
                extra_metadata: Mapping[str, str] | None = None) -> None:
    Path(path).write_bytes(write_bundle(bundle, model_id, extra_metadata))


def load_bundle(store: TensorStore) -> CalibrationBundle:
    """Assemble and validate a bundle from a store following the convention.

    L is inferred as 1 + the highest layer index present, S from the sample
    indices; every (layer, direction, sample) combination must be present.
    """
    if EMBED_NAME not in store:
        raise BundleError(f"missing embedding matrix tensor {EMBED_NAME!r}")
    w_e = np.asarray(store.get(EMBED_NAME), dtype=np.float32)
    if w_e.ndim != 2:
        raise BundleError(f"{EMBED_NAME} must be 2-D, got shape {w_e.shape}")
    d = w_e.shape[1]

    found: dict[tuple[int, str, int], str] = {}
    max_layer = -1
    max_sample = -1
    for name in store.entries:
        m = _ACT_RE.match(name)
        if not m:
            if name != EMBED_NAME:
                continue  # unrelated tensors are tolerated
            continue
        layer, direction, sample = int(m.group(1)), m.group(2), int(m.group(3))
        found[(layer, direction, sample)] = name
        max_layer = max(max_layer, layer)
        max_sample = max(max_sample, sample)

    if max_layer < 0:
        raise BundleError("store contains no layer.{i}.{in|out}.sample.{s} tensors")
    num_layers, num_samples = max_layer + 1, max_sample + 1

    x_in = np.empty((num_layers, num_samples, d), dtype=np.float32)
    x_out = np.empty((num_layers, num_samples, d), dtype=np.float32)
    for i in range(num_layers):
        for s in range(num_samples):
            for direction, dest in (("in", x_in), ("out", x_out)):
                key = (i, direction, s)
                if key not in found:
                    raise BundleError(f"missing tensor {activation_name(i, direction, s)!r}")
                vec = np.asarray(store.get(found[key]), dtype=np.float32)
                if vec.shape != (d,):
                    raise BundleError(
                        f"{found[key]!r} has shape {vec.shape}, expected ({d},) to match {EMBED_NAME}"
                    )
                dest[i, s] = vec

    return CalibrationBundle(x_in=x_in, x_out=x_out, w_e=w_e).validate()


def load_bundle_file(path: str | Path) -> CalibrationBundle:
    return load_bundle(load_store(path))
