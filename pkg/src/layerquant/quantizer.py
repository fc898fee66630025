"""Per-channel symmetric weight quantization.

Each weight-matrix row gets its own scale s = max|row| / (2^(bits-1) - 1) and
is stored as round-half-to-even(row / s). The symmetric range [-(2^(bits-1)-1),
2^(bits-1)-1] never clips because the scale is derived from the row maximum;
an all-zero row uses s = 1 so the representation stays exact. INT4 values are
packed two per byte (value + 8 in a nibble, element 2m in the low nibble of
byte m) when written to a store.

Rounding details: the integer values divide by the full-precision (float64)
ratio max|row| / qmax, so half-way cases land exactly on .5 and round to
even. The stored float32 scale is the smallest representable value whose
float32 product with qmax covers the row maximum (within one ulp of the
correctly rounded ratio). That choice makes re-quantizing a dequantized
matrix return bit-identical integers and scales, which a naively rounded
scale does not.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from .container import TensorStore, read_store, write_store

INT4_PACKING = "int4-lo-first"

# Matches "layers.{i}." (toy store) and "model.layers.{i}." (ecosystem
# checkpoints); group 1 is the layer index.
DEFAULT_LAYER_RULE = re.compile(r"^(?:model\.)?layers\.(\d+)\.")

_QMAX = {8: 127, 4: 7}


@dataclass(frozen=True)
class QuantizedTensor:
    """Integer weights plus one positive scale per row."""

    bits: int
    q: np.ndarray       # int8, shape [rows, cols], values in the symmetric range
    scales: np.ndarray  # float32, shape [rows]

    @property
    def rows(self) -> int:
        return self.q.shape[0]

    @property
    def cols(self) -> int:
        return self.q.shape[1]


def _covering_scales(absmax: np.ndarray, qmax: int) -> np.ndarray:
    """Smallest float32 scales whose float32 product with qmax >= absmax.

    Within one ulp of round-to-nearest(absmax / qmax), but exactly invertible:
    applied to a dequantized row's maximum (float32(qmax * s)) it returns s.
    """
    nearest = (absmax.astype(np.float64) / qmax).astype(np.float32)
    down = np.nextafter(nearest, np.float32(0.0))
    up = np.nextafter(nearest, np.float32(np.inf))
    covers = lambda s: (s.astype(np.float64) * qmax).astype(np.float32) >= absmax
    scales = np.where(covers(down), down, np.where(covers(nearest), nearest, up))
    assert bool(np.all(covers(scales))), "covering scale search failed"
    return scales.astype(np.float32)


def quantize_tensor(weights: np.ndarray, bits: int) -> QuantizedTensor:
    """Quantize a 2-D matrix row by row (independent per-channel scales)."""
    if bits not in _QMAX:
        raise ValueError(f"bits must be 8 or 4, got {bits}")
    weights = np.asarray(weights, dtype=np.float32)
    if weights.ndim != 2 or weights.size == 0:
        raise ValueError(f"expected a nonempty 2-D matrix, got shape {weights.shape}")
    qmax = _QMAX[bits]
    absmax = np.abs(weights).max(axis=1)
    nonzero = absmax > 0.0
    # Integer values come from the full-precision ratio so half-way cases
    # (e.g. -0.35 against scale 0.7/7) hit .5 exactly and round to even.
    ratios = np.where(nonzero, absmax.astype(np.float64) / qmax, 1.0)
    q = np.rint(weights.astype(np.float64) / ratios[:, None]).astype(np.int8)
    scales = np.where(nonzero, _covering_scales(absmax, qmax), np.float32(1.0))
    return QuantizedTensor(bits=bits, q=q, scales=scales.astype(np.float32))


def quantize_row(row: np.ndarray, bits: int) -> tuple[np.ndarray, float]:
    """Quantize one row; returns (int8 values, float32 scale)."""
    row = np.asarray(row, dtype=np.float32)
    if row.ndim != 1 or row.size == 0:
        raise ValueError(f"row must be a nonempty 1-D vector, got shape {row.shape}")
    t = quantize_tensor(row[None, :], bits)
    return t.q[0], float(t.scales[0])


def dequantize(t: QuantizedTensor) -> np.ndarray:
    """Reconstruct the float32 matrix: q[i, j] * scales[i]."""
    return (t.q.astype(np.float32) * t.scales[:, None]).astype(np.float32)


def pack_int4(values: np.ndarray) -> np.ndarray:
    """Pack INT4 values in [-7, 7] two per byte; odd lengths pad with encoded 0."""
    values = np.asarray(values)
    if values.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {values.shape}")
    if values.size and (values.min() < -7 or values.max() > 7):
        raise ValueError("INT4 values must lie in [-7, 7]")
    encoded = (values.astype(np.int16) + 8).astype(np.uint8)
    if encoded.size % 2:
        encoded = np.append(encoded, np.uint8(8))  # pad nibble encodes value 0
    return (encoded[0::2] | (encoded[1::2] << 4)).astype(np.uint8)


def unpack_int4(packed: np.ndarray, count: int) -> np.ndarray:
    """Inverse of :func:`pack_int4`, recovering ``count`` values."""
    packed = np.asarray(packed, dtype=np.uint8)
    if count < 0 or count > 2 * packed.size:
        raise ValueError(f"count {count} incompatible with {packed.size} packed bytes")
    lo = (packed & 0x0F).astype(np.int8) - 8
    hi = ((packed >> 4) & 0x0F).astype(np.int8) - 8
    out = np.empty(2 * packed.size, dtype=np.int8)
    out[0::2] = lo
    out[1::2] = hi
    return out[:count]


def _pack_rows(q: np.ndarray) -> np.ndarray:
    """Pack each row of an INT4 matrix independently: [rows, ceil(cols/2)] bytes."""
    rows, cols = q.shape
    if cols % 2:
        q = np.pad(q, ((0, 0), (0, 1)))
    encoded = (q.astype(np.int16) + 8).astype(np.uint8)
    return (encoded[:, 0::2] | (encoded[:, 1::2] << 4)).astype(np.uint8)


def _unpack_rows(packed: np.ndarray, cols: int) -> np.ndarray:
    rows = packed.shape[0]
    lo = (packed & 0x0F).astype(np.int8) - 8
    hi = ((packed >> 4) & 0x0F).astype(np.int8) - 8
    out = np.empty((rows, 2 * packed.shape[1]), dtype=np.int8)
    out[:, 0::2] = lo
    out[:, 1::2] = hi
    return out[:, :cols]


def match_layer(name: str, rule: re.Pattern = DEFAULT_LAYER_RULE) -> int | None:
    """Layer index a tensor name belongs to, or None for non-layer tensors."""
    m = rule.match(name)
    return int(m.group(1)) if m else None


def plan_fingerprint(plan_json: str) -> str:
    """Short stable id for a serialized plan, recorded in quantized stores."""
    return hashlib.sha256(plan_json.encode("utf-8")).hexdigest()[:16]


def apply_plan(weights: TensorStore, plan, rule: re.Pattern = DEFAULT_LAYER_RULE) -> TensorStore:
    """Quantize every 2-D layer tensor of a store at its layer's precision.

    FP16-assigned layers and all non-layer tensors are copied through
    byte-identically. Quantized tensors are replaced by "{name}.qweight"
    (int8, or packed uint8 for INT4) plus "{name}.scales" (float32, one per
    row). 1-D tensors inside a layer (norm gains, biases) are never
    quantized; other non-2-D tensors matched by the rule are an error.
    """
    assignment = list(plan.assignment)
    num_layers = len(assignment)

    matched_layers: set[int] = set()
    out_tensors: dict[str, np.ndarray] = {}
    metadata = dict(weights.metadata)
    any_int4 = False

    for name, arr in weights.items():
        layer = match_layer(name, rule)
        if layer is None:
            out_tensors[name] = arr
            continue
        if layer >= num_layers:
            raise ValueError(
                f"tensor {name!r} belongs to layer {layer} but the plan covers {num_layers} layers"
            )
        matched_layers.add(layer)
        precision = assignment[layer]
        if arr.ndim == 1 or precision == "fp16":
            out_tensors[name] = arr
            continue
        if arr.ndim != 2:
            raise ValueError(f"tensor {name!r} is {arr.ndim}-D; only 2-D layer tensors can be quantized")
        bits = {"int8": 8, "int4": 4}[precision]
        qt = quantize_tensor(np.asarray(arr, dtype=np.float32), bits)
        if bits == 4:
            out_tensors[name + ".qweight"] = _pack_rows(qt.q)
            metadata[f"int4_cols.{name}"] = str(qt.cols)
            any_int4 = True
        else:
            out_tensors[name + ".qweight"] = qt.q
        out_tensors[name + ".scales"] = qt.scales

    missing = [i for i in range(num_layers) if i not in matched_layers]
    if missing:
        raise ValueError(f"plan layers {missing} match no tensors in the store")

    if any_int4:
        metadata["packing"] = INT4_PACKING
    metadata["plan_id"] = plan_fingerprint(plan.to_json())
    return read_store(write_store(out_tensors, metadata))


def load_quantized_matrix(store: TensorStore, name: str) -> np.ndarray:
    """Dequantize "{name}.qweight" / "{name}.scales" back to float32."""
    qname, sname = name + ".qweight", name + ".scales"
    if qname not in store:
        raise ValueError(f"store has no tensor {name!r} or {qname!r}")
    if sname not in store:
        raise ValueError(f"missing scales tensor {sname!r} for {qname!r}")
    q = store.get(qname)
    scales = np.asarray(store.get(sname), dtype=np.float32)
    if q.dtype == np.uint8:  # packed INT4
        cols_key = f"int4_cols.{name}"
        cols = int(store.metadata.get(cols_key, 2 * q.shape[1]))
        q = _unpack_rows(q, cols)
        bits = 4
    else:
        q = q.astype(np.int8)
        bits = 8
    return dequantize(QuantizedTensor(bits=bits, q=q, scales=scales))
