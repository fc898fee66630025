"""Per-channel symmetric quantization: scales, rounding, packing, error.

Walks one weight matrix through quantize -> pack -> unpack -> dequantize and
shows that every element lands within half a scale step of the original.
"""

import numpy as np

from layerquant import dequantize, pack_int4, quantize_row, quantize_tensor, unpack_int4

# A single row first: the scale is max|row| / (2^(bits-1) - 1), so the row
# maximum always maps to the edge of the integer range.
row = np.array([1.0, -2.0, 4.0, -8.0], dtype=np.float32)
q, scale = quantize_row(row, bits=8)
print("row:        ", row.tolist())
print("int8 values:", q.tolist())
print("scale:      ", scale, "(= 8/127)")
print("rebuilt:    ", [round(float(v) * scale, 5) for v in q])
print()

# Half-way cases round to even: -0.35 / 0.1 = -3.5 -> -4.
q4, s4 = quantize_row(np.array([0.7, -0.35, 0.07], dtype=np.float32), bits=4)
print("int4 example:", q4.tolist(), "scale:", s4)
print()

# INT4 values travel two per byte: value+8 in a nibble, low nibble first.
packed = pack_int4(q4)
print("packed bytes:", [hex(b) for b in packed.tolist()])
print("unpacked:    ", unpack_int4(packed, len(q4)).tolist())
print()

# Whole matrices quantize row by row, each row with its own scale, so one
# outlier row cannot blow up the precision of the others.
rng = np.random.default_rng(0)
weights = rng.standard_normal((6, 512)).astype(np.float32)
weights[2] *= 1000.0  # outlier row
for bits in (8, 4):
    t = quantize_tensor(weights, bits)
    err = np.abs(weights - dequantize(t))
    print(f"bits={bits}: per-row scale range [{t.scales.min():.4g}, {t.scales.max():.4g}]  "
          f"max|err| = {err.max():.4g}  bound max(s)/2 = {t.scales.max() / 2:.4g}")
    assert np.all(err <= t.scales[:, None] / 2 + 4 * np.spacing(np.maximum(np.abs(weights), t.scales[:, None])))
print("\nevery element within s/2 of its original, as promised")
