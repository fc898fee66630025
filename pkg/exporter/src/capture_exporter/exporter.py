"""Dump per-layer last-token hidden states from a pretrained causal LM.

For every calibration prompt and every decoder layer, forward hooks record
the residual-stream vector entering and leaving the layer at the final
position. Together with the input embedding matrix they are written as a
calibration bundle — a plain single-file tensor container using the naming
convention

    layer.{i}.in.sample.{s}   f32 [d]
    layer.{i}.out.sample.{s}  f32 [d]
    embed.W_E                 f32 [V, d]

with metadata ``bundle_version="1"`` and ``model_id``, which the layerquant
toolkit consumes directly. Captures run inference-only (no dropout), so a
fixed model revision and prompt list always produce identical bytes.
"""

from __future__ import annotations

import argparse
import json
import struct
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch
from transformers import AutoModelForCausalLM, AutoTokenizer

BUNDLE_VERSION = "1"

_DTYPE_TAGS = {np.dtype("<f4"): "F32"}


class CaptureError(RuntimeError):
    """Model loading, tokenization, or layer enumeration failed."""


def _write_container(path: Path, tensors: dict[str, np.ndarray], metadata: dict[str, str]) -> None:
    """Canonical single-file container writer: ``[u64 len][JSON header][payload]``.

    Entries are laid out in lexicographic name order with the header JSON
    key-sorted, so identical inputs always produce identical bytes (the
    stock safetensors writer serializes metadata in hash order, which is
    not run-to-run stable).
    """
    header: dict[str, object] = {"__metadata__": dict(metadata)}
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name]).astype("<f4", copy=False)
        raw = arr.tobytes()
        header[name] = {
            "dtype": _DTYPE_TAGS[arr.dtype],
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        chunks.append(raw)
        offset += len(raw)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob += b" " * (-(8 + len(blob)) % 8)
    path.write_bytes(struct.pack("<Q", len(blob)) + blob + b"".join(chunks))


def default_prompts() -> list[str]:
    text = resources.files("capture_exporter.data").joinpath("prompts.txt").read_text()
    return [line.strip() for line in text.splitlines() if line.strip()]


@dataclass
class CaptureSpec:
    model: str
    prompts: list[str] = field(default_factory=default_prompts)
    out: str | Path = "bundle.st"

    def __post_init__(self):
        if not self.prompts:
            raise CaptureError("need at least one calibration prompt")


def _decoder_layers(model) -> list[torch.nn.Module]:
    """The model's decoder layer stack, in order."""
    candidates = []
    if hasattr(model, "get_decoder"):
        try:
            candidates.append(model.get_decoder())
        except Exception:
            pass
    inner = getattr(model, "model", None)
    if inner is not None:
        candidates.append(inner)
    for obj in candidates:
        layers = getattr(obj, "layers", None)
        if layers is not None and len(layers) > 0:
            return list(layers)
    raise CaptureError(
        f"cannot enumerate decoder layers of {type(model).__name__}; "
        "expected a decoder exposing .layers"
    )


def _hidden_from_args(args, kwargs) -> torch.Tensor:
    if args and torch.is_tensor(args[0]):
        return args[0]
    if "hidden_states" in kwargs:
        return kwargs["hidden_states"]
    raise CaptureError("decoder layer called without a hidden_states tensor")


def _last_position(hidden: torch.Tensor) -> np.ndarray:
    if hidden.dim() != 3:
        raise CaptureError(f"expected [batch, seq, d] hidden states, got {tuple(hidden.shape)}")
    return hidden[0, -1].detach().to(torch.float32).cpu().numpy()


def capture(spec: CaptureSpec) -> Path:
    """Run the calibration prompts and write the activation bundle.

    Returns the output path. Raises :class:`CaptureError` when the model
    cannot be loaded, a prompt tokenizes to zero tokens, or the layer stack
    cannot be enumerated.
    """
    try:
        tokenizer = AutoTokenizer.from_pretrained(spec.model)
        model = AutoModelForCausalLM.from_pretrained(spec.model, dtype=torch.float32)
    except Exception as exc:
        raise CaptureError(f"cannot load model {spec.model!r}: {exc}") from exc
    model.eval()

    layers = _decoder_layers(model)
    num_layers = len(layers)

    x_in: dict[tuple[int, int], np.ndarray] = {}
    x_out: dict[tuple[int, int], np.ndarray] = {}
    current_sample = 0
    handles = []

    def make_pre_hook(layer_idx):
        def pre_hook(module, args, kwargs):
            x_in[(layer_idx, current_sample)] = _last_position(_hidden_from_args(args, kwargs))
        return pre_hook

    def make_post_hook(layer_idx):
        def post_hook(module, args, kwargs, output):
            hidden = output[0] if isinstance(output, tuple) else output
            x_out[(layer_idx, current_sample)] = _last_position(hidden)
        return post_hook

    for i, layer in enumerate(layers):
        handles.append(layer.register_forward_pre_hook(make_pre_hook(i), with_kwargs=True))
        handles.append(layer.register_forward_hook(make_post_hook(i), with_kwargs=True))

    try:
        with torch.no_grad():
            for s, prompt in enumerate(spec.prompts):
                current_sample = s
                try:
                    ids = tokenizer(prompt, return_tensors="pt")["input_ids"]
                except Exception as exc:
                    raise CaptureError(f"tokenizer failed on prompt {s}: {exc}") from exc
                if ids.shape[1] < 1:
                    raise CaptureError(f"prompt {s} tokenizes to zero tokens: {prompt!r}")
                model(input_ids=ids, use_cache=False)
    finally:
        for handle in handles:
            handle.remove()

    num_samples = len(spec.prompts)
    missing = [(i, s) for i in range(num_layers) for s in range(num_samples)
               if (i, s) not in x_in or (i, s) not in x_out]
    if missing:
        raise CaptureError(f"hooks missed layer/sample pairs: {missing[:4]}"
                           f"{'...' if len(missing) > 4 else ''}")

    w_e = model.get_input_embeddings().weight.detach().to(torch.float32).cpu().numpy()
    tensors = {"embed.W_E": w_e}
    for (i, s), vec in x_in.items():
        tensors[f"layer.{i}.in.sample.{s}"] = vec
    for (i, s), vec in x_out.items():
        tensors[f"layer.{i}.out.sample.{s}"] = vec

    out = Path(spec.out)
    _write_container(out, tensors,
                     metadata={"bundle_version": BUNDLE_VERSION, "model_id": spec.model})
    return out


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="capture",
        description="Dump per-layer last-token hidden states into a calibration bundle.",
    )
    parser.add_argument("--model", required=True, help="model id or local checkpoint path")
    parser.add_argument("--prompts", help="text file, one calibration prompt per line "
                                          "(default: 8 shipped generic prompts)")
    parser.add_argument("--out", required=True, help="output bundle path")
    args = parser.parse_args(argv)

    if args.prompts:
        prompts = [line.strip() for line in Path(args.prompts).read_text().splitlines()
                   if line.strip()]
    else:
        prompts = default_prompts()

    try:
        out = capture(CaptureSpec(model=args.model, prompts=prompts, out=args.out))
    except CaptureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {len(prompts)}-sample bundle to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
