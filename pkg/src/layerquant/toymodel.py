"""Desk-scale decoder-only transformer for end-to-end runs without a real LLM.

Architecture: learned positional embeddings, pre-norm blocks with RMS
normalization, causal softmax attention, a two-layer MLP with the SiLU
(x * sigmoid(x)) nonlinearity, and an output head tied to the token
embedding, so the vocabulary-projection matrix used for importance scoring
is the model's own embedding. Everything runs in float32.

Weights are drawn from the SplitMix64 generator (see :mod:`layerquant.rng`)
with standard deviation 0.02/sqrt(d_model), in a fixed documented order:
embed.W_E, embed.pos, then per layer wq, wk, wv, wo, w1, w2 (row-major
each). Norm gains initialize to one. Identical seeds therefore give
bit-identical weights and captures.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .bundle import CalibrationBundle
from .container import TensorStore, write_store
from .quantizer import load_quantized_matrix
from .rng import SplitMix64, zipf_tokens

_NORM_EPS = 1e-6


@dataclass(frozen=True)
class ToyConfig:
    vocab: int = 256
    d_model: int = 32
    n_layers: int = 4
    n_heads: int = 4
    ffn_mult: int = 4
    max_seq: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab", "d_model", "n_layers", "n_heads", "ffn_mult", "max_seq"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    def param_count(self) -> int:
        d, f = self.d_model, self.ffn_mult
        per_layer = 4 * d * d + 2 * f * d * d + 2 * d
        return self.vocab * d + self.max_seq * d + self.n_layers * per_layer + d

    def to_metadata(self) -> dict[str, str]:
        return {"model_id": "toy", "toy_config": json.dumps(self.__dict__, sort_keys=True)}

    @classmethod
    def from_metadata(cls, metadata: dict[str, str]) -> "ToyConfig":
        if "toy_config" not in metadata:
            raise ValueError("store metadata carries no toy_config entry")
        return cls(**json.loads(metadata["toy_config"]))


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray      # [ffn_mult*d, d]
    w2: np.ndarray      # [d, ffn_mult*d]
    norm1: np.ndarray   # [d]
    norm2: np.ndarray   # [d]


@dataclass
class ToyWeights:
    config: ToyConfig
    w_e: np.ndarray     # [vocab, d], also the output head
    pos: np.ndarray     # [max_seq, d]
    layers: list[LayerWeights] = field(default_factory=list)
    final_norm: np.ndarray = None

    @classmethod
    def zeros(cls, config: ToyConfig) -> "ToyWeights":
        """All-zero weights; useful as the uniform-logits reference model."""
        d, f = config.d_model, config.ffn_mult
        return cls(
            config=config,
            w_e=np.zeros((config.vocab, d), np.float32),
            pos=np.zeros((config.max_seq, d), np.float32),
            layers=[LayerWeights(*(np.zeros(s, np.float32) for s in
                                   [(d, d)] * 4 + [(f * d, d), (d, f * d), (d,), (d,)]))
                    for _ in range(config.n_layers)],
            final_norm=np.zeros(d, np.float32),
        )

    def zero_layers(self) -> "ToyWeights":
        """Copy with every per-layer weight zeroed; layers become identities."""
        zeroed = [LayerWeights(*(np.zeros_like(getattr(lw, name)) for name in
                                 ("wq", "wk", "wv", "wo", "w1", "w2", "norm1", "norm2")))
                  for lw in self.layers]
        return ToyWeights(config=self.config, w_e=self.w_e.copy(), pos=self.pos.copy(),
                          layers=zeroed, final_norm=self.final_norm.copy())


def init_toy(config: ToyConfig) -> ToyWeights:
    """Seeded weight initialization (see the module docstring for the order)."""
    d, f = config.d_model, config.ffn_mult
    rng = SplitMix64(config.seed)
    scale = 0.02 / math.sqrt(d)
    w_e = rng.normal_array((config.vocab, d), scale)
    pos = rng.normal_array((config.max_seq, d), scale)
    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerWeights(
            wq=rng.normal_array((d, d), scale),
            wk=rng.normal_array((d, d), scale),
            wv=rng.normal_array((d, d), scale),
            wo=rng.normal_array((d, d), scale),
            w1=rng.normal_array((f * d, d), scale),
            w2=rng.normal_array((d, f * d), scale),
            norm1=np.ones(d, np.float32),
            norm2=np.ones(d, np.float32),
        ))
    return ToyWeights(config=config, w_e=w_e, pos=pos, layers=layers,
                      final_norm=np.ones(d, np.float32))


def weights_to_tensors(weights: ToyWeights) -> dict[str, np.ndarray]:
    tensors = {"embed.W_E": weights.w_e, "embed.pos": weights.pos,
               "final_norm": weights.final_norm}
    for i, lw in enumerate(weights.layers):
        for name in ("wq", "wk", "wv", "wo", "w1", "w2", "norm1", "norm2"):
            tensors[f"layers.{i}.{name}"] = getattr(lw, name)
    return tensors


def weights_to_store_bytes(weights: ToyWeights) -> bytes:
    return write_store(weights_to_tensors(weights), weights.config.to_metadata())


def _weights_from(store: TensorStore, fetch) -> ToyWeights:
    config = ToyConfig.from_metadata(store.metadata)
    layers = []
    for i in range(config.n_layers):
        layers.append(LayerWeights(
            wq=fetch(f"layers.{i}.wq"), wk=fetch(f"layers.{i}.wk"),
            wv=fetch(f"layers.{i}.wv"), wo=fetch(f"layers.{i}.wo"),
            w1=fetch(f"layers.{i}.w1"), w2=fetch(f"layers.{i}.w2"),
            norm1=fetch(f"layers.{i}.norm1"), norm2=fetch(f"layers.{i}.norm2"),
        ))
    return ToyWeights(config=config, w_e=fetch("embed.W_E"), pos=fetch("embed.pos"),
                      layers=layers, final_norm=fetch("final_norm"))


def weights_from_store(store: TensorStore) -> ToyWeights:
    """Load unquantized toy weights (every tensor present verbatim)."""
    def fetch(name: str) -> np.ndarray:
        return np.asarray(store.get(name), dtype=np.float32)
    return _weights_from(store, fetch)


def load_dequantized(store: TensorStore) -> ToyWeights:
    """Load toy weights from a quantized store, dequantizing where needed."""
    def fetch(name: str) -> np.ndarray:
        if name in store:
            return np.asarray(store.get(name), dtype=np.float32)
        return load_quantized_matrix(store, name)
    return _weights_from(store, fetch)


def _rmsnorm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + _NORM_EPS)
    return (x / rms) * gain


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _forward(weights: ToyWeights, tokens: np.ndarray, want_attention: bool):
    cfg = weights.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or not 1 <= tokens.shape[0] <= cfg.max_seq:
        raise ValueError(f"sequence length must be in [1, {cfg.max_seq}], got {tokens.shape}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ValueError(f"token ids must be in [0, {cfg.vocab})")

    seq = tokens.shape[0]
    d_head = cfg.d_model // cfg.n_heads
    mask = np.triu(np.full((seq, seq), -np.inf, dtype=np.float32), k=1)

    x = (weights.w_e[tokens] + weights.pos[:seq]).astype(np.float32)
    x_in = np.empty((cfg.n_layers, cfg.d_model), dtype=np.float32)
    x_out = np.empty((cfg.n_layers, cfg.d_model), dtype=np.float32)
    attention: list[np.ndarray] = []

    for i, lw in enumerate(weights.layers):
        x_in[i] = x[-1]

        h = _rmsnorm(x, lw.norm1)
        q = (h @ lw.wq.T).reshape(seq, cfg.n_heads, d_head)
        k = (h @ lw.wk.T).reshape(seq, cfg.n_heads, d_head)
        v = (h @ lw.wv.T).reshape(seq, cfg.n_heads, d_head)
        scores = np.einsum("qhd,khd->hqk", q, k) / math.sqrt(d_head)
        attn = _softmax(scores + mask[None, :, :])
        if want_attention:
            attention.append(attn)
        ctx = np.einsum("hqk,khd->qhd", attn, v).reshape(seq, cfg.d_model)
        x = x + ctx @ lw.wo.T

        h = _rmsnorm(x, lw.norm2)
        x = x + _silu(h @ lw.w1.T) @ lw.w2.T

        x_out[i] = x[-1]

    final = _rmsnorm(x, weights.final_norm)
    logits = (final @ weights.w_e.T).astype(np.float32)
    return logits, x_in, x_out, attention


def forward_capture(weights: ToyWeights,
                    tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Causal forward pass recording the residual stream at the last position.

    Returns ``(logits, x_in, x_out)``: next-token logits over the vocabulary
    for every position [T, vocab], and per-layer hidden states of the final
    position entering/leaving each layer, both [n_layers, d].
    """
    logits, x_in, x_out, _ = _forward(weights, tokens, want_attention=False)
    return logits, x_in, x_out


def attention_maps(weights: ToyWeights, tokens: np.ndarray) -> list[np.ndarray]:
    """Per-layer attention weights [n_heads, T, T], for inspection and tests."""
    return _forward(weights, tokens, want_attention=True)[3]


def sample_prompt(config: ToyConfig, sample_index: int, length: int = 32) -> np.ndarray:
    """Deterministic calibration prompt for sample ``sample_index``."""
    return zipf_tokens(min(length, config.max_seq), config.vocab,
                       seed=config.seed * 1_000_003 + sample_index)


def capture_bundle(weights: ToyWeights, samples: int = 1) -> CalibrationBundle:
    """Run ``samples`` seeded prompts and collect their residual captures."""
    if samples < 1:
        raise ValueError("need at least one sample")
    cfg = weights.config
    x_in = np.empty((cfg.n_layers, samples, cfg.d_model), dtype=np.float32)
    x_out = np.empty((cfg.n_layers, samples, cfg.d_model), dtype=np.float32)
    for s in range(samples):
        _, xi, xo = forward_capture(weights, sample_prompt(cfg, s))
        x_in[:, s] = xi
        x_out[:, s] = xo
    return CalibrationBundle(x_in=x_in, x_out=x_out,
                             w_e=weights.w_e.astype(np.float32)).validate()


def synth_corpus(config: ToyConfig, length: int = 2048, corpus_seed: int = 12345) -> np.ndarray:
    """Shippable evaluation corpus: Zipf-skewed tokens from the seeded PRNG."""
    return zipf_tokens(length, config.vocab, seed=corpus_seed)


def perplexity(weights: ToyWeights, corpus: np.ndarray) -> float:
    """exp(mean next-token NLL) over consecutive max_seq windows, teacher-forced."""
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.ndim != 1 or corpus.shape[0] < 2:
        raise ValueError("corpus must be a 1-D token sequence of length >= 2")
    cfg = weights.config
    total_nll = 0.0
    count = 0
    for start in range(0, corpus.shape[0] - 1, cfg.max_seq):
        window = corpus[start : start + cfg.max_seq]
        if window.shape[0] < 2:
            break
        logits, _, _ = forward_capture(weights, window)
        # Model compute stays float32; the NLL reduction runs in float64 so
        # e.g. the uniform model's perplexity equals the vocab size exactly.
        shifted = logits[:-1].astype(np.float64)
        shifted -= shifted.max(axis=-1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        total_nll += -float(log_probs[np.arange(window.shape[0] - 1), window[1:]].sum())
        count += window.shape[0] - 1
    return math.exp(total_nll / count)
