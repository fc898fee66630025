"""Layer importance from top-k vocabulary projections.

Captures the toy model's residual stream, projects each layer's input and
output hidden states onto the vocabulary, and compares their top-k token
sets. Layers whose sets barely move are scored unimportant; a cosine
baseline is shown next to it.
"""

import numpy as np

from layerquant import (
    ToyConfig,
    capture_bundle,
    init_toy,
    project_to_vocab,
    score_layers,
    topk_indices,
)

K = 10

weights = init_toy(ToyConfig(seed=42))
bundle = capture_bundle(weights, samples=4)
print(f"bundle: {bundle.num_layers} layers, {bundle.num_samples} samples, "
      f"d={bundle.hidden_dim}, vocab={bundle.vocab_size}\n")

# Peek at the raw machinery for one layer and one sample.
c_in = topk_indices(project_to_vocab(bundle.x_in[0, 0], bundle.w_e), K)
c_out = topk_indices(project_to_vocab(bundle.x_out[0, 0], bundle.w_e), K)
print(f"layer 0, sample 0: top-{K} in  = {sorted(c_in)}")
print(f"                   top-{K} out = {sorted(c_out)}")
print(f"                   shared tokens: {len(c_in & c_out)} of {K}\n")

jaccard = score_layers(bundle, metric="jaccard", k=K)
cosine = score_layers(bundle, metric="cosine")

print("layer   jaccard score   cosine score")
for i in range(bundle.num_layers):
    print(f"{i:<8}{jaccard.scores[i]:<16.4f}{cosine.scores[i]:.6f}")
print()
print("ascending importance (jaccard):", jaccard.ordering)
print("ascending importance (cosine): ", cosine.ordering)
print()
print("CSV for plotting:\n" + jaccard.to_csv())
