"""The whole pipeline on the toy model, through the same files the CLI uses.

capture -> importance -> plan -> quantize -> evaluate, inside a temp
directory. Equivalent CLI invocations are printed alongside each step.
"""

import json
import tempfile
from pathlib import Path

from layerquant import (
    ImportanceReport,
    QuantPlan,
    allocate_precision,
    apply_plan,
    capture_bundle,
    init_toy,
    load_dequantized,
    load_profile,
    load_store,
    perplexity,
    rank_ascending,
    save_bundle,
    score_layers,
    synth_corpus,
    weights_from_store,
    weights_to_store_bytes,
    write_store,
)
from layerquant.toymodel import ToyConfig

workdir = Path(tempfile.mkdtemp(prefix="layerquant-demo-"))
print(f"working in {workdir}\n")

# 1. capture  (layerquant capture-toy --out-weights w.st --out-bundle b.st --seed 42 --samples 2)
config = ToyConfig(seed=42)
weights = init_toy(config)
(workdir / "w.st").write_bytes(weights_to_store_bytes(weights))
save_bundle(workdir / "b.st", capture_bundle(weights, samples=2), model_id="toy")
print(f"1. captured weights ({(workdir / 'w.st').stat().st_size} B) and calibration bundle")

# 2. importance  (layerquant importance --bundle b.st --out imp.json --metric jaccard --k 10)
report = score_layers(capture_bundle(weights, samples=2), metric="jaccard", k=10)
(workdir / "imp.json").write_text(report.to_json())
print(f"2. layer scores: {[round(s, 3) for s in report.scores]}, "
      f"least important first: {report.ordering}")

# 3. plan  (layerquant plan --importance imp.json --profile toy --memory 60KB --out plan.json)
profile = load_profile("toy")
plan = allocate_precision(rank_ascending(report), profile, budget_bytes=60_000)
(workdir / "plan.json").write_text(plan.to_json())
counts = plan.counts()
print(f"3. plan under 60 kB: {counts['fp16']} fp16 / {counts['int8']} int8 / "
      f"{counts['int4']} int4, avg {plan.average_bits} bits, "
      f"predicted {plan.predicted_bytes} B")

# 4. quantize  (layerquant quantize --weights w.st --plan plan.json --out q.st)
store = load_store(workdir / "w.st")
quantized = apply_plan(store, plan)
(workdir / "q.st").write_bytes(write_store(dict(quantized.items()), quantized.metadata))
print(f"4. quantized store: {(workdir / 'q.st').stat().st_size} B "
      f"(was {(workdir / 'w.st').stat().st_size} B)")

# 5. evaluate  (layerquant eval-toy --weights w.st --quantized q.st)
corpus = synth_corpus(config)
ppl_fp = perplexity(weights_from_store(store), corpus)
ppl_quant = perplexity(load_dequantized(load_store(workdir / "q.st")), corpus)
result = {"ppl_fp": ppl_fp, "ppl_quant": ppl_quant,
          "relative_delta": (ppl_quant - ppl_fp) / ppl_fp}
print(f"5. perplexity: {json.dumps(result, indent=2)}")
