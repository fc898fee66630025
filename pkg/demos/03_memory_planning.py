"""Budget-driven precision allocation across the shipped model profiles.

For each profile the allocator picks all-FP16, all-INT8, a mixed INT8/INT4
split (least-important layers demoted first), or reports that the budget is
too small for even the all-INT4 model.
"""

from layerquant import InsufficientMemoryError, allocate_precision, estimate_total, load_profile

GB = 10**9

for name, budgets_gb in [
    ("llama2-7b", [16, 12, 8, 6, 4, 3]),
    ("llama2-13b", [25, 13, 10, 7, 6]),
    ("llama3-8b", [16, 9, 7, 6, 5]),
]:
    profile = load_profile(name)
    n = profile.num_layers
    w16 = (estimate_total(profile, ["fp16"] * n) - profile.headroom_bytes) / GB
    w4 = (estimate_total(profile, ["int4"] * n) - profile.headroom_bytes) / GB
    print(f"=== {name}: {n} layers, FP16 weights {w16:.2f} GB, all-INT4 floor {w4:.2f} GB")
    print("budget   fp16  int8  int4  avg bits  predicted")
    ranked = list(range(n))  # stand-in ordering; real runs use an importance report
    for gb in budgets_gb:
        try:
            plan = allocate_precision(ranked, profile, gb * GB)
        except InsufficientMemoryError as exc:
            print(f"{gb:>4} GB  insufficient ({exc.required_bytes / GB:.2f} GB needed)")
            continue
        c = plan.counts()
        print(f"{gb:>4} GB  {c['fp16']:<6}{c['int8']:<6}{c['int4']:<6}"
              f"{plan.average_bits:<10g}{plan.predicted_bytes / GB:.2f} GB")
    print()
