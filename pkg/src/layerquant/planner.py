"""Memory budgeting and per-layer precision allocation.

Given a byte-cost profile of a model and a resolved memory budget, the
allocator picks one of four outcomes: everything FP16, everything INT8, a
mixed INT8/INT4 split, or "insufficient memory". In the mixed case the
least-important layers (a prefix of the ascending-importance ordering) go to
INT4 and the INT4 count is the smallest that still fits, which maximizes the
number of INT8 layers.
"""

from __future__ import annotations

import json
import re
import subprocess
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Literal, Sequence

Precision = Literal["fp16", "int8", "int4"]
PRECISIONS: tuple[Precision, ...] = ("fp16", "int8", "int4")

_BITS = {"fp16": 16, "int8": 8, "int4": 4}

DEFAULT_BUDGET_ENV = "LSAQ_MEMORY_BUDGET"


class BudgetError(ValueError):
    """No budget source yielded a value, or a size string failed to parse."""


class InsufficientMemoryError(RuntimeError):
    """Budget is below the all-INT4 footprint; retry once memory frees up."""

    def __init__(self, budget_bytes: int, required_bytes: int):
        super().__init__(
            f"budget {budget_bytes} B is below the minimum (all-INT4) footprint "
            f"of {required_bytes} B; wait for memory to be released"
        )
        self.budget_bytes = budget_bytes
        self.required_bytes = required_bytes


@dataclass(frozen=True)
class ModelProfile:
    """Byte costs driving all planner arithmetic.

    ``layer_param_count`` is the parameter count of one transformer layer
    (uniform across layers); ``fixed_param_count`` covers everything outside
    the repeated layers (embeddings, head, final norm), always kept at FP16.
    ``headroom_bytes`` reserves room for inference intermediates on top of
    the weight bytes.
    """

    model_id: str
    num_layers: int
    layer_param_count: int
    fixed_param_count: int
    scale_rows_per_layer: int
    headroom_bytes: int = 0
    bytes_per_scale: int = 4
    notes: str = ""

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("profile needs at least one layer")
        for name in ("layer_param_count", "fixed_param_count", "scale_rows_per_layer",
                     "headroom_bytes", "bytes_per_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_json(self) -> str:
        doc = {
            "model_id": self.model_id,
            "num_layers": self.num_layers,
            "layer_param_count": self.layer_param_count,
            "fixed_param_count": self.fixed_param_count,
            "scale_rows_per_layer": self.scale_rows_per_layer,
            "headroom_bytes": self.headroom_bytes,
            "bytes_per_scale": self.bytes_per_scale,
            "notes": self.notes,
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ModelProfile":
        return cls(**json.loads(text))


def layer_bytes(profile: ModelProfile, precision: Precision) -> int:
    """Bytes one layer occupies at the given precision (incl. scale vectors)."""
    p = profile.layer_param_count
    scale_bytes = profile.scale_rows_per_layer * profile.bytes_per_scale
    if precision == "fp16":
        return 2 * p
    if precision == "int8":
        return p + scale_bytes
    if precision == "int4":
        return (p + 1) // 2 + scale_bytes
    raise ValueError(f"unknown precision {precision!r}")


def estimate_total(profile: ModelProfile, assignment: Sequence[Precision]) -> int:
    """Planning estimate: layer bytes + FP16 fixed tensors + headroom."""
    if len(assignment) != profile.num_layers:
        raise ValueError(
            f"assignment has {len(assignment)} entries for a {profile.num_layers}-layer profile"
        )
    total = sum(layer_bytes(profile, prec) for prec in assignment)
    return total + 2 * profile.fixed_param_count + profile.headroom_bytes


def average_bits(assignment: Sequence[Precision]) -> float:
    """Layer-count-weighted mean bit width of an assignment."""
    if not assignment:
        raise ValueError("assignment must cover at least one layer")
    return sum(_BITS[p] for p in assignment) / len(assignment)


@dataclass(frozen=True)
class QuantPlan:
    """A precision per layer plus the budget math that produced it."""

    model_id: str
    budget_bytes: int
    assignment: list[Precision]
    ordering_used: list[int]
    predicted_bytes: int
    average_bits: float

    def counts(self) -> dict[Precision, int]:
        return {p: self.assignment.count(p) for p in PRECISIONS}

    def to_json(self) -> str:
        doc = {
            "model_id": self.model_id,
            "budget_bytes": self.budget_bytes,
            "assignment": self.assignment,
            "ordering_used": self.ordering_used,
            "predicted_bytes": self.predicted_bytes,
            "average_bits": self.average_bits,
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "QuantPlan":
        doc = json.loads(text)
        plan = cls(
            model_id=doc["model_id"],
            budget_bytes=int(doc["budget_bytes"]),
            assignment=list(doc["assignment"]),
            ordering_used=[int(i) for i in doc["ordering_used"]],
            predicted_bytes=int(doc["predicted_bytes"]),
            average_bits=float(doc["average_bits"]),
        )
        bad = [p for p in plan.assignment if p not in PRECISIONS]
        if bad:
            raise ValueError(f"unknown precisions in plan: {bad}")
        return plan


def allocate_precision(ranked: Sequence[int], profile: ModelProfile, budget_bytes: int) -> QuantPlan:
    """Assign a precision to every layer under the budget.

    ``ranked`` lists layers least-important first. Branches, in order:
    all-FP16 if it fits, else all-INT8 if it fits, else the minimal prefix of
    ``ranked`` goes INT4 with the rest INT8, else the budget cannot hold even
    the all-INT4 model and :class:`InsufficientMemoryError` is raised.
    """
    num_layers = profile.num_layers
    if sorted(ranked) != list(range(num_layers)):
        raise ValueError(f"ranking must be a permutation of range({num_layers})")

    total_fp16 = estimate_total(profile, ["fp16"] * num_layers)
    total_int8 = estimate_total(profile, ["int8"] * num_layers)
    total_int4 = estimate_total(profile, ["int4"] * num_layers)

    assignment: list[Precision]
    if budget_bytes >= total_fp16:
        assignment = ["fp16"] * num_layers
    elif budget_bytes >= total_int8:
        assignment = ["int8"] * num_layers
    elif budget_bytes >= total_int4:
        # Start from all-INT4 and promote as many layers to INT8 as the slack
        # allows; each promotion costs the per-layer INT8-to-INT4 saving.
        int8_slack = budget_bytes - total_int4
        saving_8to4 = layer_bytes(profile, "int8") - layer_bytes(profile, "int4")
        n_int4 = num_layers - int8_slack // saving_8to4
        n_int4 = max(0, min(num_layers, n_int4))
        assignment = ["int8"] * num_layers
        for layer in ranked[:n_int4]:
            assignment[layer] = "int4"
    else:
        raise InsufficientMemoryError(budget_bytes, total_int4)

    predicted = estimate_total(profile, assignment)
    assert predicted <= budget_bytes, "allocation exceeded its own budget"
    return QuantPlan(
        model_id=profile.model_id,
        budget_bytes=budget_bytes,
        assignment=assignment,
        ordering_used=list(ranked),
        predicted_bytes=predicted,
        average_bits=average_bits(assignment),
    )


# --- device selection and budget resolution ---------------------------------

@dataclass(frozen=True)
class DeviceReport:
    device_id: str
    free_bytes: int

    def __post_init__(self):
        if self.free_bytes < 0:
            raise ValueError("free_bytes must be non-negative")


def select_device(reports: Iterable[DeviceReport]) -> str:
    """Device with the most free memory; ties go to the smaller device id."""
    reports = list(reports)
    if not reports:
        raise ValueError("no devices reported")
    best = min(reports, key=lambda r: (-r.free_bytes, r.device_id))
    return best.device_id


def probe_nvidia_devices() -> list[DeviceReport]:
    """Query nvidia-smi for per-device free memory; empty list if unavailable."""
    try:
        out = subprocess.run(
            ["nvidia-smi", "--query-gpu=index,memory.free", "--format=csv,noheader,nounits"],
            capture_output=True, text=True, timeout=10, check=True,
        ).stdout
    except (OSError, subprocess.SubprocessError):
        return []
    reports = []
    for line in out.strip().splitlines():
        idx, free_mib = (part.strip() for part in line.split(","))
        reports.append(DeviceReport(device_id=f"cuda:{idx}", free_bytes=int(free_mib) * 1024 * 1024))
    return reports


def load_devices_file(path: str | Path) -> list[DeviceReport]:
    """Read a JSON device fixture: [{"device_id": ..., "free_bytes": ...}, ...]."""
    doc = json.loads(Path(path).read_text())
    return [DeviceReport(device_id=d["device_id"], free_bytes=int(d["free_bytes"])) for d in doc]


_SIZE_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([a-zA-Z]*)\s*$")
_UNITS = {
    "": 1, "b": 1,
    "k": 10**3, "kb": 10**3, "kib": 2**10,
    "m": 10**6, "mb": 10**6, "mib": 2**20,
    "g": 10**9, "gb": 10**9, "gib": 2**30,
}


def parse_memory_size(text: str) -> int:
    """Parse "6GB" -> 6*10^9, "8GiB" -> 8*2^30, bare numbers -> bytes."""
    m = _SIZE_RE.match(text)
    if not m:
        raise BudgetError(f"cannot parse memory size {text!r}")
    value, unit = m.group(1), m.group(2).lower()
    if unit not in _UNITS:
        raise BudgetError(f"unknown memory unit {m.group(2)!r} in {text!r}")
    return int(float(value) * _UNITS[unit])


BudgetProvider = Callable[[], "int | None"]


def flag_budget(value: str | None) -> BudgetProvider:
    return lambda: parse_memory_size(value) if value else None


def env_budget(environ, name: str = DEFAULT_BUDGET_ENV) -> BudgetProvider:
    def provider() -> int | None:
        raw = environ.get(name)
        return parse_memory_size(raw) if raw else None
    return provider


def config_budget(path: str | Path | None, key: str = "memory_budget") -> BudgetProvider:
    def provider() -> int | None:
        if path is None or not Path(path).exists():
            return None
        raw = json.loads(Path(path).read_text()).get(key)
        if raw is None:
            return None
        return parse_memory_size(raw) if isinstance(raw, str) else int(raw)
    return provider


def device_budget(device_source: Callable[[], list[DeviceReport]]) -> BudgetProvider:
    """Budget = free memory of the best device reported by ``device_source``."""
    def provider() -> int | None:
        reports = device_source()
        if not reports:
            return None
        chosen = select_device(reports)
        return next(r.free_bytes for r in reports if r.device_id == chosen)
    return provider


def resolve_budget(providers: Sequence[BudgetProvider]) -> int:
    """First provider that yields a value wins (callers order by priority)."""
    for provider in providers:
        value = provider()
        if value is not None:
            return value
    raise BudgetError("no memory budget available: pass --memory, set "
                      f"{DEFAULT_BUDGET_ENV}, or provide a device source")


# --- shipped profiles --------------------------------------------------------

#: Profiles bundled with the package, keyed by short name.
SHIPPED_PROFILES = ("toy", "llama2-7b", "llama2-13b", "llama3-8b")


def load_profile(name_or_path: str | Path) -> ModelProfile:
    """Load a shipped profile by name, or any profile JSON by path."""
    name = str(name_or_path)
    if name in SHIPPED_PROFILES:
        text = resources.files("layerquant.profiles").joinpath(f"{name}.json").read_text()
        return ModelProfile.from_json(text)
    path = Path(name_or_path)
    if not path.exists():
        raise FileNotFoundError(
            f"no profile named {name!r}; shipped profiles: {', '.join(SHIPPED_PROFILES)}"
        )
    return ModelProfile.from_json(path.read_text())
