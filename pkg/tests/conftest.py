import json
import struct

import numpy as np
import pytest

from layerquant import ToyConfig, capture_bundle, init_toy


@pytest.fixture(scope="session")
def toy_config():
    return ToyConfig(seed=42)


@pytest.fixture(scope="session")
def toy_weights(toy_config):
    return init_toy(toy_config)


@pytest.fixture(scope="session")
def toy_bundle(toy_weights):
    return capture_bundle(toy_weights, samples=2)


def oracle_allocate(ranked, prof, budget):
    """Brute-force allocation reference: byte math rewritten from the profile
    fields, minimal INT4 prefix found by linear search over all splits."""
    num_layers = prof.num_layers
    scale_bytes = prof.scale_rows_per_layer * prof.bytes_per_scale
    cost = {
        "fp16": 2 * prof.layer_param_count,
        "int8": prof.layer_param_count + scale_bytes,
        "int4": (prof.layer_param_count + 1) // 2 + scale_bytes,
    }
    fixed = 2 * prof.fixed_param_count + prof.headroom_bytes

    if num_layers * cost["fp16"] + fixed <= budget:
        return ["fp16"] * num_layers
    if num_layers * cost["int8"] + fixed <= budget:
        return ["int8"] * num_layers
    for n4 in range(num_layers + 1):  # smallest INT4 count that fits
        if (n4 * cost["int4"] + (num_layers - n4) * cost["int8"] + fixed) <= budget:
            assignment = ["int8"] * num_layers
            for layer in ranked[:n4]:
                assignment[layer] = "int4"
            return assignment
    return None


def pytest_runtest_logreport(report):
    # One visible pass/fail line per acceptance criterion.
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        outcome = "PASS" if report.passed else "FAIL"
        print(f"\n[acceptance] {outcome} - {name} ({report.duration:.2f}s)", flush=True)


def parse_container(data: bytes):
    """Minimal independent container parser used as a cross-check oracle.

    Deliberately avoids layerquant.container: 8-byte length prefix, JSON
    header, then numpy slicing of the payload.
    """
    (header_len,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8 : 8 + header_len])
    payload = data[8 + header_len :]
    metadata = header.pop("__metadata__", {})
    np_dtypes = {"F32": "<f4", "F16": "<f2", "I8": "|i1", "U8": "|u1"}
    tensors = {}
    for name, spec in header.items():
        begin, end = spec["data_offsets"]
        arr = np.frombuffer(payload[begin:end], dtype=np_dtypes[spec["dtype"]])
        tensors[name] = arr.reshape(spec["shape"])
    return tensors, metadata
