"""Layer-adaptive mixed-precision weight quantization under a memory budget.

The pipeline: capture per-layer last-token hidden states into a calibration
bundle, score each layer's importance from the top-k vocabulary projections
of its input and output (or a cosine baseline), allocate FP16/INT8/INT4 per
layer so the model fits the available memory, and execute per-channel
symmetric quantization over a single-file tensor store. A seeded toy
decoder-only transformer closes the loop at desk scale.
"""

from .bundle import BundleError, CalibrationBundle, load_bundle, load_bundle_file, save_bundle, write_bundle
from .container import ContainerError, TensorEntry, TensorStore, load_store, read_store, save_store, write_store
from .importance import (
    DEFAULT_TOP_K,
    ImportanceReport,
    cosine_importance,
    jaccard_importance,
    project_to_vocab,
    rank_ascending,
    score_layers,
    topk_indices,
)
from .planner import (
    BudgetError,
    DeviceReport,
    InsufficientMemoryError,
    ModelProfile,
    QuantPlan,
    allocate_precision,
    average_bits,
    estimate_total,
    layer_bytes,
    load_profile,
    parse_memory_size,
    resolve_budget,
    select_device,
)
from .quantizer import (
    QuantizedTensor,
    apply_plan,
    dequantize,
    pack_int4,
    quantize_row,
    quantize_tensor,
    unpack_int4,
)
from .toymodel import (
    ToyConfig,
    ToyWeights,
    capture_bundle,
    forward_capture,
    init_toy,
    load_dequantized,
    perplexity,
    synth_corpus,
    weights_from_store,
    weights_to_store_bytes,
)

__version__ = "0.1.0"
