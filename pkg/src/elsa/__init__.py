"""Elastic low-rank adapters on a tiny frozen transformer.

Train a weight-sharing supernet of LoRA-style adapters, then prune,
quantize, merge, extract, and search over sub-adapter configurations.
"""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigurationError,
    ContractError,
    DimensionError,
    DivergenceError,
    ElsaError,
)
from .tensor import Tape, Tensor, backward, rng_stream
from .elastic import (
    ElasticAdapter,
    SupernetConfig,
    extract_subnet,
    heuristic_midpoint,
    sample_genome,
)
from .compress import (
    CalibrationBatch,
    QParams,
    QuantizedWeights,
    SparseWeights,
    calibrate,
    dequantize,
    encode,
    fake_quant,
    magnitude_score,
    prune,
    quantize,
    wanda_score,
)
from .model import (
    ModelDims,
    SyntheticTask,
    TinyTransformer,
    TrainConfig,
    evaluate,
    make_task,
    train_adapters,
)
from .merge import MergeReport, merge_model
from .search import SearchConfig, brute_force_pareto, cost, evolve, hypervolume
from .metrics import (
    EfficiencyReport,
    bench_latency,
    count_params,
    csv_table,
    markdown_table,
    relative_score,
)
from .checkpoint import load_checkpoint, load_model, save_checkpoint, save_model
from .config import RunConfig

__all__ = [
    "CalibrationBatch",
    "CheckpointError",
    "ConfigurationError",
    "ContractError",
    "DimensionError",
    "DivergenceError",
    "EfficiencyReport",
    "ElasticAdapter",
    "ElsaError",
    "MergeReport",
    "ModelDims",
    "QParams",
    "QuantizedWeights",
    "RunConfig",
    "SearchConfig",
    "SparseWeights",
    "SupernetConfig",
    "SyntheticTask",
    "Tape",
    "Tensor",
    "TinyTransformer",
    "TrainConfig",
    "backward",
    "bench_latency",
    "brute_force_pareto",
    "calibrate",
    "cost",
    "count_params",
    "csv_table",
    "dequantize",
    "encode",
    "evaluate",
    "evolve",
    "extract_subnet",
    "fake_quant",
    "heuristic_midpoint",
    "hypervolume",
    "load_checkpoint",
    "load_model",
    "magnitude_score",
    "make_task",
    "markdown_table",
    "merge_model",
    "prune",
    "quantize",
    "relative_score",
    "rng_stream",
    "sample_genome",
    "save_checkpoint",
    "save_model",
    "train_adapters",
    "wanda_score",
    "__version__",
]
