"""Block-tiled decayed linear attention with oracles, gradient checks, and benchmarks."""

from .bench import (
    BenchRecord,
    ScalingVerdict,
    block_size_sweep,
    classify,
    emit_csv,
    scaling_sweep,
    time_batched_forward,
    time_pass,
)
from .kernel import (
    BlockDecayDiag,
    TiledForwardResult,
    batched_backward,
    batched_forward,
    block_decay,
    chunked_forward,
    tiled_backward,
    tiled_forward,
)
from .matrix import (
    AttentionConfig,
    FixtureFormatError,
    load_fixture,
    precision_of,
    random_matrix,
    save_fixture,
)
from .reference import (
    GradBundle,
    KvState,
    decay_mask,
    inference_step,
    oracle_backward,
    oracle_forward,
    power_table,
    recurrent_forward,
)
from .verify import (
    ErrorReport,
    GridCase,
    SuiteConfig,
    compare,
    default_grid,
    default_gradcheck_grid,
    finite_diff_grads,
    run_equivalence_suite,
    run_gradcheck_suite,
    small_grid,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "BenchRecord",
    "BlockDecayDiag",
    "ErrorReport",
    "FixtureFormatError",
    "GradBundle",
    "GridCase",
    "KvState",
    "ScalingVerdict",
    "SuiteConfig",
    "TiledForwardResult",
    "batched_backward",
    "batched_forward",
    "block_decay",
    "block_size_sweep",
    "chunked_forward",
    "classify",
    "compare",
    "decay_mask",
    "default_grid",
    "default_gradcheck_grid",
    "emit_csv",
    "finite_diff_grads",
    "inference_step",
    "load_fixture",
    "oracle_backward",
    "oracle_forward",
    "power_table",
    "precision_of",
    "random_matrix",
    "recurrent_forward",
    "run_equivalence_suite",
    "run_gradcheck_suite",
    "save_fixture",
    "scaling_sweep",
    "small_grid",
    "tiled_backward",
    "tiled_forward",
    "time_batched_forward",
    "time_pass",
]
