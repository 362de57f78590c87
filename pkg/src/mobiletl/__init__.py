"""Memory-efficient on-device training engine for inverted-residual-block
networks, with an analytical FLOPs/activation-memory profiler that is
byte-audited against the live autograd tape."""

import os as _os

# Thread caps must land before numpy's first import anywhere in the package.
_threads = _os.environ.get("MOBILETL_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .tensor import (  # noqa: E402
    DType, SavedKind, ShapeError, StateError, Tape, Tensor,
)
from .layers import ActBackwardMode, BNMode  # noqa: E402
from .model import (  # noqa: E402
    BlockSpec, FormatError, Model, ModelSpec, SpecError,
    build_model, bundled_spec_path, load_checkpoint, load_spec,
    save_checkpoint,
)
from .policy import (  # noqa: E402
    PolicyError, TrainPolicy, apply_policy, load_policy,
    quantize_per_tensor_i8,
)
from .profiler import (  # noqa: E402
    audit_against_tape, compare_strategies, profile_model, profile_reduction,
)
from .trainer import (  # noqa: E402
    DatasetHandle, OptimizerCfg, TrainReport, evaluate, load_dataset,
    save_dataset, synthetic_blobs, train,
)
from .theory import (  # noqa: E402
    BoundParams, bound_eval, proposition_check, twin_divergence,
)
from .gradcheck import run_suite  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "ActBackwardMode", "BNMode", "BlockSpec", "BoundParams", "DType",
    "DatasetHandle", "FormatError", "Model", "ModelSpec", "OptimizerCfg",
    "PolicyError", "SavedKind", "ShapeError", "SpecError", "StateError",
    "Tape", "Tensor", "TrainPolicy", "TrainReport", "apply_policy",
    "audit_against_tape", "bound_eval", "build_model", "bundled_spec_path",
    "compare_strategies", "evaluate", "load_checkpoint", "load_dataset",
    "load_policy", "load_spec", "profile_model", "profile_reduction",
    "proposition_check", "quantize_per_tensor_i8", "run_suite",
    "save_checkpoint", "save_dataset", "synthetic_blobs", "train",
    "twin_divergence",
]
