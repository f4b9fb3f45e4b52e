"""Neural stochastic differential equation lab.

Networks whose hidden state evolves under a learned drift with configurable
diagonal noise, trained by forward sensitivity propagation, plus the
stability, robustness and reproducibility tooling around them.
"""
from .attacks import AttackConfig, AttackResult, depth_probe, pgd_attack
from .backend import backend_name, has_compiled
from .data import (
    CorruptionConfig,
    Dataset,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
    corrupt,
    load_idx,
    make_spirals,
    make_two_moons,
)
from .dynamics import (
    DiffusionSpec,
    DriftNet,
    LinearDrift,
    lipschitz_estimate,
    load_params,
    save_params,
)
from .model import (
    ClassifierModel,
    PredictOptions,
    forward,
    input_gradients,
    load_checkpoint,
    model_gradient,
    predict_ttn,
    predict_ttn_batch,
    save_checkpoint,
    softmax,
)
from .sensitivity import (
    fd_gradient_oracle,
    integrate_augmented,
    mc_gradient,
    pathwise_gradient,
    unrolled_gradient,
)
from .solver import (
    NumericOverflowError,
    SolveOptions,
    Trajectory,
    integrate,
    integrate_coupled,
)
from .stability import (
    corollary_bound,
    exponent_zero_crossing,
    gbm_closed_form,
    lyapunov_exponent,
    perturbation_trace,
    stability_sweep,
)
from .streams import (
    BrownianPath,
    RandomStream,
    TimeGrid,
    make_time_grid,
    sample_brownian_increments,
    sample_brownian_path,
)
from .training import (
    Metrics,
    OptimizerConfig,
    TrainDivergenceError,
    evaluate,
    evaluate_corruptions,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackResult",
    "BrownianPath",
    "ClassifierModel",
    "CorruptionConfig",
    "Dataset",
    "DiffusionSpec",
    "DriftNet",
    "IdxCountMismatchError",
    "IdxMagicError",
    "IdxTruncatedError",
    "LinearDrift",
    "Metrics",
    "NumericOverflowError",
    "OptimizerConfig",
    "PredictOptions",
    "RandomStream",
    "SolveOptions",
    "TimeGrid",
    "TrainDivergenceError",
    "Trajectory",
    "backend_name",
    "corollary_bound",
    "corrupt",
    "depth_probe",
    "evaluate",
    "evaluate_corruptions",
    "exponent_zero_crossing",
    "fd_gradient_oracle",
    "forward",
    "gbm_closed_form",
    "has_compiled",
    "input_gradients",
    "integrate",
    "integrate_augmented",
    "integrate_coupled",
    "lipschitz_estimate",
    "load_checkpoint",
    "load_idx",
    "load_params",
    "lyapunov_exponent",
    "make_spirals",
    "make_time_grid",
    "make_two_moons",
    "mc_gradient",
    "model_gradient",
    "pathwise_gradient",
    "perturbation_trace",
    "pgd_attack",
    "predict_ttn",
    "predict_ttn_batch",
    "sample_brownian_increments",
    "sample_brownian_path",
    "save_checkpoint",
    "save_params",
    "softmax",
    "stability_sweep",
    "train",
    "unrolled_gradient",
    "__version__",
]
