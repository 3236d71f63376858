"""Hyperparameter-free full-KL losses for label distribution learning.

The package replaces the conventional weighted sum "distribution KL +
lambda * L1 expectation error" with a sum of three KL divergences on a
common scale — distribution KL, Gaussian-moment KL, and a shift-KL
smoothness term — so no balancing hyperparameter is needed.  It ships
analytic logit gradients, independent numeric oracles that verify them, a
minimal manually backpropagated MLP trainer, synthetic/CSV datasets, and a
seeded experiment CLI (``fullkl``).
"""

from .grid import (
    DEFAULT_POLICY,
    LabelGrid,
    Moments,
    NumericPolicy,
    Pmf,
    discretize_gaussian,
    make_grid,
    moments,
    softmax,
)
from .losses import (
    FAMILY_FULL_KL,
    FAMILY_REFERENCE,
    LossBreakdown,
    LossSpec,
    ReferenceLossConfig,
    full_kl_grad,
    full_kl_loss,
    gaussian_kl,
    kl_div,
    l1_expectation,
    reference_grad,
    reference_loss,
    smoothness,
)
from .verify import (
    GradCheckReport,
    check_grad,
    fd_grad,
    gaussian_kl_sweep,
    gradient_fidelity,
    numeric_gaussian_kl,
    run_all_checks,
)
from .model import (
    Metrics,
    MlpParams,
    OptimizerState,
    TrainConfig,
    TrainingDivergedError,
    TrainResult,
    evaluate,
    forward,
    init_mlp,
    load_checkpoint,
    predict,
    save_checkpoint,
    train_run,
    train_step,
)
from .data import Dataset, Sample, gen_synthetic, load_csv, save_csv, split
from .runner import (
    ComparisonResult,
    ConfigError,
    ExperimentResult,
    RunConfig,
    compare,
    load_config,
    main,
    run_experiment,
    verify_suite,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # grid
    "DEFAULT_POLICY", "LabelGrid", "Moments", "NumericPolicy", "Pmf",
    "discretize_gaussian", "make_grid", "moments", "softmax",
    # losses
    "FAMILY_FULL_KL", "FAMILY_REFERENCE", "LossBreakdown", "LossSpec",
    "ReferenceLossConfig", "full_kl_grad", "full_kl_loss", "gaussian_kl",
    "kl_div", "l1_expectation", "reference_grad", "reference_loss", "smoothness",
    # verify
    "GradCheckReport", "check_grad", "fd_grad", "gaussian_kl_sweep",
    "gradient_fidelity", "numeric_gaussian_kl", "run_all_checks",
    # model
    "Metrics", "MlpParams", "OptimizerState", "TrainConfig",
    "TrainingDivergedError", "TrainResult", "evaluate", "forward", "init_mlp",
    "load_checkpoint", "predict", "save_checkpoint", "train_run", "train_step",
    # data
    "Dataset", "Sample", "gen_synthetic", "load_csv", "save_csv", "split",
    # runner
    "ComparisonResult", "ConfigError", "ExperimentResult", "RunConfig",
    "compare", "load_config", "main", "run_experiment", "verify_suite",
]
