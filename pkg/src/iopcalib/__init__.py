"""Post-hoc calibration of classifier logits.

Calibrators map logit vectors to logit vectors and are trained on held-out
data. The intra order-preserving families guarantee that every output ranks
its coordinates exactly like its input, so calibration cannot change top-k
predictions; the classic scaling baselines and an unconstrained MLP ablation
are included for comparison, along with a calibration metric suite, dataset
IO, and a command-line interface.
"""

__version__ = "0.1.0"

from .calibrators import (
    METHODS,
    DiagonalCalibrator,
    DirichletScaling,
    MatrixScaling,
    OrderInvariantCalibrator,
    OrderPreservingCalibrator,
    TemperatureScaling,
    UnconstrainedCalibrator,
    dirichlet_scale,
    intra_op_forward,
    matrix_scale,
    off_diagonal_penalty,
    temperature_scale,
)
from .data import (
    FoldSplit,
    LogitDataset,
    SynthSpec,
    kfold_split,
    load_binary,
    load_csv,
    save_binary,
    save_csv,
    synth_generate,
)
from .exceptions import (
    CalibrationError,
    ContractViolationError,
    DataFormatError,
    InvalidConfigError,
    InvalidInputError,
    InvalidParameterError,
    TrainingDivergedError,
)
from .metrics import (
    METRIC_NAMES,
    BinRecord,
    MetricReport,
    accuracy_topk,
    brier,
    classwise_ece,
    compute_report,
    debiased_ece,
    ece,
    marginal_ce,
    nll_metric,
    reliability_diagram,
)
from .network import (
    MlpSpec,
    MonotoneNetSpec,
    clenshaw_curtis,
    init_mlp_params,
    mlp_forward,
    monotone_eval,
    monotone_eval_batch,
)
from .ordering import (
    SortResult,
    assemble_intra_op,
    rank_signature,
    reverse_cumsum,
    same_ranking,
    sort_descending,
)
from .training import (
    CalibrationEnsemble,
    CVResult,
    FitResult,
    TrainConfig,
    cross_validate,
    mean_nll,
    nll_loss,
    objective,
    objective_grad,
)
from .modelfile import load_model, save_model

__all__ = [
    "__version__",
    # calibrators
    "METHODS",
    "TemperatureScaling",
    "MatrixScaling",
    "DirichletScaling",
    "DiagonalCalibrator",
    "OrderInvariantCalibrator",
    "OrderPreservingCalibrator",
    "UnconstrainedCalibrator",
    "temperature_scale",
    "matrix_scale",
    "dirichlet_scale",
    "off_diagonal_penalty",
    "intra_op_forward",
    # ordering
    "SortResult",
    "sort_descending",
    "reverse_cumsum",
    "assemble_intra_op",
    "same_ranking",
    "rank_signature",
    # network
    "MlpSpec",
    "MonotoneNetSpec",
    "init_mlp_params",
    "mlp_forward",
    "clenshaw_curtis",
    "monotone_eval",
    "monotone_eval_batch",
    # training
    "TrainConfig",
    "FitResult",
    "CVResult",
    "CalibrationEnsemble",
    "nll_loss",
    "mean_nll",
    "objective",
    "objective_grad",
    "cross_validate",
    # metrics
    "METRIC_NAMES",
    "BinRecord",
    "MetricReport",
    "ece",
    "classwise_ece",
    "brier",
    "nll_metric",
    "accuracy_topk",
    "reliability_diagram",
    "debiased_ece",
    "marginal_ce",
    "compute_report",
    # data
    "LogitDataset",
    "SynthSpec",
    "FoldSplit",
    "load_csv",
    "save_csv",
    "load_binary",
    "save_binary",
    "synth_generate",
    "kfold_split",
    # model files
    "save_model",
    "load_model",
    # exceptions
    "CalibrationError",
    "InvalidInputError",
    "InvalidParameterError",
    "InvalidConfigError",
    "ContractViolationError",
    "TrainingDivergedError",
    "DataFormatError",
]
