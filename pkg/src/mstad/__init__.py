"""Multiscale-fusion transformer for supervised anomaly detection on telemetry."""

import os as _os

# Keep the BLAS pool and the parallel elementwise kernels from fighting over
# cores: short BLAS spin-wait, passive OMP waits. Respected only if the
# libraries have not initialized yet; users can override any of these.
_os.environ.setdefault("OPENBLAS_THREAD_TIMEOUT", "4")
_os.environ.setdefault("OMP_WAIT_POLICY", "passive")
_os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"

from .autograd import Tape, Tensor, backward  # noqa: E402
from .data import (  # noqa: E402
    RawSeries,
    SyntheticSpec,
    WindowSet,
    generate_synthetic,
    impute_missing,
    inject_noise,
    load_csv,
    resample_anomaly_ratio,
    slice_windows,
    split_train_test,
    write_csv,
    z_normalize,
)
from .evaluation import (  # noqa: E402
    MetricsReport,
    SweepResult,
    auc,
    confusion,
    emit_report,
    evaluate,
    precision_recall_f1,
    run_sweep,
)
from .model import (  # noqa: E402
    ModelConfig,
    ModelParams,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .training import TrainConfig, TrainLog, bce_loss, cosine_lr, train  # noqa: E402

__all__ = [
    "Tape", "Tensor", "backward",
    "RawSeries", "SyntheticSpec", "WindowSet", "generate_synthetic",
    "impute_missing", "inject_noise", "load_csv", "resample_anomaly_ratio",
    "slice_windows", "split_train_test", "write_csv", "z_normalize",
    "MetricsReport", "SweepResult", "auc", "confusion", "emit_report",
    "evaluate", "precision_recall_f1", "run_sweep",
    "ModelConfig", "ModelParams", "forward", "init_params",
    "load_checkpoint", "save_checkpoint",
    "TrainConfig", "TrainLog", "bce_loss", "cosine_lr", "train",
    "__version__",
]
