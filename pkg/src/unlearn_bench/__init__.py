"""unlearn-bench: deletion-test benchmark for inexact machine unlearning.

Builds the RS / CR / RC / IC deletion tests on small labeled datasets,
trains deterministic dense/conv networks with SGDR-style scheduling,
applies EU-k / CF-k / retrain unlearning baselines, and scores forgetting
(Err, Fgt, CoMI) split into memorization and property generalization,
plus utility and the closed-form scaling of isolation-based unlearning.
"""

from .data import (
    ArrayData,
    AuditedData,
    DataView,
    DeletionPlan,
    LabeledDataset,
    TestSpec,
    dt_for,
    from_idx_files,
    load_idx,
    make_deletion_plan,
    synth_gaussians,
)
from .engine import (
    ArchSpec,
    Model,
    TrainingConfig,
    checkpoint_bytes,
    init_model,
    load_checkpoint,
    lr_at,
    model_from_bytes,
    params_equal,
    precompute_prefix_features,
    predict_probs,
    reinit_suffix,
    save_checkpoint,
    train,
)
from .errors import (
    AggregationError,
    ConfigurationError,
    DeletionSetAccessError,
    EvaluationError,
    IdxFormatError,
    NumericalStabilityError,
    TestSpecError,
    TrainingError,
)
from .harness import (
    ExperimentConfig,
    MethodRow,
    ReportTable,
    RunRecord,
    aggregate,
    experiment_config_from_items,
    export,
    load_experiment_config,
    load_report,
    run_experiment,
    run_many,
)
from .isolation import (
    CurvePoint,
    emit_curves,
    expected_affected,
    full_retrain_prob,
    full_retrain_prob_exact,
    surjection_count,
)
from .metrics import (
    ConfusionMatrix,
    MetricReport,
    MiaConfig,
    comi,
    comi_from_probs,
    confusion_matrix,
    err,
    fgt,
    fgt_confusion,
    fgt_removed_class,
    utility_err,
)
from .unlearn import UnlearnMethod, UnlearnResult, cf_k, eu_k, parse_method, retrain
from .unlearn import apply as apply_unlearning

__version__ = "0.1.0"
