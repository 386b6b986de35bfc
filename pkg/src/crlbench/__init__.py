"""Continual-learning benchmark scored on representations, not raw heads.

Trains encoders under class-, task- and data-incremental scenarios with
supervised and contrastive objectives, then evaluates what the encoder
actually learned by retraining only the output layer on a small
class-balanced memory and by downstream transfer.
"""

from .augment import VIEW_POLICIES, augment
from .data import (
    ArrayDataset,
    LabeledExample,
    SourceDataset,
    load_image_folder,
    make_synthetic_dataset,
    write_image_folder,
)
from .errors import ConfigurationError, ProtocolError
from .evaluation import (
    EvalReport,
    ProbeConfig,
    TransferConfig,
    bias_profile,
    downstream_transfer,
    evaluate_accuracy,
    newest_task_mass,
    retrain_output_layer,
)
from .experiment import (
    DatasetConfig,
    ExperimentConfig,
    RunLedger,
    ScenarioConfig,
    run_experiment,
)
from .losses import (
    loss_ce,
    loss_infonce,
    loss_ird,
    loss_lwf_kd,
    loss_ssil,
    loss_supcon,
    mas_importance,
    mas_penalty,
)
from .memory import ExemplarMemory, balanced_batch, greedy_update, quota_update
from .models import (
    ContrastiveState,
    ConvEncoder,
    ModelState,
    MultiHead,
    ProjectionHead,
    SingleHead,
    build_encoder,
    ema_update,
    encoder_checksum,
    expand_single_head,
    forward_features,
    forward_logits,
    queue_push,
)
from .reporting import emit_report
from .scenarios import (
    Task,
    TaskSequence,
    TaskSpec,
    build_class_il,
    build_data_il,
    build_task_il,
    cumulative_test_set,
)
from .training import (
    AlgorithmSpec,
    RegularizerState,
    TrainConfig,
    gdumb_learner,
    joint_learner,
    train_task,
)

__version__ = "0.1.0"
