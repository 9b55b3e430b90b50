"""Continual learning for student-teacher visual anomaly detection on edge budgets."""

from .backbone import (
    Backbone,
    BackboneSpec,
    ResourceReport,
    StageSpec,
    build_backbone,
    count_resources,
    desk_spec,
    forward_prefix,
    forward_taps,
)
from .data import Task, load_mvtec_task, synth_task_stream, validate_task
from .engine import ExperimentConfig, RunResult, StrategyConfig, desk_config, evaluate_all, run_experiment, train_on_task
from .metrics import ResultMatrix, aupro, f1_max, forgetting, jt_gap, pr_auc, roc_auc
from .models import (
    AnomalyMap,
    ModelBundle,
    StudentTeacherDetector,
    anomaly_map,
    distillation_loss,
    image_score,
    make_bundle,
    normalize_channels,
)
from .quantizers import (
    Codebook,
    FeatureQuantizer,
    PQCode,
    ProductQuantizer,
    QuantizedFeature,
    fq_dequantize,
    fq_quantize,
    pq_decode,
    pq_encode,
    pq_train,
)
from .replay import FootprintReport, PQParams, ReplayMemory, draw_batch, memory_footprint, update_memory

__version__ = "0.1.0"
