"""Deterministic dual-teacher domain-adaptation sandbox.

A small numpy library that trains a tiny anchor-free detector on a
synthetic two-domain detection task: supervised burn-in on the labeled
source domain, then alternating-domain adaptation with one EMA teacher
per domain, shifting per-step iteration budgets, confidence-filtered
pseudo-labels, and a ramped pseudo-label weight on the source branch.
"""

from .config import (
    ExperimentConfig,
    desk_profile,
    load_config,
    normalize_config,
    paper_scale,
    with_regime,
    with_seed,
)
from .detector import (
    ArchConfig,
    DecodeConfig,
    Detection,
    DetectorOutput,
    ParamVector,
    decode,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    supervised_loss,
    unsupervised_loss,
)
from .evaluation import EvalReport, average_precision, evaluate, iou
from .scenes import (
    AugmentConfig,
    Domain,
    DomainGapConfig,
    GroundTruthObject,
    SceneGeometry,
    SceneSample,
    generate_dataset,
    load_dataset,
    save_dataset,
    strip_labels,
    strong_augment,
    weak_augment,
)
from .schedule import (
    LambdaSchedule,
    TrainDomain,
    ZigzagConfig,
    domain_at,
    fixed_mode,
    lambda_at,
    teacher_to_update,
    zigzag_mode,
)
from .teachers import (
    PseudoLabelPolicy,
    TeacherBank,
    ema_update,
    generate_pseudo_labels,
    merge_dual_pseudo_labels,
)
from .trainer import Datasets, RunResult, TrainerState, build_datasets, run

__version__ = "0.1.0"
