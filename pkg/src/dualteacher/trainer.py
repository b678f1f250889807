"""Two-stage training loop: supervised burn-in, then domain-alternating
zigzag adaptation with dual teachers.

Burn-in trains the student on strongly augmented labeled source batches.
At the transition both teachers start as exact copies of the student.
From then on each iteration trains exactly one domain and EMA-updates
exactly one teacher:

  * thermal iteration: both teachers decode pseudo-labels from the weak
    view of an unlabeled target batch, the student trains on the strong
    view against both sets (two summed loss terms), and the thermal
    teacher absorbs the student.
  * rgb iteration: the supervised loss on labeled source data is
    augmented, once the ramp opens, by lambda-weighted pseudo-label
    terms from both teachers on the same images; the rgb teacher absorbs
    the student. At lambda == 0 no pseudo-labels are generated at all
    and the step is bit-identical to a plain supervised step.

Three regimes share this machinery: "d3t" as above; "mt_baseline" with a
single shared teacher, a combined source+target loss every iteration,
and an EMA update every iteration; "source_only", which never leaves
burn-in. Weak/strong views of a sample share their flip so pseudo-label
boxes stay valid targets for the student's view.

Target-domain ground truth never reaches any training code path: target
samples are label-stripped on ingestion, and labels are only read again
by evaluation. All evaluation rows use the float32-rounded weights a
checkpoint would reload, so re-evaluating a saved checkpoint reproduces
the logged numbers exactly.

Determinism: every random draw comes from a substream keyed by the master
seed plus (tag, iteration, slot), batches come from seeded per-domain
cursors, and gradient reductions run in fixed sample order, so the whole
metric log is byte-identical across runs and thread counts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import (
    REGIME_D3T,
    REGIME_MT_BASELINE,
    REGIME_SOURCE_ONLY,
    ExperimentConfig,
)
from .detector import (
    ArchConfig,
    BatchLossResult,
    ParamVector,
    batch_loss,
    build_targets,
    init_params,
    round_trip_f32,
    targets_from_detections,
    targets_from_objects,
)
from .errors import DualTeacherError, NonFiniteLossError
from .evaluation import EvalReport, evaluate
from .rng import TAG_AUGMENT, TAG_SAMPLER, TAG_TEST_DATA, derive_seed, spawn_streams, substream
from .scenes import SceneSample, generate_dataset, strip_labels, strong_augment, weak_augment
from .schedule import TeacherKind, TrainDomain, domain_at, teacher_to_update
from .teachers import TeacherBank, generate_pseudo_labels_batch

PHASE_BURN_IN = "burn_in"
PHASE_ZIGZAG = "zigzag"

_SAMPLER_SOURCE = 0
_SAMPLER_TARGET = 1


class TrainingError(DualTeacherError):
    """Step called out of phase or against the schedule."""


@dataclass
class Datasets:
    source_train: list[SceneSample]
    target_train: list[SceneSample]
    target_test: list[SceneSample]  # labels used by evaluation only


def build_datasets(cfg: ExperimentConfig) -> Datasets:
    """Generate the train split from cfg.seed and a held-out target test split."""
    source, target = generate_dataset(
        cfg.seed, cfg.data.n_source, cfg.data.n_target, cfg.data.gap, cfg.data.geometry
    )
    test_seed = derive_seed(cfg.seed, TAG_TEST_DATA)
    _, target_test = generate_dataset(
        test_seed, cfg.data.n_test, cfg.data.n_test, cfg.data.gap, cfg.data.geometry
    )
    return Datasets(source_train=source, target_train=target, target_test=target_test)


class _DomainSampler:
    """Seeded shuffled cursor over one domain's sample indices."""

    def __init__(self, seed: int, domain_tag: int, n_items: int):
        self._seed = seed
        self._tag = domain_tag
        self._n = n_items
        self._epoch = 0
        self._pos = 0
        self._order = substream(seed, TAG_SAMPLER, domain_tag, 0).permutation(n_items)

    def next_indices(self, k: int) -> list[int]:
        out: list[int] = []
        while len(out) < k:
            if self._pos >= self._n:
                self._epoch += 1
                self._pos = 0
                self._order = substream(self._seed, TAG_SAMPLER, self._tag, self._epoch).permutation(
                    self._n
                )
            out.append(int(self._order[self._pos]))
            self._pos += 1
        return out


@dataclass
class TrainerState:
    student: ParamVector
    teachers: TeacherBank | None
    iteration: int
    phase: str
    arch: ArchConfig
    metric_log: list = field(default_factory=list)


def _augmented_views(
    cfg: ExperimentConfig, iteration: int, batch: Sequence[SceneSample], with_weak: bool
) -> tuple[list[SceneSample], list[SceneSample]]:
    """Per-sample weak/strong views sharing one flip decision.

    Streams are keyed by (iteration, slot), so whether the weak view is
    materialized cannot perturb the strong view.
    """
    aug = cfg.trainer.augment
    weak_views: list[SceneSample] = []
    strong_views: list[SceneSample] = []
    for k, sample in enumerate(batch):
        flip_rng, weak_rng, strong_rng = spawn_streams(cfg.seed, TAG_AUGMENT, iteration, k, n=3)
        flip = bool(flip_rng.random() < 0.5)
        if with_weak:
            weak_views.append(weak_augment(sample, weak_rng, aug, flip=flip))
        strong_views.append(strong_augment(sample, strong_rng, aug, flip=flip))
    return weak_views, strong_views


def _apply_sgd(state: TrainerState, cfg: ExperimentConfig, grad: ParamVector) -> None:
    state.student = ParamVector(
        values=state.student.values - cfg.trainer.learning_rate * grad.values,
        layout=state.student.layout,
    )


def _train_row(
    state: TrainerState,
    domain: str,
    lam: float,
    loss_total: float,
    loss_sup: float,
    loss_unsup_rgb: float,
    loss_unsup_thr: float,
    n_pseudo_rgb: int,
    n_pseudo_thr: int,
) -> None:
    state.metric_log.append(
        {
            "kind": "train",
            "iter": state.iteration,
            "phase": state.phase,
            "domain": domain,
            "lambda": float(lam),
            "loss_total": float(loss_total),
            "loss_sup": float(loss_sup),
            "loss_unsup_rgb_teacher": float(loss_unsup_rgb),
            "loss_unsup_thr_teacher": float(loss_unsup_thr),
            "n_pseudo_rgb": int(n_pseudo_rgb),
            "n_pseudo_thr": int(n_pseudo_thr),
        }
    )


def _guarded(result_fn: Callable[[], BatchLossResult], state: TrainerState) -> BatchLossResult:
    try:
        return result_fn()
    except NonFiniteLossError as exc:
        raise NonFiniteLossError(f"iteration {state.iteration}: {exc}") from exc


def _supervised_batch(state: TrainerState, cfg: ExperimentConfig, batch: Sequence[SceneSample]) -> BatchLossResult:
    _, strong = _augmented_views(cfg, state.iteration, batch, with_weak=False)
    pixels = np.stack([s.pixels for s in strong])
    bundle = build_targets(state.arch, [targets_from_objects(s.objects) for s in strong])
    return _guarded(lambda: batch_loss(state.student, state.arch, pixels, [(1.0, bundle)]), state)


def burn_in_step(state: TrainerState, cfg: ExperimentConfig, batch: Sequence[SceneSample]) -> TrainerState:
    """One supervised step on labeled source data."""
    if state.phase != PHASE_BURN_IN:
        raise TrainingError(f"burn_in_step outside burn-in phase (iteration {state.iteration})")
    result = _supervised_batch(state, cfg, batch)
    _apply_sgd(state, cfg, result.grad)
    _train_row(state, TrainDomain.RGB.value, 0.0, result.total, result.per_set[0], 0.0, 0.0, 0, 0)
    state.iteration += 1
    return state


def transition_to_zigzag(state: TrainerState, cfg: ExperimentConfig, shared_teacher: bool) -> TrainerState:
    """Create both teachers as bitwise copies of the student."""
    if state.teachers is not None:
        raise TrainingError("transition_to_zigzag called twice")
    if state.iteration != cfg.trainer.burn_in_iterations:
        raise TrainingError(
            f"transition at iteration {state.iteration}, expected {cfg.trainer.burn_in_iterations}"
        )
    state.teachers = TeacherBank.from_student(
        state.student, cfg.trainer.ema_alpha, shared=shared_teacher
    )
    state.phase = PHASE_ZIGZAG
    return state


def thermal_step(state: TrainerState, cfg: ExperimentConfig, batch: Sequence[SceneSample]) -> TrainerState:
    """Unsupervised step on target data: two pseudo-label loss terms, then
    an EMA update of the thermal teacher only."""
    if state.phase != PHASE_ZIGZAG or state.teachers is None:
        raise TrainingError("thermal_step before the zigzag transition")
    if domain_at(cfg.trainer.zigzag, state.iteration) is not TrainDomain.THERMAL:
        raise TrainingError(f"iteration {state.iteration} is not scheduled for the thermal domain")
    if any(s.objects for s in batch):
        raise TrainingError("target batch unexpectedly carries labels")
    weak, strong = _augmented_views(cfg, state.iteration, batch, with_weak=True)
    policy = cfg.trainer.pseudo_thermal
    ps_rgb = generate_pseudo_labels_batch(
        state.teachers.rgb_teacher, weak, policy, cfg.trainer.decode_pseudo, state.arch
    )
    ps_thr = generate_pseudo_labels_batch(
        state.teachers.thermal_teacher, weak, policy, cfg.trainer.decode_pseudo, state.arch
    )
    pixels = np.stack([s.pixels for s in strong])
    bundle_rgb = build_targets(state.arch, [targets_from_detections(d) for d in ps_rgb])
    bundle_thr = build_targets(state.arch, [targets_from_detections(d) for d in ps_thr])
    result = _guarded(
        lambda: batch_loss(
            state.student, state.arch, pixels, [(1.0, bundle_rgb), (1.0, bundle_thr)]
        ),
        state,
    )
    _apply_sgd(state, cfg, result.grad)
    state.teachers.apply_ema(TeacherKind.THERMAL, state.student)
    _train_row(
        state,
        TrainDomain.THERMAL.value,
        cfg.trainer.lambda_value(state.iteration),
        result.total,
        0.0,
        result.per_set[0],
        result.per_set[1],
        sum(len(d) for d in ps_rgb),
        sum(len(d) for d in ps_thr),
    )
    state.iteration += 1
    return state


def rgb_step(state: TrainerState, cfg: ExperimentConfig, batch: Sequence[SceneSample]) -> TrainerState:
    """Supervised source step plus lambda-weighted pseudo-label terms, then
    an EMA update of the rgb teacher only."""
    if state.phase != PHASE_ZIGZAG or state.teachers is None:
        raise TrainingError("rgb_step before the zigzag transition")
    if domain_at(cfg.trainer.zigzag, state.iteration) is not TrainDomain.RGB:
        raise TrainingError(f"iteration {state.iteration} is not scheduled for the rgb domain")
    lam = cfg.trainer.lambda_value(state.iteration)
    if lam == 0.0:
        result = _supervised_batch(state, cfg, batch)
        unsup_rgb = unsup_thr = 0.0
        n_rgb = n_thr = 0
    else:
        weak, strong = _augmented_views(cfg, state.iteration, batch, with_weak=True)
        policy = cfg.trainer.pseudo_rgb
        ps_rgb = generate_pseudo_labels_batch(
            state.teachers.rgb_teacher, weak, policy, cfg.trainer.decode_pseudo, state.arch
        )
        ps_thr = generate_pseudo_labels_batch(
            state.teachers.thermal_teacher, weak, policy, cfg.trainer.decode_pseudo, state.arch
        )
        pixels = np.stack([s.pixels for s in strong])
        bundle_sup = build_targets(state.arch, [targets_from_objects(s.objects) for s in strong])
        bundle_rgb = build_targets(state.arch, [targets_from_detections(d) for d in ps_rgb])
        bundle_thr = build_targets(state.arch, [targets_from_detections(d) for d in ps_thr])
        result = _guarded(
            lambda: batch_loss(
                state.student,
                state.arch,
                pixels,
                [(1.0, bundle_sup), (lam, bundle_rgb), (lam, bundle_thr)],
            ),
            state,
        )
        unsup_rgb, unsup_thr = result.per_set[1], result.per_set[2]
        n_rgb = sum(len(d) for d in ps_rgb)
        n_thr = sum(len(d) for d in ps_thr)
    _apply_sgd(state, cfg, result.grad)
    state.teachers.apply_ema(TeacherKind.RGB, state.student)
    _train_row(
        state,
        TrainDomain.RGB.value,
        lam,
        result.total,
        result.per_set[0],
        unsup_rgb,
        unsup_thr,
        n_rgb,
        n_thr,
    )
    state.iteration += 1
    return state


def mt_combined_step(
    state: TrainerState,
    cfg: ExperimentConfig,
    source_batch: Sequence[SceneSample],
    target_batch: Sequence[SceneSample],
) -> TrainerState:
    """Single-teacher baseline step: supervised source half plus pseudo-label
    target half in one combined loss, EMA update every iteration."""
    if state.phase != PHASE_ZIGZAG or state.teachers is None:
        raise TrainingError("mt_combined_step before the transition")
    if not state.teachers.shared:
        raise TrainingError("mt_combined_step requires the shared-teacher bank")
    if any(s.objects for s in target_batch):
        raise TrainingError("target batch unexpectedly carries labels")
    combined = list(source_batch) + list(target_batch)
    weak, strong = _augmented_views(cfg, state.iteration, combined, with_weak=True)
    n_src = len(source_batch)
    strong_src, strong_tgt = strong[:n_src], strong[n_src:]
    weak_tgt = weak[n_src:]

    src_pixels = np.stack([s.pixels for s in strong_src])
    sup_bundle = build_targets(state.arch, [targets_from_objects(s.objects) for s in strong_src])
    sup = _guarded(
        lambda: batch_loss(state.student, state.arch, src_pixels, [(1.0, sup_bundle)]), state
    )

    pseudo = generate_pseudo_labels_batch(
        state.teachers.thermal_teacher,
        weak_tgt,
        cfg.trainer.pseudo_thermal,
        cfg.trainer.decode_pseudo,
        state.arch,
    )
    tgt_pixels = np.stack([s.pixels for s in strong_tgt])
    tgt_bundle = build_targets(state.arch, [targets_from_detections(d) for d in pseudo])
    unsup = _guarded(
        lambda: batch_loss(state.student, state.arch, tgt_pixels, [(1.0, tgt_bundle)]), state
    )

    grad = ParamVector(values=sup.grad.values + unsup.grad.values, layout=state.student.layout)
    _apply_sgd(state, cfg, grad)
    state.teachers.apply_ema(TeacherKind.THERMAL, state.student)
    _train_row(
        state,
        "mixed",
        0.0,
        sup.total + unsup.total,
        sup.per_set[0],
        0.0,
        unsup.per_set[0],
        0,
        sum(len(d) for d in pseudo),
    )
    state.iteration += 1
    return state


def _append_eval_row(state: TrainerState, cfg: ExperimentConfig, test_set: Sequence[SceneSample]) -> None:
    def model_map(params: ParamVector | None) -> float | None:
        if params is None:
            return None
        report = evaluate(
            round_trip_f32(params),
            test_set,
            cfg.evaluation.decode,
            state.arch,
            cfg.evaluation.iou_threshold,
        )
        return float(report.map)

    bank = state.teachers
    state.metric_log.append(
        {
            "kind": "eval",
            "iter": state.iteration,
            "student_map": model_map(state.student),
            "teacher_rgb_map": model_map(bank.rgb_teacher if bank else None),
            "teacher_thr_map": model_map(bank.thermal_teacher if bank else None),
        }
    )


def deployed_model(state: TrainerState, regime: str) -> tuple[str, ParamVector]:
    """The model a run ships: the thermal teacher when one exists."""
    if regime in (REGIME_D3T, REGIME_MT_BASELINE) and state.teachers is not None:
        return "teacher_thr", state.teachers.thermal_teacher
    return "student", state.student


@dataclass
class RunResult:
    state: TrainerState
    final_report: EvalReport
    deployed: str


def run(
    cfg: ExperimentConfig,
    datasets: Datasets,
    iteration_callback: Callable[[TrainerState], None] | None = None,
) -> RunResult:
    """Execute the configured regime end to end; deterministic in cfg+data."""
    cfg.validate()
    if cfg.regime == REGIME_MT_BASELINE and cfg.trainer.batch_size < 2:
        raise TrainingError("mt_baseline needs batch_size >= 2 for source+target half-batches")
    arch = cfg.detector
    source = datasets.source_train
    target = [strip_labels(s) for s in datasets.target_train]
    state = TrainerState(
        student=init_params(cfg.seed, arch),
        teachers=None,
        iteration=0,
        phase=PHASE_BURN_IN,
        arch=arch,
    )
    src_sampler = _DomainSampler(cfg.seed, _SAMPLER_SOURCE, len(source))
    tgt_sampler = _DomainSampler(cfg.seed, _SAMPLER_TARGET, len(target))
    total = cfg.trainer.total_iterations
    burn_in = cfg.trainer.burn_in_iterations
    batch_size = cfg.trainer.batch_size

    for i in range(total):
        if cfg.regime == REGIME_SOURCE_ONLY or i < burn_in:
            batch = [source[j] for j in src_sampler.next_indices(batch_size)]
            burn_in_step(state, cfg, batch)
        else:
            if state.teachers is None:
                transition_to_zigzag(state, cfg, shared_teacher=cfg.regime == REGIME_MT_BASELINE)
            if cfg.regime == REGIME_D3T:
                if domain_at(cfg.trainer.zigzag, i) is TrainDomain.THERMAL:
                    batch = [target[j] for j in tgt_sampler.next_indices(batch_size)]
                    thermal_step(state, cfg, batch)
                else:
                    batch = [source[j] for j in src_sampler.next_indices(batch_size)]
                    rgb_step(state, cfg, batch)
            else:
                n_src = batch_size // 2
                src_batch = [source[j] for j in src_sampler.next_indices(n_src)]
                tgt_batch = [target[j] for j in tgt_sampler.next_indices(batch_size - n_src)]
                mt_combined_step(state, cfg, src_batch, tgt_batch)
        if iteration_callback is not None:
            iteration_callback(state)
        it = state.iteration
        if it % cfg.eval_interval == 0 or (it == total and total % cfg.eval_interval != 0):
            _append_eval_row(state, cfg, datasets.target_test)

    deployed_name, deployed_params = deployed_model(state, cfg.regime)
    final_report = evaluate(
        round_trip_f32(deployed_params),
        datasets.target_test,
        cfg.evaluation.decode,
        arch,
        cfg.evaluation.iou_threshold,
    )
    state.metric_log.append(
        {
            "kind": "eval_final",
            "iter": state.iteration,
            "model": deployed_name,
            **final_report.to_dict(),
        }
    )
    return RunResult(state=state, final_report=final_report, deployed=deployed_name)


def serialize_metric_rows(rows: Sequence[dict]) -> str:
    """JSON-lines encoding of the metric log (byte-stable)."""
    return "".join(json.dumps(row, separators=(",", ":")) + "\n" for row in rows)
