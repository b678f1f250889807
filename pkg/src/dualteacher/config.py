"""Experiment configuration: dataclasses, strict JSON normalization, profiles.

The default-constructed `ExperimentConfig` is the desk profile: a run
small enough to finish in seconds on a laptop CPU while keeping the
full-scale settings' ratios (burn-in fraction, budget-to-step ratio,
ramp placement, EMA horizon relative to run length). `paper_scale()`
returns the full-size parameterization for schedule inspection.

JSON handling is strict: unknown keys are rejected with their path, and
the normalized form written back to a run directory spells out every
default.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .detector import ArchConfig, DecodeConfig
from .errors import ConfigurationError
from .scenes import AugmentConfig, DomainGapConfig, SceneGeometry
from .schedule import LambdaSchedule, ZigzagConfig, lambda_at
from .teachers import PseudoLabelPolicy

REGIME_D3T = "d3t"
REGIME_MT_BASELINE = "mt_baseline"
REGIME_SOURCE_ONLY = "source_only"
REGIMES = (REGIME_D3T, REGIME_MT_BASELINE, REGIME_SOURCE_ONLY)

LAMBDA_DYNAMIC = "dynamic"
LAMBDA_FIXED = "fixed"


@dataclass(frozen=True)
class DataConfig:
    n_source: int = 600
    n_target: int = 600
    n_test: int = 150
    gap: DomainGapConfig = DomainGapConfig()
    geometry: SceneGeometry = SceneGeometry()

    def validate(self) -> None:
        if self.n_source < 1 or self.n_target < 1 or self.n_test < 1:
            raise ConfigurationError("dataset sizes must be >= 1")
        self.gap.validate()
        self.geometry.validate()


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 0.005
    batch_size: int = 4
    total_iterations: int = 4000
    burn_in_iterations: int = 800
    ema_alpha: float = 0.996
    zigzag: ZigzagConfig = ZigzagConfig(
        z0_thr=5, z0_rgb=15, beta=5, step_length=400, total_iterations=4000, burn_in_iterations=800
    )
    lambda_mode: str = LAMBDA_DYNAMIC
    lambda_fixed: float = 0.0
    lambda_schedule: LambdaSchedule = LambdaSchedule(start_iter=1000, ramp_iters=1000)
    pseudo_thermal: PseudoLabelPolicy = PseudoLabelPolicy.score_threshold(0.7)
    pseudo_rgb: PseudoLabelPolicy = PseudoLabelPolicy.top_percent(0.01)
    decode_pseudo: DecodeConfig = DecodeConfig(score_threshold=0.25, nms_iou=0.5)
    augment: AugmentConfig = AugmentConfig()
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0 < self.burn_in_iterations <= self.total_iterations:
            raise ConfigurationError("need 0 < burn_in_iterations <= total_iterations")
        if not 0.0 < self.ema_alpha < 1.0:
            raise ConfigurationError("ema_alpha must lie strictly in (0, 1)")
        if self.lambda_mode not in (LAMBDA_DYNAMIC, LAMBDA_FIXED):
            raise ConfigurationError(f"unknown lambda_mode {self.lambda_mode!r}")
        if not 0.0 <= self.lambda_fixed <= 1.0:
            raise ConfigurationError("lambda_fixed must lie in [0, 1]")
        if (
            self.zigzag.total_iterations != self.total_iterations
            or self.zigzag.burn_in_iterations != self.burn_in_iterations
        ):
            raise ConfigurationError("zigzag iteration window disagrees with the trainer's")
        if self.burn_in_iterations < self.total_iterations:
            self.zigzag.validate()
        self.lambda_schedule.validate()
        self.pseudo_thermal.validate()
        self.pseudo_rgb.validate()

    def lambda_value(self, iteration: int) -> float:
        if self.lambda_mode == LAMBDA_FIXED:
            return self.lambda_fixed
        return lambda_at(self.lambda_schedule, iteration)


@dataclass(frozen=True)
class EvalConfig:
    decode: DecodeConfig = DecodeConfig(score_threshold=0.05, nms_iou=0.5)
    iou_threshold: float = 0.5

    def validate(self) -> None:
        if not 0.0 < self.iou_threshold < 1.0:
            raise ConfigurationError("iou_threshold must lie in (0, 1)")


@dataclass(frozen=True)
class ExperimentConfig:
    regime: str = REGIME_D3T
    seed: int = 0
    eval_interval: int = 400
    output_dir: str | None = None
    data: DataConfig = DataConfig()
    detector: ArchConfig = ArchConfig()
    trainer: TrainerConfig = TrainerConfig()
    evaluation: EvalConfig = EvalConfig()

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ConfigurationError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.eval_interval < 1:
            raise ConfigurationError("eval_interval must be >= 1")
        if self.trainer.seed != self.seed:
            raise ConfigurationError("trainer.seed must equal the experiment seed")
        self.data.validate()
        self.detector.validate()
        self.trainer.validate()
        self.evaluation.validate()


def desk_profile() -> ExperimentConfig:
    """The default small-scale experiment."""
    return ExperimentConfig()


def paper_scale() -> ExperimentConfig:
    """Full-size parameterization (for schedule inspection, not training)."""
    total, burn_in = 40_000, 0
    return dataclasses.replace(
        ExperimentConfig(),
        trainer=dataclasses.replace(
            ExperimentConfig().trainer,
            batch_size=8,
            total_iterations=total,
            burn_in_iterations=burn_in,
            ema_alpha=0.9996,
            zigzag=ZigzagConfig(
                z0_thr=50,
                z0_rgb=150,
                beta=50,
                step_length=10_000,
                total_iterations=total,
                burn_in_iterations=burn_in,
            ),
            lambda_schedule=LambdaSchedule(start_iter=10_000, ramp_iters=10_000),
        ),
    )


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return dataclasses.replace(
        cfg, seed=seed, trainer=dataclasses.replace(cfg.trainer, seed=seed)
    )


def with_regime(cfg: ExperimentConfig, regime: str) -> ExperimentConfig:
    return dataclasses.replace(cfg, regime=regime)


# ---------------------------------------------------------------------------
# JSON <-> dataclass with strict unknown-key handling
# ---------------------------------------------------------------------------

_TUPLE_FIELDS = {
    "major_axis_range",
    "aspect_range",
    "contrast_range",
    "cutout_frac_range",
    "cutout_aspect_range",
}


def _build_flat(cls, data: dict, path: str):
    """Construct a dataclass of primitive/tuple fields from a JSON dict."""
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigurationError(f"{path}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = tuple(value) if name in _TUPLE_FIELDS else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


def _sub(data: dict, key: str) -> dict:
    value = data.get(key, {})
    if not isinstance(value, dict):
        raise ConfigurationError(f"{key}: expected an object")
    return value


def normalize_config(data: dict) -> ExperimentConfig:
    """Build a validated ExperimentConfig from a (possibly partial) JSON dict.

    Missing keys take desk-profile defaults; unknown keys are errors.
    """
    if not isinstance(data, dict):
        raise ConfigurationError("config root: expected an object")
    top_known = {"regime", "seed", "eval_interval", "output_dir", "data", "detector", "trainer", "evaluation"}
    unknown = set(data) - top_known
    if unknown:
        raise ConfigurationError(f"config root: unknown key(s) {sorted(unknown)}")

    data_section = _sub(data, "data")
    d_known = {"n_source", "n_target", "n_test", "gap", "geometry"}
    d_unknown = set(data_section) - d_known
    if d_unknown:
        raise ConfigurationError(f"data: unknown key(s) {sorted(d_unknown)}")
    default_data = DataConfig()
    data_cfg = DataConfig(
        n_source=data_section.get("n_source", default_data.n_source),
        n_target=data_section.get("n_target", default_data.n_target),
        n_test=data_section.get("n_test", default_data.n_test),
        gap=_merge_flat(DomainGapConfig, default_data.gap, _sub(data_section, "gap"), "data.gap"),
        geometry=_merge_flat(
            SceneGeometry, default_data.geometry, _sub(data_section, "geometry"), "data.geometry"
        ),
    )

    detector_cfg = _merge_flat(ArchConfig, ArchConfig(), _sub(data, "detector"), "detector")

    trainer_section = _sub(data, "trainer")
    t_known = {
        "learning_rate",
        "batch_size",
        "total_iterations",
        "burn_in_iterations",
        "ema_alpha",
        "zigzag",
        "lambda_mode",
        "lambda_fixed",
        "lambda_schedule",
        "pseudo_thermal",
        "pseudo_rgb",
        "decode_pseudo",
        "augment",
    }
    t_unknown = set(trainer_section) - t_known
    if t_unknown:
        raise ConfigurationError(f"trainer: unknown key(s) {sorted(t_unknown)}")
    default_trainer = TrainerConfig()
    total = int(trainer_section.get("total_iterations", default_trainer.total_iterations))
    burn_in = int(trainer_section.get("burn_in_iterations", default_trainer.burn_in_iterations))

    zz_section = _sub(trainer_section, "zigzag")
    zz_known = {"z0_thr", "z0_rgb", "beta", "step_length"}
    zz_unknown = set(zz_section) - zz_known
    if zz_unknown:
        raise ConfigurationError(f"trainer.zigzag: unknown key(s) {sorted(zz_unknown)}")
    default_zz = default_trainer.zigzag
    zigzag = ZigzagConfig(
        z0_thr=int(zz_section.get("z0_thr", default_zz.z0_thr)),
        z0_rgb=int(zz_section.get("z0_rgb", default_zz.z0_rgb)),
        beta=int(zz_section.get("beta", default_zz.beta)),
        step_length=int(zz_section.get("step_length", default_zz.step_length)),
        total_iterations=total,
        burn_in_iterations=burn_in,
    )

    seed = int(data.get("seed", 0))
    trainer_cfg = TrainerConfig(
        learning_rate=trainer_section.get("learning_rate", default_trainer.learning_rate),
        batch_size=int(trainer_section.get("batch_size", default_trainer.batch_size)),
        total_iterations=total,
        burn_in_iterations=burn_in,
        ema_alpha=trainer_section.get("ema_alpha", default_trainer.ema_alpha),
        zigzag=zigzag,
        lambda_mode=trainer_section.get("lambda_mode", default_trainer.lambda_mode),
        lambda_fixed=trainer_section.get("lambda_fixed", default_trainer.lambda_fixed),
        lambda_schedule=_merge_flat(
            LambdaSchedule,
            default_trainer.lambda_schedule,
            _sub(trainer_section, "lambda_schedule"),
            "trainer.lambda_schedule",
        ),
        pseudo_thermal=_merge_flat(
            PseudoLabelPolicy,
            default_trainer.pseudo_thermal,
            _sub(trainer_section, "pseudo_thermal"),
            "trainer.pseudo_thermal",
        ),
        pseudo_rgb=_merge_flat(
            PseudoLabelPolicy,
            default_trainer.pseudo_rgb,
            _sub(trainer_section, "pseudo_rgb"),
            "trainer.pseudo_rgb",
        ),
        decode_pseudo=_merge_flat(
            DecodeConfig,
            default_trainer.decode_pseudo,
            _sub(trainer_section, "decode_pseudo"),
            "trainer.decode_pseudo",
        ),
        augment=_merge_flat(
            AugmentConfig, default_trainer.augment, _sub(trainer_section, "augment"), "trainer.augment"
        ),
        seed=seed,
    )

    eval_section = _sub(data, "evaluation")
    e_known = {"decode", "iou_threshold"}
    e_unknown = set(eval_section) - e_known
    if e_unknown:
        raise ConfigurationError(f"evaluation: unknown key(s) {sorted(e_unknown)}")
    default_eval = EvalConfig()
    eval_cfg = EvalConfig(
        decode=_merge_flat(
            DecodeConfig, default_eval.decode, _sub(eval_section, "decode"), "evaluation.decode"
        ),
        iou_threshold=eval_section.get("iou_threshold", default_eval.iou_threshold),
    )

    cfg = ExperimentConfig(
        regime=data.get("regime", REGIME_D3T),
        seed=seed,
        eval_interval=int(data.get("eval_interval", ExperimentConfig().eval_interval)),
        output_dir=data.get("output_dir"),
        data=data_cfg,
        detector=detector_cfg,
        trainer=trainer_cfg,
        evaluation=eval_cfg,
    )
    cfg.validate()
    return cfg


def _merge_flat(cls, default, data: dict, path: str):
    """Flat-dataclass merge: JSON keys override the default instance."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigurationError(f"{path}: unknown key(s) {sorted(unknown)}")
    merged = dataclasses.asdict(default)
    merged.update(data)
    return _build_flat(cls, merged, path)


def to_dict(cfg: ExperimentConfig) -> dict:
    """Fully explicit JSON-ready dict (the normalized form)."""

    def flat(obj) -> dict:
        out = {}
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    zz = cfg.trainer.zigzag
    return {
        "regime": cfg.regime,
        "seed": cfg.seed,
        "eval_interval": cfg.eval_interval,
        "output_dir": cfg.output_dir,
        "data": {
            "n_source": cfg.data.n_source,
            "n_target": cfg.data.n_target,
            "n_test": cfg.data.n_test,
            "gap": flat(cfg.data.gap),
            "geometry": flat(cfg.data.geometry),
        },
        "detector": flat(cfg.detector),
        "trainer": {
            "learning_rate": cfg.trainer.learning_rate,
            "batch_size": cfg.trainer.batch_size,
            "total_iterations": cfg.trainer.total_iterations,
            "burn_in_iterations": cfg.trainer.burn_in_iterations,
            "ema_alpha": cfg.trainer.ema_alpha,
            "zigzag": {
                "z0_thr": zz.z0_thr,
                "z0_rgb": zz.z0_rgb,
                "beta": zz.beta,
                "step_length": zz.step_length,
            },
            "lambda_mode": cfg.trainer.lambda_mode,
            "lambda_fixed": cfg.trainer.lambda_fixed,
            "lambda_schedule": flat(cfg.trainer.lambda_schedule),
            "pseudo_thermal": flat(cfg.trainer.pseudo_thermal),
            "pseudo_rgb": flat(cfg.trainer.pseudo_rgb),
            "decode_pseudo": flat(cfg.trainer.decode_pseudo),
            "augment": flat(cfg.trainer.augment),
        },
        "evaluation": {
            "decode": flat(cfg.evaluation.decode),
            "iou_threshold": cfg.evaluation.iou_threshold,
        },
    }


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    return normalize_config(data)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")
