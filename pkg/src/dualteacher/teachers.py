"""Mean-teacher machinery: EMA weight tracking and pseudo-label filtering.

Two teacher models (one per domain) share the student's parameter layout.
Each training iteration moves exactly one teacher toward the student by
an exponential moving average; the other teacher is left untouched. Both
teachers decode pseudo-labels from the weakly augmented view of every
unlabeled batch, and a per-branch policy filters them: either a plain
confidence threshold, or keeping only the top fraction of the pooled
candidates. For the top-fraction policy the pool is the whole batch's
post-NMS candidate list (per teacher); per-image pools at this scale are
too small for a 1% rule to mean anything.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .detector import (
    ArchConfig,
    DecodeConfig,
    Detection,
    DetectionSet,
    ParamVector,
    decode_stack,
)
from .errors import ConfigurationError
from .scenes import SceneSample
from .schedule import TeacherKind

MODE_SCORE_THRESHOLD = "score_threshold"
MODE_TOP_PERCENT = "top_percent"


@dataclass(frozen=True)
class PseudoLabelPolicy:
    mode: str = MODE_SCORE_THRESHOLD
    threshold: float = 0.7
    top_fraction: float = 0.01

    def validate(self) -> None:
        if self.mode not in (MODE_SCORE_THRESHOLD, MODE_TOP_PERCENT):
            raise ConfigurationError(f"unknown pseudo-label mode {self.mode!r}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigurationError(f"threshold must be in [0, 1], got {self.threshold}")
        if not 0.0 < self.top_fraction <= 1.0:
            raise ConfigurationError(f"top_fraction must be in (0, 1], got {self.top_fraction}")

    @classmethod
    def score_threshold(cls, threshold: float) -> "PseudoLabelPolicy":
        return cls(mode=MODE_SCORE_THRESHOLD, threshold=threshold)

    @classmethod
    def top_percent(cls, top_fraction: float) -> "PseudoLabelPolicy":
        return cls(mode=MODE_TOP_PERCENT, top_fraction=top_fraction)


def ema_update(teacher: ParamVector, student: ParamVector, alpha: float) -> ParamVector:
    """Elementwise alpha * teacher + (1 - alpha) * student; inputs untouched."""
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError(f"ema alpha must lie strictly in (0, 1), got {alpha}")
    if not teacher.same_layout(student):
        raise ConfigurationError("teacher/student parameter layouts differ")
    return ParamVector(
        values=alpha * teacher.values + (1.0 - alpha) * student.values,
        layout=teacher.layout,
    )


@dataclass
class TeacherBank:
    """Holds the per-domain teachers; `shared` collapses them into one model."""

    rgb_teacher: ParamVector
    thermal_teacher: ParamVector
    ema_alpha: float
    shared: bool = False

    @classmethod
    def from_student(cls, student: ParamVector, ema_alpha: float, shared: bool = False) -> "TeacherBank":
        if not 0.0 < ema_alpha < 1.0:
            raise ConfigurationError(f"ema alpha must lie strictly in (0, 1), got {ema_alpha}")
        if shared:
            only = student.copy()
            return cls(rgb_teacher=only, thermal_teacher=only, ema_alpha=ema_alpha, shared=True)
        return cls(
            rgb_teacher=student.copy(),
            thermal_teacher=student.copy(),
            ema_alpha=ema_alpha,
            shared=False,
        )

    def get(self, kind: TeacherKind) -> ParamVector:
        return self.thermal_teacher if kind is TeacherKind.THERMAL else self.rgb_teacher

    def apply_ema(self, kind: TeacherKind, student: ParamVector) -> None:
        updated = ema_update(self.get(kind), student, self.ema_alpha)
        if self.shared:
            self.rgb_teacher = updated
            self.thermal_teacher = updated
        elif kind is TeacherKind.THERMAL:
            self.thermal_teacher = updated
        else:
            self.rgb_teacher = updated


def filter_top_fraction(pool: Sequence[tuple[int, Detection]], top_fraction: float) -> list[tuple[int, Detection]]:
    """Keep the ceil(fraction * n) highest-scoring entries of a candidate pool.

    Entries are (sample_index, detection); ties break on (sample index,
    cell index) so the result is deterministic.
    """
    if not pool:
        return []
    keep = math.ceil(top_fraction * len(pool))
    ranked = sorted(pool, key=lambda e: (-e[1].score, e[0], e[1].cell))
    return ranked[:keep]


def generate_pseudo_labels_batch(
    teacher: ParamVector,
    samples_weak: Sequence[SceneSample],
    policy: PseudoLabelPolicy,
    decode_cfg: DecodeConfig,
    arch: ArchConfig,
) -> list[DetectionSet]:
    """Decode + filter pseudo-labels for a batch of weakly augmented views."""
    policy.validate()
    pixels = np.stack([s.pixels for s in samples_weak])
    candidates = decode_stack(teacher, arch, pixels, decode_cfg)
    if policy.mode == MODE_SCORE_THRESHOLD:
        return [[d for d in dets if d.score >= policy.threshold] for dets in candidates]
    pool = [(k, d) for k, dets in enumerate(candidates) for d in dets]
    kept = filter_top_fraction(pool, policy.top_fraction)
    kept_keys = {(k, d.cell) for k, d in kept}
    return [
        [d for d in dets if (k, d.cell) in kept_keys] for k, dets in enumerate(candidates)
    ]


def generate_pseudo_labels(
    teacher: ParamVector,
    sample_weak: SceneSample,
    policy: PseudoLabelPolicy,
    decode_cfg: DecodeConfig,
    arch: ArchConfig,
) -> DetectionSet:
    """Single-sample pseudo-labels (the candidate pool is this sample alone)."""
    return generate_pseudo_labels_batch(teacher, [sample_weak], policy, decode_cfg, arch)[0]


def merge_dual_pseudo_labels(
    from_rgb: DetectionSet, from_thermal: DetectionSet
) -> tuple[DetectionSet, DetectionSet]:
    """Tag each set with its producing teacher; the sets stay separate.

    The trainer computes one unsupervised loss term per set and sums
    them — the two sets are never unioned.
    """
    tagged_rgb = [dataclasses.replace(d, source_teacher="rgb") for d in from_rgb]
    tagged_thermal = [dataclasses.replace(d, source_teacher="thermal") for d in from_thermal]
    return tagged_rgb, tagged_thermal
