"""Alternating-domain training schedule and the pseudo-label weight ramp.

During the adaptation phase training alternates between the two domains
with per-step iteration budgets (z_thr, z_rgb). Budgets shift by `beta`
every `step_length` iterations, transferring iterations from the rgb
side to the thermal side while the per-period total stays constant;
once a budget would leave [0, period] it is clamped and the schedule
saturates (all-thermal). Within a step, each period of length
z_thr + z_rgb runs thermal iterations first, then rgb.

`domain_at` is the closed form of that alternation; the test suite
checks it against a literal switch-counter interpreter of the same
rule. The schedule clock starts at the end of burn-in.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .errors import ConfigurationError


class TrainDomain(str, enum.Enum):
    THERMAL = "thermal"
    RGB = "rgb"


class TeacherKind(str, enum.Enum):
    THERMAL = "thermal"
    RGB = "rgb"


@dataclass(frozen=True)
class ZigzagConfig:
    z0_thr: int
    z0_rgb: int
    beta: int
    step_length: int
    total_iterations: int
    burn_in_iterations: int

    @property
    def period(self) -> int:
        return self.z0_thr + self.z0_rgb

    def validate(self) -> None:
        if self.z0_thr < 0 or self.z0_rgb < 0 or self.period <= 0:
            raise ConfigurationError("initial budgets must be >= 0 and sum to > 0")
        if self.beta < 0:
            raise ConfigurationError(f"beta must be >= 0, got {self.beta}")
        if self.step_length < self.period:
            raise ConfigurationError(
                f"step_length {self.step_length} shorter than one period {self.period}"
            )
        if self.step_length % self.period != 0:
            raise ConfigurationError(
                f"step_length {self.step_length} must be a whole number of periods ({self.period})"
            )
        if not 0 <= self.burn_in_iterations < self.total_iterations:
            raise ConfigurationError("need 0 <= burn_in_iterations < total_iterations")


@dataclass(frozen=True)
class ZigzagState:
    """Snapshot of the schedule at one iteration (for traces/inspection)."""

    step_index: int
    z_thr: int
    z_rgb: int
    switch: int  # schedule-relative iteration at which the current period flips to rgb
    iteration: int


@dataclass(frozen=True)
class LambdaSchedule:
    start_iter: int
    ramp_iters: int

    def validate(self) -> None:
        if self.ramp_iters < 1:
            raise ConfigurationError(f"ramp_iters must be >= 1, got {self.ramp_iters}")


def budgets_at(cfg: ZigzagConfig, step_index: int) -> tuple[int, int]:
    """(z_thr, z_rgb) for a step; clamped so the sum stays one period."""
    z_thr = min(max(cfg.z0_thr + step_index * cfg.beta, 0), cfg.period)
    return z_thr, cfg.period - z_thr


def zigzag_state_at(cfg: ZigzagConfig, iteration: int) -> ZigzagState:
    cfg.validate()
    if not cfg.burn_in_iterations <= iteration < cfg.total_iterations:
        raise ConfigurationError(
            f"iteration {iteration} outside the schedule phase "
            f"[{cfg.burn_in_iterations}, {cfg.total_iterations})"
        )
    j = iteration - cfg.burn_in_iterations
    step_index = j // cfg.step_length
    z_thr, z_rgb = budgets_at(cfg, step_index)
    switch = (j // cfg.period) * cfg.period + z_thr
    return ZigzagState(step_index=step_index, z_thr=z_thr, z_rgb=z_rgb, switch=switch, iteration=iteration)


def domain_at(cfg: ZigzagConfig, iteration: int) -> TrainDomain:
    """Domain trained at `iteration`; defined on the post-burn-in phase only."""
    state = zigzag_state_at(cfg, iteration)
    j = iteration - cfg.burn_in_iterations
    return TrainDomain.THERMAL if j % cfg.period < state.z_thr else TrainDomain.RGB


def teacher_to_update(domain: TrainDomain) -> TeacherKind:
    return TeacherKind.THERMAL if domain is TrainDomain.THERMAL else TeacherKind.RGB


def lambda_at(sched: LambdaSchedule, iteration: int) -> float:
    """Pseudo-label weight: linear 0 -> 1 over the configured window."""
    sched.validate()
    return float(min(max((iteration - sched.start_iter) / sched.ramp_iters, 0.0), 1.0))


def fixed_mode(k: int, total_iterations: int, burn_in_iterations: int) -> ZigzagConfig:
    """Constant k/k alternation (no budget shift)."""
    if k < 1:
        raise ConfigurationError(f"fixed alternation needs k >= 1, got {k}")
    return ZigzagConfig(
        z0_thr=k,
        z0_rgb=k,
        beta=0,
        step_length=2 * k,
        total_iterations=total_iterations,
        burn_in_iterations=burn_in_iterations,
    )


def zigzag_mode(
    z0_thr: int,
    z0_rgb: int,
    beta: int,
    step_length: int,
    total_iterations: int,
    burn_in_iterations: int,
) -> ZigzagConfig:
    """Shifting-budget schedule; validates on construction."""
    cfg = ZigzagConfig(
        z0_thr=z0_thr,
        z0_rgb=z0_rgb,
        beta=beta,
        step_length=step_length,
        total_iterations=total_iterations,
        burn_in_iterations=burn_in_iterations,
    )
    cfg.validate()
    return cfg


SCHEDULE_COLUMNS = ("iteration", "domain", "teacher_updated", "lambda", "z_thr", "z_rgb", "step_index")


def schedule_rows(cfg: ZigzagConfig, lambda_of: Callable[[int], float]):
    """One row per scheduled iteration, burn-in end to total."""
    cfg.validate()
    for i in range(cfg.burn_in_iterations, cfg.total_iterations):
        state = zigzag_state_at(cfg, i)
        domain = domain_at(cfg, i)
        yield {
            "iteration": i,
            "domain": domain.value,
            "teacher_updated": teacher_to_update(domain).value,
            "lambda": lambda_of(i),
            "z_thr": state.z_thr,
            "z_rgb": state.z_rgb,
            "step_index": state.step_index,
        }


def write_schedule_csv(cfg: ZigzagConfig, lambda_of: Callable[[int], float], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=SCHEDULE_COLUMNS)
        writer.writeheader()
        for row in schedule_rows(cfg, lambda_of):
            writer.writerow(row)
