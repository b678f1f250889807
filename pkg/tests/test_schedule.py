"""Schedule unit tests: closed form vs switch-counter interpreter, budgets,
clamping, the lambda ramp, and trace export."""

import csv

import numpy as np
import pytest

from dualteacher.errors import ConfigurationError
from dualteacher.schedule import (
    LambdaSchedule,
    TeacherKind,
    TrainDomain,
    ZigzagConfig,
    budgets_at,
    domain_at,
    fixed_mode,
    lambda_at,
    schedule_rows,
    teacher_to_update,
    write_schedule_csv,
    zigzag_mode,
    zigzag_state_at,
)


def switch_counter_trace(z0_thr, z0_rgb, beta, step_length, n_iters):
    """Literal interpreter of the switch-counter alternation.

    Runs the counter loop per fixed-budget step segment: within a segment
    the switch advances by one period each time the period boundary is
    reached; budgets are re-evaluated only at segment (step) boundaries.
    """
    period = z0_thr + z0_rgb
    trace = []
    for seg_start in range(0, n_iters, step_length):
        t = seg_start // step_length
        z_thr = min(max(z0_thr + t * beta, 0), period)
        switch = z_thr
        for local in range(min(step_length, n_iters - seg_start)):
            if local > 0 and local % period == 0:
                switch += period
            trace.append(TrainDomain.THERMAL if local < switch else TrainDomain.RGB)
    return trace


FLIR = ZigzagConfig(z0_thr=50, z0_rgb=150, beta=50, step_length=10_000, total_iterations=40_000, burn_in_iterations=0)


class TestDomainAt:
    def test_flir_defaults_first_period(self):
        assert domain_at(FLIR, 0) is TrainDomain.THERMAL
        assert domain_at(FLIR, 49) is TrainDomain.THERMAL
        assert domain_at(FLIR, 50) is TrainDomain.RGB
        assert domain_at(FLIR, 199) is TrainDomain.RGB
        assert domain_at(FLIR, 200) is TrainDomain.THERMAL

    def test_flir_second_step_budgets(self):
        # After one budget shift the thermal share doubles.
        for i in range(10_000, 10_100):
            assert domain_at(FLIR, i) is TrainDomain.THERMAL
        for i in range(10_100, 10_200):
            assert domain_at(FLIR, i) is TrainDomain.RGB

    def test_flir_per_step_budgets_and_constant_sum(self):
        expected = [(50, 150), (100, 100), (150, 50), (200, 0)]
        for t, (z_thr, z_rgb) in enumerate(expected):
            assert budgets_at(FLIR, t) == (z_thr, z_rgb)
            assert z_thr + z_rgb == 200
        # Clamped forever after.
        assert budgets_at(FLIR, 7) == (200, 0)

    def test_beta_zero_fixed_alternation(self):
        cfg = fixed_mode(100, total_iterations=10_000, burn_in_iterations=0)
        for i in range(0, 2_000):
            want = TrainDomain.THERMAL if i % 200 < 100 else TrainDomain.RGB
            assert domain_at(cfg, i) is want

    def test_small_config_matches_interpreter_across_steps(self):
        cfg = zigzag_mode(2, 6, 2, 8, total_iterations=32, burn_in_iterations=0)
        got = [domain_at(cfg, i) for i in range(32)]
        assert got == switch_counter_trace(2, 6, 2, 8, 32)

    def test_outside_phase_is_error(self):
        cfg = ZigzagConfig(5, 15, 5, 400, total_iterations=4_000, burn_in_iterations=800)
        with pytest.raises(ConfigurationError):
            domain_at(cfg, 799)
        with pytest.raises(ConfigurationError):
            domain_at(cfg, 4_000)

    def test_burn_in_offsets_clock(self):
        cfg = ZigzagConfig(5, 15, 5, 400, total_iterations=4_000, burn_in_iterations=800)
        assert domain_at(cfg, 800) is TrainDomain.THERMAL
        assert domain_at(cfg, 805) is TrainDomain.RGB

    def test_random_fixed_budget_configs_match_interpreter(self):
        rng = np.random.default_rng(1234)
        for _ in range(5):
            z_thr = int(rng.integers(1, 40))
            z_rgb = int(rng.integers(1, 40))
            periods = int(rng.integers(1, 6))
            step = (z_thr + z_rgb) * periods
            n = step * int(rng.integers(2, 5))
            cfg = zigzag_mode(z_thr, z_rgb, 0, step, total_iterations=n, burn_in_iterations=0)
            got = [domain_at(cfg, i) for i in range(n)]
            assert got == switch_counter_trace(z_thr, z_rgb, 0, step, n)


class TestInvariants:
    def test_constant_sum_after_clamp(self):
        cfg = zigzag_mode(3, 7, 4, 20, total_iterations=200, burn_in_iterations=0)
        for t in range(10):
            z_thr, z_rgb = budgets_at(cfg, t)
            assert z_thr + z_rgb == cfg.period
            assert z_thr >= 0 and z_rgb >= 0

    def test_period_counts_match_budgets(self):
        cfg = zigzag_mode(2, 6, 2, 16, total_iterations=64, burn_in_iterations=0)
        for t in range(4):
            z_thr, z_rgb = budgets_at(cfg, t)
            for p in range(cfg.step_length // cfg.period):
                start = t * cfg.step_length + p * cfg.period
                doms = [domain_at(cfg, i) for i in range(start, start + cfg.period)]
                assert doms.count(TrainDomain.THERMAL) == z_thr
                assert doms.count(TrainDomain.RGB) == z_rgb

    def test_monotone_handover(self):
        cfg = zigzag_mode(5, 15, 5, 40, total_iterations=400, burn_in_iterations=0)
        fractions = []
        for t in range(10):
            z_thr, _ = budgets_at(cfg, t)
            fractions.append(z_thr / cfg.period)
        assert all(b >= a for a, b in zip(fractions, fractions[1:]))

    def test_fixed_mode_period(self):
        for k in (1, 3, 50):
            cfg = fixed_mode(k, total_iterations=20 * k, burn_in_iterations=0)
            trace = [domain_at(cfg, i) for i in range(4 * k)]
            assert trace[: 2 * k] == trace[2 * k : 4 * k]  # period 2k
            assert trace[:k] == [TrainDomain.THERMAL] * k
            assert trace[k : 2 * k] == [TrainDomain.RGB] * k

    def test_state_switch_matches_domain(self):
        cfg = zigzag_mode(2, 6, 2, 8, total_iterations=32, burn_in_iterations=0)
        for i in range(32):
            st = zigzag_state_at(cfg, i)
            want = TrainDomain.THERMAL if i < st.switch else TrainDomain.RGB
            assert domain_at(cfg, i) is want


class TestTeacherToUpdate:
    def test_mapping(self):
        assert teacher_to_update(TrainDomain.THERMAL) is TeacherKind.THERMAL
        assert teacher_to_update(TrainDomain.RGB) is TeacherKind.RGB

    def test_round_trip_over_trace(self):
        cfg = zigzag_mode(5, 15, 5, 40, total_iterations=200, burn_in_iterations=0)
        for i in range(200):
            d = domain_at(cfg, i)
            assert teacher_to_update(d).value == d.value


class TestLambdaRamp:
    SCHED = LambdaSchedule(start_iter=10_000, ramp_iters=10_000)

    def test_paper_scale_points(self):
        assert lambda_at(self.SCHED, 5_000) == 0.0
        assert lambda_at(self.SCHED, 15_000) == 0.5
        assert lambda_at(self.SCHED, 25_000) == 1.0

    def test_monotone_and_bounded(self):
        values = [lambda_at(self.SCHED, i) for i in range(0, 30_000, 37)]
        assert all(0.0 <= v <= 1.0 for v in values)
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_idempotent_under_clamping(self):
        for i in (0, 10_000, 13_000, 50_000):
            v = lambda_at(self.SCHED, i)
            assert min(max(v, 0.0), 1.0) == v

    def test_ramp_validation(self):
        with pytest.raises(ConfigurationError):
            lambda_at(LambdaSchedule(start_iter=0, ramp_iters=0), 5)


class TestValidationAndTrace:
    def test_step_shorter_than_period_rejected(self):
        with pytest.raises(ConfigurationError):
            zigzag_mode(50, 150, 50, 100, total_iterations=1_000, burn_in_iterations=0)

    def test_step_not_multiple_of_period_rejected(self):
        with pytest.raises(ConfigurationError):
            zigzag_mode(2, 6, 2, 20, total_iterations=100, burn_in_iterations=0)

    def test_trace_row_count_and_columns(self, tmp_path):
        cfg = ZigzagConfig(5, 15, 5, 400, total_iterations=4_000, burn_in_iterations=800)
        rows = list(schedule_rows(cfg, lambda i: 0.5))
        assert len(rows) == cfg.total_iterations - cfg.burn_in_iterations
        assert rows[0]["iteration"] == 800
        path = tmp_path / "schedule.csv"
        write_schedule_csv(cfg, lambda i: 0.5, path)
        with open(path) as f:
            parsed = list(csv.DictReader(f))
        assert len(parsed) == len(rows)
        assert parsed[0]["domain"] == "thermal"
        assert parsed[0]["teacher_updated"] == "thermal"
