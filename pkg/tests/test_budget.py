import numpy as np
import pytest

from ltd_lab.budget import (BudgetError, DecayShape, LRAxis, LRConfig,
                            build_ledger, cumulative_layertokens,
                            layertokens_per_iter, lr_at, lr_curve,
                            lt_warmup_iterations, saving_fraction)
from ltd_lab.schedule import (DropSchedule, ScheduleMode,
                              iterations_for_tokens)
from oracles import cumulative_oracle


def mslg(s, b0, s_dec, t_full, layers, seed=0, **kw):
    return DropSchedule.default_policy(s=s, b0=b0, s_dec=s_dec, t_full=t_full,
                                       num_layers=layers, seed=seed, **kw)


def constant(s, b0, layers=4):
    return DropSchedule(s=s, b0=b0, mode=ScheduleMode.CONSTANT,
                        exempt_layers=frozenset({0, layers - 1}))


class TestPerIter:
    def test_hand_arithmetic(self):
        assert layertokens_per_iter(4, 8, 4) == 24

    def test_no_drop_collapses_to_ls(self):
        for l, s in ((2, 5), (4, 8), (24, 2048)):
            assert layertokens_per_iter(l, s, s) == l * s

    def test_gpt_shape(self):
        assert layertokens_per_iter(24, 2048, 128) == 6912

    def test_validation(self):
        with pytest.raises(BudgetError):
            layertokens_per_iter(1, 8, 4)
        with pytest.raises(BudgetError):
            layertokens_per_iter(4, 8, 9)
        with pytest.raises(BudgetError):
            layertokens_per_iter(4, 8, 0)


class TestCumulative:
    def test_hand_sum(self):
        # b_t = 4, 6, 8 -> 24 + 28 + 32 = 84, baseline 96
        sched = mslg(s=8, b0=4, s_dec=2, t_full=2, layers=4)
        assert cumulative_layertokens(sched, 4, 3) == 84
        assert build_ledger(sched, 4, 3).baseline_total == 96

    def test_constant_full_is_baseline(self):
        sched = constant(s=8, b0=8)
        assert cumulative_layertokens(sched, 4, 100) == 4 * 8 * 100

    def test_ledger_shape_and_monotonicity(self):
        sched = mslg(s=64, b0=16, s_dec=4, t_full=500, layers=6)
        ledger = build_ledger(sched, 6, 1000)
        assert ledger.per_iter.shape == (1000,)
        assert ledger.cumulative.shape == (1001,)
        assert ledger.cumulative[0] == 0
        assert np.all(np.diff(ledger.cumulative) > 0)
        assert ledger.per_iter[0] == 2 * 64 + 4 * 16
        assert ledger.per_iter[-1] == 6 * 64

    def test_matches_independent_oracle_random_configs(self):
        # exact equality against a per-iteration summation loop
        rng = np.random.default_rng(7)
        for _ in range(1000):
            l = int(rng.integers(2, 33))
            s = int(rng.integers(2, 257))
            b0 = int(rng.integers(1, s + 1))
            s_dec = int(rng.integers(1, 17))
            steps = -(-(s - b0) // s_dec)
            t_full = int(rng.integers(max(1, steps), 10_000))
            T = int(rng.integers(1, 10_000))
            mode = "constant" if rng.random() < 0.3 else "mslg"
            sched = DropSchedule(
                s=s, b0=b0, s_dec=s_dec, t_full=t_full,
                mode=ScheduleMode(mode),
                exempt_layers=frozenset({0, l - 1}))
            expect = cumulative_oracle(s, b0, s_dec, t_full, mode, l, T)
            assert cumulative_layertokens(sched, l, T) == expect

    def test_gpt_run_against_oracle(self):
        t_full = iterations_for_tokens(210e9, 1024, 2048)
        T = iterations_for_tokens(300e9, 1024, 2048)
        sched = mslg(s=2048, b0=128, s_dec=16, t_full=t_full, layers=24)
        # spot-check the vectorized sum against the loop on a slice
        head = cumulative_oracle(2048, 128, 16, t_full, "mslg", 24, 5000)
        assert cumulative_layertokens(sched, 24, 5000) == head
        assert cumulative_layertokens(sched, 24, T) < 24 * 2048 * T


class TestSavingFraction:
    def test_no_drop_saves_nothing(self):
        sv = saving_fraction(constant(s=8, b0=8), 4, 50)
        assert sv.middle_layer == 0.0 and sv.whole_model == 0.0

    def test_vit_whole_model(self):
        sched = mslg(s=197, b0=66, s_dec=1, t_full=8000, layers=12)
        sv = saving_fraction(sched, 12, 10_000)
        assert sv.whole_model == pytest.approx(0.223, abs=0.01)

    def test_gpt_middle_layer(self):
        t_full = iterations_for_tokens(210e9, 1024, 2048)
        T = iterations_for_tokens(300e9, 1024, 2048)
        sched = mslg(s=2048, b0=128, s_dec=16, t_full=t_full, layers=24)
        sv = saving_fraction(sched, 24, T)
        assert sv.middle_layer == pytest.approx(0.328, abs=0.005)

    def test_bounds_and_exemption_ratio(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            l = int(rng.integers(3, 16))
            s = int(rng.integers(4, 128))
            b0 = int(rng.integers(1, s + 1))
            sched = constant(s=s, b0=b0, layers=l)
            sv = saving_fraction(sched, l, 100)
            assert 0.0 <= sv.whole_model <= sv.middle_layer < 1.0
            assert sv.whole_model == pytest.approx(
                sv.middle_layer * (l - 2) / l)


class TestLTWarmup:
    def test_hand_case(self):
        # constant b=4: per-iter 24, target 2*8*4=64 -> first crossing t=3
        sched = constant(s=8, b0=4)
        cfg = LRConfig(lr_max=1e-3, T=10, T_warmup=2)
        assert lt_warmup_iterations(sched, 4, cfg) == 3

    def test_no_drop_reduces_to_standard(self):
        sched = constant(s=8, b0=8)
        for warm in (0, 1, 5, 9):
            cfg = LRConfig(lr_max=1e-3, T=10, T_warmup=warm)
            assert lt_warmup_iterations(sched, 4, cfg) == warm

    def test_gpt_config_against_scan(self):
        t_full = iterations_for_tokens(210e9, 1024, 2048)
        T = iterations_for_tokens(300e9, 1024, 2048)
        sched = mslg(s=2048, b0=128, s_dec=16, t_full=t_full, layers=24)
        cfg = LRConfig(lr_max=1e-3, T=T, T_warmup=3000)
        got = lt_warmup_iterations(sched, 24, cfg)
        ledger = build_ledger(sched, 24, T)
        target = 2048 * 24 * 3000
        assert ledger.cumulative[got] >= target
        assert ledger.cumulative[got - 1] < target

    def test_unreachable_target(self):
        sched = constant(s=8, b0=1)
        cfg = LRConfig(lr_max=1e-3, T=4, T_warmup=4)
        with pytest.raises(BudgetError, match="unreachable"):
            lt_warmup_iterations(sched, 4, cfg)


class TestLRAt:
    def test_axes_identical_without_dropping(self):
        # Criterion: 10k iterations, bit-identical curves on both axes
        sched = constant(s=8, b0=8)
        ledger = build_ledger(sched, 4, 10_000)
        for decay in DecayShape:
            a = lr_curve(LRConfig(3e-4, 1e-5, 10_000, 400, decay,
                                  LRAxis.ITERATION), ledger)
            b = lr_curve(LRConfig(3e-4, 1e-5, 10_000, 400, decay,
                                  LRAxis.LAYERTOKEN), ledger)
            assert np.array_equal(a, b)

    def test_warmup_proportionality(self):
        sched = constant(s=8, b0=8)
        ledger = build_ledger(sched, 4, 100)
        cfg = LRConfig(1e-3, 0.0, 100, 10, DecayShape.COSINE,
                       LRAxis.LAYERTOKEN)
        # halfway through the warmup budget -> half of lr_max
        assert lr_at(cfg, ledger, 5) == pytest.approx(5e-4)

    def test_cosine_midpoint(self):
        sched = constant(s=8, b0=8)
        T = 101  # decay progress hits exactly 0.5 at t=50 with no warmup
        ledger = build_ledger(sched, 4, T)
        cfg = LRConfig(1e-3, 1e-5, T, 0, DecayShape.COSINE, LRAxis.ITERATION)
        # p=0.5 halfway: lr = lr_min + (lr_max - lr_min)/2
        mid = lr_at(cfg, ledger, 50)
        # t/T = 50/101 is not exactly 0.5; evaluate where p is exactly 0.5
        cfg2 = LRConfig(1e-3, 1e-5, 100, 0, DecayShape.COSINE,
                        LRAxis.ITERATION)
        ledger2 = build_ledger(sched, 4, 100)
        assert lr_at(cfg2, ledger2, 50) == pytest.approx(1e-5 + (1e-3 - 1e-5) / 2)
        assert 1e-5 < mid < 1e-3

    def test_linear_decay_endpoints(self):
        sched = constant(s=8, b0=8)
        ledger = build_ledger(sched, 4, 100)
        cfg = LRConfig(1e-3, 1e-5, 100, 0, DecayShape.LINEAR,
                       LRAxis.ITERATION)
        assert lr_at(cfg, ledger, 0) == pytest.approx(1e-3)
        assert lr_at(cfg, ledger, 100) == pytest.approx(1e-5)

    def test_monotone_up_then_down(self):
        sched = mslg(s=64, b0=16, s_dec=4, t_full=600, layers=6)
        ledger = build_ledger(sched, 6, 1000)
        for axis in LRAxis:
            for decay in DecayShape:
                cfg = LRConfig(1e-3, 1e-5, 1000, 100, decay, axis)
                curve = lr_curve(cfg, ledger)
                peak = int(np.argmax(curve))
                assert np.all(np.diff(curve[:peak + 1]) >= 0)
                assert np.all(np.diff(curve[peak:]) <= 0)

    def test_layertoken_axis_decays_slower_under_dropping(self):
        # dropping consumes the budget late, so mid-run lr stays higher
        sched = mslg(s=64, b0=8, s_dec=4, t_full=700, layers=8)
        ledger = build_ledger(sched, 8, 1000)
        base = LRConfig(1e-3, 0.0, 1000, 50, DecayShape.COSINE,
                        LRAxis.ITERATION)
        lt = LRConfig(1e-3, 0.0, 1000, 50, DecayShape.COSINE,
                      LRAxis.LAYERTOKEN)
        mid = 500
        assert lr_at(lt, ledger, mid) > lr_at(base, ledger, mid)

    def test_out_of_range(self):
        sched = constant(s=8, b0=8)
        ledger = build_ledger(sched, 4, 10)
        cfg = LRConfig(1e-3, 0.0, 10, 2)
        with pytest.raises(BudgetError):
            lr_at(cfg, ledger, 11)

    def test_config_validation(self):
        with pytest.raises(BudgetError):
            LRConfig(lr_max=1e-3, lr_min=2e-3)
        with pytest.raises(BudgetError):
            LRConfig(lr_max=1e-3, T=10, T_warmup=11)
