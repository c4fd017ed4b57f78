import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from photonic_engine.device import ChannelBank, DriftModel
from photonic_engine.errors import InvalidArgumentError, LockLostError, NotConvergedError
from photonic_engine.lock import (
    HI,
    LO,
    LockState,
    PulseReport,
    PulseSequence,
    ZeroPointLock,
    imbalance,
    integrated_pulse_power,
    load_sequence_csv,
    lock_step,
    pooled_session_study,
    run_locked_session,
    square_pulses,
    write_pulse_report_csv,
    write_sequence_csv,
)

FROZEN = DriftModel(tau=1e12, tau_lp=1.0, kappa=0.0, sigma=0.0)


def quiet_lock(n=1, v0=0.0, **kw):
    bank = ChannelBank.default(n_channels=n, drift=FROZEN, **{k: kw.pop(k) for k in ("extinction_ratio",) if k in kw})
    bank.v0[:] = v0
    return ZeroPointLock.build(bank, noise_on=False, **kw)


class TestImbalance:
    def test_balanced_at_zero_point(self):
        lock = quiet_lock(v0=0.37, v_lo_guess=0.37)
        lock.step()
        assert lock.state.last_error[0] == pytest.approx(0.0, abs=1e-12)
        assert lock.state.v_lo_est[0] == pytest.approx(0.37, abs=1e-12)

    def test_transmission_difference_closed_form(self):
        bank = ChannelBank.default(n_channels=1, extinction_ratio=1e15, insertion_loss=1.0)
        vpi = bank.v_pi[0]
        v = 0.1 * vpi
        diff = bank.transmission(v + 0.05 * vpi, 0) - bank.transmission(v - 0.05 * vpi, 0)
        oracle = math.sin(0.075 * math.pi) ** 2 - math.sin(0.025 * math.pi) ** 2
        assert diff == pytest.approx(oracle, rel=1e-9)
        assert diff == pytest.approx(0.0483, abs=5e-5)

    def test_update_moves_toward_zero_point(self):
        lock = quiet_lock(v_lo_guess=0.1 * 2.2)
        lock.step()
        assert lock.state.last_error[0] > 0
        assert 0 < lock.state.v_lo_est[0] < 0.1 * 2.2

    @settings(max_examples=200)
    @given(st.floats(0.001, 0.25))
    def test_odd_in_offset(self, x):
        bank = ChannelBank.default(n_channels=1, extinction_ratio=1e15)
        vpi, d = bank.v_pi[0], 0.05 * bank.v_pi[0]

        def e(offset):
            v = offset * vpi
            return float(imbalance(bank.transmission(v - d, 0), bank.transmission(v + d, 0)))

        assert e(x) == pytest.approx(-e(-x), rel=1e-9)
        assert e(x) > 0


class TestConvergence:
    @settings(max_examples=40, deadline=None)
    @given(st.floats(-0.25, 0.25), st.sampled_from([LO, HI]))
    def test_noiseless_monotone_convergence(self, x, mode):
        lock = quiet_lock(v0=0.2, locked_to=mode)
        vpi = lock.bank.v_pi[0]
        start = 0.2 + x * vpi + (vpi if mode == HI else 0.0)
        lock.state = replace(lock.state, v_lo_est=start - (vpi if mode == HI else 0.0), v_hi_est=start + (0.0 if mode == HI else vpi))
        dist = []
        for _ in range(200):
            lock.step()
            dist.append(abs(lock.tracking_error()[0]))
        assert dist[-1] < 1e-3 * vpi
        assert all(b <= a + 1e-12 for a, b in zip(dist, dist[1:]))

    def test_tracking_under_default_drift(self):
        bank = ChannelBank.default(n_channels=4, seed=3, v0_spread=0.3)
        lock = ZeroPointLock.build(bank, camera_seed=4)
        err = lock.run(60.0)
        settled = err[400:]
        assert np.sqrt(np.mean(settled**2)) < 0.01 * bank.v_pi[0]

    def test_prioritizes_largest_errors(self):
        bank = ChannelBank.default(n_channels=6, seed=2, v0_spread=0.4)
        lock = ZeroPointLock.build(bank, camera_seed=1)
        for _ in range(20):
            before = lock.state
            after = lock.step()
            expected = set(np.argsort(-np.abs(after.last_error))[:2])
            assert set(after.updated) == expected
            untouched = [c for c in range(6) if c not in after.updated]
            np.testing.assert_array_equal(after.v_lo_est[untouched], before.v_lo_est[untouched])

    def test_lost_lock(self):
        bank = ChannelBank.default(n_channels=2)
        lock = ZeroPointLock.build(bank, input_power=0.0)
        with pytest.raises(LockLostError):
            lock.step()

    def test_disabled_channels_skipped(self):
        bank = ChannelBank.default(n_channels=3, seed=0, v0_spread=0.2)
        bank.enabled[1] = False
        lock = ZeroPointLock.build(bank)
        for _ in range(10):
            assert 1 not in lock.step().updated

    def test_invalid_state(self):
        bank = ChannelBank.default(n_channels=1)
        with pytest.raises(InvalidArgumentError):
            LockState.initial(bank, delta_fraction=0.5)
        with pytest.raises(InvalidArgumentError):
            LockState.initial(bank, locked_to="MID")
        with pytest.raises(InvalidArgumentError):
            lock_step(LockState.initial(bank), bank, ZeroPointLock.build(bank).camera, frame_budget=0)


class TestMetrology:
    def test_rectangle_area(self):
        dt = 0.2e-9
        t = np.arange(0, 100e-9 + dt / 2, dt)
        trace = (t <= 80e-9 + 1e-15).astype(float)
        r = integrated_pulse_power(trace, [(0.0, 80e-9)], times=t)
        assert r.integrated_power[0] == pytest.approx(8e-8, rel=1e-12)

    def test_identical_pulses(self):
        trace = np.tile(np.r_[np.ones(400), np.zeros(100)], 2)
        r = integrated_pulse_power(trace, [(0, 99.8e-9), (100e-9, 199.8e-9)], dt=0.2e-9)
        np.testing.assert_array_equal(r.deviation, [0.0, 0.0])

    def test_scaled_deviations(self):
        r = PulseReport.from_values([1.00, 1.02, 0.98])
        np.testing.assert_allclose(r.deviation, [0.0, 0.02, -0.02], atol=1e-15)

    @settings(max_examples=100)
    @given(st.lists(st.floats(0.1, 10.0), min_size=1, max_size=50))
    def test_deviations_have_zero_mean(self, values):
        assert abs(PulseReport.from_values(values).deviation.mean()) < 1e-12

    def test_empty_bin(self):
        with pytest.raises(InvalidArgumentError):
            integrated_pulse_power(np.ones(10), [(1e-9, 1.1e-9)], dt=1e-9)
        with pytest.raises(InvalidArgumentError):
            integrated_pulse_power(np.ones(10), [(0.0, 20e-9)], dt=1e-9)


class TestPlayback:
    def converged(self, n=2, seed=0):
        bank = ChannelBank.default(n_channels=n, seed=seed, v0_spread=0.3)
        lock = ZeroPointLock.build(bank, camera_seed=seed)
        lock.run(1.0)
        return lock

    def test_no_drift_pulses_identical(self):
        lock = quiet_lock(n=2, v0=0.1, v_lo_guess=0.1)
        lock.step()
        seq, bins = square_pulses((0, 1), lock.bank.v_pi)
        result = run_locked_session(seq, lock, bins)
        for c in (0, 1):
            r = result.reports[c]
            assert np.max(np.abs(r.deviation)) < 1e-12
            assert r.integrated_power[0] == pytest.approx(5e-2 * lock.bank.insertion_loss[c] * 80e-9, rel=0.01)

    def test_trigger_requires_convergence(self):
        bank = ChannelBank.default(n_channels=2)
        lock = ZeroPointLock.build(bank)
        seq, bins = square_pulses((0, 1), bank.v_pi)
        with pytest.raises(NotConvergedError):
            run_locked_session(seq, lock, bins)

    def test_setpoints_untouched_during_playback(self):
        lock = self.converged()
        seq, bins = square_pulses((0, 1), lock.bank.v_pi, n_pulses=10)
        before = lock.state.digest()
        t0 = lock.bank.time
        result = run_locked_session(seq, lock, bins)
        assert result.hash_at_trigger == result.hash_at_reinstatement == before
        assert lock.bank.time == pytest.approx(t0 + seq.duration)

    def test_single_session_within_one_percent(self):
        lock = self.converged(n=4, seed=5)
        seq, bins = square_pulses(range(4), lock.bank.v_pi)
        result = run_locked_session(seq, lock, bins, photodiode_noise=1e-6)
        assert max(r.max_abs_deviation for r in result.reports.values()) < 0.01

    def test_pooled_sessions_locked_vs_unlocked(self):
        kw = dict(sessions=8, spacing=0.5, settle=1.0, channels=(0, 1, 2))
        locked, _, _ = pooled_session_study(ChannelBank.default(n_channels=3, seed=9, v0_spread=0.5), True, **kw)
        free, rows, _ = pooled_session_study(ChannelBank.default(n_channels=3, seed=9, v0_spread=0.5), False, **kw)
        assert max(r.max_abs_deviation for r in locked.values()) < 0.01
        assert max(r.max_abs_deviation for r in free.values()) > 0.01
        assert len(rows) == 3 * 8 * 50


class TestSequenceIO:
    def test_roundtrip(self, tmp_path):
        seq, _ = square_pulses((2, 5), [2.2, 2.3], n_pulses=3)
        write_sequence_csv(tmp_path / "s.csv", seq)
        back = load_sequence_csv(tmp_path / "s.csv")
        assert back.channels == (2, 5)
        np.testing.assert_allclose(back.voltages, seq.voltages)

    def test_non_uniform_grid(self, tmp_path):
        (tmp_path / "s.csv").write_text("channel,time_ns,voltage\n0,0,0\n0,8,1\n0,20,0\n")
        with pytest.raises(InvalidArgumentError):
            load_sequence_csv(tmp_path / "s.csv")

    def test_pulse_width_on_grid(self):
        with pytest.raises(InvalidArgumentError):
            square_pulses((0,), 1.0, pulse_width=83e-9)
        with pytest.raises(InvalidArgumentError):
            PulseSequence((0, 1), np.zeros((1, 5)))

    def test_report_csv(self, tmp_path):
        write_pulse_report_csv(tmp_path / "r.csv", [(0, 1, 2, 1e-9, 0.001)])
        assert (tmp_path / "r.csv").read_text().splitlines()[0] == "session,channel,pulse,integrated_power,deviation"
