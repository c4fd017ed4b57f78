import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from photonic_engine.device import (
    Camera,
    ChannelBank,
    DriftModel,
    integrate_regions,
    write_state_csv,
)
from photonic_engine.errors import (
    ChannelDisabledError,
    GeometryError,
    InvalidArgumentError,
    UnknownChannelError,
)


@pytest.fixture
def bank():
    return ChannelBank.default(n_channels=4, seed=1, v0_spread=0.5)


class TestTransmission:
    def test_zero_point_is_deepest_extinction(self, bank):
        c = 2
        assert bank.transmission(bank.v0[c], c) == pytest.approx(
            bank.insertion_loss[c] / bank.extinction_ratio[c], rel=1e-12
        )

    def test_v_pi_above_zero_point_is_maximum(self, bank):
        c = 1
        assert bank.transmission(bank.v0[c] + bank.v_pi[c], c) == pytest.approx(bank.insertion_loss[c])

    def test_twenty_db_composition(self):
        b = ChannelBank.default(n_channels=1, insertion_loss=0.01, extinction_ratio=100.0)
        assert b.transmission(b.v0[0], 0) == pytest.approx(1e-4, rel=1e-12)

    def test_disabled_channel(self, bank):
        bank.enabled[3] = False
        with pytest.raises(ChannelDisabledError):
            bank.transmission(0.0, 3)
        assert bank.transmission(np.zeros(4))[3] == 0.0

    def test_extrema_over_voltage(self, bank):
        v = np.linspace(-10, 10, 200001)
        for c in range(bank.n_channels):
            t = bank.transmission(v, c)
            il, er = bank.insertion_loss[c], bank.extinction_ratio[c]
            assert t.min() == pytest.approx(il / er, rel=1e-6)
            assert t.max() == pytest.approx(il, rel=1e-6)
            assert np.all((t >= il / er * (1 - 1e-12)) & (t <= il * (1 + 1e-12)))

    @settings(max_examples=200)
    @given(v0=st.floats(-5, 5), v=st.floats(-5, 5))
    def test_even_about_zero_point(self, v0, v):
        b = ChannelBank.default(n_channels=1)
        b.v0[0] = v0
        assert b.transmission(v0 + v, 0) == pytest.approx(b.transmission(v0 - v, 0), rel=1e-9, abs=1e-15)

    def test_sawtooth_average_matches_numeric_mean(self, bank):
        c = 0
        v = bank.v0[c] + np.linspace(-bank.v_pi[c], bank.v_pi[c], 200001)[:-1]
        assert bank.sawtooth_mean_transmission(c) == pytest.approx(bank.transmission(v, c).mean(), rel=1e-9)

    def test_invalid_parameters(self):
        with pytest.raises(InvalidArgumentError):
            ChannelBank.default(n_channels=2, insertion_loss=1.5)
        with pytest.raises(InvalidArgumentError):
            ChannelBank.default(n_channels=2, extinction_ratio=0.5)


class TestDrift:
    def test_exponential_decay(self):
        b = ChannelBank.default(n_channels=1, drift=DriftModel(tau=5.0, kappa=0.0, sigma=0.0))
        b.v0[0] = 0.3
        dt = 0.01
        for _ in range(500):
            b.drift_step(dt, 0.0)
        assert b.v0[0] == pytest.approx(0.3 * np.exp(-5.0 / 5.0), rel=1e-12)

    def test_fixed_point_is_kappa_times_voltage(self):
        b = ChannelBank.default(n_channels=2, drift=DriftModel(tau=5.0, tau_lp=2.0, kappa=0.1, sigma=0.0))
        for _ in range(2000):
            b.drift_step(0.1, 1.5)
        np.testing.assert_allclose(b.v0, 0.15, rtol=1e-10)
        np.testing.assert_allclose(b.vbar, 1.5, rtol=1e-12)

    def test_deterministic_given_seed_and_history(self):
        history = np.sin(np.linspace(0, 20, 300))
        runs = []
        for _ in range(2):
            b = ChannelBank.default(n_channels=3, seed=42, v0_spread=0.2)
            runs.append(np.array([b.drift_step(0.005, v) for v in history]))
        np.testing.assert_array_equal(runs[0], runs[1])

    def test_noise_free_trajectory_independent_of_seed(self):
        trajectories = []
        for seed in (1, 2):
            b = ChannelBank.default(n_channels=2, seed=seed, drift=DriftModel(sigma=0.0))
            b.v0[:] = [0.2, -0.1]
            trajectories.append([b.drift_step(0.01, 0.5).copy() for _ in range(100)])
        np.testing.assert_array_equal(trajectories[0], trajectories[1])

    def test_ou_noise_scale(self):
        b = ChannelBank.default(n_channels=2000, seed=3, drift=DriftModel(tau=5.0, kappa=0.0, sigma=2e-3))
        b.drift_step(1e-3, 0.0)
        # sigma * sqrt(dt) for dt << tau
        assert np.std(b.v0) == pytest.approx(2e-3 * np.sqrt(1e-3), rel=0.05)

    def test_bad_dt(self, bank):
        with pytest.raises(InvalidArgumentError):
            bank.drift_step(0.0, 0.0)

    def test_state_csv(self, bank, tmp_path):
        bank.drift_step(0.1, 0.0)
        write_state_csv(tmp_path / "s.csv", bank.state_rows())
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "time,channel,v0,vbar"
        assert len(lines) == 1 + bank.n_channels


class TestBandwidth:
    def test_dc_unchanged(self, bank):
        np.testing.assert_allclose(bank.apply_bandwidth(np.full(100, 1.3), 1e-12, 0), 1.3, rtol=1e-14)

    def test_step_risetime(self):
        b = ChannelBank.default(n_channels=1, bandwidth_3db=7e9)
        dt = 0.05e-12
        t = np.arange(40000) * dt
        y = b.apply_bandwidth((t >= 100e-12).astype(float), dt, 0)
        rise = t[np.argmax(y >= 0.9)] - t[np.argmax(y >= 0.1)]
        # first-order response: ln(9) / (2 pi f) ~ 0.35 / f
        assert rise == pytest.approx(np.log(9) / (2 * np.pi * 7e9), rel=0.01)
        assert rise == pytest.approx(50e-12, rel=0.03)

    def test_sinusoid_at_corner(self):
        f = 7e9
        b = ChannelBank.default(n_channels=1, bandwidth_3db=f)
        dt = 1 / (f * 400)
        t = np.arange(400 * 60) * dt
        y = b.apply_bandwidth(np.sin(2 * np.pi * f * t), dt, 0)
        tail = y[len(y) // 2 :]
        amplitude = 0.5 * (tail.max() - tail.min())
        assert amplitude == pytest.approx(1 / np.sqrt(2), rel=0.01)

    def test_empty(self, bank):
        with pytest.raises(InvalidArgumentError):
            bank.apply_bandwidth([], 1e-12, 0)


@pytest.fixture
def camera():
    return Camera.grid(["a", "b", "c"], half_width=5, rng=np.random.default_rng(7))


class TestCamera:
    def test_noiseless_exact(self, camera):
        powers = {"a": 1e-6, "b": 3e-7, "c": 0.0}
        frame = camera.capture_frame(powers, 4e-3, noise_on=False)
        est = integrate_regions(frame)
        for k, p in powers.items():
            assert est[k] == pytest.approx(p, rel=1e-12, abs=1e-20)
        counts = frame.pixels[slice(*camera.regions["a"][:2]), slice(*camera.regions["a"][2:])].sum()
        assert counts == pytest.approx(camera.gain * 1e-6 * 4e-3, rel=1e-12)

    def test_exposure_linearity(self, camera):
        f1 = camera.capture_frame({"a": 1e-7}, 1e-3, noise_on=False)
        f2 = camera.capture_frame({"a": 1e-7}, 2e-3, noise_on=False)
        np.testing.assert_allclose(f2.pixels, 2 * f1.pixels)

    def test_dark_noise_floor(self, camera):
        frame = camera.capture_frame({}, 4e-3)
        r0, r1, c0, c1 = camera.regions["b"]
        box = frame.pixels[r0:r1, c0:c1]
        assert box.mean() - camera.bias == pytest.approx(0, abs=2.0)
        assert box.std() == pytest.approx(camera.read_noise, rel=0.25)

    def test_single_lit_channel(self, camera):
        est = integrate_regions(camera.capture_frame({"b": 2e-5}, 4e-3))
        floor = 5 * camera.read_noise * 11 / (camera.gain * 4e-3)
        assert est["b"] == pytest.approx(2e-5, rel=0.03)
        assert abs(est["a"]) < floor and abs(est["c"]) < floor

    def test_equal_channels_within_shot_noise(self, camera):
        est = integrate_regions(camera.capture_frame({"a": 1e-6, "b": 1e-6}, 4e-3))
        counts = camera.gain * 1e-6 * 4e-3
        sigma = np.sqrt(counts + 121 * camera.read_noise**2) / counts
        assert abs(est["a"] - est["b"]) / 1e-6 < 5 * np.sqrt(2) * sigma

    def test_monte_carlo_unbiased(self, camera):
        powers = {"a": 1.0e-7, "b": 0.5e-7, "c": 0.25e-7}
        exposure = 4e-3
        samples = {k: [] for k in powers}
        for _ in range(1000):
            est = integrate_regions(camera.capture_frame(powers, exposure))
            for k in powers:
                samples[k].append(est[k])
        for k, p in powers.items():
            counts = camera.gain * p * exposure
            sigma = np.sqrt(counts + 121 * (camera.read_noise**2 + 1 / 12)) / (camera.gain * exposure)
            # every frame within 3 sigma on average, and the mean converges
            assert np.mean(np.abs(np.array(samples[k]) - p) < 3 * sigma) > 0.98
            assert abs(np.mean(samples[k]) - p) < 4 * sigma / np.sqrt(1000)

    def test_region_geometry(self):
        with pytest.raises(GeometryError):
            Camera(shape=(10, 10), regions={"a": (0, 5, 0, 11)})
        with pytest.raises(GeometryError):
            Camera(shape=(10, 10), regions={"a": (0, 5, 0, 5), "b": (4, 8, 4, 8)})

    def test_unknown_label(self, camera):
        with pytest.raises(UnknownChannelError):
            camera.capture_frame({"z": 1.0}, 1e-3)
        with pytest.raises(UnknownChannelError):
            integrate_regions(camera.capture_frame({}, 1e-3), ["z"])

    def test_exposure_must_be_positive(self, camera):
        with pytest.raises(InvalidArgumentError):
            camera.capture_frame({}, 0.0)
