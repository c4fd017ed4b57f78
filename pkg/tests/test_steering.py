import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from photonic_engine.errors import (
    AssignmentInfeasibleError,
    InvalidArgumentError,
    OutOfRangeError,
    SteeringLimitError,
)
from photonic_engine.steering import (
    LATTICES,
    MicrolensArray,
    SteeringGeometry,
    SteeringSimulator,
    assign_channels,
    beam_diameter,
    blaze_for_displacement,
    brute_force_assignment,
    collimating_focal,
    delta_f_for_fill,
    fill_from_delta_f,
    hexagonal_lattice,
    lens_focal,
    load_targets_csv,
    square_lattice,
    steer_to_pattern,
    steering_range,
    synthesize_microlens_mask,
    theta_max,
    triangular_lattice,
    write_residuals_csv,
)

GEOM = SteeringGeometry()
# root of 2 w sqrt(1 + (z lambda / pi w^2)^2) = Gamma for w = Gamma * 0.05 / 2, by brentq
DF_005 = 0.021244594619427168
# pi Gamma^2 / (8 lambda)
DF_MAX = 0.21271200258680886
# arcsin(0.95) / 50 in degrees
THETA_OBJ_DEG = 1.4361025532246643


class TestFillFactor:
    def test_example_defocus(self):
        assert delta_f_for_fill(GEOM, 0.05) == pytest.approx(DF_005, rel=1e-12)
        assert GEOM.delta_f_o == pytest.approx(0.0212, abs=5e-5)

    def test_unity_fill_at_focus(self):
        assert delta_f_for_fill(GEOM, 1.0) == 0.0

    def test_maximizer(self):
        eta = np.linspace(1e-3, 1.0, 200001)
        vals = [delta_f_for_fill(GEOM, e) for e in eta[::50]]
        assert eta[::50][int(np.argmax(vals))] == pytest.approx(1 / math.sqrt(2), abs=2e-4)
        assert delta_f_for_fill(GEOM, 1 / math.sqrt(2)) == pytest.approx(DF_MAX, rel=1e-12)

    @pytest.mark.parametrize("eta", [0.0, -0.1, 1.01])
    def test_out_of_range(self, eta):
        with pytest.raises(OutOfRangeError):
            delta_f_for_fill(GEOM, eta)
        with pytest.raises(OutOfRangeError):
            SteeringGeometry(eta_o=eta)

    @settings(max_examples=300)
    @given(st.floats(1e-3, 1.0))
    def test_fills_pitch(self, eta):
        w = GEOM.gamma * eta / 2
        assert beam_diameter(w, delta_f_for_fill(GEOM, eta), GEOM.wavelength) == pytest.approx(GEOM.gamma, rel=1e-12)

    @settings(max_examples=300)
    @given(st.floats(1e-3, 1.0))
    def test_roundtrip_both_branches(self, eta):
        df = delta_f_for_fill(GEOM, eta)
        branch = "near" if eta <= 1 / math.sqrt(2) else "far"
        assert fill_from_delta_f(GEOM, df, branch) == pytest.approx(eta, abs=1e-12)

    def test_branches_pair_up(self):
        df = delta_f_for_fill(GEOM, 0.3)
        near, far = fill_from_delta_f(GEOM, df, "near"), fill_from_delta_f(GEOM, df, "far")
        assert near == pytest.approx(0.3, abs=1e-12)
        assert near**2 + far**2 == pytest.approx(1.0, abs=1e-12)

    def test_no_solution_beyond_maximum(self):
        with pytest.raises(OutOfRangeError):
            fill_from_delta_f(GEOM, DF_MAX * 1.01)
        with pytest.raises(InvalidArgumentError):
            fill_from_delta_f(GEOM, 0.01, "middle")

    @settings(max_examples=100)
    @given(st.floats(-1.0, 1.0), st.floats(1e-6, 1e-3))
    def test_diameter_even_and_above_waist(self, z, w):
        d = beam_diameter(w, z, GEOM.wavelength)
        assert d == pytest.approx(beam_diameter(w, -z, GEOM.wavelength), rel=1e-15)
        assert d >= 2 * w


class TestSteeringRange:
    def test_coefficient(self):
        assert steering_range(GEOM) / 0.05 == pytest.approx(22.82, abs=0.01)
        assert steering_range(GEOM, 1e-6) / 1e-6 == pytest.approx(22.846, abs=1e-3)

    def test_vanishes_with_fill(self):
        assert steering_range(GEOM, 1e-9) < 1e-6

    def test_objective_limited(self):
        g = SteeringGeometry(theta_na=math.asin(0.95), magnification=50.0)
        assert math.degrees(theta_max(g)) == pytest.approx(THETA_OBJ_DEG, rel=1e-12)
        assert theta_max(g) < g.theta_max_diff
        assert theta_max(SteeringGeometry(theta_na=math.asin(0.95), magnification=10.0)) == GEOM.theta_max_diff

    def test_argmax(self):
        eta = np.linspace(0.01, 1.0, 9901)
        r = [steering_range(GEOM, e) for e in eta]
        assert eta[int(np.argmax(r))] == pytest.approx(1 / math.sqrt(2), abs=1e-3)


class TestAssignment:
    def test_worked_example(self):
        mapping, _ = assign_channels([[0, 0], [1, 0], [2, 0]], [[2.1, 0], [0.1, 0], [1.1, 0]])
        assert mapping == {0: 1, 1: 2, 2: 0}

    def test_identity(self):
        pts = square_lattice(9, 1.0)
        mapping, cost = assign_channels(pts, pts)
        assert mapping == {i: i for i in range(9)}
        assert cost == 0.0

    def test_too_many_targets(self):
        with pytest.raises(AssignmentInfeasibleError):
            assign_channels([[0, 0]], [[0, 0], [1, 1]])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 7), st.integers(0, 2), st.integers(0, 2**32 - 1))
    def test_matches_brute_force(self, n_targets, spare, seed):
        rng = np.random.default_rng(seed)
        ch = rng.uniform(-1, 1, (n_targets + spare, 2))
        tg = rng.uniform(-1, 1, (n_targets, 2))
        _, cost = assign_channels(ch, tg)
        _, best = brute_force_assignment(ch, tg)
        assert cost == pytest.approx(best, rel=1e-12, abs=1e-12)


class TestLattices:
    @pytest.mark.parametrize("name", sorted(LATTICES))
    def test_centered_count(self, name):
        pts = LATTICES[name](16, 1.0)
        assert pts.shape == (16, 2)
        np.testing.assert_allclose(pts.mean(axis=0), 0.0, atol=1e-12)

    def test_nearest_neighbour_spacing(self):
        for fn in (triangular_lattice, hexagonal_lattice):
            pts = fn(16, 1.0)
            d = np.hypot(*(pts[:, None] - pts[None]).transpose(2, 0, 1))
            d[d == 0] = np.inf
            assert d.min() == pytest.approx(1.0, abs=1e-9)

    def test_honeycomb_coordination(self):
        pts = hexagonal_lattice(60, 1.0)
        d = np.hypot(*(pts[:, None] - pts[None]).transpose(2, 0, 1))
        assert np.max(np.sum(np.abs(d - 1.0) < 1e-9, axis=1)) == 3


class TestMask:
    def test_lens_phase_and_flat_surround(self):
        arr = MicrolensArray(np.zeros((1, 2)), 0.02, np.zeros((1, 2)), GEOM.gamma)
        m = synthesize_microlens_mask(arr, GEOM, (256, 256))
        assert m.phase[0, 0] == 0.0
        assert m.phase[128, 128] == 0.0
        expected = np.mod(-GEOM.k / (2 * 0.02) * (80e-6) ** 2, 2 * np.pi)
        assert m.phase[128, 138] == pytest.approx(expected, rel=1e-12)

    def test_overlapping_apertures(self):
        with pytest.raises(InvalidArgumentError):
            MicrolensArray([[0, 0], [0.5e-3, 0]], 0.01, [0, 0], 0.65e-3)

    def test_blaze_beyond_bandwidth_names_channel(self):
        arr = MicrolensArray.grid(GEOM, 2, 2)
        blaze = np.zeros((4, 2))
        blaze[2] = [1.01 * theta_max(GEOM) * GEOM.k, 0.0]
        with pytest.raises(SteeringLimitError) as info:
            synthesize_microlens_mask(arr.with_blaze(blaze), GEOM, (256, 256))
        assert info.value.channel == 2

    def test_strict_gradient_counts_lens(self):
        arr = MicrolensArray.grid(GEOM, 2, 2)
        small = arr.with_blaze(np.full((4, 2), 0.2 * theta_max(GEOM) * GEOM.k))
        synthesize_microlens_mask(small, GEOM, (256, 256))
        with pytest.raises(SteeringLimitError):
            synthesize_microlens_mask(small, GEOM, (256, 256), strict_gradient=True)


@pytest.fixture(scope="module")
def sim():
    return SteeringSimulator(geom=GEOM)


class TestPropagation:
    @pytest.mark.parametrize("eta", [0.05, 0.2])
    def test_unclipped_lens_reproduces_gaussian_waist(self, eta):
        # fine pixels and an oversized aperture isolate the propagation and lens design
        g = SteeringGeometry(eta_o=eta)
        s = SteeringSimulator(geom=g, zero_order=0.0, defocus_error=0.0, slm_pitch=2e-6, upsample=1, window=1536, slm_shape=(2048, 2048))
        arr = MicrolensArray(np.zeros((1, 2)), lens_focal(g), np.zeros((1, 2)), 3 * g.gamma)
        assert s.spot_diameter(arr, 0) == pytest.approx(g.gamma * eta, rel=1e-3)

    def test_aperture_clipping_broadens_spot(self, sim):
        d = sim.spot_diameter(MicrolensArray.grid(GEOM), 5, distance=GEOM.delta_f_o)
        assert 1.05 < d / (GEOM.gamma * GEOM.eta_o) < 1.5

    def test_collimation_fills_pitch(self):
        s = SteeringSimulator(geom=GEOM, zero_order=0.0, defocus_error=0.0, slm_pitch=2e-6, upsample=1, window=1536, slm_shape=(2048, 2048))
        arr = MicrolensArray(np.zeros((1, 2)), collimating_focal(GEOM), np.zeros((1, 2)), 3 * GEOM.gamma)
        out, _ = s.simulate_channel(arr, 0, distance=0.02)
        w = np.mean(out.second_moment_diameter()) / 2
        assert 2 * w / GEOM.gamma == pytest.approx(1.0, abs=0.01)

    def test_passive(self, sim):
        arr = MicrolensArray.grid(GEOM)
        blaze = blaze_for_displacement(GEOM, np.tile([0.5 * GEOM.gamma, 0.2 * GEOM.gamma], (16, 1)))
        out, _ = sim.simulate_channel(arr.with_blaze(blaze), 5)
        incident, _ = sim.simulate_channel(arr, 5, distance=0.0)
        assert out.power <= incident.power * (1 + 1e-9)

    def test_displacement_matches_blaze(self, sim):
        arr = MicrolensArray.grid(GEOM)
        d = np.array([0.4, -0.3]) * GEOM.gamma
        blaze = np.zeros((16, 2))
        blaze[5] = blaze_for_displacement(GEOM, d)
        target = arr.centers[5] + d * (1 + sim.defocus_error)
        m = sim.measure_spot(arr.with_blaze(blaze), 5, target)
        assert np.hypot(*(m.centroid - target)) < sim.camera_pixel

    def test_efficiency_falls_with_displacement(self, sim):
        r = np.array([0.0, 0.5, 1.0])
        eff = sim.relative_efficiency(np.column_stack([r * GEOM.gamma, 0 * r]))
        assert eff[0] == pytest.approx(1.0)
        assert eff[1] > eff[2]
        assert np.all(eff <= 1.01)


class TestPatternSteering:
    def test_square_needs_no_steering(self, sim):
        arr = MicrolensArray.grid(GEOM)
        targets = square_lattice(16, GEOM.gamma)
        out, mapping, history = steer_to_pattern(sim, arr, targets)
        np.testing.assert_allclose(out.blaze, 0.0, atol=1e-9)
        for c, t in mapping.items():
            np.testing.assert_allclose(targets[t], arr.centers[c], atol=1e-12)
        assert len(history) == 1 and history[0].max() < 0.05

    @pytest.mark.slow
    @pytest.mark.parametrize("name", ["hexagonal", "triangular"])
    def test_converges(self, sim, name):
        arr = MicrolensArray.grid(GEOM)
        _, _, history = steer_to_pattern(sim, arr, LATTICES[name](16, GEOM.gamma), max_iters=4)
        assert len(history) <= 4
        assert history[-1].max() < 0.5
        worst = [h.max() for h in history]
        assert all(b <= a for a, b in zip(worst, worst[1:]))

    def test_out_of_range_preflight(self, sim):
        arr = MicrolensArray.grid(GEOM, 2, 2)
        targets = arr.centers * [4.0, 1.0]
        with pytest.raises(SteeringLimitError):
            steer_to_pattern(sim, arr, targets)


class TestIO:
    def test_targets_csv(self, tmp_path):
        (tmp_path / "t.csv").write_text("label,x_um,y_um\na,10,-5\nb,0,650\n")
        labels, pts = load_targets_csv(tmp_path / "t.csv")
        assert labels == ["a", "b"]
        np.testing.assert_allclose(pts, [[1e-5, -5e-6], [0, 6.5e-4]])

    def test_residuals_csv(self, tmp_path):
        write_residuals_csv(tmp_path / "r.csv", [np.array([1.0, 2.0]), np.array([0.1, 0.2])])
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "iteration,channel,residual_px"
        assert len(lines) == 5
