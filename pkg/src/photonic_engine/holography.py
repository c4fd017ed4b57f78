"""Fanout hologram synthesis, calibration and camera-feedback uniformity.

The fanout SLM sits in the Fourier plane of the chip, so each input grating
is a point in SLM k-space. Holograms are computed with a spot-based
Gerchberg-Saxton loop: the far field is only evaluated at the target
k-vectors (one plane wave per spot), which keeps targets continuous rather
than snapped to an FFT grid.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .device import Camera, ChannelBank, integrate_regions, region_noise_floor
from .errors import (
    AlignmentLostError,
    DegenerateMeasurementError,
    GeometryError,
    InvalidArgumentError,
    OutOfBandError,
    RankDeficientError,
)
from .optics import PhaseMask, pixel_envelope

TWO_PI = 2.0 * np.pi


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SpotSet:
    """Labelled targets with SLM k-vectors (rad/m), image positions (m) and weights.

    Instances are immutable; the ``with_*`` helpers return updated copies.
    ``measured_power`` holds NaN where no measurement is attached.
    """

    labels: tuple
    k_target: np.ndarray
    x_target: np.ndarray
    weight: np.ndarray
    measured_power: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.labels)
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(set(self.labels)) != n:
            raise InvalidArgumentError("spot labels must be unique")
        object.__setattr__(self, "k_target", _frozen(np.reshape(self.k_target, (n, 2))))
        object.__setattr__(self, "x_target", _frozen(np.reshape(self.x_target, (n, 2))))
        object.__setattr__(self, "weight", _frozen(np.broadcast_to(self.weight, (n,))))
        mp = np.full(n, np.nan) if self.measured_power is None else self.measured_power
        object.__setattr__(self, "measured_power", _frozen(np.broadcast_to(mp, (n,))))
        if np.any(~(self.weight > 0)):
            raise InvalidArgumentError("spot weights must be positive")

    @classmethod
    def from_k(cls, k_target, labels=None, x_target=None):
        k = np.asarray(k_target, dtype=float)
        labels = tuple(range(len(k))) if labels is None else labels
        x = np.zeros_like(k) if x_target is None else x_target
        return cls(labels, k, x, np.ones(len(k)))

    def __len__(self):
        return len(self.labels)

    def with_weights(self, weight):
        return replace(self, weight=weight)

    def with_k(self, k_target):
        return replace(self, k_target=k_target)

    def with_measurements(self, measured: dict):
        return replace(self, measured_power=np.array([measured[l] for l in self.labels], dtype=float))


@dataclass(frozen=True)
class AffineMap:
    """``x = linear @ k + offset``."""

    linear: np.ndarray
    offset: np.ndarray
    epsilon: float = 1e-300

    def __post_init__(self):
        object.__setattr__(self, "linear", _frozen(np.reshape(self.linear, (2, 2))))
        object.__setattr__(self, "offset", _frozen(np.reshape(self.offset, (2,))))
        if abs(np.linalg.det(self.linear)) <= self.epsilon:
            raise RankDeficientError("affine map is not invertible")

    @classmethod
    def identity(cls):
        return cls(np.eye(2), np.zeros(2))

    @classmethod
    def from_params(cls, scale, rotation=0.0, offset=(0.0, 0.0), shear=0.0):
        c, s = np.cos(rotation), np.sin(rotation)
        sx, sy = np.broadcast_to(scale, (2,))
        return cls(np.array([[c, -s], [s, c]]) @ np.array([[sx, shear], [0.0, sy]]), offset)

    def __call__(self, points):
        return np.asarray(points, dtype=float) @ self.linear.T + self.offset

    def inverse(self) -> "AffineMap":
        inv = np.linalg.inv(self.linear)
        return AffineMap(inv, -inv @ self.offset, self.epsilon)


@dataclass(frozen=True)
class UniformityReport:
    sigma_pkpk: float
    sigma_std: float
    iteration: int = 0


def uniformity(measured, iteration=0) -> UniformityReport:
    """Peak-to-peak and standard-deviation spread, both relative to the mean."""
    values = np.asarray(list(measured.values()) if isinstance(measured, dict) else measured, dtype=float)
    if values.size < 2:
        raise InvalidArgumentError("uniformity needs at least two channels")
    mean = values.mean()
    if mean == 0:
        raise DegenerateMeasurementError("mean power is zero")
    return UniformityReport(float(np.ptp(values) / mean), float(values.std() / mean), iteration)


def fit_affine(k_points, x_points):
    """Least-squares affine fit ``x ~ A k + b``.

    Returns ``(AffineMap, rms_residual)`` where the residual is the RMS
    Euclidean distance between fitted and given ``x_points``.
    """
    k = np.asarray(k_points, dtype=float)
    x = np.asarray(x_points, dtype=float)
    if k.shape != x.shape or k.ndim != 2 or k.shape[1] != 2:
        raise InvalidArgumentError("point lists must both be (n, 2)")
    if len(k) < 3:
        raise RankDeficientError("need at least three correspondences")
    # center and scale for conditioning; k and x may differ by ~1e10 in magnitude
    k_mean, k_scale = k.mean(axis=0), np.abs(k - k.mean(axis=0)).max() or 1.0
    design = np.column_stack([(k - k_mean) / k_scale, np.ones(len(k))])
    sv = np.linalg.svd(design, compute_uv=False)
    if sv[-1] <= 1e-9 * sv[0]:
        raise RankDeficientError("correspondences are collinear")
    coef, *_ = np.linalg.lstsq(design, x, rcond=None)
    linear = coef[:2].T / k_scale
    offset = coef[2] - linear @ k_mean
    amap = AffineMap(linear, offset)
    rms = float(np.sqrt(np.mean(np.sum((amap(k) - x) ** 2, axis=1))))
    return amap, rms


def wgs_feedback_step(targets: SpotSet, measured: dict, exponent=1.0, max_change=2.0) -> SpotSet:
    """Camera-feedback weight update.

    ``w_i <- w_i * (mean(P) / P_i) ** exponent``, each factor clamped to
    ``[1 / max_change, max_change]``, then renormalized to unit mean.
    Weights are target *powers*.
    """
    p = np.array([measured[l] for l in targets.labels], dtype=float)
    bad = [l for l, v in zip(targets.labels, p) if not v > 0]
    if bad:
        raise DegenerateMeasurementError(f"non-positive measurement on channels {bad}")
    factor = np.clip((p.mean() / p) ** exponent, 1.0 / max_change, max_change)
    w = targets.weight * factor
    return replace(targets.with_weights(w / w.mean()), measured_power=p)


# spot-based Gerchberg-Saxton ---------------------------------------------------------------


def slm_coordinates(shape, pitch):
    ny, nx = shape
    x = (np.arange(nx) - nx // 2) * pitch
    y = (np.arange(ny) - ny // 2) * pitch
    return x, y


def _plane_waves(k, shape, pitch):
    """(n_spots, ny * nx) matrix of exp(i k . r)."""
    x, y = slm_coordinates(shape, pitch)
    kx, ky = np.asarray(k, dtype=float).T
    return (np.exp(1j * kx[:, None, None] * x[None, None, :]) * np.exp(1j * ky[:, None, None] * y[None, :, None])).reshape(
        len(kx), -1
    )


def gs_synthesize(
    targets: SpotSet,
    source_amplitude,
    iterations=30,
    pitch=8e-6,
    initial_phase=None,
    weighted=True,
    seed=0,
) -> PhaseMask:
    """Phase-only spot-array hologram.

    Alternates between the SLM plane, where the amplitude is reset to
    ``source_amplitude``, and the spot plane, where each spot's amplitude is
    reset to ``sqrt(weight)`` (times an adaptive correction when
    ``weighted``). Spot fields are projections onto each target's ideal spot
    mode, the source amplitude times the target plane wave.
    """
    amp = np.asarray(source_amplitude, dtype=float)
    if amp.ndim != 2:
        raise InvalidArgumentError("source amplitude must be 2-D")
    if len(targets) < 1:
        raise InvalidArgumentError("need at least one target")
    if iterations < 1:
        raise InvalidArgumentError("need at least one iteration")
    nyquist = np.pi / pitch
    outside = [l for l, k in zip(targets.labels, targets.k_target) if np.any(np.abs(k) >= nyquist)]
    if outside:
        raise OutOfBandError(f"targets {outside} lie outside the SLM k-space band of +/-{nyquist:.4g} rad/m")
    a = (amp / np.sqrt(np.sum(amp**2))).ravel()
    waves = _plane_waves(targets.k_target, amp.shape, pitch)
    goal = np.sqrt(targets.weight / targets.weight.sum())

    if initial_phase is None:
        rng = np.random.default_rng(seed)
        spot_field = goal * np.exp(1j * rng.uniform(0, TWO_PI, len(goal)))
        phase = np.angle(spot_field @ waves)
    else:
        phase = np.asarray(initial_phase, dtype=float).ravel()

    correction = np.ones(len(goal))
    for _ in range(iterations):
        spots = (a * waves).conj() @ (a * np.exp(1j * phase))
        mag = np.abs(spots) + 1e-300
        if weighted:
            ratio = mag / goal
            correction *= ratio.mean() / ratio
        phase = np.angle((correction * goal * spots / mag) @ waves)
    return PhaseMask(phase.reshape(amp.shape), pitch)


def spot_powers(mask: PhaseMask, targets: SpotSet, source_amplitude) -> np.ndarray:
    """Fraction of source power in each target's ideal spot mode.

    The ideal mode for a spot is the source amplitude times the target plane
    wave (what a perfect blaze would produce), so a single-spot blaze scores 1.
    """
    amp = np.asarray(source_amplitude, dtype=float)
    a = (amp / np.sqrt(np.sum(amp**2))).ravel()
    waves = _plane_waves(targets.k_target, amp.shape, mask.pitch)
    return np.abs((a * waves).conj() @ (a * np.exp(1j * mask.phase.ravel()))) ** 2


# simulated fanout rig ------------------------------------------------------------------------


def gaussian_source(shape, pitch, waist, iris=None, center=(0.0, 0.0)):
    """Gaussian amplitude ``exp(-r^2 / w^2)``, optionally clipped by an elliptical iris.

    ``iris`` is ``(semi_axis_x, semi_axis_y)`` in meters.
    """
    x, y = slm_coordinates(shape, pitch)
    xx, yy = np.meshgrid(x - center[0], y - center[1])
    amp = np.exp(-(xx**2 + yy**2) / waist**2)
    if iris is not None:
        amp = amp * ((xx / iris[0]) ** 2 + (yy / iris[1]) ** 2 <= 1.0)
    return amp


@dataclass
class FanoutSimulator:
    """SLM fanout into the input gratings, read out on the pickoff camera.

    ``k_true`` are the k-vectors that hit each input grating dead-centre.
    Each grating accepts a Gaussian mode; seen from the SLM plane it is a
    tilted Gaussian of waist ``2 / acceptance_k`` where ``acceptance_k`` is the
    mode's 1/e^2 radius in k-space.
    """

    bank: ChannelBank
    camera: Camera
    k_true: np.ndarray
    source: np.ndarray
    slm_pitch: float = 8e-6
    wavelength: float = 780e-9
    acceptance_k: float = 5714.0
    laser_power: float = 0.2
    exposure: float = 0.1
    noise_on: bool = True
    include_pixel_envelope: bool = True

    def __post_init__(self):
        self.k_true = np.asarray(self.k_true, dtype=float)
        self.source = np.asarray(self.source, dtype=float)
        self.labels = tuple(range(len(self.k_true)))
        self._src = self.source.ravel() / np.sqrt(np.sum(self.source**2))
        self._modes = self._mode_matrix(self.k_true)

    @classmethod
    def build(
        cls,
        n_channels=16,
        seed=0,
        slm_size=128,
        slm_pitch=8e-6,
        source_waist=0.4e-3,
        iris=None,
        il_spread_db=3.0,
        spacing=8.0,
        row_offset=0.25,
        **kwargs,
    ):
        """Standard rig: a row of gratings at ``spacing`` acceptance widths, offset from the zero order."""
        rng = np.random.default_rng(seed)
        bank = ChannelBank.default(n_channels=n_channels, seed=int(rng.integers(2**31)))
        bank.insertion_loss = bank.insertion_loss * 10 ** (rng.uniform(-il_spread_db, il_spread_db, n_channels) / 10)
        bank.insertion_loss = np.minimum(bank.insertion_loss, 1.0)
        acceptance = 2.0 / source_waist
        idx = np.arange(n_channels) - (n_channels - 1) / 2
        k_true = np.column_stack([idx * spacing * acceptance, np.full(n_channels, row_offset * np.pi / slm_pitch)])
        camera = Camera.grid(
            range(n_channels), half_width=9, spot_sigma=3.0, rng=np.random.default_rng(int(rng.integers(2**31)))
        )
        source = gaussian_source((slm_size, slm_size), slm_pitch, source_waist, iris)
        return cls(bank=bank, camera=camera, k_true=k_true, source=source, slm_pitch=slm_pitch, acceptance_k=acceptance, **kwargs)

    @property
    def slm_shape(self):
        return self.source.shape

    def _mode_matrix(self, k):
        x, y = slm_coordinates(self.slm_shape, self.slm_pitch)
        waist = 2.0 / self.acceptance_k
        env = np.exp(-(x[None, :] ** 2 + y[:, None] ** 2) / waist**2).ravel()
        # normalize against the untruncated mode so couplings never exceed one
        norm = np.sqrt(np.pi * waist**2 / 2.0) / self.slm_pitch
        return env[None, :] * _plane_waves(k, self.slm_shape, self.slm_pitch) / norm

    def couplings(self, phase) -> np.ndarray:
        """Fraction of source power coupled into each input grating."""
        field_ = self._src * np.exp(1j * np.asarray(phase).ravel())
        c = np.abs(self._modes.conj() @ field_) ** 2
        if self.include_pixel_envelope:
            c = c * pixel_envelope(self.k_true[:, 0] / (TWO_PI / self.wavelength), self.slm_pitch, self.wavelength)
            c = c * pixel_envelope(self.k_true[:, 1] / (TWO_PI / self.wavelength), self.slm_pitch, self.wavelength)
        return c

    def output_powers(self, phase) -> np.ndarray:
        """Channel output powers with the modulators under the averaging sawtooth."""
        return self.laser_power * self.couplings(phase) * self.bank.sawtooth_mean_transmission()

    def measure(self, phase, noise_on=None) -> dict:
        noise = self.noise_on if noise_on is None else noise_on
        powers = dict(zip(self.labels, self.output_powers(phase)))
        return integrate_regions(self.camera.capture_frame(powers, self.exposure, noise))

    def noise_floor(self) -> float:
        return region_noise_floor(self.camera, self.labels[0], self.exposure)

    def relative_power_noise(self, phase) -> np.ndarray:
        """Per-channel relative standard deviation of one camera power estimate."""
        counts = self.output_powers(phase) * self.camera.gain * self.exposure
        npix = np.array([(r1 - r0) * (c1 - c0) for r0, r1, c0, c1 in (self.camera.regions[l] for l in self.labels)])
        return np.sqrt(counts + npix * (self.camera.read_noise**2 + 1.0 / 12.0)) / counts

    def coupling_peaks(self, phase):
        """Noiseless ground truth: the global blaze maximizing each channel's coupling.

        Returns ``(offsets, gain)`` where ``gain`` is the fractional coupling
        increase still available at the optimum.
        """
        from scipy.optimize import minimize

        scale = self.acceptance_k
        base = self.couplings(phase)
        offsets = np.zeros((len(self.labels), 2))
        gain = np.zeros(len(self.labels))
        for c in range(len(self.labels)):
            res = minimize(
                lambda d: -np.log(self.couplings(phase + self.blaze(d * scale))[c]),
                np.zeros(2),
                method="Nelder-Mead",
                options={"xatol": 1e-5, "fatol": 1e-12},
            )
            offsets[c] = res.x * scale
            gain[c] = np.exp(-res.fun) / base[c] - 1.0
        return offsets, gain

    def blaze(self, k_offset):
        x, y = slm_coordinates(self.slm_shape, self.slm_pitch)
        return k_offset[0] * x[None, :] + k_offset[1] * y[:, None]

    def measure_source_amplitude(self, superpixel_size, reference=None, probe_noise=0.0, rng=None):
        """Superpixel interferometry of the source amplitude on the SLM.

        Each superpixel is diffracted to a common probe spot together with a
        fixed reference superpixel while its phase is stepped through four
        quarter-wave offsets; the fringe amplitude divided by the reference
        amplitude gives the superpixel's mean field amplitude.
        """
        ny, nx = self.slm_shape
        s = int(superpixel_size)
        if s < 1 or ny % s or nx % s:
            raise GeometryError(f"superpixel size {superpixel_size} does not divide the {self.slm_shape} SLM")
        rng = rng or np.random.default_rng(0)
        # field each superpixel sends to the probe spot (blaze cancels the probe tilt)
        cells = self.source.reshape(ny // s, s, nx // s, s).sum(axis=(1, 3)).astype(complex)
        ref = (ny // s // 2, nx // s // 2) if reference is None else reference
        a_ref = cells[ref]

        def detect(intensity):
            if probe_noise:
                intensity = intensity + probe_noise * np.abs(a_ref) ** 2 * rng.standard_normal(np.shape(intensity))
            return intensity

        i_ref = detect(np.abs(a_ref) ** 2)
        if not i_ref > 0:
            raise DegenerateMeasurementError("reference superpixel is dark")
        steps = np.arange(4) * np.pi / 2
        fringe = sum(
            detect(np.abs(a_ref + cells * np.exp(1j * phi)) ** 2) * np.exp(-1j * phi) for phi in steps
        )
        recon = np.abs(fringe) / (4.0 * np.sqrt(i_ref)) / s**2
        recon[ref] = np.sqrt(i_ref) / s**2
        return recon

    def calibrate_imaging(self, true_map: AffineMap, grid=5, position_noise=0.0, rng=None):
        """Display a grid of spots, locate them in the image domain and fit the affine map."""
        rng = rng or np.random.default_rng(0)
        span = 0.6 * np.pi / self.slm_pitch
        g = np.linspace(-span, span, grid)
        k = np.array([(a, b) for b in g for a in g])
        x = true_map(k) + position_noise * rng.standard_normal(k.shape)
        return fit_affine(k, x)


def correct_kvectors(
    sim: FanoutSimulator,
    targets: SpotSet,
    scan_extent=None,
    steps=7,
    max_iterations=4,
    tolerance=None,
    gs_iterations=100,
    phase=None,
    refine=True,
    min_extent=None,
    weighted=False,
):
    """Iteratively align hologram spots to the gratings with a global blaze scan.

    Each iteration synthesizes a hologram for the current ``k_target``, scans
    a ``steps x steps`` grid of global blazes over ``+/-scan_extent``, and
    moves each channel's k-vector by the blaze that maximized its coupling
    (refined to sub-step precision with a log-parabola through the
    neighbouring scan points). Stops when every shift is below ``tolerance``.

    With ``refine`` the scan window shrinks to three times the largest shift
    of the previous iteration (never below ``min_extent``, default 0.3
    acceptance widths), which removes most of the sub-step interpolation bias
    from non-Gaussian coupling profiles. Holograms are plain GS by default
    (``weighted=False``): the adaptive spot weighting chases uniformity and
    lets spots wander by a few hundredths of an acceptance width between
    syntheses, which is the same scale the loop is trying to resolve.


    Returns ``(targets, phase, history)`` where ``history`` lists per-iteration
    shift vectors.
    """
    if steps < 3:
        raise InvalidArgumentError("scan grid must be at least 3 x 3")
    extent = sim.acceptance_k if scan_extent is None else scan_extent
    tol = 0.02 * sim.acceptance_k if tolerance is None else tolerance
    floor_extent = 0.3 * sim.acceptance_k if min_extent is None else min_extent
    history = []
    floor = 5.0 * sim.noise_floor()
    for _ in range(max_iterations):
        offsets = np.linspace(-extent, extent, steps)
        step = offsets[1] - offsets[0]
        phase = np.asarray(gs_synthesize(targets, sim.source, gs_iterations, sim.slm_pitch, initial_phase=phase, weighted=weighted).phase)
        scan = np.empty((steps, steps, len(targets)))
        for iy, oy in enumerate(offsets):
            for ix, ox in enumerate(offsets):
                m = sim.measure(phase + sim.blaze((ox, oy)))
                scan[iy, ix] = [m[l] for l in targets.labels]
        shifts = np.zeros((len(targets), 2))
        for c, label in enumerate(targets.labels):
            grid = scan[:, :, c]
            if grid.max() < floor:
                raise AlignmentLostError(label, f"no coupling detected on channel {label}")
            iy, ix = np.unravel_index(np.argmax(grid), grid.shape)
            shifts[c] = (
                offsets[ix] + step * _log_parabola_peak(grid[iy, :], ix),
                offsets[iy] + step * _log_parabola_peak(grid[:, ix], iy),
            )
        history.append(shifts)
        largest = np.max(np.hypot(*shifts.T))
        if largest < tol:
            break
        targets = targets.with_k(targets.k_target + shifts)
        if refine:
            extent = float(np.clip(3.0 * largest, floor_extent, extent))
    phase = np.asarray(gs_synthesize(targets, sim.source, gs_iterations, sim.slm_pitch, initial_phase=phase, weighted=weighted).phase)
    return targets, phase, history


def _log_parabola_peak(values, i):
    """Sub-step vertex offset of a parabola through log-values at ``i - 1, i, i + 1``."""
    if i == 0 or i == len(values) - 1:
        return 0.0
    lo, mid, hi = values[i - 1 : i + 2]
    if min(lo, mid, hi) <= 0:
        lo, mid, hi = max(lo, 0.0), mid, max(hi, 0.0)
        denom = lo - 2 * mid + hi
        return float(np.clip(0.5 * (lo - hi) / denom, -0.5, 0.5)) if denom < 0 else 0.0
    lo, mid, hi = np.log([lo, mid, hi])
    denom = lo - 2 * mid + hi
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (lo - hi) / denom, -0.5, 0.5))


@dataclass
class FanoutResult:
    targets: SpotSet
    phase: np.ndarray
    reports: list = field(default_factory=list)
    measurements: list = field(default_factory=list)


def run_wgs(sim: FanoutSimulator, targets: SpotSet, iterations=12, gs_iterations=100, exponent=1.0, phase=None):
    """Closed-loop WGS: synthesize, measure on the camera, reweight, repeat.

    ``reports[i]`` is the uniformity measured after ``i`` feedback updates
    (``reports[0]`` is the open-loop hologram).
    """
    result = FanoutResult(targets, phase)
    for it in range(iterations + 1):
        result.phase = np.asarray(
            gs_synthesize(result.targets, sim.source, gs_iterations, sim.slm_pitch, initial_phase=result.phase).phase
        )
        measured = sim.measure(result.phase)
        result.measurements.append(measured)
        result.reports.append(uniformity(measured, it))
        if it < iterations:
            result.targets = wgs_feedback_step(result.targets, measured, exponent)
    return result


def write_uniformity_csv(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "sigma_pkpk", "sigma_std"])
        for r in reports:
            w.writerow([r.iteration, f"{r.sigma_pkpk:.8g}", f"{r.sigma_std:.8g}"])
