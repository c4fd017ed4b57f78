"""Microlens beamsteering: fill-factor conversion, steering range, mask synthesis and pattern refinement.

Each channel's beam leaves a waist ``w_i = Gamma * eta_i / 2`` a distance
``delta_f_i`` in front of the steering SLM, where it has grown to fill the
channel pitch ``Gamma``. A microlens (plus an optional steering blaze) in that
aperture refocuses it to a waist ``w_o = Gamma * eta_o / 2`` a distance
``delta_f_o`` behind the SLM.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import (
    AlignmentLostError,
    AssignmentInfeasibleError,
    InvalidArgumentError,
    OutOfRangeError,
    SteeringLimitError,
)
from .optics import ComplexField, GaussianBeam, PhaseMask, propagate_angular_spectrum

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class SteeringGeometry:
    """Array optics. ``delta_f_i`` / ``delta_f_o`` default to the near-focus defocus for ``eta_i`` / ``eta_o``.

    ``theta_na`` and ``magnification`` describe an optional objective after
    the output plane; without it the steering angle is limited only by the
    SLM's diffraction bandwidth ``theta_max_diff``.
    """

    gamma: float = 0.65e-3
    eta_i: float = 0.05
    eta_o: float = 0.05
    wavelength: float = 780e-9
    theta_max_diff: float = np.deg2rad(2.0)
    theta_na: float | None = None
    magnification: float = 1.0
    delta_f_i: float | None = None
    delta_f_o: float | None = None

    def __post_init__(self):
        if not self.gamma > 0 or not self.wavelength > 0:
            raise InvalidArgumentError("pitch and wavelength must be positive")
        for name in ("eta_i", "eta_o"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise OutOfRangeError(f"{name} must lie in (0, 1], got {v}")
        if not self.theta_max_diff > 0 or not self.magnification > 0:
            raise InvalidArgumentError("angles and magnification must be positive")
        if self.delta_f_i is None:
            object.__setattr__(self, "delta_f_i", delta_f_for_fill(self, self.eta_i))
        if self.delta_f_o is None:
            object.__setattr__(self, "delta_f_o", delta_f_for_fill(self, self.eta_o))

    @property
    def w_i(self):
        return self.gamma * self.eta_i / 2

    @property
    def w_o(self):
        return self.gamma * self.eta_o / 2

    @property
    def k(self):
        return TWO_PI / self.wavelength


def delta_f_for_fill(geom: SteeringGeometry, eta) -> float:
    """Near-branch defocus at which a waist of fill ``eta`` grows to fill the pitch."""
    if not 0 < eta <= 1:
        raise OutOfRangeError(f"fill factor must lie in (0, 1], got {eta}")
    return float(np.pi / 4 * geom.gamma**2 * eta / geom.wavelength * np.sqrt(1.0 - eta**2))


def beam_diameter(waist, distance, wavelength):
    """1/e^2 diameter ``2 w sqrt(1 + (z lambda / (pi w^2))^2)``."""
    return 2.0 * waist * np.sqrt(1.0 + (np.asarray(distance) * wavelength / (np.pi * waist**2)) ** 2)


def fill_from_delta_f(geom: SteeringGeometry, delta_f, branch="near") -> float:
    """Invert the pitch-filling condition for the fill factor.

    With ``u = eta^2`` and ``c = 4 delta_f lambda / (pi Gamma^2)`` the
    condition is ``u^2 - u + c^2 = 0``. The near branch (small ``eta``, the
    one :func:`delta_f_for_fill` produces for ``eta <= 1/sqrt(2)``) uses the
    cancellation-free form ``2 c^2 / (1 + sqrt(1 - 4 c^2))``; the far branch is
    ``(1 + sqrt(1 - 4 c^2)) / 2``.
    """
    c = 4.0 * delta_f * geom.wavelength / (np.pi * geom.gamma**2)
    disc = 1.0 - 4.0 * c * c
    if delta_f < 0 or disc < 0:
        raise OutOfRangeError(f"no fill factor fills the pitch at delta_f = {delta_f:.4g} m")
    root = np.sqrt(disc)
    if branch == "near":
        u = 2.0 * c * c / (1.0 + root)
    elif branch == "far":
        u = (1.0 + root) / 2.0
    else:
        raise InvalidArgumentError("branch must be 'near' or 'far'")
    return float(np.sqrt(u))


def theta_max(geom: SteeringGeometry) -> float:
    """Usable steering half-angle: the SLM bandwidth, clipped by an objective's NA if present."""
    if geom.theta_na is None:
        return geom.theta_max_diff
    return min(geom.theta_max_diff, geom.theta_na / geom.magnification)


def steering_range(geom: SteeringGeometry, eta_o=None) -> float:
    """Maximum displacement in units of the pitch, ``theta_max * delta_f_o / Gamma``."""
    eta = geom.eta_o if eta_o is None else eta_o
    return float(theta_max(geom) * np.pi / 4 * geom.gamma * eta / geom.wavelength * np.sqrt(1.0 - eta**2))


def lens_focal(geom: SteeringGeometry) -> float:
    """Microlens focal length taking the input curvature to a waist ``w_o`` at ``delta_f_o``."""
    r_in = GaussianBeam(geom.w_i, geom.wavelength).curvature_radius(geom.delta_f_i)
    r_out = GaussianBeam(geom.w_o, geom.wavelength).curvature_radius(geom.delta_f_o)
    return float(1.0 / (1.0 / r_in + 1.0 / r_out))


def collimating_focal(geom: SteeringGeometry) -> float:
    """Focal length that flattens the input wavefront, leaving a pitch-filling collimated beam."""
    return float(GaussianBeam(geom.w_i, geom.wavelength).curvature_radius(geom.delta_f_i))


def blaze_for_displacement(geom: SteeringGeometry, displacement):
    """Paraxial blaze (rad/m) moving a spot by ``displacement`` at ``delta_f_o``."""
    return geom.k * np.asarray(displacement, dtype=float) / geom.delta_f_o


# microlens arrays ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class MicrolensArray:
    centers: np.ndarray
    focal: np.ndarray
    blaze: np.ndarray
    aperture: float

    def __post_init__(self):
        c = np.array(self.centers, dtype=float).reshape(-1, 2)
        n = len(c)
        f = np.array(np.broadcast_to(self.focal, (n,)), dtype=float)
        b = np.array(np.broadcast_to(self.blaze, (n, 2)), dtype=float)
        for a in (c, f, b):
            a.setflags(write=False)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "focal", f)
        object.__setattr__(self, "blaze", b)
        if not self.aperture > 0:
            raise InvalidArgumentError("aperture must be positive")
        # square apertures tile without overlap iff centres are at least one aperture apart on some axis
        for i in range(n):
            d = np.abs(c[i + 1 :] - c[i])
            if np.any(np.all(d < self.aperture * (1 - 1e-9), axis=1)):
                raise InvalidArgumentError("microlens apertures overlap")

    @classmethod
    def grid(cls, geom: SteeringGeometry, rows=4, cols=4, focal=None):
        iy, ix = np.mgrid[0:rows, 0:cols]
        centers = np.column_stack([(ix.ravel() - (cols - 1) / 2), (iy.ravel() - (rows - 1) / 2)]) * geom.gamma
        return cls(centers, lens_focal(geom) if focal is None else focal, np.zeros((rows * cols, 2)), geom.gamma)

    def __len__(self):
        return len(self.centers)

    def with_blaze(self, blaze):
        return replace(self, blaze=blaze)


def max_local_gradient(array: MicrolensArray, geom: SteeringGeometry) -> np.ndarray:
    """Per-lens largest phase gradient (rad/m) of lens plus blaze over the square aperture."""
    half = array.aperture / 2
    corners = np.array([[sx, sy] for sx in (-half, half) for sy in (-half, half)])
    out = []
    for f, b in zip(array.focal, array.blaze):
        grads = -geom.k * corners / f + b
        out.append(np.max(np.hypot(*grads.T)))
    return np.array(out)


def synthesize_microlens_mask(
    array: MicrolensArray, geom: SteeringGeometry, slm_shape=(512, 512), slm_pitch=8e-6, strict_gradient=False
) -> PhaseMask:
    """Composite lens-plus-blaze phase, one square aperture per channel; pixels outside every aperture stay flat.

    Every blaze must stay within the SLM's diffraction bandwidth. With
    ``strict_gradient`` the lens's own edge gradient counts against the
    bandwidth too, which for small output fill factors leaves almost no
    room to steer.
    """
    kmax = theta_max(geom) * geom.k
    blaze_mag = np.hypot(*array.blaze.T)
    limit = max_local_gradient(array, geom) if strict_gradient else blaze_mag
    for c, g in enumerate(limit):
        if g > kmax * (1 + 1e-12):
            raise SteeringLimitError(c, f"phase gradient {g:.4g} rad/m exceeds the {kmax:.4g} rad/m steering bandwidth")
    ny, nx = slm_shape
    x = (np.arange(nx) - nx // 2) * slm_pitch
    y = (np.arange(ny) - ny // 2) * slm_pitch
    xx, yy = np.meshgrid(x, y)
    phase = np.zeros(slm_shape)
    half = array.aperture / 2
    for c, (center, f, b) in enumerate(zip(array.centers, array.focal, array.blaze)):
        dx, dy = xx - center[0], yy - center[1]
        inside = (dx >= -half) & (dx < half) & (dy >= -half) & (dy < half)
        phase[inside] = (-geom.k / (2 * f) * (dx**2 + dy**2) + b[0] * dx + b[1] * dy)[inside]
    return PhaseMask(phase, slm_pitch)


# assignment ---------------------------------------------------------------------------------------


def assign_channels(channel_positions, targets):
    """Minimum total squared-distance matching of targets to channels.

    Returns ``(mapping, cost)`` with ``mapping[channel] = target index``;
    channels left over when there are fewer targets than channels are parked
    (absent from the mapping).
    """
    ch = np.asarray(channel_positions, dtype=float).reshape(-1, 2)
    tg = np.asarray(targets, dtype=float).reshape(-1, 2)
    if len(ch) == 0 or len(tg) == 0:
        raise InvalidArgumentError("need at least one channel and one target")
    if len(tg) > len(ch):
        raise AssignmentInfeasibleError(None, f"{len(tg)} targets but only {len(ch)} channels")
    cost = np.sum((ch[:, None, :] - tg[None, :, :]) ** 2, axis=2)
    rows, cols = linear_sum_assignment(cost)
    return {int(r): int(c) for r, c in zip(rows, cols)}, float(cost[rows, cols].sum())


def brute_force_assignment(channel_positions, targets):
    """Exhaustive reference solver (factorial time; small instances only)."""
    ch = np.asarray(channel_positions, dtype=float).reshape(-1, 2)
    tg = np.asarray(targets, dtype=float).reshape(-1, 2)
    cost = np.sum((ch[:, None, :] - tg[None, :, :]) ** 2, axis=2)
    best, best_map = np.inf, None
    for perm in permutations(range(len(ch)), len(tg)):
        total = sum(cost[c, t] for t, c in enumerate(perm))
        if total < best:
            best, best_map = total, {c: t for t, c in enumerate(perm)}
    return best_map, float(best)


# target lattices ----------------------------------------------------------------------------------


def _nearest(points, n):
    ang = np.mod(np.arctan2(points[:, 1], points[:, 0]), TWO_PI)
    r = np.round(np.hypot(*points.T), 9)
    chosen = points[np.lexsort((ang, r))[:n]]
    return chosen - chosen.mean(axis=0)


def square_lattice(n=16, pitch=1.0):
    side = int(np.ceil(np.sqrt(n)))
    iy, ix = np.mgrid[0:side, 0:side]
    pts = np.column_stack([ix.ravel() - (side - 1) / 2, iy.ravel() - (side - 1) / 2]) * pitch
    return _nearest(pts, n)


def triangular_lattice(n=16, spacing=1.0):
    """Points of a triangular (hexagonally packed) lattice closest to the origin."""
    m = int(np.ceil(np.sqrt(n))) + 3
    i, j = np.mgrid[-m : m + 1, -m : m + 1]
    pts = np.column_stack([i.ravel() + 0.5 * j.ravel(), np.sqrt(3) / 2 * j.ravel()]) * spacing
    return _nearest(pts, n)


def hexagonal_lattice(n=16, spacing=1.0):
    """Honeycomb lattice (two-point basis) with nearest-neighbour distance ``spacing``."""
    m = int(np.ceil(np.sqrt(n))) + 3
    i, j = np.mgrid[-m : m + 1, -m : m + 1]
    a1, a2 = np.array([np.sqrt(3), 0.0]), np.array([np.sqrt(3) / 2, 1.5])
    base = i.ravel()[:, None] * a1 + j.ravel()[:, None] * a2
    pts = np.vstack([base, base + [0.0, 1.0]]) * spacing - [0.0, 0.5 * spacing]
    return _nearest(pts, n)


LATTICES = {"square": square_lattice, "hexagonal": hexagonal_lattice, "triangular": triangular_lattice}


def load_targets_csv(path):
    """``label,x_um,y_um`` rows -> ``(labels, positions in meters)``."""
    labels, pts = [], []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            labels.append(r["label"])
            pts.append((float(r["x_um"]) * 1e-6, float(r["y_um"]) * 1e-6))
    if not pts:
        raise InvalidArgumentError("no targets in file")
    return labels, np.array(pts)


def write_residuals_csv(path, history):
    """``history[i][c]`` is channel ``c``'s residual (camera pixels) after iteration ``i + 1``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "channel", "residual_px"])
        for i, row in enumerate(history, start=1):
            for c, r in enumerate(row):
                w.writerow([i, c, f"{r:.6g}"])


# simulation ---------------------------------------------------------------------------------------


@dataclass
class SpotMeasurement:
    centroid: np.ndarray
    power: float
    output: ComplexField = field(repr=False)
    origin: np.ndarray = field(repr=False)


@dataclass
class SteeringSimulator:
    """Per-channel scalar simulation of the steering SLM.

    Each channel is propagated in its own window of ``window`` SLM pixels,
    upsampled ``upsample`` times so the pixel hold is resolved. The physical
    output plane sits ``defocus_error`` (fractional) beyond the design
    ``delta_f_o``, a model mismatch that the refinement loop has to absorb.
    A fraction ``zero_order`` of the light is reflected unmodulated.
    """

    geom: SteeringGeometry = field(default_factory=SteeringGeometry)
    slm_shape: tuple = (512, 512)
    slm_pitch: float = 8e-6
    window: int = 256
    upsample: int = 4
    zero_order: float = 0.05
    defocus_error: float = 0.03
    camera_binning: int = 3
    strict_gradient: bool = False

    @property
    def sim_pitch(self):
        return self.slm_pitch / self.upsample

    @property
    def camera_pixel(self):
        return self.sim_pitch * self.camera_binning

    @property
    def output_distance(self):
        return self.geom.delta_f_o * (1.0 + self.defocus_error)

    def mask(self, array: MicrolensArray) -> PhaseMask:
        return synthesize_microlens_mask(array, self.geom, self.slm_shape, self.slm_pitch, self.strict_gradient)

    def _window(self, center):
        ny, nx = self.slm_shape
        ic = np.round(np.asarray(center) / self.slm_pitch).astype(int) + np.array([nx // 2, ny // 2])
        lo = ic - self.window // 2
        if np.any(lo < 0) or np.any(lo + self.window > np.array([nx, ny])):
            raise InvalidArgumentError("simulation window extends past the SLM; enlarge slm_shape")
        return lo

    def simulate_channel(self, array: MicrolensArray, channel, mask: PhaseMask | None = None, distance=None):
        """Output-plane field of one channel, with the absolute position of its local origin."""
        mask = self.mask(array) if mask is None else mask
        center = array.centers[channel]
        lo = self._window(center)
        ny, nx = self.slm_shape
        sub = mask.phase[lo[1] : lo[1] + self.window, lo[0] : lo[0] + self.window]
        phase = np.kron(sub, np.ones((self.upsample, self.upsample)))
        n = phase.shape[0]
        # absolute coordinate of local sample index n // 2
        first = (np.array(lo) - np.array([nx // 2, ny // 2])) * self.slm_pitch - self.slm_pitch / 2
        origin = first + (n // 2 + 0.5) * self.sim_pitch
        beam = GaussianBeam(self.geom.w_i, self.geom.wavelength)
        incident = beam.sample((n, n), self.sim_pitch, self.geom.delta_f_i, center=center - origin)
        modulated = np.sqrt(1.0 - self.zero_order) * np.exp(1j * phase) + np.sqrt(self.zero_order)
        slm = incident.with_amplitude(incident.amplitude * modulated)
        z = self.output_distance if distance is None else distance
        return propagate_angular_spectrum(slm, z, plane_label="output"), origin

    def measure_spot(self, array, channel, expected, radius=None, mask=None) -> SpotMeasurement:
        """Background-subtracted centroid and power near ``expected`` on the binned pattern camera."""
        out, origin = self.simulate_channel(array, channel, mask)
        b = self.camera_binning
        inten = out.intensity
        n = inten.shape[0] // b * b
        cam = inten[:n, :n].reshape(n // b, b, n // b, b).sum(axis=(1, 3))
        px = self.camera_pixel
        coords = (np.arange(n // b) * b + (b - 1) / 2 - out.shape[0] // 2) * self.sim_pitch
        xx, yy = np.meshgrid(coords + origin[0], coords + origin[1])
        r = 3.0 * self.geom.w_o if radius is None else radius
        d = np.hypot(xx - expected[0], yy - expected[1])
        disc = d <= r
        ring = (d > r) & (d <= r + 4 * px)
        if not disc.any():
            raise AlignmentLostError(channel, "target lies outside the simulated window")
        background = np.median(cam[ring]) if ring.any() else 0.0
        signal = np.clip(cam - background, 0.0, None) * disc
        total = signal.sum()
        if total <= 0.01 * inten.sum():
            raise AlignmentLostError(channel, f"no spot found near the target of channel {channel}")
        centroid = np.array([(signal * xx).sum(), (signal * yy).sum()]) / total
        return SpotMeasurement(centroid, float(total), out, origin)

    def spot_diameter(self, array, channel, expected=None, radius=None, mask=None, distance=None):
        """Local 1/e^2 diameter (per-axis D4sigma, averaged) of a channel's spot.

        Moments are taken inside a disc around the intensity peak so light
        clipped into neighbouring apertures does not inflate the width.
        """
        out, origin = self.simulate_channel(array, channel, mask, distance)
        x, y = out.coordinates()
        xx, yy = np.meshgrid(x + origin[0], y + origin[1])
        inten = out.intensity
        if expected is None:
            iy, ix = np.unravel_index(np.argmax(inten), inten.shape)
            expected = (xx[iy, ix], yy[iy, ix])
        r = 3.0 * self.geom.w_o if radius is None else radius
        sel = np.hypot(xx - expected[0], yy - expected[1]) <= r
        w = inten * sel
        total = w.sum()
        cx, cy = (w * xx).sum() / total, (w * yy).sum() / total
        var_x = (w * (xx - cx) ** 2).sum() / total
        var_y = (w * (yy - cy) ** 2).sum() / total
        return float(2.0 * (np.sqrt(var_x) + np.sqrt(var_y)))

    def relative_efficiency(self, displacements, channel=0, array=None):
        """Spot power when steered by each displacement, relative to the unsteered spot."""
        array = MicrolensArray.grid(self.geom) if array is None else array
        center = array.centers[channel]
        ref = self.measure_spot(array, channel, center, radius=2 * self.geom.w_o).power
        out = []
        for d in np.atleast_2d(displacements):
            blaze = np.array(array.blaze)
            blaze[channel] = blaze_for_displacement(self.geom, d)
            steered = array.with_blaze(blaze)
            target = center + np.asarray(d) * (1.0 + self.defocus_error)
            out.append(self.measure_spot(steered, channel, target, radius=2 * self.geom.w_o).power / ref)
        return np.array(out)


def steer_to_pattern(sim: SteeringSimulator, array: MicrolensArray, targets, max_iters=4, tolerance_px=0.5):
    """Assign channels to targets and refine blazes from measured spot positions.

    Iteration 1 uses the analytic blaze for each displacement. After each
    simulated measurement the blaze is corrected by the measured position
    error mapped back through the design ``delta_f_o``. Stops once every
    residual is below ``tolerance_px`` camera pixels.

    Returns ``(array, mapping, history)`` where ``history[i]`` holds the
    per-channel residuals (camera pixels) measured in iteration ``i + 1``.
    """
    targets = np.asarray(targets, dtype=float).reshape(-1, 2)
    mapping, _ = assign_channels(array.centers, targets)
    reach = steering_range(sim.geom) * sim.geom.gamma
    for c, t in mapping.items():
        d = np.hypot(*(targets[t] - array.centers[c]))
        if d > reach * (1 + 1e-12):
            raise SteeringLimitError(c, f"target {t} is {d / sim.geom.gamma:.3f} pitches away; range is {reach / sim.geom.gamma:.3f}")
    goal = np.array(array.centers)
    for c, t in mapping.items():
        goal[c] = targets[t]
    blaze = blaze_for_displacement(sim.geom, goal - array.centers)
    history = []
    for _ in range(max_iters):
        array = array.with_blaze(blaze)
        mask = sim.mask(array)
        measured = np.array([sim.measure_spot(array, c, goal[c], mask=mask).centroid for c in range(len(array))])
        error = goal - measured
        history.append(np.hypot(*error.T) / sim.camera_pixel)
        if np.all(history[-1] < tolerance_px):
            break
        blaze = blaze + blaze_for_displacement(sim.geom, error)
    return array, mapping, history
