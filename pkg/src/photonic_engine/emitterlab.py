"""Simulated field of narrow-line emitters and the addressing experiments run on it.

Emitters respond as steady-state Lorentzian scatterers with a saturating
roll-off. Each channel's output is a focused Gaussian spot on the sample; a
channel excites an emitter in proportion to the spot intensity at the
emitter relative to the peak of a perfectly focused spot.

All frequencies are absolute (Hz). Positions are sample-plane meters.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.signal import find_peaks

from .device import ChannelBank
from .errors import AssignmentInfeasibleError, InvalidArgumentError, OutOfBandError, SteeringLimitError
from .lock import SAMPLE_RATE, PulseSequence, ZeroPointLock, integrated_pulse_power, run_locked_session

F0 = 406.70906e12
# second spectral population; placed below F0 so the channel-2 peaks land at 3.54 and 4.06 GHz
SECOND_OFFSET = -520e6


def lorentzian(detuning, linewidth):
    """``(G/2)^2 / (d^2 + (G/2)^2)`` for FWHM ``G``; unity on resonance."""
    h = 0.5 * np.asarray(linewidth)
    return h * h / (np.asarray(detuning) ** 2 + h * h)


# emitter field ------------------------------------------------------------------------------------


@dataclass(frozen=True)
class FieldParams:
    """Generator inputs. Brightness and saturation power are model choices, not measured values."""

    fov: tuple = (36e-6, 36e-6)
    f_main: float = F0
    f_second: float = F0 + SECOND_OFFSET
    sigma_f: float = 60e6
    weight_main: float = 0.55
    linewidth: float = 100e6
    linewidth_spread: float = 0.15
    brightness: float = 1e7
    brightness_spread: float = 0.2
    saturation_power: float = 1e-6


@dataclass(frozen=True)
class EmitterField:
    positions: np.ndarray
    center_frequency: np.ndarray
    linewidth: np.ndarray
    brightness: np.ndarray
    saturation_power: np.ndarray
    fov: tuple = (36e-6, 36e-6)

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float).reshape(-1, 2)
        n = len(pos)
        arrays = {"positions": pos}
        for name in ("center_frequency", "linewidth", "brightness", "saturation_power"):
            arrays[name] = np.array(np.broadcast_to(getattr(self, name), (n,)), dtype=float)
        if np.any(arrays["linewidth"] <= 0):
            raise InvalidArgumentError("linewidths must be positive")
        if np.any(arrays["saturation_power"] <= 0) or np.any(arrays["brightness"] < 0):
            raise InvalidArgumentError("saturation powers must be positive and brightness non-negative")
        half = np.asarray(self.fov, dtype=float) / 2
        if np.any(np.abs(pos) > half * (1 + 1e-12)):
            raise InvalidArgumentError("emitter outside the field of view")
        for name, a in arrays.items():
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __len__(self):
        return len(self.positions)

    def response(self, resonant_power):
        """Photon rate for per-emitter resonant-equivalent power ``sum_c P_c g_ce L_e(f_c)``."""
        p = np.asarray(resonant_power, dtype=float)
        return self.brightness * p / (p + self.saturation_power)

    def with_emitters(self, positions, frequencies, linewidth=None, brightness=None, saturation_power=None):
        """Append emitters (defaults copy the field medians)."""
        pos = np.asarray(positions, dtype=float).reshape(-1, 2)
        k = len(pos)

        def pick(v, a):
            return np.broadcast_to(np.median(a) if v is None else v, (k,))

        return replace(
            self,
            positions=np.vstack([self.positions, pos]),
            center_frequency=np.r_[self.center_frequency, np.broadcast_to(frequencies, (k,))],
            linewidth=np.r_[self.linewidth, pick(linewidth, self.linewidth)],
            brightness=np.r_[self.brightness, pick(brightness, self.brightness)],
            saturation_power=np.r_[self.saturation_power, pick(saturation_power, self.saturation_power)],
        )

    def without(self, mask):
        keep = ~np.asarray(mask, dtype=bool)
        return replace(
            self,
            positions=self.positions[keep],
            center_frequency=self.center_frequency[keep],
            linewidth=self.linewidth[keep],
            brightness=self.brightness[keep],
            saturation_power=self.saturation_power[keep],
        )


def generate_field(seed=0, count=953, params: FieldParams | None = None) -> EmitterField:
    """Uniform positions over the field of view; frequencies from a two-Gaussian mixture.

    A single emitter is placed at the centre, on the main population's peak,
    with the nominal linewidth.
    """
    p = params or FieldParams()
    if count < 1:
        raise InvalidArgumentError("need at least one emitter")
    if count == 1:
        return EmitterField(np.zeros((1, 2)), p.f_main, p.linewidth, p.brightness, p.saturation_power, p.fov)
    rng = np.random.default_rng(seed)
    half = np.asarray(p.fov) / 2
    pos = rng.uniform(-half, half, (count, 2))
    main = rng.random(count) < p.weight_main
    f = np.where(main, p.f_main, p.f_second) + p.sigma_f * rng.standard_normal(count)
    lw = p.linewidth * np.exp(p.linewidth_spread * rng.standard_normal(count))
    b = p.brightness * np.exp(p.brightness_spread * rng.standard_normal(count))
    return EmitterField(pos, f, lw, b, p.saturation_power, p.fov)


# widefield PLE ------------------------------------------------------------------------------------


@dataclass(frozen=True)
class Datacube:
    x: np.ndarray
    y: np.ndarray
    frequency: np.ndarray
    counts: np.ndarray  # (frequency, y, x)

    def spectrum(self):
        return self.counts.sum(axis=(1, 2))


def widefield_ple_scan(
    fld: EmitterField,
    f_start,
    f_stop,
    steps,
    pixel=0.2e-6,
    psf_sigma=0.15e-6,
    power=1e-7,
    collection=0.01,
    exposure=0.05,
    background=1.0,
    noise_on=True,
    seed=0,
) -> Datacube:
    """Camera images under uniform illumination at each laser frequency.

    Every emitter sees ``power`` of resonant-equivalent drive times its
    Lorentzian; its collected counts are spread over a Gaussian PSF.
    """
    if steps < 2:
        raise InvalidArgumentError("need at least two frequency steps")
    nx, ny = (np.round(np.asarray(fld.fov) / pixel).astype(int) // 2) * 2
    x = (np.arange(nx) - nx // 2 + 0.5) * pixel
    y = (np.arange(ny) - ny // 2 + 0.5) * pixel
    # pixel-integrated separable PSF weights, (n_emitters, n_pixels)
    gx = _psf_weights(x, fld.positions[:, 0], psf_sigma, pixel)
    gy = _psf_weights(y, fld.positions[:, 1], psf_sigma, pixel)
    freqs = np.linspace(f_start, f_stop, steps)
    rng = np.random.default_rng(seed)
    cube = np.empty((steps, ny, nx))
    for i, f in enumerate(freqs):
        rate = fld.response(power * lorentzian(f - fld.center_frequency, fld.linewidth))
        mean = (gy.T * (rate * collection * exposure)) @ gx + background
        cube[i] = rng.poisson(mean) if noise_on else mean
    return Datacube(x, y, freqs, cube)


def _psf_weights(axis, centers, sigma, pixel):
    from scipy.special import erf

    lo = (axis[None, :] - pixel / 2 - centers[:, None]) / (np.sqrt(2) * sigma)
    hi = (axis[None, :] + pixel / 2 - centers[:, None]) / (np.sqrt(2) * sigma)
    return 0.5 * (erf(hi) - erf(lo))


def write_datacube(directory, cube: Datacube):
    """One ``slice_NNNN.csv`` per frequency (rows y, columns x) plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for i, (f, img) in enumerate(zip(cube.frequency, cube.counts)):
        name = f"slice_{i:04d}.csv"
        np.savetxt(d / name, img, delimiter=",", fmt="%.6g")
        files.append({"file": name, "frequency_hz": float(f)})
    manifest = {"x_m": cube.x.tolist(), "y_m": cube.y.tolist(), "slices": files}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))


# channel spots ------------------------------------------------------------------------------------


@dataclass(frozen=True)
class AddressingPlan:
    """Per-channel target emitter (``-1`` when unassigned), steering offset and focus."""

    emitter: np.ndarray
    offsets: np.ndarray
    focus: np.ndarray
    laser_frequency: float = F0
    frequency_shift: np.ndarray = None

    def __post_init__(self):
        e = np.array(self.emitter, dtype=int).reshape(-1)
        n = len(e)
        off = np.array(self.offsets, dtype=float).reshape(n, 2)
        foc = np.array(np.broadcast_to(self.focus, (n,)), dtype=float)
        shift = np.zeros(n) if self.frequency_shift is None else np.array(np.broadcast_to(self.frequency_shift, (n,)), dtype=float)
        for name, a in (("emitter", e), ("offsets", off), ("focus", foc), ("frequency_shift", shift)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def unsteered(cls, n_channels, laser_frequency=F0):
        return cls(-np.ones(n_channels, int), np.zeros((n_channels, 2)), 0.0, laser_frequency)

    def __len__(self):
        return len(self.emitter)

    def drive_frequency(self):
        return self.laser_frequency + self.frequency_shift


@dataclass
class EmitterLab:
    """Channels focused onto an emitter field.

    ``centers`` are the unsteered spot positions. The true spot sits at
    ``center + offset + position_error`` with a focal shift
    ``focus + focus_error``; the errors stand for the residual calibration
    of the steering module and are what alignment has to find.
    """

    fld: EmitterField
    centers: np.ndarray
    spot_waist: float = 0.5e-6
    wavelength: float = 737.1e-9
    reach: float = 6.8e-6
    position_error: np.ndarray = None
    focus_error: np.ndarray = None
    channel_power: float = 1e-7
    collection: float = 0.01
    camera_pixel: float = 0.2e-6
    psf_sigma: float = 0.15e-6

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float).reshape(-1, 2)
        n = len(self.centers)
        self.position_error = np.zeros((n, 2)) if self.position_error is None else np.asarray(self.position_error, float)
        self.focus_error = np.zeros(n) if self.focus_error is None else np.asarray(self.focus_error, float)

    @classmethod
    def build(cls, fld: EmitterField, rows=4, cols=4, pitch=6e-6, seed=0, position_sigma=0.3e-6, focus_sigma=1e-6, **kw):
        iy, ix = np.mgrid[0:rows, 0:cols]
        centers = np.column_stack([ix.ravel() - (cols - 1) / 2, iy.ravel() - (rows - 1) / 2]) * pitch
        rng = np.random.default_rng(seed)
        n = rows * cols
        return cls(
            fld,
            centers,
            position_error=position_sigma * rng.standard_normal((n, 2)),
            focus_error=focus_sigma * rng.standard_normal(n),
            **kw,
        )

    @property
    def n_channels(self):
        return len(self.centers)

    @property
    def rayleigh_range(self):
        return np.pi * self.spot_waist**2 / self.wavelength

    def spot_positions(self, plan: AddressingPlan):
        return self.centers + plan.offsets + self.position_error

    def coupling(self, plan: AddressingPlan, channels=None):
        """``g[c, e]``: spot intensity at each emitter relative to an ideally focused peak."""
        ch = np.arange(self.n_channels) if channels is None else np.atleast_1d(channels)
        pos = self.spot_positions(plan)[ch]
        z = (plan.focus + self.focus_error)[ch]
        w2 = self.spot_waist**2 * (1.0 + (z / self.rayleigh_range) ** 2)
        d2 = np.sum((pos[:, None, :] - self.fld.positions[None]) ** 2, axis=2)
        return (self.spot_waist**2 / w2)[:, None] * np.exp(-2.0 * d2 / w2[:, None])

    def rates(self, plan: AddressingPlan, powers, channels=None):
        """Per-emitter photon rates with channel ``c`` delivering ``powers[c]``."""
        ch = np.arange(self.n_channels) if channels is None else np.atleast_1d(channels)
        p = np.broadcast_to(np.asarray(powers, dtype=float), (len(ch),))
        g = self.coupling(plan, ch)
        lor = lorentzian(plan.drive_frequency()[ch][:, None] - self.fld.center_frequency[None], self.fld.linewidth[None])
        return self.fld.response((p[:, None] * g * lor).sum(axis=0))

    def camera_signal(self, plan, channel, target, exposure=1.0, rng=None):
        """Collected counts on the camera pixel at ``target`` with one channel on at full power."""
        rate = self.rates(plan, self.channel_power, channel)
        psf = np.exp(-np.sum((self.fld.positions - target) ** 2, axis=1) / (2 * self.psf_sigma**2))
        mean = float(np.sum(rate * psf) * self.collection * exposure)
        return float(rng.poisson(mean)) if rng is not None else mean

    def global_counts(self, plan, powers, duration, channels=None):
        return float(self.rates(plan, powers, channels).sum() * self.collection * duration)


def isolated_emitters(fld: EmitterField, frequency, spot_radius, linewidths=3.0):
    """Indices of emitters resonant at ``frequency`` (within half a linewidth) with no
    other emitter inside two spot radii and ``linewidths`` linewidths."""
    resonant = np.abs(fld.center_frequency - frequency) <= fld.linewidth / 2
    d = np.hypot(*(fld.positions[:, None] - fld.positions[None]).transpose(2, 0, 1))
    df = np.abs(fld.center_frequency[:, None] - fld.center_frequency[None])
    crowd = (d < 2 * spot_radius) & (df < linewidths * np.maximum(fld.linewidth[:, None], fld.linewidth[None]))
    np.fill_diagonal(crowd, False)
    return np.flatnonzero(resonant & ~crowd.any(axis=1))


# alignment ----------------------------------------------------------------------------------------


@dataclass
class AlignmentReport:
    scans: dict = field(default_factory=dict)
    signal: np.ndarray = None
    iterations: np.ndarray = None


def blaze_scan(lab: EmitterLab, plan: AddressingPlan, channel, extent=None, step=None, exposure=0.01, rng=None):
    """Global fluorescence while one channel is stepped over a square grid of offsets.

    Returns ``(offsets_x, offsets_y, counts)`` with ``counts[iy, ix]``.
    """
    extent = lab.reach if extent is None else extent
    step = lab.spot_waist / 2 if step is None else step
    half = int(np.floor(extent / step + 1e-9))
    ax = np.arange(-half, half + 1) * step
    ox, oy = np.meshgrid(ax, ax)
    pos = lab.centers[channel] + lab.position_error[channel] + np.column_stack([ox.ravel(), oy.ravel()])
    z = plan.focus[channel] + lab.focus_error[channel]
    w2 = lab.spot_waist**2 * (1.0 + (z / lab.rayleigh_range) ** 2)
    lor = lorentzian(plan.drive_frequency()[channel] - lab.fld.center_frequency, lab.fld.linewidth)
    counts = np.empty(len(pos))
    # chunk over scan points to bound memory
    for s in range(0, len(pos), 512):
        d2 = np.sum((pos[s : s + 512, None, :] - lab.fld.positions[None]) ** 2, axis=2)
        g = lab.spot_waist**2 / w2 * np.exp(-2.0 * d2 / w2)
        counts[s : s + 512] = lab.fld.response(lab.channel_power * g * lor).sum(axis=1)
    counts = counts * lab.collection * exposure
    if rng is not None:
        counts = rng.poisson(counts).astype(float)
    return ax, ax, counts.reshape(ox.shape)


def _hill_climb(objective, start, steps, min_step):
    x = np.array(start, dtype=float)
    steps = np.array(steps, dtype=float)
    best = objective(x)
    n = 0
    while np.any(steps >= min_step):
        improved = False
        for i in range(len(x)):
            if steps[i] < min_step[i]:
                continue
            for sign in (1.0, -1.0):
                trial = x.copy()
                trial[i] += sign * steps[i]
                v = objective(trial)
                n += 1
                if v > best:
                    x, best, improved = trial, v, True
                    break
        if not improved:
            steps = steps / 2
    return x, best, n


def align_channels(
    plan: AddressingPlan,
    lab: EmitterLab,
    channels=None,
    preferred=None,
    scan_step=None,
    exposure=0.01,
    rng=None,
    tolerance=None,
):
    """Pick an isolated resonant emitter for each channel and hill-climb its offset and focus.

    Emitters are drawn from the widefield catalogue (the field itself);
    channel-to-emitter matching minimizes total squared steering distance.
    ``preferred`` pins chosen channels to given emitter indices. Each
    channel's blaze scan seeds the climb at the scan maximum nearest the
    chosen emitter; the climb maximizes the camera signal on that emitter's
    pixel. Returns ``(plan, report)``.
    """
    ch = np.arange(len(plan)) if channels is None else np.asarray(channels)
    preferred = dict(preferred or {})
    f_drive = plan.drive_frequency()
    fld = lab.fld
    candidates = isolated_emitters(fld, plan.laser_frequency, lab.spot_waist)
    free = [c for c in ch if c not in preferred]
    taken = set(preferred.values())
    pool = np.array([e for e in candidates if e not in taken], dtype=int)
    emitter = np.array(plan.emitter)
    for c, e in preferred.items():
        emitter[c] = e
    if free:
        if len(pool) == 0:
            raise AssignmentInfeasibleError(int(free[0]), "no isolated emitter available")
        d2 = np.sum((lab.centers[free][:, None] - fld.positions[pool][None]) ** 2, axis=2)
        big = 1e6 * (lab.reach**2 + d2.max())
        cost = np.where(d2 <= lab.reach**2, d2, big)
        rows, cols = linear_sum_assignment(cost)
        got = dict(zip(rows, cols))
        for i, c in enumerate(free):
            if i not in got or cost[i, got[i]] >= big:
                raise AssignmentInfeasibleError(int(c), f"no isolated emitter within reach of channel {c}")
            emitter[c] = pool[got[i]]

    offsets = np.array(plan.offsets)
    focus = np.array(plan.focus)
    report = AlignmentReport(signal=np.zeros(len(plan)), iterations=np.zeros(len(plan), int))
    w = lab.spot_waist
    tol = w / 100 if tolerance is None else tolerance
    for c in ch:
        target = fld.positions[emitter[c]]
        if np.hypot(*(target - lab.centers[c])) > lab.reach:
            raise SteeringLimitError(int(c), "assigned emitter lies outside the steering range")
        ax, ay, counts = blaze_scan(lab, plan, c, step=scan_step, exposure=exposure, rng=rng)
        report.scans[int(c)] = (ax, ay, counts)
        # scan maximum within one spot radius of the catalogue position
        ox, oy = np.meshgrid(ax, ay)
        near = np.hypot(lab.centers[c][0] + ox - target[0], lab.centers[c][1] + oy - target[1]) <= w
        if near.any():
            i = np.argmax(np.where(near, counts, -np.inf))
            start = [ox.flat[i], oy.flat[i], focus[c]]
        else:
            start = [*(target - lab.centers[c]), focus[c]]

        def objective(x, c=c, target=target):
            trial = replace(plan, offsets=_set_row(offsets, c, x[:2]), focus=_set_item(focus, c, x[2]))
            return lab.camera_signal(trial, c, target)

        best, value, n = _hill_climb(objective, start, [w / 2, w / 2, lab.rayleigh_range / 2], [tol, tol, tol * lab.rayleigh_range / w])
        if np.hypot(*best[:2]) > lab.reach:
            raise SteeringLimitError(int(c), "alignment walked outside the steering range")
        offsets[c], focus[c] = best[:2], best[2]
        report.signal[c], report.iterations[c] = value, n
    return replace(plan, emitter=emitter, offsets=offsets, focus=focus), report


def _set_row(a, i, v):
    b = np.array(a)
    b[i] = v
    return b


def _set_item(a, i, v):
    b = np.array(a)
    b[i] = v
    return b


# spectral addressing ------------------------------------------------------------------------------


@dataclass(frozen=True)
class Spectrum:
    shift: np.ndarray
    counts: np.ndarray
    sigma: np.ndarray

    def binned(self, factor=2):
        """Mean of consecutive groups of ``factor`` points; a ragged tail is dropped."""
        n = len(self.shift) // factor * factor
        if n == 0:
            raise InvalidArgumentError("spectrum shorter than one bin")
        s = self.shift[:n].reshape(-1, factor).mean(axis=1)
        c = self.counts[:n].reshape(-1, factor).mean(axis=1)
        sig = np.sqrt((self.sigma[:n].reshape(-1, factor) ** 2).sum(axis=1)) / factor
        return Spectrum(s, c, sig)

    def peaks(self, prominence=0.2):
        """Shifts of peaks whose prominence exceeds ``prominence`` of the tallest point."""
        idx, _ = find_peaks(self.counts, prominence=prominence * np.max(self.counts))
        return self.shift[idx]


def spectral_ple(
    lab: EmitterLab,
    plan: AddressingPlan,
    channel,
    f_laser,
    shift_start,
    shift_stop,
    step,
    dwell=1.0,
    power=None,
    bandwidth=7e9,
    noise_on=True,
    seed=0,
) -> Spectrum:
    """Scan one channel's first-order sideband and record global fluorescence.

    The drive frequency is ``f_laser + shift``; only that sideband is
    modelled. Returns counts per dwell with Poisson error bars.
    """
    if step <= 0 or shift_stop <= shift_start:
        raise InvalidArgumentError("need an increasing shift range and positive step")
    if max(abs(shift_start), abs(shift_stop)) > bandwidth:
        raise OutOfBandError(f"shift beyond the {bandwidth / 1e9:g} GHz synthesis bandwidth")
    shifts = shift_start + step * np.arange(int(np.floor((shift_stop - shift_start) / step + 1e-9)) + 1)
    p = lab.channel_power if power is None else power
    rng = np.random.default_rng(seed)
    counts = np.empty(len(shifts))
    for i, s in enumerate(shifts):
        shift = np.array(plan.frequency_shift)
        shift[channel] = s
        trial = replace(plan, laser_frequency=f_laser, frequency_shift=shift)
        counts[i] = lab.global_counts(trial, p, dwell, channel)
    if noise_on:
        counts = rng.poisson(counts).astype(float)
    return Spectrum(shifts, counts, np.sqrt(np.maximum(counts, 1.0)))


def write_spectrum_csv(path, spectrum: Spectrum):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "value", "poisson_sigma"])
        for s, c, e in zip(spectrum.shift, spectrum.counts, spectrum.sigma):
            w.writerow([f"{s:.6g}", f"{c:.6g}", f"{e:.6g}"])


# spatial addressing -------------------------------------------------------------------------------


def amplitude_voltage(amplitude, v_pi):
    """Offset from the zero point giving ``amplitude`` of full modulation depth."""
    a = np.clip(np.asarray(amplitude, dtype=float), 0.0, 1.0)
    return 2.0 * np.asarray(v_pi) / np.pi * np.arcsin(np.sqrt(a))


def addressing_sequence(v_pi, n_channels=16, pulse_width=80e-9, bin_width=100e-9, dt=8e-9):
    """Three sections of ``n_channels`` pulses each.

    Section 1 pulses channel ``k`` alone in bin ``k``; section 2 pulses the
    pair ``(k, k + 1)``; section 3 drives every channel with amplitude
    ``k / (n - 1)``. Returns ``(sequence, bins, drive)`` where ``drive[c, b]``
    is the commanded amplitude.
    """
    n_bins = 3 * n_channels
    drive = np.zeros((n_channels, n_bins))
    for k in range(n_channels):
        drive[k, k] = 1.0
        drive[k, n_channels + k] = 1.0
        drive[(k + 1) % n_channels, n_channels + k] = 1.0
        drive[:, 2 * n_channels + k] = k / (n_channels - 1)
    width = int(round(pulse_width / dt))
    n = int(np.ceil(n_bins * bin_width / dt - 1e-9))
    volts = np.zeros((n_channels, n))
    v_pi = np.broadcast_to(v_pi, (n_channels,))
    for b in range(n_bins):
        start = int(np.floor(b * bin_width / dt + 1e-9)) + 1
        volts[:, start : start + width] = amplitude_voltage(drive[:, b], v_pi)[:, None]
    bins = [(b * bin_width, (b + 1) * bin_width) for b in range(n_bins)]
    return PulseSequence(tuple(range(n_channels)), volts, dt), bins, drive


@dataclass
class AddressingResult:
    counts: np.ndarray
    expected: np.ndarray
    baseline: np.ndarray
    sigma: np.ndarray
    skipped: list
    mean: np.ndarray = None
    baseline_mean: np.ndarray = None

    @property
    def signal(self):
        return self.counts - self.baseline

    def sections(self, n_channels=16):
        return [self.signal[i * n_channels : (i + 1) * n_channels] for i in range(len(self.signal) // n_channels)]


def spatial_addressing_run(
    lab: EmitterLab,
    plan: AddressingPlan,
    lock: ZeroPointLock,
    sequence: PulseSequence,
    bins,
    delivery=2e-4,
    repetitions=1e9,
    seed=0,
):
    """Play ``sequence`` through the locked modulators and count global fluorescence per bin.

    Each bin's drive is the bin-averaged optical power, ``delivery`` times
    the integrated modulator output over the bin width. Disabled channels
    are skipped and listed in ``skipped``. A second pass with every channel
    held at its zero point gives the leakage baseline. ``expected`` is the
    sum of each channel's individual contribution computed from the
    transmission model at the commanded voltages (lock setpoint plus
    sequence offset), so lock residuals do not enter the comparison.
    """
    bank: ChannelBank = lock.bank
    active = [i for i, c in enumerate(sequence.channels) if bank.enabled[c]]
    skipped = [c for c in sequence.channels if not bank.enabled[c]]
    seq = PulseSequence(tuple(sequence.channels[i] for i in active), sequence.voltages[active], sequence.dt, sequence.trigger_time)
    widths = np.array([b - a for a, b in bins])
    rng = np.random.default_rng(seed)

    def bin_powers(s):
        res = run_locked_session(s, lock, bins)
        return np.array([res.reports[c].integrated_power for c in s.channels]) / widths * delivery

    channels = np.array(seq.channels)
    on = bin_powers(seq)
    off = bin_powers(replace(seq, voltages=np.zeros_like(seq.voltages)))
    scale = lab.collection * widths * repetitions

    def counts_for(powers):
        return np.array([lab.rates(plan, powers[:, b], channels).sum() for b in range(len(bins))]) * scale

    mean, base_mean = counts_for(on), counts_for(off)
    counts = rng.poisson(mean).astype(float)
    baseline = rng.poisson(base_mean).astype(float)

    # model expectation: each channel alone through the modulator model at the commanded voltages
    zero = lock.state.v_est()
    expected = np.zeros(len(bins))
    for row, c in zip(seq.voltages, channels):
        p = modelled_bin_energy(bank, c, row, seq.dt, bins, lock.input_power, zero=zero[c]) / widths * delivery
        expected += np.array([lab.rates(plan, p[b], c).sum() for b in range(len(bins))]) * scale
    return AddressingResult(counts, expected, baseline, np.sqrt(np.maximum(counts, 1.0)), skipped, mean, base_mean)


def modelled_bin_energy(bank: ChannelBank, channel, offsets, dt, bins, input_power, sample_rate=SAMPLE_RATE, zero=None):
    """Per-bin optical energy of a held, band-limited drive about ``zero`` (default: the true zero point)."""
    step = 1.0 / sample_rate
    n = int(round(len(offsets) * dt / step))
    t = np.arange(n + 1) * step
    idx = np.minimum((t / dt + 1e-9).astype(int), len(offsets) - 1)
    v0 = bank.v0[channel] if zero is None else zero
    drive = bank.apply_bandwidth(v0 + np.asarray(offsets)[idx], step, channel)
    power = input_power * bank.transmission(drive, channel)
    return integrated_pulse_power(power, bins, times=t).integrated_power


def write_trace_csv(path, result: AddressingResult):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "value", "poisson_sigma", "expected", "baseline"])
        for b, (c, s, e, z) in enumerate(zip(result.counts, result.sigma, result.expected, result.baseline)):
            w.writerow([b, f"{c:.6g}", f"{s:.6g}", f"{e:.6g}", f"{z:.6g}"])


# demo scenario ------------------------------------------------------------------------------------

DISABLED_DEMO = tuple(range(4, 12)) + (14, 15)


def demo_lab(seed=0, count=953, pair_channel=2, pair_offset=(1.2e-6, -0.8e-6), **kw):
    """Field plus channel layout with a deliberate spectral pair under ``pair_channel``.

    Random emitters near the pair are removed and the pair (one emitter at
    ``F0``, one ``520 MHz`` below, 0.1 um apart) is appended, so the pair's
    indices are the last two.
    """
    fld = generate_field(seed, count + 50)
    lab = EmitterLab.build(fld, seed=seed + 1, **kw)
    site = lab.centers[pair_channel] + np.asarray(pair_offset)
    crowd = np.hypot(*(fld.positions - site).T) < 4 * lab.spot_waist
    fld = fld.without(crowd)
    fld = fld.without(np.arange(len(fld)) >= count - 2).with_emitters([site, site + [0.1e-6, 0.0]], [F0, F0 + SECOND_OFFSET])
    lab.fld = fld
    return lab, {pair_channel: len(fld) - 2}
