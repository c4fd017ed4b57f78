"""Zero-point lock, trigger-gated pulse playback and pulse-power metrology.

Each channel is servoed onto one transmission extremum (LO = deepest
extinction, HI = maximum) by balancing the transmission measured at a voltage
pair straddling it. On a trigger the lock is suspended, a waveform is played
relative to the locked setpoints, and the lock resumes afterwards.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import trapezoid

from .device import Camera, ChannelBank, integrate_regions, region_noise_floor
from .errors import InvalidArgumentError, LockLostError, NotConvergedError

LO, HI = "LO", "HI"

FRAME_PERIOD = 5e-3
EXPOSURE = 4e-3
SETPOINT_DT = 8e-9
SAMPLE_RATE = 5e9


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LockState:
    """Per-channel lock setpoints.

    ``gain`` is in volts per unit imbalance; the imbalance is
    ``(T+ - T-) / (T+ + T-)`` measured at ``v_est +/- delta``.
    ``updated`` lists the channels changed by the most recent step.
    """

    v_lo_est: np.ndarray
    v_hi_est: np.ndarray
    delta: np.ndarray
    gain: np.ndarray
    last_error: np.ndarray
    locked_to: tuple
    updated: tuple = ()
    frames: int = 0

    def __post_init__(self):
        n = len(self.locked_to)
        for name in ("v_lo_est", "v_hi_est", "delta", "gain", "last_error"):
            object.__setattr__(self, name, _frozen(np.broadcast_to(getattr(self, name), (n,))))
        object.__setattr__(self, "locked_to", tuple(self.locked_to))
        object.__setattr__(self, "updated", tuple(self.updated))
        if any(m not in (LO, HI) for m in self.locked_to):
            raise InvalidArgumentError("locked_to entries must be 'LO' or 'HI'")
        if np.any(self.delta <= 0):
            raise InvalidArgumentError("delta must be positive")

    @classmethod
    def initial(cls, bank: ChannelBank, v_lo_guess=None, delta_fraction=0.05, loop_gain=0.5, locked_to=LO):
        """Start from a zero-point guess (defaults to 0 V) with slope-normalized gains."""
        n = bank.n_channels
        modes = (locked_to,) * n if isinstance(locked_to, str) else tuple(locked_to)
        v_lo = np.zeros(n) if v_lo_guess is None else np.broadcast_to(np.asarray(v_lo_guess, dtype=float), (n,))
        delta = delta_fraction * bank.v_pi
        gain = [default_gain(bank, c, delta[c], modes[c], loop_gain) for c in range(n)]
        if 2 * np.max(delta / bank.v_pi) >= 1:
            raise InvalidArgumentError("voltage pairs must straddle a single extremum (2 delta < V_pi)")
        return cls(v_lo, v_lo + bank.v_pi, delta, gain, np.full(n, np.inf), modes)

    @property
    def n_channels(self):
        return len(self.locked_to)

    def v_est(self) -> np.ndarray:
        return np.where(np.array(self.locked_to) == LO, self.v_lo_est, self.v_hi_est)

    def zero_points(self) -> np.ndarray:
        """Current zero-point estimates regardless of which extremum is locked."""
        return self.v_lo_est

    def converged(self, threshold=0.1, channels=None) -> bool:
        idx = range(self.n_channels) if channels is None else channels
        return bool(np.all(np.abs(self.last_error[list(idx)]) < threshold))

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.v_lo_est, self.v_hi_est, self.delta, self.gain):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(",".join(self.locked_to).encode())
        return h.hexdigest()


def imbalance(t_minus, t_plus):
    t_minus, t_plus = np.asarray(t_minus, dtype=float), np.asarray(t_plus, dtype=float)
    total = t_plus + t_minus
    return np.divide(t_plus - t_minus, total, out=np.zeros_like(total), where=total != 0)


def default_gain(bank: ChannelBank, channel, delta, locked_to=LO, loop_gain=0.5):
    """Gain giving ``loop_gain`` correction per update at the extremum.

    Near the extremum ``e ~ T'(x0 + delta) / T(x0 + delta) * offset`` where
    ``x0`` is 0 (LO) or ``V_pi`` (HI); the gain is ``loop_gain`` over that slope.
    """
    vpi, er, il = bank.v_pi[channel], bank.extinction_ratio[channel], bank.insertion_loss[channel]
    x = delta + (vpi if locked_to == HI else 0.0)
    t = il * ((1 - 1 / er) * np.sin(np.pi * x / (2 * vpi)) ** 2 + 1 / er)
    dt = il * (1 - 1 / er) * np.pi / (2 * vpi) * np.sin(np.pi * x / vpi)
    return float(loop_gain * t / abs(dt))


def lock_step(
    state: LockState,
    bank: ChannelBank,
    camera: Camera,
    frame_budget=2,
    input_power=5e-2,
    frame_period=FRAME_PERIOD,
    exposure=EXPOSURE,
    noise_on=True,
) -> LockState:
    """One camera frame of the zero-point lock.

    Both pair voltages are imaged within the frame (half the exposure
    each), every enabled channel's imbalance is computed, and only the
    ``frame_budget`` channels with the largest ``|e|`` get a setpoint
    update. Drift advances by one frame period with the setpoints applied.
    """
    if frame_budget < 1:
        raise InvalidArgumentError("frame_budget must be at least 1")
    enabled = [c for c in range(state.n_channels) if bank.enabled[c]]
    v = state.v_est()
    measured = []
    for sign in (-1.0, 1.0):
        powers = {c: input_power * bank.transmission(v[c] + sign * state.delta[c], c) for c in enabled}
        measured.append(integrate_regions(camera.capture_frame(powers, exposure / 2, noise_on), enabled))
    t_minus = np.array([measured[0][c] for c in enabled])
    t_plus = np.array([measured[1][c] for c in enabled])

    if noise_on:
        floor = 3.0 * region_noise_floor(camera, enabled[0], exposure / 2) if enabled else 0.0
        for c, a, b in zip(enabled, t_minus, t_plus):
            if a < floor and b < floor:
                raise LockLostError(c)

    errors = np.array(state.last_error)
    e = imbalance(t_minus, t_plus)
    errors[enabled] = e
    order = np.argsort(-np.abs(e), kind="stable")[:frame_budget]
    chosen = tuple(int(enabled[i]) for i in order)

    v_lo, v_hi = np.array(state.v_lo_est), np.array(state.v_hi_est)
    for c in chosen:
        if state.locked_to[c] == LO:
            v_lo[c] -= state.gain[c] * errors[c]
            v_hi[c] = v_lo[c] + bank.v_pi[c]
        else:
            v_hi[c] += state.gain[c] * errors[c]
            v_lo[c] = v_hi[c] - bank.v_pi[c]

    new = replace(state, v_lo_est=v_lo, v_hi_est=v_hi, last_error=errors, updated=chosen, frames=state.frames + 1)
    bank.drift_step(frame_period, new.v_est())
    return new


@dataclass
class ZeroPointLock:
    """Bank, camera and lock state bundled into a steppable controller."""

    bank: ChannelBank
    camera: Camera
    state: LockState
    input_power: float = 5e-2
    frame_budget: int = 2
    frame_period: float = FRAME_PERIOD
    exposure: float = EXPOSURE
    noise_on: bool = True

    @classmethod
    def build(cls, bank: ChannelBank, camera_seed=0, **kwargs):
        camera = Camera.grid(range(bank.n_channels), rng=np.random.default_rng(camera_seed))
        state_kw = {k: kwargs.pop(k) for k in ("v_lo_guess", "delta_fraction", "loop_gain", "locked_to") if k in kwargs}
        return cls(bank, camera, LockState.initial(bank, **state_kw), **kwargs)

    def step(self) -> LockState:
        self.state = lock_step(
            self.state,
            self.bank,
            self.camera,
            self.frame_budget,
            self.input_power,
            self.frame_period,
            self.exposure,
            self.noise_on,
        )
        return self.state

    def run(self, duration):
        """Step for ``duration`` seconds; returns the per-frame tracking error ``v_est - V0`` (frames x channels)."""
        n = int(round(duration / self.frame_period))
        errors = np.empty((n, self.bank.n_channels))
        for i in range(n):
            self.step()
            errors[i] = self.tracking_error()
        return errors

    def tracking_error(self):
        target = np.where(np.array(self.state.locked_to) == LO, self.bank.v0, self.bank.v0 + self.bank.v_pi)
        return self.state.v_est() - target

    def idle(self, duration):
        """Let the bank drift with setpoints held but no lock updates."""
        n = int(round(duration / self.frame_period))
        for _ in range(n):
            self.bank.drift_step(self.frame_period, self.state.v_est())


# pulse sequences ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class PulseSequence:
    """Setpoints on a uniform 8 ns grid, as voltage offsets from each channel's locked zero point.

    ``voltages`` has one row per entry of ``channels``.
    """

    channels: tuple
    voltages: np.ndarray
    dt: float = SETPOINT_DT
    trigger_time: float = 0.0

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.voltages, dtype=float))
        if v.shape[0] != len(self.channels):
            raise InvalidArgumentError("one voltage row per channel required")
        if v.shape[1] < 1 or not np.all(np.isfinite(v)):
            raise InvalidArgumentError("voltages must be finite and non-empty")
        if not self.dt > 0:
            raise InvalidArgumentError("setpoint spacing must be positive")
        v.setflags(write=False)
        object.__setattr__(self, "voltages", v)
        object.__setattr__(self, "channels", tuple(self.channels))

    @property
    def duration(self):
        return self.voltages.shape[1] * self.dt

    @property
    def times(self):
        return self.trigger_time + np.arange(self.voltages.shape[1]) * self.dt


def square_pulses(channels, v_on, n_pulses=50, pulse_width=80e-9, bin_width=100e-9, dt=SETPOINT_DT, trigger_time=0.0):
    """``n_pulses`` square pulses, one per bin, starting on the first setpoint strictly inside the bin.

    Keeping every edge off the bin boundaries makes each pulse's energy
    independent of where the 8 ns grid falls relative to the bins.

    Returns ``(sequence, bins)`` with ``bins`` the ``(start, end)`` times
    relative to the trigger.
    """
    width = int(round(pulse_width / dt))
    if abs(width * dt - pulse_width) > 1e-6 * dt:
        raise InvalidArgumentError("pulse width must be a whole number of setpoints")
    n = int(np.ceil(n_pulses * bin_width / dt - 1e-9))
    if (np.floor((n_pulses - 1) * bin_width / dt + 1e-9) + 1 + width) * dt > n_pulses * bin_width + 1e-12:
        raise InvalidArgumentError("pulses do not fit inside their bins")
    row = np.zeros(n)
    for k in range(n_pulses):
        start = int(np.floor(k * bin_width / dt + 1e-9)) + 1
        row[start : start + width] = 1.0
    volts = np.outer(np.broadcast_to(v_on, (len(channels),)), row)
    bins = [(k * bin_width, (k + 1) * bin_width) for k in range(n_pulses)]
    return PulseSequence(tuple(channels), volts, dt, trigger_time), bins


def load_sequence_csv(path, dt=SETPOINT_DT, tolerance=1e-3):
    """Read ``channel,time_ns,voltage`` rows; times must sit on one uniform grid shared by all channels."""
    rows = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault(int(r["channel"]), []).append((float(r["time_ns"]) * 1e-9, float(r["voltage"])))
    if not rows:
        raise InvalidArgumentError("empty sequence file")
    channels = tuple(sorted(rows))
    times = np.array([t for t, _ in rows[channels[0]]])
    for c in channels:
        t = np.array([t for t, _ in rows[c]])
        if t.shape != times.shape or not np.allclose(t, times, atol=tolerance * dt):
            raise InvalidArgumentError(f"channel {c} is not on the shared time grid")
    if np.any(np.diff(times) <= 0):
        raise InvalidArgumentError("times must be strictly increasing")
    if times.size > 1 and not np.allclose(np.diff(times), dt, atol=tolerance * dt):
        raise InvalidArgumentError(f"setpoints must be spaced {dt * 1e9:g} ns apart")
    volts = np.array([[v for _, v in rows[c]] for c in channels])
    return PulseSequence(channels, volts, dt, float(times[0]))


def write_sequence_csv(path, sequence: PulseSequence):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["channel", "time_ns", "voltage"])
        for c, row in zip(sequence.channels, sequence.voltages):
            for t, v in zip(sequence.times, row):
                w.writerow([c, f"{t * 1e9:.6f}", f"{v:.9g}"])


# metrology ---------------------------------------------------------------------------------------


@dataclass(frozen=True)
class PulseReport:
    integrated_power: np.ndarray
    deviation: np.ndarray

    @classmethod
    def from_values(cls, values):
        v = np.asarray(values, dtype=float)
        mean = v.mean()
        if mean == 0:
            raise InvalidArgumentError("pulse energies average to zero")
        return cls(v, (v - mean) / mean)

    @classmethod
    def pool(cls, reports):
        """Merge reports from repeated sessions; deviations refer to the pooled mean."""
        return cls.from_values(np.concatenate([r.integrated_power for r in reports]))

    @property
    def max_abs_deviation(self):
        return float(np.max(np.abs(self.deviation)))


def integrated_pulse_power(trace, bins, dt=None, times=None) -> PulseReport:
    """Trapezoidal energy per ``(start, end)`` bin of a uniformly sampled power trace."""
    p = np.asarray(trace, dtype=float)
    if times is None:
        if dt is None:
            raise InvalidArgumentError("give the sample spacing or the sample times")
        times = np.arange(p.size) * dt
    times = np.asarray(times, dtype=float)
    step = times[1] - times[0] if times.size > 1 else 0.0
    eps = 1e-6 * step
    values = []
    for start, end in bins:
        if start < times[0] - eps or end > times[-1] + eps:
            raise InvalidArgumentError(f"bin ({start}, {end}) lies outside the trace")
        sel = (times >= start - eps) & (times <= end + eps)
        if sel.sum() < 2:
            raise InvalidArgumentError(f"bin ({start}, {end}) contains fewer than two samples")
        values.append(trapezoid(p[sel], times[sel]))
    return PulseReport.from_values(values)


@dataclass
class SessionResult:
    reports: dict
    times: np.ndarray
    traces: dict
    hash_at_trigger: str
    hash_at_reinstatement: str
    extras: dict = field(default_factory=dict)


def run_locked_session(
    sequence: PulseSequence,
    lock: ZeroPointLock,
    bins,
    sample_rate=SAMPLE_RATE,
    photodiode_noise=0.0,
    require_converged=True,
    threshold=0.1,
    rng=None,
) -> SessionResult:
    """Suspend the lock on trigger, play ``sequence`` and record the photodiode.

    Each channel's drive is its locked zero point plus the sequence offset,
    held between setpoints, band-limited by the modulator, and converted to
    optical power through the transmission curve. Drift free-runs for the
    sequence duration. ``bins`` are relative to the trigger.
    """
    state = lock.state
    if require_converged and not state.converged(threshold, sequence.channels):
        raise NotConvergedError("lock has not converged; refusing trigger")
    bank = lock.bank
    trigger_hash = state.digest()
    zero = state.zero_points()

    dt = 1.0 / sample_rate
    n = int(round(sequence.duration / dt))
    t = np.arange(n + 1) * dt
    idx = np.minimum((t / sequence.dt + 1e-9).astype(int), sequence.voltages.shape[1] - 1)
    rng = rng or np.random.default_rng(0)
    reports, traces = {}, {}
    for c, row in zip(sequence.channels, sequence.voltages):
        drive = bank.apply_bandwidth(zero[c] + row[idx], dt, c)
        power = lock.input_power * bank.transmission(drive, c)
        if photodiode_noise:
            power = power + photodiode_noise * rng.standard_normal(power.shape)
        traces[c] = power
        reports[c] = integrated_pulse_power(power, bins, times=t)

    mean_drive = state.v_est().copy()
    mean_drive[list(sequence.channels)] = zero[list(sequence.channels)] + sequence.voltages.mean(axis=1)
    bank.drift_step(sequence.duration, mean_drive)
    reinstated_hash = lock.state.digest()
    assert reinstated_hash == trigger_hash, "setpoints changed during playback"
    return SessionResult(reports, sequence.trigger_time + t, traces, trigger_hash, reinstated_hash)


def write_pulse_report_csv(path, rows):
    """``rows`` are ``(session, channel, pulse, integrated_power, deviation)`` tuples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["session", "channel", "pulse", "integrated_power", "deviation"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], f"{r[3]:.10g}", f"{r[4]:.10g}"])


def pooled_session_study(
    bank: ChannelBank,
    locked=True,
    sessions=20,
    spacing=1.0,
    settle=2.0,
    channels=None,
    initial_error=0.3,
    seed=0,
    threshold=0.1,
    **lock_kwargs,
):
    """Repeat triggered sessions over many seconds and pool the pulse energies.

    The locked arm keeps the lock running between sessions. The control arm
    starts with setpoints ``initial_error * V_pi`` away from the zero point
    and never updates them, so drift between sessions goes uncorrected.
    Returns ``(pooled_reports_by_channel, per_session_rows, lock)``.
    """
    lock = ZeroPointLock.build(bank, camera_seed=seed, **lock_kwargs)
    chans = tuple(range(bank.n_channels)) if channels is None else tuple(channels)
    if locked:
        lock.run(settle)
    else:
        off = bank.v0 + initial_error * bank.v_pi
        lock.state = replace(lock.state, v_lo_est=off, v_hi_est=off + bank.v_pi)
    sequence, bins = square_pulses(chans, bank.v_pi[list(chans)])
    per_channel = {c: [] for c in chans}
    rows = []
    for s in range(sessions):
        result = run_locked_session(sequence, lock, bins, require_converged=locked, threshold=threshold)
        for c in chans:
            per_channel[c].append(result.reports[c])
        if locked:
            lock.run(spacing)
        else:
            lock.idle(spacing)
    pooled = {c: PulseReport.pool(per_channel[c]) for c in chans}
    for c in chans:
        for k, (p, d) in enumerate(zip(pooled[c].integrated_power, pooled[c].deviation)):
            rows.append((k // len(bins), c, k % len(bins), p, d))
    return pooled, rows, lock
