"""Simulated hardware: modulator bank with zero-point drift, pickoff camera.

All randomness comes from the ``numpy.random.Generator`` owned by each object;
construct them from one seed to make a scenario reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .errors import (
    ChannelDisabledError,
    GeometryError,
    InvalidArgumentError,
    UnknownChannelError,
)

V_PI = 2.2
EXTINCTION_RATIO = 100.0  # 20 dB
INSERTION_LOSS = 0.01  # 20 dB
BANDWIDTH_3DB = 7e9


@dataclass
class DriftModel:
    """Zero-point relaxation toward ``kappa`` times a low-passed drive voltage.

    ``vbar`` follows the applied voltage with time constant ``tau_lp``; the
    zero point relaxes toward ``kappa * vbar`` with time constant ``tau`` and
    is kicked by white noise of density ``sigma`` (V/sqrt(s)).
    """

    tau: float = 5.0
    tau_lp: float = 2.0
    kappa: float = 0.1
    sigma: float = 2e-3

    def __post_init__(self):
        if not self.tau > 0 or not self.tau_lp > 0:
            raise InvalidArgumentError("drift time constants must be positive")
        if self.sigma < 0:
            raise InvalidArgumentError("drift noise density must be non-negative")


@dataclass
class ChannelBank:
    """Per-channel electro-optic state of the modulator array."""

    v_pi: np.ndarray
    v0: np.ndarray
    extinction_ratio: np.ndarray
    insertion_loss: np.ndarray
    bandwidth_3db: np.ndarray
    input_position: np.ndarray
    output_position: np.ndarray
    enabled: np.ndarray
    drift: DriftModel = field(default_factory=DriftModel)
    vbar: np.ndarray | None = None
    time: float = 0.0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __post_init__(self):
        n = len(self.v_pi)
        as_vec = lambda a, dtype=float: np.array(np.broadcast_to(np.asarray(a, dtype=dtype), (n,)))
        self.v_pi = as_vec(self.v_pi)
        self.v0 = as_vec(self.v0)
        self.extinction_ratio = as_vec(self.extinction_ratio)
        self.insertion_loss = as_vec(self.insertion_loss)
        self.bandwidth_3db = as_vec(self.bandwidth_3db)
        self.enabled = as_vec(self.enabled, bool)
        self.input_position = np.array(np.broadcast_to(self.input_position, (n, 2)), dtype=float)
        self.output_position = np.array(np.broadcast_to(self.output_position, (n, 2)), dtype=float)
        self.vbar = np.zeros(n) if self.vbar is None else as_vec(self.vbar)
        if np.any(self.v_pi <= 0):
            raise InvalidArgumentError("v_pi must be positive")
        if np.any(self.extinction_ratio < 1):
            raise InvalidArgumentError("extinction ratio must be >= 1")
        if np.any((self.insertion_loss <= 0) | (self.insertion_loss > 1)):
            raise InvalidArgumentError("insertion loss must lie in (0, 1]")
        if np.any(self.bandwidth_3db <= 0):
            raise InvalidArgumentError("bandwidth must be positive")

    @classmethod
    def default(
        cls,
        n_channels=16,
        seed=0,
        v_pi=V_PI,
        extinction_ratio=EXTINCTION_RATIO,
        insertion_loss=INSERTION_LOSS,
        bandwidth_3db=BANDWIDTH_3DB,
        v0_spread=0.0,
        input_pitch=20e-6,
        output_pitch=50e-6,
        drift=None,
    ):
        """A bank with a ``1 x n`` input row and a square-ish output grid."""
        rng = np.random.default_rng(seed)
        cols = int(np.ceil(np.sqrt(n_channels)))
        idx = np.arange(n_channels)
        inputs = np.column_stack([(idx - (n_channels - 1) / 2) * input_pitch, np.zeros(n_channels)])
        outputs = np.column_stack(
            [(idx % cols - (cols - 1) / 2) * output_pitch, (idx // cols - (cols - 1) / 2) * output_pitch]
        )
        v0 = rng.uniform(-v0_spread, v0_spread, n_channels) if v0_spread else np.zeros(n_channels)
        return cls(
            v_pi=np.full(n_channels, v_pi, dtype=float),
            v0=v0,
            extinction_ratio=extinction_ratio,
            insertion_loss=insertion_loss,
            bandwidth_3db=bandwidth_3db,
            input_position=inputs,
            output_position=outputs,
            enabled=np.ones(n_channels, bool),
            drift=drift or DriftModel(),
            rng=rng,
        )

    @property
    def n_channels(self) -> int:
        return len(self.v_pi)

    def _check(self, channel):
        if not 0 <= channel < self.n_channels:
            raise UnknownChannelError(channel)
        if not self.enabled[channel]:
            raise ChannelDisabledError(channel)

    def transmission(self, voltage, channel=None):
        """MZI power transmission.

        ``T(V) = IL * [(1 - 1/ER) * sin^2(pi (V - V0) / (2 V_pi)) + 1/ER]``.
        With ``channel=None`` the voltage broadcasts across all channels
        (disabled channels transmit nothing).
        """
        if channel is None:
            v = np.asarray(voltage, dtype=float)
            t = _transmission(v, self.v0, self.v_pi, self.extinction_ratio, self.insertion_loss)
            return np.where(self.enabled, t, 0.0)
        self._check(channel)
        return _transmission(
            np.asarray(voltage, dtype=float),
            self.v0[channel],
            self.v_pi[channel],
            self.extinction_ratio[channel],
            self.insertion_loss[channel],
        )

    def sawtooth_mean_transmission(self, channel=None):
        """Time-averaged transmission under a ``2 V_pi`` peak-to-peak sawtooth.

        The sweep covers one full period of the ``sin^2`` term, whose mean is 1/2.
        """
        t = self.insertion_loss * (0.5 * (1.0 - 1.0 / self.extinction_ratio) + 1.0 / self.extinction_ratio)
        t = np.where(self.enabled, t, 0.0)
        if channel is None:
            return t
        self._check(channel)
        return float(t[channel])

    def drift_step(self, dt, applied_voltage):
        """Advance the zero points by ``dt`` seconds under ``applied_voltage``.

        Uses the exact exponential update of the two linear relaxations, so
        large steps stay stable; with ``sigma = 0`` the result is fully
        determined by the voltage history.
        """
        if not dt > 0:
            raise InvalidArgumentError(f"dt must be positive, got {dt}")
        d = self.drift
        applied = np.broadcast_to(np.asarray(applied_voltage, dtype=float), self.v0.shape)
        a_lp = np.exp(-dt / d.tau_lp)
        self.vbar = applied + (self.vbar - applied) * a_lp
        target = d.kappa * self.vbar
        a = np.exp(-dt / d.tau)
        v0 = target + (self.v0 - target) * a
        if d.sigma > 0:
            # exact Ornstein-Uhlenbeck increment; -> sigma * sqrt(dt) for dt << tau
            std = d.sigma * np.sqrt(0.5 * d.tau * (1.0 - a * a))
            v0 = v0 + std * self.rng.standard_normal(self.n_channels)
        self.v0 = v0
        self.time += dt
        return self.v0.copy()

    def apply_bandwidth(self, waveform, dt, channel):
        """Single-pole low-pass at the channel's 3 dB bandwidth.

        The filter starts in steady state at the first sample, so a DC input
        is returned unchanged.
        """
        x = np.asarray(waveform, dtype=float)
        if x.size == 0:
            raise InvalidArgumentError("empty waveform")
        if not dt > 0:
            raise InvalidArgumentError("sample spacing must be positive")
        tau = 1.0 / (2.0 * np.pi * self.bandwidth_3db[channel])
        alpha = -np.expm1(-dt / tau)
        y, _ = lfilter([alpha], [1.0, alpha - 1.0], x, zi=[(1.0 - alpha) * x[0]])
        return y

    def state_rows(self):
        return [(self.time, c, float(self.v0[c]), float(self.vbar[c])) for c in range(self.n_channels)]

    def snapshot(self) -> dict:
        return {"time": self.time, "v0": self.v0.copy(), "vbar": self.vbar.copy()}


def _transmission(v, v0, v_pi, er, il):
    return il * ((1.0 - 1.0 / er) * np.sin(np.pi * (v - v0) / (2.0 * v_pi)) ** 2 + 1.0 / er)


def write_state_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "channel", "v0", "vbar"])
        for t, c, v0, vbar in rows:
            w.writerow([f"{t:.9g}", c, f"{v0:.12g}", f"{vbar:.12g}"])


# camera ---------------------------------------------------------------------------------------


@dataclass
class CameraFrame:
    pixels: np.ndarray
    exposure: float
    regions: dict
    gain: float
    background_hint: float = 0.0


@dataclass
class Camera:
    """Pickoff camera imaging each channel's output spot into its own region.

    ``regions`` maps a label to a half-open pixel rectangle ``(r0, r1, c0, c1)``.
    ``gain`` is in counts per joule (counts / (W s)).
    """

    shape: tuple
    regions: dict
    gain: float = 2.5e11
    read_noise: float = 5.0
    bias: float = 100.0
    saturation: float = 65535.0
    spot_sigma: float = 1.5
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __post_init__(self):
        rows, cols = self.shape
        occupied = np.zeros(self.shape, dtype=bool)
        for label, (r0, r1, c0, c1) in self.regions.items():
            if not (0 <= r0 < r1 <= rows and 0 <= c0 < c1 <= cols):
                raise GeometryError(f"region {label!r} out of bounds for a {self.shape} sensor")
            if occupied[r0:r1, c0:c1].any():
                raise GeometryError(f"region {label!r} overlaps another region")
            occupied[r0:r1, c0:c1] = True
        self._dark = ~occupied
        self._spots = {label: self._spot(rect) for label, rect in self.regions.items()}

    @classmethod
    def grid(cls, labels, half_width=7, gap=4, columns=None, **kwargs):
        """Lay square regions out on a grid, one per label."""
        labels = list(labels)
        columns = columns or int(np.ceil(np.sqrt(len(labels))))
        rows = int(np.ceil(len(labels) / columns))
        side = 2 * half_width + 1
        step = side + gap
        regions = {}
        for i, label in enumerate(labels):
            r0 = gap + (i // columns) * step
            c0 = gap + (i % columns) * step
            regions[label] = (r0, r0 + side, c0, c0 + side)
        shape = (gap + rows * step, gap + columns * step)
        return cls(shape=shape, regions=regions, **kwargs)

    def _spot(self, rect):
        r0, r1, c0, c1 = rect
        yy, xx = np.mgrid[r0:r1, c0:c1]
        g = np.exp(-(((yy - (r0 + r1 - 1) / 2) ** 2 + (xx - (c0 + c1 - 1) / 2) ** 2)) / (2 * self.spot_sigma**2))
        return g / g.sum()

    def capture_frame(self, output_powers, exposure, noise_on=True) -> CameraFrame:
        """Render each labelled power (watts) as a spot and add camera noise.

        Noiseless frames hold exactly ``gain * power * exposure`` per region;
        noisy frames add Poisson shot noise, a bias level with Gaussian read
        noise, integer quantization and clipping at ``saturation``.
        """
        if not exposure > 0:
            raise InvalidArgumentError(f"exposure must be positive, got {exposure}")
        signal = np.zeros(self.shape)
        for label, power in dict(output_powers).items():
            if label not in self.regions:
                raise UnknownChannelError(label)
            r0, r1, c0, c1 = self.regions[label]
            signal[r0:r1, c0:c1] += self.gain * max(float(power), 0.0) * exposure * self._spots[label]
        if not noise_on:
            return CameraFrame(np.minimum(signal, self.saturation), exposure, dict(self.regions), self.gain)
        counts = self.rng.poisson(signal).astype(float)
        counts += self.bias + self.read_noise * self.rng.standard_normal(self.shape)
        counts = np.clip(np.rint(counts), 0, self.saturation)
        return CameraFrame(counts, exposure, dict(self.regions), self.gain, self.bias)

    def dark_mask(self):
        return self._dark


def integrate_regions(frame: CameraFrame, labels=None) -> dict:
    """Background-subtracted region sums converted back to watts.

    The background per pixel is the mean of all pixels outside every region.
    """
    dark = np.ones(frame.pixels.shape, dtype=bool)
    for r0, r1, c0, c1 in frame.regions.values():
        dark[r0:r1, c0:c1] = False
    background = float(frame.pixels[dark].mean()) if dark.any() else frame.background_hint
    scale = frame.gain * frame.exposure
    out = {}
    for label in frame.regions if labels is None else labels:
        if label not in frame.regions:
            raise UnknownChannelError(label)
        r0, r1, c0, c1 = frame.regions[label]
        box = frame.pixels[r0:r1, c0:c1]
        out[label] = float((box.sum() - background * box.size) / scale)
    return out


def region_noise_floor(camera: Camera, label, exposure) -> float:
    """One-sigma read-noise floor of a region sum, in watts."""
    r0, r1, c0, c1 = camera.regions[label]
    return camera.read_noise * np.sqrt((r1 - r0) * (c1 - c0)) / (camera.gain * exposure)

