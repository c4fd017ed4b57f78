"""Scalar paraxial field optics.

Fields are sampled on centered grids: index ``N // 2`` is the optical axis and
sample ``n`` sits at ``(n - N // 2) * pitch``. Every FFT in this module uses the
unitary ("ortho") normalization so that the discrete Parseval identity holds
without bookkeeping factors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, InvalidFieldError, OutOfRangeError

TWO_PI = 2.0 * np.pi

FIELD_MAGIC = b"PEFIELD1"
PHASE_MAGIC = b"PEPHASE1"
_HEADER = struct.Struct("<8sIIdd")  # magic, rows, cols, pitch, wavelength = 32 bytes


@dataclass(frozen=True)
class ComplexField:
    """Sampled complex amplitude on a regular grid.

    Parameters
    ----------
    amplitude : ndarray
        2-D complex array, rows are ``y`` and columns are ``x``.
    pitch : float
        Sample spacing in meters.
    wavelength : float
        Vacuum wavelength in meters.
    plane_label : str
        Free-form tag naming the plane (``"slm"``, ``"chip"``, ...).
    """

    amplitude: np.ndarray
    pitch: float
    wavelength: float
    plane_label: str = ""

    def __post_init__(self):
        amp = np.asarray(self.amplitude, dtype=np.complex128)
        if amp.ndim != 2 or amp.shape[0] < 2 or amp.shape[1] < 2:
            raise InvalidFieldError(f"field grid must be at least 2x2, got shape {amp.shape}")
        if not (np.isfinite(self.pitch) and self.pitch > 0):
            raise InvalidFieldError(f"pitch must be positive, got {self.pitch}")
        if not (np.isfinite(self.wavelength) and self.wavelength > 0):
            raise InvalidFieldError(f"wavelength must be positive, got {self.wavelength}")
        if not np.all(np.isfinite(amp)):
            raise InvalidFieldError("field contains non-finite samples")
        object.__setattr__(self, "amplitude", amp)

    @property
    def shape(self):
        return self.amplitude.shape

    @property
    def intensity(self) -> np.ndarray:
        return np.abs(self.amplitude) ** 2

    @property
    def power(self) -> float:
        return float(np.sum(self.intensity))

    def coordinates(self):
        """Return ``(x, y)`` 1-D coordinate vectors in meters."""
        ny, nx = self.shape
        x = (np.arange(nx) - nx // 2) * self.pitch
        y = (np.arange(ny) - ny // 2) * self.pitch
        return x, y

    def with_amplitude(self, amplitude, **changes) -> "ComplexField":
        return replace(self, amplitude=amplitude, **changes)

    def centroid(self):
        x, y = self.coordinates()
        inten = self.intensity
        total = inten.sum()
        return float((inten.sum(axis=0) @ x) / total), float((inten.sum(axis=1) @ y) / total)

    def second_moment_diameter(self):
        """1/e^2 diameters ``(d_x, d_y)`` from intensity second moments.

        For a Gaussian ``exp(-2 r^2 / w^2)`` the variance along each axis is
        ``w^2 / 4``, so ``d = 4 * std``.
        """
        x, y = self.coordinates()
        inten = self.intensity
        total = inten.sum()
        px, py = inten.sum(axis=0) / total, inten.sum(axis=1) / total
        cx, cy = px @ x, py @ y
        return 4.0 * np.sqrt(px @ (x - cx) ** 2), 4.0 * np.sqrt(py @ (y - cy) ** 2)


def _wrap_phase(phase):
    wrapped = np.mod(phase, TWO_PI)
    # mod can return exactly 2*pi for tiny negative inputs
    wrapped[wrapped >= TWO_PI] = 0.0
    return wrapped


@dataclass(frozen=True)
class PhaseMask:
    """Phase-only SLM pattern, stored wrapped to ``[0, 2*pi)``."""

    phase: np.ndarray
    pitch: float = 8e-6

    def __post_init__(self):
        phase = np.asarray(self.phase, dtype=np.float64)
        if phase.ndim != 2:
            raise InvalidArgumentError(f"phase mask must be 2-D, got shape {phase.shape}")
        if not np.all(np.isfinite(phase)):
            raise InvalidArgumentError("phase mask contains non-finite values")
        if not self.pitch > 0:
            raise InvalidArgumentError(f"pitch must be positive, got {self.pitch}")
        object.__setattr__(self, "phase", _wrap_phase(phase))

    @property
    def shape(self):
        return self.phase.shape

    @classmethod
    def zeros(cls, shape, pitch=8e-6):
        return cls(np.zeros(shape), pitch)

    @classmethod
    def blaze(cls, shape, pitch, gradient):
        """Linear phase ``gx * x + gy * y`` with ``gradient`` in rad/m."""
        ny, nx = shape
        x = (np.arange(nx) - nx // 2) * pitch
        y = (np.arange(ny) - ny // 2) * pitch
        return cls(gradient[0] * x[None, :] + gradient[1] * y[:, None], pitch)

    def __add__(self, other: "PhaseMask") -> "PhaseMask":
        if other.shape != self.shape:
            raise InvalidArgumentError("cannot add phase masks of different shape")
        return PhaseMask(self.phase + other.phase, self.pitch)

    def upsample(self, factor: int) -> "PhaseMask":
        """Nearest-neighbour upsampling, modelling square SLM pixels on a finer simulation grid."""
        return PhaseMask(np.kron(self.phase, np.ones((factor, factor))), self.pitch / factor)


@dataclass(frozen=True)
class GaussianBeam:
    """Fundamental Gaussian beam, optionally with a distinct waist along ``y``."""

    waist: float
    wavelength: float
    waist_position: float = 0.0
    waist_y: float | None = None

    def __post_init__(self):
        if not self.waist > 0 or not self.wavelength > 0:
            raise InvalidArgumentError("waist and wavelength must be positive")
        if self.waist_y is not None and not self.waist_y > 0:
            raise InvalidArgumentError("waist_y must be positive")

    @property
    def rayleigh_range(self) -> float:
        return np.pi * self.waist**2 / self.wavelength

    def radius(self, defocus, waist=None):
        w = self.waist if waist is None else waist
        zr = np.pi * w**2 / self.wavelength
        return w * np.sqrt(1.0 + (np.asarray(defocus) / zr) ** 2)

    def diameter(self, defocus):
        """1/e^2 diameter at distance ``defocus`` from the waist."""
        return 2.0 * self.radius(defocus)

    def curvature_radius(self, defocus):
        zr = self.rayleigh_range
        z = np.asarray(defocus, dtype=float)
        with np.errstate(divide="ignore"):
            return np.where(z == 0, np.inf, z * (1.0 + (zr / z) ** 2))

    def sample(self, shape, pitch, z=0.0, center=(0.0, 0.0), power=1.0, plane_label=""):
        """Sample the beam at distance ``z`` downstream of ``waist_position``."""
        ny, nx = shape
        x = (np.arange(nx) - nx // 2) * pitch - center[0]
        y = (np.arange(ny) - ny // 2) * pitch - center[1]
        dz = z - self.waist_position
        k = TWO_PI / self.wavelength

        def axis_factor(coord, w0):
            zr = np.pi * w0**2 / self.wavelength
            q = dz - 1j * zr  # q = z + i z_R with exp(-i k r^2 / 2q) convention below
            return np.sqrt(np.sqrt(2.0 / np.pi) / w0) * np.sqrt(-1j * zr / q) * np.exp(
                1j * k * coord**2 / (2.0 * q)
            )

        wy = self.waist if self.waist_y is None else self.waist_y
        amp = axis_factor(y, wy)[:, None] * axis_factor(x, self.waist)[None, :]
        amp = amp * np.sqrt(power / (np.sum(np.abs(amp) ** 2) or 1.0))
        return ComplexField(amp, pitch, self.wavelength, plane_label)


def gaussian_field(shape, pitch, wavelength, waist, center=(0.0, 0.0), power=1.0, plane_label=""):
    """Flat-phase Gaussian ``exp(-r^2 / w^2)`` normalized to ``power``."""
    return GaussianBeam(waist, wavelength).sample(shape, pitch, 0.0, center, power, plane_label)


def far_field_pitch(field: ComplexField, focal_length: float) -> float:
    return field.wavelength * focal_length / (field.shape[0] * field.pitch)


def propagate_far_field(field: ComplexField, focal_length: float, plane_label="fourier") -> ComplexField:
    """Fourier-transform a square field through a lens of ``focal_length``.

    The output pitch is ``wavelength * focal_length / (N * pitch)`` and total
    power is preserved.
    """
    if field.shape[0] != field.shape[1]:
        raise InvalidFieldError(f"far-field propagation needs a square grid, got {field.shape}")
    if not focal_length > 0:
        raise InvalidArgumentError(f"focal length must be positive, got {focal_length}")
    out = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(field.amplitude), norm="ortho"))
    return ComplexField(out, far_field_pitch(field, focal_length), field.wavelength, plane_label)


def aliasing_free_distance(field: ComplexField) -> float:
    """Largest distance for which the band limit below removes nothing."""
    ny, nx = field.shape
    p, lam = field.pitch, field.wavelength
    arg = (2.0 * p / lam) ** 2 - 1.0
    if arg <= 0:
        return 0.0
    return 0.5 * min(nx, ny) * p * np.sqrt(arg)


def _transfer_function(shape, pitch, wavelength, distance):
    ny, nx = shape
    fx = np.fft.fftfreq(nx, pitch)
    fy = np.fft.fftfreq(ny, pitch)
    fx2, fy2 = np.meshgrid(fx**2, fy**2, sparse=True)
    arg = 1.0 / wavelength**2 - fx2 - fy2
    propagating = arg > 0
    kz = TWO_PI * np.sqrt(np.where(propagating, arg, 0.0))
    h = np.where(propagating, np.exp(1j * kz * distance), 0.0)
    # band limit of the sampled transfer function (avoids aliasing of its chirp)
    lim_x = 1.0 / (wavelength * np.sqrt((2.0 * distance / (nx * pitch)) ** 2 + 1.0))
    lim_y = 1.0 / (wavelength * np.sqrt((2.0 * distance / (ny * pitch)) ** 2 + 1.0))
    keep = (np.sqrt(fx2) <= lim_x) & (np.sqrt(fy2) <= lim_y)
    return h * keep


def propagate_angular_spectrum(
    field: ComplexField, distance: float, max_distance: float | None = None, plane_label=None
) -> ComplexField:
    """Band-limited angular-spectrum propagation over ``distance`` meters.

    Within :func:`aliasing_free_distance` the transfer function is a pure
    phase on every propagating component, so the operation is unitary.
    Beyond it, spatial frequencies whose transfer-function chirp would alias
    are discarded. ``max_distance`` is an optional validity bound; exceeding it
    raises.
    """
    if distance is None or not np.isfinite(distance):
        raise InvalidArgumentError(f"distance must be finite, got {distance}")
    if max_distance is not None and abs(distance) > max_distance:
        raise OutOfRangeError(f"|distance| = {abs(distance):.3g} m exceeds validity bound {max_distance:.3g} m")
    if distance == 0:
        return field if plane_label is None else replace(field, plane_label=plane_label)
    h = _transfer_function(field.shape, field.pitch, field.wavelength, distance)
    out = np.fft.ifft2(np.fft.fft2(field.amplitude) * h)
    return ComplexField(out, field.pitch, field.wavelength, field.plane_label if plane_label is None else plane_label)


def apply_mask(field: ComplexField, mask: PhaseMask) -> ComplexField:
    if mask.shape != field.shape:
        raise InvalidArgumentError(f"mask shape {mask.shape} does not match field shape {field.shape}")
    return field.with_amplitude(field.amplitude * np.exp(1j * mask.phase))


def blaze_efficiency(blaze_period_pixels: float) -> float:
    """First-order efficiency of a pixelated blaze with the given period.

    A phase ramp sampled on square pixels diffracts into the first order
    with the pixel envelope ``sinc^2(pi / N)``.
    """
    n = float(blaze_period_pixels)
    if not n >= 1:
        raise OutOfRangeError(f"blaze period must be at least one pixel, got {n}")
    if np.isinf(n):
        return 1.0
    x = np.pi / n
    return float(np.clip((np.sin(x) / x) ** 2, 0.0, 1.0))


def pixel_envelope(angle, pixel_pitch, wavelength):
    """Diffraction efficiency of square pixels at deflection ``angle`` (radians)."""
    u = np.pi * pixel_pitch * np.sin(np.asarray(angle, dtype=float)) / wavelength
    return np.sinc(u / np.pi) ** 2


# binary golden-file layout -------------------------------------------------------------------


def write_field(path, field: ComplexField):
    rows, cols = field.shape
    pairs = np.empty((rows, cols, 2), dtype="<f8")
    pairs[..., 0] = field.amplitude.real
    pairs[..., 1] = field.amplitude.imag
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FIELD_MAGIC, rows, cols, field.pitch, field.wavelength))
        fh.write(pairs.tobytes(order="C"))


def write_mask(path, mask: PhaseMask):
    """Phase-only variant: pairs hold ``(phase, 0.0)`` and the wavelength slot is zero."""
    rows, cols = mask.shape
    pairs = np.zeros((rows, cols, 2), dtype="<f8")
    pairs[..., 0] = mask.phase
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(PHASE_MAGIC, rows, cols, mask.pitch, 0.0))
        fh.write(pairs.tobytes(order="C"))


def read_binary(path):
    """Read a file written by :func:`write_field` or :func:`write_mask`."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise InvalidFieldError("file shorter than header")
    magic, rows, cols, pitch, wavelength = _HEADER.unpack_from(raw)
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if body.size != rows * cols * 2:
        raise InvalidFieldError(f"expected {rows * cols * 2} values, found {body.size}")
    pairs = body.reshape(rows, cols, 2)
    if magic == FIELD_MAGIC:
        return ComplexField(pairs[..., 0] + 1j * pairs[..., 1], pitch, wavelength)
    if magic == PHASE_MAGIC:
        return PhaseMask(pairs[..., 0].copy(), pitch)
    raise InvalidFieldError(f"unknown magic {magic!r}")


def mask_to_gray8(mask: PhaseMask) -> np.ndarray:
    """Map phase ``0..2*pi`` linearly onto ``0..255``."""
    return np.clip(np.floor(mask.phase / TWO_PI * 256.0), 0, 255).astype(np.uint8)


def save_mask_image(path, mask: PhaseMask):
    from PIL import Image

    Image.fromarray(mask_to_gray8(mask), mode="L").save(path)
