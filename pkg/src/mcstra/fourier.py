"""Centered orthonormal Fourier transforms, Cartesian line masks, PSFs,
k-space noise and the data-consistency operator.

Complex rasters are plain ``numpy`` complex arrays whose last two axes are
(height, width); leading axes are treated as a batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .validation import check_raster, is_power_of_two

__all__ = [
    "INFINITE",
    "SamplingMask",
    "fft2c",
    "ifft2c",
    "random_line_mask",
    "equispaced_line_mask",
    "apply_mask",
    "psf_of_mask",
    "partition_band_masks",
    "square_partition_masks",
    "add_complex_noise",
    "data_consistency",
    "dc_kspace",
    "make_rng",
    "box_muller",
    "center_count",
]

#: Distinguished DC weight / SNR value meaning "infinite" (hard replacement, no noise).
INFINITE = math.inf


def fft2c(img: np.ndarray) -> np.ndarray:
    """Centered, orthonormal 2D DFT over the last two axes."""
    img = check_raster(img)
    tmp = np.fft.ifftshift(img, axes=(-2, -1))
    tmp = np.fft.fft2(tmp, axes=(-2, -1), norm="ortho")
    return np.fft.fftshift(tmp, axes=(-2, -1))


def ifft2c(ksp: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2c`."""
    ksp = check_raster(ksp)
    tmp = np.fft.ifftshift(ksp, axes=(-2, -1))
    tmp = np.fft.ifft2(tmp, axes=(-2, -1), norm="ortho")
    return np.fft.fftshift(tmp, axes=(-2, -1))


# --------------------------------------------------------------------------
# random numbers


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox 4x64) generator keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF))


def box_muller(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normal samples from pairs of uniforms via Box-Muller."""
    n = int(np.prod(shape))
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1]
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
    return z[:n].reshape(shape)


# --------------------------------------------------------------------------
# masks


def center_count(width: int, center_frac: float) -> int:
    """Number of fully sampled center lines, rounded half up."""
    return int(math.floor(center_frac * width + 0.5))


def _center_slice(width: int, count: int) -> slice:
    start = width // 2 - count // 2
    return slice(start, start + count)


@dataclass(frozen=True, eq=False)
class SamplingMask:
    """Binary phase-encode line mask.

    ``lines[j] == 1`` means column ``j`` of k-space is acquired. The mask
    broadcasts down every row of a raster.
    """

    lines: np.ndarray
    center_count: int = 0

    def __post_init__(self):
        lines = np.asarray(self.lines)
        if lines.ndim != 1 or lines.size == 0:
            raise ValueError("mask lines must be a non-empty 1D vector")
        if not np.all((lines == 0) | (lines == 1)):
            raise ValueError("mask entries must be 0 or 1")
        lines = lines.astype(np.uint8)
        lines.setflags(write=False)
        object.__setattr__(self, "lines", lines)
        if self.center_count < 0 or self.center_count > lines.size:
            raise ValueError("center_count out of range")
        if self.center_count and not lines[_center_slice(lines.size, self.center_count)].all():
            raise ValueError("center band of the mask is not fully sampled")

    @property
    def width(self) -> int:
        return self.lines.size

    @property
    def n_sampled(self) -> int:
        return int(self.lines.sum())

    def to_2d(self, height: int) -> np.ndarray:
        """Broadcast the line vector to a (height, width) float raster."""
        return np.broadcast_to(self.lines.astype(np.float64), (height, self.width)).copy()

    def __eq__(self, other):
        if not isinstance(other, SamplingMask):
            return NotImplemented
        return self.center_count == other.center_count and np.array_equal(self.lines, other.lines)

    def __hash__(self):
        return hash((self.center_count, self.lines.tobytes()))

    def to_text(self) -> str:
        return "".join("1" if v else "0" for v in self.lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SamplingMask":
        line = text.strip()
        if not line or set(line) - {"0", "1"}:
            raise ValueError("mask text must be a single line of '0'/'1' characters")
        lines = np.frombuffer(line.encode(), dtype=np.uint8) - ord("0")
        return cls(lines, _infer_center(lines))

    @classmethod
    def full(cls, width: int) -> "SamplingMask":
        return cls(np.ones(width, dtype=np.uint8), width)


def _infer_center(lines: np.ndarray) -> int:
    # widest fully sampled band centered on width // 2
    w = lines.size
    best = 0
    for c in range(1, w + 1):
        if lines[_center_slice(w, c)].all():
            best = c
        else:
            break
    return best


def random_line_mask(width: int, accel: float, center_frac: float, seed: int) -> SamplingMask:
    """fastMRI-style random Cartesian mask.

    Parameters
    ----------
    width : int
        Number of phase-encode lines.
    accel : float
        Acceleration factor; the expected number of sampled lines is ``width / accel``.
    center_frac : float
        Fraction of fully sampled low-frequency lines.
    seed : int
        Seed of the counter-based generator.
    """
    if width < 4:
        raise ValueError(f"width must be >= 4, got {width}")
    if not accel >= 1:
        raise ValueError(f"accel must be >= 1, got {accel}")
    if not 0 < center_frac <= 1:
        raise ValueError(f"center_frac must be in (0, 1], got {center_frac}")
    c = center_count(width, center_frac)
    lines = np.zeros(width, dtype=np.uint8)
    if c < width:
        p = (width / accel - c) / (width - c)
        p = min(max(p, 0.0), 1.0)
        lines[make_rng(seed).random(width) < p] = 1
    lines[_center_slice(width, c)] = 1
    return SamplingMask(lines, c)


def equispaced_line_mask(width: int, accel: int, center_frac: float, offset: int = 0) -> SamplingMask:
    """Center band plus every ``accel``-th line starting at ``offset``."""
    if accel < 1 or int(accel) != accel:
        raise ValueError(f"accel must be a positive integer, got {accel}")
    if not 0 <= offset < accel:
        raise ValueError(f"offset must satisfy 0 <= offset < accel, got {offset}")
    if not 0 <= center_frac <= 1:
        raise ValueError(f"center_frac must be in [0, 1], got {center_frac}")
    c = center_count(width, center_frac)
    lines = np.zeros(width, dtype=np.uint8)
    lines[offset::int(accel)] = 1
    lines[_center_slice(width, c)] = 1
    return SamplingMask(lines, c)


def _mask_raster(m, shape) -> np.ndarray:
    """Expand a SamplingMask / line vector / 2D raster to ``shape`` (..., h, w)."""
    if isinstance(m, SamplingMask):
        arr = m.lines.astype(np.float64)
    else:
        arr = np.asarray(m, dtype=np.float64)
    if arr.shape[-1] != shape[-1]:
        raise ValueError(f"mask width {arr.shape[-1]} does not match raster width {shape[-1]}")
    if arr.ndim == 1:
        arr = arr[None, :]
    elif arr.ndim >= 2 and arr.shape[-2] not in (1, shape[-2]):
        # batch of line vectors (B, w)
        arr = arr[..., None, :]
    return np.broadcast_to(arr, shape)


def apply_mask(ksp: np.ndarray, m) -> np.ndarray:
    """Hadamard product of k-space with the (broadcast) mask."""
    ksp = check_raster(ksp)
    out = ksp * _mask_raster(m, ksp.shape)
    return out.astype(ksp.dtype, copy=False)


def psf_of_mask(m, height: int | None = None) -> np.ndarray:
    """Point spread function of a mask, scaled so a full mask is a unit delta.

    ``m`` may be a :class:`SamplingMask` (``height`` required) or a 2D binary raster.
    """
    if isinstance(m, SamplingMask):
        if height is None:
            raise ValueError("height is required for a line mask")
        raster = m.to_2d(height)
    else:
        raster = np.asarray(m, dtype=np.float64)
    h, w = raster.shape[-2:]
    return ifft2c(raster.astype(np.complex128)) / math.sqrt(h * w)


def partition_band_masks(width: int, center_frac: float) -> tuple[SamplingMask, SamplingMask]:
    """Split k-space into a center band twice the retained center and its complement."""
    c = center_count(width, center_frac)
    band = 2 * c
    if band > width:
        raise ValueError(f"low-frequency band of {band} lines is wider than the raster ({width})")
    low = np.zeros(width, dtype=np.uint8)
    low[_center_slice(width, band)] = 1
    high = 1 - low
    return SamplingMask(low, band), SamplingMask(high, 0)


def square_partition_masks(height: int, width: int, center_frac: float) -> tuple[np.ndarray, np.ndarray]:
    """Centered square low-frequency region with the same sample count as the band partition.

    Returns two complementary (height, width) 0/1 rasters.
    """
    band = 2 * center_count(width, center_frac)
    side = int(round(math.sqrt(band * height)))
    side = max(1, min(side, height, width))
    low = np.zeros((height, width), dtype=np.float64)
    low[_center_slice(height, side), _center_slice(width, side)] = 1.0
    return low, 1.0 - low


# --------------------------------------------------------------------------
# noise


def add_complex_noise(ksp: np.ndarray, snr_db: float, seed: int, mask=None) -> np.ndarray:
    """Add circular complex Gaussian noise at a target SNR.

    Signal power is the mean squared magnitude over the sampled entries
    (``mask`` if given, otherwise the nonzero entries). Noise is only added
    at those entries so unsampled lines stay exactly zero.
    """
    ksp = check_raster(ksp)
    if snr_db == INFINITE:
        return ksp
    if not math.isfinite(snr_db):
        raise ValueError(f"snr_db must be finite or INFINITE, got {snr_db}")
    if mask is None:
        support = ksp != 0
    else:
        support = _mask_raster(mask, ksp.shape) > 0
    n = int(support.sum())
    if n == 0:
        raise ValueError("SNR undefined for a zero-signal raster")
    power = float(np.sum(np.abs(ksp[support]) ** 2)) / n
    if power == 0.0:
        raise ValueError("SNR undefined for a zero-signal raster")
    sigma2 = power / 10.0 ** (snr_db / 10.0)
    z = box_muller(make_rng(seed), (2, n)) * math.sqrt(sigma2 / 2.0)
    out = np.array(ksp, dtype=np.complex128, copy=True)
    out[support] += z[0] + 1j * z[1]
    return out.astype(np.result_type(ksp.dtype, np.complex64), copy=False)


# --------------------------------------------------------------------------
# data consistency


def _dc_diag(m, shape, lam: float) -> np.ndarray:
    """Diagonal of the k-space weighting applied to the network estimate."""
    sampled = _mask_raster(m, shape) > 0
    keep = 0.0 if lam == INFINITE else 1.0 / (1.0 + lam)
    return np.where(sampled, keep, 1.0)


def dc_kspace(y_c: np.ndarray, y_meas: np.ndarray, m, lam: float = INFINITE) -> np.ndarray:
    """Closed-form k-space data consistency.

    Unsampled entries keep the estimate ``y_c``; sampled entries become
    ``(y_c + lam * y_meas) / (1 + lam)``, or ``y_meas`` for infinite ``lam``.
    """
    if lam < 0:
        raise ValueError(f"DC weight must be >= 0, got {lam}")
    if y_c.shape != y_meas.shape:
        raise ValueError(f"shape mismatch: {y_c.shape} vs {y_meas.shape}")
    sampled = _mask_raster(m, y_c.shape) > 0
    if lam == INFINITE:
        mixed = y_meas
    else:
        mixed = (y_c + lam * y_meas) / (1.0 + lam)
    return np.where(sampled, mixed, y_c)


def data_consistency(x_in: np.ndarray, y_meas: np.ndarray, m, lam: float = INFINITE) -> np.ndarray:
    """Image-domain DC block: ``ifft2c(dc_kspace(fft2c(x_in), y_meas))``."""
    x_in = check_raster(x_in)
    y_meas = check_raster(y_meas)
    return ifft2c(dc_kspace(fft2c(x_in), y_meas, m, lam))
