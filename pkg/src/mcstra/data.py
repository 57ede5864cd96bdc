"""Synthetic phantoms, toy datasets with per-volume masks, and image quality metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import uniform_filter

from .fourier import SamplingMask, equispaced_line_mask, make_rng, random_line_mask
from .validation import check_raster, is_power_of_two

# Modified Shepp-Logan (Toft): intensity, semi-axis a, semi-axis b, x0, y0, rotation (deg)
_MODIFIED_SHEPP_LOGAN = np.array(
    [
        [1.0, 0.6900, 0.9200, 0.00, 0.0000, 0],
        [-0.8, 0.6624, 0.8740, 0.00, -0.0184, 0],
        [-0.2, 0.1100, 0.3100, 0.22, 0.0000, -18],
        [-0.2, 0.1600, 0.4100, -0.22, 0.0000, 18],
        [0.1, 0.2100, 0.2500, 0.00, 0.3500, 0],
        [0.1, 0.0460, 0.0460, 0.00, 0.1000, 0],
        [0.1, 0.0460, 0.0460, 0.00, -0.1000, 0],
        [0.1, 0.0460, 0.0230, -0.08, -0.6050, 0],
        [0.1, 0.0230, 0.0230, 0.00, -0.6060, 0],
        [0.1, 0.0230, 0.0460, 0.06, -0.6050, 0],
    ]
)


@dataclass(frozen=True)
class PhantomSpec:
    """Sum of constant-intensity ellipses on the [-1, 1]^2 field of view.

    ``ellipses`` rows are ``(intensity, a, b, x0, y0, theta)`` with ``theta``
    in radians.
    """

    ellipses: np.ndarray
    seed: int | None = None
    phase: bool = False

    @classmethod
    def shepp_logan(cls) -> "PhantomSpec":
        e = _MODIFIED_SHEPP_LOGAN.copy()
        e[:, 5] = np.deg2rad(e[:, 5])
        return cls(e)

    def render(self, height: int, width: int) -> np.ndarray:
        if not (is_power_of_two(height) and is_power_of_two(width)):
            raise ValueError(f"phantom size {height}x{width} must be a power of two")
        xs = -1.0 + (2.0 * np.arange(width) + 1.0) / width
        ys = 1.0 - (2.0 * np.arange(height) + 1.0) / height
        x, y = np.meshgrid(xs, ys)
        img = np.zeros((height, width))
        for amp, a, b, x0, y0, th in self.ellipses:
            c, s = math.cos(th), math.sin(th)
            u = (x - x0) * c + (y - y0) * s
            v = -(x - x0) * s + (y - y0) * c
            img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += amp
        img = np.clip(img, 0.0, None)
        peak = img.max()
        if peak > 0:
            img = np.clip(img / peak, 0.0, 1.0)
        out = img.astype(np.complex128)
        if self.phase:
            out = out * np.exp(1j * _phase_map(height, width))
        return out


def _phase_map(height: int, width: int) -> np.ndarray:
    y, x = np.meshgrid(np.linspace(-1, 1, height), np.linspace(-1, 1, width), indexing="ij")
    return 0.6 * x - 0.3 * y + 0.4 * (x * x + y * y)


def shepp_logan(h: int, w: int) -> np.ndarray:
    """Modified Shepp-Logan phantom as a real-valued complex raster in [0, 1]."""
    return PhantomSpec.shepp_logan().render(h, w)


def perturb_spec(base: PhantomSpec, seed: int, scale: float = 1.0) -> PhantomSpec:
    """Jitter centers (+-0.1), axes (+-10%), rotations (+-0.2 rad) and intensities (+-10%)."""
    rng = make_rng(seed)
    e = base.ellipses.copy()
    n = len(e)
    u = rng.uniform(-1.0, 1.0, size=(n, 6)) * scale
    e[:, 0] *= 1.0 + 0.1 * u[:, 0]
    e[:, 1] *= 1.0 + 0.1 * u[:, 1]
    e[:, 2] *= 1.0 + 0.1 * u[:, 2]
    e[:, 3] += 0.1 * u[:, 3]
    e[:, 4] += 0.1 * u[:, 4]
    e[:, 5] += 0.2 * u[:, 5]
    return replace(base, ellipses=e, seed=seed)


def perturbed_phantom(base: PhantomSpec, seed: int, height: int = 64, width: int = 64,
                      scale: float = 1.0) -> np.ndarray:
    """Render a randomly jittered copy of ``base``; ``scale=0`` reproduces it exactly."""
    return perturb_spec(base, seed, scale).render(height, width)


# --------------------------------------------------------------------------
# metrics


def _real_pair(pred, ref):
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    return pred, ref


def nmse(pred, ref) -> float:
    """``||pred - ref||^2 / ||ref||^2``."""
    pred, ref = _real_pair(pred, ref)
    denom = float(np.sum(ref ** 2))
    if denom == 0.0:
        raise ValueError("NMSE undefined for an all-zero reference")
    return float(np.sum((pred - ref) ** 2)) / denom


def psnr(pred, ref) -> float:
    """Peak SNR in dB with the reference maximum as peak."""
    pred, ref = _real_pair(pred, ref)
    peak = float(ref.max())
    if not np.any(ref):
        raise ValueError("PSNR undefined for an all-zero reference")
    mse = float(np.mean((pred - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / mse)


def ssim(pred, ref, data_range: float | None = None, win_size: int = 7,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity with a uniform window (sample covariance).

    The border of half-window width is excluded from the mean.
    """
    x, y = _real_pair(pred, ref)
    if data_range is None:
        data_range = float(y.max())
    np_ = win_size ** 2
    cov_norm = np_ / (np_ - 1.0)
    ux = uniform_filter(x, win_size)
    uy = uniform_filter(y, win_size)
    uxx = uniform_filter(x * x, win_size)
    uyy = uniform_filter(y * y, win_size)
    uxy = uniform_filter(x * y, win_size)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    pad = (win_size - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean())


def mean_sem(values) -> tuple[float, float]:
    """Mean and standard error of the mean (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


# --------------------------------------------------------------------------
# datasets

VAL_EPOCH = 2 ** 32 - 1


@dataclass
class DatasetRecord:
    image: np.ndarray  # (h, w) complex reference
    volume_id: int
    slice_index: int
    split: str  # "train" or "val"


@dataclass
class Dataset:
    """Slices grouped into volumes; every slice of a volume shares one mask."""

    records: list[DatasetRecord]
    seed: int = 0
    mask_kind: str = "random"
    accel: float = 4.0
    center_frac: float = 0.08
    fixed_masks: bool = False
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.records)

    @property
    def shape(self) -> tuple[int, int]:
        return self.records[0].image.shape

    @property
    def volume_ids(self) -> list[int]:
        return sorted({r.volume_id for r in self.records})

    def split(self, name: str) -> list[DatasetRecord]:
        return [r for r in self.records if r.split == name]

    def mask_for(self, volume_id: int, epoch: int = 0, split: str = "train") -> SamplingMask:
        """Mask shared by all slices of ``volume_id`` in ``epoch``.

        Validation masks and ``fixed_masks`` datasets ignore the epoch.
        """
        if split != "train" or self.fixed_masks:
            epoch = VAL_EPOCH
        key = (volume_id, epoch)
        if key not in self._cache:
            self._cache[key] = volume_mask(self.shape[1], self.mask_kind, self.accel, self.center_frac,
                                           self.seed, volume_id, epoch)
        return self._cache[key]

    def with_protocol(self, **kw) -> "Dataset":
        return replace(self, _cache={}, **kw)


def mask_seed(seed: int, volume_id: int, epoch: int) -> int:
    ss = np.random.SeedSequence([int(seed), int(volume_id), int(epoch)])
    return int(ss.generate_state(1, np.uint64)[0])


def volume_mask(width: int, kind: str, accel: float, center_frac: float, seed: int,
                volume_id: int, epoch: int) -> SamplingMask:
    if kind == "random":
        return random_line_mask(width, accel, center_frac, mask_seed(seed, volume_id, epoch))
    if kind == "equispaced":
        return equispaced_line_mask(width, int(round(accel)), center_frac, 0)
    raise ValueError(f"unknown mask kind {kind!r}")


def build_dataset(n_volumes: int, slices_per_volume: int, h: int, w: int, split_frac: float = 0.8,
                  seed: int = 0, **mask_kw) -> Dataset:
    """Perturbed-phantom volumes with a volume-level train/val split.

    Each volume draws one jittered phantom; its slices are small further
    jitters of that volume phantom.
    """
    if n_volumes < 1 or slices_per_volume < 1:
        raise ValueError("n_volumes and slices_per_volume must be >= 1")
    n_train = int(math.floor(split_frac * n_volumes + 0.5))
    if n_volumes > 1:
        n_train = min(max(n_train, 1), n_volumes - 1)
    order = make_rng(seed).permutation(n_volumes)
    train_ids = set(order[:n_train].tolist())
    base = PhantomSpec.shepp_logan()
    records = []
    for v in range(n_volumes):
        vol_spec = perturb_spec(base, mask_seed(seed, v, 1 << 40))
        split = "train" if v in train_ids else "val"
        for k in range(slices_per_volume):
            img = perturb_spec(vol_spec, mask_seed(seed, v, (1 << 41) + k), scale=0.3).render(h, w)
            records.append(DatasetRecord(img, v, k, split))
    return Dataset(records, seed=seed, **mask_kw)


def as_magnitude(x) -> np.ndarray:
    return np.abs(check_raster(x))
