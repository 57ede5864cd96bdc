"""scikit-learn style wrapper around training and reconstruction."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .data import Dataset, DatasetRecord, nmse
from .fourier import SamplingMask, ifft2c
from .model import McstraConfig, forward
from .training import train
from .validation import ShapeError, check_image_batch


def masks_from_kspace(kspace: np.ndarray) -> np.ndarray:
    """Infer per-slice line masks from the nonzero columns of undersampled k-space."""
    return np.any(kspace != 0, axis=-2).astype(np.float64)


class McstraReconstructor(BaseEstimator, RegressorMixin):
    """Train on reference images, predict magnitude images from undersampled k-space.

    ``fit`` takes fully sampled complex images ``(n, h, w)``; ``groups`` gives
    each slice a volume id so slices of one volume share a mask.
    ``predict`` takes undersampled k-space.
    """

    def __init__(self, config: McstraConfig | None = None, max_steps: int = 300, batch_size: int = 4,
                 accel: float = 4.0, center_frac: float = 0.08, mask_kind: str = "random", seed: int = 0):
        self.config = config
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.accel = accel
        self.center_frac = center_frac
        self.mask_kind = mask_kind
        self.seed = seed

    def _config(self, h: int, w: int) -> McstraConfig:
        base = self.config if self.config is not None else McstraConfig.toy(height=h, width=w)
        return base.replace(height=h, width=w, accel=self.accel, center_frac=self.center_frac,
                            mask_kind=self.mask_kind, batch_size=self.batch_size, seed=self.seed)

    def fit(self, X, y=None, groups=None):
        imgs = check_image_batch(X, name="X")
        n, h, w = imgs.shape
        groups = np.arange(n) if groups is None else np.asarray(groups)
        if groups.shape != (n,):
            raise ShapeError(f"groups must have one entry per image, got shape {groups.shape}")
        cfg = self._config(h, w)
        counts: dict[int, int] = {}
        records = []
        for img, g in zip(imgs, groups.tolist()):
            records.append(DatasetRecord(img, int(g), counts.get(int(g), 0), "train"))
            counts[int(g)] = counts.get(int(g), 0) + 1
        ds = Dataset(records, seed=self.seed, mask_kind=self.mask_kind, accel=self.accel,
                     center_frac=self.center_frac)
        self.params_, self.log_, self.optimizer_ = train(cfg, ds, max_steps=self.max_steps, validate=False)
        self.config_ = cfg
        self.n_features_in_ = h * w
        return self

    def predict(self, kspace, masks=None) -> np.ndarray:
        check_is_fitted(self, "params_")
        ksp = check_image_batch(kspace, name="kspace")
        if ksp.shape[1:] != (self.config_.height, self.config_.width):
            raise ShapeError(f"kspace is {ksp.shape[1]}x{ksp.shape[2]}, model was fitted at "
                             f"{self.config_.height}x{self.config_.width}")
        if masks is None:
            masks = masks_from_kspace(ksp)
        elif isinstance(masks, SamplingMask):
            masks = [masks] * len(ksp)
        out = []
        for start in range(0, len(ksp), self.batch_size):
            chunk = ksp[start:start + self.batch_size]
            m = masks[start:start + self.batch_size]
            out.append(forward(self.params_, self.config_, chunk, m).x_tail.data.astype(np.float64))
        return np.concatenate(out)

    def transform(self, kspace, masks=None) -> np.ndarray:
        return self.predict(kspace, masks)

    def score(self, kspace, y, masks=None) -> float:
        """Negative mean NMSE against reference images ``y`` (higher is better)."""
        pred = self.predict(kspace, masks)
        ref = np.abs(check_image_batch(y, name="y"))
        return -float(np.mean([nmse(p, r) for p, r in zip(pred, ref)]))


def zero_filled_magnitude(kspace) -> np.ndarray:
    return np.abs(ifft2c(check_image_batch(kspace, name="kspace")))
