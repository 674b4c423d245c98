"""Volume ingestion and preprocessing: foreground extraction via Otsu's
threshold, trilinear resampling, and the two training augmentations
(whole-sample W-axis flips, additive Gaussian noise).

Augmentations expect min-max-normalized intensities in [0, 1] and are
label- and shape-preserving; a flip applies identically to every modality
and slice of a sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

HISTOGRAM_BINS = 256


@dataclass
class Volume:
    """One 3-D intensity volume of a single modality."""

    data: np.ndarray
    spacing: tuple[float, float, float] | None = None
    modality_tag: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ContractError(f"volume must be (D,H,W), got {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ContractError(f"volume extents must be >= 1, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ContractError("volume intensities must be finite")


@dataclass
class VolumeBatch:
    """A batch of multi-modal volumes, shape (B, M, C, D, H, W), with labels."""

    data: np.ndarray
    labels: np.ndarray
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.data.ndim != 6:
            raise ContractError(f"batch must be (B,M,C,D,H,W), got {self.data.shape}")
        b, m, _, d, _, _ = self.data.shape
        if m < 1:
            raise ContractError("batch needs at least one modality")
        if d % 3 != 0:
            raise ContractError(f"depth {d} must be divisible by 3 for the sequencer")
        if self.labels.shape != (b,):
            raise ContractError(f"labels shape {self.labels.shape} != ({b},)")
        if self.labels.size and self.labels.min() < 0:
            raise ContractError("labels must be nonnegative class indices")

    def __len__(self) -> int:
        return self.data.shape[0]

    def subset(self, indices) -> "VolumeBatch":
        indices = np.asarray(indices)
        names = [self.names[i] for i in indices] if self.names else []
        return VolumeBatch(self.data[indices], self.labels[indices], names)


def minmax_normalize(data: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant array maps to all zeros."""
    lo, hi = float(data.min()), float(data.max())
    if hi == lo:
        return np.zeros_like(data, dtype=np.float64)
    return (data.astype(np.float64) - lo) / (hi - lo)


def otsu_threshold(histogram) -> int:
    """Threshold index maximizing between-class variance w0*w1*(mu0-mu1)^2.

    Bins below the returned index are background, bins at or above it
    foreground. The search covers t in [1, 255]; ties break toward the
    smallest t.
    """
    hist = np.asarray(histogram, dtype=np.float64)
    if hist.shape != (HISTOGRAM_BINS,):
        raise ContractError(f"histogram must have {HISTOGRAM_BINS} bins, got {hist.shape}")
    total = hist.sum()
    if total <= 0:
        raise ContractError("histogram is empty")

    levels = np.arange(HISTOGRAM_BINS, dtype=np.float64)
    cum_mass = np.cumsum(hist)
    cum_mean = np.cumsum(hist * levels)
    # background = bins [0, t), foreground = bins [t, 256) for t = 1..255
    w0 = cum_mass[:-1] / total
    w1 = 1.0 - w0
    mass0 = cum_mass[:-1]
    mass1 = total - mass0
    with np.errstate(invalid="ignore", divide="ignore"):
        mu0 = np.where(mass0 > 0, cum_mean[:-1] / mass0, 0.0)
        mu1 = np.where(mass1 > 0, (cum_mean[-1] - cum_mean[:-1]) / mass1, 0.0)
    variance = w0 * w1 * (mu0 - mu1) ** 2
    return int(np.argmax(variance)) + 1


def foreground_crop(volume: Volume) -> Volume:
    """Crop to the bounding box of the Otsu foreground.

    Intensities are min-max scaled to [0, 255] and binned; voxels at or
    above the Otsu threshold are foreground. If the foreground is empty
    (e.g. a constant volume) the input is returned unchanged.
    """
    norm = minmax_normalize(volume.data)
    bins = np.rint(norm * (HISTOGRAM_BINS - 1)).astype(np.int64)
    hist = np.bincount(bins.reshape(-1), minlength=HISTOGRAM_BINS)
    threshold = otsu_threshold(hist)
    mask = bins >= threshold
    if not mask.any():
        return volume
    bounds = [(idx.min(), idx.max() + 1) for idx in np.nonzero(mask)]
    (d0, d1), (h0, h1), (w0, w1) = bounds
    return Volume(volume.data[d0:d1, h0:h1, w0:w1].copy(),
                  spacing=volume.spacing, modality_tag=volume.modality_tag)


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned source coordinates for one axis."""
    if n_out == 1:
        return np.array([0.5 * (n_in - 1)])
    return np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)


def _lerp_axis(data: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    n_in = data.shape[axis]
    lo = np.floor(coords).astype(np.int64)
    lo = np.clip(lo, 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = coords - lo
    shape = [1] * data.ndim
    shape[axis] = len(coords)
    frac = frac.reshape(shape)
    return (np.take(data, lo, axis=axis) * (1.0 - frac)
            + np.take(data, hi, axis=axis) * frac)


def resample(volume: Volume, target: tuple[int, int, int]) -> Volume:
    """Trilinear resampling with corner-aligned coordinates.

    Identity when the target equals the source extents.
    """
    target = tuple(int(t) for t in target)
    if min(target) < 1:
        raise ContractError(f"target extents must be >= 1, got {target}")
    if target == volume.data.shape:
        return Volume(volume.data.copy(), spacing=volume.spacing,
                      modality_tag=volume.modality_tag)
    out = volume.data
    for axis in range(3):
        out = _lerp_axis(out, axis, _axis_coords(volume.data.shape[axis], target[axis]))
    return Volume(out, spacing=None, modality_tag=volume.modality_tag)


def random_flip(batch: VolumeBatch, p: float = 0.5,
                rng: np.random.Generator | None = None) -> VolumeBatch:
    """Reverse the W axis of each sample independently with probability p."""
    rng = rng if rng is not None else np.random.default_rng()
    mask = rng.random(len(batch)) < p
    data = batch.data.copy()
    data[mask] = data[mask][..., ::-1]
    return VolumeBatch(data, batch.labels.copy(), list(batch.names))


def add_gaussian_noise(batch: VolumeBatch, mean: float = 0.0, var: float = 0.1,
                       rng: np.random.Generator | None = None) -> VolumeBatch:
    """Add i.i.d. Normal(mean, var) noise to every voxel."""
    if var < 0:
        raise ContractError(f"noise variance must be >= 0, got {var}")
    rng = rng if rng is not None else np.random.default_rng()
    noise = rng.normal(mean, np.sqrt(var), size=batch.data.shape)
    return VolumeBatch(batch.data + noise, batch.labels.copy(), list(batch.names))
