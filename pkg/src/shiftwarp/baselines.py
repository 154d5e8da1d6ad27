"""Classical width-retargeting comparators: linear scaling, center crop,
gradient-guided crop, and seam carving.

All operate on HxWx3 uint8 images and return the same. Tie-breaking is
leftmost everywhere so repeated runs and tests agree exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import unit_to_u8
from .errors import ContractError, SpecError
from .ops import resize_matrix

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class EnergyMap:
    values: np.ndarray  # H x W, >= 0

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ContractError(f"energy must be 2-D, got {self.values.shape}")
        if self.values.min() < 0.0:
            raise ContractError("energy entries must be nonnegative")


@dataclass(frozen=True)
class Seam:
    cols: np.ndarray  # length H, one column index per row

    def __post_init__(self):
        if self.cols.ndim != 1:
            raise ContractError("seam must be a 1-D column list")
        if len(self.cols) > 1 and np.abs(np.diff(self.cols)).max() > 1:
            raise ContractError("seam steps more than one column between rows")


def _check_image(image: np.ndarray) -> None:
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ContractError(f"expected HxWx3 uint8 image, got {image.dtype} "
                            f"{image.shape}")


def energy_map(image: np.ndarray) -> EnergyMap:
    """L1 gradient magnitude of luminance; forward differences with a
    replicated border, so the last row/column contribute zero."""
    _check_image(image)
    lum = (image.astype(np.float64) / 255.0) @ LUMA
    gx = np.zeros_like(lum)
    gy = np.zeros_like(lum)
    gx[:, :-1] = np.abs(lum[:, 1:] - lum[:, :-1])
    gy[:-1, :] = np.abs(lum[1:, :] - lum[:-1, :])
    return EnergyMap(gx + gy)


def linear_scale(image: np.ndarray, target_width: int) -> np.ndarray:
    """Bilinear horizontal resample (half-pixel centers); height unchanged."""
    _check_image(image)
    if target_width < 1:
        raise SpecError(f"target width must be >= 1, got {target_width}")
    w = image.shape[1]
    if target_width == w:
        return image.copy()
    m = resize_matrix(w, target_width)
    resampled = np.einsum("ij,hjc->hic", m, image.astype(np.float64) / 255.0)
    return unit_to_u8(resampled)


def center_crop(image: np.ndarray, target_width: int) -> np.ndarray:
    _check_image(image)
    _crop_pre(image, target_width)
    left = (image.shape[1] - target_width) // 2
    return image[:, left:left + target_width].copy()


def edge_crop(image: np.ndarray, target_width: int) -> np.ndarray:
    """The window with the largest energy sum; leftmost wins ties."""
    _check_image(image)
    _crop_pre(image, target_width)
    col_sums = energy_map(image).values.sum(axis=0)
    prefix = np.concatenate([[0.0], np.cumsum(col_sums)])
    window_sums = prefix[target_width:] - prefix[:-target_width]
    left = int(np.argmax(window_sums))
    return image[:, left:left + target_width].copy()


def _crop_pre(image: np.ndarray, target_width: int) -> None:
    if target_width < 1:
        raise SpecError(f"target width must be >= 1, got {target_width}")
    if target_width > image.shape[1]:
        raise ContractError(f"crop width {target_width} exceeds image "
                            f"width {image.shape[1]}")


def cumulative_cost(energy: EnergyMap) -> np.ndarray:
    """Vertical-seam dynamic program; out-of-range neighbors count as +inf."""
    e = energy.values
    m = np.empty_like(e)
    m[0] = e[0]
    for r in range(1, e.shape[0]):
        above = np.pad(m[r - 1], 1, constant_values=np.inf)
        m[r] = e[r] + np.minimum(np.minimum(above[:-2], above[1:-1]),
                                 above[2:])
    return m


def find_seam(energy: EnergyMap) -> Seam:
    m = cumulative_cost(energy)
    h, w = m.shape
    cols = np.empty(h, dtype=np.int64)
    cols[-1] = int(np.argmin(m[-1]))
    for r in range(h - 2, -1, -1):
        c = cols[r + 1]
        lo = max(0, c - 1)
        hi = min(w, c + 2)
        cols[r] = lo + int(np.argmin(m[r, lo:hi]))
    return Seam(cols)


def remove_seam(image: np.ndarray, seam: Seam) -> np.ndarray:
    h, w, _ = image.shape
    keep = np.ones((h, w), dtype=bool)
    keep[np.arange(h), seam.cols] = False
    return image[keep].reshape(h, w - 1, 3)


def seam_carve(image: np.ndarray, target_width: int) -> np.ndarray:
    """Remove minimal seams one at a time, recomputing energy after each."""
    _check_image(image)
    _crop_pre(image, target_width)
    out = image
    while out.shape[1] > target_width:
        out = remove_seam(out, find_seam(energy_map(out)))
    return out


METHODS = {
    "linear": linear_scale,
    "center": center_crop,
    "edge": edge_crop,
    "seam": seam_carve,
}
