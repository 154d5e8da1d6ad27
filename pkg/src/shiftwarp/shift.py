"""Attention-to-shift-map conversion and the warps it drives.

The reducing pipeline: decoder attention A_d is resized to the target
width (A_r), collapsed by a learned H-length column filter, clamped at
zero and duplicated back to H rows (A_1D), combined as A = lam*A_r + A_1D,
and turned into a monotone shift map by cumulative normalization

    S(x,y) = alpha * prefix(A)(x,y) / rowtotal(A)(y),   alpha = |W - W'|

with an exclusive prefix sum, so uniform attention lands exactly on the
linear-scaling sample points.  The warp samples the source at x + S(x,y).

Enlarging inverts attention (exp(-A/gamma)), normalizes it on the source
grid, and scatters pixels forward through t(x') = x' + S(x'); output
pixels come from linear interpolation between bracketing t values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

from . import nets, ops, tensor
from .errors import (ContractError, DegeneracyError, DimensionError,
                     FormatError, InvariantError, SpecError)
from .tensor import Node

STAGES = ("decoder", "resized", "duplicated", "combined")
ROW_TOTAL_FLOOR = 1e-9
INVARIANT_SLACK = 1e-9


@dataclass(frozen=True)
class RetargetSpec:
    """Width-retargeting problem statement; heights never change here."""
    source_height: int
    source_width: int
    target_width: int
    lam: float = 0.2
    gamma: float = 1.0

    def __post_init__(self):
        if self.source_height < 1 or self.source_width < 1:
            raise SpecError(f"bad source extents {self.source_height}x"
                            f"{self.source_width}")
        if self.target_width < 1:
            raise SpecError(f"target width must be >= 1, got {self.target_width}")
        if self.lam < 0:
            raise SpecError(f"lambda must be >= 0, got {self.lam}")
        if self.gamma <= 0:
            raise SpecError(f"gamma must be > 0, got {self.gamma}")

    @property
    def alpha(self) -> float:
        return float(abs(self.source_width - self.target_width))

    @property
    def reducing(self) -> bool:
        return self.target_width <= self.source_width


@dataclass
class AttentionMap:
    """Nonnegative saliency field at one of the four pipeline stages.

    The decoder's sigmoid and the convexity of resizing keep internal maps
    nonnegative; the learned column filter is the one stage that could dip
    below zero, so duplicate_conv clamps its responses at zero.  Combined
    maps built from pipeline stages therefore have strictly positive row
    sums; the degeneracy guards exist for externally supplied maps.
    """
    values: Node  # (1, 1, H, w)
    stage: str

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ContractError(f"unknown attention stage {self.stage!r}")
        if self.values.value.ndim != 4 or self.values.value.shape[:2] != (1, 1):
            raise DimensionError(
                f"attention map must be (1,1,H,w), got {self.values.value.shape}")


@dataclass
class ShiftMap:
    values: Node  # (1, 1, H, w) sub-pixel displacements in source pixels
    alpha: float


def _require_stage(a: AttentionMap, stage: str, op: str) -> None:
    if a.stage != stage:
        raise ContractError(f"{op} needs a {stage}-stage map, got {a.stage}")


def decoder_attention(model: nets.Model, image: Node) -> AttentionMap:
    return AttentionMap(nets.attention_map(model, image), "decoder")


def resize_attention(a: AttentionMap, spec: RetargetSpec) -> AttentionMap:
    _require_stage(a, "decoder", "resize_attention")
    h, w = a.values.value.shape[2:]
    if (h, w) != (spec.source_height, spec.source_width):
        raise DimensionError(
            f"attention is {h}x{w} but spec declares "
            f"{spec.source_height}x{spec.source_width}")
    out = ops.resize_bilinear(a.values, h, spec.target_width)
    return AttentionMap(out, "resized")


def duplicate_conv(a: AttentionMap, w: Node, b: Node) -> AttentionMap:
    """Collapse to one row with the learned column filter, then repeat it,
    forcing column-constant attention."""
    _require_stage(a, "resized", "duplicate_conv")
    _, _, h, width = a.values.value.shape
    flat = tensor.reshape(a.values, (h, width))
    # negative filter responses clamp to zero: attention stays nonnegative
    # and the sigmoid term alone keeps combined row sums positive
    row = tensor.relu(ops.conv1d_column(flat, w, b))
    full = ops.repeat_row(row, h)
    return AttentionMap(tensor.reshape(full, (1, 1, h, width)), "duplicated")


def combine(a_r: AttentionMap, a_1d: AttentionMap, lam: float) -> AttentionMap:
    _require_stage(a_r, "resized", "combine")
    _require_stage(a_1d, "duplicated", "combine")
    if a_r.values.value.shape != a_1d.values.value.shape:
        raise DimensionError(
            f"stage shapes differ: {a_r.values.value.shape} vs "
            f"{a_1d.values.value.shape}")
    out = tensor.add(tensor.scalar_mul(a_r.values, lam), a_1d.values)
    row_sums = out.value.sum(axis=-1)
    if np.any(row_sums <= 0.0):
        raise DegeneracyError(
            f"combined attention has a nonpositive row sum "
            f"(min {row_sums.min():.3e})")
    return AttentionMap(out, "combined")


def assert_shift_invariants(values: np.ndarray, alpha: float,
                            wide_width: int) -> None:
    """Bounds, row monotonicity, and containment of mapped coordinates."""
    if values.min() < -INVARIANT_SLACK or values.max() > alpha + INVARIANT_SLACK:
        raise InvariantError(
            f"shift values [{values.min():.6f}, {values.max():.6f}] escape "
            f"[0, {alpha}]")
    if values.shape[-1] > 1 and np.diff(values, axis=-1).min() < -INVARIANT_SLACK:
        raise InvariantError("shift map decreases along a row")
    narrow = values.shape[-1]
    coords = np.arange(narrow) + values
    if coords.max() > wide_width - 1 + INVARIANT_SLACK:
        raise InvariantError(
            f"mapped coordinate {coords.max():.6f} exceeds {wide_width - 1}")


def cumulative_normalize(a: AttentionMap, spec: RetargetSpec) -> ShiftMap:
    """Normalized exclusive prefix sums scaled by alpha.

    The map lives on the narrower of the two grids (W' when reducing, W
    when enlarging) and displaces into the wider one.
    """
    _require_stage(a, "combined", "cumulative_normalize")
    narrow = min(spec.source_width, spec.target_width)
    wide = max(spec.source_width, spec.target_width)
    if a.values.value.shape[-1] != narrow:
        raise DimensionError(
            f"combined map width {a.values.value.shape[-1]} != {narrow}")
    guarded = tensor.relu(a.values)  # identity on valid nonnegative maps
    totals = tensor.reduce_sum(guarded, axes=(3,), keepdims=True)
    if totals.value.min() < ROW_TOTAL_FLOOR:
        raise DegeneracyError(
            f"attention row total {totals.value.min():.3e} below "
            f"{ROW_TOTAL_FLOOR}")
    prefix = ops.cumsum_row_exclusive(guarded)
    s = tensor.scalar_mul(tensor.div(prefix, totals), spec.alpha)
    assert_shift_invariants(s.value, spec.alpha, wide)
    return ShiftMap(s, spec.alpha)


def warp(image: Node, s: ShiftMap) -> Node:
    return ops.warp_width(image, s.values)


def invert_attention(a: AttentionMap, gamma: float) -> AttentionMap:
    """exp(-A/gamma): strictly positive and order-reversing."""
    if gamma <= 0:
        raise SpecError(f"gamma must be > 0, got {gamma}")
    out = tensor.exp(tensor.scalar_mul(a.values, -1.0 / gamma))
    return AttentionMap(out, a.stage)


# ---------------------------------------------------------------------------
# Full pipelines
# ---------------------------------------------------------------------------

@dataclass
class RetargetResult:
    output: Node          # (1, C, H, W')
    shift: ShiftMap
    resized: AttentionMap
    combined: AttentionMap


def _column_filter(model: nets.Model, height: int) -> tuple[Node, Node]:
    """The trained filter, resampled when the input height differs from the
    training height (inference-only path; gradients need the native height)."""
    w, b = nets.shift_filter(model)
    trained = w.value.shape[0]
    if trained == height:
        return w, b
    resampled = ops.resize_matrix(trained, height) @ w.value * (trained / height)
    return Node(resampled), Node(b.value.copy())


def retarget_width(image: Node, model: nets.Model,
                   spec: RetargetSpec) -> RetargetResult:
    """Reducing pipeline: attention -> shift map -> warp."""
    if not spec.reducing:
        raise SpecError("retarget_width reduces; use enlarge for W' > W")
    a_d = decoder_attention(model, image)
    a_r = resize_attention(a_d, spec)
    w, b = _column_filter(model, spec.source_height)
    a_1d = duplicate_conv(a_r, w, b)
    a = combine(a_r, a_1d, spec.lam)
    s = cumulative_normalize(a, spec)
    return RetargetResult(warp(image, s), s, a_r, a)


def enlarge(image: Node, model: nets.Model, spec: RetargetSpec,
            reduce_by: float | None = None) -> np.ndarray:
    """Widen an image by scattering pixels forward through t(x') = x' + S.

    Attention comes from the reducing task at factor reduce_by (the
    enlargement factor itself unless overridden), resized back to the
    source grid and inverted, so salient columns receive the smallest
    spacing increments.  Not differentiable; evaluation only.
    """
    if spec.target_width < spec.source_width:
        raise SpecError("enlarge needs W' >= W")
    if reduce_by is None:
        reduce_by = spec.target_width / spec.source_width
    if reduce_by < 1.0:
        raise SpecError(f"reduce_by must be >= 1, got {reduce_by}")
    h, w_src = spec.source_height, spec.source_width
    reduce_spec = RetargetSpec(h, w_src, max(1, round(w_src / reduce_by)),
                               spec.lam, spec.gamma)

    a_d = decoder_attention(model, image)
    a_r = resize_attention(a_d, reduce_spec)
    fw, fb = _column_filter(model, h)
    a = combine(a_r, duplicate_conv(a_r, fw, fb), reduce_spec.lam)
    on_source = AttentionMap(ops.resize_bilinear(a.values, h, w_src), "combined")
    inverted = invert_attention(on_source, spec.gamma)
    s = cumulative_normalize(inverted, spec)
    return scatter_forward(image.value, s.values.value, spec.target_width)


def scatter_forward(image: np.ndarray, shift: np.ndarray,
                    target_width: int) -> np.ndarray:
    """Resample per row from strictly increasing forward coordinates
    t(x') = x' + S(x'); columns beyond t(W-1) replicate the last pixel."""
    n, c, h, w_src = image.shape
    t = np.arange(w_src) + shift[0, 0]
    if w_src > 1 and np.diff(t, axis=-1).min() <= 0.0:
        raise InvariantError("forward mapping is not strictly increasing")
    out = np.empty((n, c, h, target_width), dtype=np.float64)
    xs = np.arange(target_width, dtype=np.float64)
    for row in range(h):
        k = np.searchsorted(t[row], xs, side="right") - 1
        k = np.clip(k, 0, max(w_src - 2, 0))
        if w_src == 1:
            out[:, :, row, :] = image[:, :, row, 0][..., None]
            continue
        span = t[row, k + 1] - t[row, k]
        frac = np.clip((xs - t[row, k]) / span, 0.0, 1.0)
        left = image[:, :, row, k]
        right = image[:, :, row, k + 1]
        out[:, :, row, :] = left + frac * (right - left)
    return out


def rotate_quarter(image: np.ndarray, back: bool = False) -> np.ndarray:
    k = -1 if back else 1
    return np.ascontiguousarray(np.rot90(image, k=k, axes=(2, 3)))


def retarget_height(image: Node, model: nets.Model, target_height: int,
                    lam: float = 0.2) -> np.ndarray:
    """Height reduction = rotate, run the width pipeline, rotate back."""
    _, _, h, w = image.value.shape
    rotated = rotate_quarter(image.value)
    spec = RetargetSpec(w, h, target_height, lam)
    result = retarget_width(Node(rotated), model, spec)
    return rotate_quarter(result.output.value, back=True)


# ---------------------------------------------------------------------------
# Attention / shift map exchange formats
# ---------------------------------------------------------------------------

def save_attention_png(a: AttentionMap, path, bit_depth: int = 16) -> None:
    """Grayscale PNG with values rescaled from [0,1]; 8- or 16-bit."""
    values = np.clip(a.values.value[0, 0], 0.0, 1.0)
    if bit_depth == 8:
        img = PILImage.fromarray(np.rint(values * 255).astype(np.uint8), "L")
    elif bit_depth == 16:
        img = PILImage.fromarray(np.rint(values * 65535).astype(np.uint16))
    else:
        raise FormatError(f"attention PNG depth must be 8 or 16, got {bit_depth}")
    img.save(path, format="PNG")


def load_attention_png(path) -> AttentionMap:
    with PILImage.open(path) as img:
        if img.mode == "L":
            scale = 255.0
        elif img.mode in ("I", "I;16"):
            scale = 65535.0
        else:
            raise FormatError(
                f"attention PNG must be 8- or 16-bit grayscale, got {img.mode}")
        values = np.asarray(img, dtype=np.float64) / scale
    return AttentionMap(Node(values[None, None]), "decoder")


def save_shift_map(s: ShiftMap, path) -> None:
    tensor.save_tensor(s.values.value, path)
