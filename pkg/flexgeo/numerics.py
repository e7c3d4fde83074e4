# input:  [torch tensors/autograd/linalg/fft, einops layouts, patch sizes in pixels]
# output: [ResizePlan bilinear matrices with pseudo-inverses, PI/transpose weight resizing, patchify helpers, finite-value guard, Fourier L1 distance, reverse-mode grad wrapper, and finite-difference gradient checks]
# pos:    [Numerical kernel layer underneath posenc, model, and losses; everything else differentiates through these ops]
#
# ⚠️ When this file is updated:
#    1. Update these header comments
#    2. Update the INDEX.md of the folder this file belongs to

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
import math
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from einops import rearrange

from errors import FlexGeoError

DTYPE = torch.float64
RANK_TOLERANCE = 1e-12


class NumericsError(FlexGeoError):
    pass


@dataclass(frozen=True)
class ResizePlan:
    p_src: int
    p_dst: int
    B: torch.Tensor
    B_pinv: torch.Tensor

    @property
    def is_identity(self) -> bool:
        return self.p_src == self.p_dst

    @property
    def is_upsampling(self) -> bool:
        return self.p_dst >= self.p_src


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    passed: bool
    max_error_ratio: float
    checked: int


def ensure_finite(tensor: torch.Tensor, name: str) -> torch.Tensor:
    if not bool(torch.isfinite(tensor).all()):
        raise NumericsError("NON_FINITE_VALUES", f"{name} contains NaN or infinite values.")
    return tensor


def _interpolation_matrix_1d(p_src: int, p_dst: int) -> torch.Tensor:
    # Half-pixel centres, edge-clamped.
    matrix = torch.zeros((p_dst, p_src), dtype=DTYPE)
    scale = p_src / p_dst
    for j in range(p_dst):
        coord = min(max((j + 0.5) * scale - 0.5, 0.0), float(p_src - 1))
        lower = int(math.floor(coord))
        upper = min(lower + 1, p_src - 1)
        frac = coord - lower
        matrix[j, lower] += 1.0 - frac
        matrix[j, upper] += frac
    return matrix


@lru_cache(maxsize=None)
def build_resize_matrix(p_src: int, p_dst: int) -> ResizePlan:
    if p_src < 1 or p_dst < 1:
        raise NumericsError("RESIZE_SIZE_INVALID", f"Patch sizes must be positive, got {p_src} -> {p_dst}.")

    if p_src == p_dst:
        identity = torch.eye(p_src * p_src, dtype=DTYPE)
        return ResizePlan(p_src=p_src, p_dst=p_dst, B=identity, B_pinv=identity.clone())

    axis = _interpolation_matrix_1d(p_src, p_dst)
    # vec() is row-major, so the 2D operator factorises as kron(rows, cols).
    resize = torch.kron(axis, axis)
    target = torch.eye(p_dst * p_dst, dtype=DTYPE)
    pinv = torch.linalg.lstsq(resize, target, rcond=RANK_TOLERANCE, driver="gelsd").solution
    return ResizePlan(p_src=p_src, p_dst=p_dst, B=resize, B_pinv=pinv)


def _check_weight_shape(weights: torch.Tensor, plan: ResizePlan, field_name: str) -> None:
    if weights.dim() < 2 or weights.shape[-1] != plan.p_src * plan.p_src:
        raise NumericsError(
            "RESIZE_SHAPE_MISMATCH",
            f"{field_name} must end with {plan.p_src * plan.p_src} patch pixels, got shape {tuple(weights.shape)}.",
        )


def pi_resize_embed_weights(w: torch.Tensor, plan: ResizePlan) -> torch.Tensor:
    _check_weight_shape(w, plan, "w")
    if plan.is_identity:
        return w
    return w @ plan.B_pinv.to(dtype=w.dtype, device=w.device)


def resize_decoder_weights(v: torch.Tensor, plan: ResizePlan) -> torch.Tensor:
    _check_weight_shape(v, plan, "v")
    if plan.is_identity:
        return v
    return v @ plan.B.T.to(dtype=v.dtype, device=v.device)


def patchify(image: torch.Tensor, patch_px: int) -> torch.Tensor:
    """(..., C, H, W) -> (..., N, C, P*P), zero padding H and W up to ceil(H/P)*P."""
    if patch_px < 1:
        raise NumericsError("PATCH_SIZE_INVALID", f"Patch size must be positive, got {patch_px}.")
    height, width = image.shape[-2], image.shape[-1]
    pad_h = (-height) % patch_px
    pad_w = (-width) % patch_px
    if pad_h or pad_w:
        image = F.pad(image, (0, pad_w, 0, pad_h))
    return rearrange(image, "... c (h p1) (w p2) -> ... (h w) c (p1 p2)", p1=patch_px, p2=patch_px)


def unpatchify(patches: torch.Tensor, rows: int, cols: int, patch_px: int) -> torch.Tensor:
    if patches.shape[-3] != rows * cols:
        raise NumericsError(
            "PATCH_COUNT_MISMATCH",
            f"Expected {rows * cols} patches for a {rows}x{cols} grid, got {patches.shape[-3]}.",
        )
    return rearrange(
        patches,
        "... (h w) c (p1 p2) -> ... c (h p1) (w p2)",
        h=rows,
        w=cols,
        p1=patch_px,
        p2=patch_px,
    )


def dft2_l1(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean |abs(DFT2(pred)) - abs(DFT2(target))| for (..., H, W, C) fields."""
    if pred.shape != target.shape:
        raise NumericsError(
            "DFT_SHAPE_MISMATCH",
            f"pred and target must share a shape, got {tuple(pred.shape)} and {tuple(target.shape)}.",
        )
    if pred.dim() < 3:
        raise NumericsError("DFT_SHAPE_INVALID", "dft2_l1 expects (..., H, W, C) inputs.")
    pred_spectrum = torch.fft.fft2(pred, dim=(-3, -2)).abs()
    target_spectrum = torch.fft.fft2(target, dim=(-3, -2)).abs()
    return ensure_finite((pred_spectrum - target_spectrum).abs().mean(), "dft2_l1")


def grad(fn: Callable[..., torch.Tensor], *inputs: torch.Tensor) -> tuple[torch.Tensor, ...]:
    leaves = tuple(tensor.detach().clone().requires_grad_(True) for tensor in inputs)
    output = fn(*leaves)
    if output.numel() != 1:
        raise NumericsError(
            "GRAD_NON_SCALAR_OUTPUT",
            f"grad() needs a scalar-valued computation, got shape {tuple(output.shape)}.",
        )
    partials = torch.autograd.grad(output.reshape(()), leaves, allow_unused=True)
    return tuple(
        torch.zeros_like(leaf) if partial is None else partial
        for leaf, partial in zip(leaves, partials)
    )


def finite_difference_check(
    name: str,
    fn: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor,
    *,
    eps: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-8,
    coords: Sequence[int] | None = None,
) -> GradCheckResult:
    """Central differences against autograd on selected flat coordinates of one float64 input."""
    if point.dtype != DTYPE:
        raise NumericsError("GRADCHECK_DTYPE", "Finite-difference checks must run in float64.")

    (analytic,) = grad(fn, point)
    flat_point = point.detach().reshape(-1)
    flat_analytic = analytic.reshape(-1)
    selected = list(range(flat_point.numel())) if coords is None else list(coords)

    worst = 0.0
    with torch.no_grad():
        for index in selected:
            shifted = flat_point.clone()
            shifted[index] += eps
            upper = float(fn(shifted.reshape(point.shape)))
            shifted[index] -= 2.0 * eps
            lower = float(fn(shifted.reshape(point.shape)))
            numeric = (upper - lower) / (2.0 * eps)
            error = abs(float(flat_analytic[index]) - numeric)
            worst = max(worst, error / (atol + rtol * abs(numeric)))

    return GradCheckResult(name=name, passed=worst <= 1.0, max_error_ratio=worst, checked=len(selected))
