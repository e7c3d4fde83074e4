# input:  [TokenGrid geometry and patch-centre coordinates, head counts, GSD values, torch math]
# output: [ALiBi slopes, GSD-aware 2D ALiBi bias matrices over multi-grid token sequences, GSD-aware 2D sinusoidal decoder encodings, and cyclic encodings for periodic scalars]
# pos:    [Positional-encoding layer shared by the encoder attention, the lightweight decoder, image-level targets, and the dump-alibi CLI]
#
# ⚠️ When this file is updated:
#    1. Update these header comments
#    2. Update the INDEX.md of the folder this file belongs to

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
import math
from typing import Sequence

import torch

from errors import FlexGeoError
from geometry import TokenGrid, patch_centers

SINUSOID_TEMPERATURE = 10000.0


class PosEncError(FlexGeoError):
    pass


@dataclass(frozen=True)
class AlibiBias:
    matrix: torch.Tensor  # (heads, N, N), entries <= 0
    slopes: torch.Tensor
    max_patch_m: float

    @property
    def token_count(self) -> int:
        return int(self.matrix.shape[-1])

    def select(self, indices: torch.Tensor) -> torch.Tensor:
        """Bias restricted to a subset of tokens (e.g. the visible ones)."""
        return self.matrix.index_select(-2, indices).index_select(-1, indices)


def alibi_slopes(n_heads: int) -> torch.Tensor:
    if n_heads < 1:
        raise PosEncError("ALIBI_HEADS_INVALID", f"Head count must be positive, got {n_heads}.")
    exponents = torch.arange(1, n_heads + 1, dtype=torch.float64) * (-8.0 / n_heads)
    return torch.pow(2.0, exponents)


def token_centers(grids: Sequence[TokenGrid]) -> torch.Tensor:
    return torch.cat([patch_centers(grid) for grid in grids], dim=0)


@lru_cache(maxsize=8)
def _cached_bias(grids: tuple[TokenGrid, ...], n_heads: int) -> AlibiBias:
    centers = token_centers(grids)
    delta = centers[:, None, :] - centers[None, :, :]
    distance = torch.sqrt((delta * delta).sum(dim=-1))
    max_patch_m = max(grid.patch_footprint_m for grid in grids)
    slopes = alibi_slopes(n_heads)
    matrix = -(distance / max_patch_m)[None, :, :] * slopes[:, None, None]
    return AlibiBias(matrix=matrix, slopes=slopes, max_patch_m=max_patch_m)


def build_alibi_bias(grids: Sequence[TokenGrid], n_heads: int) -> AlibiBias:
    """Tokens ordered grid by grid, row-major inside each grid."""
    if not grids:
        raise PosEncError("ALIBI_NO_GRIDS", "At least one token grid is required to build an ALiBi bias.")
    return _cached_bias(tuple(grids), n_heads)


def sinusoidal_axis(positions: torch.Tensor, g: float, dim: int) -> torch.Tensor:
    """(len(positions), dim): sin terms then cos terms of g*(pos+0.5) over dim/2 frequencies."""
    if dim < 2 or dim % 2:
        raise PosEncError("SINUSOID_DIM_INVALID", f"Per-axis encoding width must be a positive even number, got {dim}.")
    frequencies = torch.pow(
        SINUSOID_TEMPERATURE,
        -torch.arange(0, dim, 2, dtype=torch.float64) / dim,
    )
    angles = g * (positions.to(torch.float64)[:, None] + 0.5) * frequencies[None, :]
    return torch.cat((torch.sin(angles), torch.cos(angles)), dim=-1)


def gsd_sinusoidal(grid: TokenGrid, g: float, dim: int) -> torch.Tensor:
    """(rows*cols, 2*dim) encodings: x-axis block from column indices, y-axis block from row indices."""
    cols = torch.arange(grid.cols, dtype=torch.float64).repeat(grid.rows)
    rows = torch.arange(grid.rows, dtype=torch.float64).repeat_interleave(grid.cols)
    return torch.cat((sinusoidal_axis(cols, g, dim), sinusoidal_axis(rows, g, dim)), dim=-1)


def cyclic_encoding(x: torch.Tensor, s: float) -> torch.Tensor:
    if s <= 0:
        raise PosEncError("CYCLIC_PERIOD_INVALID", f"Cyclic period must be positive, got {s}.")
    angle = (2.0 * math.pi / s) * x
    return torch.cat((torch.sin(angle), torch.cos(angle)), dim=-1)
