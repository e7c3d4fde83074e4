# input:  [numpy PCG64 generators, band groups from geometry, BudgetConfig bounds, footprint sizes in meters]
# output: [Token-budget patch planning (ground-cover heuristic), ground-cover draws, MAE mask plans, SAR multi-look GSD draws, and virtual-device labels for the contrastive loss]
# pos:    [Stochastic planning layer feeding the model and training harness; every function takes an explicit rng handle]
#
# ⚠️ When this file is updated:
#    1. Update these header comments
#    2. Update the INDEX.md of the folder this file belongs to

from __future__ import annotations

from dataclasses import dataclass
import logging
import math
from typing import Mapping, Optional, Sequence

import numpy as np

from errors import FlexGeoError
from geometry import MULTILOOK_GSD_LADDER, BandGroup, pixels_for_footprint
from schemas import BudgetConfig

logger = logging.getLogger(__name__)

DEFAULT_MASK_RATIO = 0.75
RANGE_TOLERANCE = 1e-9


class SamplerError(FlexGeoError):
    pass


@dataclass(frozen=True)
class GroupPatch:
    group_id: int
    height: int
    width: int
    patch_px: int
    gsd_m: float

    @property
    def grid_side(self) -> int:
        return math.ceil(self.height / self.patch_px)

    @property
    def token_count(self) -> int:
        return math.ceil(self.height / self.patch_px) * math.ceil(self.width / self.patch_px)


@dataclass(frozen=True)
class PatchPlan:
    ground_cover_m: float
    groups: tuple[GroupPatch, ...]
    skipped: tuple[int, ...] = ()

    @property
    def total_tokens(self) -> int:
        return sum(entry.token_count for entry in self.groups)

    @property
    def group_ids(self) -> tuple[int, ...]:
        return tuple(entry.group_id for entry in self.groups)

    def get(self, group_id: int) -> GroupPatch:
        for entry in self.groups:
            if entry.group_id == group_id:
                return entry
        raise SamplerError("PATCH_PLAN_GROUP_MISSING", f"Group {group_id} received no token budget.")


@dataclass(frozen=True)
class MaskPlan:
    masks: dict[int, np.ndarray]
    mask_ratio: float

    def masked_count(self, group_id: int) -> int:
        return int(self.masks[group_id].sum())


def make_rng(seed: int | Sequence[int]) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def sample_ground_cover(cfg: BudgetConfig, rng: np.random.Generator) -> float:
    return float(rng.uniform(cfg.ground_cover_min_m, cfg.ground_cover_max_m))


def sample_multilook_gsd(group: BandGroup, ground_cover_m: float, rng: np.random.Generator) -> float:
    if not group.supports_multilook:
        return group.gsd_m
    candidates = [
        rung for rung in MULTILOOK_GSD_LADDER
        if rung >= group.gsd_m and pixels_for_footprint(ground_cover_m, rung) >= 1
    ]
    if not candidates:
        return group.gsd_m
    return float(candidates[int(rng.integers(len(candidates)))])


def sample_patch_parameters(
    groups: Sequence[BandGroup],
    ground_cover_m: float,
    cfg: BudgetConfig,
    rng: np.random.Generator,
    gsd_overrides: Optional[Mapping[int, float]] = None,
) -> PatchPlan:
    if not groups:
        raise SamplerError("PATCH_PLAN_NO_GROUPS", "At least one band group is required to plan patches.")
    if not (
        cfg.ground_cover_min_m - RANGE_TOLERANCE <= ground_cover_m <= cfg.ground_cover_max_m + RANGE_TOLERANCE
    ):
        raise SamplerError(
            "GROUND_COVER_OUT_OF_RANGE",
            f"Ground cover {ground_cover_m} m is outside [{cfg.ground_cover_min_m}, {cfg.ground_cover_max_m}].",
        )

    overrides = dict(gsd_overrides or {})
    order = rng.permutation(len(groups))
    used = 0
    allocated: list[GroupPatch] = []
    skipped: list[int] = []

    for index in order:
        group = groups[int(index)]
        gsd = overrides.get(group.group_id, group.gsd_m)
        height = pixels_for_footprint(ground_cover_m, gsd)
        remaining = cfg.max_tokens - used
        if remaining <= 0:
            break
        if height < 1:
            skipped.append(group.group_id)
            continue

        token_min = max(cfg.grid_min, height // cfg.patch_max) ** 2
        token_max = min(cfg.grid_max, math.ceil(height / cfg.patch_min)) ** 2
        if token_min > remaining or token_max < token_min:
            skipped.append(group.group_id)
            continue

        token_target = min(token_max, remaining)
        grid_target = math.sqrt(token_target)
        patch_px = int(min(max(math.floor(height / grid_target), cfg.patch_min), cfg.patch_max))
        entry = GroupPatch(group_id=group.group_id, height=height, width=height, patch_px=patch_px, gsd_m=gsd)
        if entry.token_count > remaining:
            skipped.append(group.group_id)
            continue

        used += entry.token_count
        allocated.append(entry)

    if skipped:
        logger.debug("Skipped groups %s for a %.1f m footprint", skipped, ground_cover_m)
    return PatchPlan(ground_cover_m=ground_cover_m, groups=tuple(allocated), skipped=tuple(skipped))


def sample_mask(plan: PatchPlan, ratio: float, rng: np.random.Generator) -> MaskPlan:
    if not 0.0 <= ratio <= 1.0:
        raise SamplerError("MASK_RATIO_INVALID", f"Mask ratio must be in [0, 1], got {ratio}.")
    masks: dict[int, np.ndarray] = {}
    for entry in plan.groups:
        count = entry.token_count
        masked = int(math.floor(ratio * count + 0.5))
        mask = np.zeros(count, dtype=bool)
        if masked:
            mask[rng.choice(count, size=masked, replace=False)] = True
        masks[entry.group_id] = mask
    return MaskPlan(masks=masks, mask_ratio=ratio)


def assign_virtual_devices(batch_size: int, n_devices: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Contiguous equal partition; rng is accepted for call-site symmetry and left unused."""
    if batch_size < 1 or n_devices < 1:
        raise SamplerError("VIRTUAL_DEVICES_INVALID", "batch_size and n_devices must be positive.")
    if n_devices > batch_size:
        raise SamplerError(
            "VIRTUAL_DEVICES_INVALID",
            f"Cannot split {batch_size} samples over {n_devices} virtual devices.",
        )
    return (np.arange(batch_size) * n_devices) // batch_size
