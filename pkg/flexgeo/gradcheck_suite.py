# input:  [finite_difference_check from numerics, every loss function in losses, a float64 micro FlexGeoModel over synthetic tiles]
# output: [Finite-difference verification of each pretext term and of the total loss through the full model, with an optional gradient-corruption hook for negative controls]
# pos:    [Verification backend of the gradcheck CLI subcommand]
#
# ⚠️ When this file is updated:
#    1. Update these header comments
#    2. Update the INDEX.md of the folder this file belongs to

from __future__ import annotations

from dataclasses import dataclass
import logging
from typing import Callable

import numpy as np
import torch
from torch.func import functional_call

from datagen import generate_tile, stack_tiles, standardization_stats
from geometry import FootprintSample, default_band_registry
from losses import (
    PretextObjective,
    fft_loss,
    flex_mae_loss,
    image_level_losses,
    map_task_loss,
    soft_contrastive,
    soft_labels,
    stats_from_summary,
)
from model import FlexGeoModel
from numerics import DTYPE, GradCheckResult, build_resize_matrix, finite_difference_check
from sampler import GroupPatch, MaskPlan, PatchPlan, make_rng
from schemas import LossWeights, ModelConfig
from targets import ERA5_COUNT, MAP_TASK_CATALOGUE

logger = logging.getLogger(__name__)

MICRO_FOOTPRINT_M = 80.0
MICRO_GROUPS = (1, 2, 4)
MICRO_MODEL = ModelConfig(
    layers=1,
    embed_dim=8,
    heads=2,
    mlp_ratio=2.0,
    decoder_layers=1,
    decoder_dim=8,
    decoder_heads=2,
    canonical_patch=4,
)
COORDS_PER_CHECK = 12


class _ScaleGradient(torch.autograd.Function):
    @staticmethod
    def forward(ctx, value: torch.Tensor, factor: float) -> torch.Tensor:
        ctx.factor = factor
        return value.clone()

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor) -> tuple[torch.Tensor, None]:
        return grad_output * ctx.factor, None


@dataclass(frozen=True)
class MicroSetup:
    objective: PretextObjective
    sample: FootprintSample
    plan: PatchPlan
    mask: MaskPlan
    device_labels: torch.Tensor


def build_micro_setup(seed: int = 0) -> MicroSetup:
    """Two-sample batch over an 80 m footprint: 4 + 1 + 4 tokens at patch size 4."""
    torch.manual_seed(seed)
    registry = default_band_registry().subset(MICRO_GROUPS)
    tiles = [generate_tile(seed + index, MICRO_FOOTPRINT_M, registry) for index in range(2)]
    sample = stack_tiles(tiles, MICRO_GROUPS, dtype=DTYPE)
    plan = PatchPlan(
        ground_cover_m=MICRO_FOOTPRINT_M,
        groups=(
            GroupPatch(group_id=1, height=8, width=8, patch_px=4, gsd_m=10.0),
            GroupPatch(group_id=2, height=4, width=4, patch_px=4, gsd_m=20.0),
            GroupPatch(group_id=4, height=8, width=8, patch_px=4, gsd_m=10.0),
        ),
    )
    mask = MaskPlan(
        masks={
            1: np.array([True, False, True, False]),
            2: np.array([False]),
            4: np.array([False, True, False, True]),
        },
        mask_ratio=0.5,
    )
    model = FlexGeoModel(MICRO_MODEL, registry).to(DTYPE)
    objective = PretextObjective(
        model,
        LossWeights(),
        partitions=2,
        temperature=0.5,
        stats=stats_from_summary(standardization_stats(tiles)),
    )
    return MicroSetup(objective, sample, plan, mask, torch.tensor([0, 1]))


def _coords(point: torch.Tensor, rng: np.random.Generator) -> list[int]:
    count = point.numel()
    return sorted(int(index) for index in rng.choice(count, size=min(count, COORDS_PER_CHECK), replace=False))


def _term_checks(rng: np.random.Generator) -> list[tuple[str, Callable[[torch.Tensor], torch.Tensor], torch.Tensor]]:
    def randn(*shape: int) -> torch.Tensor:
        return torch.from_numpy(rng.normal(size=shape))

    checks: list[tuple[str, Callable[[torch.Tensor], torch.Tensor], torch.Tensor]] = []

    plan = build_resize_matrix(4, 8)
    v, bias, target = randn(2, 6, 16), randn(2, 16), randn(2, 3, 2, 64)
    masked = torch.tensor([True, False, True])
    checks.append(("reconstruction", lambda z: flex_mae_loss(z, v, plan, target, masked, bias)[0], randn(2, 3, 6)))

    histograms = torch.from_numpy(rng.uniform(0.0, 1.0, size=(8, 5)))
    labels = soft_labels(histograms).values
    devices = torch.tensor([0, 0, 0, 0, 1, 1, 1, 1])
    checks.append(("contrastive", lambda e: soft_contrastive(e, labels, devices, 0.5), randn(8, 6)))

    valid = torch.from_numpy(rng.uniform(size=(3, 16)) > 0.2)
    for name, task in MAP_TASK_CATALOGUE.items():
        if task.is_classification:
            classes = torch.from_numpy(rng.integers(0, task.channels, size=(2, 3, 16)))
            checks.append(
                (f"map_{name}", lambda p, n=name, c=classes: map_task_loss(n, p, c, valid), randn(2, 3, task.channels, 16))
            )
        else:
            dem = randn(2, 3, task.channels, 16)
            checks.append((f"map_{name}", lambda p, n=name, d=dem: map_task_loss(n, p, d, valid), randn(2, 3, task.channels, 16)))

    targets = {
        "era5": randn(2, ERA5_COUNT),
        "month": torch.tensor([3.0, 11.0], dtype=DTYPE),
        "lat": torch.tensor([12.0, -40.0], dtype=DTYPE),
        "lon": torch.tensor([170.0, -20.0], dtype=DTYPE),
        "incidence": torch.tensor([33.0, 41.0], dtype=DTYPE),
        "orbit": torch.tensor([0, 1]),
    }
    widths = {"era5": ERA5_COUNT, "month": 2, "coords": 3, "incidence": 1, "orbit": 2}
    for name, width in widths.items():
        checks.append((name, lambda p, n=name: image_level_losses({n: p}, targets)[n], randn(2, width)))

    mosaic_target = randn(2, 2, 8, 8)
    checks.append(("fft", lambda p: fft_loss([p], [mosaic_target]), randn(2, 2, 8, 8)))
    return checks


def run_gradient_suite(
    seed: int = 0,
    corrupt_gradient: bool = False,
    rtol: float = 1e-4,
    eps: float = 1e-5,
) -> list[GradCheckResult]:
    rng = make_rng(seed)
    checks = _term_checks(rng)

    setup = build_micro_setup(seed)
    args = (setup.sample, setup.plan, setup.mask, setup.device_labels)
    for parameter_name in ("model.band_weights.1", "model.recon_weights.2", "model.map_weights.wc"):
        def total(point: torch.Tensor, name: str = parameter_name) -> torch.Tensor:
            report = functional_call(setup.objective, {name: point}, (*args, make_rng(seed)))
            return report.total

        start = setup.objective.get_parameter(parameter_name).detach().clone()
        checks.append((f"total[{parameter_name.removeprefix('model.')}]", total, start))

    results = []
    for name, fn, point in checks:
        target_fn = fn
        if corrupt_gradient:
            target_fn = lambda x, f=fn: _ScaleGradient.apply(f(x), 1.5)
        result = finite_difference_check(name, target_fn, point.to(DTYPE), eps=eps, rtol=rtol, coords=_coords(point, rng))
        logger.debug("%s: ratio %.3e over %d coords", name, result.max_error_ratio, result.checked)
        results.append(result)
    return results
