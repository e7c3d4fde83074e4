# input:  [RunConfig, model presets and learning-rate scaling, band registry, sampler draws, synthetic tiles from datagen, FlexGeoModel, PretextObjective, checkpoint writer]
# output: [Effective learning rate and warmup with preset fallback, desk-scale toy pre-training loop with randomized ground cover/patch sizes, overfit mode, deterministic loss CSV, final checkpoint, and resolved config]
# pos:    [Training harness behind the train-toy CLI subcommand]
#
# ⚠️ When this file is updated:
#    1. Update these header comments
#    2. Update the INDEX.md of the folder this file belongs to

from __future__ import annotations

import csv
from dataclasses import dataclass
import logging
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from checkpoint import save_checkpoint
from config import write_resolved_config
from datagen import generate_tile, stack_tiles, standardization_stats
from errors import FlexGeoError
from geometry import BandRegistry, FootprintSample, default_band_registry, load_band_registry
from losses import LossReport, PretextObjective, TargetStats, stats_from_summary
from model import FlexGeoModel, build_optimizer
from sampler import (
    MaskPlan,
    PatchPlan,
    assign_virtual_devices,
    make_rng,
    sample_mask,
    sample_multilook_gsd,
    sample_patch_parameters,
)
from schemas import RunConfig, model_presets, scaled_learning_rate

logger = logging.getLogger(__name__)

LOSS_CSV_NAME = "loss.csv"
CHECKPOINT_NAME = "checkpoint.fgck"
STATS_TILE_COUNT = 8
LOG_EVERY = 10


class TrainError(FlexGeoError):
    pass


@dataclass(frozen=True)
class Batch:
    sample: FootprintSample
    plan: PatchPlan
    mask: MaskPlan


@dataclass
class TrainResult:
    reports: list[LossReport]
    csv_path: Path
    checkpoint_path: Path
    config_path: Path

    @property
    def totals(self) -> list[float]:
        return [report.total_value for report in self.reports]


def build_registry(cfg: RunConfig) -> BandRegistry:
    registry = load_band_registry(Path(cfg.registry_path)) if cfg.registry_path else default_band_registry()
    present = [group_id for group_id in cfg.train.group_ids if group_id in registry.group_ids]
    if not present:
        raise TrainError("TRAIN_NO_GROUPS", f"None of the training groups {cfg.train.group_ids} are registered.")
    return registry.subset(present)


def effective_learning_rate(cfg: RunConfig) -> float:
    """An explicit learning_rate wins; otherwise base_lr (train section, else preset) scaled by batch/256."""
    train = cfg.train
    if train.learning_rate is not None:
        return train.learning_rate
    base_lr = train.base_lr if train.base_lr is not None else model_presets()[cfg.model_preset].base_lr
    return scaled_learning_rate(base_lr, train.batch_size)


def effective_warmup_steps(cfg: RunConfig) -> int:
    if cfg.train.warmup_steps is not None:
        return cfg.train.warmup_steps
    return model_presets()[cfg.model_preset].warmup_steps


def configure_determinism(seed: int, threads: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def draw_batch(cfg: RunConfig, registry: BandRegistry, rng: np.random.Generator, dtype: torch.dtype) -> Batch:
    train = cfg.train
    ground_cover = float(rng.uniform(train.ground_cover_min_m, train.ground_cover_max_m))
    overrides = {
        group.group_id: sample_multilook_gsd(group, ground_cover, rng)
        for group in registry
        if group.supports_multilook
    }
    plan = sample_patch_parameters(list(registry), ground_cover, cfg.budget, rng, overrides)
    if not plan.groups:
        raise TrainError("TRAIN_EMPTY_PLAN", f"No group fits the token budget at {ground_cover:.1f} m.")
    seeds = rng.integers(0, 2**31 - 1, size=train.batch_size)
    tiles = [generate_tile(int(seed), ground_cover, registry, plan.group_ids) for seed in seeds]
    sample = stack_tiles(tiles, plan.group_ids, overrides, dtype)
    return Batch(sample=sample, plan=plan, mask=sample_mask(plan, train.mask_ratio, rng))


def build_target_stats(cfg: RunConfig, registry: BandRegistry) -> TargetStats:
    tiles = [
        generate_tile(cfg.seed + 1_000_003 + index, cfg.train.ground_cover_min_m, registry)
        for index in range(STATS_TILE_COUNT)
    ]
    return stats_from_summary(standardization_stats(tiles))


def train_toy(
    cfg: RunConfig,
    out_dir: Path,
    steps: Optional[int] = None,
    overfit: bool = False,
) -> TrainResult:
    train = cfg.train
    total_steps = steps or train.steps
    dtype = getattr(torch, train.dtype)
    configure_determinism(cfg.seed, cfg.threads)

    registry = build_registry(cfg)
    model = FlexGeoModel(cfg.model, registry).to(dtype)
    objective = PretextObjective(
        model,
        cfg.loss_weights,
        partitions=train.partitions,
        temperature=train.temperature,
        stats=build_target_stats(cfg, registry),
    )
    optimizer, scheduler = build_optimizer(
        model,
        effective_learning_rate(cfg),
        train.weight_decay,
        min(effective_warmup_steps(cfg), total_steps),
        total_steps,
        train.min_lr_ratio,
    )
    device_labels = torch.as_tensor(assign_virtual_devices(train.batch_size, train.virtual_devices))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_path = write_resolved_config(cfg, out_dir)
    csv_path = out_dir / LOSS_CSV_NAME
    rng = make_rng(cfg.seed)
    fixed = draw_batch(cfg, registry, rng, dtype) if overfit else None
    reports: list[LossReport] = []

    logger.info(
        "Training %s steps (overfit=%s, groups=%s, lr=%.2e)",
        total_steps,
        overfit,
        registry.group_ids,
        effective_learning_rate(cfg),
    )
    with csv_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(LossReport.csv_header())
        for step in range(1, total_steps + 1):
            batch = fixed or draw_batch(cfg, registry, rng, dtype)
            partition_rng = make_rng([cfg.seed, 0 if overfit else step])
            model.train()
            report = objective(batch.sample, batch.plan, batch.mask, device_labels, partition_rng, step)
            optimizer.zero_grad(set_to_none=True)
            report.total.backward()
            report.total = report.total.detach()
            optimizer.step()
            scheduler.step()

            writer.writerow(report.csv_row())
            reports.append(report)
            if step == 1 or step % LOG_EVERY == 0 or step == total_steps:
                logger.info("step %d total %.6f tokens %d", step, report.total_value, batch.plan.total_tokens)
            for warning in report.warnings:
                logger.debug("step %d: %s", step, warning)

    checkpoint_path = save_checkpoint(out_dir / CHECKPOINT_NAME, model, cfg, step=total_steps)
    logger.info("Wrote %s and %s", csv_path, checkpoint_path)
    return TrainResult(reports=reports, csv_path=csv_path, checkpoint_path=checkpoint_path, config_path=config_path)
