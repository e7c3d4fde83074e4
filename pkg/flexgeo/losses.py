# input:  [Decoder tokens and heads from model, ResizePlans and dft2_l1 from numerics, target maps/scalars from datagen samples, LossWeights from schemas, cyclic encodings from posenc]
# output: [Flexible MAE loss, soft-label patch contrastive loss averaged per group over compatible land-cover tasks, map prediction losses with the [4,32] compatibility rule, image-level losses, FFT reconstruction term, finite-checked weighted LossReport with CSV rows, and the PretextObjective module]
# pos:    [Objective layer between the model forward pass and the training harness / gradient suite]
#
# ⚠️ When this file is updated:
#    1. Update these header comments
#    2. Update the INDEX.md of the folder this file belongs to

from __future__ import annotations

from dataclasses import dataclass, field
import logging
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from errors import FlexGeoError
from geometry import MODEL_PATCH_RANGE, FootprintSample, TokenGrid
from numerics import ResizePlan, build_resize_matrix, dft2_l1, ensure_finite, patchify, resize_decoder_weights, unpatchify
from posenc import cyclic_encoding
from sampler import MaskPlan, PatchPlan
from schemas import LossWeights
from targets import (
    IGNORE_INDEX,
    INCIDENCE_SCALE,
    LABEL_SMOOTHING,
    LAND_COVER_TASKS,
    LATITUDE_SCALE,
    LONGITUDE_PERIOD,
    MAP_TASK_CATALOGUE,
    MONTH_PERIOD,
    map_target_key,
    viable_tasks,
)

logger = logging.getLogger(__name__)

LOSS_TERMS = (
    "reconstruction",
    "contrastive",
    "map_wc",
    "map_gc",
    "map_mcd",
    "map_dem",
    "map_scl",
    "era5",
    "month",
    "coords",
    "incidence",
    "orbit",
    "fft",
)
IMAGE_TERMS = ("era5", "month", "coords", "incidence", "orbit")
STD_FLOOR = 1e-6


class LossError(FlexGeoError):
    pass


@dataclass(frozen=True)
class SoftLabelMatrix:
    values: torch.Tensor  # (K, K) in [0, 1]
    group_id: int = 0
    task: str = ""

    @property
    def size(self) -> int:
        return int(self.values.shape[0])


@dataclass
class LossReport:
    step: int
    terms: dict[str, float]
    total: torch.Tensor
    absent: tuple[str, ...] = ()
    warnings: list[str] = field(default_factory=list)

    @property
    def total_value(self) -> float:
        return float(self.total.detach())

    @staticmethod
    def csv_header() -> list[str]:
        return ["step", *LOSS_TERMS, "total"]

    def csv_row(self) -> list[str]:
        cells = [str(self.step)]
        for term in LOSS_TERMS:
            cells.append(repr(self.terms[term]) if term in self.terms else "")
        cells.append(repr(self.total_value))
        return cells


def flex_mae_loss(
    z: torch.Tensor,
    v: torch.Tensor,
    plan: ResizePlan,
    target_patches: torch.Tensor,
    masked: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
) -> tuple[torch.Tensor, list[str]]:
    """Channel-wise MSE over masked patches, measured at the canonical size through B⁺.

    z: (batch, n, d); v: (channels, d, p_src²); target_patches: (batch, n, channels, p_dst²);
    masked: (n,) bool.
    """
    if v.shape[-1] != plan.p_src * plan.p_src or target_patches.shape[-1] != plan.p_dst * plan.p_dst:
        raise LossError(
            "MAE_SHAPE_MISMATCH",
            f"v must end with {plan.p_src ** 2} and targets with {plan.p_dst ** 2} pixels.",
        )
    masked = torch.as_tensor(masked, dtype=torch.bool)
    if not bool(masked.any()):
        logger.warning("No masked patches; reconstruction loss set to 0")
        return target_patches.new_zeros(()), ["MAE_NO_MASKED_PATCHES"]

    prediction = torch.einsum("bnd,cdp->bncp", z, resize_decoder_weights(v, plan))
    if bias is not None:
        prediction = prediction + resize_decoder_weights(bias, plan)
    residual = (target_patches - prediction)[:, masked]
    lifted = residual @ plan.B_pinv.T.to(dtype=residual.dtype)
    return lifted.pow(2).mean(), []


def soft_labels(histograms: torch.Tensor, group_id: int = 0, task: str = "") -> SoftLabelMatrix:
    """Cosine similarity of nonnegative histograms; already within [0, 1]."""
    if bool((histograms < 0).any()):
        raise LossError("HISTOGRAM_NEGATIVE", "Land-cover histograms must be nonnegative.")
    unit = F.normalize(histograms.to(torch.float64), dim=-1)
    return SoftLabelMatrix(values=(unit @ unit.T).clamp(0.0, 1.0), group_id=group_id, task=task)


def soft_contrastive(
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    device_labels: torch.Tensor,
    temperature: float,
) -> torch.Tensor:
    """Mean over anchors of -log(sum_pos exp(-h f / t) / sum_{k != i} exp(-f / t)).

    Positives are the other items on the anchor's device; f is cosine similarity.
    """
    count = embeddings.shape[0]
    unit = F.normalize(embeddings, dim=-1)
    similarity = unit @ unit.T
    device_labels = torch.as_tensor(device_labels)
    others = ~torch.eye(count, dtype=torch.bool)
    positives = (device_labels[:, None] == device_labels[None, :]) & others
    if not bool(positives.any(dim=1).all()):
        raise LossError("CONTRASTIVE_NO_POSITIVES", "Every anchor needs another item on its device.")

    neg_inf = torch.finfo(similarity.dtype).min
    positive_logits = (-labels.to(similarity.dtype) * similarity / temperature).masked_fill(~positives, neg_inf)
    all_logits = (-similarity / temperature).masked_fill(~others, neg_inf)
    per_anchor = torch.logsumexp(all_logits, dim=1) - torch.logsumexp(positive_logits, dim=1)
    return per_anchor.mean()


def implied_target_side(grid: TokenGrid, target_gsd_m: float) -> int:
    return int(round(grid.patch_px * grid.gsd_m / target_gsd_m))


def is_map_compatible(grid: TokenGrid, target_gsd_m: float) -> bool:
    low, high = MODEL_PATCH_RANGE
    return low <= implied_target_side(grid, target_gsd_m) <= high


def map_target_patches(
    target_map: torch.Tensor,
    map_gsd_m: float,
    grid: TokenGrid,
    side_px: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Samples a (batch, [channels,] H, W) map over each token footprint at side_px x side_px nearest pixel centres.

    Returns (batch, n, [channels,] side²) values and an (n, side²) validity mask; samples past the
    map edge are invalid.
    """
    squeeze = target_map.dim() == 3
    values = target_map.unsqueeze(1) if squeeze else target_map
    height, width = values.shape[-2], values.shape[-1]
    step = grid.patch_footprint_m / side_px

    def axis_index(cells: int, origin: float, limit: int) -> tuple[torch.Tensor, torch.Tensor]:
        centres = (torch.arange(cells * side_px, dtype=torch.float64) + 0.5) * step + origin
        index = torch.floor(centres / map_gsd_m).to(torch.long)
        valid = (index >= 0) & (index < limit)
        return index.clamp(0, limit - 1), valid

    row_index, row_valid = axis_index(grid.rows, grid.origin_m[1], height)
    col_index, col_valid = axis_index(grid.cols, grid.origin_m[0], width)
    sampled = values.index_select(-2, row_index).index_select(-1, col_index)
    valid = row_valid[:, None] & col_valid[None, :]

    patches = patchify(sampled, side_px)
    valid_patches = rearrange(valid, "(h p1) (w p2) -> (h w) (p1 p2)", p1=side_px, p2=side_px)
    if squeeze:
        patches = patches[:, :, 0]
    return patches, valid_patches


def map_task_loss(
    task_name: str,
    prediction: torch.Tensor,
    target: torch.Tensor,
    valid: torch.Tensor,
) -> Optional[torch.Tensor]:
    """prediction: (batch, n, channels, side²); target: (batch, n, side²) classes or (batch, n, 2, side²) DEM."""
    task = MAP_TASK_CATALOGUE[task_name]
    valid = torch.as_tensor(valid, dtype=torch.bool)
    if not bool(valid.any()):
        return None
    if task.is_classification:
        classes = target.to(torch.long)
        unknown = valid & ((classes < 0) | (classes >= task.channels))
        if bool(unknown.any()):
            raise LossError(
                "MAP_CLASS_UNKNOWN",
                f"Task {task_name} has {task.channels} classes but targets contain {int(classes[unknown].max())}.",
            )
        classes = classes.masked_fill(~valid.expand_as(classes), IGNORE_INDEX)
        logits = rearrange(prediction, "b n k p -> (b n p) k")
        return F.cross_entropy(
            logits,
            classes.reshape(-1),
            ignore_index=IGNORE_INDEX,
            label_smoothing=LABEL_SMOOTHING,
        )
    weights = valid.to(prediction.dtype).expand(prediction.shape[0], -1, -1)
    squared = (prediction - target.to(prediction.dtype)).pow(2).sum(dim=2)
    return (squared * weights).sum() / (weights.sum() * task.channels)


@dataclass(frozen=True)
class TargetStats:
    mean: dict[str, torch.Tensor]
    std: dict[str, torch.Tensor]

    def standardize(self, name: str, values: torch.Tensor, channel_dim: int = -1) -> torch.Tensor:
        if name not in self.mean:
            return values
        shape = [1] * values.dim()
        shape[channel_dim] = -1
        mean = self.mean[name].to(values.dtype).reshape(shape)
        std = self.std[name].to(values.dtype).clamp_min(STD_FLOOR).reshape(shape)
        return (values - mean) / std


def min_normalize_elevation(dem: torch.Tensor) -> torch.Tensor:
    """(batch, 2, H, W): elevation minus its per-sample minimum; slope untouched."""
    elevation = dem[:, :1]
    floor = elevation.amin(dim=(-2, -1), keepdim=True)
    return torch.cat((elevation - floor, dem[:, 1:]), dim=1)


def select_dem_gsd(grid: TokenGrid) -> Optional[float]:
    for gsd in MAP_TASK_CATALOGUE["dem"].gsd_options_m:
        if is_map_compatible(grid, gsd):
            return gsd
    return None


def map_prediction_loss(
    model: nn.Module,
    decoded_by_group: Mapping[int, torch.Tensor],
    grids: Sequence[TokenGrid],
    targets: Mapping[str, torch.Tensor],
    stats: Optional[TargetStats] = None,
) -> tuple[dict[str, torch.Tensor], list[str]]:
    """Per-task losses over all decoder tokens, averaged across compatible groups."""
    collected: dict[str, list[torch.Tensor]] = {}
    warnings: list[str] = []
    for grid in grids:
        z = decoded_by_group[grid.group_id]
        for task_name in viable_tasks(grid.group_id):
            task = MAP_TASK_CATALOGUE[task_name]
            gsd = select_dem_gsd(grid) if task_name == "dem" else task.gsd_options_m[0]
            if gsd is None or not is_map_compatible(grid, gsd):
                side = implied_target_side(grid, gsd if gsd is not None else task.gsd_options_m[0])
                warnings.append(f"MAP_TASK_INCOMPATIBLE:{task_name}@group{grid.group_id}:side{side}")
                continue
            key = map_target_key(task_name, gsd)
            if key not in targets:
                continue
            target_map = targets[key]
            if task_name == "dem":
                target_map = min_normalize_elevation(target_map.to(z.dtype))
                if stats is not None:
                    target_map = stats.standardize(key, target_map, channel_dim=1)
            side = implied_target_side(grid, gsd)
            target, valid = map_target_patches(target_map, gsd, grid, side)
            value = map_task_loss(task_name, model.project_map(z, task_name, side), target, valid)
            if value is None:
                warnings.append(f"MAP_TASK_EMPTY:{task_name}@group{grid.group_id}")
                continue
            collected.setdefault(task_name, []).append(value)
    for message in warnings:
        logger.debug(message)
    return {name: torch.stack(values).mean() for name, values in collected.items()}, warnings


def patch_contrastive_loss(
    tokens_by_group: Mapping[int, torch.Tensor],
    grids: Sequence[TokenGrid],
    landcover_maps: Mapping[str, torch.Tensor],
    partitions: int,
    temperature: float,
    device_labels: torch.Tensor,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, list[str]]:
    """tokens_by_group maps group id to (visible tokens (batch, v, dim), visible positions within the grid (v,))."""
    if partitions < 2:
        raise LossError("CONTRASTIVE_PARTITIONS_INVALID", f"Need at least 2 partitions, got {partitions}.")
    device_labels = torch.as_tensor(device_labels)
    if torch.unique(device_labels).numel() < 2:
        raise LossError("CONTRASTIVE_SINGLE_DEVICE", "The contrastive loss needs at least two virtual devices.")

    per_group: list[torch.Tensor] = []
    warnings: list[str] = []
    for grid in grids:
        if grid.group_id not in tokens_by_group:
            continue
        tokens, positions = tokens_by_group[grid.group_id]
        tasks = []
        for name in viable_tasks(grid.group_id):
            if name not in LAND_COVER_TASKS:
                continue
            gsd = MAP_TASK_CATALOGUE[name].gsd_options_m[0]
            if not is_map_compatible(grid, gsd):
                warnings.append(f"MAP_TASK_INCOMPATIBLE:{name}@group{grid.group_id}:side{implied_target_side(grid, gsd)}")
                continue
            if map_target_key(name, gsd) in landcover_maps:
                tasks.append(name)
        if not tasks:
            continue
        visible = tokens.shape[1]
        if visible < partitions:
            warnings.append(f"CONTRASTIVE_TOO_FEW_TOKENS:group{grid.group_id}")
            continue
        order = rng.permutation(visible)
        sets = [torch.as_tensor(chunk, dtype=torch.long) for chunk in np.array_split(order, partitions)]
        embeddings = torch.stack([tokens.index_select(1, chunk).mean(dim=1) for chunk in sets], dim=1)
        items = rearrange(embeddings, "b k d -> (b k) d")
        item_devices = device_labels.repeat_interleave(partitions)

        per_task: list[torch.Tensor] = []
        for task_name in tasks:
            task = MAP_TASK_CATALOGUE[task_name]
            gsd = task.gsd_options_m[0]
            side = implied_target_side(grid, gsd)
            classes, valid = map_target_patches(landcover_maps[map_target_key(task_name, gsd)], gsd, grid, side)
            classes = classes.to(torch.long)
            unknown = valid & ((classes < 0) | (classes >= task.channels))
            if bool(unknown.any()):
                raise LossError(
                    "MAP_CLASS_UNKNOWN",
                    f"Task {task_name} has {task.channels} classes but targets contain {int(classes[unknown].max())}.",
                )
            classes = classes.masked_fill(~valid.expand_as(classes), 0)
            one_hot = F.one_hot(classes, task.channels).to(torch.float64) * valid[None, :, :, None]
            patch_hist = one_hot.sum(dim=2)
            patch_hist = patch_hist / patch_hist.sum(dim=-1, keepdim=True).clamp_min(1.0)
            patch_hist = patch_hist.index_select(1, torch.as_tensor(positions, dtype=torch.long))
            set_hist = torch.stack([patch_hist.index_select(1, chunk).mean(dim=1) for chunk in sets], dim=1)
            labels = soft_labels(rearrange(set_hist, "b k c -> (b k) c"), grid.group_id, task_name)
            per_task.append(soft_contrastive(items, labels.values, item_devices, temperature))
        # Tasks average within a group, then groups average.
        per_group.append(torch.stack(per_task).mean())

    if not per_group:
        warnings.append("CONTRASTIVE_NO_VIABLE_TASKS")
        reference = next(iter(tokens_by_group.values()))[0] if tokens_by_group else torch.zeros(())
        return reference.new_zeros(()), warnings
    return torch.stack(per_group).mean(), warnings


def image_level_losses(
    predictions: Mapping[str, torch.Tensor],
    targets: Mapping[str, torch.Tensor],
    stats: Optional[TargetStats] = None,
) -> dict[str, torch.Tensor]:
    """Only families whose targets are present are returned."""
    losses: dict[str, torch.Tensor] = {}
    if "era5" in predictions and "era5" in targets:
        era5 = targets["era5"].to(predictions["era5"].dtype)
        if stats is not None:
            era5 = stats.standardize("era5", era5)
        losses["era5"] = F.mse_loss(predictions["era5"], era5)
    if "month" in predictions and "month" in targets:
        month = targets["month"].to(predictions["month"].dtype).reshape(-1, 1)
        losses["month"] = F.mse_loss(predictions["month"], cyclic_encoding(month, MONTH_PERIOD))
    if "coords" in predictions and "lat" in targets and "lon" in targets:
        dtype = predictions["coords"].dtype
        lat = targets["lat"].to(dtype).reshape(-1, 1) / LATITUDE_SCALE
        lon = cyclic_encoding(targets["lon"].to(dtype).reshape(-1, 1), LONGITUDE_PERIOD)
        losses["coords"] = F.mse_loss(predictions["coords"], torch.cat((lat, lon), dim=-1))
    if "incidence" in predictions and "incidence" in targets:
        incidence = targets["incidence"].to(predictions["incidence"].dtype).reshape(-1, 1) / INCIDENCE_SCALE
        losses["incidence"] = F.mse_loss(predictions["incidence"], incidence)
    if "orbit" in predictions and "orbit" in targets:
        losses["orbit"] = F.cross_entropy(predictions["orbit"], targets["orbit"].to(torch.long).reshape(-1))
    return losses


def fft_loss(predicted: Sequence[torch.Tensor], target: Sequence[torch.Tensor]) -> torch.Tensor:
    """Mean Fourier-magnitude L1 over per-group (batch, C, H, W) mosaics."""
    values = [
        dft2_l1(rearrange(pred, "b c h w -> b h w c"), rearrange(true.to(pred.dtype), "b c h w -> b h w c"))
        for pred, true in zip(predicted, target)
    ]
    return torch.stack(values).mean()


def total_loss(
    terms: Mapping[str, torch.Tensor | float],
    weights: LossWeights,
    step: int = 0,
    warnings: Optional[list[str]] = None,
) -> LossReport:
    unknown = set(terms) - set(LOSS_TERMS)
    if unknown:
        raise LossError("LOSS_TERM_UNKNOWN", f"Unknown loss terms: {sorted(unknown)}.")
    total: torch.Tensor | float = 0.0
    values: dict[str, float] = {}
    for term in LOSS_TERMS:
        if term not in terms:
            continue
        value = terms[term]
        total = total + weights.for_term(term) * value
        values[term] = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    absent = tuple(term for term in LOSS_TERMS if term not in terms)
    if not isinstance(total, torch.Tensor):
        total = torch.tensor(total, dtype=torch.float64)
    ensure_finite(total, "total loss")
    return LossReport(step=step, terms=values, total=total, absent=absent, warnings=list(warnings or []))


class PretextObjective(nn.Module):
    """Model plus every pretext term; forward returns a LossReport whose total is differentiable."""

    def __init__(
        self,
        model: nn.Module,
        weights: LossWeights,
        partitions: int = 4,
        temperature: float = 0.1,
        stats: Optional[TargetStats] = None,
    ) -> None:
        super().__init__()
        self.model = model
        self.weights = weights
        self.partitions = partitions
        self.temperature = temperature
        self.stats = stats

    def forward(
        self,
        sample: FootprintSample,
        plan: PatchPlan,
        mask: MaskPlan,
        device_labels: torch.Tensor,
        rng: np.random.Generator,
        step: int = 0,
    ) -> LossReport:
        output = self.model(sample, plan, mask)
        slices = output.embedded.group_slices()
        decoded = {grid.group_id: output.decoded[:, slices[grid.group_id]] for grid in output.grids}
        terms: dict[str, torch.Tensor] = {}
        warnings: list[str] = []

        reconstruction = []
        predicted_mosaics, target_mosaics = [], []
        for grid in output.grids:
            image = sample.images[grid.group_id]
            target = patchify(image.to(output.decoded.dtype), grid.patch_px)
            key = str(grid.group_id)
            plan_resize = self._resize_plan(grid.patch_px)
            value, notes = flex_mae_loss(
                decoded[grid.group_id],
                self.model.recon_weights[key],
                plan_resize,
                target,
                torch.as_tensor(mask.masks[grid.group_id], dtype=torch.bool),
                bias=self.model.recon_bias[key],
            )
            warnings.extend(f"{note}:group{grid.group_id}" for note in notes)
            if not notes:
                reconstruction.append(value)
            predicted = self.model.project_patches(decoded[grid.group_id], grid.group_id, grid.patch_px)
            predicted_mosaics.append(unpatchify(predicted, grid.rows, grid.cols, grid.patch_px))
            target_mosaics.append(unpatchify(target, grid.rows, grid.cols, grid.patch_px))
        if reconstruction:
            terms["reconstruction"] = torch.stack(reconstruction).mean()
        terms["fft"] = fft_loss(predicted_mosaics, target_mosaics)

        visible_by_group = {}
        for grid in output.grids:
            group_slice = slices[grid.group_id]
            in_group = (output.encoded.token_index >= group_slice.start) & (output.encoded.token_index < group_slice.stop)
            rows = torch.nonzero(in_group, as_tuple=False).reshape(-1)
            visible_by_group[grid.group_id] = (
                output.encoded.tokens.index_select(1, rows),
                output.encoded.token_index.index_select(0, rows) - group_slice.start,
            )
        contrastive, notes = patch_contrastive_loss(
            visible_by_group,
            output.grids,
            sample.targets,
            self.partitions,
            self.temperature,
            device_labels,
            rng,
        )
        warnings.extend(notes)
        if "CONTRASTIVE_NO_VIABLE_TASKS" not in notes:
            terms["contrastive"] = contrastive

        map_terms, notes = map_prediction_loss(self.model, decoded, output.grids, sample.targets, self.stats)
        warnings.extend(notes)
        terms.update({f"map_{name}": value for name, value in map_terms.items()})

        image_targets = dict(sample.targets)
        if not any(self.model.registry.get(grid.group_id).supports_multilook for grid in output.grids):
            image_targets.pop("incidence", None)
            image_targets.pop("orbit", None)
        terms.update(image_level_losses(output.image_predictions, image_targets, self.stats))
        return total_loss(terms, self.weights, step=step, warnings=warnings)

    def _resize_plan(self, patch_px: int) -> ResizePlan:
        return build_resize_matrix(self.model.cfg.canonical_patch, patch_px)


def stats_from_summary(summary: Mapping[str, tuple[np.ndarray, np.ndarray]]) -> TargetStats:
    return TargetStats(
        mean={name: torch.as_tensor(mean, dtype=torch.float64) for name, (mean, _) in summary.items()},
        std={name: torch.as_tensor(std, dtype=torch.float64) for name, (_, std) in summary.items()},
    )
