# input:  [Seeds and footprint sizes, numpy PCG64 generators, band registry and target catalogue, tensor_io container codec, torch normal quantiles]
# output: [Deterministic SyntheticTile generation (exact block-mean latent fields, bands, class maps, DEM, scalars), TileFile write/read, standardization statistics, and batching into FootprintSample]
# pos:    [Synthetic data surrogate feeding the training harness, the gen-tiles CLI, and the loss tests]
#
# ⚠️ When this file is updated:
#    1. Update these header comments
#    2. Update the INDEX.md of the folder this file belongs to

from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import torch

from errors import FlexGeoError
from geometry import (
    BandRegistry,
    FootprintSample,
    default_band_registry,
    multilook,
    pixels_for_footprint,
    radiance_to_reflectance,
)
from sampler import make_rng
from targets import ERA5_COUNT, ERA5_VARIABLES, MAP_TASK_CATALOGUE, map_target_key
from tensor_io import (
    ContainerFormatError,
    read_container_header,
    read_records,
    write_container_header,
    write_records,
)

logger = logging.getLogger(__name__)

TILE_MAGIC = b"FGTL"
TILE_VERSION = 1
BASE_GSD_M = 10.0
WAVES_PER_LATENT = 6
WAVELENGTH_RANGE_M = (200.0, 5000.0)
LATENTS = ("primary", "secondary")
ELEVATION_BASE_M = 500.0
ELEVATION_RELIEF_M = 300.0
INCIDENCE_RANGE_DEG = (29.0, 46.0)
SUN_ZENITH_RANGE_DEG = (20.0, 70.0)
STD_FLOOR = 1e-6

# Rough physical scale of each pseudo-ERA5 variable: (offset, spread).
ERA5_SCALES = {
    "1": (0.3, 0.1),
    "K": (285.0, 8.0),
    "m": (0.01, 0.005),
    "Pa": (95000.0, 2000.0),
}


class TileFormatError(FlexGeoError):
    pass


@dataclass(frozen=True)
class LatentField:
    """Sum of plane waves a_k sin(kx x + ky y + phi_k) with sum(a_k²) = 2, so unit variance."""

    amplitudes: np.ndarray
    wavevectors: np.ndarray  # (waves, 2) rad/m
    phases: np.ndarray

    def block_mean(self, gsd_m: float, pixels: int, origin_m: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
        """Exact mean over the 10 m sub-pixel centres of every gsd_m pixel, shape (pixels, pixels)."""
        ratio = int(round(gsd_m / BASE_GSD_M))
        if ratio < 1 or abs(gsd_m - ratio * BASE_GSD_M) > 1e-9:
            raise TileFormatError("LATENT_GSD_INVALID", f"GSD {gsd_m} m is not a multiple of {BASE_GSD_M} m.")
        edges = np.arange(pixels, dtype=np.float64) * gsd_m
        field_values = np.zeros((pixels, pixels), dtype=np.float64)
        for amplitude, (kx, ky), phase in zip(self.amplitudes, self.wavevectors, self.phases):
            ex = _axis_factor(kx, edges + origin_m[0], ratio)
            ey = _axis_factor(ky, edges + origin_m[1], ratio)
            field_values += amplitude * np.imag(np.exp(1j * phase) * np.outer(ey, ex))
        return field_values


def _axis_factor(k: float, edges: np.ndarray, ratio: int) -> np.ndarray:
    # mean_j exp(i k (edge + (j + 0.5) * base)) over j < ratio, in closed form.
    step = k * BASE_GSD_M
    if ratio == 1 or abs(step) < 1e-12:
        kernel = 1.0 + 0j
    else:
        kernel = (1.0 - np.exp(1j * step * ratio)) / (ratio * (1.0 - np.exp(1j * step)))
    return np.exp(1j * k * (edges + 0.5 * BASE_GSD_M)) * kernel


@dataclass
class SyntheticTile:
    seed: int
    footprint_m: float
    gsd_m: dict[int, float]
    images: dict[int, np.ndarray]  # (bands, H, W) float64
    maps: dict[str, np.ndarray]  # class maps (H, W) int64, DEM (2, H, W) float64
    scalars: dict[str, np.ndarray] = field(default_factory=dict)
    origin_m: tuple[float, float] = (0.0, 0.0)


def latent_fields(seed: int) -> dict[str, LatentField]:
    rng = make_rng(seed)
    fields = {}
    low, high = WAVELENGTH_RANGE_M
    for name in LATENTS:
        weights = rng.uniform(0.2, 1.0, size=WAVES_PER_LATENT)
        amplitudes = np.sqrt(2.0 * weights / weights.sum())
        wavelengths = np.exp(rng.uniform(math.log(low), math.log(high), size=WAVES_PER_LATENT))
        angles = rng.uniform(0.0, 2.0 * math.pi, size=WAVES_PER_LATENT)
        wavevectors = (2.0 * math.pi / wavelengths)[:, None] * np.stack((np.cos(angles), np.sin(angles)), axis=-1)
        phases = rng.uniform(0.0, 2.0 * math.pi, size=WAVES_PER_LATENT)
        fields[name] = LatentField(amplitudes=amplitudes, wavevectors=wavevectors, phases=phases)
    return fields


def _band_coefficients(seed: int, group_id: int, band_count: int) -> np.ndarray:
    rng = make_rng([seed, group_id])
    gain = rng.uniform(0.5, 1.0, size=band_count)
    mix = rng.uniform(-0.5, 0.5, size=band_count)
    offset = rng.uniform(-0.5, 0.5, size=band_count)
    return np.stack((gain, mix, offset), axis=-1)


def class_thresholds(classes: int) -> np.ndarray:
    """Standard-normal quantiles splitting a unit-variance latent into equiprobable classes."""
    probabilities = torch.arange(1, classes, dtype=torch.float64) / classes
    return torch.special.ndtri(probabilities).numpy()


def slope_from_elevation(elevation: np.ndarray, gsd_m: float) -> np.ndarray:
    if min(elevation.shape) < 2:
        return np.zeros_like(elevation)
    grad_y, grad_x = np.gradient(elevation, gsd_m)
    return np.hypot(grad_x, grad_y)


def _synthesize_group_image(
    seed: int,
    group_id: int,
    band_count: int,
    sensor: str,
    primary: np.ndarray,
    secondary: np.ndarray,
    sun_zenith_deg: float,
) -> np.ndarray:
    coefficients = _band_coefficients(seed, group_id, band_count)
    image = (
        coefficients[:, 0, None, None] * primary[None]
        + coefficients[:, 1, None, None] * secondary[None]
        + coefficients[:, 2, None, None]
    )
    if sensor.startswith("Sentinel-3"):
        # Sentinel-3 bands arrive as TOA radiance and go through the reflectance conversion.
        irradiance = make_rng([seed, group_id, 3]).uniform(800.0, 1900.0, size=band_count)
        radiance = image * irradiance[:, None, None] * math.cos(math.radians(sun_zenith_deg)) / math.pi
        image = radiance_to_reflectance(
            torch.from_numpy(radiance), torch.from_numpy(irradiance), sun_zenith_deg
        ).numpy()
    return image


def generate_tile(
    seed: int,
    footprint_m: float,
    registry: Optional[BandRegistry] = None,
    group_ids: Optional[Sequence[int]] = None,
) -> SyntheticTile:
    registry = registry or default_band_registry()
    if group_ids is not None:
        registry = registry.subset(group_ids)
    fields = latent_fields(seed)
    scalar_rng = make_rng([seed, 0])
    sun_zenith_deg = float(scalar_rng.uniform(*SUN_ZENITH_RANGE_DEG))

    images: dict[int, np.ndarray] = {}
    gsd: dict[int, float] = {}
    for group in registry:
        pixels = pixels_for_footprint(footprint_m, group.gsd_m)
        if pixels < 1:
            logger.debug("Group %s has no pixels over %.1f m", group.group_id, footprint_m)
            continue
        primary = fields["primary"].block_mean(group.gsd_m, pixels)
        secondary = fields["secondary"].block_mean(group.gsd_m, pixels)
        images[group.group_id] = _synthesize_group_image(
            seed, group.group_id, group.band_count, group.sensor, primary, secondary, sun_zenith_deg
        )
        gsd[group.group_id] = group.gsd_m

    maps: dict[str, np.ndarray] = {}
    for name, task in MAP_TASK_CATALOGUE.items():
        for task_gsd in task.gsd_options_m:
            pixels = pixels_for_footprint(footprint_m, task_gsd)
            if pixels < 1:
                continue
            latent = fields[task.latent].block_mean(task_gsd, pixels)
            if task.is_classification:
                maps[map_target_key(name, task_gsd)] = np.searchsorted(
                    class_thresholds(task.channels), latent
                ).astype(np.int64)
            else:
                elevation = ELEVATION_BASE_M + ELEVATION_RELIEF_M * latent
                maps[map_target_key(name, task_gsd)] = np.stack(
                    (elevation, slope_from_elevation(elevation, task_gsd))
                )

    coarse = fields["primary"].block_mean(BASE_GSD_M * 6, max(1, pixels_for_footprint(footprint_m, BASE_GSD_M * 6)))
    coarse_secondary = fields["secondary"].block_mean(
        BASE_GSD_M * 6, max(1, pixels_for_footprint(footprint_m, BASE_GSD_M * 6))
    )
    era5 = np.empty(ERA5_COUNT, dtype=np.float64)
    mixing = make_rng(7).normal(size=(ERA5_COUNT, 2))
    for index, (_, unit) in enumerate(ERA5_VARIABLES):
        offset, spread = ERA5_SCALES[unit]
        drive = mixing[index, 0] * coarse.mean() + mixing[index, 1] * coarse_secondary.mean()
        era5[index] = offset + spread * (drive + 0.1 * scalar_rng.normal())

    scalars = {
        "era5": era5,
        "lat": np.array([scalar_rng.uniform(-80.0, 80.0)]),
        "lon": np.array([scalar_rng.uniform(-180.0, 180.0)]),
        "month": np.array([float(scalar_rng.integers(1, 13))]),
        "incidence": np.array([scalar_rng.uniform(*INCIDENCE_RANGE_DEG)]),
        "orbit": np.array([int(scalar_rng.integers(0, 2))], dtype=np.int64),
        "sun_zenith": np.array([sun_zenith_deg]),
    }
    return SyntheticTile(seed=seed, footprint_m=float(footprint_m), gsd_m=gsd, images=images, maps=maps, scalars=scalars)


def standardization_stats(tiles: Iterable[SyntheticTile]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-target mean/std pooled over tiles: ERA5 per variable, DEM per channel after min-normalization."""
    sums: dict[str, list[np.ndarray]] = {}
    squares: dict[str, list[np.ndarray]] = {}
    counts: dict[str, int] = {}

    def accumulate(name: str, values: np.ndarray) -> None:
        # values: (samples, channels)
        sums.setdefault(name, []).append(values.sum(axis=0))
        squares.setdefault(name, []).append((values * values).sum(axis=0))
        counts[name] = counts.get(name, 0) + values.shape[0]

    for tile in tiles:
        if "era5" in tile.scalars:
            accumulate("era5", tile.scalars["era5"][None, :])
        for key, values in tile.maps.items():
            if not key.startswith("map/dem@"):
                continue
            elevation = values[0] - values[0].min()
            accumulate(key, np.stack((elevation.reshape(-1), values[1].reshape(-1)), axis=-1))

    summary = {}
    for name, parts in sums.items():
        # fsum keeps the result independent of tile order.
        total = np.array([math.fsum(column) for column in np.stack(parts, axis=-1)])
        total_sq = np.array([math.fsum(column) for column in np.stack(squares[name], axis=-1)])
        mean = total / counts[name]
        variance = np.maximum(total_sq / counts[name] - mean * mean, 0.0)
        summary[name] = (mean, np.maximum(np.sqrt(variance), STD_FLOOR))
    return summary


def stack_tiles(
    tiles: Sequence[SyntheticTile],
    group_ids: Sequence[int],
    gsd_overrides: Optional[Mapping[int, float]] = None,
    dtype: torch.dtype = torch.float32,
) -> FootprintSample:
    """Batches tiles of one footprint; SAR groups are multi-looked to their override GSD."""
    if not tiles:
        raise TileFormatError("TILE_BATCH_EMPTY", "At least one tile is required to build a batch.")
    footprint = tiles[0].footprint_m
    if any(abs(tile.footprint_m - footprint) > 1e-9 for tile in tiles):
        raise TileFormatError("TILE_FOOTPRINT_MISMATCH", "All tiles in a batch must share one footprint.")
    overrides = dict(gsd_overrides or {})
    images: dict[int, torch.Tensor] = {}
    gsd: dict[int, float] = {}
    for group_id in group_ids:
        if any(group_id not in tile.images for tile in tiles):
            continue
        image = torch.from_numpy(np.stack([tile.images[group_id] for tile in tiles]))
        native = tiles[0].gsd_m[group_id]
        target_gsd = overrides.get(group_id, native)
        if target_gsd != native:
            image = multilook(image, native, target_gsd)
        images[group_id] = image.to(dtype)
        gsd[group_id] = target_gsd

    targets: dict[str, torch.Tensor] = {}
    for key in tiles[0].maps:
        stacked = torch.from_numpy(np.stack([tile.maps[key] for tile in tiles]))
        targets[key] = stacked if stacked.dtype == torch.int64 else stacked.to(dtype)
    for key in tiles[0].scalars:
        stacked = torch.from_numpy(np.stack([tile.scalars[key] for tile in tiles]))
        if key != "era5":
            stacked = stacked.reshape(-1)
        targets[key] = stacked if stacked.dtype == torch.int64 else stacked.to(dtype)
    return FootprintSample(ground_cover_m=footprint, images=images, gsd_m=gsd, origin_m=tiles[0].origin_m, targets=targets)


def write_tile(path: Path, tile: SyntheticTile) -> None:
    header = {
        "kind": "flexgeo-tile",
        "seed": tile.seed,
        "footprint_m": tile.footprint_m,
        "origin_m": list(tile.origin_m),
        "groups": [
            {"id": group_id, "gsd_m": tile.gsd_m[group_id], "bands": int(tile.images[group_id].shape[0])}
            for group_id in sorted(tile.images)
        ],
    }
    records = [(f"image/{group_id}", tile.images[group_id]) for group_id in sorted(tile.images)]
    records += [(key, tile.maps[key]) for key in sorted(tile.maps)]
    records += [(f"scalar/{key}", tile.scalars[key]) for key in sorted(tile.scalars)]
    with Path(path).open("wb") as handle:
        write_container_header(handle, TILE_MAGIC, TILE_VERSION, header)
        write_records(handle, records)


def read_tile(path: Path) -> SyntheticTile:
    try:
        with Path(path).open("rb") as handle:
            header = read_container_header(handle, TILE_MAGIC, TILE_VERSION)
            records = read_records(handle)
    except ContainerFormatError as exc:
        raise TileFormatError(exc.code.replace("CONTAINER", "TILE"), f"{path}: {exc.message}") from exc

    try:
        groups = {int(entry["id"]): float(entry["gsd_m"]) for entry in header["groups"]}
        tile = SyntheticTile(
            seed=int(header["seed"]),
            footprint_m=float(header["footprint_m"]),
            gsd_m=groups,
            images={group_id: records[f"image/{group_id}"] for group_id in groups},
            maps={name: values for name, values in records.items() if name.startswith("map/")},
            scalars={name[len("scalar/"):]: values for name, values in records.items() if name.startswith("scalar/")},
            origin_m=tuple(header.get("origin_m", (0.0, 0.0))),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise TileFormatError("TILE_HEADER_INVALID", f"{path}: tile header is missing or malformed ({exc}).") from exc
    return tile


def tile_filename(index: int, seed: int) -> str:
    return f"tile_{index:05d}_seed{seed}.fgt"
