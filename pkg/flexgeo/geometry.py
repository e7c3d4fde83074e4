# input:  [Band-group definitions, plain-text registry files, footprint sizes in meters, torch image tensors, einops block reductions]
# output: [BandGroup/BandRegistry/TokenGrid/FootprintSample types, default 10-group registry, registry file IO, patch-centre coordinates, SAR multi-looking, and radiance-to-reflectance conversion]
# pos:    [Sensor and grid geometry layer consumed by the sampler, positional encodings, model embedding, and synthetic tile generation]
#
# ⚠️ When this file is updated:
#    1. Update these header comments
#    2. Update the INDEX.md of the folder this file belongs to

from __future__ import annotations

from dataclasses import dataclass, field
import math
from pathlib import Path
from typing import Iterable, Iterator, Literal

import torch
from einops import reduce

from errors import FlexGeoError

BandKind = Literal["reflectance", "sar", "thermal", "synthetic"]
BAND_KINDS = ("reflectance", "sar", "thermal", "synthetic")

MULTILOOK_GSD_LADDER = (10.0, 20.0, 30.0, 60.0, 120.0, 180.0, 240.0)
MODEL_PATCH_RANGE = (4, 32)
GSD_RATIO_TOLERANCE = 1e-9

DEFAULT_BAND_GROUPS = (
    (1, "Sentinel-2", ("Red", "Green", "Blue", "NIR"), 10.0, "reflectance"),
    (2, "Sentinel-2", ("RE1", "RE2", "RE3", "RE4", "SWIR1", "SWIR2"), 20.0, "reflectance"),
    (3, "Sentinel-2", ("CoastAerosol", "WaterVapor"), 60.0, "reflectance"),
    (4, "Sentinel-1", ("IW-VH", "IW-VV", "EW-VH", "EW-VV"), 10.0, "sar"),
    (5, "Sentinel-1", ("IW-HV", "IW-HH", "EW-HV", "EW-HH"), 10.0, "sar"),
    (6, "Sentinel-3 OLCI", ("Oa01", "Oa02", "Oa03", "Oa04", "Oa05", "Oa06", "Oa07"), 240.0, "reflectance"),
    (7, "Sentinel-3 OLCI", ("Oa08", "Oa09", "Oa10", "Oa11", "Oa12", "Oa13", "Oa14"), 240.0, "reflectance"),
    (8, "Sentinel-3 OLCI", ("Oa15", "Oa16", "Oa17", "Oa18", "Oa19", "Oa20", "Oa21"), 240.0, "reflectance"),
    (9, "Sentinel-3 SLSTR", ("S1", "S2", "S3", "S4", "S5", "S6"), 480.0, "reflectance"),
    (10, "Sentinel-3 SLSTR", ("S7", "S8", "S9"), 960.0, "thermal"),
)


class GeometryError(FlexGeoError):
    pass


@dataclass(frozen=True)
class BandGroup:
    group_id: int
    sensor: str
    bands: tuple[str, ...]
    gsd_m: float
    kind: BandKind

    def __post_init__(self) -> None:
        if not self.bands:
            raise GeometryError("BAND_GROUP_EMPTY", f"Band group {self.group_id} must list at least one band.")
        if not math.isfinite(self.gsd_m) or self.gsd_m <= 0:
            raise GeometryError("BAND_GROUP_GSD_INVALID", f"Band group {self.group_id} needs a positive GSD.")
        if self.kind not in BAND_KINDS:
            raise GeometryError("BAND_GROUP_KIND_INVALID", f"Unknown band kind '{self.kind}'.")

    @property
    def band_count(self) -> int:
        return len(self.bands)

    @property
    def supports_multilook(self) -> bool:
        return self.kind == "sar"


@dataclass(frozen=True)
class BandRegistry:
    groups: tuple[BandGroup, ...]

    def __post_init__(self) -> None:
        seen: set[int] = set()
        for group in self.groups:
            if group.group_id in seen:
                raise GeometryError("BAND_GROUP_DUPLICATE", f"Band group id {group.group_id} appears twice.")
            seen.add(group.group_id)

    def __iter__(self) -> Iterator[BandGroup]:
        return iter(self.groups)

    def __len__(self) -> int:
        return len(self.groups)

    def get(self, group_id: int) -> BandGroup:
        for group in self.groups:
            if group.group_id == group_id:
                return group
        raise GeometryError("BAND_GROUP_NOT_FOUND", f"Band group {group_id} is not registered.")

    def subset(self, group_ids: Iterable[int]) -> "BandRegistry":
        return BandRegistry(groups=tuple(self.get(group_id) for group_id in group_ids))

    @property
    def group_ids(self) -> tuple[int, ...]:
        return tuple(group.group_id for group in self.groups)


@dataclass(frozen=True)
class TokenGrid:
    group_id: int
    patch_px: int
    rows: int
    cols: int
    gsd_m: float
    origin_m: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise GeometryError("TOKEN_GRID_EMPTY", "Token grids need at least one row and one column.")
        if self.patch_px < 1:
            raise GeometryError("TOKEN_GRID_PATCH_INVALID", "Patch size must be positive.")
        if not math.isfinite(self.gsd_m) or self.gsd_m <= 0:
            raise GeometryError("TOKEN_GRID_GSD_INVALID", "Token grid GSD must be positive.")

    @property
    def token_count(self) -> int:
        return self.rows * self.cols

    @property
    def patch_footprint_m(self) -> float:
        return self.patch_px * self.gsd_m

    def require_model_patch(self) -> None:
        low, high = MODEL_PATCH_RANGE
        if not low <= self.patch_px <= high:
            raise GeometryError(
                "TOKEN_GRID_PATCH_OUT_OF_RANGE",
                f"Model inputs need patch sizes in [{low}, {high}], got {self.patch_px}.",
            )


@dataclass(frozen=True)
class FootprintSample:
    """Aligned pixel arrays for one square footprint; images are (batch, bands, H, W)."""

    ground_cover_m: float
    images: dict[int, torch.Tensor]
    gsd_m: dict[int, float]
    origin_m: tuple[float, float] = (0.0, 0.0)
    targets: dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for group_id, image in self.images.items():
            if group_id not in self.gsd_m:
                raise GeometryError("FOOTPRINT_GSD_MISSING", f"Group {group_id} has pixels but no GSD.")
            expected = pixels_for_footprint(self.ground_cover_m, self.gsd_m[group_id])
            if image.dim() != 4 or image.shape[-2] != expected or image.shape[-1] != expected:
                raise GeometryError(
                    "FOOTPRINT_PIXEL_MISMATCH",
                    f"Group {group_id} must be (batch, bands, {expected}, {expected}), got {tuple(image.shape)}.",
                )

    @property
    def batch_size(self) -> int:
        for image in self.images.values():
            return int(image.shape[0])
        return 0


def default_band_registry() -> BandRegistry:
    return BandRegistry(
        groups=tuple(
            BandGroup(group_id=group_id, sensor=sensor, bands=bands, gsd_m=gsd, kind=kind)
            for group_id, sensor, bands, gsd, kind in DEFAULT_BAND_GROUPS
        )
    )


def save_band_registry(registry: BandRegistry, path: Path) -> None:
    lines = ["# id | sensor | bands | gsd_m | kind"]
    for group in registry:
        lines.append(
            f"{group.group_id} | {group.sensor} | {','.join(group.bands)} | {group.gsd_m:g} | {group.kind}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_band_registry(path: Path) -> BandRegistry:
    if not Path(path).exists():
        raise GeometryError("REGISTRY_NOT_FOUND", f"Band registry file {path} does not exist.")
    groups: list[BandGroup] = []
    for line_number, raw_line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [part.strip() for part in line.split("|")]
        if len(parts) != 5:
            raise GeometryError(
                "REGISTRY_LINE_INVALID",
                f"{path}:{line_number} must have 5 '|'-separated fields, got {len(parts)}.",
            )
        raw_id, sensor, raw_bands, raw_gsd, kind = parts
        try:
            group_id = int(raw_id)
            gsd = float(raw_gsd)
        except ValueError as exc:
            raise GeometryError("REGISTRY_LINE_INVALID", f"{path}:{line_number} has a non-numeric id or GSD.") from exc
        bands = tuple(band.strip() for band in raw_bands.split(",") if band.strip())
        groups.append(BandGroup(group_id=group_id, sensor=sensor, bands=bands, gsd_m=gsd, kind=kind))
    return BandRegistry(groups=tuple(groups))


def pixels_for_footprint(ground_cover_m: float, gsd_m: float) -> int:
    # Trailing partial pixels are dropped.
    return int(math.floor(ground_cover_m / gsd_m + GSD_RATIO_TOLERANCE))


def grid_for_group(
    group_id: int,
    ground_cover_m: float,
    patch_px: int,
    gsd_m: float,
    origin_m: tuple[float, float] = (0.0, 0.0),
) -> TokenGrid:
    pixels = pixels_for_footprint(ground_cover_m, gsd_m)
    if pixels < 1:
        raise GeometryError("FOOTPRINT_TOO_SMALL", f"A {ground_cover_m} m footprint holds no {gsd_m} m pixels.")
    side = math.ceil(pixels / patch_px)
    return TokenGrid(group_id=group_id, patch_px=patch_px, rows=side, cols=side, gsd_m=gsd_m, origin_m=origin_m)


def patch_centers(grid: TokenGrid) -> torch.Tensor:
    """(rows*cols, 2) patch-centre (x, y) coordinates in meters, row-major."""
    step = grid.patch_footprint_m
    cols = (torch.arange(grid.cols, dtype=torch.float64) + 0.5) * step + grid.origin_m[0]
    rows = (torch.arange(grid.rows, dtype=torch.float64) + 0.5) * step + grid.origin_m[1]
    yy, xx = torch.meshgrid(rows, cols, indexing="ij")
    return torch.stack((xx.reshape(-1), yy.reshape(-1)), dim=-1)


def _integer_ratio(gsd_src: float, gsd_dst: float) -> int:
    ratio = gsd_dst / gsd_src
    rounded = round(ratio)
    if rounded < 1 or abs(ratio - rounded) > GSD_RATIO_TOLERANCE:
        raise GeometryError(
            "MULTILOOK_RATIO_INVALID",
            f"Target GSD {gsd_dst} m must be an integer multiple of source GSD {gsd_src} m.",
        )
    return int(rounded)


def multilook(image: torch.Tensor, gsd_src: float, gsd_dst: float) -> torch.Tensor:
    """Non-overlapping block mean over the last two axes."""
    if not any(abs(gsd_dst - rung) <= GSD_RATIO_TOLERANCE for rung in MULTILOOK_GSD_LADDER):
        raise GeometryError(
            "MULTILOOK_GSD_UNSUPPORTED",
            f"Multi-looked GSD must be one of {MULTILOOK_GSD_LADDER}, got {gsd_dst}.",
        )
    block = _integer_ratio(gsd_src, gsd_dst)
    if block == 1:
        return image
    height, width = image.shape[-2], image.shape[-1]
    if block > height or block > width:
        raise GeometryError(
            "MULTILOOK_BLOCK_TOO_LARGE",
            f"A {block}x{block} block does not fit a {height}x{width} image.",
        )
    cropped = image[..., : (height // block) * block, : (width // block) * block]
    return reduce(cropped, "... (h a) (w b) -> ... h w", "mean", a=block, b=block)


def radiance_to_reflectance(
    radiance: torch.Tensor,
    solar_irradiance: torch.Tensor,
    sun_zenith_deg: float,
) -> torch.Tensor:
    """Top-of-atmosphere reflectance; the band axis is -3 for images and -1 otherwise."""
    if not 0.0 <= sun_zenith_deg < 90.0:
        raise GeometryError("SUN_ZENITH_INVALID", f"Sun zenith must be in [0, 90) degrees, got {sun_zenith_deg}.")
    irradiance = torch.as_tensor(solar_irradiance, dtype=radiance.dtype)
    if radiance.dim() >= 3:
        irradiance = irradiance.reshape(-1, 1, 1)
    return math.pi * radiance / (irradiance * math.cos(math.radians(sun_zenith_deg)))
