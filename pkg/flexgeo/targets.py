# input:  [Land-cover/DEM product definitions, ERA5-Land variable catalogue, band-group ids]
# output: [MapTask catalogue with class counts and native GSDs, viable task table per band group, ERA5 variable names, and image-level target periods]
# pos:    [Static pretext-target catalogue shared by synthetic data generation, decoder map heads, and loss assembly]
#
# ⚠️ When this file is updated:
#    1. Update these header comments
#    2. Update the INDEX.md of the folder this file belongs to

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

MONTH_PERIOD = 12.0
LONGITUDE_PERIOD = 360.0
LATITUDE_SCALE = 90.0
INCIDENCE_SCALE = 90.0
ORBIT_CLASSES = 2
LABEL_SMOOTHING = 0.1
IGNORE_INDEX = -100

ERA5_VARIABLES = (
    ("volumetric_soil_water_layer_1", "1"),
    ("volumetric_soil_water_layer_4", "1"),
    ("skin_temperature", "K"),
    ("dewpoint_temperature_2m", "K"),
    ("temperature_2m", "K"),
    ("soil_temperature_level_1", "K"),
    ("soil_temperature_level_4", "K"),
    ("snow_cover", "1"),
    ("snow_depth_water_equivalent", "m"),
    ("snowfall_sum", "m"),
    ("snow_depth", "m"),
    ("leaf_area_index_high_vegetation", "1"),
    ("leaf_area_index_low_vegetation", "1"),
    ("surface_pressure", "Pa"),
    ("total_precipitation_sum", "m"),
    ("surface_runoff_sum", "m"),
    ("total_evaporation_sum", "m"),
)
ERA5_COUNT = len(ERA5_VARIABLES)


@dataclass(frozen=True)
class MapTask:
    name: str
    kind: Literal["classification", "regression"]
    channels: int
    gsd_options_m: tuple[float, ...]
    viable_groups: tuple[int, ...]
    latent: Literal["primary", "secondary"] = "primary"

    @property
    def is_classification(self) -> bool:
        return self.kind == "classification"


MAP_TASK_CATALOGUE: dict[str, MapTask] = {
    "wc": MapTask("wc", "classification", 11, (10.0,), (1, 2, 3, 4, 5)),
    "scl": MapTask("scl", "classification", 12, (20.0,), (1, 2, 3, 4, 5), latent="secondary"),
    "gc": MapTask("gc", "classification", 22, (300.0,), (6, 7, 8)),
    "mcd": MapTask("mcd", "classification", 17, (500.0,), (9, 10), latent="secondary"),
    "dem": MapTask("dem", "regression", 2, (10.0, 60.0), (1, 2, 3, 4, 5)),
}

LAND_COVER_TASKS = ("wc", "scl", "gc", "mcd")


def viable_tasks(group_id: int) -> tuple[str, ...]:
    return tuple(name for name, task in MAP_TASK_CATALOGUE.items() if group_id in task.viable_groups)


def map_target_key(task_name: str, gsd_m: float) -> str:
    return f"map/{task_name}@{gsd_m:g}"
