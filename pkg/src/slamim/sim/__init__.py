"""Synthetic urban driving scenarios with known truth."""

from .scenario import (EPHEMERIS_STD, EpochBundle, IlluminationFault, MultipathFault, NoiseLevels,
                       Scenario, generate, illumination_offset_map, open_sky_scenario, plaza_preset,
                       urban_canyon_preset)
from .scene import Renderer, Scene, Wall

PRESETS = {
    "urban_canyon": urban_canyon_preset,
    "plaza": plaza_preset,
    "open_sky": open_sky_scenario,
}

from .score import RunSummary, score_run  # noqa: E402
