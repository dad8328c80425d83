"""Experiment configuration, orchestration and the command-line interface."""

from pli_lab.harness.config import ExperimentConfig
from pli_lab.harness.pipeline import prepare, report, run, tile_grid

__all__ = ["ExperimentConfig", "prepare", "report", "run", "tile_grid"]
