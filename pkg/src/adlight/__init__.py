"""Universal traffic-signal control: a seeded intersection simulator, a
movement-feature PPO agent with movement-shuffle augmentation, classical
baselines and an experiment harness."""

from .microsim import DURATIONS_S, SimWorld
from .neuralnet import NetworkParams, init_params, load_checkpoint, save_checkpoint
from .topology import ScenarioSpec, builtin_catalog, catalog_by_id, load_scenario, parse_scenario, rotate

__version__ = "0.1.0"

__all__ = [
    "DURATIONS_S",
    "NetworkParams",
    "ScenarioSpec",
    "SimWorld",
    "builtin_catalog",
    "catalog_by_id",
    "init_params",
    "load_checkpoint",
    "load_scenario",
    "parse_scenario",
    "rotate",
    "save_checkpoint",
]
