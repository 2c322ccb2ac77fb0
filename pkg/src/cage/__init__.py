"""CAGE text-vision fusion, cost model, UAV label engine and detection evaluator."""

from .fusion import CageActivations, CageConfig, CageParams, backward, forward, init_params

__all__ = ["CageActivations", "CageConfig", "CageParams", "backward", "forward", "init_params"]
__version__ = "0.1.0"
