"""Multigroup multicast precoding for cell-free massive MIMO.

Modules: ``scenario`` (configs, geometry, channels), ``training`` (pilots and
over-the-air training phases), ``metrics``, ``centralized`` (CPU-side
alternating optimization), ``distributed`` (per-BS designs from bi-directional
training) and ``harness`` (Monte Carlo drivers, CSV output, CLI).
"""

from .scenario import ConfigurationError, ScenarioConfig, load_config, preset

__all__ = ["ConfigurationError", "ScenarioConfig", "load_config", "preset"]
__version__ = "0.1.0"
