"""Model-risk and capital valuation adjustments for a put under jump-to-ruin."""

from .core import Estimate, ModelParams, TimeGrid, capital_grid, hedge_grid
from .model import PathBatch, RngPolicy, simulate_paths

__all__ = ["Estimate", "ModelParams", "TimeGrid", "capital_grid", "hedge_grid", "PathBatch", "RngPolicy",
           "simulate_paths"]
__version__ = "0.1.0"
