"""
Slice scheduler: decomposition, predictive rail choice, feedback and resets.
"""

from .cost_model import CostModel, RailChoice, RailCostState, choose_rail, feedback, predict_completion
from .load_board import GlobalLoadBoard
from .policy import HashPolicy, RoundRobinPolicy, TelemetryPolicy, make_policy
from .remote_map import map_remote
from .slicing import decompose

__all__ = [
    'CostModel', 'RailChoice', 'RailCostState', 'choose_rail', 'feedback', 'predict_completion',
    'GlobalLoadBoard', 'HashPolicy', 'RoundRobinPolicy', 'TelemetryPolicy', 'make_policy',
    'map_remote', 'decompose',
]
