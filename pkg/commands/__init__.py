from .data import register_data_commands
from .estimate import register_estimate_commands
from .analysis import register_analysis_commands
from .oracle import register_oracle_commands

__all__ = [
    'register_data_commands',
    'register_estimate_commands',
    'register_analysis_commands',
    'register_oracle_commands',
]
