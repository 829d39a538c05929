"""
Tools package for IAV Coop Sim

Contains the grouped tool implementations used by the command line.
"""

from .simulation_manager import simulation_manager, simulation_manager_tool

__all__ = [
    "simulation_manager",
    "simulation_manager_tool",
]
