"""
Core infrastructure for IAV Coop Sim.

Base tool routing, configuration, error handling and run monitoring shared by
the simulation tools and the command line.
"""

from .base_tool import (
    BaseTool,
    OperationResponse,
    OperationStatus,
    OperationMetadata,
    ParameterError,
    OperationNotFoundError,
    operation_route,
)
from .config import SimConfig, config
from .error_handler import EXIT_COLLISION, EXIT_INPUT_ERROR, EXIT_OK, ErrorHandler

__all__ = [
    # Base tool infrastructure
    'BaseTool',
    'OperationResponse',
    'OperationStatus',
    'OperationMetadata',
    'ParameterError',
    'OperationNotFoundError',
    'operation_route',

    # Configuration and errors
    'SimConfig',
    'config',
    'ErrorHandler',
    'EXIT_OK',
    'EXIT_INPUT_ERROR',
    'EXIT_COLLISION',
]
