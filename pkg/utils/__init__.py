"""Utils package initialization"""
from .errors import AcceptanceError, ConfigError, ConvergenceError, LabError, ShapeMismatchError, StageError

__all__ = ['LabError', 'ConfigError', 'StageError', 'ConvergenceError', 'AcceptanceError', 'ShapeMismatchError']
