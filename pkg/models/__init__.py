"""Models package initialization"""
from .database import Artifact, EvalRow, ImageFailure, RunManifest, StageRun, RESULT_COLUMNS

__all__ = ['RunManifest', 'StageRun', 'Artifact', 'EvalRow', 'ImageFailure', 'RESULT_COLUMNS']
