"""
Exception hierarchy for the watermark lab
Each class maps to a CLI exit code
"""


class LabError(Exception):
    """Base class for all lab errors"""

    exit_code = 1


class ConfigError(LabError):
    """Invalid or incomplete experiment configuration"""

    exit_code = 2


class StageError(LabError):
    """A pipeline stage failed"""

    exit_code = 3

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


class ConvergenceError(StageError):
    """A trainer finished with its held-out metric above threshold"""

    def __init__(self, stage: str, metric: str, value: float, threshold: float):
        self.metric = metric
        self.value = value
        self.threshold = threshold
        super().__init__(stage, f"{metric}={value:.4f} above threshold {threshold:.4f}")


class AcceptanceError(LabError):
    """One or more acceptance checks failed in eval --check mode"""

    exit_code = 4


class ShapeMismatchError(ValueError):
    """Array shapes do not agree"""
