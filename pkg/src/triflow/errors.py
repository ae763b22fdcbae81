"""
Exceptions raised by triflow. The CLI turns them into one-line diagnostics.
"""


class TriflowError(Exception):
    pass


class ShapeError(TriflowError, ValueError):
    pass


class FlowFormatError(TriflowError, ValueError):
    pass


class EmptySelectionError(TriflowError, ValueError):
    pass


class ConfigError(TriflowError, ValueError):
    pass


class SceneError(TriflowError, ValueError):
    pass


class CheckpointError(TriflowError):
    pass


class TrainingError(TriflowError):
    pass
