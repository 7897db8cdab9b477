"""Exception types raised across the toolkit."""


class SBProbeError(Exception):
    """Base class for toolkit errors."""


class ContractViolation(SBProbeError, ValueError):
    """An input or backend output broke an operation's contract."""


class ScheduleError(SBProbeError, ValueError):
    pass


class AggregationError(SBProbeError, ValueError):
    pass


class ConfigurationError(SBProbeError, ValueError):
    pass


class NotReadyError(SBProbeError, RuntimeError):
    """A learned component was used before it was trained or loaded."""


class CapabilityError(SBProbeError, TypeError):
    """A component lacks a capability the caller requires (e.g. input gradients)."""


class EmptyFaceError(SBProbeError, ValueError):
    pass


class BackendError(SBProbeError, RuntimeError):
    def __init__(self, backend_id: str, message: str):
        super().__init__(f"[{backend_id}] {message}")
        self.backend_id = backend_id


class PipelineStageError(SBProbeError, RuntimeError):
    def __init__(self, pipeline: str, stage: int, cause: BaseException):
        super().__init__(f"pipeline {pipeline!r} failed at stage {stage}: {cause}")
        self.pipeline = pipeline
        self.stage = stage
        self.cause = cause


class MetricError(SBProbeError, ValueError):
    """A metric is undefined for the given inputs."""


class SplitError(SBProbeError, ValueError):
    pass


class TrainingError(SBProbeError, ValueError):
    pass
