"""
Standardized exception handling for the FVIN toolkit
Provides one exception hierarchy and a mapping from failures to CLI exit codes
"""
import logging
from typing import Dict, Any, Optional, Sequence

from core.constants import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_RUNTIME_ERROR

logger = logging.getLogger(__name__)


class FvinException(Exception):
    """Base exception for the FVIN toolkit"""

    def __init__(self, message: str, code: str = "UNKNOWN_ERROR", details: Optional[Dict[str, Any]] = None):
        self.message = message
        self.code = code
        self.details = details or {}
        super().__init__(self.message)


class ShapeError(FvinException):
    """Exception for operand shapes a primitive cannot combine"""

    def __init__(self, message: str, primitive: str = "unknown", shapes: Sequence[tuple] = (),
                 details: Optional[Dict[str, Any]] = None):
        details = dict(details or {})
        details.update({"primitive": primitive, "shapes": [list(s) for s in shapes]})
        super().__init__(message, "SHAPE_ERROR", details)
        self.primitive = primitive
        self.shapes = tuple(shapes)


class NonFiniteError(FvinException):
    """Exception for NaN/Inf produced by a primitive or a head"""

    def __init__(self, message: str, primitive: str = "unknown", details: Optional[Dict[str, Any]] = None):
        details = dict(details or {})
        details["primitive"] = primitive
        super().__init__(message, "NON_FINITE", details)
        self.primitive = primitive


class ConfigError(FvinException):
    """Exception for invalid configuration files or option combinations"""

    def __init__(self, message: str, field: str = "unknown", details: Optional[Dict[str, Any]] = None):
        super().__init__(message, "CONFIG_ERROR", details)
        self.field = field


class RolloutError(FvinException):
    """Exception for a failed integrator step inside a rollout"""

    def __init__(self, message: str, step: int = -1, details: Optional[Dict[str, Any]] = None):
        details = dict(details or {})
        details["step"] = step
        super().__init__(message, "ROLLOUT_ERROR", details)
        self.step = step


class TrainingError(FvinException):
    """Exception for training failures (empty dataset, non-finite loss)"""

    def __init__(self, message: str, epoch: int = -1, batch: int = -1, details: Optional[Dict[str, Any]] = None):
        details = dict(details or {})
        details.update({"epoch": epoch, "batch": batch})
        super().__init__(message, "TRAINING_ERROR", details)
        self.epoch = epoch
        self.batch = batch


class DivergenceError(TrainingError):
    """Exception raised when the training loss explodes"""

    def __init__(self, message: str, epoch: int = -1, loss: float = float("nan"),
                 details: Optional[Dict[str, Any]] = None):
        details = dict(details or {})
        details["loss"] = loss
        super().__init__(message, epoch=epoch, details=details)
        self.code = "DIVERGENCE"
        self.loss = loss


class PlanningError(FvinException):
    """Exception for CEM planning that keeps failing after replans"""

    def __init__(self, message: str, replans: int = 0, details: Optional[Dict[str, Any]] = None):
        details = dict(details or {})
        details["replans"] = replans
        super().__init__(message, "PLANNING_ERROR", details)
        self.replans = replans


class SimulationError(FvinException):
    """Exception for ground-truth integration failures"""

    def __init__(self, message: str, step: int = -1, details: Optional[Dict[str, Any]] = None):
        details = dict(details or {})
        details["step"] = step
        super().__init__(message, "SIMULATION_ERROR", details)
        self.step = step


class PersistenceError(FvinException):
    """Exception for unreadable or unwritable artifacts"""

    def __init__(self, message: str, path: str = "unknown", details: Optional[Dict[str, Any]] = None):
        details = dict(details or {})
        details["path"] = path
        super().__init__(message, "PERSISTENCE_ERROR", details)
        self.path = path


class ExceptionHandler:
    """Centralized mapping of failures to exit codes and log payloads"""

    @staticmethod
    def exit_code_for(error: Optional[BaseException]) -> int:
        """Exit code contract: 0 success, 1 configuration error, 2 runtime/numerical failure"""
        if error is None:
            return EXIT_OK
        if isinstance(error, (ConfigError, PersistenceError)):
            return EXIT_CONFIG_ERROR
        return EXIT_RUNTIME_ERROR

    @staticmethod
    def describe(error: BaseException, context: str = "unknown") -> Dict[str, Any]:
        """Build a structured description of an error for logging"""
        if isinstance(error, FvinException):
            logger.error(f"{error.code} in {context}: {error.message}")
            return {
                "error": error.message,
                "code": error.code,
                "context": context,
                "details": error.details,
            }

        logger.error(f"Unexpected error in {context}: {error}", exc_info=True)
        return {
            "error": str(error),
            "code": "INTERNAL_ERROR",
            "context": context,
            "details": {"type": type(error).__name__},
        }
