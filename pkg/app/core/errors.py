from typing import Any, Dict, List


class SchedulingError(Exception):
    """Base for every error the engine raises on purpose."""
    code = "scheduling_error"

    def __init__(self, message: str, detail: Any = None):
        super().__init__(message)
        self.message = message
        self.detail = detail if detail is not None else message

    def to_dict(self) -> Dict[str, Any]:
        return {"error": self.code, "detail": self.detail}


class InstanceValidationError(SchedulingError):
    code = "invalid_instance"

    def __init__(self, errors: List[str]):
        super().__init__("; ".join(errors), detail=list(errors))
        self.errors = list(errors)


class CapacityError(SchedulingError):
    code = "capacity_exceeded"


class UnknownNameError(SchedulingError):
    code = "unknown_name"


class InfeasibleActionError(SchedulingError):
    code = "infeasible_action"


class PolicyMismatchError(SchedulingError):
    code = "policy_mismatch"


class LPSolveError(SchedulingError):
    code = "lp_failure"


class GapComputationError(SchedulingError):
    code = "division_by_zero"


class ExperimentCancelled(SchedulingError):
    code = "cancelled"
