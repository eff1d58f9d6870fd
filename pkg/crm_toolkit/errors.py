# errors.py
"""Exception hierarchy shared by the library, the CLI and the HTTP surface."""


class CrmError(Exception):
    """Base error. `exit_code` is what the CLI returns when it escapes."""

    exit_code = 1


# ---------------------------
# Input / structure errors
# ---------------------------
class ConfigError(CrmError, ValueError):
    exit_code = 2


class InvalidGroupError(CrmError, ValueError):
    exit_code = 2


class DecodeError(CrmError, ValueError):
    exit_code = 2


class EmptySupportError(CrmError, ValueError):
    exit_code = 2


class UnsupportedArityError(CrmError, ValueError):
    exit_code = 2


class DimensionTooSmallError(CrmError, ValueError):
    exit_code = 2


class DimensionMismatchError(CrmError, ValueError):
    exit_code = 2


class EnumerationTooLargeError(CrmError, ValueError):
    exit_code = 2


class LabelOutsideSupportError(CrmError, ValueError):
    exit_code = 2


class SupportMismatchError(CrmError, ValueError):
    exit_code = 2


# ---------------------------
# Numerical / acceptance errors
# ---------------------------
class TrainingDivergedError(CrmError, ArithmeticError):
    exit_code = 3

    def __init__(self, step: int, loss: float):
        super().__init__(f"Training diverged at step {step} (loss={loss!r})")
        self.step = step
        self.loss = loss


class AcceptanceCheckError(CrmError):
    exit_code = 4

    def __init__(self, failed):
        names = ", ".join(failed)
        super().__init__(f"Acceptance checks failed: {names}")
        self.failed = list(failed)
