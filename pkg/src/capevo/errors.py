"""Exception hierarchy shared by every module."""


class CapevoError(Exception):
    """Base class for all package errors."""


class MissingCapability(CapevoError):
    def __init__(self, kind):
        super().__init__(f"no deployed ECM serves capability kind {kind!s}")
        self.kind = kind


class DuplicateKind(CapevoError):
    pass


class UnknownEcm(CapevoError):
    pass


class UnknownVersion(CapevoError):
    pass


class GateNotPassed(CapevoError):
    pass


class LifecycleError(CapevoError):
    """Operation is not permitted in the record's current lifecycle state."""


class InterfaceMismatch(CapevoError):
    pass


class EmptyHoldout(CapevoError):
    pass


class SinkUnavailable(CapevoError):
    pass


class InsufficientData(CapevoError):
    pass


class KindMismatch(CapevoError):
    pass


class ZeroNorm(CapevoError):
    """Relative drift is undefined because the reference vector is all zeros."""

    def __init__(self, absolute_drift: float):
        super().__init__(f"reference norm is zero (absolute drift {absolute_drift:.6g})")
        self.absolute_drift = absolute_drift


class DegenerateSample(CapevoError):
    pass


class ConfigInvalid(CapevoError):
    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.field = field
        self.line = line


class OutputDirNotEmpty(CapevoError):
    pass


class SnapshotMissing(CapevoError):
    pass


class InvariantViolation(CapevoError):
    """A runtime invariant assertion failed during an experiment."""
