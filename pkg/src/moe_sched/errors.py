from __future__ import annotations

from collections.abc import Sequence
from typing import NamedTuple


class Violation(NamedTuple):
    field: str
    message: str

    def __str__(self) -> str:
        return f"{self.field}: {self.message}"


class MoeSchedError(Exception):
    pass


class InvalidSpec(MoeSchedError):
    def __init__(self, violations: Sequence[Violation]):
        self.violations = list(violations)
        super().__init__(
            "; ".join(str(violation) for violation in self.violations)
        )


class UnknownDevice(MoeSchedError):
    pass


class NegativeRemainder(MoeSchedError):
    pass


class DeadlockDetected(MoeSchedError):
    def __init__(self, cycle: Sequence[str]):
        self.cycle = list(cycle)
        super().__init__(f"dependency cycle: {' -> '.join(self.cycle)}")


class EmptyWindow(MoeSchedError):
    pass


class TraceTooShort(MoeSchedError):
    pass


class ParseError(MoeSchedError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")

    @classmethod
    def invalid_utf8(
        cls, err: UnicodeDecodeError, first_line: int = 1
    ) -> ParseError:
        line = first_line + err.object.count(b"\n", 0, err.start)
        return cls(line, f"invalid UTF-8 ({err.reason})")


class SchemaMismatch(MoeSchedError):
    pass


class LayerTooEarly(MoeSchedError):
    pass


class InfeasiblePlan(MoeSchedError):
    pass


class PlanMissing(MoeSchedError):
    pass


class ProfileMissing(MoeSchedError):
    pass


class ConfigError(MoeSchedError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path or '<root>'}: {message}")
