"""
src/rcwbc/errors.py
Exception hierarchy.
Every error carries the CLI exit code it maps to:
- 1 validation / model / dynamics problems
- 2 parse errors
- 3 solver failures
- 4 inverse kinematics failures
"""


class RcwbcError(Exception):
    exit_code = 1

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def __str__(self):
        return self.message


# --- MODEL ---
class ModelError(RcwbcError):
    exit_code = 1


class ParseError(ModelError):
    exit_code = 2

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field '{field}'")
        text = f"{message} ({', '.join(where)})" if where else message
        super().__init__(text, line=line, field=field)
        self.line = line
        self.field = field


class ValidationError(ModelError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message, field=field)
        self.field = field


class TopologyError(ValidationError):
    pass


class MissingContactFrame(ModelError):
    pass


# --- DYNAMICS ---
class DynamicsError(RcwbcError):
    exit_code = 1


class NonUnitQuaternion(DynamicsError):
    pass


class UnknownFrame(DynamicsError):
    pass


class NonPositiveDefinite(DynamicsError):
    pass


class DimensionMismatch(DynamicsError):
    pass


class SingularInertia(DynamicsError):
    pass


# --- SOLVERS ---
class SolverError(RcwbcError):
    exit_code = 3


class InfeasibleProblem(SolverError):
    def __init__(self, message: str, certificate: float = float("nan")):
        super().__init__(message, certificate=certificate)
        self.certificate = certificate


class IllConditioned(SolverError):
    pass


class SolverInfeasible(SolverError):
    def __init__(self, message: str, block: str | None = None, diagnostics: dict | None = None):
        super().__init__(message, block=block, diagnostics=diagnostics or {})
        self.block = block
        self.diagnostics = diagnostics or {}


class SingularKkt(SolverError):
    pass


# --- INVERSE KINEMATICS ---
class IkDidNotConverge(RcwbcError):
    exit_code = 4

    def __init__(self, message: str, residual: float = float("nan"), iterations: int = 0):
        super().__init__(message, residual=residual, iterations=iterations)
        self.residual = residual
        self.iterations = iterations
