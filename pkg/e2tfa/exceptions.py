import json
import typing
import logging

log = logging.getLogger(__name__)


class E2tfaError(Exception):
    """
    Base exception for e2tfa errors. Every subclass carries a stable
    error code that ends up in the machine-readable error record
    """

    code: typing.ClassVar[str] = "e2tfa"
    details: typing.Dict[str, typing.Any]

    def __init__(self, msg: str, **details: typing.Any) -> None:
        super().__init__(msg)
        self.details = details

    def __str__(self) -> str:
        msg = super().__str__()
        if not self.details:
            return msg
        s = ["{}={}".format(key, _format_detail(value)) for key, value in self.details.items()]
        return "{} ({})".format(msg, ", ".join(s))

    def record(self) -> typing.Dict[str, typing.Any]:
        """Returns the error as a json-serializable record"""
        message = super().__str__()
        if self.__cause__ is not None:
            message += f": {self.__cause__}"
        return {
            "error": self.code,
            "message": message,
            "details": {key: _jsonable(value) for key, value in self.details.items()},
        }


class InvalidInputError(E2tfaError, ValueError):
    """Argument outside of the domain of a function"""

    code = "invalid-input"


class ConfigError(E2tfaError):
    """Run config violates the schema"""

    code = "config"


class MeshError(E2tfaError):
    """Mesh can't be built or is inconsistent"""

    code = "mesh"


class SolverError(E2tfaError):
    """Linear or nonlinear solve failed"""

    code = "solver"


class SingularTensorError(SolverError):
    """Tensor4 is singular or too ill-conditioned to invert"""

    code = "singular-tensor"


class ConvergenceError(SolverError):
    """Newton iterations did not converge"""

    code = "convergence"


class InvariantError(E2tfaError):
    """Computed data violates an invariant it must hold"""

    code = "invariant"


class PreprocessFileError(E2tfaError):
    """Preprocessing file can't be read back"""

    code = "preprocess-file"


def _format_detail(value: typing.Any) -> str:
    if isinstance(value, float):
        return format(value, ".3e")
    return str(value)


def _jsonable(value: typing.Any) -> typing.Any:
    try:
        json.dumps(value)
    except (TypeError, ValueError):
        log.debug("Detail %r is not json serializable, using str()", value)
        return str(value)
    return value
