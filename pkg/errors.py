from typing import Any, Dict, Optional


class FairTransError(Exception):
    """Base error carrying a message, structured details and a CLI exit code."""

    exit_code = 2

    def __init__(self, message: str, error_data: Optional[Dict[str, Any]] = None):
        self.message = message
        self.error_data = error_data or {}
        super().__init__(self.message)


class ShapeError(FairTransError):
    def __init__(self, op: str, shape_a, shape_b=None):
        shapes = f"{tuple(shape_a)}" + (
            f" and {tuple(shape_b)}" if shape_b is not None else ""
        )
        super().__init__(
            f"{op}: incompatible shapes {shapes}",
            {
                "op": op,
                "shape_a": tuple(shape_a),
                "shape_b": None if shape_b is None else tuple(shape_b),
            },
        )


class DomainError(FairTransError):
    pass


class DataError(FairTransError):
    pass


class MappingError(FairTransError):
    pass


class ArtifactError(FairTransError):
    pass


class ConfigError(FairTransError):
    exit_code = 1
