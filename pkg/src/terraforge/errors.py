"""Exception hierarchy shared across the package.

Every error raised on purpose derives from :class:`TerraforgeError` so callers
can catch one base type at CLI boundaries and map it to an exit code.
"""


class TerraforgeError(Exception):
    """Base class for all deliberate failures."""


class ContractError(TerraforgeError, ValueError):
    """An argument or configuration violates a documented precondition."""


class SamplingError(TerraforgeError, ValueError):
    """A continuous sample coordinate fell outside the valid raster domain."""


class GeometryError(TerraforgeError, ValueError):
    """Degenerate geometry where a well-defined result was required."""


class LadderError(ContractError):
    """A scale ladder is malformed (ordering, factor, or patch size)."""


class PlanError(ContractError):
    """A window plan cannot be built for the requested extent."""


class RegistryError(TerraforgeError, KeyError):
    """An unknown name was looked up in a component registry."""


class QuantizationError(ContractError):
    """Height quantization range is invalid for the data."""


class AtlasCapacityError(TerraforgeError):
    """Charts do not fit the requested atlas.

    Attributes:
        required_size: smallest power-of-two edge that would have fit.
    """

    def __init__(self, msg: str, required_size: int):
        super().__init__(msg)
        self.required_size = required_size


class MetricError(TerraforgeError, ValueError):
    """A metric is undefined for the given inputs."""


class StageError(TerraforgeError):
    """A pipeline stage failed; carries the stage name for reporting."""

    def __init__(self, stage: str, msg: str):
        super().__init__(f"stage '{stage}': {msg}")
        self.stage = stage
