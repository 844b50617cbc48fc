"""Exception hierarchy for the simulator."""


class SimulationError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SimulationError):
    """Shapes or vector lengths are incompatible."""


class DomainError(SimulationError):
    """A value is outside its legal domain (e.g. label out of range)."""


class FormatError(SimulationError):
    """A binary dataset file is malformed; message names the byte offset."""


class CapacityError(SimulationError):
    """Not enough samples or clients to satisfy a request."""


class ConfigurationError(SimulationError):
    """An experiment or model configuration is invalid."""


class AggregationError(SimulationError):
    """Aggregation was asked to combine an empty update list."""


class ScalingError(SimulationError):
    """Train-and-scale hit a zero-norm update delta."""


class SelectionError(SimulationError):
    """Target-class selection had no candidates."""


class EstimationError(SimulationError):
    """A norm-bound estimate was requested from no observations."""


class MetricError(SimulationError):
    """A metric was evaluated on an empty sample slice."""


class ComparisonError(SimulationError):
    """Run directories cannot be compared."""
