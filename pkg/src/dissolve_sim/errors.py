"""Exception types shared across the simulator."""


class DissolveSimError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(DissolveSimError):
    """A config, rule, or argument references something unknown or invalid."""


class ValidationError(DissolveSimError):
    """An invariant was violated: dimension mismatch, bad value, malformed input."""


class ProvenanceError(DissolveSimError):
    """A derived artifact does not trace back to its claimed source."""


class CheckpointError(DissolveSimError):
    """A checkpoint or state file failed to load or round-trip."""


class MetricUndefinedError(DissolveSimError):
    """A metric was requested on an empty evaluation set."""


class DivergenceSignal(DissolveSimError):
    """Non-finite loss, gradient, or weight encountered during an update step.

    Raised by the engine; training loops catch it and convert it into a
    structured divergence report. Never propagates out of a regime run.
    """
