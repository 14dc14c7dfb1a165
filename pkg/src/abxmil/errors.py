"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor dimensions do not line up for the requested operation."""


class ConfigError(ValueError):
    """A configuration value is structurally invalid (bad key, bad range,
    head count not dividing the feature width, ratios not summing to 1)."""


class ValidationError(ValueError):
    """A runtime input violates a documented precondition, e.g. an
    attention vector that does not sum to 1 or a non-stochastic matrix."""


class NumericError(FloatingPointError):
    """An operation produced (or received) NaN/Inf."""


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss. Carries the offending slide so the
    CLI can emit a diagnostic record before exiting."""

    def __init__(self, slide_id, epoch, records=None):
        super().__init__(f"non-finite loss on slide {slide_id} (epoch {epoch})")
        self.slide_id = slide_id
        self.epoch = epoch
        self.records = records or []
