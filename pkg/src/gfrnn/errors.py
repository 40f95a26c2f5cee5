"""Error taxonomy: every fatal condition maps to one of these."""


class GfrnnError(Exception):
    """Base class for all library errors."""


class ConfigError(GfrnnError):
    """Invalid configuration: bad field value, dimension mismatch, unknown name."""


class DataError(GfrnnError):
    """Invalid data: out-of-range symbol, corpus too small, malformed record."""


class NumericError(GfrnnError):
    """Numeric contract violation: non-finite input, probabilities not normalized."""


class ParseError(GfrnnError):
    """Script text outside the task grammar."""


class GenerationError(GfrnnError):
    """Constraint still unsatisfied after bounded rejection retries."""


class CheckpointError(GfrnnError):
    """Unreadable, truncated, or version-mismatched checkpoint file."""
