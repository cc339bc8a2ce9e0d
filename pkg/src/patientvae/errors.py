"""Exception hierarchy shared across the package."""


class PatientVaeError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(PatientVaeError, ValueError):
    pass


class NumericError(PatientVaeError, ArithmeticError):
    """NaN/Inf encountered, or an iterative method failed to converge."""


class FormatError(PatientVaeError, ValueError):
    """Input text (CSV header, JSON document) has the wrong structure."""


class SchemaError(PatientVaeError, ValueError):
    pass


class CodecError(PatientVaeError, ValueError):
    """A record cannot be encoded against a schema."""


class SpecError(PatientVaeError, ValueError):
    """Invalid toy-data specification."""


class ConfigError(PatientVaeError, ValueError):
    pass


class ModelFormatError(PatientVaeError, ValueError):
    """A serialized model could not be loaded."""


class VersionError(ModelFormatError):
    pass


class TruncatedModelError(ModelFormatError):
    pass


class DimensionError(ModelFormatError):
    pass


class EvaluationError(PatientVaeError, ValueError):
    pass
