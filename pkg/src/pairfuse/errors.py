"""Exception hierarchy shared across the package."""


class PairfuseError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(PairfuseError):
    """Operand shapes are incompatible with the requested operation."""


class NonSquareSpatial(PairfuseError):
    """Fusion function requires square spatial dimensions (H == W)."""


class NonFiniteInput(PairfuseError):
    """Input tensor contains NaN or Inf."""


class InvalidConfig(PairfuseError):
    """Model or experiment configuration is internally inconsistent."""


class ZeroClassCount(PairfuseError):
    """A class count of zero makes the weight formula undefined."""


class EmptyInput(PairfuseError):
    """Metric requested on an empty sample set."""


class DegeneratePolygon(PairfuseError):
    """Polygon has fewer than 3 vertices or zero area."""


class SingularHomography(PairfuseError):
    """The four point correspondences do not determine a homography."""


class ZeroStd(PairfuseError):
    """Normalization statistics contain a zero standard deviation."""


class ParseError(PairfuseError):
    """Manifest line failed to parse; message carries the line number."""


class ValidationError(PairfuseError):
    """Manifest record parsed but violates a field invariant."""


class DatasetError(PairfuseError):
    """Dataset missing or unusable for the requested run."""


class DivergedLoss(PairfuseError):
    """Training loss became non-finite."""


class SchemaVersionMismatch(PairfuseError):
    """Persisted results file carries an unsupported schema version."""
