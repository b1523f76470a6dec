"""Exception hierarchy shared across the pipeline.

Every error carries a ``category`` used by the CLI to print a single
machine-parseable line (IO, Format, Shape, Config).
"""


class PCTreesError(Exception):
    category = "Config"


class EmptyCloud(PCTreesError):
    category = "Shape"


class DegenerateScale(PCTreesError):
    category = "Shape"


class InvalidCount(PCTreesError):
    category = "Config"


class MissingLocation(PCTreesError):
    category = "Format"


class InsufficientSpecies(PCTreesError):
    category = "Config"


class InvalidResolution(PCTreesError):
    category = "Config"


class ShapeMismatch(PCTreesError):
    category = "Shape"


class LabelOutOfRange(PCTreesError):
    category = "Shape"


class ConfigMismatch(PCTreesError):
    category = "Config"


class ClassTooSmall(PCTreesError):
    category = "Config"


class DegenerateLabels(PCTreesError):
    category = "Shape"


class FormatError(PCTreesError):
    category = "Format"
