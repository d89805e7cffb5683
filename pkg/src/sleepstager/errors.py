"""Exception hierarchy.

Every error carries a short machine-readable ``category`` so the CLI can
report failures as ``category: message`` on stderr.
"""


class SleepStagerError(Exception):
    category = "error"


class BundleError(SleepStagerError):
    """Malformed or inconsistent recording bundle."""

    category = "bundle"

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        where = ""
        if path is not None:
            where = f"{path}"
            if offset is not None:
                where += f" @ {offset}"
            where += ": "
        super().__init__(where + message)


class LabelError(SleepStagerError):
    category = "label"


class ShapeError(SleepStagerError):
    """Dimension or extent mismatch between operands."""

    category = "shape"


class NonFiniteError(SleepStagerError):
    category = "numeric"


class ConfigError(SleepStagerError):
    category = "config"

    def __init__(self, message, key=None):
        self.key = key
        super().__init__(f"[{key}] {message}" if key else message)


class SplitError(SleepStagerError):
    category = "split"


class TrainingDiverged(SleepStagerError):
    category = "divergence"


class CalibrationError(SleepStagerError):
    category = "calibration"


class FormatError(SleepStagerError):
    """Corrupt or incompatible binary artifact (cache, checkpoint, grid)."""

    category = "format"
