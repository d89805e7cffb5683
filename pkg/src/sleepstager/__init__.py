"""Sleep staging with a one-to-many 1-max CNN and decision-ensemble fusion."""

from .errors import SleepStagerError
from .signal_io import N_STAGES, STAGE_NAMES, RecordingBundle, StageLabel, load_bundle, write_bundle

__version__ = "0.1.0"

__all__ = ["N_STAGES", "STAGE_NAMES", "RecordingBundle", "SleepStagerError", "StageLabel",
           "load_bundle", "write_bundle", "__version__"]
