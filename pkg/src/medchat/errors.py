"""Exception types shared across the package.

Every error raised on a contract violation derives from MedchatError so
callers can catch the package's failures with a single except clause while
still being able to discriminate on the concrete class.
"""


class MedchatError(Exception):
    """Base class for all package-specific errors."""


# --- audio ---------------------------------------------------------------


class EmptyAudioError(MedchatError):
    """Raised when an operation receives a clip with zero samples."""


class RateMismatchError(MedchatError):
    """Raised when an operation receives audio at an unexpected sample rate."""


class TooShortError(MedchatError):
    """Raised when a clip is shorter than one analysis window."""


class InvalidFrameError(MedchatError):
    """Raised for a negative or otherwise impossible frame index."""


# --- configuration and shapes --------------------------------------------


class InvalidConfigError(MedchatError):
    """Raised when a config value is out of its documented range."""


class ShapeError(MedchatError):
    """Raised when a tensor argument has the wrong shape."""


class NumericError(MedchatError):
    """Raised when a computation produced NaN/Inf or left its valid domain."""


class EmptyDatasetError(MedchatError):
    """Raised when a training routine receives no samples."""


class InvalidTimestepError(MedchatError):
    """Raised for a diffusion timestep outside [0, total_steps)."""


class CheckpointError(MedchatError):
    """Raised when a checkpoint directory is missing files or inconsistent."""


# --- dialogue -------------------------------------------------------------


class BackendProtocolError(MedchatError):
    """Raised when a dialogue backend cannot produce a usable turn."""


class TruncatedDialogueError(MedchatError):
    """Raised when a synthesized dialogue exceeds its token budget."""


class SessionFinishedError(MedchatError):
    """Raised when a turn is submitted to a session that already ended."""


# --- summaries and storage -------------------------------------------------


class ParseError(MedchatError):
    """Raised when raw summary text is not valid JSON."""


class SummarySchemaError(MedchatError):
    """Raised when parsed summary JSON violates the five-category schema."""


class NotFoundError(MedchatError):
    """Raised when a referenced patient/session row does not exist."""


class AlreadyPersistedError(MedchatError):
    """Raised when a summary for the session was persisted earlier."""


class NotReadyError(MedchatError):
    """Raised when a summary/report is requested before the session is done."""


# --- guard ------------------------------------------------------------------


class RuleError(MedchatError):
    """Raised when a guard rule file is malformed."""
