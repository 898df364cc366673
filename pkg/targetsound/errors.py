"""Exceptions raised by targetsound and the CLI exit codes they map to."""

from __future__ import annotations

from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_MISSING = 4


class TargetSoundError(Exception):
    """Base class for every error the package raises on purpose."""

    exit_code = EXIT_RUNTIME


class ConfigError(TargetSoundError, ValueError):
    """The experiment configuration failed validation."""

    exit_code = EXIT_CONFIG


class InputTooShort(TargetSoundError, ValueError):
    pass


class ShapeMismatch(TargetSoundError, ValueError):
    pass


class DegenerateReference(TargetSoundError, ValueError):
    """The reference signal is constant, so SI-SDR is undefined."""


class DegenerateForeground(TargetSoundError, ValueError):
    pass


class DegenerateBackground(TargetSoundError, ValueError):
    pass


class EmptyRegion(TargetSoundError, ValueError):
    """A target region selects too few samples or frames to score."""


class BankTooSmall(TargetSoundError):
    """The sound bank cannot supply the clips an example needs."""


class FreezeViolation(TargetSoundError):
    """A network declared frozen for a stage changed during that stage."""


class TrainingDiverged(TargetSoundError):
    """The training loss became NaN or infinite."""

    def __init__(self, message: str, last_good_checkpoint: Path | None = None) -> None:
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint


class NotFound(TargetSoundError, FileNotFoundError):
    exit_code = EXIT_MISSING


class ManifestIntegrityError(TargetSoundError, FileNotFoundError):
    """A manifest record points at audio that is missing or unreadable."""

    exit_code = EXIT_MISSING


class EmptyManifest(TargetSoundError, ValueError):
    """A manifest holds no examples to score."""

    exit_code = EXIT_MISSING


class StageOrderError(TargetSoundError):
    """A stage was requested before the checkpoint it builds on exists."""

    exit_code = EXIT_MISSING


class CheckpointVersionError(TargetSoundError):
    exit_code = EXIT_MISSING
