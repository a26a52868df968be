"""Exception hierarchy shared by every module."""


class MusicMosError(Exception):
    """Base class for all package errors."""


# dataset
class ManifestParseError(MusicMosError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class IntegrityError(MusicMosError):
    pass


class MissingAudioError(MusicMosError):
    def __init__(self, missing: list[tuple[str, str]]):
        self.missing = missing
        listing = "\n".join(f"  {cid}: {path or '<empty>'}" for cid, path in missing)
        super().__init__(f"{len(missing)} clip(s) have missing audio:\n{listing}")


class StratificationError(MusicMosError):
    pass


class SubsampleSizeError(MusicMosError, ValueError):
    pass


# audio
class AudioDecodeError(MusicMosError):
    pass


class EmptyInputError(MusicMosError, ValueError):
    pass


class DegradationError(MusicMosError):
    pass


# encoder / model
class ContractError(MusicMosError, ValueError):
    pass


class RetrievalError(MusicMosError):
    pass


class CacheIntegrityError(MusicMosError):
    pass


class AdaptationError(MusicMosError):
    pass


class CheckpointError(MusicMosError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class EncoderMismatchError(CheckpointError):
    pass


# training / config
class ConfigError(MusicMosError, ValueError):
    pass


class TrainingDivergedError(MusicMosError, FloatingPointError):
    pass


# statistics / evaluation
class UndefinedCorrelationError(MusicMosError, ValueError):
    pass


class SingularityError(MusicMosError, ValueError):
    pass


class BootstrapError(MusicMosError):
    pass


class CompletenessError(MusicMosError):
    pass


class ComparabilityError(MusicMosError):
    pass


class DegenerateError(MusicMosError, ValueError):
    pass
