"""Exception hierarchy shared by the pipeline stages."""


class MeasError(Exception):
    """Base class for all pipeline errors."""


class CorpusError(MeasError):
    pass


class ParseError(CorpusError):
    pass


class OffsetOutOfRange(CorpusError):
    pass


class DanglingRelation(CorpusError):
    pass


class SurfaceMismatch(CorpusError):
    pass


class IllegalRelation(CorpusError):
    pass


class OverlappingGold(CorpusError):
    pass


class InvalidIob(CorpusError):
    pass


class DimensionMismatch(MeasError, ValueError):
    pass


class EmptySequence(MeasError, ValueError):
    pass


class TrainingDiverged(MeasError, FloatingPointError):
    pass


class EmbeddingFileMissing(MeasError, FileNotFoundError):
    pass


class ArityMismatch(MeasError, ValueError):
    pass


class EmptyDevSet(MeasError, ValueError):
    pass


class DocumentSetMismatch(MeasError):
    pass


class InfeasibleSpec(MeasError, ValueError):
    pass


class ConfigError(MeasError):
    pass


class MissingCheckpoint(MeasError, FileNotFoundError):
    pass
