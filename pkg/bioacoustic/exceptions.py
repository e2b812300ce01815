"""Error hierarchy. Commands map ConfigError to exit code 1 and DataError to 2."""


class FsbedError(Exception):
    """Base class for every error raised by the detector."""


class ConfigError(FsbedError):
    """Bad command-line usage or configuration."""


class DataError(FsbedError):
    """Input data or model state the pipeline cannot work with."""


class AudioReadError(DataError):
    pass


class UnsupportedEncodingError(AudioReadError):
    pass


class EmptyAudioError(AudioReadError):
    pass


class AnnotationError(DataError):
    """Annotation CSV problems; ``row_errors`` holds (line number, message) pairs."""

    def __init__(self, path, row_errors):
        self.path = path
        self.row_errors = list(row_errors)
        details = '; '.join(f'line {line}: {msg}' for line, msg in self.row_errors[:10])
        more = '' if len(self.row_errors) <= 10 else f' (+{len(self.row_errors) - 10} more)'
        super().__init__(f'{path}: {details}{more}')


class FeatureError(DataError):
    pass


class ShapeError(DataError):
    """Shape mismatch; the message names the layer and both shapes."""

    def __init__(self, layer, expected, got):
        self.layer = layer
        self.expected = expected
        self.got = got
        super().__init__(f'{layer}: expected shape {expected}, got {got}')


class ParamFileError(DataError):
    pass


class EpisodeError(DataError):
    pass


class TrainingDivergedError(DataError):
    pass


class EvaluationError(DataError):
    pass
