class QfuseError(ValueError):
    pass


class ConfigurationError(QfuseError):
    pass


class ValidationError(QfuseError):
    pass


class EncodingError(QfuseError):
    pass


class IngestionError(QfuseError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        location = ''
        if path is not None:
            location = '{}'.format(path)
            if line is not None:
                location += ':{}'.format(line)
            location += ': '
        super().__init__(location + message)


class DataFormatError(IngestionError):
    pass


class TrainingDivergedError(QfuseError):
    pass


class SearchError(QfuseError):
    pass


class ModelFormatError(QfuseError):
    pass
