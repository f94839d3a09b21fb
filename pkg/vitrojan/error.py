#
# Error classes
#
# See LICENSE.txt for license details.
#

class VitrojanException(Exception):
    pass


class AbstractMethodError(VitrojanException):
    def __init__(self, cls, method):
        self.cls = cls
        self.method = method

    def __str__(self):
        return f"Abstract method {self.method} was called. A subclass of {self.cls.__name__} must implement this method."


class DimensionError(VitrojanException):
    """
    Raised when tensor shapes are incompatible with an operation or a model.
    """
    pass


class UsageError(VitrojanException):
    pass


class NumericError(VitrojanException):
    """
    A computation produced NaN or Inf.
    """
    pass


class TrainingError(NumericError):
    """Raised when clean training (or the baseline fine-tune) diverges."""
    pass


class OptimizationError(NumericError):
    """Raised when trigger generation or backdoor injection produces a non-finite loss."""
    pass


class FileFormatError(VitrojanException):
    """
    Indicate a problem with the contents of a file read or written by vitrojan.
    """
    pass


class HeaderError(FileFormatError):
    pass


class VersionError(FileFormatError):
    pass


class PayloadError(FileFormatError):
    pass


class LayoutError(FileFormatError):
    pass


class SidecarError(FileFormatError):
    pass


class MissingArtifactError(FileFormatError):
    """
    A stage's input artifact does not exist; run the producing stage first.
    """
    pass


class ConfigFileError(FileFormatError):
    """
    Raised for errors in user's configuration file.
    """
    pass


class ExperimentConfigError(VitrojanException):
    """
    Raised when an experiment JSON file is missing values or holds invalid ones.
    """
    pass


class CommandlineError(VitrojanException):
    """
    Command-line arguments were missing or incorrectly specified.
    """
    pass


class DataError(VitrojanException):
    pass


class EmptyDatasetError(DataError):
    pass


class InsufficientSamplesError(DataError):
    pass


class DisjointnessError(DataError):
    pass


class UnknownFamilyError(DataError):
    pass


class LabelRangeError(DataError):
    pass


class StrategyError(VitrojanException):
    pass


class SelectionError(VitrojanException):
    pass


class StageError(VitrojanException):
    """
    Wraps an exception raised inside a pipeline stage to record the stage name.
    """
    def __init__(self, stage, error):
        self.stage = stage
        self.error = error

    def __str__(self):
        return f"[{self.stage}] {self.error.__class__.__name__}: {self.error}"
