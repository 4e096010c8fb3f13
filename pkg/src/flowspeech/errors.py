"""Exception types shared across the package.

The CLI maps these onto process exit codes, so keep the hierarchy flat.
"""


class FlowSpeechError(Exception):
    exit_code = 1


class ContractError(FlowSpeechError, ValueError):
    """A caller violated an operation's precondition."""

    exit_code = 2


class ShapeError(ContractError):
    pass


class LengthError(ContractError):
    pass


class NumericError(FlowSpeechError, FloatingPointError):
    """NaN or Inf showed up where only finite values are legal."""

    exit_code = 4


class MissingDependencyError(FlowSpeechError):
    """A pipeline stage was run before the stage that produces its inputs."""

    exit_code = 3

    def __init__(self, message, producer=None):
        super().__init__(message)
        self.producer = producer


class FeatureFileError(FlowSpeechError):
    exit_code = 2


class BadMagicError(FeatureFileError):
    pass


class HeaderMismatchError(FeatureFileError):
    pass


class TruncatedPayloadError(FeatureFileError):
    pass
