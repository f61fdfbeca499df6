"""Exception hierarchy shared across the package."""


class PromptClinicError(Exception):
    """Base class for all package errors."""


# data / parsing
class DataError(PromptClinicError):
    pass


class MalformedChat(DataError):
    pass


class MissingLabel(DataError):
    pass


class DuplicateId(DataError):
    pass


class CorpusBalanceError(DataError):
    pass


# model / tensors
class SequenceTooLong(PromptClinicError):
    pass


class LengthOverflow(PromptClinicError):
    pass


class ShapeMismatch(PromptClinicError):
    pass


class NonFiniteLoss(PromptClinicError):
    def __init__(self, message, last_good_epoch=None):
        super().__init__(message)
        self.last_good_epoch = last_good_epoch


class UnknownTarget(PromptClinicError):
    pass


# prompting / classification
class SlotMissing(PromptClinicError):
    pass


class MultipleMasks(PromptClinicError):
    pass


class LabelWordOOV(PromptClinicError):
    pass


# training / evaluation
class ModePolicyMismatch(PromptClinicError):
    pass


class EmptyGrid(PromptClinicError):
    pass


class TooFewSamples(PromptClinicError):
    pass


class MisalignedPredictions(PromptClinicError):
    pass


class EmptyInput(PromptClinicError):
    pass


class ConfigError(PromptClinicError):
    """Invalid experiment configuration; message starts with the field path."""
