"""
Exception types raised by pysprpose.

Every error carries the process exit code the command line reports for it:
2 for usage problems, 3 for bad input data, 4 for storage failures.
"""


class SprError(Exception):
    exit_code = 1


class UsageError(SprError):
    exit_code = 2


class DataError(SprError, ValueError):
    exit_code = 3


class SkeletonError(DataError):
    pass


class ModeMismatchError(DataError):
    pass


class DatasetFormatError(DataError):
    pass


class TensorFormatError(DataError):
    pass


class SynthesisError(DataError):
    pass


class TrainingDiverged(DataError):

    def __init__(self, epoch, loss):
        super(TrainingDiverged, self).__init__(
            "Training diverged at epoch {0} (loss={1})".format(epoch, loss))
        self.epoch = epoch
        self.loss = loss


class StorageError(SprError, OSError):
    exit_code = 4


def exit_code_for(exc):
    """
    Map an exception to the documented command exit code.
    :param exc: exception instance
    :return: 2, 3 or 4 for known failures, 1 otherwise
    """
    if isinstance(exc, SprError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return StorageError.exit_code
    if isinstance(exc, ValueError):
        return DataError.exit_code
    return 1
