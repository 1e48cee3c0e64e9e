class ConfigError(ValueError):
    """
    The configuration is invalid, inconsistent or carries unknown keys.
    """


class RejectedInputError(ValueError):
    """
    An operation received inputs that violate its preconditions,
    e.g. images and masks with different dimensions.
    """


class NumericalError(RuntimeError):
    """
    A forward pass, loss or update produced non-finite values.

    :param where: the layer name or the training step where it was detected.
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class IntegrityError(RuntimeError):
    """
    Files on disk do not match what their manifest promises.
    """
