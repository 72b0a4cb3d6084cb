# -*- coding: utf-8 -*-


class FimAlchemyError(Exception):
    """ancestor error of fim-alchemy"""


class ConfigError(FimAlchemyError):
    """invalid argument or configuration"""


class DomainError(ConfigError):
    """argument outside the mathematical domain of an operation"""


class DegenerateRegimeError(FimAlchemyError):
    """prediction regime does not apply to the given network"""


class CenteredNetworkError(DegenerateRegimeError):
    """network has no bias variance and only zero-mean activations"""


class PreconditionError(DegenerateRegimeError):
    """precondition of a prediction violated"""


class DegenerateNormalizationError(DegenerateRegimeError):
    def __init__(self, message, layer=None, index=None):
        """
        Args:
            message: human readable description
            layer: layer number (1-based) whose variance vanished
            index: unit or sample index inside that layer
        """
        super(DegenerateNormalizationError, self).__init__(message)
        self.layer = layer
        self.index = index


class NumericalError(FimAlchemyError):
    def __init__(self, message, iterations=None):
        super(NumericalError, self).__init__(message)
        self.iterations = iterations
