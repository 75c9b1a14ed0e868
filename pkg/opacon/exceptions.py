class OpaconError(Exception):
    pass


class ValidationError(OpaconError):
    pass


class InputShapeError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class LogFormatError(ValidationError):
    pass


class IllPosedError(ValidationError):
    pass


class FpeDomainError(ValidationError):
    pass


class CompositionError(ValidationError):
    pass


class ProfileError(ValidationError):
    pass


class InsufficientHistoryError(ValidationError):
    pass


class ExcitationError(ValidationError):
    pass


class NumericalFault(OpaconError):
    pass


class NonFiniteWeightsError(NumericalFault):
    pass


class TrainingInitError(NumericalFault):
    pass


class SingularSystemError(NumericalFault):
    pass


class PlantFaultError(NumericalFault):
    pass


class RlsUpdateError(NumericalFault):
    pass


class SimulationFaultError(NumericalFault):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class TrainingDivergedError(NumericalFault):
    def __init__(self, message, restarts=0):
        super().__init__(message)
        self.restarts = restarts


class SelectionFailedError(NumericalFault):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ControllerDivergedError(NumericalFault):
    def __init__(self, message, epoch_log=None):
        super().__init__(message)
        self.epoch_log = epoch_log or []
