"""Exception hierarchy shared by every module."""


class OscMaskError(Exception):
    pass


class ShapeError(OscMaskError, ValueError):
    pass


class InvalidInputError(OscMaskError, ValueError):
    pass


class InvalidParameterError(OscMaskError, ValueError):
    pass


class SpecError(OscMaskError, ValueError):
    """A network spec failed its static shape check."""


class FormatError(OscMaskError, ValueError):
    """A checkpoint or dataset file is malformed."""


class TrainingDivergedError(OscMaskError, RuntimeError):
    def __init__(self, epoch, step, loss):
        super().__init__(f"training diverged at epoch {epoch}, step {step} (loss={loss})")
        self.epoch = epoch
        self.step = step
        self.loss = loss


class FitFailedError(OscMaskError, RuntimeError):
    pass
