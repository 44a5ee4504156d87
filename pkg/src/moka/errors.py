"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested kernel."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ProtocolError(RuntimeError):
    """An experimental protocol was asked to do something undefined.

    Raised e.g. when cross-attention is requested but the text keys are
    routed away from the adapter, or when attention has no keys at all.
    """


class CorruptCheckpoint(IOError):
    """Checkpoint bytes failed structural or checksum validation."""


class ConfigError(ValueError):
    """Run configuration is malformed or names unknown keys."""


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, lr: float, grad_norm: float):
        self.step = step
        self.lr = lr
        self.grad_norm = grad_norm
        super().__init__(
            f"non-finite loss at step {step} (lr={lr:.3e}, grad_norm={grad_norm:.3e})"
        )
