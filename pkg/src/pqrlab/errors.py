"""Exception hierarchy shared by every module."""


class PqrError(Exception):
    """Base class for all errors raised by pqrlab."""


class InvalidArgumentError(PqrError, ValueError):
    pass


class ShapeError(PqrError, ValueError):
    pass


class DomainError(PqrError, ValueError):
    pass


class NumericOverflowError(PqrError, FloatingPointError):
    """A forward pass produced NaN or Inf. ``layer`` is 1-based."""

    def __init__(self, layer, message=None):
        self.layer = layer
        super().__init__(message or f"non-finite preactivations in layer {layer}")


class ResourceError(PqrError, MemoryError):
    """Projected memory (or parameter count) exceeds the configured budget."""

    def __init__(self, requested, allowed, what="bytes", hint=None):
        self.requested = requested
        self.allowed = allowed
        msg = f"requested {requested} {what}, allowed {allowed} {what}"
        if hint:
            msg += f"; {hint}"
        super().__init__(msg)


class UnsupportedError(PqrError, NotImplementedError):
    """Unsupported derivative order or architecture."""


class InternalContractError(PqrError, RuntimeError):
    pass
