"""Exception hierarchy shared across the simulator."""


class VhlError(Exception):
    """Base class for all simulator errors."""


class ShapeError(VhlError, ValueError):
    def __init__(self, message, layer=None):
        super().__init__(message if layer is None else f"layer {layer}: {message}")
        self.layer = layer


class NumericError(VhlError, ArithmeticError):
    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} (index {index})")
        self.index = index


class InputError(VhlError, ValueError):
    pass


class PartitionError(VhlError, ValueError):
    pass


class ConfigurationError(VhlError, ValueError):
    pass


class AggregationError(VhlError, ValueError):
    pass


class StateError(VhlError, ValueError):
    pass


class DivergenceError(NumericError):
    def __init__(self, message, step=None, client=None):
        parts = [message]
        if client is not None:
            parts.append(f"client {client}")
        if step is not None:
            parts.append(f"step {step}")
        VhlError.__init__(self, ", ".join(parts))
        self.index = step
        self.step = step
        self.client = client


class MarginUndefinedError(VhlError, ValueError):
    def __init__(self, labels):
        super().__init__(f"no violating candidate for label(s) {sorted(labels)}")
        self.labels = sorted(labels)


class UnsupportedInstanceError(VhlError, ValueError):
    pass


class IdxParseError(VhlError, ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class ConfigError(VhlError, ValueError):
    def __init__(self, message, path=None):
        super().__init__(message if path is None else f"{path}: {message}")
        self.path = path
