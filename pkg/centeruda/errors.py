"""Exception hierarchy shared by every centeruda module."""


class CenterUDAError(Exception):
    """Base class for all errors raised by centeruda."""


class ConfigError(CenterUDAError):
    pass


class UsageError(CenterUDAError):
    """Bad command line (mapped to exit code 1)."""


class ShapeError(CenterUDAError):
    def __init__(self, op, message, dim=None):
        self.op = op
        self.dim = dim
        where = f" (dim {dim})" if dim is not None else ""
        super().__init__(f"{op}: {message}{where}")


class GradientError(CenterUDAError):
    pass


class NumericalError(CenterUDAError):
    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"{message} at step {step}"
        super().__init__(message)


class DataError(CenterUDAError):
    def __init__(self, message, path=None):
        self.path = path
        if path is not None:
            message = f"{message}: {path}"
        super().__init__(message)


class ParseError(DataError):
    def __init__(self, message, path=None, index=None):
        self.index = index
        if index is not None:
            message = f"{message} (record {index})"
        super().__init__(message, path)


class CheckpointError(CenterUDAError):
    pass


class OptimizerError(CenterUDAError):
    def __init__(self, message, path=None):
        self.path = path
        if path is not None:
            message = f"{message}: {path}"
        super().__init__(message)
