class OkLabError(Exception):
    pass


class InvalidArgument(OkLabError, ValueError):
    pass


class DegenerateDistribution(OkLabError, ValueError):
    pass


class WireFormatError(OkLabError, ValueError):
    pass


class TransportError(OkLabError, RuntimeError):
    pass


class ProtocolError(OkLabError, RuntimeError):
    pass


class UnsupportedConfiguration(OkLabError, ValueError):
    pass


class NumericError(OkLabError, ArithmeticError):
    pass


class UndefinedRatio(OkLabError, ArithmeticError):
    pass


class WorkerFailure(OkLabError, RuntimeError):
    """A worker raised; ``rank`` names the first failing rank."""

    def __init__(self, rank, cause):
        super().__init__(f"worker {rank} failed: {cause!r}")
        self.rank = rank
        self.cause = cause
