"""Exception hierarchy. Every error carries the CLI exit code it maps to."""


class TCLError(Exception):
    exit_code = 1


class ConfigError(TCLError):
    exit_code = 1


class ShapeError(TCLError, ValueError):
    exit_code = 3


class NumericError(TCLError, ArithmeticError):
    exit_code = 3


class GraphError(TCLError, RuntimeError):
    exit_code = 3


class MemoryBankError(TCLError, ValueError):
    exit_code = 2


class DataFormatError(TCLError):
    exit_code = 2


class CheckpointError(DataFormatError):
    exit_code = 2
