"""Exception hierarchy. Every error carries a short machine-readable ``code``."""


class ASGLError(Exception):
    code = "E_ASGL"


class DimensionError(ASGLError, ValueError):
    code = "E_DIM"


class NumericError(ASGLError, ArithmeticError):
    code = "E_NUMERIC"


class IngestError(ASGLError, ValueError):
    code = "E_INGEST"


class ConfigError(ASGLError, ValueError):
    code = "E_CONFIG"


class DataError(ASGLError, ValueError):
    code = "E_DATA"


class SamplerError(DataError):
    code = "E_SAMPLER"


class EvaluationError(ASGLError, RuntimeError):
    code = "E_EVAL"


class CheckpointFileError(ASGLError, OSError):
    code = "E_FILE"
