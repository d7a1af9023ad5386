"""Exception types shared across the pipeline."""


class PolesigError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(PolesigError):
    """Invalid or unsatisfiable configuration."""


class ParseError(PolesigError):
    """Malformed input file; message names the offending location."""


class FormatError(PolesigError):
    """Binary file violates its declared format (magic, sizes, dims)."""


class ShapeError(PolesigError):
    """Array dimensions incompatible with the configured model."""


class ContractError(PolesigError):
    """Caller violated an operation precondition (unit norms, cache pairing)."""


class DatasetError(PolesigError):
    """Split, batch, or pairing construction is impossible as requested."""


class TrainingError(PolesigError):
    """Training aborted; message carries epoch/step context."""


class ProtocolError(PolesigError):
    """Retrieval protocol unsatisfiable (query without eligible match)."""
