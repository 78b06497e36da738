"""Exception hierarchy shared by every layer of the simulator.

The CLI maps each family to a stable exit code (see ``feddbp.cli``).
"""


class FedDBPError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FedDBPError, ValueError):
    """Invalid configuration value, count or combination of options."""


class DimensionError(FedDBPError, ValueError):
    """Tensor shapes or vector lengths do not agree."""


class DegenerateInputError(FedDBPError, ValueError):
    """Input is numerically degenerate (e.g. a near-zero norm)."""


class ContractError(FedDBPError, RuntimeError):
    """A call violated an API contract (e.g. backward from a non-scalar)."""


class DataError(FedDBPError):
    """Dataset could not be read or is unusable."""


class IngestionError(DataError, ValueError):
    """CSV ingestion failure, carrying the row/column position when known."""

    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class ProtocolError(FedDBPError):
    """Client/server message contract violated (missing prototypes, coverage...)."""


class CodecError(ProtocolError, ValueError):
    """Binary wire format could not be decoded."""

    def __init__(self, message, offset, section=None):
        prefix = f"at byte {offset}"
        if section is not None:
            prefix += f" in section '{section}'"
        super().__init__(f"{message} ({prefix})")
        self.offset = offset
        self.section = section


class TrainingError(FedDBPError, ArithmeticError):
    """Local training diverged (non-finite loss)."""

    def __init__(self, message, epoch=None, step=None):
        if epoch is not None:
            message = f"{message} [epoch {epoch}, step {step}]"
        super().__init__(message)
        self.epoch = epoch
        self.step = step
