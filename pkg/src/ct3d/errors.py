class Ct3dError(Exception):
    """Base class for all errors raised by ct3d."""

    kind = "error"


class ShapeError(Ct3dError, ValueError):
    kind = "shape"


class ParameterError(Ct3dError, ValueError):
    kind = "parameter"


class ConfigError(Ct3dError, ValueError):
    kind = "config"


class ContractError(Ct3dError, ValueError):
    kind = "contract"


class MigrationError(Ct3dError, KeyError):
    kind = "migration"

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class CheckpointError(Ct3dError, ValueError):
    kind = "checkpoint"


class FormatError(Ct3dError, ValueError):
    kind = "format"


class IngestionError(Ct3dError, ValueError):
    kind = "ingestion"


class TrainingDiverged(Ct3dError, RuntimeError):
    kind = "diverged"
