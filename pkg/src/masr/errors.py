"""Exception hierarchy shared by every module.

Each class carries a short ``category`` string; the CLI maps it to an exit
code and prefixes messages with it.
"""


class MasrError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(MasrError, ValueError):
    category = "config"
    exit_code = 2


class ShapeError(MasrError, ValueError):
    category = "shape"
    exit_code = 2


class ContractError(MasrError, ValueError):
    category = "contract"
    exit_code = 2


class IngestionError(MasrError, ValueError):
    category = "ingestion"
    exit_code = 4


class CollisionError(IngestionError):
    category = "collision"

    def __init__(self, label, sources):
        self.label = label
        self.sources = tuple(sources)
        super().__init__(
            f"label {label!r} is declared by more than one source: {', '.join(self.sources)}"
        )


class ParseError(MasrError, ValueError):
    category = "parse"
    exit_code = 3

    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{self.path}:{lineno}: {message}")


class SchemaError(MasrError, ValueError):
    category = "schema"
    exit_code = 3


class ReportError(MasrError, ValueError):
    category = "report"
    exit_code = 4


class NonFiniteLossError(MasrError, FloatingPointError):
    category = "numeric"
    exit_code = 6

    def __init__(self, epoch, batch, component, value):
        self.epoch = epoch
        self.batch = batch
        self.component = component
        self.value = value
        super().__init__(
            f"non-finite {component} ({value!r}) at epoch {epoch}, batch {batch}"
        )
