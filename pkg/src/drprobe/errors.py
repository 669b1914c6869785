class DrProbeError(Exception):
    """Base class for toolkit errors."""


class CorpusParseError(DrProbeError, ValueError):
    def __init__(self, index, field, detail=None):
        self.index = index
        self.field = field
        msg = f"record {index}: missing or invalid field {field!r}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class EmptyCorpusError(DrProbeError, ValueError):
    pass


class PoolingMismatchError(DrProbeError, ValueError):
    pass


class EnvironmentLoadError(DrProbeError, RuntimeError):
    """Model or tokenizer could not be loaded."""


class StorageError(DrProbeError, OSError):
    pass


class CacheMissError(DrProbeError, KeyError):
    def __init__(self, text_hash, cache=None):
        self.text_hash = text_hash
        where = f" in {cache}" if cache else ""
        super().__init__(f"no embedding for text hash {text_hash}{where}")

    def __str__(self):
        return self.args[0]


class ProbeTrainingError(DrProbeError, RuntimeError):
    def __init__(self, epoch, detail="loss is not finite"):
        self.epoch = epoch
        super().__init__(f"probe training diverged at epoch {epoch}: {detail}")


class AttributionError(DrProbeError, RuntimeError):
    pass


class InsufficientDataError(DrProbeError, ValueError):
    pass


class PairingError(DrProbeError, ValueError):
    pass


class ComparisonError(DrProbeError, ValueError):
    pass
