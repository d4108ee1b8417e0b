class SeqGsnError(Exception):
    pass


class ShapeError(SeqGsnError, ValueError):
    def __init__(self, what: str, *shapes):
        self.shapes = shapes
        super().__init__(
            f"{what}: " + " vs ".join(str(tuple(s)) for s in shapes)
        )


class ConfigError(SeqGsnError):
    pass


class DatasetError(SeqGsnError):
    pass


class SequenceError(SeqGsnError):
    pass


class DivergenceError(SeqGsnError):
    def __init__(self, epoch: int, metric: str, value: float):
        self.epoch = epoch
        self.metric = metric
        self.value = value
        super().__init__(
            f"training diverged at epoch {epoch}: {metric} = {value}"
        )


class CheckpointError(SeqGsnError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass
