"""Exception hierarchy shared by every dentseg module."""


class DentSegError(Exception):
    """Base class; ``code`` is the machine-readable name used by the CLI."""

    @property
    def code(self) -> str:
        return type(self).__name__


# dataset
class EmptyDataset(DentSegError):
    pass


class MissingMask(DentSegError):
    def __init__(self, sample_id: str):
        super().__init__(f"no mask found for image {sample_id!r}")
        self.sample_id = sample_id


class DuplicateId(DentSegError):
    def __init__(self, sample_id: str, paths=()):
        detail = ", ".join(str(p) for p in paths)
        super().__init__(f"sample id {sample_id!r} appears more than once ({detail})")
        self.sample_id = sample_id


class DecodeError(DentSegError):
    pass


class UnsupportedDepth(DentSegError):
    pass


class BadRatios(DentSegError):
    pass


# layers
class ShapeMismatch(DentSegError, ValueError):
    pass


class OddSpatialDim(DentSegError, ValueError):
    pass


class BadRate(DentSegError, ValueError):
    pass


# weights and checkpoints
class MissingWeight(DentSegError, KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"weight {self.name!r} not found in archive"


class WeightShapeMismatch(DentSegError):
    def __init__(self, name: str, expected, found):
        super().__init__(f"weight {name!r}: expected shape {tuple(expected)}, found {tuple(found)}")
        self.name = name
        self.expected = tuple(expected)
        self.found = tuple(found)


class CorruptArchive(DentSegError):
    pass


class TruncatedPayload(CorruptArchive):
    pass


class ConfigMismatch(DentSegError):
    pass


class ConfigError(DentSegError):
    """Raised with every violated field at once."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


class MissingManifest(DentSegError):
    pass


# training
class NonFiniteLoss(DentSegError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.value = value


# metrics / plotting
class EmptyCounts(DentSegError):
    pass


class EmptyRow(DentSegError):
    pass


class SchemaError(DentSegError):
    pass
