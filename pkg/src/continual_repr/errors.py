from __future__ import annotations

from typing import Any


class ContinualReprError(Exception):
    pass


class UnknownDatasetError(ContinualReprError):
    pass


class NotDivisibleError(ContinualReprError):
    pass


class EmptyTaskError(ContinualReprError):
    pass


class ShapeMismatchError(ContinualReprError):
    pass


class ProjectorDisabledError(ContinualReprError):
    pass


class UnknownHeadError(ContinualReprError):
    pass


class LabelOutOfRangeError(ContinualReprError):
    pass


class ZeroVectorError(ContinualReprError):
    pass


class NoPositiveError(ContinualReprError):
    pass


class DegenerateBatchError(ContinualReprError):
    pass


class MissingSnapshotError(ContinualReprError):
    pass


class NonFiniteLossError(ContinualReprError):
    def __init__(self, message: str, *, diagnostics: dict[str, Any]) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics


class EmptyReferenceError(ContinualReprError):
    pass


class MissingClassError(ContinualReprError):
    pass


class DegenerateMeanError(ContinualReprError):
    pass


class DegenerateInputError(ContinualReprError):
    pass


class ProvenanceMismatchError(ContinualReprError):
    pass


class CheckpointError(ContinualReprError):
    pass


class MissingMetricError(ContinualReprError):
    pass


class MissingRunError(ContinualReprError):
    pass


class ManifestIntegrityError(ContinualReprError):
    pass


class RunFailedError(ContinualReprError):
    def __init__(self, message: str, *, manifest_path: str | None) -> None:
        super().__init__(message)
        self.manifest_path = manifest_path


class ConfigFileError(ContinualReprError):
    pass


class DatasetLoadError(ContinualReprError):
    pass


class EmbeddingDumpError(ContinualReprError):
    pass
