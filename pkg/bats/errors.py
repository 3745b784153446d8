# bats/errors.py
from __future__ import annotations
from typing import Optional


class BatsError(Exception):
    """Base error. `exit_code` is what the CLI returns when this escapes a stage."""

    exit_code = 1


class ConfigError(BatsError):
    exit_code = 2


class InputError(BatsError, ValueError):
    exit_code = 2


class StructuralError(BatsError):
    exit_code = 2


class DatasetLoadError(InputError):
    def __init__(self, message: str, traj: Optional[int] = None, record: Optional[int] = None) -> None:
        self.traj = traj
        self.record = record
        where = ""
        if traj is not None:
            where = f" (traj {traj}" + (f", record {record})" if record is not None else ")")
        super().__init__(f"{message}{where}")


class MissingArtifactError(BatsError):
    exit_code = 3

    def __init__(self, path: str, producer: str) -> None:
        self.path = path
        self.producer = producer
        super().__init__(f"Missing artifact {path}. Run `{producer}` first.")


class NumericalError(BatsError):
    exit_code = 4


class TrainingError(NumericalError):
    def __init__(self, message: str, member: Optional[int] = None) -> None:
        self.member = member
        super().__init__(message if member is None else f"{message} (member {member})")


class ContractError(BatsError):
    pass


class UnsupportedError(BatsError):
    pass


class VersionError(BatsError):
    exit_code = 2


class EmptyHarvestError(BatsError):
    exit_code = 4
