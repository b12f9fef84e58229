from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional


@dataclass
class HarmapError(Exception):
    message: str


@dataclass
class InputError(HarmapError):
    ...


@dataclass
class SchemaError(InputError):
    ...


@dataclass
class UnsupportedVersionError(SchemaError):
    ...


@dataclass
class TopologyError(InputError):
    ...


@dataclass
class GeometryError(InputError):
    ...


@dataclass
class CompatibilityError(InputError):
    ...


@dataclass
class ConvergenceError(HarmapError):
    trace: List[Dict[str, Any]] = field(default_factory=list)


@dataclass
class NumericalError(HarmapError):
    ...


@dataclass
class LinearSolverError(NumericalError):
    pivot: Optional[int] = None


@dataclass
class DiffusivityError(NumericalError):
    ...


@dataclass
class BarrierError(NumericalError):
    ...
