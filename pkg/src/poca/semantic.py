"""Latent semantic space: presence-probability points, importance weights,
and signed error vectors.

A caption and an image are both modelled as points in ``[0, 1]^n`` where
coordinate ``i`` is the probability that atomic semantic unit ``i`` is
present.  The signed difference between a recovered point and a source
point is the semantic error; its negative components are undercoverage
(the caption misses content) and its positive components are
hallucination (the caption invents content).

Two arithmetic modes exist.  ``Mode.VALID`` enforces the nominal ranges
([0, 1] for points, [-1, 1] for errors).  ``Mode.UNCONSTRAINED`` skips
range checks; the theorem verifier uses it because its algebra can step
outside the nominal ranges without affecting any result.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Mode",
    "Norm",
    "DEFAULT_NORM",
    "ErrorLabel",
    "SemanticSpace",
    "SemanticPoint",
    "ImportanceVector",
    "ErrorVector",
    "hadamard",
    "semantic_error",
    "classify_error",
    "error_norm",
]


class Mode(enum.Enum):
    """Arithmetic mode for semantic vectors."""

    VALID = "valid-semantics"
    UNCONSTRAINED = "unconstrained-algebra"


class Norm(enum.Enum):
    """Vector norm selector."""

    L1 = "l1"
    L2 = "l2"
    LINF = "linf"


#: Per-unit error contributions are most visible under L1, so it is the
#: default; reports carry all three norms regardless.
DEFAULT_NORM = Norm.L1


class ErrorLabel(enum.Enum):
    UNDERCOVERAGE = "undercoverage"
    HALLUCINATION = "hallucination"
    CORRECT = "correct"


def _freeze(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True).reshape(-1)
    if arr.size == 0:
        raise ValueError("vector must have at least one component")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector components must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SemanticSpace:
    """An n-dimensional space of atomic semantic units.

    ``labels``, when given, names the units; they must be unique and
    there must be exactly ``n`` of them.
    """

    n: int
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"space dimension must be >= 1, got {self.n}")
        if self.labels is not None:
            labels = tuple(self.labels)
            object.__setattr__(self, "labels", labels)
            if len(labels) != self.n:
                raise ValueError(
                    f"expected {self.n} labels, got {len(labels)}"
                )
            if len(set(labels)) != len(labels):
                raise ValueError("unit labels must be unique")


@dataclass(frozen=True, eq=False)
class SemanticPoint:
    """A point in the semantic space: one presence probability per unit."""

    values: np.ndarray
    mode: Mode = Mode.VALID

    def __post_init__(self):
        arr = _freeze(self.values)
        object.__setattr__(self, "values", arr)
        if self.mode is Mode.VALID and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("semantic point components must lie in [0, 1]")

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, SemanticPoint):
            return NotImplemented
        return self.mode is other.mode and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class ImportanceVector:
    """Per-unit relevance weights in [0, 1] (1 = essential, 0 = irrelevant)."""

    values: np.ndarray

    def __post_init__(self):
        arr = _freeze(self.values)
        object.__setattr__(self, "values", arr)
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("importance weights must lie in [0, 1]")

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImportanceVector):
            return NotImplemented
        return np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class ErrorVector:
    """Signed semantic error, one component per unit."""

    values: np.ndarray
    mode: Mode = Mode.VALID

    def __post_init__(self):
        arr = _freeze(self.values)
        object.__setattr__(self, "values", arr)
        if self.mode is Mode.VALID and (arr.min() < -1.0 or arr.max() > 1.0):
            raise ValueError("error components must lie in [-1, 1]")

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, ErrorVector):
            return NotImplemented
        return self.mode is other.mode and np.array_equal(self.values, other.values)


def _require_same_length(a, b) -> None:
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")


def _combine_modes(*modes: Mode) -> Mode:
    if any(m is Mode.UNCONSTRAINED for m in modes):
        return Mode.UNCONSTRAINED
    return Mode.VALID


def hadamard(a: ImportanceVector, x: SemanticPoint) -> SemanticPoint:
    """Importance-weight a point component-wise: ``result_i = a_i * x_i``."""
    _require_same_length(a, x)
    return SemanticPoint(a.values * x.values, mode=x.mode)


def semantic_error(y: SemanticPoint, x: SemanticPoint) -> ErrorVector:
    """Signed error of recovered semantics ``y`` against source ``x``."""
    _require_same_length(y, x)
    return ErrorVector(y.values - x.values, mode=_combine_modes(y.mode, x.mode))


def classify_error(z: ErrorVector, tol: float) -> list[ErrorLabel]:
    """Label each unit: below ``-tol`` undercoverage, above ``+tol``
    hallucination, otherwise correct."""
    if tol < 0:
        raise ValueError(f"tolerance must be >= 0, got {tol}")
    labels = []
    for v in z.values:
        if v < -tol:
            labels.append(ErrorLabel.UNDERCOVERAGE)
        elif v > tol:
            labels.append(ErrorLabel.HALLUCINATION)
        else:
            labels.append(ErrorLabel.CORRECT)
    return labels


def error_norm(z: ErrorVector, kind: Norm = DEFAULT_NORM) -> float:
    """Vector norm of an error vector."""
    if kind is Norm.L1:
        return float(np.sum(np.abs(z.values)))
    if kind is Norm.L2:
        return float(np.sqrt(np.sum(z.values * z.values)))
    if kind is Norm.LINF:
        return float(np.max(np.abs(z.values)))
    raise ValueError(f"unknown norm kind: {kind!r}")
