"""Single-trial building blocks for the merge-error analysis.

The error model maps a presence probability to an error magnitude
through a concave function (uncertain units get larger errors); a
configurable sign policy turns magnitudes into signed errors, since the
magnitude constraint leaves signs free.  Split and merge here are the
semantic-space counterparts of image splitting and caption merging: a
global point is an exact convex combination of local points, and a
merged point is an eta-weighted blend of the global point with the
convex combination of the locals.

These functions are the readable reference path; the vectorized kernels
in ``_kernel_py``/``_mc_kernel`` compute the same quantities with the
same rounding, which the consistency tests check bit-for-bit.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from poca.semantic import ErrorVector, Mode, Norm, SemanticPoint, error_norm
from poca.theory import kernel as _k

__all__ = [
    "PhiKind",
    "SignKind",
    "ConcaveErrorModel",
    "SignPolicy",
    "SplitSpec",
    "MergeSpec",
    "TrialStream",
    "TrialRecord",
    "apply_error_model",
    "sample_split",
    "draw_alpha",
    "draw_eta",
    "merge_semantics",
    "jensen_gap",
    "theorem_gap",
]

_CONCAVITY_TOL = 1e-9
_GRID = np.linspace(0.0, 1.0, 101)


class PhiKind(enum.Enum):
    PARABOLIC = "parabolic"
    TENT = "tent"
    SQRT_PARABOLIC = "sqrt_parabolic"

    @property
    def code(self) -> int:
        return {
            PhiKind.PARABOLIC: _k.PHI_PARABOLIC,
            PhiKind.TENT: _k.PHI_TENT,
            PhiKind.SQRT_PARABOLIC: _k.PHI_SQRT_PARABOLIC,
        }[self]


class SignKind(enum.Enum):
    ALL_NEGATIVE = "all_negative"
    ALL_POSITIVE = "all_positive"
    SEEDED_RANDOM = "seeded_random"
    ALTERNATING = "alternating"

    @property
    def code(self) -> int:
        return {
            SignKind.ALL_NEGATIVE: _k.SIGN_ALL_NEGATIVE,
            SignKind.ALL_POSITIVE: _k.SIGN_ALL_POSITIVE,
            SignKind.SEEDED_RANDOM: _k.SIGN_SEEDED_RANDOM,
            SignKind.ALTERNATING: _k.SIGN_ALTERNATING,
        }[self]


@dataclass(frozen=True)
class ConcaveErrorModel:
    """Error-magnitude model: a scaled concave bump on [0, 1].

    ``valid_semantics=True`` additionally requires the magnitude to stay
    within min(x, 1 - x) everywhere, so that adding the error cannot push
    a point outside [0, 1].  Parabolic and tent models with scale <= 1
    satisfy this; the square-root model never does near the endpoints.
    """

    kind: PhiKind
    scale: float = 1.0
    valid_semantics: bool = False

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")
        vals = self.phi(_GRID)
        if vals.min() < 0.0:
            raise ValueError("error magnitude must be non-negative on [0, 1]")
        mid = self.phi((_GRID[:, None] + _GRID[None, :]) / 2.0)
        chord = (vals[:, None] + vals[None, :]) / 2.0
        if np.min(mid - chord) < -_CONCAVITY_TOL:
            raise ValueError(f"{self.kind.value} model failed the concavity check")
        if self.valid_semantics:
            cap = np.minimum(_GRID, 1.0 - _GRID)
            if np.max(vals - cap) > 1e-12:
                raise ValueError(
                    "valid-semantics mode requires phi(x) <= min(x, 1-x); "
                    f"violated by {self.kind.value} with scale {self.scale}"
                )

    def phi(self, x):
        """Evaluate the error magnitude; mirrors the kernel arithmetic."""
        v = np.asarray(x, dtype=np.float64)
        if self.kind is PhiKind.PARABOLIC:
            return self.scale * (v * (1.0 - v))
        if self.kind is PhiKind.TENT:
            return self.scale * np.minimum(v, 1.0 - v)
        return self.scale * np.sqrt(v * (1.0 - v))


@dataclass(frozen=True)
class SignPolicy:
    """Assigns a sign to each per-unit error magnitude.

    ``seeded_random`` draws the sign as a pure function of
    (seed, trial, stream, unit) from the shared counter stream, where
    stream 0 is the global caption and stream j+1 is local patch j.
    """

    kind: SignKind = SignKind.SEEDED_RANDOM
    seed: int = 0

    def sample(self, trial: int, n: int, stream: int = 0) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        if self.kind is SignKind.ALL_NEGATIVE:
            return np.full(n, -1.0)
        if self.kind is SignKind.ALL_POSITIVE:
            return np.ones(n)
        if self.kind is SignKind.ALTERNATING:
            return np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
        skey = _k.trial_key(self.seed, trial)
        d = _k.draws_from_key(skey, stream * n + np.arange(n, dtype=np.uint64))
        return np.where((d & np.uint64(1)).astype(bool), 1.0, -1.0)


@dataclass(frozen=True)
class SplitSpec:
    """Patch count and convex weights tying local semantics to the global."""

    m: int
    alpha: tuple[float, ...]

    def __post_init__(self):
        alpha = tuple(float(a) for a in self.alpha)
        object.__setattr__(self, "alpha", alpha)
        if self.m < 1:
            raise ValueError(f"patch count must be >= 1, got {self.m}")
        if len(alpha) != self.m:
            raise ValueError(f"expected {self.m} weights, got {len(alpha)}")
        if any(a < 0 for a in alpha):
            raise ValueError("weights must be non-negative")
        if abs(math.fsum(alpha) - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {math.fsum(alpha)}")


@dataclass(frozen=True)
class MergeSpec:
    """Merge coefficient: weight of the global caption in the blend."""

    eta: float

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ValueError(f"eta must lie strictly in (0, 1), got {self.eta}")


@dataclass(frozen=True)
class TrialStream:
    """Uniform draws for one trial of the counter-based stream."""

    seed: int
    trial: int

    def uniforms(self, slot0: int, count: int) -> np.ndarray:
        key = _k.trial_key(self.seed, self.trial)
        return _k.uniforms_from_key(key, slot0 + np.arange(count, dtype=np.uint64))


def _convex_combination(alpha, arrays) -> np.ndarray:
    # sequential accumulation, matching the kernels' rounding order
    acc = np.zeros_like(arrays[0])
    for a, arr in zip(alpha, arrays):
        acc = acc + a * arr
    return acc


def apply_error_model(
    x: SemanticPoint,
    model: ConcaveErrorModel,
    sign: SignPolicy,
    trial: int,
    stream: int = 0,
) -> ErrorVector:
    """Signed error for a point: magnitude from the model, sign from the policy."""
    signs = sign.sample(trial, len(x), stream=stream)
    return ErrorVector(signs * model.phi(x.values), mode=Mode.UNCONSTRAINED)


def sample_split(
    spec: SplitSpec, n: int, stream: TrialStream
) -> tuple[list[SemanticPoint], SemanticPoint]:
    """Sample local points component-uniform and derive the global exactly.

    Sampling the locals first and constructing the global as their convex
    combination is the only way to satisfy the split relationship exactly.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    u = stream.uniforms(0, spec.m * n).reshape(spec.m, n)
    locals_ = [SemanticPoint(u[j]) for j in range(spec.m)]
    x_global = _convex_combination(spec.alpha, [p.values for p in locals_])
    return locals_, SemanticPoint(x_global)


def draw_alpha(stream: TrialStream, n: int, m: int) -> tuple[float, ...]:
    """Flat-Dirichlet weights as sorted-uniform spacings (kernel-identical)."""
    if m == 1:
        return (1.0,)
    u = np.sort(stream.uniforms(m * n, m - 1))
    alpha = np.empty(m)
    alpha[0] = u[0]
    if m > 2:
        alpha[1 : m - 1] = u[1:] - u[:-1]
    alpha[m - 1] = 1.0 - u[-1]
    return tuple(alpha)


def draw_eta(stream: TrialStream, n: int, m: int) -> float:
    """Uniform merge coefficient strictly inside (0, 1) (kernel-identical)."""
    return float(stream.uniforms(m * n + m - 1, 1)[0])


def merge_semantics(
    y_global: SemanticPoint,
    y_locals: list[SemanticPoint],
    spec: SplitSpec,
    merge: MergeSpec,
) -> SemanticPoint:
    """Blend global and local caption semantics with weight eta on the global."""
    if len(y_locals) != spec.m:
        raise ValueError(f"expected {spec.m} local points, got {len(y_locals)}")
    n = len(y_global)
    if any(len(p) != n for p in y_locals):
        raise ValueError("local points must match the global dimension")
    acc = _convex_combination(spec.alpha, [p.values for p in y_locals])
    merged = merge.eta * y_global.values + (1.0 - merge.eta) * acc
    return SemanticPoint(merged, mode=Mode.UNCONSTRAINED)


def jensen_gap(
    x_locals: list[SemanticPoint], spec: SplitSpec, model: ConcaveErrorModel
) -> np.ndarray:
    """Per-unit slack of the concavity inequality at the local points.

    phi(convex combination) minus the convex combination of phi values;
    non-negative whenever the model is concave.
    """
    if len(x_locals) != spec.m:
        raise ValueError(f"expected {spec.m} local points, got {len(x_locals)}")
    values = [p.values for p in x_locals]
    x_global = _convex_combination(spec.alpha, values)
    phi_mix = _convex_combination(spec.alpha, [model.phi(v) for v in values])
    return model.phi(x_global) - phi_mix


@dataclass(frozen=True)
class TrialRecord:
    """All quantities of a single split/merge trial."""

    x_global: SemanticPoint
    x_locals: list[SemanticPoint]
    z_global: ErrorVector
    z_locals: list[ErrorVector]
    z_merged: ErrorVector
    alpha: tuple[float, ...]
    eta: float
    per_unit_gap: np.ndarray
    per_unit_lower_bound: np.ndarray
    norms: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.x_global)
        m = len(self.x_locals)
        if len(self.alpha) != m or len(self.z_locals) != m:
            raise ValueError("per-patch field lengths disagree")
        for vec in (self.z_global, self.z_merged, *self.x_locals, *self.z_locals):
            if len(vec) != n:
                raise ValueError("per-unit field lengths disagree")
        if not self.norms:
            object.__setattr__(
                self,
                "norms",
                {
                    which: {
                        k.value: error_norm(z, k) for k in (Norm.L1, Norm.L2, Norm.LINF)
                    }
                    for which, z in (("global", self.z_global), ("merged", self.z_merged))
                },
            )


def theorem_gap(t: TrialRecord, merge: MergeSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit error reduction and its guaranteed lower bound.

    The gap is |global error| - |merged error|; the bound is (1 - eta)
    times the concavity slack, recovered from the trial's own error
    magnitudes (|z| equals phi(x) by construction).
    """
    gap = np.abs(t.z_global.values) - np.abs(t.z_merged.values)
    phi_mix = _convex_combination(t.alpha, [np.abs(z.values) for z in t.z_locals])
    lower = (1.0 - merge.eta) * (np.abs(t.z_global.values) - phi_mix)
    return gap, lower
