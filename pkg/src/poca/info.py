"""Discrete information measures and the three-term captioning objective.

Everything is in bits (log base 2).  The composite objective scores a
captioning system by information sufficiency (mutual information between
caption and importance-weighted image semantics), minimal redundancy
(negated caption entropy), and human comprehensibility (negated
divergence from a natural-language distribution):

    j_total = j_suf + beta * j_min + gamma * j_int
            = j_suf - beta * H - gamma * D

so larger beta penalizes verbose captions harder and larger gamma
penalizes unnatural language harder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DiscreteDistribution",
    "JointDistribution",
    "ObjectiveWeights",
    "ObjectiveReport",
    "entropy",
    "mutual_information",
    "kl_divergence",
    "ib_objective",
    "objective",
]

_SUM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class DiscreteDistribution:
    """A probability distribution over k outcomes."""

    probabilities: np.ndarray
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        p = np.array(self.probabilities, dtype=np.float64, copy=True).reshape(-1)
        if p.size == 0:
            raise ValueError("distribution needs at least one outcome")
        if np.any(p < 0):
            raise ValueError("probabilities must be non-negative")
        total = float(p.sum())
        if abs(total - 1.0) > _SUM_TOL:
            raise ValueError(f"probabilities must sum to 1, got {total}")
        p.setflags(write=False)
        object.__setattr__(self, "probabilities", p)
        if self.labels is not None:
            labels = tuple(self.labels)
            if len(labels) != p.size:
                raise ValueError("one label per outcome required")
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.probabilities.size


@dataclass(frozen=True, eq=False)
class JointDistribution:
    """A joint distribution p(a, b) over k_A x k_B outcomes."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64, copy=True)
        if m.ndim != 2 or m.size == 0:
            raise ValueError("joint must be a non-empty 2-D matrix")
        if np.any(m < 0):
            raise ValueError("joint entries must be non-negative")
        total = float(m.sum())
        if abs(total - 1.0) > _SUM_TOL:
            raise ValueError(f"joint entries must sum to 1, got {total}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def marginal_a(self) -> DiscreteDistribution:
        return DiscreteDistribution(self.matrix.sum(axis=1))

    def marginal_b(self) -> DiscreteDistribution:
        return DiscreteDistribution(self.matrix.sum(axis=0))

    def transpose(self) -> "JointDistribution":
        return JointDistribution(self.matrix.T)


@dataclass(frozen=True)
class ObjectiveWeights:
    """Strictly positive weights for the redundancy and comprehensibility terms."""

    beta: float
    gamma: float

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")


@dataclass(frozen=True)
class ObjectiveReport:
    """The three objective terms (bits) and their weighted total.

    The redundancy and comprehensibility terms are negated penalties, so
    they can never be positive.
    """

    j_suf: float
    j_min: float
    j_int: float
    j_total: float

    def __post_init__(self):
        if self.j_min > 0:
            raise ValueError(f"j_min is a negated entropy, got {self.j_min}")
        if self.j_int > 0:
            raise ValueError(f"j_int is a negated divergence, got {self.j_int}")


def entropy(d: DiscreteDistribution) -> float:
    """Shannon entropy in bits, with 0*log(0) = 0."""
    h = 0.0
    for p in d.probabilities:
        if p > 0.0:
            h -= p * math.log2(p)
    return h


def mutual_information(j: JointDistribution) -> float:
    """Mutual information of a joint distribution, in bits.

    Cells with p(a, b) = 0 contribute nothing; the result is clamped at
    zero to absorb negative rounding residue.
    """
    pa = j.matrix.sum(axis=1)
    pb = j.matrix.sum(axis=0)
    mi = 0.0
    for a in range(j.matrix.shape[0]):
        for b in range(j.matrix.shape[1]):
            p = j.matrix[a, b]
            if p > 0.0:
                mi += p * math.log2(p / (pa[a] * pb[b]))
    return max(mi, 0.0)


def kl_divergence(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """KL divergence D(p || q) in bits.

    Returns ``math.inf`` when absolute continuity fails (some p_i > 0
    where q_i = 0) so parameter sweeps can record the failure instead of
    aborting.  Mismatched outcome sets are an error.
    """
    if len(p) != len(q):
        raise ValueError(f"outcome count mismatch: {len(p)} vs {len(q)}")
    if p.labels is not None and q.labels is not None and p.labels != q.labels:
        raise ValueError("outcome labels differ between p and q")
    d = 0.0
    for pi, qi in zip(p.probabilities, q.probabilities):
        if pi > 0.0:
            if qi == 0.0:
                return math.inf
            d += pi * math.log2(pi / qi)
    return max(d, 0.0)


def ib_objective(i_yt: float, h_y: float, beta: float) -> float:
    """Information-bottleneck score: task information minus an entropy penalty."""
    if not beta > 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    if i_yt < 0:
        raise ValueError(f"mutual information must be >= 0, got {i_yt}")
    if h_y < 0:
        raise ValueError(f"entropy must be >= 0, got {h_y}")
    return i_yt - beta * h_y

def objective(
    j_suf: float, h_y: float, d_lang: float, w: ObjectiveWeights
) -> ObjectiveReport:
    """Assemble the full captioning objective from its raw ingredients.

    ``h_y`` is the caption entropy and ``d_lang`` the divergence from
    natural language, both in bits and both non-negative; they enter the
    report negated (as the redundancy and comprehensibility terms).
    """
    if h_y < 0:
        raise ValueError(f"entropy must be >= 0, got {h_y}")
    if d_lang < 0:
        raise ValueError(f"divergence must be >= 0, got {d_lang}")
    j_min = -h_y
    j_int = -d_lang
    j_total = j_suf + w.beta * j_min + w.gamma * j_int
    return ObjectiveReport(j_suf=j_suf, j_min=j_min, j_int=j_int, j_total=j_total)
