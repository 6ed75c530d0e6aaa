"""Monte Carlo engine for the merge-error guarantee and violation studies.

The engine runs batches of independent trials through the active kernel,
then aggregates violation counts, gap quantiles, and norm comparisons.
Because every draw is a pure function of (seed, trial, slot), the same
configuration produces the same summary regardless of chunking or worker
count; the summary carries no wall-clock data so serialized summaries
compare byte-for-byte.

``run_monte_carlo`` verifies the guarantee under the stated assumptions
(concave error model, exact convex split, blended merge); assumption-
satisfying runs are expected to report zero violations.
``run_violation_study`` deliberately breaks one assumption and reports
the observed violation frequency without asserting anything.
"""

from __future__ import annotations

import enum
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from poca.semantic import Mode, SemanticPoint, semantic_error
from poca.theory import kernel as _k
from poca.theory.models import (
    ConcaveErrorModel,
    MergeSpec,
    SignPolicy,
    SplitSpec,
    TrialRecord,
    TrialStream,
    _convex_combination,
    apply_error_model,
    draw_alpha,
    draw_eta,
    sample_split,
    merge_semantics,
)

__all__ = [
    "GAP_TOL",
    "IDENTITY_TOL",
    "MonteCarloConfig",
    "MonteCarloSummary",
    "Perturbation",
    "PerturbationKind",
    "run_monte_carlo",
    "run_violation_study",
    "sample_trial",
]

#: Absolute tolerance for every inequality check.
GAP_TOL = 1e-9
#: Absolute tolerance for the merged-error recomposition identity.
IDENTITY_TOL = 1e-12

_HIST_BINS = 64


class PerturbationKind(enum.Enum):
    CONVEX_PHI = "convex_phi"
    MERGE_NOISE = "merge_noise"
    NONLINEAR_GLOBAL = "nonlinear_global"


@dataclass(frozen=True)
class Perturbation:
    """A deliberate assumption violation for observational studies.

    For ``convex_phi`` the magnitude is the scale of the replacement
    error curve scale * x^2; for the other kinds it is the additive
    amplitude (zero magnitude reproduces the unperturbed run exactly).
    """

    kind: PerturbationKind
    magnitude: float = 1.0

    def __post_init__(self):
        if self.kind is PerturbationKind.CONVEX_PHI and not self.magnitude > 0:
            raise ValueError("convex_phi needs a positive scale")
        if self.magnitude < 0:
            raise ValueError("perturbation magnitude must be >= 0")


@dataclass(frozen=True)
class MonteCarloConfig:
    """Trial-generation settings.

    ``eta=None`` samples the merge coefficient uniformly in (0, 1) per
    trial; ``alpha=None`` samples flat-Dirichlet convex weights per
    trial.  Fixed values are validated up front.
    """

    n: int
    m: int
    trials: int
    seed: int
    phi: ConcaveErrorModel
    sign: SignPolicy
    eta: float | None = None
    alpha: tuple[float, ...] | None = None
    workers: int = 1
    # results are chunk-independent; 1024 keeps the numpy fallback's
    # working set inside cache
    chunk_size: int = 1024

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if self.chunk_size < 1:
            raise ValueError(f"chunk_size must be >= 1, got {self.chunk_size}")
        if self.eta is not None:
            MergeSpec(self.eta)
        if self.alpha is not None:
            alpha = tuple(float(a) for a in self.alpha)
            object.__setattr__(self, "alpha", alpha)
            SplitSpec(self.m, alpha)

    def echo(self, perturbation: Perturbation | None = None) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "trials": self.trials,
            "seed": self.seed,
            "phi": {"kind": self.phi.kind.value, "scale": self.phi.scale},
            "sign": {"kind": self.sign.kind.value, "seed": self.sign.seed},
            "eta": self.eta,
            "alpha": list(self.alpha) if self.alpha is not None else None,
            "workers": self.workers,
            "perturbation": None
            if perturbation is None
            else {"kind": perturbation.kind.value, "magnitude": perturbation.magnitude},
        }


@dataclass(frozen=True)
class MonteCarloSummary:
    """Aggregated trial statistics; serializes deterministically."""

    config: dict
    backend: str
    violations: dict[str, int]
    violation_frequency: float
    gap_quantiles: dict[str, float]
    min_gap: float
    median_gap: float
    min_lower_bound: float
    max_identity_error: float
    norms: dict[str, dict[str, float]]
    gap_histogram: dict[str, list]

    @property
    def total_violations(self) -> int:
        return sum(self.violations.values())

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "backend": self.backend,
            "violations": self.violations,
            "violation_frequency": self.violation_frequency,
            "gap_quantiles": self.gap_quantiles,
            "min_gap": self.min_gap,
            "median_gap": self.median_gap,
            "min_lower_bound": self.min_lower_bound,
            "max_identity_error": self.max_identity_error,
            "norms": self.norms,
            "gap_histogram": self.gap_histogram,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _kernel_args(cfg: MonteCarloConfig, perturbation: Perturbation | None):
    phi_kind, phi_scale = cfg.phi.kind.code, cfg.phi.scale
    pert_kind, pert_mag = _k.PERT_NONE, 0.0
    if perturbation is not None:
        if perturbation.kind is PerturbationKind.CONVEX_PHI:
            phi_kind, phi_scale = _k.PHI_CONVEX, perturbation.magnitude
        elif perturbation.kind is PerturbationKind.MERGE_NOISE:
            pert_kind, pert_mag = _k.PERT_MERGE_NOISE, perturbation.magnitude
        else:
            pert_kind, pert_mag = _k.PERT_NONLINEAR_GLOBAL, perturbation.magnitude
    alpha_fixed = np.asarray(
        cfg.alpha if cfg.alpha is not None else [], dtype=np.float64
    )
    eta_fixed = cfg.eta if cfg.eta is not None else -1.0
    return (
        _k.mask64(cfg.seed),
        cfg.n,
        cfg.m,
        phi_kind,
        phi_scale,
        cfg.sign.kind.code,
        _k.mask64(cfg.sign.seed),
        eta_fixed,
        alpha_fixed,
        pert_kind,
        pert_mag,
    )


def _run(cfg: MonteCarloConfig, perturbation: Perturbation | None) -> MonteCarloSummary:
    (
        seed,
        n,
        m,
        phi_kind,
        phi_scale,
        sign_kind,
        sign_seed,
        eta_fixed,
        alpha_fixed,
        pert_kind,
        pert_mag,
    ) = _kernel_args(cfg, perturbation)

    spans = [
        (t0, min(cfg.chunk_size, cfg.trials - t0))
        for t0 in range(0, cfg.trials, cfg.chunk_size)
    ]

    def chunk(span):
        t0, count = span
        return _k.run_trials(
            seed,
            t0,
            count,
            n,
            m,
            phi_kind,
            phi_scale,
            sign_kind,
            sign_seed,
            eta_fixed,
            alpha_fixed,
            pert_kind,
            pert_mag,
        )

    if cfg.workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            parts = list(pool.map(chunk, spans))
    else:
        parts = [chunk(span) for span in spans]

    gap = np.concatenate([p["gap"] for p in parts])
    lower = np.concatenate([p["lower_bound"] for p in parts])
    recomp = np.concatenate([p["recomposition_error"] for p in parts])
    z_g = np.concatenate([p["z_global"] for p in parts])
    z_m = np.concatenate([p["z_merged"] for p in parts])

    violations = {
        "per_unit_gap": int(np.count_nonzero(gap < -GAP_TOL)),
        "gap_below_lower_bound": int(np.count_nonzero(gap < lower - GAP_TOL)),
        "negative_lower_bound": int(np.count_nonzero(lower < -GAP_TOL)),
        "recomposition_identity": int(np.count_nonzero(recomp > IDENTITY_TOL)),
    }
    norms = {}
    for name, reduce_g, reduce_m in (
        ("l1", np.abs(z_g).sum(axis=1), np.abs(z_m).sum(axis=1)),
        ("l2", np.sqrt((z_g * z_g).sum(axis=1)), np.sqrt((z_m * z_m).sum(axis=1))),
        ("linf", np.abs(z_g).max(axis=1), np.abs(z_m).max(axis=1)),
    ):
        excess = reduce_m - reduce_g
        violations[f"norm_{name}"] = int(np.count_nonzero(excess > GAP_TOL))
        norms[name] = {
            "mean_global": float(reduce_g.mean()),
            "mean_merged": float(reduce_m.mean()),
            "max_excess": float(excess.max()),
        }

    flat = gap.ravel()
    q = np.quantile(flat, [0.0, 0.01, 0.5, 0.99, 1.0])
    counts, edges = np.histogram(flat, bins=_HIST_BINS)

    return MonteCarloSummary(
        config=cfg.echo(perturbation),
        backend=_k.KERNEL_BACKEND,
        violations=violations,
        violation_frequency=float(violations["per_unit_gap"] / flat.size),
        gap_quantiles={
            "min": float(q[0]),
            "p01": float(q[1]),
            "p50": float(q[2]),
            "p99": float(q[3]),
            "max": float(q[4]),
        },
        min_gap=float(q[0]),
        median_gap=float(q[2]),
        min_lower_bound=float(lower.min()),
        max_identity_error=float(recomp.max()),
        norms=norms,
        gap_histogram={
            "edges": [float(e) for e in edges],
            "counts": [int(c) for c in counts],
        },
    )


def run_monte_carlo(cfg: MonteCarloConfig) -> MonteCarloSummary:
    """Run assumption-satisfying trials and summarize the gap statistics."""
    return _run(cfg, None)


def run_violation_study(
    cfg: MonteCarloConfig, perturbation: Perturbation
) -> MonteCarloSummary:
    """Run trials with one assumption deliberately broken (report-only)."""
    return _run(cfg, perturbation)


def sample_trial(cfg: MonteCarloConfig, trial: int) -> TrialRecord:
    """Reconstruct one unperturbed trial through the readable model path.

    Uses the same counter stream as the kernels, so the resulting record
    matches the corresponding kernel row bit-for-bit.
    """
    if not 0 <= trial < cfg.trials:
        raise ValueError(f"trial index {trial} outside [0, {cfg.trials})")
    stream = TrialStream(_k.mask64(cfg.seed), trial)
    alpha = cfg.alpha if cfg.alpha is not None else draw_alpha(stream, cfg.n, cfg.m)
    spec = SplitSpec(cfg.m, alpha)
    eta = cfg.eta if cfg.eta is not None else draw_eta(stream, cfg.n, cfg.m)
    merge = MergeSpec(eta)

    x_locals, x_global = sample_split(spec, cfg.n, stream)
    z_global = apply_error_model(x_global, cfg.phi, cfg.sign, trial, stream=0)
    z_locals = [
        apply_error_model(x_locals[j], cfg.phi, cfg.sign, trial, stream=j + 1)
        for j in range(cfg.m)
    ]
    y_global = SemanticPoint(
        x_global.values + z_global.values, mode=Mode.UNCONSTRAINED
    )
    y_locals = [
        SemanticPoint(x_locals[j].values + z_locals[j].values, mode=Mode.UNCONSTRAINED)
        for j in range(cfg.m)
    ]
    merged = merge_semantics(y_global, y_locals, spec, merge)
    z_merged = semantic_error(merged, x_global)

    gap = np.abs(z_global.values) - np.abs(z_merged.values)
    phi_mix = _convex_combination(spec.alpha, [np.abs(z.values) for z in z_locals])
    lower = (1.0 - eta) * (np.abs(z_global.values) - phi_mix)
    return TrialRecord(
        x_global=x_global,
        x_locals=x_locals,
        z_global=z_global,
        z_locals=z_locals,
        z_merged=z_merged,
        alpha=spec.alpha,
        eta=eta,
        per_unit_gap=gap,
        per_unit_lower_bound=lower,
    )
