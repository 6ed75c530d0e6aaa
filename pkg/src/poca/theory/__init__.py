"""Error-model algebra and Monte Carlo verification of the merge guarantee.

``models`` holds the readable single-trial building blocks (concave error
models, sign policies, split/merge algebra, per-unit gap computations).
``engine`` runs many trials through a vectorized kernel and aggregates
violation counts and gap statistics.  ``kernel`` selects the compiled
trial kernel when the extension is built, falling back to a bit-identical
pure-numpy implementation.
"""

from poca.theory.engine import (
    MonteCarloConfig,
    MonteCarloSummary,
    Perturbation,
    PerturbationKind,
    run_monte_carlo,
    run_violation_study,
    sample_trial,
)
from poca.theory.kernel import KERNEL_BACKEND
from poca.theory.models import (
    ConcaveErrorModel,
    MergeSpec,
    PhiKind,
    SignKind,
    SignPolicy,
    SplitSpec,
    TrialRecord,
    TrialStream,
    apply_error_model,
    jensen_gap,
    merge_semantics,
    sample_split,
    theorem_gap,
)

__all__ = [
    "KERNEL_BACKEND",
    "ConcaveErrorModel",
    "MergeSpec",
    "MonteCarloConfig",
    "MonteCarloSummary",
    "Perturbation",
    "PerturbationKind",
    "PhiKind",
    "SignKind",
    "SignPolicy",
    "SplitSpec",
    "TrialRecord",
    "TrialStream",
    "apply_error_model",
    "jensen_gap",
    "merge_semantics",
    "run_monte_carlo",
    "run_violation_study",
    "sample_split",
    "sample_trial",
    "theorem_gap",
]
