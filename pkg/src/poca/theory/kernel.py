"""Counter-based random stream and trial-kernel selection.

Every random draw in the simulator is a pure function of
``(seed, trial index, slot index)`` via the splitmix64 finalizer, so
results do not depend on execution order, chunking, or worker count.
The same stream is implemented twice: in the compiled extension
(``poca.theory._mc_kernel``) and in pure numpy
(``poca.theory._kernel_py``).  Both use only IEEE-exact operations
(integer mixing, +, -, *, /, sqrt, min/max) in the same order, so their
outputs are bit-identical; the parity test in the suite enforces this.

Set ``POCA_KERNEL=python`` in the environment to force the fallback.

Slot layout of the main stream, per trial (n units, m patches):

    [0, m*n)              component uniforms for the m local points
    [m*n, m*n + m - 1)    uniforms for the simplex weights (sorted spacings)
    m*n + m - 1           uniform for the merge coefficient eta
    [m*n + m, m*n + m+n)  uniforms for additive merge noise (studies only)

Sign draws live in a separate stream keyed by the sign policy's own
seed, with slot ``stream * n + unit`` where stream 0 is the global
caption and stream j+1 is local patch j.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "GOLDEN",
    "KERNEL_BACKEND",
    "PHI_PARABOLIC",
    "PHI_TENT",
    "PHI_SQRT_PARABOLIC",
    "PHI_CONVEX",
    "SIGN_ALL_NEGATIVE",
    "SIGN_ALL_POSITIVE",
    "SIGN_SEEDED_RANDOM",
    "SIGN_ALTERNATING",
    "PERT_NONE",
    "PERT_MERGE_NOISE",
    "PERT_NONLINEAR_GLOBAL",
    "available_kernels",
    "mask64",
    "mix64",
    "run_trials",
    "trial_key",
    "uniforms_from_key",
]

# splitmix64 constants
GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_SH30 = np.uint64(30)
_SH27 = np.uint64(27)
_SH31 = np.uint64(31)
_SH11 = np.uint64(11)
_ONE = np.uint64(1)
# 2^-53, exact
_TWO_NEG53 = 1.0 / 9007199254740992.0

# integer codes shared with the compiled kernel
PHI_PARABOLIC = 0
PHI_TENT = 1
PHI_SQRT_PARABOLIC = 2
PHI_CONVEX = 3

SIGN_ALL_NEGATIVE = 0
SIGN_ALL_POSITIVE = 1
SIGN_SEEDED_RANDOM = 2
SIGN_ALTERNATING = 3

PERT_NONE = 0
PERT_MERGE_NOISE = 2
PERT_NONLINEAR_GLOBAL = 3


def mask64(seed: int) -> int:
    """Reduce an arbitrary Python integer to an unsigned 64-bit seed."""
    return int(seed) & 0xFFFFFFFFFFFFFFFF


def mix64(z: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    """splitmix64 finalizer, vectorized over uint64 arrays."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _SH30)) * _MIX1
        z = (z ^ (z >> _SH27)) * _MIX2
        return z ^ (z >> _SH31)


def trial_key(seed: int, trials: np.ndarray | int) -> np.ndarray | np.uint64:
    """Per-trial stream key: mix(seed + (trial + 1) * GOLDEN)."""
    t = np.asarray(trials, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix64(np.uint64(mask64(seed)) + (t + _ONE) * GOLDEN)


def draws_from_key(key, slots) -> np.ndarray:
    """Raw 64-bit draws for the given slot indices (broadcasts key x slots)."""
    s = np.asarray(slots, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix64(np.asarray(key, dtype=np.uint64) + (s + _ONE) * GOLDEN)


def uniforms_from_key(key, slots) -> np.ndarray:
    """Uniform doubles strictly inside (0, 1) for the given slots.

    The low bit is forced on before scaling by 2^-53 so neither endpoint
    is reachable and every step is IEEE-exact.
    """
    d = draws_from_key(key, slots)
    return ((d >> _SH11) | _ONE).astype(np.float64) * _TWO_NEG53


def _load_backend():
    forced = os.environ.get("POCA_KERNEL", "").strip().lower()
    if forced not in ("", "python", "compiled"):
        raise ValueError(f"POCA_KERNEL must be 'python' or 'compiled', got {forced!r}")
    if forced != "python":
        try:
            from poca.theory import _mc_kernel

            return "compiled", _mc_kernel.run_trials
        except ImportError:
            if forced == "compiled":
                raise
    from poca.theory import _kernel_py

    return "python", _kernel_py.run_trials


KERNEL_BACKEND, run_trials = _load_backend()


def available_kernels() -> dict[str, object]:
    """All importable kernels by name (used by the parity test and benchmark)."""
    from poca.theory import _kernel_py

    kernels: dict[str, object] = {"python": _kernel_py.run_trials}
    try:
        from poca.theory import _mc_kernel

        kernels["compiled"] = _mc_kernel.run_trials
    except ImportError:
        pass
    return kernels
