"""Pure-numpy trial kernel.

Bit-identical to the compiled kernel: every floating-point operation is
performed in the same order with no fused multiply-add, and all random
draws come from the shared counter-based stream.  Accumulations over the
m patches are explicit Python loops over j so the per-element rounding
sequence matches the C loops.
"""

from __future__ import annotations

import numpy as np

from poca.theory.kernel import (
    PERT_MERGE_NOISE,
    PERT_NONLINEAR_GLOBAL,
    PHI_CONVEX,
    PHI_PARABOLIC,
    PHI_SQRT_PARABOLIC,
    PHI_TENT,
    SIGN_ALL_NEGATIVE,
    SIGN_ALL_POSITIVE,
    SIGN_ALTERNATING,
    SIGN_SEEDED_RANDOM,
    draws_from_key,
    trial_key,
    uniforms_from_key,
)


def _phi(kind: int, scale: float, v: np.ndarray) -> np.ndarray:
    if kind == PHI_PARABOLIC:
        return scale * (v * (1.0 - v))
    if kind == PHI_TENT:
        return scale * np.minimum(v, 1.0 - v)
    if kind == PHI_SQRT_PARABOLIC:
        return scale * np.sqrt(v * (1.0 - v))
    if kind == PHI_CONVEX:
        return scale * (v * v)
    raise ValueError(f"unknown phi kind code: {kind}")


def _signs(kind: int, sign_seed: int, trials: np.ndarray, n: int, m: int) -> np.ndarray:
    """Sign factors, shape (T, m + 1, n); row 0 is the global caption."""
    count = trials.size
    if kind == SIGN_ALL_NEGATIVE:
        return np.full((count, m + 1, n), -1.0)
    if kind == SIGN_ALL_POSITIVE:
        return np.ones((count, m + 1, n))
    if kind == SIGN_ALTERNATING:
        row = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
        return np.broadcast_to(row, (count, m + 1, n)).copy()
    if kind == SIGN_SEEDED_RANDOM:
        skey = trial_key(sign_seed, trials)[:, None]
        d = draws_from_key(skey, np.arange((m + 1) * n, dtype=np.uint64))
        bit = (d & np.uint64(1)).astype(bool)
        return np.where(bit, 1.0, -1.0).reshape(count, m + 1, n)
    raise ValueError(f"unknown sign kind code: {kind}")


def run_trials(
    seed: int,
    t0: int,
    count: int,
    n: int,
    m: int,
    phi_kind: int,
    phi_scale: float,
    sign_kind: int,
    sign_seed: int,
    eta_fixed: float,
    alpha_fixed: np.ndarray,
    pert_kind: int,
    pert_mag: float,
) -> dict[str, np.ndarray]:
    """Run trials [t0, t0 + count) and return per-unit arrays.

    ``eta_fixed < 0`` samples eta uniformly in (0, 1); an empty
    ``alpha_fixed`` samples simplex weights as sorted-uniform spacings
    (a flat Dirichlet).  ``pert_kind`` optionally breaks an assumption:
    additive noise on the merged point, or a clamped shift of the global
    point away from the convex combination of the locals.
    """
    trials = np.arange(t0, t0 + count, dtype=np.uint64)
    key = trial_key(seed, trials)[:, None]

    x_l = uniforms_from_key(key, np.arange(m * n, dtype=np.uint64)).reshape(count, m, n)

    alpha_fixed = np.asarray(alpha_fixed, dtype=np.float64)
    if alpha_fixed.size:
        alpha = np.broadcast_to(alpha_fixed, (count, m)).copy()
    elif m == 1:
        alpha = np.ones((count, 1))
    else:
        u = uniforms_from_key(key, m * n + np.arange(m - 1, dtype=np.uint64))
        u = np.sort(u, axis=1)
        alpha = np.empty((count, m))
        alpha[:, 0] = u[:, 0]
        if m > 2:
            alpha[:, 1 : m - 1] = u[:, 1:] - u[:, :-1]
        alpha[:, m - 1] = 1.0 - u[:, -1]

    if eta_fixed >= 0.0:
        eta = np.full(count, eta_fixed)
    else:
        eta = uniforms_from_key(key, np.array([m * n + m - 1], dtype=np.uint64))[:, 0]
    one_minus = 1.0 - eta
    eta_c = eta[:, None]
    one_minus_c = one_minus[:, None]

    x_g = np.zeros((count, n))
    for j in range(m):
        x_g = x_g + alpha[:, j : j + 1] * x_l[:, j, :]
    if pert_kind == PERT_NONLINEAR_GLOBAL:
        x_g = np.minimum(np.maximum(x_g + pert_mag, 0.0), 1.0)

    signs = _signs(sign_kind, sign_seed, trials, n, m)
    phi_l = _phi(phi_kind, phi_scale, x_l)
    z_l = signs[:, 1:, :] * phi_l
    phi_g = _phi(phi_kind, phi_scale, x_g)
    z_g = signs[:, 0, :] * phi_g

    y_l = x_l + z_l
    acc_y = np.zeros((count, n))
    for j in range(m):
        acc_y = acc_y + alpha[:, j : j + 1] * y_l[:, j, :]
    y_g = x_g + z_g
    y_m = eta_c * y_g + one_minus_c * acc_y
    if pert_kind == PERT_MERGE_NOISE:
        noise = uniforms_from_key(key, m * n + m + np.arange(n, dtype=np.uint64))
        y_m = y_m + pert_mag * (2.0 * noise - 1.0)
    z_m = y_m - x_g

    acc_z = np.zeros((count, n))
    for j in range(m):
        acc_z = acc_z + alpha[:, j : j + 1] * z_l[:, j, :]
    z_rec = eta_c * z_g + one_minus_c * acc_z
    recomposition_error = np.abs(z_m - z_rec)

    acc_phi = np.zeros((count, n))
    for j in range(m):
        acc_phi = acc_phi + alpha[:, j : j + 1] * phi_l[:, j, :]
    jensen = phi_g - acc_phi
    lower_bound = one_minus_c * jensen
    gap = np.abs(z_g) - np.abs(z_m)

    return {
        "gap": gap,
        "lower_bound": lower_bound,
        "jensen": jensen,
        "z_global": z_g,
        "z_merged": z_m,
        "recomposition_error": recomposition_error,
        "x_global": x_g,
        "eta": eta,
        "alpha": alpha,
    }
