# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled Monte Carlo trial kernel.

Mirrors poca.theory._kernel_py operation-for-operation: same counter
stream, same accumulation order, no fused multiply-add (the build passes
-ffp-contract=off), so output arrays are bit-identical to the fallback.
Consecutive slot indices are walked incrementally (state += GOLDEN),
which equals key + (slot + 1) * GOLDEN in modular arithmetic.
"""

from libc.math cimport fabs, fmax, fmin, sqrt
from libc.stdint cimport uint64_t

import numpy as np

cimport numpy as cnp

cnp.import_array()

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef uint64_t MIX1 = 0xBF58476D1CE4E5B9ULL
cdef uint64_t MIX2 = 0x94D049BB133111EBULL
cdef double TWO_NEG53 = 1.0 / 9007199254740992.0

# codes shared with poca.theory.kernel
cdef int PHI_PARABOLIC = 0
cdef int PHI_TENT = 1
cdef int PHI_SQRT_PARABOLIC = 2
cdef int PHI_CONVEX = 3
cdef int SIGN_ALL_NEGATIVE = 0
cdef int SIGN_ALL_POSITIVE = 1
cdef int SIGN_SEEDED_RANDOM = 2
cdef int SIGN_ALTERNATING = 3
cdef int PERT_MERGE_NOISE = 2
cdef int PERT_NONLINEAR_GLOBAL = 3


cdef inline uint64_t mix64(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * MIX1
    z = (z ^ (z >> 27)) * MIX2
    return z ^ (z >> 31)


cdef inline double u01(uint64_t d) nogil:
    # low bit forced on: strictly inside (0, 1), every step exact
    return <double>((d >> 11) | 1ULL) * TWO_NEG53


cdef inline double phi_eval(int kind, double scale, double v) nogil:
    if kind == PHI_PARABOLIC:
        return scale * (v * (1.0 - v))
    elif kind == PHI_TENT:
        return scale * fmin(v, 1.0 - v)
    elif kind == PHI_SQRT_PARABOLIC:
        return scale * sqrt(v * (1.0 - v))
    else:
        return scale * (v * v)


def run_trials(
    object seed,
    long long t0,
    long long count,
    long n,
    long m,
    int phi_kind,
    double phi_scale,
    int sign_kind,
    object sign_seed,
    double eta_fixed,
    object alpha_fixed,
    int pert_kind,
    double pert_mag,
):
    """Run trials [t0, t0 + count); see _kernel_py.run_trials for semantics."""
    cdef uint64_t useed = seed
    cdef uint64_t usign_seed = sign_seed

    cdef cnp.ndarray alpha_fix_arr = np.ascontiguousarray(
        np.asarray(alpha_fixed, dtype=np.float64).reshape(-1)
    )
    cdef double[::1] alpha_fix = alpha_fix_arr
    cdef bint have_alpha = alpha_fix.shape[0] > 0

    gap_arr = np.empty((count, n))
    lb_arr = np.empty((count, n))
    jensen_arr = np.empty((count, n))
    zg_arr = np.empty((count, n))
    zm_arr = np.empty((count, n))
    rec_arr = np.empty((count, n))
    xg_arr = np.empty((count, n))
    eta_arr = np.empty(count)
    alpha_arr = np.empty((count, m))

    cdef double[:, ::1] gap = gap_arr
    cdef double[:, ::1] lb = lb_arr
    cdef double[:, ::1] jensen = jensen_arr
    cdef double[:, ::1] zg = zg_arr
    cdef double[:, ::1] zm = zm_arr
    cdef double[:, ::1] rec = rec_arr
    cdef double[:, ::1] xg = xg_arr
    cdef double[::1] eta_out = eta_arr
    cdef double[:, ::1] alpha_out = alpha_arr

    # per-trial scratch
    xl_arr = np.empty((m, n))
    zl_arr = np.empty((m, n))
    pl_arr = np.empty((m, n))
    sgn_arr = np.empty((m + 1, n))
    noise_arr = np.empty(n)
    ua_arr = np.empty(m if m > 1 else 1)
    al_arr = np.empty(m)
    cdef double[:, ::1] xl = xl_arr
    cdef double[:, ::1] zl = zl_arr
    cdef double[:, ::1] pl = pl_arr
    cdef double[:, ::1] sgn = sgn_arr
    cdef double[::1] noise = noise_arr
    cdef double[::1] ua = ua_arr
    cdef double[::1] al = al_arr

    cdef long long r, t
    cdef long i, j, k, st
    cdef uint64_t ut, key, skey, state
    cdef double eta, one_minus, prev, tmp, acc, accy, accz, accp
    cdef double pg, s, yg, ym, zmv, zrec, jn

    with nogil:
        for r in range(count):
            t = t0 + r
            ut = <uint64_t>t
            key = mix64(useed + (ut + 1ULL) * GOLDEN)
            skey = mix64(usign_seed + (ut + 1ULL) * GOLDEN)

            # local uniforms: slots 0 .. m*n-1
            state = key
            for j in range(m):
                for i in range(n):
                    state = state + GOLDEN
                    xl[j, i] = u01(mix64(state))

            if have_alpha:
                for j in range(m):
                    al[j] = alpha_fix[j]
            elif m == 1:
                al[0] = 1.0
            else:
                # weight uniforms: slots m*n .. m*n+m-2 (state continues)
                for k in range(m - 1):
                    state = state + GOLDEN
                    ua[k] = u01(mix64(state))
                # insertion sort ascending; weights are the spacings
                for k in range(1, m - 1):
                    tmp = ua[k]
                    j = k - 1
                    while j >= 0 and ua[j] > tmp:
                        ua[j + 1] = ua[j]
                        j -= 1
                    ua[j + 1] = tmp
                prev = 0.0
                for k in range(m - 1):
                    al[k] = ua[k] - prev
                    prev = ua[k]
                al[m - 1] = 1.0 - prev
            for j in range(m):
                alpha_out[r, j] = al[j]

            if eta_fixed >= 0.0:
                eta = eta_fixed
            else:
                eta = u01(mix64(key + (<uint64_t>(m * n + m - 1) + 1ULL) * GOLDEN))
            one_minus = 1.0 - eta
            eta_out[r] = eta

            # signs: stream 0 is the global caption, stream j+1 local patch j;
            # slots st*n + i are consecutive across streams
            if sign_kind == SIGN_SEEDED_RANDOM:
                state = skey
                for st in range(m + 1):
                    for i in range(n):
                        state = state + GOLDEN
                        sgn[st, i] = 1.0 if (mix64(state) & 1ULL) else -1.0
            elif sign_kind == SIGN_ALL_NEGATIVE:
                for st in range(m + 1):
                    for i in range(n):
                        sgn[st, i] = -1.0
            elif sign_kind == SIGN_ALL_POSITIVE:
                for st in range(m + 1):
                    for i in range(n):
                        sgn[st, i] = 1.0
            else:
                for st in range(m + 1):
                    for i in range(n):
                        sgn[st, i] = 1.0 if i % 2 == 0 else -1.0

            if pert_kind == PERT_MERGE_NOISE:
                # noise uniforms: slots m*n+m .. m*n+m+n-1
                state = key + (<uint64_t>(m * n + m)) * GOLDEN
                for i in range(n):
                    state = state + GOLDEN
                    noise[i] = u01(mix64(state))

            for i in range(n):
                acc = 0.0
                for j in range(m):
                    acc = acc + al[j] * xl[j, i]
                if pert_kind == PERT_NONLINEAR_GLOBAL:
                    acc = fmin(fmax(acc + pert_mag, 0.0), 1.0)
                xg[r, i] = acc

            for j in range(m):
                for i in range(n):
                    tmp = phi_eval(phi_kind, phi_scale, xl[j, i])
                    pl[j, i] = tmp
                    zl[j, i] = sgn[j + 1, i] * tmp

            for i in range(n):
                pg = phi_eval(phi_kind, phi_scale, xg[r, i])
                zg[r, i] = sgn[0, i] * pg

                accy = 0.0
                for j in range(m):
                    tmp = xl[j, i] + zl[j, i]
                    accy = accy + al[j] * tmp
                yg = xg[r, i] + zg[r, i]
                ym = eta * yg + one_minus * accy
                if pert_kind == PERT_MERGE_NOISE:
                    ym = ym + pert_mag * (2.0 * noise[i] - 1.0)
                zmv = ym - xg[r, i]
                zm[r, i] = zmv

                accz = 0.0
                for j in range(m):
                    accz = accz + al[j] * zl[j, i]
                zrec = eta * zg[r, i] + one_minus * accz
                rec[r, i] = fabs(zmv - zrec)

                accp = 0.0
                for j in range(m):
                    accp = accp + al[j] * pl[j, i]
                jn = pg - accp
                jensen[r, i] = jn
                lb[r, i] = one_minus * jn
                gap[r, i] = fabs(zg[r, i]) - fabs(zmv)

    return {
        "gap": gap_arr,
        "lower_bound": lb_arr,
        "jensen": jensen_arr,
        "z_global": zg_arr,
        "z_merged": zm_arr,
        "recomposition_error": rec_arr,
        "x_global": xg_arr,
        "eta": eta_arr,
        "alpha": alpha_arr,
    }
