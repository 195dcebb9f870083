"""Active-set solver for min_{d >= 0} ||A d + b||^2 (Lawson-Hanson).

This is the hot kernel of the toolkit: every exact precoding label requires
one solve per transmit symbol. The kernel functions below are plain numpy
and run as-is, or JIT-compiled through numba with an on-disk cache. Select
the backend with the environment variable

    SLPKIT_BACKEND=numba|numpy      (default: numba when importable)

Inner least-squares solves use normal equations with a flag-based Cholesky
on the passive submatrix; a 1e-12 ridge is retried on definiteness failure.
Zero columns are pre-filtered into the permanent active set.
"""

import os
from dataclasses import dataclass

import numpy as np

DEFAULT_TOL = 1e-9

_env = os.environ.get("SLPKIT_BACKEND", "").strip().lower()
if _env not in ("", "numba", "numpy"):
    raise ValueError(f"SLPKIT_BACKEND must be 'numba' or 'numpy', got {_env!r}")
try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via SLPKIT_BACKEND=numpy
    numba = None
    HAS_NUMBA = False

BACKEND = "numpy" if (_env == "numpy" or not HAS_NUMBA) else "numba"


def _chol_solve_inplace(gram, rhs):
    # Factor gram = L L^T and solve in place; returns False on a nonpositive
    # pivot (caller retries with a ridge). gram is clobbered.
    p = gram.shape[0]
    for i in range(p):
        for j in range(i + 1):
            acc = gram[i, j]
            for t in range(j):
                acc -= gram[i, t] * gram[j, t]
            if i == j:
                if acc <= 0.0:
                    return False
                gram[i, i] = np.sqrt(acc)
            else:
                gram[i, j] = acc / gram[j, j]
    for i in range(p):
        acc = rhs[i]
        for t in range(i):
            acc -= gram[i, t] * rhs[t]
        rhs[i] = acc / gram[i, i]
    for i in range(p - 1, -1, -1):
        acc = rhs[i]
        for t in range(i + 1, p):
            acc -= gram[t, i] * rhs[t]
        rhs[i] = acc / gram[i, i]
    return True


def _ls_on_passive(a, b, idx):
    # Unconstrained minimizer of ||A_P z + b|| over the passive columns.
    ap = np.ascontiguousarray(a[:, idx])
    gram0 = ap.T @ ap
    rhs0 = -(b @ ap)
    gram = gram0.copy()
    rhs = rhs0.copy()
    ok = _chol_solve_inplace(gram, rhs)
    ridge = 1e-12
    while not ok and ridge <= 1e-6:
        gram = gram0.copy()
        for i in range(gram.shape[0]):
            gram[i, i] += ridge
        rhs = rhs0.copy()
        ok = _chol_solve_inplace(gram, rhs)
        ridge *= 10.0
    return rhs


def _solve_one(a, b, tol, max_iter):
    """Lawson-Hanson NNLS for one instance; returns (x, iters, status).

    status: 0 optimal, 1 iteration limit (best feasible iterate).
    """
    n = a.shape[1]
    x = np.zeros(n)
    passive = np.zeros(n, dtype=np.bool_)
    usable = np.sum(a * a, axis=0) > 0.0
    # stationarity tolerance is relative to ||A^T b||_inf
    tol_eff = tol * np.max(np.abs(b @ a))
    iters = 0
    while iters < max_iter:
        # w = -A^T (A x + b); optimal when w <= tol outside the support
        w = -((a @ x + b) @ a)
        best = -np.inf
        best_j = -1
        for j in range(n):
            if usable[j] and not passive[j] and w[j] > best:
                best = w[j]
                best_j = j
        if best_j < 0 or best <= tol_eff:
            return x, iters, 0
        passive[best_j] = True
        iters += 1
        while True:
            idx = np.where(passive)[0]
            if idx.shape[0] == 0:
                x[:] = 0.0
                break
            zp = _ls_on_passive(a, b, idx)
            if np.min(zp) > 0.0:
                x[:] = 0.0
                x[idx] = zp
                break
            # step toward zp until the first passive coordinate hits zero
            alpha = 1.0
            for ii in range(idx.shape[0]):
                j = idx[ii]
                if zp[ii] <= 0.0 and x[j] != zp[ii]:
                    cand = x[j] / (x[j] - zp[ii])
                    if cand < alpha:
                        alpha = cand
            for ii in range(idx.shape[0]):
                j = idx[ii]
                x[j] += alpha * (zp[ii] - x[j])
                if x[j] <= 1e-14:
                    x[j] = 0.0
                    passive[j] = False
    return x, iters, 1


def _solve_block(a_stack, b_stack, tol, max_iter):
    """Solve a batch of independent instances: (L, m, n) and (L, m)."""
    n_prob = a_stack.shape[0]
    n = a_stack.shape[2]
    xs = np.zeros((n_prob, n))
    iters = np.zeros(n_prob, dtype=np.int64)
    status = np.zeros(n_prob, dtype=np.int64)
    for l in range(n_prob):
        x, it, st = _solve_one(a_stack[l], b_stack[l], tol, max_iter)
        xs[l] = x
        iters[l] = it
        status[l] = st
    return xs, iters, status


if BACKEND == "numba":
    # Rebind the whole call chain so numba resolves the globals to jitted
    # dispatchers; module-level functions keep the on-disk cache usable.
    _chol_solve_inplace = numba.njit(cache=True, nogil=True)(_chol_solve_inplace)
    _ls_on_passive = numba.njit(cache=True, nogil=True)(_ls_on_passive)
    _solve_one = numba.njit(cache=True, nogil=True)(_solve_one)
    _solve_block = numba.njit(cache=True, nogil=True)(_solve_block)


@dataclass
class NnlsSolution:
    delta: np.ndarray
    objective: float
    active_set: np.ndarray  # indices where delta == 0
    iterations: int
    optimal: bool


def solve(a, b, tol=DEFAULT_TOL, max_iter=None):
    """Solve min_{d >= 0} ||A d + b||^2; see NnlsSolution for the result fields.

    The stationarity tolerance is `tol` scaled by ||A^T b||_inf. When the
    iteration cap is hit, the best feasible iterate is returned with
    optimal=False rather than raising.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if max_iter is None:
        max_iter = max(3 * a.shape[1], 30)
    x, iters, status = _solve_one(a, b, float(tol), int(max_iter))
    r = a @ x + b
    return NnlsSolution(
        delta=x,
        objective=float(r @ r),
        active_set=np.flatnonzero(x == 0.0),
        iterations=int(iters),
        optimal=status == 0,
    )


def solve_block(a_stack, b_stack, tol=DEFAULT_TOL, max_iter=None):
    """Batched solve over stacked instances; returns (deltas, iters, optimal)."""
    a_stack = np.ascontiguousarray(a_stack, dtype=np.float64)
    b_stack = np.ascontiguousarray(b_stack, dtype=np.float64)
    if max_iter is None:
        max_iter = max(3 * a_stack.shape[2], 30)
    xs, iters, status = _solve_block(a_stack, b_stack, float(tol), int(max_iter))
    return xs, iters, status == 0


def kkt_residuals(a, b, delta):
    """Stationarity and complementary-slackness residuals at a feasible point.

    stationarity: max violation of g_i >= 0 on the zero set and of |g_i| = 0
    on the support, with g = 2 A^T (A delta + b); slackness is
    |sum_i min(g_i, 0) * delta_i|.
    """
    a = np.asarray(a, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    g = 2.0 * a.T @ (a @ delta + np.asarray(b, dtype=np.float64))
    zero = delta == 0.0
    stat_zero = float(np.max(-g[zero], initial=0.0))
    stat_pos = float(np.max(np.abs(g[~zero]), initial=0.0))
    stationarity = max(max(stat_zero, 0.0), stat_pos)
    slackness = float(abs(np.sum(np.minimum(g, 0.0) * delta)))
    return stationarity, slackness
