"""Numerical maximization of sum / min secret-key capacity over the training covariance.

Training power outside the span of all users' modes is useless, so the
covariance is parameterized as ``C_DL = Qt Y Qt^H`` with ``Qt`` an orthonormal
basis of that span. Each user's capacity is concave in ``Y``; the feasible set
``{Y >= 0, tr Y <= p_DL}`` admits a cheap exact projection, so projected
gradient ascent with backtracking converges to the global optimum.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq, minimize

from ._linalg import hermitize, logdet_pd, psd_sqrt_factor
from .capacity import LN2, Criterion, TrainingSequence, capacity_parallel, criterion_value
from .channel import DEFAULT_RANK_TOL, SpatialModeBasis, UserStatistics
from .designer import DesignRequest, PowerAllocation, water_fill

log = logging.getLogger(__name__)

SPAN_RTOL = 1e-10
ARMIJO_C = 1e-4


@dataclass(frozen=True)
class SubspaceReduction:
    """Orthonormal basis ``Q_tilde`` (``M x S_eff``) of the union of the users' mode spans."""

    Q_tilde: np.ndarray

    @property
    def M(self) -> int:
        return self.Q_tilde.shape[0]

    @property
    def S_eff(self) -> int:
        return self.Q_tilde.shape[1]

    def lift(self, Y) -> np.ndarray:
        """Full ``M x M`` training covariance for a reduced ``Y``."""
        return hermitize(self.Q_tilde @ Y @ self.Q_tilde.conj().T)

    def project(self, C) -> np.ndarray:
        """Reduced covariance ``Qt^H C Qt`` (drops power outside the span)."""
        return hermitize(self.Q_tilde.conj().T @ C @ self.Q_tilde)


@dataclass(frozen=True)
class OptimizerOptions:
    max_iters: int = 5000
    tol: float = 1e-8
    step_rule: str = "accelerated"  # or "bb" (Barzilai-Borwein trial step), "armijo"
    initial_step: float = 1.0
    backtrack: float = 0.5
    tau_start: float = 1.0
    tau_end: float = 1e-3


@dataclass(frozen=True)
class OptimizerResult:
    C_DL_reduced: np.ndarray
    iterations: int
    criterion_value: float
    per_user: tuple
    converged: bool
    kkt_residual: float
    history: tuple = field(default=(), repr=False)


def reduce_subspace(bases: Sequence[SpatialModeBasis]) -> SubspaceReduction:
    """Orthonormal basis of ``span[Q_1 ... Q_K]`` from an SVD with relative tolerance 1e-10."""
    bases = list(bases)
    if len({b.M for b in bases}) != 1:
        raise ValueError("all bases must share the same antenna count")
    return column_span(np.hstack([b.Q for b in bases]))


def column_span(A) -> SubspaceReduction:
    """Orthonormal basis of the column space of ``A`` (SVD, relative tolerance 1e-10)."""
    A = np.asarray(A, dtype=complex)
    if A.shape[1] == 0 or not np.any(A):
        return SubspaceReduction(np.zeros((A.shape[0], 0), dtype=complex))
    U, sv, _ = np.linalg.svd(A, full_matrices=False)
    return SubspaceReduction(U[:, sv >= SPAN_RTOL * sv[0]])


class _ReducedUser:
    """One user's capacity and gradient as functions of the reduced covariance."""

    def __init__(self, user: UserStatistics, reduction: SubspaceReduction, noise_var: float):
        self.lam = user.modes.lam
        self.rho = user.uplink_snr
        self.noise_var = noise_var
        self.B = reduction.Q_tilde.conj().T @ user.modes.Q  # S_eff x S_k
        self.d = np.sqrt(self.lam)
        self.const = float(np.sum(np.log(self.lam + 1.0 / self.rho)))

    def _mats(self, Y):
        G = hermitize(self.B.conj().T @ Y @ self.B) / self.noise_var
        Bm = np.eye(self.lam.size) + self.d[:, None] * G * self.d[None, :]
        return Bm, np.diag(self.lam) + Bm / self.rho

    def value(self, Y) -> float:
        if self.lam.size == 0:
            return 0.0
        Bm, A = self._mats(Y)
        return (self.const - logdet_pd(A) + logdet_pd(Bm)) / LN2

    def value_grad(self, Y):
        if self.lam.size == 0:
            return 0.0, np.zeros_like(Y)
        Bm, A = self._mats(Y)
        val = (self.const - logdet_pd(A) + logdet_pd(Bm)) / LN2
        # d/dY [log|Bm| - log|A|] = B D (Bm^-1 - (rho Lam + Bm)^-1) D B^H / noise_var
        inner = np.linalg.inv(Bm) - np.linalg.inv(self.rho * A)
        DBh = self.d[:, None] * self.B.conj().T
        grad = DBh.conj().T @ inner @ DBh / (self.noise_var * LN2)
        return val, hermitize(grad)


def capacity_gradient(user: UserStatistics, Y, noise_var: float,
                      reduction: SubspaceReduction) -> np.ndarray:
    """Gradient of the user's capacity (bits per unit power) with respect to reduced ``Y``.

    The gradient ``W`` is Hermitian and satisfies ``dC = Re tr(W dY)`` for
    Hermitian perturbations ``dY``.
    """
    return _ReducedUser(user, reduction, noise_var).value_grad(np.asarray(Y, dtype=complex))[1]


def reduced_capacity(user: UserStatistics, Y, noise_var: float,
                     reduction: SubspaceReduction) -> float:
    return max(_ReducedUser(user, reduction, noise_var).value(np.asarray(Y, dtype=complex)), 0.0)


def _project_simplex(v, budget):
    # Euclidean projection of v onto {x >= 0, sum x = budget}
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - budget
    idx = np.arange(1, v.size + 1)
    r = np.flatnonzero(u - css / idx > 0)[-1]
    theta = css[r] / (r + 1)
    return np.maximum(v - theta, 0.0)


def project_trace_psd(X, budget: float) -> np.ndarray:
    """Frobenius projection of Hermitian ``X`` onto ``{Y >= 0, tr Y <= budget}``.

    Both constraints depend only on the spectrum, so the projection keeps the
    eigenvectors and projects the eigenvalues: clip at zero, and if the trace
    still exceeds the budget, shift-and-clip onto the simplex.
    """
    X = hermitize(np.asarray(X, dtype=complex))
    if X.size == 0:
        return X
    w, U = np.linalg.eigh(X)
    clipped = np.maximum(w, 0.0)
    if clipped.sum() > budget:
        clipped = _project_simplex(w, budget)
    return hermitize((U * clipped) @ U.conj().T)


def _inner(A, B) -> float:
    return float(np.real(np.vdot(A, B)))


def _pg_norm(Y, g, budget):
    return float(np.linalg.norm(Y - project_trace_psd(Y + g, budget)))


def _stalled(Y, f, g, budget):
    # the first-order gain of a full projected step is below what f can resolve
    d = project_trace_psd(Y + g, budget) - Y
    return _inner(g, d) <= 1e3 * np.finfo(float).eps * (1.0 + abs(f))


def _ascend(fun: Callable, Y, budget: float, opts: OptimizerOptions, max_iters: int,
            history: list | None = None):
    """Maximize ``fun`` over the trace-bounded PSD cone; returns ``(Y, f, g, iters, converged)``.

    Every accepted iterate has an objective no lower than the previous one.
    """
    if opts.step_rule == "accelerated":
        return _ascend_accelerated(fun, Y, budget, opts, max_iters, history)
    if opts.step_rule not in ("bb", "armijo"):
        raise ValueError(f"unknown step rule {opts.step_rule!r}")
    f, g = fun(Y)
    step = opts.initial_step
    for it in range(max_iters):
        if _pg_norm(Y, g, budget) <= opts.tol * (1.0 + abs(f)):
            return Y, f, g, it, True
        while True:
            Y_new = project_trace_psd(Y + step * g, budget)
            d = Y_new - Y
            f_new, g_new = fun(Y_new)
            if f_new >= f + ARMIJO_C * _inner(g, d):
                break
            step *= opts.backtrack
            if step < 1e-16:
                return Y, f, g, it, _stalled(Y, f, g, budget)
        if history is not None:
            history.append(f_new)
        if opts.step_rule == "bb":
            sy = _inner(d, g_new - g)
            step = _inner(d, d) / -sy if sy < 0 else step * 2.0
            step = float(np.clip(step, 1e-10, 1e10))
        else:
            step = min(step * 2.0, 1e10)
        Y, f, g = Y_new, f_new, g_new
    return Y, f, g, max_iters, _pg_norm(Y, g, budget) <= opts.tol * (1.0 + abs(f))


def _ascend_accelerated(fun, Y, budget, opts, max_iters, history):
    """Monotone accelerated projected gradient (MFISTA) with backtracking on the Lipschitz estimate.

    The extrapolated point may be worse than the current iterate; only
    candidates that improve the objective are accepted, and momentum is reset
    whenever a candidate is rejected.
    """
    x, (fx, gx) = Y, fun(Y)
    y, fy, gy = x, fx, gx
    t = 1.0
    L = 1.0 / opts.initial_step
    for it in range(max_iters):
        if _pg_norm(x, gx, budget) <= opts.tol * (1.0 + abs(fx)):
            return x, fx, gx, it, True
        while True:
            z = project_trace_psd(y + gy / L, budget)
            d = z - y
            fz, gz = fun(z)
            if fz >= fy + _inner(gy, d) - 0.5 * L * _inner(d, d) - 1e-13 * abs(fy):
                break
            L /= opts.backtrack
            if L > 1e16:
                return x, fx, gx, it, _stalled(x, fx, gx, budget)
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        if fz >= fx:
            x_prev, x, fx, gx = x, z, fz, gz
            y = x + ((t - 1.0) / t_new) * (x - x_prev)
        else:
            if _stalled(x, fx, gx, budget):
                return x, fx, gx, it + 1, True
            t_new = 1.0
            y = x
        if history is not None:
            history.append(fx)
        t = t_new
        fy, gy = fun(y) if y is not x else (fx, gx)
        L *= 0.9
    return x, fx, gx, max_iters, _pg_norm(x, gx, budget) <= opts.tol * (1.0 + abs(fx))


def _weighted_objective(rusers, weights):
    def fun(Y):
        f, g = 0.0, np.zeros_like(Y)
        for ru, w in zip(rusers, weights):
            if w == 0:
                continue
            v, gr = ru.value_grad(Y)
            f += w * v
            g += w * gr
        return f, g
    return fun


def _smoothed_min_objective(rusers, betas, tau):
    def fun(Y):
        vals, grads = zip(*(ru.value_grad(Y) for ru in rusers))
        v = np.array(vals) / betas
        z = -v / tau
        zmax = z.max()
        e = np.exp(z - zmax)
        soft = e / e.sum()
        f = -tau * (zmax + math.log(e.sum()))
        g = sum(s / b * gr for s, b, gr in zip(soft, betas, grads))
        return f, g
    return fun


def _exact_values(rusers, Y):
    return np.array([max(ru.value(Y), 0.0) for ru in rusers])


def maximize(req: DesignRequest, reduction: SubspaceReduction | None = None,
             options: OptimizerOptions | None = None) -> OptimizerResult:
    """Maximize the request's criterion over reduced training covariances.

    ``sum`` / ``weighted_sum`` run projected gradient ascent on
    ``sum_k beta_k C_k``. ``min`` / ``weighted_min`` maximize a log-sum-exp
    smoothing of ``min_k C_k / beta_k`` while the temperature is annealed
    from ``tau_start`` to ``tau_end`` bits, then polish on the exact minimum.
    Iteration starts from the uniform allocation ``(p_DL / S_eff) I``.
    """
    opts = options or OptimizerOptions()
    if reduction is None:
        reduction = reduce_subspace([u.modes for u in req.users])
    if reduction.M != req.M:
        raise ValueError("reduction does not match the users' antenna count")
    n = reduction.S_eff
    budget = req.dl_budget
    rusers = [_ReducedUser(u, reduction, req.dl_noise_var) for u in req.users]
    betas = req.betas
    history: list = []
    if n == 0:
        Y = np.zeros((0, 0), dtype=complex)
        caps = np.zeros(req.K)
        return OptimizerResult(Y, 0, 0.0, tuple(caps), True, 0.0)

    Y = np.eye(n, dtype=complex) * (budget / n)
    if not req.criterion.is_min or req.K == 1:
        fun = _weighted_objective(rusers, betas if req.criterion.is_weighted else np.ones(req.K))
        Y, f, g, used, converged = _ascend(fun, Y, budget, opts, opts.max_iters, history)
    else:
        Y, g, converged, used = _maximize_min(rusers, betas, Y, budget, opts, history)

    caps = _exact_values(rusers, Y)
    kkt = _pg_norm(Y, g, budget) / (1.0 + float(np.linalg.norm(Y)))
    if not converged:
        log.warning("optimizer did not converge after %d iterations (kkt residual %.3g)", used, kkt)
    return OptimizerResult(
        C_DL_reduced=Y,
        iterations=used,
        criterion_value=criterion_value(caps, req.criterion, betas),
        per_user=tuple(float(c) for c in caps),
        converged=converged,
        kkt_residual=kkt,
        history=tuple(history),
    )


def _maximize_min(rusers, betas, Y, budget, opts, history):
    """Annealed smoothed-min ascent followed by an exact polish.

    For two users the polish is a bisection on the dual weight ``w`` of
    ``w C_1/beta_1 + (1 - w) C_2/beta_2`` until the two weighted capacities
    match (or an endpoint is optimal). For more users the smoothing is
    continued to a much lower temperature. The best iterate by exact
    ``min_k C_k / beta_k`` is returned.
    """
    used = 0
    tau = opts.tau_start
    converged = False
    g = np.zeros_like(Y)
    # annealing only supplies a warm start; the polish below certifies the result
    stage_opts = dataclasses.replace(opts, tol=max(opts.tol, 1e-6))
    stage_iters = max(opts.max_iters // 8, 1)
    while True:
        fun = _smoothed_min_objective(rusers, betas, tau)
        Y, _, g, it, converged = _ascend(fun, Y, budget, stage_opts, stage_iters, history)
        used += it
        if tau <= opts.tau_end * (1 + 1e-12):
            break
        tau = max(tau * 0.1, opts.tau_end)

    def score(Yc):
        return float(np.min(_exact_values(rusers, Yc) / betas))

    best = (score(Y), Y, g, False)
    if len(rusers) == 2:
        Yp, gp, conv_p, it = _polish_two_users(rusers, betas, Y, budget, opts)
    else:
        # start from the weights the smoothed objective put on each user at the end
        c = _exact_values(rusers, Y) / betas
        w0 = np.exp(-(c - c.min()) / tau)
        Yp, gp, conv_p, it = _polish_dual(rusers, betas, Y, w0 / w0.sum(), budget, opts)
    used += it
    if score(Yp) >= best[0] - 1e-12:
        best = (score(Yp), Yp, gp, conv_p)
    return best[1], best[2], best[3], used


def _polish_two_users(rusers, betas, Y0, budget, opts):
    used = 0
    cache = {}

    def solve(w, Y_start):
        nonlocal used
        fun = _weighted_objective(rusers, np.array([w / betas[0], (1 - w) / betas[1]]))
        Y, _, g, it, conv = _ascend(fun, Y_start, budget, opts, opts.max_iters)
        used += it
        v = _exact_values(rusers, Y) / betas
        cache[w] = (Y, g, conv)
        return v[0] - v[1], Y

    d0, Y_lo = solve(0.0, Y0)
    if d0 >= 0:
        Y, g, conv = cache[0.0]
        return Y, g, conv, used
    d1, Y_hi = solve(1.0, Y0)
    if d1 <= 0:
        Y, g, conv = cache[1.0]
        return Y, g, conv, used
    lo, hi, Y_mid = 0.0, 1.0, Y0
    w = 0.5
    for _ in range(60):
        w = 0.5 * (lo + hi)
        d, Y_mid = solve(w, Y_mid)
        if abs(d) <= 1e-10:
            Y, g, conv = cache[w]
            return Y, g, conv, used
        if d < 0:
            lo, Y_lo = w, Y_mid
        else:
            hi, Y_hi = w, Y_mid
    # Inner solves are only accurate to their tolerance, so the bracket may not
    # close. By concavity a mixture of the two bracketing solutions does at
    # least as well as interpolating their capacities; pick the equalizing one.
    def gap(t):
        v = _exact_values(rusers, t * Y_hi + (1 - t) * Y_lo) / betas
        return v[0] - v[1]

    t = brentq(gap, 0.0, 1.0, xtol=1e-15, rtol=1e-15, maxiter=200)
    Y = t * Y_hi + (1 - t) * Y_lo
    _, g, conv = cache[w]
    fun = _weighted_objective(rusers, np.array([w / betas[0], (1 - w) / betas[1]]))
    return Y, fun(Y)[1], conv, used


def _polish_dual(rusers, betas, Y0, w0, budget, opts):
    """Minimize ``phi(w) = max_Y sum_k w_k C_k / beta_k`` over the weight simplex.

    ``phi`` is convex with gradient ``C_k(Y*(w)) / beta_k``; at its minimizer
    the users with positive weight share the smallest weighted capacity,
    which is the max-min optimality condition. Each evaluation is a
    warm-started inner ascent.
    """
    K = len(rusers)
    state = {"Y": Y0, "g": None, "conv": False, "used": 0}
    memo = {}
    visited = []

    def phi(w):
        key = tuple(np.round(w, 15))
        if key not in memo:
            fun = _weighted_objective(rusers, np.maximum(w, 0.0) / betas)
            Y, f, g, it, conv = _ascend(fun, state["Y"], budget, opts, opts.max_iters)
            state.update(Y=Y, g=g, conv=conv, used=state["used"] + it)
            memo[key] = (f, _exact_values(rusers, Y) / betas)
            visited.append(Y)
        return memo[key]

    res = minimize(lambda w: phi(w)[0], w0, jac=lambda w: phi(w)[1], method="SLSQP",
                   bounds=[(0.0, 1.0)] * K,
                   constraints=[{"type": "eq", "fun": lambda w: np.sum(w) - 1.0,
                                 "jac": lambda w: np.ones(K)}],
                   options={"ftol": 1e-12, "maxiter": 100})
    phi(res.x)
    Y = _best_mixture(rusers, betas, visited[-(2 * K + 1):])
    fun = _weighted_objective(rusers, np.maximum(res.x, 0.0) / betas)
    return Y, fun(Y)[1], state["conv"] and res.success, state["used"]


def _best_mixture(rusers, betas, candidates):
    """Convex combination of feasible candidates with the largest min weighted capacity.

    Solved in epigraph form over the mixing weights; each capacity is concave
    in them. Falls back to the best single candidate.
    """
    n = len(candidates)
    scores = [np.min(_exact_values(rusers, Y) / betas) for Y in candidates]
    best = candidates[int(np.argmax(scores))]
    if n < 2:
        return best
    stack = np.stack(candidates)

    def mix(t):
        return np.tensordot(np.maximum(t, 0.0), stack, axes=1)

    def caps(x):
        Y = mix(x[:n])
        return np.array([ru.value(Y) for ru in rusers]) / betas - x[n]

    def caps_jac(x):
        Y = mix(x[:n])
        J = np.zeros((len(rusers), n + 1))
        for k, (ru, b) in enumerate(zip(rusers, betas)):
            g = ru.value_grad(Y)[1]
            J[k, :n] = [_inner(g, Yj) / b for Yj in candidates]
        J[:, n] = -1.0
        return J

    x0 = np.append(np.full(n, 1.0 / n), min(scores) - 1.0)
    x0[n] = np.min(caps(x0) + x0[n])
    res = minimize(lambda x: -x[n], x0, jac=lambda x: -np.eye(n + 1)[n], method="SLSQP",
                   bounds=[(0.0, 1.0)] * n + [(None, None)],
                   constraints=[{"type": "ineq", "fun": caps, "jac": caps_jac},
                                {"type": "eq", "fun": lambda x: np.sum(x[:n]) - 1.0,
                                 "jac": lambda x: np.append(np.ones(n), 0.0)}],
                   options={"ftol": 1e-14, "maxiter": 200})
    Y = mix(res.x[:n] / np.sum(np.maximum(res.x[:n], 0.0)))
    return Y if np.min(_exact_values(rusers, Y) / betas) > max(scores) else best


def extract_training_sequence(result: OptimizerResult, reduction: SubspaceReduction,
                              rank_tol: float = DEFAULT_RANK_TOL) -> TrainingSequence:
    """Training matrix ``S = Qt U diag(sqrt(w))`` from the eigenpairs of the reduced covariance.

    Eigenvalues below ``rank_tol * max`` are dropped, so ``T`` is the numerical
    rank; an all-zero covariance gives an empty ``M x 0`` sequence.
    """
    U, w = psd_sqrt_factor(result.C_DL_reduced, rank_tol)
    if w.size == 0:
        return TrainingSequence.empty(reduction.M)
    return TrainingSequence(reduction.Q_tilde @ (U * np.sqrt(w)))


def strongest_directions(result: OptimizerResult, reduction: SubspaceReduction,
                         n: int) -> SubspaceReduction:
    """Reduction onto the ``n`` strongest eigen-directions of an optimized covariance.

    Re-running :func:`maximize` on it gives the best training with at most
    ``n`` pilots inside that subspace.
    """
    w, U = np.linalg.eigh(hermitize(result.C_DL_reduced))
    order = np.argsort(-w, kind="stable")[:n]
    return SubspaceReduction(reduction.Q_tilde @ U[:, order])


# -- max-min with per-user diagonal (orthogonal-user) allocations -------------

def _single_user_capacity(basis, rho, power, noise_var):
    if power <= 0 or basis.S == 0:
        return 0.0
    alloc = water_fill(basis.lam, power, noise_var)
    return capacity_parallel(basis.lam, rho, alloc.powers / noise_var)


def _power_for_capacity(basis, rho, target, noise_var):
    # smallest power whose water-filled capacity reaches the target
    if target <= 0:
        return 0.0
    hi = 1.0
    while _single_user_capacity(basis, rho, hi, noise_var) < target:
        hi *= 2.0
        if hi > 1e300:
            return math.inf
    return brentq(lambda p: _single_user_capacity(basis, rho, p, noise_var) - target,
                  0.0, hi, xtol=1e-300, rtol=1e-15, maxiter=500)


def max_min_diagonal(bases: Sequence[SpatialModeBasis], ul_snrs, budget: float,
                     noise_var: float = 1.0, betas=None) -> list:
    """Max-min (weighted by ``betas``) powers when every user's modes are orthogonal to the others'.

    Each user's capacity then depends on its own powers only, and for a given
    per-user total the best split over modes is water-filling. The common
    level ``t`` with ``C_k = beta_k t`` is found by bisection on the total
    power needed to reach it. Each user's capacity is bounded by
    ``sum_s log2(1 + lam_s rho_k)``, which caps ``t``.
    """
    K = len(bases)
    betas = np.ones(K) if betas is None else np.asarray(betas, dtype=float)
    ul_snrs = list(ul_snrs)
    if any(b.S == 0 for b in bases):
        from .designer import water_fill_users

        return water_fill_users(bases, ul_snrs, budget, noise_var)
    ceilings = [float(np.sum(np.log2(1.0 + b.lam * rho))) for b, rho in zip(bases, ul_snrs)]
    t_max = min(c / beta for c, beta in zip(ceilings, betas))

    def needed(t):
        return [_power_for_capacity(b, rho, beta * t, noise_var)
                for b, rho, beta in zip(bases, ul_snrs, betas)]

    def excess(t):
        return sum(needed(t)) - budget

    frac = 0.5
    while excess(t_max * frac) < 0:
        frac = 1.0 - 0.5 * (1.0 - frac)
        if frac >= 1.0:
            break
    t_star = brentq(excess, 0.0, t_max * frac, xtol=1e-15, rtol=1e-15, maxiter=500)
    totals = np.array(needed(t_star))
    totals *= budget / totals.sum()
    return [water_fill(b.lam, P, noise_var) if P > 0 else PowerAllocation(np.zeros(b.S), 0.0, 0)
            for b, P in zip(bases, totals)]
