"""Closed-form downlink training designs and the water-filling solver."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .capacity import Criterion, TrainingSequence
from .channel import SpatialModeBasis, UserStatistics, cross_user_coherence
from .errors import InvalidInput, InvalidParameter

PRUNE_RTOL = 1e-12


@dataclass(frozen=True)
class PowerAllocation:
    """Per-mode pilot powers ``p_s = (mu - noise_var / lam_s)^+``."""

    powers: np.ndarray
    water_level: float
    active_count: int

    @property
    def total(self) -> float:
        return float(np.sum(self.powers))


@dataclass(frozen=True)
class DesignRequest:
    users: tuple
    dl_budget: float
    dl_noise_var: float = 1.0
    max_pilots: int | None = None
    criterion: Criterion = Criterion.SUM
    weights: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "users", tuple(self.users))
        object.__setattr__(self, "criterion", Criterion(self.criterion))
        if not self.users:
            raise InvalidParameter("at least one user is required")
        if len({u.modes.M for u in self.users}) != 1:
            raise InvalidParameter("all users must share the same antenna count")
        if not self.dl_budget > 0:
            raise InvalidParameter(f"dl_budget must be > 0, got {self.dl_budget}")
        if not self.dl_noise_var > 0:
            raise InvalidParameter(f"dl_noise_var must be > 0, got {self.dl_noise_var}")
        if self.max_pilots is not None and self.max_pilots < 1:
            raise InvalidParameter(f"max_pilots must be >= 1, got {self.max_pilots}")
        if self.weights is not None:
            w = tuple(float(x) for x in self.weights)
            if len(w) != len(self.users):
                raise InvalidParameter(f"weights: expected {len(self.users)} values, got {len(w)}")
            if min(w) <= 0 or abs(sum(w) - 1.0) > 1e-12:
                raise InvalidParameter("weights must be positive and sum to 1")
            object.__setattr__(self, "weights", w)

    @property
    def K(self) -> int:
        return len(self.users)

    @property
    def M(self) -> int:
        return self.users[0].modes.M

    @property
    def betas(self) -> np.ndarray:
        """User priorities; all ones for unweighted criteria."""
        if self.criterion.is_weighted and self.weights is not None:
            return np.asarray(self.weights)
        if self.criterion.is_weighted:
            return np.full(self.K, 1.0 / self.K)
        return np.ones(self.K)

    def retained_modes(self) -> list:
        """Each user's modes, limited to the ``max_pilots`` strongest when a pilot cap is set."""
        if self.max_pilots is None:
            return [u.modes for u in self.users]
        return [u.modes.truncated(self.max_pilots) for u in self.users]


def water_fill(lam, budget: float, noise_var: float = 1.0,
               max_active: int | None = None) -> PowerAllocation:
    """Exact water-filling by the sorted-candidate method.

    For ``k = 1..min(S, max_active)`` the candidate level is
    ``mu_k = (budget + sum_{s<=k} noise_var/lam_s) / k``; the largest ``k``
    with ``mu_k > noise_var/lam_k`` is the active set. Modes beyond
    ``max_active`` receive no power.
    """
    lam = np.asarray(lam, dtype=float).reshape(-1)
    if not budget > 0:
        raise InvalidParameter(f"budget must be > 0, got {budget}")
    if not noise_var > 0:
        raise InvalidParameter(f"noise_var must be > 0, got {noise_var}")
    if np.any(lam <= 0):
        raise InvalidInput("mode gains must be strictly positive")
    if np.any(np.diff(lam) > 0):
        raise InvalidInput("mode gains must be sorted in non-increasing order")
    if max_active is not None and max_active < 1:
        raise InvalidParameter("max_active must be >= 1")
    powers = np.zeros(lam.size)
    n = lam.size if max_active is None else min(lam.size, max_active)
    if n == 0:
        return PowerAllocation(powers, 0.0, 0)

    floor = noise_var / lam[:n]
    levels = (budget + np.cumsum(floor)) / np.arange(1, n + 1)
    k = int(np.flatnonzero(levels > floor)[-1]) + 1
    mu = float(levels[k - 1])
    powers[:k] = mu - floor[:k]
    powers[powers < PRUNE_RTOL * budget] = 0.0
    return PowerAllocation(powers, mu, int(np.count_nonzero(powers)))


def _user_level(nu, beta, rho, noise_var):
    # positive root of mu^2/noise_var + rho*mu - beta*rho/nu = 0
    a = 4.0 * beta * rho / (nu * noise_var)
    return 2.0 * beta * rho / (nu * (rho + math.sqrt(rho * rho + a)))


def water_fill_users(bases: Sequence[SpatialModeBasis], ul_snrs, budget: float,
                     noise_var: float = 1.0, betas=None) -> list:
    """Sum (or weighted-sum) optimal powers for users with mutually orthogonal modes.

    Each user gets a water-filling allocation with its own level ``mu_k``,
    coupled through one multiplier ``nu``:
    ``beta_k rho_k / (mu_k (rho_k + mu_k / noise_var)) = nu``. When all users
    share the same UL SNR and priority the levels coincide and the pooled
    sorted-candidate solution is used directly; otherwise ``nu`` is found by a
    bracketing root search on the total power.
    """
    K = len(bases)
    ul_snrs = np.asarray(ul_snrs, dtype=float)
    betas = np.ones(K) if betas is None else np.asarray(betas, dtype=float)
    if np.allclose(ul_snrs, ul_snrs[0], rtol=0, atol=0) and np.all(betas == betas[0]):
        pooled = np.concatenate([b.lam for b in bases])
        order = np.argsort(-pooled, kind="stable")
        alloc = water_fill(pooled[order], budget, noise_var)
        powers = np.empty_like(pooled)
        powers[order] = alloc.powers
        out, start = [], 0
        for b in bases:
            p = powers[start:start + b.S]
            out.append(PowerAllocation(p, alloc.water_level, int(np.count_nonzero(p))))
            start += b.S
        return out

    def allocate(log_nu):
        nu = math.exp(log_nu)
        res = []
        for b, rho, beta in zip(bases, ul_snrs, betas):
            mu = _user_level(nu, beta, rho, noise_var)
            res.append((mu, np.maximum(mu - noise_var / b.lam, 0.0)))
        return res

    def excess(log_nu):
        return sum(p.sum() for _, p in allocate(log_nu)) - budget

    # marginal gain (nats per unit power) of each user's strongest mode at zero power
    caps = [beta * b.lam[0] ** 2 * rho / (noise_var * (1.0 + b.lam[0] * rho))
            for b, rho, beta in zip(bases, ul_snrs, betas) if b.S]
    if not caps:
        return [PowerAllocation(np.zeros(0), 0.0, 0) for _ in bases]
    hi = math.log(max(caps))
    lo = hi - 1.0
    while excess(lo) < 0:
        lo -= 2.0 * (hi - lo)
    log_nu = brentq(excess, lo, hi, xtol=1e-300, rtol=1e-15, maxiter=500)
    out = []
    for mu, p in allocate(log_nu):
        p = p.copy()
        p[p < PRUNE_RTOL * budget] = 0.0
        out.append(PowerAllocation(p, float(mu), int(np.count_nonzero(p))))
    scale = budget / sum(a.total for a in out)
    return [PowerAllocation(a.powers * scale, a.water_level, a.active_count) for a in out]


def build_sequence(bases: Sequence[SpatialModeBasis], allocations: Sequence[PowerAllocation],
                   budget: float | None = None) -> TrainingSequence:
    """Stack per-user mode training into ``T = max_k(active_k)`` pilot slots.

    User ``k``'s ``j``-th active mode is sent in slot ``j``, scaled by the
    square root of its power. Zero-power modes are dropped. For users whose
    modes are not orthogonal the slot sums carry cross terms; the sequence is
    then rescaled so that its energy equals ``budget``.
    """
    M = bases[0].M
    cols = []
    for b, a in zip(bases, allocations):
        active = np.flatnonzero(a.powers > 0)
        cols.append(b.Q[:, active] * np.sqrt(a.powers[active]))
    T = max((c.shape[1] for c in cols), default=0)
    S = np.zeros((M, T), dtype=complex)
    for c in cols:
        S[:, : c.shape[1]] += c
    coherence = cross_user_coherence(bases) if len(bases) > 1 else None
    seq = TrainingSequence(S, coherence=coherence)
    if budget is not None and T:
        energy = seq.power
        if abs(energy - budget) > 1e-12 * budget:
            seq = TrainingSequence(S * math.sqrt(budget / energy), coherence=coherence)
    return seq


def design_single_user(req: DesignRequest) -> TrainingSequence:
    """Optimal single-user training: each active eigen-direction gets its water-filled power.

    With a pilot cap only the ``max_pilots`` strongest modes are considered.
    ``T`` equals the number of active modes.
    """
    if req.K != 1:
        raise InvalidParameter(f"single-user design needs exactly one user, got {req.K}")
    modes = req.users[0].modes
    alloc = water_fill(modes.lam, req.dl_budget, req.dl_noise_var, req.max_pilots)
    return build_sequence([modes], [alloc])


def multi_user_allocations(req: DesignRequest) -> list:
    """Per-user diagonal power allocations of the large-antenna design."""
    bases = req.retained_modes()
    snrs = [u.uplink_snr for u in req.users]
    if req.criterion.is_min:
        from .optimizer import max_min_diagonal

        return max_min_diagonal(bases, snrs, req.dl_budget, req.dl_noise_var, req.betas)
    return water_fill_users(bases, snrs, req.dl_budget, req.dl_noise_var, req.betas)


def design_multi_user_large_antenna(req: DesignRequest) -> TrainingSequence:
    """Large-antenna multi-user design with ``T = max_k S_k`` pilots (fewer if modes switch off).

    Exact when distinct users' modes are orthogonal; otherwise the
    ``coherence`` of the returned sequence reports the largest overlap.
    """
    bases = req.retained_modes()
    return build_sequence(bases, multi_user_allocations(req), req.dl_budget)


def design_uniform(req: DesignRequest) -> TrainingSequence:
    """Large-antenna structure with equal power on every retained mode of every user."""
    bases = req.retained_modes()
    total = sum(b.S for b in bases)
    if total == 0:
        return TrainingSequence.empty(req.M)
    allocs = [PowerAllocation(np.full(b.S, req.dl_budget / total), float("nan"), b.S)
              for b in bases]
    return build_sequence(bases, allocs, req.dl_budget)
