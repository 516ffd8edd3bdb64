"""Random instances and independent reference computations shared by the tests."""

import math

import numpy as np

from keytrain.channel import SpatialModeBasis, UserStatistics


def random_unitary(rng, M):
    A = rng.normal(size=(M, M)) + 1j * rng.normal(size=(M, M))
    Q, R = np.linalg.qr(A)
    return Q * (np.diag(R) / np.abs(np.diag(R)))


def random_basis(rng, M, S, lam_range=(0.05, 5.0), Q=None):
    Q = random_unitary(rng, M)[:, :S] if Q is None else Q
    lam = np.sort(rng.uniform(*lam_range, size=S))[::-1]
    return SpatialModeBasis(Q, lam)


def log_uniform(rng, lo=0.01, hi=100.0, size=None):
    return np.exp(rng.uniform(math.log(lo), math.log(hi), size=size))


def random_user(rng, M, S, rho=None, **kw):
    rho = log_uniform(rng) if rho is None else rho
    return UserStatistics(random_basis(rng, M, S, **kw), float(rho))


def random_psd(rng, M, rank=None, trace=1.0):
    rank = M if rank is None else rank
    A = rng.normal(size=(M, rank)) + 1j * rng.normal(size=(M, rank))
    C = A @ A.conj().T
    return C * (trace / np.trace(C).real)


def bisection_water_fill(lam, budget, noise_var=1.0, iters=200):
    """Water level by bisection on sum((mu - noise_var/lam)^+) = budget."""
    lam = np.asarray(lam, dtype=float)
    floor = noise_var / lam
    lo, hi = 0.0, floor.max() + budget
    for _ in range(iters):
        mu = 0.5 * (lo + hi)
        if np.maximum(mu - floor, 0).sum() > budget:
            hi = mu
        else:
            lo = mu
    mu = 0.5 * (lo + hi)
    return mu, np.maximum(mu - floor, 0)


def woodbury_literal(user, C, noise_var):
    """log2|Lam + I/rho| - log2|I/rho + (Lam^-1 + Q^H C Q / s2)^-1| with explicit inverses."""
    lam, Q, rho = user.modes.lam, user.modes.Q, user.uplink_snr
    S = lam.size
    L = np.diag(lam)
    A = np.linalg.inv(L) + Q.conj().T @ C @ Q / noise_var
    first = np.linalg.slogdet(L + np.eye(S) / rho)[1]
    second = np.linalg.slogdet(np.eye(S) / rho + np.linalg.inv(A))[1]
    return (first - second) / math.log(2)


def joint_mi_bits(user, S_dl, noise_var):
    """I(z_ul; z_dl) = log|C_uu| + log|C_dd| - log|C_joint| on the full M-dim UL observation."""
    R = user.modes.covariance()
    rho = user.uplink_snr
    M, T = S_dl.shape
    C_uu = rho * R + np.eye(M)
    C_ud = math.sqrt(rho) * R @ S_dl
    C_dd = S_dl.conj().T @ R @ S_dl + noise_var * np.eye(T)
    joint = np.block([[C_uu, C_ud], [C_ud.conj().T, C_dd]])
    ld = lambda X: np.linalg.slogdet(X)[1]  # noqa: E731
    return (ld(C_uu) + ld(C_dd) - ld(joint)) / math.log(2)


def hermitian_directions(n):
    """Real-inner-product orthogonal basis of n x n Hermitian matrices."""
    out = []
    for i in range(n):
        E = np.zeros((n, n), dtype=complex)
        E[i, i] = 1
        out.append(E)
        for j in range(i + 1, n):
            E = np.zeros((n, n), dtype=complex)
            E[i, j] = E[j, i] = 1
            out.append(E)
            E = np.zeros((n, n), dtype=complex)
            E[i, j], E[j, i] = 1j, -1j
            out.append(E)
    return out


def batched_capacity(user, Cs, noise_var):
    """Vectorized Woodbury-form capacity for a stack of training covariances."""
    lam, Q, rho = user.modes.lam, user.modes.Q, user.uplink_snr
    d = np.sqrt(lam)
    G = np.einsum("ms,nmk,kt->nst", Q.conj(), Cs, Q) / noise_var
    B = np.eye(lam.size) + d[:, None] * G * d[None, :]
    first = np.sum(np.log(lam + 1 / rho))
    nats = first - np.linalg.slogdet(np.diag(lam) + B / rho)[1] + np.linalg.slogdet(B)[1]
    return nats / math.log(2)
