"""Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned below."""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import (
    batched_capacity,
    hermitian_directions,
    log_uniform,
    random_basis,
    random_psd,
    random_unitary,
    random_user,
)
from keytrain.bench import build_users, load_config, run_capacity_sweep, run_large_antenna_convergence
from keytrain.capacity import (
    TrainingSequence,
    capacity_determinant,
    capacity_monte_carlo,
    capacity_woodbury,
    evaluate,
)
from keytrain.channel import UserStatistics, make_rng
from keytrain.cli import main
from keytrain.designer import (
    DesignRequest,
    design_multi_user_large_antenna,
    design_single_user,
    multi_user_allocations,
    water_fill,
)
from keytrain.optimizer import capacity_gradient, maximize, reduce_subspace, reduced_capacity

SCENARIOS = Path(__file__).parents[1] / "scenarios"

FORMULA_ATOL = 1e-9
FORMULA_BUDGET_S = 5.0
MC_SAMPLES = 100_000
MC_SIGMAS = 3.0
MC_MAX_STDERR = 0.02
MC_BUDGET_S = 60.0
RANDOM_COVARIANCES = 10_000
DOMINANCE_SLACK = 1e-9
OPTIMIZER_ATOL = 1e-6
OPTIMALITY_BUDGET_S = 120.0
KKT_ATOL = 1e-12
CONCAVITY_SLACK = 1e-9
COMPLEMENT_ATOL = 1e-10
COMPLEMENT_ENERGY_RTOL = 1e-8
GRADIENT_RTOL = 1e-5
EQUALITY_ATOL = 1e-9


@pytest.fixture(scope="module")
def fig2():
    cfg = load_config(SCENARIOS / "fig2.yaml")
    return cfg, run_capacity_sweep(cfg)


def _random_instance(rng):
    M = int(rng.integers(1, 9))
    S = int(rng.integers(1, min(M, 4) + 1))
    T = int(rng.integers(1, 7))
    user = random_user(rng, M, S, lam_range=(0.01, 10.0))
    noise = float(log_uniform(rng))
    Sdl = (rng.normal(size=(M, T)) + 1j * rng.normal(size=(M, T))) * math.sqrt(log_uniform(rng) / T)
    return user, TrainingSequence(Sdl), noise


def test_criterion_01_formula_equivalence(rng, acceptance):
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        user, seq, noise = _random_instance(rng)
        worst = max(worst, abs(capacity_determinant(user, seq, noise) - capacity_woodbury(user, seq, noise)))
    elapsed = time.perf_counter() - t0
    ok = worst <= FORMULA_ATOL and elapsed < FORMULA_BUDGET_S
    assert acceptance(1, "determinant and Woodbury forms agree", ok,
                      f"max diff {worst:.2e} bits, {elapsed:.2f} s")


def test_criterion_02_monte_carlo(rng, acceptance):
    t0 = time.perf_counter()
    worst_z, worst_se = 0.0, 0.0
    for i in range(10):
        M = int(rng.integers(2, 7))
        user = random_user(rng, M, int(rng.integers(1, min(M, 4) + 1)), rho=float(log_uniform(rng, 0.1, 100)))
        T = int(rng.integers(1, 5))
        Sdl = (rng.normal(size=(M, T)) + 1j * rng.normal(size=(M, T))) * math.sqrt(log_uniform(rng, 0.1, 100) / T)
        seq = TrainingSequence(Sdl)
        est = capacity_monte_carlo(user, seq, 1.0, MC_SAMPLES, make_rng(100 + i))
        worst_z = max(worst_z, abs(capacity_woodbury(user, seq, 1.0) - est.estimate) / est.stderr)
        worst_se = max(worst_se, est.stderr)
    elapsed = time.perf_counter() - t0
    ok = worst_z <= MC_SIGMAS and worst_se < MC_MAX_STDERR and elapsed < MC_BUDGET_S
    assert acceptance(2, "analytic capacity inside Monte Carlo error bars", ok,
                      f"max |z| {worst_z:.2f}, max stderr {worst_se:.4f}, {elapsed:.1f} s")


def _random_feasible_covariances(rng, M, budget, n):
    # random rank and eigenbasis, trace equal to the budget
    A = rng.normal(size=(n, M, M)) + 1j * rng.normal(size=(n, M, M))
    ranks = rng.integers(1, M + 1, size=n)
    A *= (np.arange(M)[None, None, :] < ranks[:, None, None])
    C = A @ np.conj(np.transpose(A, (0, 2, 1)))
    traces = np.real(np.trace(C, axis1=1, axis2=2))
    scale = budget / traces
    return C * scale[:, None, None]


def test_criterion_03_single_user_optimality(rng, acceptance):
    t0 = time.perf_counter()
    worst_gap, worst_opt = math.inf, 0.0
    for _ in range(50):
        M = int(rng.integers(1, 9))
        user = random_user(rng, M, int(rng.integers(1, min(M, 4) + 1)))
        budget = float(log_uniform(rng))
        req = DesignRequest([user], budget)
        closed = capacity_woodbury(user, design_single_user(req), 1.0)
        rand = batched_capacity(user, _random_feasible_covariances(rng, M, budget, RANDOM_COVARIANCES), 1.0)
        worst_gap = min(worst_gap, closed - rand.max())
        worst_opt = max(worst_opt, abs(maximize(req).criterion_value - closed))
    elapsed = time.perf_counter() - t0
    ok = worst_gap >= -DOMINANCE_SLACK and worst_opt <= OPTIMIZER_ATOL and elapsed < OPTIMALITY_BUDGET_S
    assert acceptance(3, "closed-form single-user design is optimal", ok,
                      f"min margin over random {worst_gap:.2e}, optimizer diff {worst_opt:.2e}, {elapsed:.1f} s")


def _kkt_residual(lam, budget, noise, alloc):
    floor = noise / lam
    p, mu = alloc.powers, alloc.water_level
    active = p > 0
    stationarity = np.abs(p[active] + floor[active] - mu)
    inactive = np.maximum(mu - floor[~active], 0.0)
    return max(stationarity.max(initial=0.0), inactive.max(initial=0.0), abs(p.sum() - budget),
               max(-p.min(), 0.0))


def test_criterion_04_water_filling(rng, acceptance):
    worst = 0.0
    for _ in range(1000):
        S = int(rng.integers(1, 9))
        lam = np.sort(log_uniform(rng, size=S))[::-1]
        budget = float(log_uniform(rng))
        noise = float(log_uniform(rng, 0.1, 10))
        worst = max(worst, _kkt_residual(lam, budget, noise, water_fill(lam, budget, noise)))
    basis = random_basis(rng, 6, 4)
    designs = [design_single_user(DesignRequest([UserStatistics(basis, rho)], 2.0)).S for rho in (0.1, 1.0, 100.0)]
    invariant = all(np.array_equal(d, designs[0]) for d in designs[1:])
    example = water_fill([2.0, 1.0], 1.0, 1.0).powers
    exact = np.allclose(example, [0.75, 0.25], rtol=0, atol=1e-15)
    ok = worst <= KKT_ATOL and invariant and exact
    assert acceptance(4, "water-filling KKT, UL-SNR invariance, worked example", ok,
                      f"max KKT residual {worst:.2e}, invariant={invariant}, example={example.tolist()}")


def test_criterion_05_concavity(rng, acceptance):
    worst = math.inf
    for _ in range(200):
        M = int(rng.integers(1, 7))
        user = random_user(rng, M, int(rng.integers(1, min(M, 4) + 1)))
        A = random_psd(rng, M, int(rng.integers(1, M + 1)), trace=float(log_uniform(rng)))
        B = random_psd(rng, M, int(rng.integers(1, M + 1)), trace=float(log_uniform(rng)))
        cA, cB = capacity_woodbury(user, A, 1.0), capacity_woodbury(user, B, 1.0)
        for theta in (0.25, 0.5, 0.75):
            mix = capacity_woodbury(user, theta * A + (1 - theta) * B, 1.0)
            worst = min(worst, mix - (theta * cA + (1 - theta) * cB))
    ok = worst >= -CONCAVITY_SLACK
    assert acceptance(5, "capacity is concave in the training covariance", ok, f"min slack {worst:.2e}")


def test_criterion_06_subspace_structure(rng, acceptance):
    worst_change, worst_energy = 0.0, 0.0
    for _ in range(20):
        M, K = 8, int(rng.integers(1, 4))
        users = [random_user(rng, M, int(rng.integers(1, 3)), rho=float(log_uniform(rng, 0.1, 100)))
                 for _ in range(K)]
        red = reduce_subspace([u.modes for u in users])
        P_perp = np.eye(M) - red.Q_tilde @ red.Q_tilde.conj().T
        T = int(rng.integers(1, 5))
        S = rng.normal(size=(M, T)) + 1j * rng.normal(size=(M, T))
        extra = P_perp @ (rng.normal(size=(M, 3)) + 1j * rng.normal(size=(M, 3)))
        for perturbed in (np.hstack([S, extra]), S + 10 * extra[:, :1]):
            for u in users:
                change = abs(capacity_woodbury(u, TrainingSequence(perturbed), 1.0)
                             - capacity_woodbury(u, TrainingSequence(S), 1.0))
                worst_change = max(worst_change, change)
        budget = float(log_uniform(rng))
        res = maximize(DesignRequest(users, budget), red)
        C = red.lift(res.C_DL_reduced)
        worst_energy = max(worst_energy, np.real(np.trace(P_perp @ C @ P_perp)) / budget)
    ok = worst_change <= COMPLEMENT_ATOL and worst_energy <= COMPLEMENT_ENERGY_RTOL
    assert acceptance(6, "power outside the mode span is useless and unused", ok,
                      f"max capacity change {worst_change:.2e} bits, max complement energy {worst_energy:.2e} p")


def test_criterion_07_orthogonal_users(rng, acceptance):
    worst, pilots_ok = 0.0, True
    for _ in range(10):
        M = 8
        U = random_unitary(rng, M)
        S1, S2 = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        users = [UserStatistics(random_basis(rng, M, S1, Q=U[:, :S1]), float(log_uniform(rng, 0.1, 100))),
                 UserStatistics(random_basis(rng, M, S2, Q=U[:, S1:S1 + S2]), float(log_uniform(rng, 0.1, 100)))]
        req = DesignRequest(users, float(log_uniform(rng, 0.1, 100)))
        seq = design_multi_user_large_antenna(req)
        worst = max(worst, abs(evaluate(users, seq, 1.0).sum - maximize(req).criterion_value))
        # weak modes switch off at low budget; once every mode is active T = max S_k
        active = [a.active_count for a in multi_user_allocations(req)]
        pilots_ok &= seq.T == max(active)
        pilots_ok &= design_multi_user_large_antenna(DesignRequest(users, 1e4)).T == max(S1, S2)
    ok = worst <= OPTIMIZER_ATOL and pilots_ok
    assert acceptance(7, "multi-user closed form is optimal for orthogonal users", ok,
                      f"max diff {worst:.2e} bits, T = max S_k: {pilots_ok}")


def test_criterion_08_gradient(rng, acceptance):
    worst = 0.0
    for _ in range(20):
        M = int(rng.integers(2, 7))
        user = random_user(rng, M, int(rng.integers(1, min(M, 4) + 1)))
        red = reduce_subspace([user.modes])
        n = red.S_eff
        Y = random_psd(rng, n, trace=float(log_uniform(rng, 0.1, 10))) + 0.1 * np.eye(n)
        W = capacity_gradient(user, Y, 1.0, red)
        fd, an = [], []
        for D in hermitian_directions(n):
            h = 1e-5 * max(1.0, np.linalg.norm(Y))
            fd.append((reduced_capacity(user, Y + h * D, 1.0, red)
                       - reduced_capacity(user, Y - h * D, 1.0, red)) / (2 * h))
            an.append(float(np.real(np.vdot(W, D))))
        fd, an = np.array(fd), np.array(an)
        worst = max(worst, np.linalg.norm(fd - an) / np.linalg.norm(an))
    ok = worst < GRADIENT_RTOL
    assert acceptance(8, "analytic gradient matches central differences", ok, f"max relative error {worst:.2e}")


def _by_key(rows):
    return {(r.K, r.dl_snr_db, r.strategy): r for r in rows}


def test_criterion_09_capacity_vs_snr_shape(fig2, acceptance):
    cfg, rows = fig2
    by = _by_key(rows)
    snrs = cfg.dl_snr_db_list
    ordering = all(
        by[K, db, "uniform"].avg_capacity_bits <= by[K, db, "large_antenna"].avg_capacity_bits
        <= by[K, db, "optimal"].avg_capacity_bits
        for K in cfg.ks for db in snrs
    )
    identity = max(abs(by[1, db, "large_antenna"].avg_capacity_bits - by[1, db, "optimal"].avg_capacity_bits)
                   for db in snrs)
    gaps = {K: [by[K, db, "optimal"].avg_capacity_bits - by[K, db, "uniform"].avg_capacity_bits
                for db in (snrs[0], snrs[-1])] for K in cfg.ks}
    shrinks = all(g[1] < g[0] for g in gaps.values())
    ok = ordering and identity <= EQUALITY_ATOL and shrinks
    detail = ", ".join(f"K={K} gap {g[0]:.3f} -> {g[1]:.3f}" for K, g in gaps.items())
    assert acceptance(9, "capacity vs DL SNR ordering and trend", ok,
                      f"ordering={ordering}, K=1 max diff {identity:.1e}, {detail}")


def test_criterion_10_pilots_vs_snr_shape(fig2, acceptance):
    cfg, rows = fig2
    single = [r.pilots for r in rows if r.K == 1 and r.strategy == "optimal"]
    monotone = all(a <= b for a, b in zip(single, single[1:]))
    max_modes = max(u.modes.S for u in build_users(cfg)[:2])
    multi = [r.pilots for r in rows if r.K == 2 and r.strategy == "large_antenna"]
    bounded = all(t <= max_modes for t in multi)
    assert acceptance(10, "pilot count vs DL SNR", monotone and bounded,
                      f"K=1 optimal {single}, K=2 large-antenna {multi} <= {max_modes}")


def test_criterion_11_large_antenna_convergence(acceptance):
    rows = run_large_antenna_convergence(load_config(SCENARIOS / "convergence.yaml"))
    coh = [r.coherence for r in rows]
    gap = [r.capacity_gap_bits for r in rows]
    decreasing = all(a > b for a, b in zip(coh, coh[1:]))
    ok = decreasing and gap[-1] < gap[0]
    assert acceptance(11, "coherence and optimal gap shrink as M grows", ok,
                      f"M={[r.M for r in rows]}, coherence {np.round(coh, 4).tolist()}, "
                      f"gap {np.round(gap, 4).tolist()}")


VALIDATE_CONFIG = """\
array: {cols: 6}
users:
  - clusters: [{azimuth: -30}]
  - clusters: [{azimuth: 40}]
dl_snr_db_list: [0, 10]
mc_samples: 10000
"""


def test_criterion_12_cli_determinism(tmp_path, acceptance):
    small = tmp_path / "validate.yaml"
    small.write_text(VALIDATE_CONFIG)
    runs = {
        "sweep": (SCENARIOS / "fig2.yaml", "sweep.csv"),
        "pilots": (SCENARIOS / "fig2.yaml", "sweep.csv"),
        "converge": (SCENARIOS / "convergence.yaml", "convergence.csv"),
        "validate": (small, "validate.csv"),
    }
    identical = {}
    for command, (cfg, name) in runs.items():
        outputs = []
        for i in range(2):
            out = tmp_path / f"{command}{i}"
            assert main([command, "--config", str(cfg), "--out", str(out), "--seed", "11"]) == 0
            outputs.append((out / name).read_bytes())
        identical[command] = outputs[0] == outputs[1]
    ok = all(identical.values())
    assert acceptance(12, "CLI outputs are byte-identical across runs", ok,
                      ", ".join(f"{k}={v}" for k, v in identical.items()))
