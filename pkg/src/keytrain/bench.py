"""Scenario configs, capacity and pilot-count sweeps, and their CSV / script outputs.

A scenario is a YAML file::

    name: two-user-upa
    array: {rows: 4, cols: 8, spacing: 0.5}
    users:
      - clusters:
          - {azimuth: -30, elevation: 5, spread: 5, power: 1.0}
      - random: {center: 45, azimuth_range: 40, elevation_range: 20, count: 6, spread: 5}
      - covariance_file: user3.txt
    ul_snr_db: 10
    dl_snr_db_list: [0, 5, 10, 15, 20]
    strategies: [uniform, large_antenna, optimal]
    criterion: sum
    seed: 7

See :class:`ScenarioConfig` for every field and its default.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import __version__
from .capacity import (
    Criterion,
    capacity_determinant,
    capacity_monte_carlo,
    capacity_woodbury,
    evaluate,
)
from .channel import (
    ArrayGeometry,
    Cluster,
    UserStatistics,
    cross_user_coherence,
    load_covariance,
    make_clustered_covariance,
    make_rng,
)
from .designer import (
    DesignRequest,
    design_multi_user_large_antenna,
    design_single_user,
    design_uniform,
)
from .errors import ConfigError, InvalidInput
from .optimizer import (
    OptimizerOptions,
    column_span,
    extract_training_sequence,
    maximize,
    reduce_subspace,
    strongest_directions,
)

log = logging.getLogger(__name__)

STRATEGIES = ("uniform", "large_antenna", "optimal")
SWEEP_HEADER = ("dl_snr_db", "strategy", "K", "avg_capacity_bits", "sum_capacity_bits",
                "pilots", "seed")
CONVERGENCE_HEADER = ("M", "dl_snr_db", "coherence", "capacity_gap_bits")
VALIDATE_HEADER = ("dl_snr_db", "strategy", "user", "woodbury_bits", "determinant_bits",
                   "mc_bits", "mc_stderr", "z_score")
ORDER_SLACK = 1e-9
FORMULA_ATOL = 1e-9
MC_GROSS_Z = 5.0


# -- configuration -------------------------------------------------------------

@dataclass(frozen=True)
class ArraySpec:
    """Uniform planar array in the y-z plane; ``rows == 1`` is a ULA along y."""

    rows: int = 1
    cols: int = 8
    spacing: float = 0.5

    @property
    def M(self) -> int:
        return self.rows * self.cols

    def geometry(self) -> ArrayGeometry:
        if self.rows == 1:
            return ArrayGeometry.ula(self.cols, self.spacing)
        return ArrayGeometry.upa(self.rows, self.cols, self.spacing)


@dataclass(frozen=True)
class RandomClusters:
    """Clusters drawn around ``center`` azimuth with the scenario seed.

    Azimuths are ``center + U(-azimuth_range, azimuth_range)``, elevations
    ``U(-elevation_range, elevation_range)`` and powers ``Exp(1)``.
    """

    center: float
    azimuth_range: float = 30.0
    elevation_range: float = 0.0
    count: int = 4
    spread: float = 5.0

    def draw(self, rng: np.random.Generator) -> tuple:
        out = []
        for _ in range(self.count):
            az = self.center + rng.uniform(-self.azimuth_range, self.azimuth_range)
            el = rng.uniform(-self.elevation_range, self.elevation_range)
            out.append(Cluster(float(az), float(el), self.spread, float(rng.exponential())))
        return tuple(out)


@dataclass(frozen=True)
class UserSpec:
    """Exactly one of ``clusters``, ``random`` or ``covariance_file``."""

    clusters: tuple | None = None
    random: RandomClusters | None = None
    covariance_file: str | None = None
    ul_snr_db: float | None = None


@dataclass(frozen=True)
class ScenarioConfig:
    users: tuple
    dl_snr_db_list: tuple
    array: ArraySpec = ArraySpec()
    name: str = "scenario"
    ul_snr_db: float = 10.0
    strategies: tuple = STRATEGIES
    criterion: Criterion = Criterion.SUM
    weights: tuple | None = None
    t_max: int | None = None
    seed: int = 0
    rank_tol: float = 1e-8
    k_values: tuple | None = None
    m_list: tuple = (8, 32, 128)
    dl_noise_var: float = 1.0
    ul_noise_var: float = 1.0
    budget_convention: str = "fixed-noise"
    optimizer: OptimizerOptions = OptimizerOptions()
    mc_samples: int = 100_000
    base_dir: Path = field(default=Path("."), compare=False)

    @property
    def K(self) -> int:
        return len(self.users)

    @property
    def ks(self) -> tuple:
        return self.k_values if self.k_values is not None else (self.K,)

    def with_seed(self, seed: int | None) -> "ScenarioConfig":
        return self if seed is None else dataclasses.replace(self, seed=int(seed))

    def dl_budget(self, dl_snr_db: float) -> float:
        # fixed-noise convention: p_DL = rho_DL * noise_var
        return 10.0 ** (dl_snr_db / 10.0) * self.dl_noise_var

    def weights_for(self, K: int) -> tuple | None:
        """The first ``K`` weights renormalized to sum to 1."""
        if self.weights is None:
            return None
        w = np.asarray(self.weights[:K])
        return tuple(float(x) for x in w / w.sum())


_TOP_KEYS = {f.name for f in dataclasses.fields(ScenarioConfig)} - {"base_dir"}
_OPT_KEYS = {"max_iters", "tol", "step_rule", "initial_step", "backtrack", "tau_start", "tau_end"}


class _Doc:
    """Parsed YAML plus its node tree, for error messages with line numbers."""

    def __init__(self, text: str, source: str):
        self.source = source
        try:
            self.root = yaml.compose(text, Loader=yaml.SafeLoader)
            self.data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{source}: YAML parse error: {exc}") from exc

    def line(self, path) -> int | None:
        node = self.root
        for key in path:
            if isinstance(node, yaml.MappingNode):
                match = [v for k, v in node.value if k.value == key]
                if not match:
                    return node.start_mark.line + 1
                node = match[0]
            elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
                node = node.value[key]
            else:
                break
        return None if node is None else node.start_mark.line + 1

    def fail(self, path, msg: str):
        name = ".".join(str(p) for p in path) or "<root>"
        line = self.line(path)
        where = f"{self.source}:{line}" if line else self.source
        raise ConfigError(f"{where}: field '{name}': {msg}")


def _number(doc, path, value, kind=float, positive=False):
    if isinstance(value, bool):
        doc.fail(path, f"expected a number, got {value!r}")
    try:
        # YAML 1.1 reads 1e-2 (no dot) as a string
        x = float(value)
    except (TypeError, ValueError):
        doc.fail(path, f"expected a number, got {value!r}")
    if not math.isfinite(x):
        doc.fail(path, f"must be finite, got {value!r}")
    if kind is int:
        if x != int(x):
            doc.fail(path, f"expected an integer, got {value!r}")
        x = int(x)
    if positive and not x > 0:
        doc.fail(path, f"must be > 0, got {value!r}")
    return x


def _mapping(doc, path, value, allowed):
    if not isinstance(value, dict):
        doc.fail(path, f"expected a mapping, got {type(value).__name__}")
    unknown = set(value) - set(allowed)
    if unknown:
        key = sorted(map(str, unknown))[0]
        doc.fail(path + (key,), f"unknown key (allowed: {', '.join(sorted(allowed))})")
    return value


def _list(doc, path, value, nonempty=True):
    if not isinstance(value, list):
        doc.fail(path, f"expected a list, got {type(value).__name__}")
    if nonempty and not value:
        doc.fail(path, "must not be empty")
    return value


def _parse_cluster(doc, path, raw):
    raw = _mapping(doc, path, raw, {"azimuth", "elevation", "spread", "power"})
    if "azimuth" not in raw:
        doc.fail(path, "missing 'azimuth'")
    return Cluster(
        azimuth=_number(doc, path + ("azimuth",), raw["azimuth"]),
        elevation=_number(doc, path + ("elevation",), raw.get("elevation", 0.0)),
        angular_spread=_number(doc, path + ("spread",), raw.get("spread", 5.0), positive=True),
        power=_number(doc, path + ("power",), raw.get("power", 1.0), positive=True),
    )


def _parse_user(doc, path, raw):
    raw = _mapping(doc, path, raw, {"clusters", "random", "covariance_file", "ul_snr_db"})
    sources = [k for k in ("clusters", "random", "covariance_file") if k in raw]
    if len(sources) != 1:
        doc.fail(path, "give exactly one of 'clusters', 'random', 'covariance_file'")
    snr = raw.get("ul_snr_db")
    snr = None if snr is None else _number(doc, path + ("ul_snr_db",), snr)
    if "clusters" in raw:
        items = _list(doc, path + ("clusters",), raw["clusters"])
        cl = tuple(_parse_cluster(doc, path + ("clusters", i), c) for i, c in enumerate(items))
        return UserSpec(clusters=cl, ul_snr_db=snr)
    if "random" in raw:
        p = path + ("random",)
        r = _mapping(doc, p, raw["random"],
                     {"center", "azimuth_range", "elevation_range", "count", "spread"})
        if "center" not in r:
            doc.fail(p, "missing 'center'")
        rc = RandomClusters(
            center=_number(doc, p + ("center",), r["center"]),
            azimuth_range=_number(doc, p + ("azimuth_range",), r.get("azimuth_range", 30.0)),
            elevation_range=_number(doc, p + ("elevation_range",), r.get("elevation_range", 0.0)),
            count=_number(doc, p + ("count",), r.get("count", 4), int, positive=True),
            spread=_number(doc, p + ("spread",), r.get("spread", 5.0), positive=True),
        )
        return UserSpec(random=rc, ul_snr_db=snr)
    f = raw["covariance_file"]
    if not isinstance(f, str) or not f:
        doc.fail(path + ("covariance_file",), "expected a file path")
    return UserSpec(covariance_file=f, ul_snr_db=snr)


def parse_config(text: str, source: str = "<config>", base_dir=".") -> ScenarioConfig:
    """Parse and validate a scenario from YAML text."""
    doc = _Doc(text, source)
    raw = _mapping(doc, (), doc.data if doc.data is not None else {}, _TOP_KEYS)
    for key in ("users", "dl_snr_db_list"):
        if key not in raw:
            doc.fail((key,), "required field is missing")
    kw: dict[str, Any] = {"base_dir": Path(base_dir)}

    if "array" in raw:
        a = _mapping(doc, ("array",), raw["array"], {"rows", "cols", "spacing"})
        kw["array"] = ArraySpec(
            rows=_number(doc, ("array", "rows"), a.get("rows", 1), int, positive=True),
            cols=_number(doc, ("array", "cols"), a.get("cols", 8), int, positive=True),
            spacing=_number(doc, ("array", "spacing"), a.get("spacing", 0.5), positive=True),
        )
    users = _list(doc, ("users",), raw["users"])
    kw["users"] = tuple(_parse_user(doc, ("users", i), u) for i, u in enumerate(users))
    snrs = _list(doc, ("dl_snr_db_list",), raw["dl_snr_db_list"])
    kw["dl_snr_db_list"] = tuple(_number(doc, ("dl_snr_db_list", i), x) for i, x in enumerate(snrs))

    if "name" in raw:
        kw["name"] = str(raw["name"])
    if "ul_snr_db" in raw:
        kw["ul_snr_db"] = _number(doc, ("ul_snr_db",), raw["ul_snr_db"])
    if "strategies" in raw:
        st = _list(doc, ("strategies",), raw["strategies"])
        for i, s in enumerate(st):
            if s not in STRATEGIES:
                doc.fail(("strategies", i), f"unknown strategy {s!r} (choose from {', '.join(STRATEGIES)})")
        if len(set(st)) != len(st):
            doc.fail(("strategies",), "duplicate strategy")
        kw["strategies"] = tuple(s for s in STRATEGIES if s in st)
    if "criterion" in raw:
        try:
            kw["criterion"] = Criterion(raw["criterion"])
        except ValueError:
            doc.fail(("criterion",), f"unknown criterion {raw['criterion']!r}")
    if raw.get("weights") is not None:
        w = _list(doc, ("weights",), raw["weights"])
        w = tuple(_number(doc, ("weights", i), x, positive=True) for i, x in enumerate(w))
        if len(w) != len(kw["users"]):
            doc.fail(("weights",), f"expected {len(kw['users'])} values (one per user), got {len(w)}")
        if abs(sum(w) - 1.0) > 1e-12:
            doc.fail(("weights",), f"weights must sum to 1, got {sum(w)!r}")
        kw["weights"] = w
    if raw.get("t_max") is not None:
        kw["t_max"] = _number(doc, ("t_max",), raw["t_max"], int, positive=True)
    if "seed" in raw:
        kw["seed"] = _number(doc, ("seed",), raw["seed"], int)
        if kw["seed"] < 0:
            doc.fail(("seed",), "must be >= 0")
    if "rank_tol" in raw:
        kw["rank_tol"] = _number(doc, ("rank_tol",), raw["rank_tol"], positive=True)
        if kw["rank_tol"] >= 1:
            doc.fail(("rank_tol",), "must be < 1")
    if raw.get("k_values") is not None:
        kv = _list(doc, ("k_values",), raw["k_values"])
        ks = tuple(_number(doc, ("k_values", i), x, int, positive=True) for i, x in enumerate(kv))
        if max(ks) > len(kw["users"]):
            doc.fail(("k_values",), f"K={max(ks)} exceeds the {len(kw['users'])} configured users")
        kw["k_values"] = tuple(sorted(set(ks)))
    if "m_list" in raw:
        ml = _list(doc, ("m_list",), raw["m_list"])
        kw["m_list"] = tuple(_number(doc, ("m_list", i), x, int, positive=True) for i, x in enumerate(ml))
    for key in ("dl_noise_var", "ul_noise_var"):
        if key in raw:
            kw[key] = _number(doc, (key,), raw[key], positive=True)
    if "budget_convention" in raw and raw["budget_convention"] != "fixed-noise":
        doc.fail(("budget_convention",), "only 'fixed-noise' is supported")
    if "optimizer" in raw:
        o = _mapping(doc, ("optimizer",), raw["optimizer"], _OPT_KEYS)
        opts = {}
        for k, v in o.items():
            if k == "step_rule":
                if v not in ("accelerated", "bb", "armijo"):
                    doc.fail(("optimizer", k), f"unknown step rule {v!r}")
                opts[k] = v
            elif k == "max_iters":
                opts[k] = _number(doc, ("optimizer", k), v, int, positive=True)
            else:
                opts[k] = _number(doc, ("optimizer", k), v, positive=True)
        kw["optimizer"] = OptimizerOptions(**opts)
    if "mc_samples" in raw:
        kw["mc_samples"] = _number(doc, ("mc_samples",), raw["mc_samples"], int, positive=True)
    return ScenarioConfig(**kw)


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror or exc}") from exc
    return parse_config(text, str(path), path.parent)


def config_to_dict(cfg: ScenarioConfig) -> dict:
    """Plain-data form with every default made explicit."""

    def user(u: UserSpec):
        d: dict[str, Any] = {}
        if u.clusters is not None:
            d["clusters"] = [{"azimuth": c.azimuth, "elevation": c.elevation,
                              "spread": c.angular_spread, "power": c.power} for c in u.clusters]
        elif u.random is not None:
            d["random"] = dataclasses.asdict(u.random)
        else:
            d["covariance_file"] = u.covariance_file
        if u.ul_snr_db is not None:
            d["ul_snr_db"] = u.ul_snr_db
        return d

    return {
        "name": cfg.name,
        "array": dataclasses.asdict(cfg.array),
        "users": [user(u) for u in cfg.users],
        "ul_snr_db": cfg.ul_snr_db,
        "dl_snr_db_list": list(cfg.dl_snr_db_list),
        "strategies": list(cfg.strategies),
        "criterion": cfg.criterion.value,
        "weights": None if cfg.weights is None else list(cfg.weights),
        "t_max": cfg.t_max,
        "seed": cfg.seed,
        "rank_tol": cfg.rank_tol,
        "k_values": None if cfg.k_values is None else list(cfg.k_values),
        "m_list": list(cfg.m_list),
        "dl_noise_var": cfg.dl_noise_var,
        "ul_noise_var": cfg.ul_noise_var,
        "budget_convention": cfg.budget_convention,
        "optimizer": dataclasses.asdict(cfg.optimizer),
        "mc_samples": cfg.mc_samples,
    }


def dump_config(cfg: ScenarioConfig, path=None) -> str:
    """YAML text that :func:`parse_config` maps back to an equal config."""
    text = yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=None)
    if path is not None:
        Path(path).write_text(text)
    return text


def config_digest(cfg: ScenarioConfig) -> str:
    """SHA-256 over the canonical config and the bytes of any covariance files it names."""
    h = hashlib.sha256(json.dumps(config_to_dict(cfg), sort_keys=True).encode())
    for u in cfg.users:
        if u.covariance_file is not None:
            p = cfg.base_dir / u.covariance_file
            h.update(p.read_bytes() if p.exists() else b"<missing>")
    return h.hexdigest()


# -- users -----------------------------------------------------------------

def user_clusters(cfg: ScenarioConfig) -> list:
    """Cluster lists per user (``None`` for file users); random draws use the scenario seed."""
    rng = make_rng(cfg.seed)
    out = []
    for u in cfg.users:
        if u.clusters is not None:
            out.append(u.clusters)
        elif u.random is not None:
            out.append(u.random.draw(rng))
        else:
            out.append(None)
    return out


def _ul_snr(cfg, spec):
    db = cfg.ul_snr_db if spec.ul_snr_db is None else spec.ul_snr_db
    return 10.0 ** (db / 10.0) / cfg.ul_noise_var


def build_users(cfg: ScenarioConfig, geometry: ArrayGeometry | None = None) -> list:
    """User statistics for every configured user on ``geometry`` (default: the config array)."""
    geometry = geometry or cfg.array.geometry()
    users = []
    for i, (spec, clusters) in enumerate(zip(cfg.users, user_clusters(cfg))):
        if clusters is not None:
            R = make_clustered_covariance(geometry, clusters)
        else:
            path = cfg.base_dir / spec.covariance_file
            try:
                R = load_covariance(path)
            except OSError as exc:
                raise ConfigError(f"users.{i}.covariance_file: cannot read {path}: {exc}") from exc
            if R.shape[0] != geometry.M:
                raise ConfigError(f"users.{i}.covariance_file: {path} has order {R.shape[0]}, "
                                  f"array has {geometry.M} antennas")
        users.append(UserStatistics.from_covariance(R, _ul_snr(cfg, spec), cfg.rank_tol))
    return users


# -- sweeps ------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    dl_snr_db: float
    strategy: str
    K: int
    avg_capacity_bits: float
    sum_capacity_bits: float
    pilots: int
    per_user: tuple
    wall_time_ms: float = field(default=0.0, compare=False)
    seed: int = 0
    converged: bool = True


def _request(cfg, users, dl_snr_db):
    K = len(users)
    crit = cfg.criterion
    return DesignRequest(users, cfg.dl_budget(dl_snr_db), cfg.dl_noise_var, cfg.t_max,
                         crit, cfg.weights_for(K) if crit.is_weighted else None)


def design(strategy: str, req: DesignRequest, cfg: ScenarioConfig):
    """Training sequence for one strategy; returns ``(sequence, converged)``."""
    if strategy == "uniform":
        return design_uniform(req), True
    if strategy == "large_antenna":
        return design_multi_user_large_antenna(req), True
    if strategy != "optimal":
        raise ValueError(f"unknown strategy {strategy!r}")
    if req.K == 1:
        return design_single_user(req), True
    reduction = reduce_subspace([u.modes for u in req.users])
    res = maximize(req, reduction, cfg.optimizer)
    seq = extract_training_sequence(res, reduction, cfg.rank_tol)
    if cfg.t_max is None or seq.T <= cfg.t_max:
        return seq, res.converged
    # The pilot cap is a rank constraint and not concave. Re-optimize inside two
    # t_max-dimensional subspaces and keep the better: the strongest directions
    # of the uncapped optimum, and the span of the large-antenna pilots (which
    # guarantees at least the large-antenna value).
    best = None
    for sub in (strongest_directions(res, reduction, cfg.t_max),
                column_span(design_multi_user_large_antenna(req).S)):
        r = maximize(req, sub, cfg.optimizer)
        if best is None or r.criterion_value > best[0].criterion_value:
            best = (r, sub)
    r, sub = best
    return extract_training_sequence(r, sub, cfg.rank_tol), r.converged


def _sweep_point(cfg, users, dl_snr_db):
    rows = []
    req = _request(cfg, users, dl_snr_db)
    for strategy in cfg.strategies:
        t0 = time.perf_counter()
        seq, ok = design(strategy, req, cfg)
        rep = evaluate(users, seq, cfg.dl_noise_var, req.criterion, req.weights)
        ms = 1e3 * (time.perf_counter() - t0)
        if not ok:
            log.warning("K=%d, %g dB, %s: optimizer did not converge", len(users), dl_snr_db, strategy)
        rows.append(SweepRow(dl_snr_db, strategy, len(users), rep.average, rep.sum, seq.T,
                             rep.per_user, ms, cfg.seed, ok))
    return rows


def _row_key(r: SweepRow):
    return (r.K, r.dl_snr_db, STRATEGIES.index(r.strategy))


def _run_points(cfg, users, jobs):
    points = [(users[:K], db) for K in cfg.ks for db in cfg.dl_snr_db_list]
    if jobs > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_sweep_point, [cfg] * len(points), *zip(*points)))
    else:
        parts = [_sweep_point(cfg, u, db) for u, db in points]
    return sorted((r for p in parts for r in p), key=_row_key)


def check_rows(rows: Sequence[SweepRow], criterion=Criterion.SUM) -> list:
    """Ordering and K=1 identity checks; returns a list of violation messages.

    The strategy ordering is only checked for the sum criterion, where the
    average capacity is the optimized quantity.
    """
    issues = []
    grouped: dict = {}
    for r in rows:
        grouped.setdefault((r.K, r.dl_snr_db), {})[r.strategy] = r
    for (K, db), g in grouped.items():
        avg = {s: g[s].avg_capacity_bits for s in g}
        if Criterion(criterion) is Criterion.SUM:
            present = [s for s in STRATEGIES if s in avg]
            for a, b in zip(present, present[1:]):
                if avg[a] > avg[b] + ORDER_SLACK:
                    issues.append(f"K={K}, {db:g} dB: {a} ({avg[a]:.12g}) > {b} ({avg[b]:.12g})")
        if K == 1 and "large_antenna" in avg and "optimal" in avg:
            if abs(avg["large_antenna"] - avg["optimal"]) > ORDER_SLACK:
                issues.append(f"K=1, {db:g} dB: large_antenna and optimal differ")
    return issues


def run_capacity_sweep(cfg: ScenarioConfig, jobs: int = 1) -> list:
    """One row per (K, DL SNR, strategy), ordered by K, SNR, then strategy.

    Every capacity is evaluated with the exact mode-space expression. Rows
    whose optimizer did not converge carry ``converged=False``.
    """
    users = build_users(cfg)
    rows = _run_points(cfg, users, jobs)
    for msg in check_rows(rows, cfg.criterion):
        log.warning("ordering check: %s", msg)
    return rows


def run_pilot_sweep(cfg: ScenarioConfig, jobs: int = 1) -> list:
    """Same rows as :func:`run_capacity_sweep`; additionally checks the pilot counts.

    Single-user optimal pilot counts must not decrease with SNR and every
    positive budget must activate at least one pilot.
    """
    rows = run_capacity_sweep(cfg, jobs)
    for msg in check_pilots(rows):
        log.warning("pilot check: %s", msg)
    return rows


def check_pilots(rows: Sequence[SweepRow]) -> list:
    issues = []
    single = sorted((r for r in rows if r.K == 1 and r.strategy == "optimal"),
                    key=lambda r: r.dl_snr_db)
    for a, b in zip(single, single[1:]):
        if b.pilots < a.pilots:
            issues.append(f"K=1 optimal: T drops from {a.pilots} at {a.dl_snr_db:g} dB "
                          f"to {b.pilots} at {b.dl_snr_db:g} dB")
    issues += [f"K={r.K}, {r.dl_snr_db:g} dB, {r.strategy}: no active pilot"
               for r in rows if r.pilots < 1]
    return issues


@dataclass(frozen=True)
class ConvergenceRow:
    M: int
    dl_snr_db: float
    coherence: float
    capacity_gap_bits: float
    converged: bool = True


def run_large_antenna_convergence(cfg: ScenarioConfig) -> list:
    """Coherence and (optimal - large_antenna) average-capacity gap on a ULA of each size in ``m_list``.

    Cluster users keep the same angles for every ``M``; file users are not
    allowed since their covariance fixes ``M``.
    """
    if cfg.K < 2:
        raise ConfigError("convergence study needs at least two users")
    if any(u.covariance_file is not None for u in cfg.users):
        raise ConfigError("convergence study needs cluster users, not covariance files")
    rows = []
    for M in cfg.m_list:
        users = build_users(cfg, ArrayGeometry.ula(M, cfg.array.spacing))
        coh = cross_user_coherence([u.modes for u in users])
        for db in cfg.dl_snr_db_list:
            req = _request(cfg, users, db)
            la, _ = design("large_antenna", req, cfg)
            opt, ok = design("optimal", req, cfg)
            gap = (evaluate(users, opt, cfg.dl_noise_var).average
                   - evaluate(users, la, cfg.dl_noise_var).average)
            rows.append(ConvergenceRow(M, db, coh, gap, ok))
    return rows


@dataclass(frozen=True)
class ValidationRow:
    dl_snr_db: float
    strategy: str
    user: int
    woodbury_bits: float
    determinant_bits: float
    mc_bits: float
    mc_stderr: float

    @property
    def z_score(self) -> float:
        if self.mc_stderr == 0:
            return 0.0 if self.mc_bits == self.woodbury_bits else math.inf
        return (self.woodbury_bits - self.mc_bits) / self.mc_stderr

    @property
    def ok(self) -> bool:
        return (abs(self.woodbury_bits - self.determinant_bits) <= FORMULA_ATOL
                and abs(self.z_score) <= MC_GROSS_Z)


def run_validation(cfg: ScenarioConfig) -> list:
    """Cross-check the analytic capacity forms and a Monte Carlo estimate for every designed sequence.

    Uses all configured users; one Philox stream seeded by the scenario seed
    is consumed in row order.
    """
    users = build_users(cfg)
    rng = make_rng(cfg.seed)
    rows = []
    for db in cfg.dl_snr_db_list:
        req = _request(cfg, users, db)
        for strategy in cfg.strategies:
            seq, _ = design(strategy, req, cfg)
            for k, u in enumerate(users):
                mc = capacity_monte_carlo(u, seq, cfg.dl_noise_var, cfg.mc_samples, rng)
                rows.append(ValidationRow(
                    db, strategy, k,
                    capacity_woodbury(u, seq, cfg.dl_noise_var),
                    capacity_determinant(u, seq, cfg.dl_noise_var),
                    mc.estimate, mc.stderr,
                ))
    return rows


# -- outputs -----------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(getattr(r, h)) for h in header])
    except OSError as exc:
        raise InvalidInput(f"{path}: cannot write: {exc.strerror or exc}") from exc
    return path


def read_sweep_csv(path) -> list:
    """Rows of a ``sweep.csv`` with numeric columns parsed."""
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SWEEP_HEADER:
            raise InvalidInput(f"{path}: unexpected header {reader.fieldnames}")
        return [{
            "dl_snr_db": float(r["dl_snr_db"]),
            "strategy": r["strategy"],
            "K": int(r["K"]),
            "avg_capacity_bits": float(r["avg_capacity_bits"]),
            "sum_capacity_bits": float(r["sum_capacity_bits"]),
            "pilots": int(r["pilots"]),
            "seed": int(r["seed"]),
        } for r in reader]


_PLOT_TEMPLATE = '''"""Plot {ylabel} against DL SNR from sweep.csv (run: python {name})."""
import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = Path(__file__).resolve().parent
curves = defaultdict(list)
with open(here / "sweep.csv", newline="") as fh:
    for row in csv.DictReader(fh):
        curves[(int(row["K"]), row["strategy"])].append(
            (float(row["dl_snr_db"]), float(row["{column}"])))

fig, ax = plt.subplots(figsize=(6, 4))
for (K, strategy), pts in sorted(curves.items()):
    pts.sort()
    ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"{{strategy}}, K={{K}}")
ax.set_xlabel("DL SNR [dB]")
ax.set_ylabel("{ylabel}")
ax.grid(True, alpha=0.3)
ax.legend()
fig.tight_layout()
fig.savefig(here / "{stem}.png", dpi=150)
'''


def _plot_script(stem, column, ylabel):
    return _PLOT_TEMPLATE.format(name=f"{stem}.py", stem=stem, column=column, ylabel=ylabel)


def write_manifest(out_dir, cfg: ScenarioConfig | None, files: Sequence[str], **extra) -> Path:
    manifest = {
        "package_version": __version__,
        "config_sha256": None if cfg is None else config_digest(cfg),
        "seed": None if cfg is None else cfg.seed,
        "files": sorted(files),
        **extra,
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _ensure_dir(out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InvalidInput(f"{out}: cannot create output directory: {exc.strerror or exc}") from exc
    return out


def emit_outputs(rows: Sequence[SweepRow], out_dir, cfg: ScenarioConfig | None = None) -> list:
    """Write ``sweep.csv``, the two plot scripts and ``manifest.json``; returns the paths."""
    out = _ensure_dir(out_dir)
    paths = [write_csv(out / "sweep.csv", SWEEP_HEADER, rows)]
    for stem, column, label in (("capacity_vs_snr", "avg_capacity_bits", "average secret-key capacity [bits]"),
                                ("pilots_vs_snr", "pilots", "number of pilots")):
        p = out / f"{stem}.py"
        p.write_text(_plot_script(stem, column, label))
        paths.append(p)
    flagged = [f"K={r.K}, {r.dl_snr_db:g} dB, {r.strategy}" for r in rows if not r.converged]
    paths.append(write_manifest(out, cfg, [p.name for p in paths], not_converged=flagged))
    return paths


def emit_convergence(rows: Sequence[ConvergenceRow], out_dir, cfg: ScenarioConfig | None = None) -> list:
    out = _ensure_dir(out_dir)
    csv_path = write_csv(out / "convergence.csv", CONVERGENCE_HEADER, rows)
    flagged = [f"M={r.M}, {r.dl_snr_db:g} dB" for r in rows if not r.converged]
    return [csv_path, write_manifest(out, cfg, [csv_path.name], not_converged=flagged)]


def emit_validation(rows: Sequence[ValidationRow], out_dir, cfg: ScenarioConfig | None = None) -> list:
    out = _ensure_dir(out_dir)
    csv_path = write_csv(out / "validate.csv", VALIDATE_HEADER, rows)
    failed = [f"{r.dl_snr_db:g} dB, {r.strategy}, user {r.user}" for r in rows if not r.ok]
    return [csv_path, write_manifest(out, cfg, [csv_path.name], failed=failed)]
