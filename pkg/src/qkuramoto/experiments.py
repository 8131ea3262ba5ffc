"""Experiment configuration, validation and orchestration.

A run writes ``manifest.ndjson`` first (one ``start`` record), then the
experiment's CSV files, then appends a ``finish`` record with the wall time
and the output list.  Every CSV starts with a ``# manifest=<id>`` comment
line followed by the column header; floats use 17 significant digits.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np

from qkuramoto import __version__
from qkuramoto.fluctuations import (
    HrViolation,
    ProbeBasis,
    drift_slopes,
    gamma1,
    gamma2,
    ou_moments,
    scaling_fit,
    scaling_point,
    simulate_ou,
)
from qkuramoto.meanfield import (
    RK4_STABILITY,
    MeanFieldSolution,
    find_fixed_points,
    limit_order_params,
    linearize_uniform,
    solve_mv,
    step_count,
)
from qkuramoto.model import (
    DisorderLaw,
    InitialLaw,
    InteractionModel,
    SineModel,
    model_from_dict,
)
from qkuramoto.particles import Scheme, simulate_replicas
from qkuramoto.probes import TestFunction
from qkuramoto.seeds import MASK64, derive_seed, replica_seeds
from qkuramoto.stats import (
    Estimate,
    grouped_variance_se,
    ks_normal,
    loglog_fit,
    mean_se,
    one_way_anova,
    variance_se,
)

SEED_ENV = ("QKURAMOTO_DISORDER_SEED", "QKURAMOTO_NOISE_SEED")
MANIFEST = "manifest.ndjson"
# replicas per worker batch are capped so that R * N stays below this
BATCH_PARTICLES = 400_000
OU_EM_STABILITY = 2.0


class Experiment(str, Enum):
    FIGURE1 = "Figure1"
    FIGURE2 = "Figure2"
    COUPLING_RATE = "CouplingRate"
    CLT_INIT = "CltInit"
    OU_NULL = "OuNull"
    BIFURCATION = "Bifurcation"
    SCALING_STUDY = "ScalingStudy"
    LLN_RATE = "LlnRate"
    CUSTOM = "Custom"


@dataclass(frozen=True)
class Numerics:
    N: int = 600
    N_list: tuple = ()
    T: float = 6.0
    dt: float = 0.01
    scheme: str = Scheme.EULER_MARUYAMA.value
    record_stride: int = 10
    M: int = 64
    mv_dt: float = 1e-3
    mv_perturbation: float = 0.1
    M_probe: int = 16
    ou_dt: float = 1e-3
    window: tuple = (0.0, 6.0)
    K_list: tuple = ()
    probes: tuple = ("cos1@all", "sin1@all")

    @classmethod
    def from_dict(cls, d: dict) -> "Numerics":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown numerics fields: {sorted(unknown)}")
        d = dict(d)
        for key in ("N_list", "window", "K_list", "probes"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class Replication:
    n_disorder: int = 1
    n_noise: int = 1
    base_seeds: tuple = (0, 0)  # (disorder, noise)

    @classmethod
    def from_dict(cls, d: dict) -> "Replication":
        d = dict(d)
        if "base_seeds" in d:
            d["base_seeds"] = tuple(int(s) for s in d["base_seeds"])
        return cls(**d)

    def seeds(self, salt: int = 0) -> list[tuple[int, int]]:
        """Disorder-major (disorder_seed, noise_seed) pairs; ``salt`` separates sweep points."""
        bd, bn = self.base_seeds
        if salt:
            bd, bn = derive_seed(bd, salt, "disorder"), derive_seed(bn, salt, "noise")
        return replica_seeds(bd, bn, self.n_disorder, self.n_noise)


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    experiment: Experiment
    model: InteractionModel
    disorder: DisorderLaw
    initial: InitialLaw
    numerics: Numerics = field(default_factory=Numerics)
    replication: Replication = field(default_factory=Replication)
    output_dir: str = "out"
    workers: int = 1

    def to_dict(self) -> dict:
        num = asdict(self.numerics)
        for key in ("N_list", "window", "K_list", "probes"):
            num[key] = list(num[key])
        rep = asdict(self.replication)
        rep["base_seeds"] = list(rep["base_seeds"])
        return {
            "experiment": Experiment(self.experiment).value,
            "model": self.model.to_dict(),
            "disorder": self.disorder.to_dict(),
            "initial": self.initial.to_dict(),
            "numerics": num,
            "replication": rep,
            "output_dir": self.output_dir,
            "workers": self.workers,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        required = {"experiment", "model", "disorder", "initial"}
        missing = required - set(d)
        if missing:
            raise ValueError(f"config is missing sections: {sorted(missing)}")
        return cls(
            experiment=Experiment(d["experiment"]),
            model=model_from_dict(d["model"]),
            disorder=DisorderLaw.from_dict(d["disorder"]),
            initial=InitialLaw.from_dict(d["initial"]),
            numerics=Numerics.from_dict(d.get("numerics", {})),
            replication=Replication.from_dict(d.get("replication", {})),
            output_dir=str(d.get("output_dir", "out")),
            workers=int(d.get("workers", 1)),
        )

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def __eq__(self, other) -> bool:
        return isinstance(other, ExperimentConfig) and self.to_dict() == other.to_dict()

    def config_hash(self) -> str:
        """Hash of the canonical config; the output directory and worker count do not enter."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("workers")
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def with_seed_overrides(self, seed: int | None = None, env=None) -> "ExperimentConfig":
        """Apply seed overrides: explicit ``seed`` (both streams) wins over environment variables."""
        env = os.environ if env is None else env
        bd, bn = self.replication.base_seeds
        if env.get(SEED_ENV[0]) is not None:
            bd = int(env[SEED_ENV[0]])
        if env.get(SEED_ENV[1]) is not None:
            bn = int(env[SEED_ENV[1]])
        if seed is not None:
            bd = bn = int(seed)
        return replace(self, replication=replace(self.replication, base_seeds=(bd, bn)))


# --------------------------------------------------------------------------
# Presets
# --------------------------------------------------------------------------


def preset(name: str | Experiment) -> ExperimentConfig:
    exp = Experiment(name)
    fig1 = dict(model=SineModel(6.0), disorder=DisorderLaw.symmetric_pair(1.0))
    fig2 = dict(model=SineModel(4.0), disorder=DisorderLaw.symmetric_pair(0.5))
    out = f"out/{exp.value.lower()}"
    if exp is Experiment.FIGURE1:
        return ExperimentConfig(
            exp, **fig1, initial=InitialLaw.uniform(),
            numerics=Numerics(N=600, T=20.0, dt=0.01, record_stride=10, window=(6.0, 20.0)),
            output_dir=out,
        )
    if exp is Experiment.FIGURE2:
        return ExperimentConfig(
            exp, **fig2, initial=InitialLaw.uniform(),
            numerics=Numerics(N=400, T=20.0, dt=0.01, record_stride=10, window=(5.0, 20.0)),
            replication=Replication(n_disorder=4, n_noise=1, base_seeds=(2, 2)),
            output_dir=out,
        )
    if exp is Experiment.LLN_RATE:
        return ExperimentConfig(
            exp, **fig1, initial=InitialLaw.von_mises(1.0),
            numerics=Numerics(N_list=(100, 200, 400, 800, 1600, 3200), T=6.0, dt=0.01, record_stride=10),
            replication=Replication(n_disorder=100, n_noise=1, base_seeds=(11, 12)),
            output_dir=out,
        )
    if exp is Experiment.COUPLING_RATE:
        return ExperimentConfig(
            exp, **fig2, initial=InitialLaw.von_mises(4.0),
            numerics=Numerics(N_list=(50, 100, 200, 400, 800), T=2.0, dt=0.01, record_stride=1),
            replication=Replication(n_disorder=200, n_noise=1, base_seeds=(21, 22)),
            output_dir=out,
        )
    if exp is Experiment.CLT_INIT:
        return ExperimentConfig(
            exp, **fig1, initial=InitialLaw.von_mises(1.0),
            numerics=Numerics(
                N=10_000, T=0.0, dt=0.01, record_stride=1,
                probes=("cos1@all", "sin1@all", "cos1@a0", "sin1@a1", "one@a0", "cos2@all", "cos1@a1"),
            ),
            replication=Replication(n_disorder=200, n_noise=5, base_seeds=(31, 32)),
            output_dir=out,
        )
    if exp is Experiment.OU_NULL:
        return ExperimentConfig(
            exp, model=SineModel(0.0), disorder=DisorderLaw.dirac(0.0), initial=InitialLaw.uniform(),
            numerics=Numerics(T=2.0, M=16, mv_dt=1e-3, M_probe=4, ou_dt=0.01, record_stride=50,
                              probes=("cos1@all", "sin1@all")),
            replication=Replication(n_disorder=1, n_noise=10_000, base_seeds=(41, 42)),
            output_dir=out,
        )
    if exp is Experiment.BIFURCATION:
        return ExperimentConfig(
            exp, **fig1, initial=InitialLaw.uniform(),
            numerics=Numerics(K_list=tuple(float(k) for k in np.arange(0.5, 8.01, 0.5))),
            output_dir=out,
        )
    if exp is Experiment.SCALING_STUDY:
        return ExperimentConfig(
            exp, **fig2, initial=InitialLaw.von_mises(4.0),
            numerics=Numerics(N_list=(100, 200, 400, 800, 1600), T=10.0, dt=0.01, record_stride=10,
                              window=(2.0, 10.0)),
            replication=Replication(n_disorder=40, n_noise=5, base_seeds=(51, 52)),
            output_dir=out,
        )
    return ExperimentConfig(
        exp, **fig1, initial=InitialLaw.uniform(),
        numerics=Numerics(N=100, T=1.0, dt=0.01, record_stride=10),
        output_dir=out,
    )


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------

_PDE_EXPERIMENTS = {Experiment.FIGURE1, Experiment.COUPLING_RATE, Experiment.OU_NULL, Experiment.LLN_RATE}
_PSI_EXPERIMENTS = {Experiment.FIGURE2, Experiment.SCALING_STUDY}
_SWEEP_EXPERIMENTS = {Experiment.LLN_RATE, Experiment.COUPLING_RATE, Experiment.SCALING_STUDY}


def parse_probe(label: str, n_atoms: int) -> TestFunction:
    """Probe labels: ``one@all``, ``cos3@a1``, ``sin1@all``."""
    try:
        head, where = label.split("@")
        if head == "one":
            kind, k = "one", 0
        else:
            kind, k = head[:3], int(head[3:])
        atom = None if where == "all" else int(where[1:])
    except (ValueError, IndexError):
        raise ValueError(f"malformed probe label {label!r}") from None
    if kind not in ("one", "cos", "sin") or (kind != "one" and k < 1):
        raise ValueError(f"malformed probe label {label!r}")
    if atom is not None and not 0 <= atom < n_atoms:
        raise ValueError(f"probe {label!r} refers to a missing atom")
    return TestFunction.trig(kind, k, n_atoms, atom=atom)


def validate(cfg: ExperimentConfig, require_pde: bool = False) -> list[str]:
    """Every violated constraint, as human-readable strings; empty iff the run may start.

    ``require_pde`` adds the mean-field checks for runners that solve the limit
    equation regardless of the experiment kind.
    """
    v: list[str] = []
    num, rep = cfg.numerics, cfg.replication
    exp = Experiment(cfg.experiment)
    try:
        cfg.model.check_law(cfg.disorder)
    except ValueError as e:
        v.append(f"model: {e}")
    if exp in _SWEEP_EXPERIMENTS:
        if not num.N_list or any(int(n) != n or n < 1 for n in num.N_list):
            v.append("numerics.N_list: need a non-empty list of positive integers")
        elif len(num.N_list) < 2:
            v.append("numerics.N_list: a rate fit needs at least two sizes")
    elif int(num.N) != num.N or num.N < 1:
        v.append("numerics.N: must be a positive integer")
    if not (np.isfinite(num.dt) and num.dt > 0):
        v.append("numerics.dt: must be > 0")
    if not (np.isfinite(num.T) and num.T >= 0):
        v.append("numerics.T: must be >= 0")
    elif num.dt > 0:
        if num.T > 0 and num.dt > num.T:
            v.append("numerics.dt: must not exceed T")
        try:
            step_count(num.T, num.dt)
        except ValueError as e:
            v.append(f"numerics.T/dt: {e}")
    if num.record_stride < 1:
        v.append("numerics.record_stride: must be >= 1")
    try:
        Scheme(num.scheme)
    except ValueError:
        v.append(f"numerics.scheme: unknown scheme {num.scheme!r}")
    if exp in _PDE_EXPERIMENTS or require_pde:
        if num.M < 2:
            v.append("numerics.M: spectral truncation must be >= 2")
        if not num.mv_dt > 0:
            v.append("numerics.mv_dt: must be > 0")
        elif num.mv_dt * num.M**2 / 2 >= RK4_STABILITY:
            v.append(
                f"numerics.mv_dt: RK4 stability bound violated, mv_dt*M^2/2 = {num.mv_dt * num.M**2 / 2:.4g} "
                f">= {RK4_STABILITY}"
            )
        else:
            try:
                step_count(num.T, num.mv_dt)
            except ValueError as e:
                v.append(f"numerics.T/mv_dt: {e}")
    if exp is Experiment.OU_NULL:
        if num.M_probe < 1:
            v.append("numerics.M_probe: must be >= 1")
        elif not num.ou_dt > 0 or num.ou_dt * num.M_probe**2 / 2 >= OU_EM_STABILITY:
            v.append("numerics.ou_dt: Euler-Maruyama stability needs ou_dt*M_probe^2/2 < 2")
    if exp in (Experiment.CLT_INIT, Experiment.OU_NULL):
        for label in num.probes:
            try:
                parse_probe(label, cfg.disorder.n_atoms)
            except ValueError as e:
                v.append(f"numerics.probes: {e}")
    if exp is Experiment.BIFURCATION:
        if not cfg.disorder.is_symmetric():
            v.append("disorder: Bifurcation assumes a symmetric disorder law (w -> -w with equal weights)")
        if not isinstance(cfg.model, SineModel):
            v.append("model: Bifurcation is defined for the sine model")
        if not num.K_list or any(k < 0 for k in num.K_list):
            v.append("numerics.K_list: need a non-empty list of couplings >= 0")
    if exp in _PSI_EXPERIMENTS:
        t0, t1 = num.window
        if not 0 <= t0 < t1 <= num.T + 1e-12:
            v.append("numerics.window: need 0 <= t0 < t1 <= T")
        if isinstance(cfg.model, SineModel):
            if linearize_uniform(cfg.model.K, cfg.disorder) <= 0:
                v.append(
                    "(H_r) prerequisite: the uniform state is linearly stable at this coupling, "
                    "so the phase is not expected to be defined on the window"
                )
        else:
            v.append("model: phase-drift studies are defined for the sine model")
    if exp is Experiment.CLT_INIT and rep.n_disorder < 2:
        v.append("replication.n_disorder: the quenched decomposition needs >= 2 disorder samples")
    if exp is Experiment.SCALING_STUDY and rep.n_disorder < 2:
        v.append("replication.n_disorder: the disorder-average needs >= 2 disorder samples")
    if rep.n_disorder < 1 or rep.n_noise < 1:
        v.append("replication: n_disorder and n_noise must be >= 1")
    for s in rep.base_seeds:
        if not 0 <= int(s) <= MASK64:
            v.append("replication.base_seeds: seeds must be unsigned 64-bit integers")
    if len(rep.base_seeds) != 2:
        v.append("replication.base_seeds: need (disorder_seed, noise_seed)")
    if cfg.workers < 1:
        v.append("workers: must be >= 1")
    if not cfg.output_dir:
        v.append("output_dir: must be a non-empty path")
    return v


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(violations))
        self.violations = violations


# --------------------------------------------------------------------------
# Output helpers
# --------------------------------------------------------------------------


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


class Writer:
    """Collects CSV files for one run; the only place that touches the output directory."""

    def __init__(self, out_dir: Path, manifest_id: str):
        self.dir = out_dir
        self.manifest_id = manifest_id
        self.files: list[str] = []

    def csv(self, name: str, header: list[str], rows) -> None:
        buf = io.StringIO()
        buf.write(f"# manifest={self.manifest_id}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) for x in row])
        (self.dir / name).write_text(buf.getvalue())
        self.files.append(name)


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    """(header, rows) of a run CSV, skipping the manifest comment line."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


# --------------------------------------------------------------------------
# Parallel replica batches
# --------------------------------------------------------------------------


def _batches(seeds: list, N: int) -> list[list]:
    size = max(1, BATCH_PARTICLES // max(1, N))
    return [seeds[i : i + size] for i in range(0, len(seeds), size)]


def _pmap(fn: Callable, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, *zip(*jobs)))


def _particle_batch(cfg_dict, N, T, seeds, record_stride, probes, with_P):
    """Worker entry: returns (times, order, probe_means, sup_gap2, omega) for one batch."""
    cfg = ExperimentConfig.from_dict(cfg_dict)
    P = _solve_pde(cfg, T) if with_P else None
    probe_fns = [parse_probe(p, cfg.disorder.n_atoms) for p in probes]
    run = simulate_replicas(
        cfg.model, cfg.disorder, cfg.initial, N, T, cfg.numerics.dt, seeds,
        record_stride=record_stride, scheme=cfg.numerics.scheme, probes=probe_fns, coupled_with=P,
    )
    return run.times, run.order, run.probe_means, run.sup_gap2


def _run_particles(cfg: ExperimentConfig, N: int, seeds, *, T=None, record_stride=None, probes=(), coupled=False):
    T = cfg.numerics.T if T is None else T
    stride = cfg.numerics.record_stride if record_stride is None else record_stride
    d = cfg.to_dict()
    jobs = [(d, N, T, b, stride, tuple(probes), coupled) for b in _batches(list(seeds), N)]
    parts = _pmap(_particle_batch, jobs, cfg.workers)
    times = parts[0][0]
    order = np.concatenate([p[1] for p in parts])
    pm = np.concatenate([p[2] for p in parts]) if probes else None
    gap = np.concatenate([p[3] for p in parts]) if coupled else None
    return times, order, pm, gap


_PDE_CACHE: dict = {}


def _pde_initial(cfg: ExperimentConfig) -> InitialLaw:
    lam = cfg.initial
    if lam.kind == "uniform" and Experiment(cfg.experiment) is Experiment.FIGURE1:
        # the uniform state is stationary for the limit; start it slightly off uniform
        return InitialLaw.von_mises(cfg.numerics.mv_perturbation)
    return lam


def _save_every(cfg: ExperimentConfig) -> int:
    ratio = cfg.numerics.dt / cfg.numerics.mv_dt
    return int(round(ratio)) if abs(ratio - round(ratio)) < 1e-9 and ratio >= 1 else 1


def _solve_pde(cfg: ExperimentConfig, T: float) -> MeanFieldSolution:
    key = (cfg.config_hash(), float(T))
    if key not in _PDE_CACHE:
        num = cfg.numerics
        _PDE_CACHE[key] = solve_mv(
            cfg.model, cfg.disorder, _pde_initial(cfg), T, dt=num.mv_dt, M=num.M, save_every=_save_every(cfg)
        )
    return _PDE_CACHE[key]


# --------------------------------------------------------------------------
# Runners
# --------------------------------------------------------------------------


def _mean_or_single(x) -> Estimate:
    x = np.asarray(x, dtype=float)
    return mean_se(x) if x.size > 1 else Estimate(float(x[0]), float("nan"))


def _order_rows(times, order, seeds):
    for r, (ds, ns) in enumerate(seeds):
        for t, z in zip(times, order[r]):
            rr = abs(z)
            degenerate = rr < 1e-12
            psi = 0.0 if degenerate else float(np.mod(np.angle(z), 2 * np.pi))
            yield (r, ds, ns, float(t), rr, psi, degenerate)


ORDER_HEADER = ["replica", "disorder_seed", "noise_seed", "t", "r", "psi", "degenerate"]


def _mv_rows(P: MeanFieldSolution):
    for t in P.times:
        r, psi, deg = limit_order_params(P, float(t))
        yield (float(t), r, psi, deg)


MV_HEADER = ["t", "r", "psi", "degenerate"]


def run_custom(cfg: ExperimentConfig, w: Writer) -> None:
    seeds = cfg.replication.seeds()
    if cfg.numerics.T == 0:
        # an empty horizon records nothing
        w.csv("particle_r_psi.csv", ORDER_HEADER, [])
        return
    times, order, _, _ = _run_particles(cfg, cfg.numerics.N, seeds)
    w.csv("particle_r_psi.csv", ORDER_HEADER, _order_rows(times, order, seeds))


def run_mv(cfg: ExperimentConfig, w: Writer) -> None:
    P = _solve_pde(cfg, cfg.numerics.T)
    w.csv("mv_solution.csv", MV_HEADER, _mv_rows(P))


def run_figure1(cfg: ExperimentConfig, w: Writer) -> None:
    seeds = cfg.replication.seeds()
    P = _solve_pde(cfg, cfg.numerics.T)
    w.csv("mv_solution.csv", MV_HEADER, _mv_rows(P))
    times, order, _, _ = _run_particles(cfg, cfg.numerics.N, seeds)
    w.csv("particle_r_psi.csv", ORDER_HEADER, _order_rows(times, order, seeds))
    rstar = 0.0
    if isinstance(cfg.model, SineModel) and cfg.disorder.is_symmetric():
        stable = find_fixed_points(cfg.model.K, cfg.disorder).stable_nontrivial()
        rstar = max(stable) if stable else 0.0
    rows = []
    for r in range(len(seeds)):
        for t, z in zip(times, order[r]):
            rl = limit_order_params(P, float(t))[0]
            rows.append((r, float(t), abs(z), rl, abs(abs(z) - rl), rstar))
    w.csv("comparison.csv", ["replica", "t", "r_particle", "r_meanfield", "abs_diff", "r_star"], rows)


def run_figure2(cfg: ExperimentConfig, w: Writer) -> None:
    seeds = cfg.replication.seeds()
    times, order, _, _ = _run_particles(cfg, cfg.numerics.N, seeds)
    sel = times >= cfg.numerics.window[0] - 1e-9
    if np.min(np.abs(order[:, sel])) < 1e-12:
        raise HrViolation("degenerate phase inside the window")
    psi = np.unwrap(np.angle(order[:, sel]), axis=-1)
    rows = []
    for r, (ds, ns) in enumerate(seeds):
        for t, z, p in zip(times[sel], order[r, sel], psi[r]):
            rows.append((r, ds, ns, float(t), abs(z), p))
    w.csv("particle_r_psi.csv", ["replica", "disorder_seed", "noise_seed", "t", "r", "psi_unwrapped"], rows)
    slopes = drift_slopes(times[sel], order[:, sel])
    w.csv("psi_drift.csv", ["replica", "disorder_seed", "noise_seed", "slope"],
          [(r, ds, ns, s) for r, ((ds, ns), s) in enumerate(zip(seeds, slopes))])


def run_lln_rate(cfg: ExperimentConfig, w: Writer) -> None:
    P = _solve_pde(cfg, cfg.numerics.T)
    rows, means = [], []
    for N in cfg.numerics.N_list:
        seeds = cfg.replication.seeds(salt=N)
        times, order, _, _ = _run_particles(cfg, N, seeds)
        r_lim = np.array([limit_order_params(P, float(t))[0] for t in times])
        err = np.max(np.abs(np.abs(order) - r_lim[None]), axis=1)
        est = _mean_or_single(err)
        rows.append((N, est.value, est.se))
        means.append(est.value)
    w.csv("lln_rate.csv", ["N", "mean_sup_abs_err", "stderr"], rows)
    fit = loglog_fit(cfg.numerics.N_list, means)
    w.csv("lln_fit.csv", ["slope", "slope_se", "intercept"], [(fit.slope, fit.slope_se, fit.intercept)])


def run_coupling_rate(cfg: ExperimentConfig, w: Writer) -> None:
    rows, means = [], []
    for N in cfg.numerics.N_list:
        seeds = cfg.replication.seeds(salt=N)
        _, _, _, gap = _run_particles(cfg, N, seeds, coupled=True)
        per_rep = gap.mean(axis=1)
        est = _mean_or_single(per_rep)
        rows.append((N, est.value, est.se, float(np.median(N * per_rep))))
        means.append(est.value)
    w.csv("coupling_rate.csv", ["N", "mean_sup_gap2", "stderr", "median_N_gap2"], rows)
    fit = loglog_fit(cfg.numerics.N_list, means)
    w.csv("coupling_fit.csv", ["slope", "slope_se", "intercept"], [(fit.slope, fit.slope_se, fit.intercept)])


def run_clt_init(cfg: ExperimentConfig, w: Writer) -> None:
    num, rep = cfg.numerics, cfg.replication
    seeds = rep.seeds()
    labels = list(num.probes)
    probes = [parse_probe(p, cfg.disorder.n_atoms) for p in labels]
    times, _, pm, _ = _run_particles(cfg, num.N, seeds, probes=labels)
    sq = np.sqrt(num.N)
    need_P = num.T > 0
    P = _solve_pde(cfg, num.T) if need_P else None
    limits = np.array([
        [p.expect(P.coeffs_at(float(t)), cfg.disorder.weight_array) if need_P else p.expect_initial(cfg.initial, cfg.disorder)
         for p in probes]
        for t in times
    ])
    eta = sq * (pm - limits[None])
    rows = []
    for r, (ds, ns) in enumerate(seeds):
        for j, t in enumerate(times):
            for k, lab in enumerate(labels):
                rows.append((float(t), lab, eta[r, j, k], ds, ns))
    w.csv("fluct_trace.csv", ["t", "probe_id", "value", "disorder_seed", "noise_seed"], rows)

    summary, quenched = [], []
    for k, (lab, p) in enumerate(zip(labels, probes)):
        g1 = gamma1(p, p, cfg.initial, cfg.disorder)
        g2 = gamma2(p, p, cfg.initial, cfg.disorder)
        table = eta[:, 0, k].reshape(rep.n_disorder, rep.n_noise)
        est = grouped_variance_se(table)
        # one value per disorder sample keeps the KS sample independent
        ks, pval = ks_normal(table[:, 0], g1 + g2) if g1 + g2 > 0 else (float("nan"), float("nan"))
        summary.append((lab, g1, g2, est.value, est.se, est.z(g1 + g2), ks, pval))
        an = one_way_anova(table)
        quenched.append((lab, g2, an.between_var.value, an.between_var.se, an.between_var.z(g2)))
    w.csv("clt_summary.csv", ["probe_id", "gamma1", "gamma2", "emp_var", "var_se", "z", "ks_stat", "ks_p"], summary)
    w.csv("clt_quenched.csv", ["probe_id", "gamma2", "between_var", "between_se", "z"], quenched)


def _ou_batch(cfg_dict, seeds):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    num = cfg.numerics
    P = _solve_pde(cfg, num.T)
    basis = ProbeBasis(cfg.disorder, num.M_probe)
    probes = [parse_probe(p, cfg.disorder.n_atoms) for p in num.probes]
    stride = max(1, int(round(num.record_stride * num.dt / num.ou_dt)))
    res = simulate_ou(P, cfg.model, cfg.disorder, cfg.initial, basis, num.T, num.ou_dt, seeds,
                      probes=probes, record_stride=stride)
    return res.times, res.values


def run_ou(cfg: ExperimentConfig, w: Writer) -> None:
    num = cfg.numerics
    seeds = cfg.replication.seeds()
    jobs = [(cfg.to_dict(), b) for b in _batches(seeds, 400)]
    parts = _pmap(_ou_batch, jobs, cfg.workers)
    times = parts[0][0]
    vals = np.concatenate([p[1] for p in parts])
    labels = list(num.probes)
    rows = []
    for r, (ds, ns) in enumerate(seeds):
        for j, t in enumerate(times):
            for k, lab in enumerate(labels):
                rows.append((float(t), lab, vals[r, j, k], ds, ns))
    w.csv("ou_values.csv", ["t", "probe_id", "value", "disorder_seed", "noise_seed"], rows)
    P = _solve_pde(cfg, num.T)
    probes = [parse_probe(p, cfg.disorder.n_atoms) for p in labels]
    basis = ProbeBasis(cfg.disorder, num.M_probe)
    mt, cov = ou_moments(P, cfg.model, cfg.disorder, cfg.initial, basis, num.T, num.ou_dt, probes, record_stride=1)
    summary = []
    for j, t in enumerate(times):
        i = int(np.argmin(np.abs(mt - t)))
        for k, lab in enumerate(labels):
            est = variance_se(vals[:, j, k]) if len(seeds) >= 4 else None
            summary.append((float(t), lab, est.value if est else float("nan"), est.se if est else float("nan"),
                            cov[i, k, k]))
    w.csv("ou_summary.csv", ["t", "probe_id", "emp_var", "var_se", "moment_var"], summary)


def run_bifurcation(cfg: ExperimentConfig, w: Writer) -> None:
    rows, samples = [], []
    for K in cfg.numerics.K_list:
        rep = find_fixed_points(float(K), cfg.disorder)
        lead = linearize_uniform(float(K), cfg.disorder)
        roots = ";".join(f"{fmt(r)}:{s}" for r, s in rep.roots)
        stable = rep.stable_nontrivial()
        rows.append((float(K), lead, len(rep.roots), max(stable) if stable else 0.0, roots))
        samples.extend((float(K), r, p) for r, p in rep.map_samples)
    w.csv("bifurcation.csv", ["K", "leading_eigenvalue", "n_roots", "stable_r", "roots"], rows)
    w.csv("psi_map.csv", ["K", "r", "Psi"], samples)


def run_scaling(cfg: ExperimentConfig, w: Writer) -> None:
    num, rep = cfg.numerics, cfg.replication
    t0, _ = num.window
    points, drift_rows = [], []
    for N in num.N_list:
        seeds = rep.seeds(salt=N)
        times, order, _, _ = _run_particles(cfg, N, seeds, T=num.window[1])
        sel = times >= t0 - 1e-9
        if np.min(np.abs(order[:, sel])) < 1e-12:
            raise HrViolation(f"N={N}: degenerate phase in the window")
        pt = scaling_point(N, times[sel], order[:, sel], rep.n_disorder, rep.n_noise)
        points.append(pt)
        slopes = drift_slopes(times[sel], order[:, sel])
        drift_rows.extend((N, ds, ns, s) for (ds, ns), s in zip(seeds, slopes))
    res = scaling_fit(points)
    w.csv("scaling.csv", ["N", "mean_abs_speed", "stderr", "signed_mean", "signed_se", "between_var", "between_se"],
          [(p.N, p.mean_abs_speed, p.stderr, p.signed.grand_mean.value, p.signed.grand_mean.se,
            p.signed.between_var.value, p.signed.between_var.se) for p in points])
    w.csv("scaling_fit.csv", ["slope", "slope_se", "intercept"], [(res.slope, res.slope_se, res.fit.intercept)])
    w.csv("psi_drift.csv", ["N", "disorder_seed", "noise_seed", "slope"], drift_rows)


RUNNERS = {
    Experiment.FIGURE1: run_figure1,
    Experiment.FIGURE2: run_figure2,
    Experiment.COUPLING_RATE: run_coupling_rate,
    Experiment.CLT_INIT: run_clt_init,
    Experiment.OU_NULL: run_ou,
    Experiment.BIFURCATION: run_bifurcation,
    Experiment.SCALING_STUDY: run_scaling,
    Experiment.LLN_RATE: run_lln_rate,
    Experiment.CUSTOM: run_custom,
}


@dataclass(frozen=True)
class RunManifest:
    manifest_id: str
    config_hash: str
    seeds: list
    code_version: str
    wall_time: float
    outputs: list
    out_dir: str


def run(cfg: ExperimentConfig, runner: Callable | None = None) -> RunManifest:
    """Validate, write the manifest, execute and record outputs."""
    violations = validate(cfg, require_pde=runner is run_mv)
    if violations:
        raise ConfigError(violations)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    runner = RUNNERS[Experiment(cfg.experiment)] if runner is None else runner
    chash = cfg.config_hash()
    mid = hashlib.sha256(f"{chash}:{runner.__name__}".encode()).hexdigest()[:16]
    seeds = [list(s) for s in cfg.replication.seeds()]
    start = {
        "event": "start",
        "manifest_id": mid,
        "config_hash": chash,
        "runner": runner.__name__,
        "code_version": __version__,
        "seeds": seeds,
        "config": cfg.to_dict(),
    }
    mpath = out / MANIFEST
    mpath.write_text(json.dumps(start, sort_keys=True) + "\n")
    w = Writer(out, mid)
    t0 = time.perf_counter()
    runner(cfg, w)
    wall = time.perf_counter() - t0
    with mpath.open("a") as f:
        f.write(json.dumps({"event": "finish", "manifest_id": mid, "wall_time": wall, "outputs": w.files},
                           sort_keys=True) + "\n")
    return RunManifest(mid, chash, seeds, __version__, wall, list(w.files), str(out))


__all__ = [
    "ConfigError",
    "Experiment",
    "ExperimentConfig",
    "Numerics",
    "Replication",
    "RunManifest",
    "preset",
    "read_csv",
    "run",
    "validate",
]
