"""Quenched N-oscillator simulation.

Replicas are simulated as a batch of shape (R, N): every replica owns its
own disorder sample, initial angles and Philox noise stream, and every
reduction over particles is row-wise, so a replica gives bit-identical
output whether it runs alone or inside a batch.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from qkuramoto.meanfield import DEGENERATE_R, MeanFieldSolution, step_count
from qkuramoto.model import (
    TWO_PI,
    DisorderLaw,
    InitialLaw,
    InteractionModel,
    PointMeasure,
    SineModel,
    circle_distance,
    wrap,
)
from qkuramoto.probes import TestFunction, eval_atom_modes
from qkuramoto.seeds import MASK64, generator

# Gaussian draws are pulled per chunk of steps; cap the chunk's memory.
_CHUNK_FLOATS = 2_000_000
_MAX_CHUNK = 64


class Scheme(str, Enum):
    EULER_MARUYAMA = "EulerMaruyama"
    STOCHASTIC_HEUN = "StochasticHeun"


@dataclass(frozen=True)
class SimConfig:
    N: int
    T: float
    dt: float
    scheme: Scheme = Scheme.EULER_MARUYAMA
    noise_seed: int = 0
    disorder_seed: int = 0
    record_stride: int = 10

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError("N must be a positive integer")
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ValueError("dt must be > 0")
        if not (np.isfinite(self.T) and self.T >= 0):
            raise ValueError("T must be >= 0")
        if self.T > 0 and self.dt > self.T:
            raise ValueError("dt must not exceed T")
        step_count(self.T, self.dt)
        if int(self.record_stride) != self.record_stride or self.record_stride < 1:
            raise ValueError("record_stride must be a positive integer")
        for s in (self.noise_seed, self.disorder_seed):
            if not 0 <= int(s) <= MASK64:
                raise ValueError("seeds must be unsigned 64-bit integers")
        object.__setattr__(self, "scheme", Scheme(self.scheme))

    @property
    def n_steps(self) -> int:
        return step_count(self.T, self.dt)

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "T": self.T,
            "dt": self.dt,
            "scheme": self.scheme.value,
            "noise_seed": self.noise_seed,
            "disorder_seed": self.disorder_seed,
            "record_stride": self.record_stride,
        }


@dataclass(frozen=True, eq=False)
class OscillatorEnsemble:
    angles: np.ndarray
    disorder: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.angles, dtype=float))
        om = np.atleast_1d(np.asarray(self.disorder, dtype=float))
        if x.ndim != 1 or x.shape != om.shape or x.size < 1:
            raise ValueError("angles and disorder must be 1-d arrays of equal length >= 1")
        if self.time < 0:
            raise ValueError("time must be >= 0")
        object.__setattr__(self, "angles", wrap(x))
        object.__setattr__(self, "disorder", om)

    @property
    def N(self) -> int:
        return self.angles.size


@dataclass(frozen=True, eq=False)
class EmpiricalSnapshot:
    """nu^N_t: uniform weights 1/N on the pairs (angle, frequency)."""

    time: float
    angles: np.ndarray
    disorder: np.ndarray

    @property
    def N(self) -> int:
        return self.angles.size

    @property
    def points(self) -> np.ndarray:
        return np.column_stack([self.angles, self.disorder])

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.N, 1.0 / self.N)

    def measure(self) -> PointMeasure:
        return PointMeasure(self.angles, self.disorder)


@dataclass(frozen=True, eq=False)
class CoupledPair:
    particle: OscillatorEnsemble
    nonlinear: np.ndarray
    shared_noise: bool = True


# --------------------------------------------------------------------------
# Sampling
# --------------------------------------------------------------------------


def sample_disorder(law: DisorderLaw, N: int, disorder_seed: int) -> np.ndarray:
    if N < 1:
        raise ValueError("N must be >= 1")
    return law.sample(N, generator(disorder_seed, "disorder"))


def sample_initial(init: InitialLaw, N: int, noise_seed: int) -> np.ndarray:
    if N < 1:
        raise ValueError("N must be >= 1")
    return init.sample(N, generator(noise_seed, "init"))


# --------------------------------------------------------------------------
# Drift
# --------------------------------------------------------------------------


def _wrap_fast(x: np.ndarray) -> np.ndarray:
    out = np.mod(x, TWO_PI)
    return np.where(out >= TWO_PI, 0.0, out)


def _law_for(model: InteractionModel, law: DisorderLaw | None) -> DisorderLaw | None:
    if law is not None:
        model.check_law(law)
        return law
    if isinstance(model, SineModel):
        return None
    n = len(model.atoms)
    return DisorderLaw(tuple(model.atoms), (1.0 / n,) * n)


class _Drift:
    """Vectorised drift b[x_i, nu^N] + c(x_i, w_i) for arrays of shape (R, N)."""

    def __init__(self, model: InteractionModel, law: DisorderLaw | None):
        self.model = model
        self.sine = isinstance(model, SineModel)
        self.law = _law_for(model, law)
        if not self.sine:
            self.B = model.b_modes(self.law)
            self.C = model.c_modes(self.law)
            self.L = model.n_modes

    def atom_index(self, omega: np.ndarray) -> np.ndarray | None:
        if self.sine:
            return None
        return self.law.index_of(omega)

    def _powers(self, x: np.ndarray) -> list[np.ndarray]:
        e1 = np.exp(1j * x)
        out = [e1]
        for _ in range(1, self.L):
            out.append(out[-1] * e1)
        return out

    @staticmethod
    def _eval_field(F: np.ndarray, powers: list[np.ndarray]) -> np.ndarray:
        L = (F.shape[-1] - 1) // 2
        val = np.real(F[..., L])[..., None] + 0.0 * np.real(powers[0])
        for k in range(1, L + 1):
            val = val + 2.0 * np.real(F[..., L + k][..., None] * powers[k - 1])
        return val

    def empirical_field(self, x: np.ndarray, idx: np.ndarray, powers=None) -> np.ndarray:
        """Fourier modes of b[., nu^N] per replica, shape (R, 2L+1)."""
        L, N = self.L, x.shape[-1]
        powers = self._powers(x) if powers is None else powers
        n_atoms = self.law.n_atoms
        mom = np.zeros(x.shape[:-1] + (n_atoms, 2 * L + 1), dtype=complex)
        for a in range(n_atoms):
            mask = idx == a
            mom[..., a, L] = mask.sum(axis=-1) / N
            for l in range(1, L + 1):
                s = np.where(mask, powers[l - 1], 0.0).sum(axis=-1) / N
                mom[..., a, L + l] = s
                mom[..., a, L - l] = np.conj(s)
        return self.model.field_modes(mom)

    def particle(self, x: np.ndarray, idx, omega: np.ndarray) -> np.ndarray:
        if self.sine:
            cx, sx = np.cos(x), np.sin(x)
            zr = np.mean(cx, axis=-1, keepdims=True)
            zi = np.mean(sx, axis=-1, keepdims=True)
            return self.model.K * (zi * cx - zr * sx) + omega
        powers = self._powers(x)
        F = self.empirical_field(x, idx, powers)
        return self._eval_field(F, powers) + eval_atom_modes(self.C, idx, x)

    def external(self, y: np.ndarray, idx, omega: np.ndarray, field) -> np.ndarray:
        """Drift of the nonlinear process given the limit field (Z for sine, modes otherwise)."""
        if self.sine:
            return self.model.K * (field.imag * np.cos(y) - field.real * np.sin(y)) + omega
        return self._eval_field(np.asarray(field), self._powers(y)) + eval_atom_modes(self.C, idx, y)

    def limit_field(self, P: MeanFieldSolution, t: float):
        snap = P.snapshot(t)
        if self.sine:
            return snap.order_param()
        return self.model.field_modes(snap.trig_moments(self.L, self.law.atoms))


def _check_finite(drift: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(drift)):
        raise FloatingPointError("non-finite drift (check the interaction tables)")
    return drift


def pairwise_drift(angles, disorder, model: InteractionModel) -> np.ndarray:
    """Reference O(N^2) drift: mean_j b(x_i, x_j, w_j) + c(x_i, w_i)."""
    x = np.asarray(angles, dtype=float)
    om = np.asarray(disorder, dtype=float)
    inter = np.mean(model.b(x[:, None], x[None, :], om[None, :]), axis=1)
    return inter + model.c(x, om)


def drift(state: OscillatorEnsemble, model: InteractionModel, law: DisorderLaw | None = None) -> np.ndarray:
    """Fast-path drift of every oscillator in ``state``."""
    eng = _Drift(model, law)
    x = state.angles[None, :]
    om = state.disorder[None, :]
    idx = eng.atom_index(om)
    return _check_finite(eng.particle(x, idx, om))[0]


def step(
    state: OscillatorEnsemble,
    model: InteractionModel,
    dt: float,
    gaussians,
    law: DisorderLaw | None = None,
    scheme: Scheme | str = Scheme.EULER_MARUYAMA,
) -> OscillatorEnsemble:
    """One Euler-Maruyama (or Heun predictor-corrector) step."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    g = np.asarray(gaussians, dtype=float)
    if g.shape != state.angles.shape:
        raise ValueError("need one gaussian per oscillator")
    eng = _Drift(model, law)
    x = state.angles[None, :]
    om = state.disorder[None, :]
    idx = eng.atom_index(om)
    x_new = _advance(eng, x, idx, om, dt, np.sqrt(dt) * g[None, :], Scheme(scheme))
    return OscillatorEnsemble(x_new[0], state.disorder, state.time + dt)


def _advance(eng: _Drift, x, idx, om, dt, noise, scheme: Scheme) -> np.ndarray:
    a1 = _check_finite(eng.particle(x, idx, om))
    if scheme is Scheme.EULER_MARUYAMA:
        return _wrap_fast(x + a1 * dt + noise)
    xp = _wrap_fast(x + a1 * dt + noise)
    a2 = _check_finite(eng.particle(xp, idx, om))
    return _wrap_fast(x + 0.5 * (a1 + a2) * dt + noise)


# --------------------------------------------------------------------------
# Batched replica engine
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EnsembleRun:
    """Recorded output of R replicas of size N.

    ``order``: complex (R, n_rec) finite-size order parameter.
    ``probe_means``: (R, n_rec, n_probes) values of <nu^N_t, phi>.
    ``martingales``: (R, n_rec, n_mart) of N^{-1/2} sum_j int phi'(x_j, w_j) dB_j.
    ``sup_gap2``: (R, N) sup over recorded times of the squared circle gap
    between particles and their nonlinear partners.
    """

    times: np.ndarray
    omega: np.ndarray
    x0: np.ndarray
    order: np.ndarray
    probe_means: np.ndarray | None = None
    martingales: np.ndarray | None = None
    angles: np.ndarray | None = None
    nonlinear_angles: np.ndarray | None = None
    gaps: np.ndarray | None = None
    sup_gap2: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def R(self) -> int:
        return self.order.shape[0]

    @property
    def N(self) -> int:
        return self.omega.shape[-1]


def record_steps(n_steps: int, stride: int) -> np.ndarray:
    """Step indices that are recorded: multiples of ``stride`` plus the final step."""
    steps = list(range(0, n_steps + 1, stride))
    if steps[-1] != n_steps:
        steps.append(n_steps)
    return np.array(steps, dtype=int)


def run_ensemble(
    model: InteractionModel,
    law: DisorderLaw,
    x0: np.ndarray,
    omega: np.ndarray,
    noise_gens: Sequence[np.random.Generator],
    dt: float,
    n_steps: int,
    *,
    record_stride: int = 10,
    scheme: Scheme | str = Scheme.EULER_MARUYAMA,
    probes: Sequence[TestFunction] = (),
    martingale_probes: Sequence[TestFunction] = (),
    keep_angles: bool = False,
    coupled_with: MeanFieldSolution | None = None,
) -> EnsembleRun:
    """Advance R independent replicas together; row r uses ``noise_gens[r]`` only."""
    scheme = Scheme(scheme)
    x = _wrap_fast(np.array(np.atleast_2d(x0), dtype=float))
    om = np.array(np.atleast_2d(omega), dtype=float)
    R, N = x.shape
    if om.shape != (R, N) or len(noise_gens) != R:
        raise ValueError("x0, omega and noise generators must agree on (R, N)")
    eng = _Drift(model, law)
    # probes and martingale terms need atom indices even for the sine model
    pidx = law.index_of(om) if (probes or martingale_probes or not eng.sine) else None
    idx = pidx if not eng.sine else None
    dprobes = [p.derivative() for p in martingale_probes]

    rec = record_steps(n_steps, record_stride)
    n_rec = len(rec)
    times = rec * dt
    order = np.empty((R, n_rec), dtype=complex)
    pm = np.empty((R, n_rec, len(probes))) if probes else None
    mart = np.zeros((R, n_rec, len(dprobes))) if dprobes else None
    m_acc = np.zeros((R, len(dprobes)))
    ang = np.empty((R, n_rec, N)) if keep_angles else None

    coupled = coupled_with is not None
    if coupled:
        P = coupled_with
        if P.horizon < n_steps * dt - 1e-9 * max(1.0, n_steps * dt):
            raise ValueError(f"mean-field horizon {P.horizon} shorter than T={n_steps * dt}")
        if len(P.times) > 1 and np.max(np.diff(P.times)) > dt * (1 + 1e-9):
            warnings.warn("mean-field save grid is coarser than dt; using linear interpolation", stacklevel=2)
        y = x.copy()
        sup2 = np.zeros((R, N))
        nl_ang = np.empty((R, n_rec, N)) if keep_angles else None
        gaps = np.empty((R, n_rec, N)) if keep_angles else None
        f_now = eng.limit_field(P, 0.0)

    sq = np.sqrt(dt)
    chunk = max(1, min(_MAX_CHUNK, _CHUNK_FLOATS // max(1, R * N)))
    buf = None
    buf_pos = 0

    def record(slot: int):
        order[:, slot] = np.mean(np.cos(x), axis=-1) + 1j * np.mean(np.sin(x), axis=-1)
        if pm is not None:
            for j, p in enumerate(probes):
                pm[:, slot, j] = np.mean(p.evaluate(x, pidx), axis=-1)
        if mart is not None:
            mart[:, slot] = m_acc
        if ang is not None:
            ang[:, slot] = x
        if coupled:
            d = circle_distance(x, y)
            np.maximum(sup2, d * d, out=sup2)
            if nl_ang is not None:
                nl_ang[:, slot] = y
                gaps[:, slot] = d

    slot = 0
    record(slot)
    slot += 1
    for s in range(1, n_steps + 1):
        if buf is None or buf_pos == buf.shape[0]:
            c = min(chunk, n_steps - s + 1)
            buf = np.stack([g.standard_normal((c, N)) for g in noise_gens], axis=1)
            buf_pos = 0
        noise = sq * buf[buf_pos]
        buf_pos += 1
        if mart is not None:
            for j, dp in enumerate(dprobes):
                m_acc[:, j] += np.sum(dp.evaluate(x, pidx) * noise, axis=-1) / np.sqrt(N)
        x_next = _advance(eng, x, idx, om, dt, noise, scheme)
        if coupled:
            f_next = eng.limit_field(P, s * dt)
            b1 = _check_finite(eng.external(y, idx, om, f_now))
            if scheme is Scheme.EULER_MARUYAMA:
                y = _wrap_fast(y + b1 * dt + noise)
            else:
                yp = _wrap_fast(y + b1 * dt + noise)
                b2 = _check_finite(eng.external(yp, idx, om, f_next))
                y = _wrap_fast(y + 0.5 * (b1 + b2) * dt + noise)
            f_now = f_next
        x = x_next
        if slot < n_rec and s == rec[slot]:
            record(slot)
            slot += 1

    return EnsembleRun(
        times=times,
        omega=om,
        x0=np.atleast_2d(x0).astype(float),
        order=order,
        probe_means=pm,
        martingales=mart,
        angles=ang,
        nonlinear_angles=nl_ang if coupled else None,
        gaps=gaps if coupled else None,
        sup_gap2=sup2 if coupled else None,
        meta={"dt": dt, "n_steps": n_steps, "scheme": scheme.value, "record_stride": record_stride},
    )


def simulate_replicas(
    model: InteractionModel,
    law: DisorderLaw,
    init: InitialLaw,
    N: int,
    T: float,
    dt: float,
    seeds: Sequence[tuple[int, int]],
    **kwargs,
) -> EnsembleRun:
    """Batch of replicas, one per ``(disorder_seed, noise_seed)`` pair.

    Row r is identical to ``simulate`` with the same seeds.
    """
    if not seeds:
        raise ValueError("need at least one seed pair")
    omega = np.stack([sample_disorder(law, N, ds) for ds, _ in seeds])
    x0 = np.stack([sample_initial(init, N, ns) for _, ns in seeds])
    gens = [generator(ns, "noise") for _, ns in seeds]
    return run_ensemble(model, law, x0, omega, gens, dt, step_count(T, dt), **kwargs)


def _default_law(model: InteractionModel, law: DisorderLaw) -> DisorderLaw:
    model.check_law(law)
    return law


def simulate(
    cfg: SimConfig,
    model: InteractionModel,
    law: DisorderLaw,
    init: InitialLaw,
    x0=None,
) -> list[EmpiricalSnapshot]:
    """Snapshots of nu^N_t at multiples of record_stride*dt and at T.

    ``x0`` overrides the sampled initial angles (the noise stream is unchanged).
    """
    law = _default_law(model, law)
    omega = sample_disorder(law, cfg.N, cfg.disorder_seed)
    start = sample_initial(init, cfg.N, cfg.noise_seed) if x0 is None else wrap(np.asarray(x0, dtype=float))
    if np.shape(start) != (cfg.N,):
        raise ValueError("x0 must have N entries")
    run = run_ensemble(
        model,
        law,
        start[None, :],
        omega[None, :],
        [generator(cfg.noise_seed, "noise")],
        cfg.dt,
        cfg.n_steps,
        record_stride=cfg.record_stride,
        scheme=cfg.scheme,
        keep_angles=True,
    )
    return [EmpiricalSnapshot(float(t), run.angles[0, j], omega) for j, t in enumerate(run.times)]


def finite_order_params(snap) -> tuple[float, float, bool]:
    """(r, psi, degenerate) from r exp(i psi) = mean_j exp(i x_j)."""
    x = snap.angles if isinstance(snap, (EmpiricalSnapshot, OscillatorEnsemble)) else np.asarray(snap, dtype=float)
    if x.size < 1:
        raise ValueError("empty snapshot")
    z = complex(np.mean(np.cos(x)), np.mean(np.sin(x)))
    r = min(abs(z), 1.0)
    if r < DEGENERATE_R:
        return r, 0.0, True
    return r, wrap(np.angle(z)), False


@dataclass(frozen=True, eq=False)
class CouplingResult:
    times: np.ndarray
    gaps: np.ndarray  # (n_rec, N) circle distances
    sup_gap2: np.ndarray  # (N,)
    pair: CoupledPair

    @property
    def mean_sup_gap2(self) -> float:
        return float(np.mean(self.sup_gap2))


def simulate_coupled(
    cfg: SimConfig,
    model: InteractionModel,
    law: DisorderLaw,
    init: InitialLaw,
    P: MeanFieldSolution,
) -> CouplingResult:
    """Particles and their nonlinear partners driven by identical Brownian increments."""
    law = _default_law(model, law)
    omega = sample_disorder(law, cfg.N, cfg.disorder_seed)
    x0 = sample_initial(init, cfg.N, cfg.noise_seed)
    run = run_ensemble(
        model,
        law,
        x0[None, :],
        omega[None, :],
        [generator(cfg.noise_seed, "noise")],
        cfg.dt,
        cfg.n_steps,
        record_stride=cfg.record_stride,
        scheme=cfg.scheme,
        keep_angles=True,
        coupled_with=P,
    )
    pair = CoupledPair(
        OscillatorEnsemble(run.angles[0, -1], omega, float(run.times[-1])),
        run.nonlinear_angles[0, -1],
        True,
    )
    return CouplingResult(run.times, run.gaps[0], run.sup_gap2[0], pair)
