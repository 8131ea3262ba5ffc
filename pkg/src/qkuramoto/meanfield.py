"""Fourier-Galerkin solver for the coupled McKean-Vlasov system over disorder atoms.

For each atom ``a`` the density ``q^a_t`` is stored through its coefficients
``c_k(a, t)``, ``k = -M..M``, so that ``q = sum_k c_k exp(ikx)``; the mass
mode is ``1 / (2 pi)``.  Each atom evolves by

    d/dt q^a = 1/2 q^a'' - d/dx [(b[x, P_t] + c(x, w_a)) q^a],

the atoms being coupled only through ``b[x, P_t]`` with
``P_t(dx, dw) = sum_a weight_a q^a_t(x) dx delta_{w_a}(dw)``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import optimize

from qkuramoto.model import (
    TWO_PI,
    DisorderLaw,
    InitialLaw,
    InteractionModel,
    SineModel,
    mode_index,
    wrap,
)

logger = logging.getLogger(__name__)

DEFAULT_M = 64
DEFAULT_DT = 1e-3
RK4_STABILITY = 2.5
BLOWUP = 10.0
DEGENERATE_R = 1e-12


class MeanFieldInstability(RuntimeError):
    pass


def step_count(T: float, dt: float) -> int:
    """Number of steps of size dt covering [0, T]; T/dt must be an integer within 1e-9."""
    if dt <= 0 or T < 0:
        raise ValueError("need dt > 0 and T >= 0")
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-9 * max(T, dt):
        raise ValueError(f"T={T} is not an integer multiple of dt={dt}")
    return n


@dataclass(frozen=True, eq=False)
class MeanFieldSnapshot:
    """Limit measure P_t at one time."""

    law: DisorderLaw
    coeffs: np.ndarray  # (n_atoms, 2M+1)
    time: float

    @property
    def M(self) -> int:
        return (self.coeffs.shape[-1] - 1) // 2

    def trig_moments(self, L: int, atoms=None) -> np.ndarray:
        """Per-atom moments weight_a <q^a, exp(i l y)> for l = -L..L."""
        return _moments(self.coeffs, self.law.weight_array, L, atoms, self.law)

    def order_param(self) -> complex:
        return complex(np.sum(self.trig_moments(1)[:, 2]))


def _moments(coeffs, weights, L, atoms, law) -> np.ndarray:
    M = (coeffs.shape[-1] - 1) // 2
    out = np.zeros(coeffs.shape[:-1] + (2 * L + 1,), dtype=complex)
    ls = mode_index(L)
    ok = np.abs(ls) <= M
    # <q, exp(ily)> = 2 pi c_{-l}
    out[..., ok] = TWO_PI * coeffs[..., M - ls[ok]]
    out = out * weights[:, None]
    if atoms is None:
        return out.sum(axis=-2, keepdims=True)
    if len(atoms) != law.n_atoms or not np.allclose(atoms, law.atoms, rtol=0, atol=1e-12):
        raise ValueError("requested atoms do not match the mean-field disorder law")
    return out


@dataclass(frozen=True, eq=False)
class MeanFieldSolution:
    """Per-atom Fourier coefficients of q_t on a time grid."""

    law: DisorderLaw
    times: np.ndarray  # (n_t,)
    coeffs: np.ndarray  # (n_atoms, n_t, 2M+1)

    @property
    def M(self) -> int:
        return (self.coeffs.shape[-1] - 1) // 2

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def _locate(self, t: float):
        times = self.times
        tol = 1e-9 * max(1.0, abs(times[-1]))
        if t < times[0] - tol or t > times[-1] + tol:
            raise ValueError(f"t={t} outside the solution grid [{times[0]}, {times[-1]}]")
        t = min(max(t, times[0]), times[-1])
        j = int(np.searchsorted(times, t, side="right")) - 1
        j = min(max(j, 0), len(times) - 1)
        if j == len(times) - 1 or abs(t - times[j]) <= tol:
            return j, j, 0.0
        theta = (t - times[j]) / (times[j + 1] - times[j])
        return j, j + 1, theta

    def coeffs_at(self, t: float) -> np.ndarray:
        """Coefficients at time t, linear in time between grid points."""
        j0, j1, th = self._locate(t)
        if th == 0.0:
            return self.coeffs[:, j0]
        return (1.0 - th) * self.coeffs[:, j0] + th * self.coeffs[:, j1]

    def snapshot(self, t: float) -> MeanFieldSnapshot:
        return MeanFieldSnapshot(self.law, self.coeffs_at(t), float(t))

    def order_params(self) -> np.ndarray:
        """Complex r_t exp(i psi_t) on the whole grid."""
        M = self.M
        return TWO_PI * np.einsum("a,at->t", self.law.weight_array, self.coeffs[:, :, M - 1])

    def density(self, t: float, x) -> np.ndarray:
        """Per-atom densities on points x, shape (n_atoms, len(x))."""
        c = self.coeffs_at(t)
        e = np.exp(1j * np.multiply.outer(mode_index(self.M), np.asarray(x, dtype=float)))
        return np.real(c @ e)


def _field_and_drift(state, model, law, c_modes, weights):
    L = model.n_modes
    mom = _moments(state, weights, L, None if isinstance(model, SineModel) else law.atoms, law)
    F = model.field_modes(mom)
    return F[None, :] + c_modes


def _convolve_truncated(v: np.ndarray, c: np.ndarray) -> np.ndarray:
    """(v * c)_k for |k| <= M, v with modes -L..L, both batched over atoms."""
    L = (v.shape[-1] - 1) // 2
    M = (c.shape[-1] - 1) // 2
    padded = np.zeros(c.shape[:-1] + (2 * M + 1 + 2 * L,), dtype=complex)
    padded[..., L : L + 2 * M + 1] = c
    out = np.zeros_like(c)
    for j, m in enumerate(range(-L, L + 1)):
        out += v[..., j : j + 1] * padded[..., L - m : L - m + 2 * M + 1]
    return out


def mv_rhs(state: np.ndarray, model: InteractionModel, law: DisorderLaw, _cache=None) -> np.ndarray:
    """Time derivative of the per-atom coefficient block ``state`` (n_atoms, 2M+1)."""
    M = (state.shape[-1] - 1) // 2
    if M < 2:
        raise ValueError("spectral truncation M must be >= 2")
    if _cache is None:
        _cache = _rhs_cache(model, law, M)
    ks, c_modes, weights = _cache
    v = _field_and_drift(state, model, law, c_modes, weights)
    prod = _convolve_truncated(v, state)
    return -0.5 * ks**2 * state - 1j * ks * prod


def _rhs_cache(model, law, M):
    model.check_law(law)
    L = model.n_modes
    cm = model.c_modes(law)
    # c-table and field share the model's own mode range
    assert cm.shape[-1] == 2 * L + 1
    return mode_index(M).astype(float), cm, law.weight_array


def _hermitize(c: np.ndarray) -> np.ndarray:
    return 0.5 * (c + np.conj(c[..., ::-1]))


def solve_mv(
    model: InteractionModel,
    law: DisorderLaw,
    init: InitialLaw | np.ndarray,
    T: float,
    dt: float = DEFAULT_DT,
    M: int = DEFAULT_M,
    save_every: int = 1,
) -> MeanFieldSolution:
    """Integrate the McKean-Vlasov system with classical RK4 in coefficient space.

    ``init`` is an initial law shared by all atoms or an explicit coefficient
    block (n_atoms, 2M+1).  The state is stored every ``save_every`` steps and
    at the final time.
    """
    if dt * M**2 / 2 >= RK4_STABILITY:
        raise ValueError(f"RK4 stability bound violated: dt*M^2/2 = {dt * M**2 / 2:.3g} >= {RK4_STABILITY}")
    n_steps = step_count(T, dt)
    if isinstance(init, InitialLaw):
        c0 = init.density_coeffs(M)
        tail = np.max(np.abs(init.density_coeffs(M + 1)[[0, -1]]))
        if tail > 1e-12:
            warnings.warn(f"initial law truncated at M={M} (first dropped coefficient {tail:.2e})", stacklevel=2)
        state = np.tile(c0, (law.n_atoms, 1))
    else:
        state = np.array(init, dtype=complex)
        if state.shape != (law.n_atoms, 2 * M + 1):
            raise ValueError("explicit initial coefficients must have shape (n_atoms, 2M+1)")
    state[:, M] = 1.0 / TWO_PI

    cache = _rhs_cache(model, law, M)
    n_saved = n_steps // save_every + 1 + (1 if n_steps % save_every else 0)
    coeffs = np.empty((law.n_atoms, n_saved, 2 * M + 1), dtype=complex)
    times = np.empty(n_saved)
    coeffs[:, 0] = state
    times[0] = 0.0
    slot = 1
    for n in range(1, n_steps + 1):
        k1 = mv_rhs(state, model, law, cache)
        k2 = mv_rhs(state + 0.5 * dt * k1, model, law, cache)
        k3 = mv_rhs(state + 0.5 * dt * k2, model, law, cache)
        k4 = mv_rhs(state + dt * k3, model, law, cache)
        state = _hermitize(state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
        state[:, M] = 1.0 / TWO_PI
        if n % save_every == 0 or n == n_steps:
            amp = np.max(np.abs(state))
            if not np.isfinite(amp) or amp > BLOWUP:
                raise MeanFieldInstability(f"coefficient blow-up |c_k|={amp:.3g} at t={n * dt:.6g}")
            coeffs[:, slot] = state
            times[slot] = n * dt
            slot += 1
    return MeanFieldSolution(law, times[:slot], coeffs[:, :slot])


def limit_order_params(P: MeanFieldSolution, t: float) -> tuple[float, float, bool]:
    """(r_t, psi_t, degenerate) from r_t exp(i psi_t) = <P_t, exp(ix)>."""
    z = P.snapshot(t).order_param()
    r = abs(z)
    if r < DEGENERATE_R:
        return r, 0.0, True
    return r, wrap(np.angle(z)), False


# --------------------------------------------------------------------------
# Stationary profiles and the self-consistency map
# --------------------------------------------------------------------------


class StationaryProfile(NamedTuple):
    grid: np.ndarray
    density: np.ndarray
    flux: float


def stationary_profile(
    omega: float, r: float, psi: float, model: SineModel, n_grid: int = 2048
) -> StationaryProfile:
    """Periodic stationary density for the frozen drift K r sin(psi - x) + omega.

    With Phi' = 2 v the periodic solution of 1/2 q' - v q = -J is
    q(x) proportional to the integral of exp(Phi(x) - Phi(y)) over the period
    downstream of x, whose exponent stays bounded for any omega.  The integral
    is a correlation with exp(-2|omega| u) and is evaluated exactly in Fourier
    space; J follows from the same representation.
    """
    if not isinstance(model, SineModel):
        raise TypeError("stationary profiles are defined for the sine model")
    if not 0.0 <= r <= 1.0:
        raise ValueError("r must lie in [0, 1]")
    grid = TWO_PI * np.arange(n_grid) / n_grid
    if r == 0.0:
        # zero field: the uniform density carries flux omega / (2 pi)
        return StationaryProfile(grid, np.full(n_grid, 1.0 / TWO_PI), omega / TWO_PI)
    a = model.K * r
    shape = 2.0 * a * (np.cos(psi - grid) - 1.0)  # periodic part of Phi, <= 0
    p_hat = np.fft.fft(np.exp(-shape)) / n_grid
    ks = np.fft.fftfreq(n_grid, 1.0 / n_grid)
    if omega == 0.0:
        q = np.exp(shape) * np.real(p_hat[0]) * TWO_PI
        J = 0.0
    else:
        # integral over one period of exp(-i k u s - 2 |omega| u), s = sign(omega)
        scale = -np.sign(omega) * np.expm1(-4.0 * np.pi * abs(omega))
        f = scale / (2.0 * omega - 1j * ks)
        q = np.exp(shape) * np.real(np.fft.ifft(p_hat * f) * n_grid)
        J = 0.5 * scale
    mass = q.mean() * TWO_PI
    return StationaryProfile(grid, q / mass, J / mass)


def _check_symmetric(law: DisorderLaw) -> None:
    if not law.is_symmetric(1e-12):
        raise ValueError("the self-consistency map assumes a symmetric disorder law")


def psi_map(K: float, law: DisorderLaw, r: float, n_grid: int = 2048) -> float:
    """Cosine moment of the frozen-field stationary state at amplitude r (phase 0)."""
    _check_symmetric(law)
    if r == 0.0:
        return 0.0
    model = SineModel(K)
    total = 0.0
    for w, om in zip(law.weights, law.atoms):
        prof = stationary_profile(om, r, 0.0, model, n_grid)
        total += w * float(np.mean(np.cos(prof.grid) * prof.density) * TWO_PI)
    return total


@dataclass(frozen=True)
class FixedPointReport:
    K: float
    roots: list  # [(r*, "stable" | "unstable" | "marginal")]
    map_samples: np.ndarray  # (n, 2): r, Psi(r)

    def stable_nontrivial(self) -> list[float]:
        return [r for r, s in self.roots if r > 0 and s == "stable"]


def _stability(slope_minus_one: float, tol: float = 1e-6) -> str:
    if slope_minus_one < -tol:
        return "stable"
    if slope_minus_one > tol:
        return "unstable"
    return "marginal"


def find_fixed_points(
    K: float, law: DisorderLaw, n_scan: int = 200, xtol: float = 1e-10, n_grid: int = 2048
) -> FixedPointReport:
    """Roots of Psi(r) = r on [0, 1] by grid scan and bisection; r = 0 always listed."""
    _check_symmetric(law)
    rs = np.linspace(0.0, 1.0, n_scan + 1)
    vals = np.array([psi_map(K, law, r, n_grid) for r in rs])
    g = vals - rs
    h = 1e-6
    roots = [(0.0, _stability(psi_map(K, law, h, n_grid) / h - 1.0))]
    for i in range(1, n_scan):
        lo, hi = rs[i], rs[i + 1]
        if g[i] == 0.0:
            root = lo
        elif g[i] * g[i + 1] < 0:
            root = optimize.bisect(lambda r: psi_map(K, law, r, n_grid) - r, lo, hi, xtol=xtol)
        else:
            continue
        lo_h, hi_h = max(root - h, 0.0), min(root + h, 1.0)
        slope = (psi_map(K, law, hi_h, n_grid) - psi_map(K, law, lo_h, n_grid)) / (hi_h - lo_h)
        roots.append((float(root), _stability(slope - 1.0)))
    logger.debug("K=%g roots %s", K, roots)
    return FixedPointReport(float(K), roots, np.column_stack([rs, vals]))


def linearize_uniform(K: float, law: DisorderLaw) -> float:
    """Largest real part of the mode-1 block of the generator linearised at q = 1/(2 pi).

    The block acts on (c_{-1}(a))_a, i.e. on the per-atom first moments, as
    diag(-1/2 + i w_a) + (K/2) 1 weights^T.
    """
    A = np.diag(-0.5 + 1j * law.atom_array) + 0.5 * K * np.outer(np.ones(law.n_atoms), law.weight_array)
    return float(np.max(np.linalg.eigvals(A).real))


def critical_coupling(law: DisorderLaw, K_max: float = 100.0, xtol: float = 1e-12) -> float:
    """Smallest K at which the uniform state loses linear stability."""
    f = lambda K: linearize_uniform(K, law)  # noqa: E731
    if f(K_max) <= 0:
        raise ValueError("uniform state stable up to K_max")
    return float(optimize.brentq(f, 0.0, K_max, xtol=xtol))
