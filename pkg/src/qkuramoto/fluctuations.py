"""Fluctuation fields, their Gaussian limit and the order-parameter analyses.

The limit field eta is represented by its coordinates ``y_i = <eta, phi_i>``
on a finite probe basis: ``1[w = w_a]`` times ``1``, ``cos kx``, ``sin kx`` for
``k <= M_probe``.  Its weak form ``d<eta, phi> = <eta, L_s phi> dt + dW(phi)``
becomes the linear SDE ``dy = A(s) y dt + dW`` once ``L_s phi_i`` is expanded
back on the basis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import integrate, linalg

from qkuramoto.meanfield import DEGENERATE_R, MeanFieldSnapshot, MeanFieldSolution, step_count
from qkuramoto.model import DisorderLaw, InitialLaw, InteractionModel, mode_index
from qkuramoto.probes import TestFunction, _pad
from qkuramoto.seeds import derive_seed, generator
from qkuramoto.stats import Anova, Estimate, LogLogFit, loglog_fit, mean_se, one_way_anova

JITTER = 1e-12
LEAK_TOL = 1e-3
# explicit-scheme bounds on dt * M_probe^2 / 2 (the stiffest diffusive rate)
EM_STABILITY = 2.0
RK4_STABILITY = 2.5


def _check_stiffness(dt: float, M: int, bound: float, name: str) -> None:
    if dt * M**2 / 2 >= bound:
        raise ValueError(f"{name} unstable: dt*M_probe^2/2 = {dt * M**2 / 2:.3g} >= {bound}")


class TruncationError(RuntimeError):
    pass


class HrViolation(ValueError):
    """The limit order parameter vanishes on the requested window."""


# --------------------------------------------------------------------------
# Probe basis
# --------------------------------------------------------------------------


class ProbeBasis:
    """Atom-indicator times {1, cos kx, sin kx}, k <= M_probe, ordered atom-major."""

    def __init__(self, law: DisorderLaw, M_probe: int):
        if M_probe < 1:
            raise ValueError("M_probe must be >= 1")
        self.law = law
        self.M = int(M_probe)
        labels, probes = [], []
        for a in range(law.n_atoms):
            specs = [("one", 0)] + [(kind, k) for k in range(1, self.M + 1) for kind in ("cos", "sin")]
            for kind, k in specs:
                probes.append(TestFunction.trig(kind, k, law.n_atoms, atom=a, M=self.M))
                labels.append((kind, k, a))
        self.probes = probes
        self.labels = labels
        self._tensor = np.stack([p.coeffs for p in probes])

    @property
    def size(self) -> int:
        return len(self.probes)

    @property
    def per_atom(self) -> int:
        return 2 * self.M + 1

    def index(self, kind: str, k: int, atom: int) -> int:
        return self.labels.index((kind, k if kind != "one" else 0, atom))

    @property
    def tensor(self) -> np.ndarray:
        """Complex coefficients of every basis function, (n_basis, n_atoms, 2M+1)."""
        return self._tensor

    def coords_of_coeffs(self, coeffs: np.ndarray) -> np.ndarray:
        """Real coordinates of functions given by coefficients (..., n_atoms, 2M+1)."""
        M = self.M
        c = np.asarray(coeffs)
        out = np.empty(c.shape[:-2] + (c.shape[-2], 2 * M + 1))
        out[..., 0] = np.real(c[..., M])
        pos = c[..., M + 1 :]
        out[..., 1::2] = 2.0 * np.real(pos)
        out[..., 2::2] = -2.0 * np.imag(pos)
        return out.reshape(c.shape[:-2] + (c.shape[-2] * (2 * M + 1),))

    def coords(self, phi: TestFunction) -> np.ndarray:
        """Vector c with phi = sum_i c_i phi_i."""
        if phi.n_atoms != self.law.n_atoms:
            raise ValueError("probe and basis disagree on the number of atoms")
        if phi.M > self.M:
            tail = np.concatenate([phi.coeffs[:, : phi.M - self.M], phi.coeffs[:, phi.M + self.M + 1 :]], axis=1)
            if np.any(np.abs(tail) > 0):
                raise ValueError(f"probe has modes above M_probe={self.M}")
        return self.coords_of_coeffs(_pad(phi.coeffs, self.M))


# --------------------------------------------------------------------------
# Fluctuation field of the particle system
# --------------------------------------------------------------------------


def eval_fluct(snap, P: MeanFieldSolution | MeanFieldSnapshot, phi: TestFunction) -> float:
    """sqrt(N) * (<nu^N_t, phi> - <P_t, phi>)."""
    law = P.law
    ps = P.snapshot(snap.time) if isinstance(P, MeanFieldSolution) else P
    idx = law.index_of(snap.disorder)
    emp = float(np.mean(phi.evaluate(snap.angles, idx)))
    return float(np.sqrt(snap.N) * (emp - phi.expect(ps.coeffs, law.weight_array)))


@dataclass(frozen=True, eq=False)
class FluctuationTrace:
    """Per-probe time series of <eta^N_t, phi>, shape (R, n_t, n_probes)."""

    times: np.ndarray
    values: np.ndarray
    labels: list
    seeds: list
    N: int


def fluct_trace(run, P: MeanFieldSolution, probes: Sequence[TestFunction], seeds=()) -> FluctuationTrace:
    """Fluctuation traces from a replica run that recorded ``probe_means`` for ``probes``."""
    if run.probe_means is None or run.probe_means.shape[-1] != len(probes):
        raise ValueError("run did not record these probes")
    limit = np.array([[p.expect(P.coeffs_at(t), P.law.weight_array) for p in probes] for t in run.times])
    vals = np.sqrt(run.N) * (run.probe_means - limit[None])
    return FluctuationTrace(run.times, vals, [p.label for p in probes], list(seeds), run.N)


# --------------------------------------------------------------------------
# Limit covariances
# --------------------------------------------------------------------------


def _lambda_moments(init: InitialLaw, M: int) -> np.ndarray:
    return init.moment(mode_index(M))


def _lam_expect(coeffs: np.ndarray, init: InitialLaw) -> np.ndarray:
    """Per-atom lambda-integrals of a function given by coefficients (n_atoms, 2M+1)."""
    M = (coeffs.shape[-1] - 1) // 2
    return np.real(coeffs @ _lambda_moments(init, M))


def gamma1(phi1: TestFunction, phi2: TestFunction, init: InitialLaw, law: DisorderLaw) -> float:
    """sum_a w_a Cov_lambda(phi1(., w_a), phi2(., w_a))."""
    prod = _lam_expect(phi1.product(phi2).coeffs, init)
    cov = prod - _lam_expect(phi1.coeffs, init) * _lam_expect(phi2.coeffs, init)
    return float(np.dot(law.weight_array, cov))


def gamma2(phi1: TestFunction, phi2: TestFunction, init: InitialLaw, law: DisorderLaw) -> float:
    """Cov_mu of the lambda-averaged probes."""
    w = law.weight_array
    g1 = _lam_expect(phi1.coeffs, init)
    g2 = _lam_expect(phi2.coeffs, init)
    return float(np.dot(w, g1 * g2) - np.dot(w, g1) * np.dot(w, g2))


def gamma_matrices(probes: Sequence[TestFunction], init: InitialLaw, law: DisorderLaw):
    """(Gamma1, Gamma2) over a probe list, each symmetric."""
    n = len(probes)
    G1 = np.empty((n, n))
    G2 = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            G1[i, j] = G1[j, i] = gamma1(probes[i], probes[j], init, law)
            G2[i, j] = G2[j, i] = gamma2(probes[i], probes[j], init, law)
    return G1, G2


def _hankel_moments(snap: MeanFieldSnapshot, M: int) -> np.ndarray:
    """H[a, p, q] = w_a <q^a, exp(i (p + q - 2M) x)> for p, q in 0..2M."""
    tm = snap.trig_moments(2 * M, snap.law.atom_array)
    p = np.arange(2 * M + 1)
    return tm[:, p[:, None] + p[None, :]]


def _noise_matrix(D: np.ndarray, snap: MeanFieldSnapshot) -> np.ndarray:
    """Q_ij = <P_s, phi_i' phi_j'> for derivative coefficients D (n, n_atoms, 2M+1)."""
    M = (D.shape[-1] - 1) // 2
    H = _hankel_moments(snap, M)
    Q = np.zeros((D.shape[0], D.shape[0]))
    for a in range(D.shape[1]):
        rows = np.flatnonzero(np.any(D[:, a] != 0, axis=1))
        if rows.size == 0:
            continue
        Da = D[rows, a]
        Q[np.ix_(rows, rows)] += np.real(Da @ H[a] @ Da.T)
    return 0.5 * (Q + Q.T)


def w_integrand(phi1: TestFunction, phi2: TestFunction, P: MeanFieldSolution, u: float) -> float:
    """<P_u, phi1' phi2'>."""
    M = max(phi1.M, phi2.M)
    D = np.stack([_pad(phi1.derivative().coeffs, M), _pad(phi2.derivative().coeffs, M)])
    return float(_noise_matrix(D, P.snapshot(u))[0, 1])


def w_cov(phi1: TestFunction, phi2: TestFunction, P: MeanFieldSolution, s: float, t: float) -> float:
    """E W_t(phi1) W_s(phi2): trapezoid over P's grid of <P_u, phi1' phi2'> on [0, min(s, t)]."""
    if min(s, t) < 0:
        raise ValueError("times must be >= 0")
    u_end = min(s, t)
    if u_end > P.horizon * (1 + 1e-12):
        raise ValueError(f"time {u_end} beyond the mean-field horizon {P.horizon}")
    if u_end == 0:
        return 0.0
    grid = P.times[P.times < u_end]
    grid = np.append(grid, u_end)
    vals = np.array([w_integrand(phi1, phi2, P, u) for u in grid])
    return float(integrate.trapezoid(vals, grid))


# --------------------------------------------------------------------------
# Initial condition of the limit
# --------------------------------------------------------------------------


def psd_factor(C: np.ndarray) -> np.ndarray:
    """Lower factor L with L L^T = C for a symmetric PSD matrix.

    Rows with zero variance are dropped from the Cholesky and kept as zeros;
    a diagonal jitter of 1e-12 absorbs rounding.
    """
    C = np.asarray(C, dtype=float)
    if C.shape[0] != C.shape[1] or not np.allclose(C, C.T, atol=1e-12, rtol=1e-10):
        raise ValueError("covariance matrix must be square and symmetric")
    n = C.shape[0]
    L = np.zeros((n, n))
    scale = max(float(np.max(np.abs(np.diag(C)))), 0.0)
    if scale == 0.0:
        return L
    keep = np.diag(C) > 1e-14 * scale
    sub = C[np.ix_(keep, keep)] + JITTER * np.eye(int(keep.sum()))
    try:
        Ls = linalg.cholesky(sub, lower=True)
    except linalg.LinAlgError:
        # rank deficient beyond the jitter: symmetric square root instead
        ev, U = linalg.eigh(sub)
        Ls = U * np.sqrt(np.clip(ev, 0.0, None))
    L[np.ix_(keep, keep)] = Ls
    return L


def initial_covariances(basis: ProbeBasis, init: InitialLaw):
    return gamma_matrices(basis.probes, init, basis.law)


def sample_X0(
    law: DisorderLaw,
    init: InitialLaw,
    basis: ProbeBasis,
    disorder_seed: int,
    noise_seed: int,
    factors=None,
) -> tuple[np.ndarray, np.ndarray]:
    """(X, C) in basis coordinates: C ~ N(0, Gamma2) from the disorder seed, X = C + N(0, Gamma1)."""
    if basis.law is not law and basis.law.to_dict() != law.to_dict():
        raise ValueError("basis was built for another disorder law")
    if factors is None:
        G1, G2 = initial_covariances(basis, init)
        factors = (psd_factor(G1), psd_factor(G2))
    L1, L2 = factors
    C = L2 @ generator(disorder_seed, "ou_disorder").standard_normal(basis.size)
    Y = L1 @ generator(noise_seed, "ou").standard_normal(basis.size)
    return C + Y, C


# --------------------------------------------------------------------------
# The generator L_s on the probe family
# --------------------------------------------------------------------------


def _model_tables(model: InteractionModel, law: DisorderLaw):
    model.check_law(law)
    return model.b_modes(law), model.c_modes(law), model.n_modes


def _ls_full(coeffs: np.ndarray, snap: MeanFieldSnapshot, model: InteractionModel, law: DisorderLaw):
    """L_s applied to functions with coefficients (n, n_atoms, 2M+1); result has 2(M+L)+1 modes."""
    B, Cm, L = _model_tables(model, law)
    n, n_atoms, width = coeffs.shape
    M = (width - 1) // 2
    Mo = M + L
    ks = mode_index(M)
    D = coeffs * (1j * ks)
    out = np.zeros((n, n_atoms, 2 * Mo + 1), dtype=complex)
    out[..., L : L + width] += coeffs * (-0.5 * ks**2)

    # transport: phi' (b[y, P_s] + c(y, w_a)), a product of trigonometric polynomials
    F = model.field_modes(snap.trig_moments(L, law.atom_array))
    V = F[None, :] + Cm  # (n_atoms, 2L+1)
    for j, l in enumerate(mode_index(L)):
        out[..., L + l : L + l + width] += D * V[None, :, j, None]

    # nonlocal: sum_l exp(i l y) sum_k B[a, k, l] <P_s, phi' exp(ik.)>
    tm = snap.trig_moments(Mo, law.atom_array)  # index m + Mo
    G = np.empty((n, 2 * L + 1), dtype=complex)
    for j, k in enumerate(mode_index(L)):
        G[:, j] = np.einsum("iam,am->i", D, tm[:, Mo + ks + k])
    h = np.einsum("akl,ik->ial", B, G)
    out[..., Mo - L : Mo + L + 1] += h
    return out


def _truncate(full: np.ndarray, M: int):
    Mo = (full.shape[-1] - 1) // 2
    kept = full[..., Mo - M : Mo + M + 1]
    dropped = np.sum(np.abs(full), axis=(-2, -1)) - np.sum(np.abs(kept), axis=(-2, -1))
    return kept, np.maximum(dropped, 0.0)


def apply_Ls(
    phi: TestFunction,
    P: MeanFieldSolution | MeanFieldSnapshot,
    s: float,
    model: InteractionModel,
    law: DisorderLaw | None = None,
    M_trunc: int | None = None,
) -> tuple[TestFunction, float]:
    """L_s(phi) exactly, or truncated to ``M_trunc`` modes with the dropped l1 mass."""
    law = P.law if law is None else law
    snap = P.snapshot(s) if isinstance(P, MeanFieldSolution) else P
    full = _ls_full(phi.coeffs[None], snap, model, law)[0]
    if M_trunc is None:
        return TestFunction(full, f"L({phi.label})"), 0.0
    kept, dropped = _truncate(full, M_trunc)
    return TestFunction(kept, f"L({phi.label})"), float(dropped)


def generator_matrix(basis: ProbeBasis, snap: MeanFieldSnapshot, model: InteractionModel):
    """(A, dropped) with L_s phi_i = sum_j A_ij phi_j + (dropped part), dropped l1 mass per row."""
    full = _ls_full(basis.tensor, snap, model, basis.law)
    kept, dropped = _truncate(full, basis.M)
    return basis.coords_of_coeffs(kept), dropped


def noise_matrix(basis: ProbeBasis, snap: MeanFieldSnapshot) -> np.ndarray:
    D = basis.tensor * (1j * mode_index(basis.M))
    return _noise_matrix(D, snap)


# --------------------------------------------------------------------------
# OU simulation
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OUResult:
    """``values``: (R, n_t, n_probes) of <eta_t, phi>; X, W, C in basis coordinates."""

    times: np.ndarray
    values: np.ndarray
    X: np.ndarray
    W: np.ndarray
    C: np.ndarray
    labels: list
    seeds: list
    leakage: float
    meta: dict = field(default_factory=dict)


def _leak_rows(basis: ProbeBasis, probes: Sequence[TestFunction]) -> np.ndarray:
    """Basis rows whose coordinates feed the requested probes."""
    rows = np.zeros(basis.size, dtype=bool)
    for p in probes:
        rows |= np.abs(basis.coords(p)) > 0
    return rows


def _check_leak(leak: float, tol: float, M: int):
    if leak > tol:
        raise TruncationError(
            f"L_s truncation at M_probe={M} drops mass {leak:.3g} > {tol:g} on the requested probes; "
            "raise M_probe"
        )


def simulate_ou(
    P: MeanFieldSolution,
    model: InteractionModel,
    law: DisorderLaw,
    init: InitialLaw,
    basis: ProbeBasis,
    T: float,
    dt: float,
    seeds: Sequence[tuple[int, int]],
    probes: Sequence[TestFunction] | None = None,
    record_stride: int = 1,
    zero_initial: bool = False,
    zero_noise: bool = False,
    leak_tol: float = LEAK_TOL,
) -> OUResult:
    """Euler-Maruyama on dy = A(s) y dt + dW with Cov(dW) = Q(s) dt (left endpoint).

    Each ``(disorder_seed, noise_seed)`` pair is one replica: the disorder seed
    drives the quenched mean C, the noise seed the rest of X and W.
    """
    if P.law.to_dict() != law.to_dict():
        raise ValueError("mean-field solution was computed for another disorder law")
    if T > P.horizon * (1 + 1e-12):
        raise ValueError(f"T={T} beyond the mean-field horizon {P.horizon}")
    n_steps = step_count(T, dt)
    _check_stiffness(dt, basis.M, EM_STABILITY, "Euler-Maruyama")
    probes = list(probes) if probes is not None else basis.probes
    proj = np.stack([basis.coords(p) for p in probes])  # (n_probes, n_basis)
    rows = _leak_rows(basis, probes)
    R, nb = len(seeds), basis.size

    G1, G2 = initial_covariances(basis, init)
    factors = (psd_factor(G1), psd_factor(G2))
    X = np.zeros((R, nb))
    Cq = np.zeros((R, nb))
    gens = []
    for r, (ds, ns) in enumerate(seeds):
        X[r], Cq[r] = sample_X0(law, init, basis, ds, ns, factors)
        # continue the noise stream of sample_X0 for W
        g = generator(ns, "ou")
        g.standard_normal(nb)
        gens.append(g)
    if zero_initial:
        X[:] = 0.0
        Cq[:] = 0.0
    y = X.copy()
    W = np.zeros((R, nb))

    rec = list(range(0, n_steps + 1, record_stride))
    if rec[-1] != n_steps:
        rec.append(n_steps)
    times = np.array(rec) * dt
    vals = np.empty((R, len(rec), len(probes)))
    vals[:, 0] = y @ proj.T
    slot = 1
    leak = 0.0
    sq = np.sqrt(dt)
    D = basis.tensor * (1j * mode_index(basis.M))
    for n in range(1, n_steps + 1):
        snap = P.snapshot((n - 1) * dt)
        A, dropped = generator_matrix(basis, snap, model)
        leak += dt * float(dropped[rows].sum())
        _check_leak(leak, leak_tol, basis.M)
        if zero_noise:
            dW = 0.0
        else:
            Lq = psd_factor(_noise_matrix(D, snap))
            xi = np.stack([g.standard_normal(nb) for g in gens])
            dW = sq * xi @ Lq.T
            W += dW
        y = y + dt * (y @ A.T) + dW
        if slot < len(rec) and n == rec[slot]:
            vals[:, slot] = y @ proj.T
            slot += 1
    return OUResult(
        times, vals, X, W, Cq, [p.label for p in probes], list(seeds), leak,
        {"M_probe": basis.M, "dt": dt, "T": T},
    )


def ou_moments(
    P: MeanFieldSolution,
    model: InteractionModel,
    law: DisorderLaw,
    init: InitialLaw,
    basis: ProbeBasis,
    T: float,
    dt: float,
    probes: Sequence[TestFunction],
    record_stride: int = 1,
    leak_tol: float = LEAK_TOL,
):
    """Deterministic covariance of probe values: RK4 on S' = A S + S A^T + Q, S(0) = Gamma1 + Gamma2.

    Returns (times, cov) with cov of shape (n_t, n_probes, n_probes).
    """
    n_steps = step_count(T, dt)
    _check_stiffness(dt, basis.M, RK4_STABILITY, "RK4")
    proj = np.stack([basis.coords(p) for p in probes])
    rows = _leak_rows(basis, probes)
    G1, G2 = initial_covariances(basis, init)
    S = G1 + G2
    D = basis.tensor * (1j * mode_index(basis.M))

    def AQ(t):
        snap = P.snapshot(min(t, P.horizon))
        A, dropped = generator_matrix(basis, snap, model)
        return A, _noise_matrix(D, snap), float(dropped[rows].sum())

    def rhs(S, A, Q):
        AS = A @ S
        return AS + AS.T + Q

    out_t, out_c = [0.0], [proj @ S @ proj.T]
    leak = 0.0
    A0, Q0, d0 = AQ(0.0)
    for n in range(1, n_steps + 1):
        t = (n - 1) * dt
        Ah, Qh, _ = AQ(t + 0.5 * dt)
        A1, Q1, d1 = AQ(t + dt)
        leak += 0.5 * dt * (d0 + d1)
        _check_leak(leak, leak_tol, basis.M)
        k1 = rhs(S, A0, Q0)
        k2 = rhs(S + 0.5 * dt * k1, Ah, Qh)
        k3 = rhs(S + 0.5 * dt * k2, Ah, Qh)
        k4 = rhs(S + dt * k3, A1, Q1)
        S = S + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        A0, Q0, d0 = A1, Q1, d1
        if n % record_stride == 0 or n == n_steps:
            out_t.append(n * dt)
            out_c.append(proj @ S @ proj.T)
    return np.array(out_t), np.array(out_c)


# --------------------------------------------------------------------------
# Order-parameter fluctuations
# --------------------------------------------------------------------------


class HrWindow(NamedTuple):
    start: int
    stop: int  # exclusive
    clipped: bool
    min_r: float


def hr_window(r: np.ndarray, eps: float = DEGENERATE_R) -> HrWindow:
    """Longest leading stretch on which r stays above ``eps``."""
    r = np.asarray(r, dtype=float)
    bad = np.flatnonzero(r <= eps)
    if bad.size and bad[0] == 0:
        raise HrViolation("limit order parameter vanishes at the start of the window")
    stop = int(bad[0]) if bad.size else r.size
    return HrWindow(0, stop, bool(bad.size), float(r[:stop].min()))


@dataclass(frozen=True, eq=False)
class OrderParamFlucts:
    """Finite-N order-parameter fluctuations, arrays of shape (R, n_t) on the (H_r) window.

    ``R_def``/``Z_def`` come from the definitions sqrt(N)(r^N - r),
    sqrt(N)(zeta^N - zeta); ``R_id``/``Z_id`` from the exact identities in terms
    of <eta^N, cos> and <eta^N, sin>.
    """

    times: np.ndarray
    R_def: np.ndarray
    R_id: np.ndarray
    Z_def: np.ndarray
    Z_id: np.ndarray
    psi_dev: np.ndarray
    window: HrWindow

    def max_rel_identity_error(self) -> float:
        """Largest |def - id| / max(|def|, |id|, 1) over all replicas and times."""
        def rel(a, b):
            return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0))

        return float(max(rel(self.R_def, self.R_id), rel(self.Z_def, self.Z_id)))


def order_param_flucts(order_N: np.ndarray, order_P: np.ndarray, N: int, times=None) -> OrderParamFlucts:
    """Finite-N R^N and Z^N from complex order parameters (R, n_t) and the limit (n_t,)."""
    zN = np.atleast_2d(np.asarray(order_N, dtype=complex))
    zP = np.asarray(order_P, dtype=complex)
    win = hr_window(np.abs(zP))
    sl = slice(win.start, win.stop)
    zN, zP = zN[:, sl], zP[sl]
    sq = np.sqrt(N)
    rN, r = np.abs(zN), np.abs(zP)
    if np.any(rN <= DEGENERATE_R):
        raise HrViolation("finite-size order parameter degenerate on the window")
    eta = sq * (zN - zP)  # <eta^N, cos> + i <eta^N, sin>
    R_def = sq * (rN - r)
    R_id = (eta.real * (zN.real + zP.real) + eta.imag * (zN.imag + zP.imag)) / (rN + r)
    Z_def = sq * (zN / rN - zP / r)
    Z_id = (r * eta - R_id * zP) / (r * rN)
    psi_dev = sq * np.angle(zN * np.conj(zP))
    t = np.arange(zP.size) if times is None else np.asarray(times)[sl]
    return OrderParamFlucts(t, R_def, R_id, Z_def, Z_id, psi_dev, win)


def order_param_limits(order_P: np.ndarray, eta_cos: np.ndarray, eta_sin: np.ndarray):
    """Limit processes (R, Z) from the mean-field order parameter and OU probe values.

    R = (<P,cos> eta_cos + <P,sin> eta_sin) / r and Z = (r eta_e - <P, e^{ix}> R) / r^2,
    the linearisation of the finite-N identities.
    """
    zP = np.asarray(order_P, dtype=complex)
    r = np.abs(zP)
    if np.any(r <= DEGENERATE_R):
        raise HrViolation("limit order parameter vanishes")
    R = (zP.real * eta_cos + zP.imag * eta_sin) / r
    eta = eta_cos + 1j * eta_sin
    Z = (r * eta - zP * R) / r**2
    return R, Z


# --------------------------------------------------------------------------
# Phase drift scaling
# --------------------------------------------------------------------------


def unwrap_phase(order: np.ndarray, max_jump: float = np.pi / 2) -> np.ndarray:
    """Continuous lift of arg(order) along the last axis; rejects jumps beyond ``max_jump``."""
    z = np.asarray(order, dtype=complex)
    if np.any(np.abs(z) <= DEGENERATE_R):
        raise HrViolation("degenerate phase in the window")
    psi = np.unwrap(np.angle(z), axis=-1)
    if z.shape[-1] > 1 and np.max(np.abs(np.diff(psi, axis=-1))) >= max_jump:
        raise ValueError("phase moves by more than pi/2 between records; lower record_stride")
    return psi


def drift_slopes(times: np.ndarray, order: np.ndarray) -> np.ndarray:
    """Least-squares slope of the unwrapped phase for every replica row."""
    psi = unwrap_phase(order)
    t = np.asarray(times, dtype=float)
    tc = t - t.mean()
    return (psi - psi.mean(axis=-1, keepdims=True)) @ tc / (tc @ tc)


@dataclass(frozen=True)
class ScalingPoint:
    N: int
    mean_abs_speed: float
    stderr: float
    signed: Anova


@dataclass(frozen=True)
class ScalingResult:
    points: list
    fit: LogLogFit

    @property
    def slope(self) -> float:
        return self.fit.slope

    @property
    def slope_se(self) -> float:
        return self.fit.slope_se


def scaling_point(N: int, times: np.ndarray, order: np.ndarray, n_disorder: int, n_noise: int) -> ScalingPoint:
    """Per-disorder noise-averaged |speed|, then its mean over disorder samples.

    ``order`` rows are laid out disorder-major: (n_disorder * n_noise, n_t).
    """
    s = drift_slopes(times, order).reshape(n_disorder, n_noise)
    per_dis = np.abs(s).mean(axis=1)
    est = mean_se(per_dis) if n_disorder > 1 else Estimate(float(per_dis[0]), float("nan"))
    return ScalingPoint(int(N), est.value, est.se, one_way_anova(s) if n_disorder > 1 else None)


def scaling_fit(points: Sequence[ScalingPoint]) -> ScalingResult:
    pts = list(points)
    fit = loglog_fit([p.N for p in pts], [p.mean_abs_speed for p in pts])
    return ScalingResult(pts, fit)


def scaling_study(
    model: InteractionModel,
    law: DisorderLaw,
    init: InitialLaw,
    N_list: Sequence[int],
    n_disorder: int,
    n_noise: int,
    window: tuple[float, float],
    dt: float = 0.01,
    record_stride: int = 10,
    base_seeds: tuple[int, int] = (0, 0),
    r_floor: float = 0.1,
) -> ScalingResult:
    """log-log fit of the mean absolute phase speed against N."""
    from qkuramoto.particles import simulate_replicas
    from qkuramoto.seeds import replica_seeds

    t0, t1 = window
    if not 0 <= t0 < t1:
        raise ValueError("window must satisfy 0 <= t0 < t1")
    points = []
    for N in N_list:
        seeds = replica_seeds(base_seeds[0], derive_seed(base_seeds[1], N), n_disorder, n_noise)
        run = simulate_replicas(model, law, init, N, t1, dt, seeds, record_stride=record_stride)
        sel = run.times >= t0 - 1e-9
        z = run.order[:, sel]
        if np.min(np.abs(z)) < r_floor:
            raise HrViolation(f"N={N}: order parameter drops below {r_floor} in the window")
        points.append(scaling_point(N, run.times[sel], z, n_disorder, n_noise))
    return scaling_fit(points)


__all__ = [
    "FluctuationTrace",
    "HrViolation",
    "OUResult",
    "OrderParamFlucts",
    "ProbeBasis",
    "ScalingResult",
    "TruncationError",
    "apply_Ls",
    "eval_fluct",
    "fluct_trace",
    "gamma1",
    "gamma2",
    "gamma_matrices",
    "generator_matrix",
    "noise_matrix",
    "order_param_flucts",
    "order_param_limits",
    "ou_moments",
    "psd_factor",
    "sample_X0",
    "scaling_study",
    "simulate_ou",
    "w_cov",
    "w_integrand",
]
