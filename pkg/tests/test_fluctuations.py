import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qkuramoto.fluctuations import (
    HrViolation,
    ProbeBasis,
    TruncationError,
    apply_Ls,
    drift_slopes,
    eval_fluct,
    fluct_trace,
    gamma1,
    gamma2,
    gamma_matrices,
    generator_matrix,
    hr_window,
    order_param_flucts,
    order_param_limits,
    ou_moments,
    psd_factor,
    sample_X0,
    scaling_point,
    simulate_ou,
    unwrap_phase,
    w_cov,
    w_integrand,
)
from qkuramoto.meanfield import MeanFieldSnapshot, solve_mv
from qkuramoto.model import TWO_PI, DisorderLaw, FourierModel, InitialLaw, SineModel
from qkuramoto.particles import EmpiricalSnapshot, simulate_replicas
from qkuramoto.probes import TestFunction
from qkuramoto.seeds import replica_seeds
from qkuramoto.stats import covariance_se, variance_se

from oracles import bernoulli_cov, ou_scalar_variance

DIRAC = DisorderLaw.dirac(0.0)
PAIR = DisorderLaw.symmetric_pair(1.0)
UNIFORM = InitialLaw.uniform()


def trig(kind, k, n=1, atom=None, M=None):
    return TestFunction.trig(kind, k, n, atom=atom, M=M)


@pytest.fixture(scope="module")
def P_null():
    return solve_mv(SineModel(0.0), DIRAC, UNIFORM, 2.0, dt=1e-2, M=16)


@pytest.fixture(scope="module")
def P_fig2():
    law = DisorderLaw.symmetric_pair(0.5)
    return solve_mv(SineModel(4.0), law, InitialLaw.von_mises(1.0), 1.0, dt=1e-3, M=64, save_every=10)


# --- probe basis --------------------------------------------------------------------------


def test_basis_layout_and_independence():
    b = ProbeBasis(PAIR, 3)
    assert b.size == 2 * 7
    assert b.labels[0] == ("one", 0, 0) and b.labels[7] == ("one", 0, 1)
    assert b.index("sin", 2, 1) == 7 + 4
    flat = b.tensor.reshape(b.size, -1)
    assert np.linalg.matrix_rank(np.hstack([flat.real, flat.imag])) == b.size
    with pytest.raises(ValueError):
        ProbeBasis(PAIR, 0)


@settings(max_examples=30)
@given(st.lists(st.floats(-3, 3), min_size=14, max_size=14))
def test_basis_coordinates_round_trip(c):
    b = ProbeBasis(PAIR, 3)
    c = np.array(c)
    phi = TestFunction(np.tensordot(c, b.tensor, axes=1))
    assert np.allclose(b.coords(phi), c, atol=1e-12)


def test_coords_rejects_high_modes():
    with pytest.raises(ValueError):
        ProbeBasis(PAIR, 2).coords(trig("cos", 3, 2))


# --- eval_fluct -----------------------------------------------------------------------------


def test_eval_fluct_examples(P_null):
    snap = EmpiricalSnapshot(0.0, np.array([0.0]), np.array([0.0]))
    assert eval_fluct(snap, P_null, trig("cos", 1)) == pytest.approx(1.0, abs=1e-15)
    rng = np.random.default_rng(0)
    many = EmpiricalSnapshot(0.5, rng.uniform(0, TWO_PI, 500), np.zeros(500))
    assert abs(eval_fluct(many, P_null, trig("one", 0))) < 1e-12


def test_trace_vanishes_when_limit_is_the_empirical_measure():
    x = np.array([0.3, 2.0, 4.0, 5.5])
    om = np.array([-1.0, -1.0, 1.0, 1.0])
    M = 6
    k = np.arange(-M, M + 1)
    coeffs = np.stack([np.mean(np.exp(-1j * np.outer(x[om == a], k)), axis=0) / TWO_PI for a in PAIR.atoms])
    P = MeanFieldSnapshot(PAIR, coeffs, 0.0)
    snap = EmpiricalSnapshot(0.0, x, om)
    for phi in (trig("cos", 2, 2), trig("sin", 1, 2, atom=1), trig("one", 0, 2, atom=0), trig("cos", 6, 2)):
        assert abs(eval_fluct(snap, P, phi)) < 1e-14


def test_eval_fluct_variance_at_time_zero(P_null):
    vals = []
    for s in range(1000):
        x = np.random.default_rng(s).uniform(0, TWO_PI, 100)
        vals.append(eval_fluct(EmpiricalSnapshot(0.0, x, np.zeros(100)), P_null, trig("cos", 1)))
    assert abs(variance_se(vals).z(0.5)) <= 3


# --- Gamma matrices ----------------------------------------------------------------------------


def test_gamma1_examples():
    assert gamma1(trig("cos", 1), trig("cos", 1), UNIFORM, DIRAC) == pytest.approx(0.5, abs=1e-15)
    lam = InitialLaw.von_mises(2.0)
    assert gamma1(trig("one", 0, 2, atom=0), trig("cos", 1, 2), lam, PAIR) == pytest.approx(0.0, abs=1e-15)
    assert gamma1(trig("cos", 1, 2, atom=0), trig("cos", 1, 2, atom=1), lam, PAIR) == 0.0


def test_gamma2_examples():
    assert gamma2(trig("cos", 1, 2, atom=0), trig("cos", 1, 2, atom=0), UNIFORM, PAIR) == 0.0
    one0, one1 = trig("one", 0, 2, atom=0), trig("one", 0, 2, atom=1)
    assert gamma2(one0, one0, UNIFORM, PAIR) == pytest.approx(bernoulli_cov(0.5, True), abs=1e-15)
    assert gamma2(one0, one1, UNIFORM, PAIR) == pytest.approx(bernoulli_cov(0.5, False), abs=1e-15)


@pytest.mark.parametrize("lam", [UNIFORM, InitialLaw.von_mises(1.5, 0.7)])
def test_gamma_matrices_are_psd(lam):
    law = DisorderLaw((-1.0, 0.0, 2.0), (0.2, 0.3, 0.5))
    G1, G2 = gamma_matrices(ProbeBasis(law, 3).probes, lam, law)
    for G in (G1, G2):
        assert np.allclose(G, G.T)
        assert np.linalg.eigvalsh(G).min() >= -1e-10


def test_gamma_matches_monte_carlo():
    lam = InitialLaw.von_mises(1.0)
    phis = [trig("cos", 1, 2), trig("one", 0, 2, atom=0), trig("sin", 2, 2, atom=1)]
    rng = np.random.default_rng(4)
    n = 200_000
    om_idx = rng.integers(0, 2, n)
    x = lam.sample(n, rng)
    vals = np.stack([p.evaluate(x, om_idx) for p in phis])
    emp = np.cov(vals)
    G1, G2 = gamma_matrices(phis, lam, PAIR)
    assert np.allclose(emp, G1 + G2, atol=6 / math.sqrt(n))


# --- martingale covariance -----------------------------------------------------------------------


def test_w_cov_examples(P_null):
    s1 = trig("sin", 1)
    assert w_cov(trig("one", 0), s1, P_null, 1.0, 1.0) == 0.0
    for t in (0.5, 1.0, 2.0):
        assert w_cov(s1, s1, P_null, t, t) == pytest.approx(t / 2, abs=1e-12)
    assert w_cov(s1, s1, P_null, 0.0, 1.5) == 0.0
    assert w_cov(s1, s1, P_null, 0.7, 1.3) == pytest.approx(0.35, abs=1e-12)
    with pytest.raises(ValueError):
        w_cov(s1, s1, P_null, 3.0, 3.0)


def test_w_integrand_against_density_quadrature(P_fig2):
    law = P_fig2.law
    phi1, phi2 = trig("cos", 2, 2), trig("sin", 1, 2, atom=1)
    grid = TWO_PI * np.arange(4096) / 4096
    u = 0.6
    ref = 0.0
    for a in range(2):
        d1 = phi1.derivative().evaluate(grid, a)
        d2 = phi2.derivative().evaluate(grid, a)
        q = np.real(P_fig2.snapshot(u).coeffs[a] @ np.exp(1j * np.outer(np.arange(-64, 65), grid)))
        ref += law.weights[a] * np.mean(d1 * d2 * q) * TWO_PI
    assert w_integrand(phi1, phi2, P_fig2, u) == pytest.approx(ref, abs=1e-12)


# --- sample_X0 --------------------------------------------------------------------------------------


def test_sample_x0_centered_without_quenched_part():
    b = ProbeBasis(DIRAC, 2)
    X, C = sample_X0(DIRAC, UNIFORM, b, 1, 2)
    assert np.all(C == 0)
    assert X[b.index("one", 0, 0)] == 0.0


def test_sample_x0_covariance_monte_carlo():
    lam = InitialLaw.von_mises(1.0)
    b = ProbeBasis(PAIR, 2)
    G1, G2 = gamma_matrices(b.probes, lam, PAIR)
    draws = np.stack([sample_X0(PAIR, lam, b, d, d + 10**6)[0] for d in range(10_000)])
    worst = 0.0
    for i in range(b.size):
        for j in range(i, b.size):
            target = G1[i, j] + G2[i, j]
            est = covariance_se(draws[:, i], draws[:, j])
            if est.se > 0:
                worst = max(worst, abs(est.z(target)))
            else:
                assert abs(target) < 1e-12
    assert worst <= 4.0  # 45 entries: the max of |z| stays below 4 at this sample size


def test_quenched_mean_shared_across_noise_replicas():
    lam = InitialLaw.von_mises(1.0)
    b = ProbeBasis(PAIR, 1)
    X1, C1 = sample_X0(PAIR, lam, b, 7, 1)
    X2, C2 = sample_X0(PAIR, lam, b, 7, 2)
    assert np.array_equal(C1, C2) and not np.array_equal(X1, X2)
    with pytest.raises(ValueError):
        sample_X0(DIRAC, lam, b, 7, 1)


def test_psd_factor_cases():
    C = np.array([[2.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 0.0]])
    L = psd_factor(C)
    assert np.allclose(L @ L.T, C, atol=1e-10)
    singular = np.ones((3, 3))
    L = psd_factor(singular)
    assert np.allclose(L @ L.T, singular, atol=1e-6)
    with pytest.raises(ValueError):
        psd_factor(np.array([[1.0, 0.5], [0.0, 1.0]]))


# --- L_s ------------------------------------------------------------------------------------------------


def test_apply_ls_examples(P_null):
    out, _ = apply_Ls(trig("one", 0), P_null, 0.5, SineModel(0.0))
    assert np.max(np.abs(out.coeffs)) == 0.0
    for k in (1, 2, 5):
        out, _ = apply_Ls(trig("cos", k), P_null, 0.5, SineModel(0.0))
        want = (trig("cos", k) * (-k * k / 2)).padded(out.M)
        assert np.allclose(out.coeffs, want.coeffs, atol=1e-15)
    law = DisorderLaw.symmetric_pair(0.7)
    P = solve_mv(SineModel(0.0), law, UNIFORM, 1.0, dt=1e-2, M=8)
    for a, w in enumerate(law.atoms):
        out, _ = apply_Ls(trig("sin", 1, 2, atom=a), P, 0.3, SineModel(0.0))
        want = trig("sin", 1, 2, atom=a) * -0.5 + trig("cos", 1, 2, atom=a) * w
        assert np.allclose(out.coeffs, want.padded(out.M).coeffs, atol=1e-15)


def _ls_by_quadrature(phi, snap, K, y, a):
    """0.5 phi'' + phi' (b[y, P] + w_a) + <P, phi'(x, pi) K sin(y - x)>, all by grid quadrature."""
    law = snap.law
    grid = TWO_PI * np.arange(4096) / 4096
    M = snap.M
    modes = np.exp(1j * np.outer(np.arange(-M, M + 1), grid))
    Z, nonlocal_ = 0.0, 0.0
    for b in range(law.n_atoms):
        q = np.real(snap.coeffs[b] @ modes)
        Z += law.weights[b] * np.mean(np.exp(1j * grid) * q) * TWO_PI
        dphi = phi.derivative().evaluate(grid, b)
        nonlocal_ += law.weights[b] * np.mean(dphi * K * np.sin(y - grid) * q) * TWO_PI
    field = K * np.imag(np.exp(-1j * y) * Z)
    d1 = phi.derivative().evaluate(y, a)
    d2 = phi.derivative().derivative().evaluate(y, a)
    return 0.5 * d2 + d1 * (field + law.atoms[a]) + nonlocal_


def test_apply_ls_against_quadrature(P_fig2):
    snap = P_fig2.snapshot(0.8)
    for phi in (trig("cos", 1, 2), trig("sin", 2, 2, atom=0), trig("cos", 3, 2, atom=1)):
        out, dropped = apply_Ls(phi, snap, 0.8, SineModel(4.0))
        assert dropped == 0.0
        for y in (0.0, 1.0, 4.0):
            for a in (0, 1):
                assert out.evaluate(y, a) == pytest.approx(_ls_by_quadrature(phi, snap, 4.0, y, a), abs=1e-10)


def test_apply_ls_general_model_matches_sine(P_fig2):
    law = P_fig2.law
    fm = FourierModel.from_sine(law, 4.0, n_modes=2)
    phi = trig("cos", 2, 2, atom=1)
    a, _ = apply_Ls(phi, P_fig2, 0.4, SineModel(4.0))
    b, _ = apply_Ls(phi, P_fig2, 0.4, fm)
    M = min(a.M, b.M)
    assert np.allclose(a.padded(M).coeffs, b.padded(M).coeffs, atol=1e-13)
    assert np.max(np.abs(b.coeffs)) == pytest.approx(np.max(np.abs(a.coeffs)))


def test_generator_matrix_matches_apply_ls(P_fig2):
    basis = ProbeBasis(P_fig2.law, 4)
    snap = P_fig2.snapshot(0.5)
    A, dropped = generator_matrix(basis, snap, SineModel(4.0))
    for i in (0, 3, 9, 12):
        out, d = apply_Ls(basis.probes[i], snap, 0.5, SineModel(4.0), M_trunc=4)
        assert np.allclose(A[i], basis.coords(out), atol=1e-14)
        assert dropped[i] == pytest.approx(d)
    # only the top modes leak
    top = [basis.index(kind, 4, a) for kind in ("cos", "sin") for a in (0, 1)]
    assert np.all(dropped[np.setdiff1d(np.arange(basis.size), top)] < 1e-15)


# --- OU simulation -----------------------------------------------------------------------------------------


def test_ou_zero_initial_zero_noise(P_null):
    b = ProbeBasis(DIRAC, 3)
    res = simulate_ou(P_null, SineModel(0.0), DIRAC, UNIFORM, b, 1.0, 0.01, replica_seeds(0, 0, 1, 3),
                      zero_initial=True, zero_noise=True)
    assert np.max(np.abs(res.values)) == 0.0


def test_ou_deterministic(P_null):
    b = ProbeBasis(DIRAC, 2)
    seeds = replica_seeds(0, 1, 2, 2)
    a = simulate_ou(P_null, SineModel(0.0), DIRAC, UNIFORM, b, 0.5, 0.01, seeds)
    c = simulate_ou(P_null, SineModel(0.0), DIRAC, UNIFORM, b, 0.5, 0.01, seeds)
    assert np.array_equal(a.values, c.values)
    lone = simulate_ou(P_null, SineModel(0.0), DIRAC, UNIFORM, b, 0.5, 0.01, seeds[1:2])
    assert np.array_equal(lone.values[0], a.values[1])


def test_ou_null_variance_closed_form(P_null):
    b = ProbeBasis(DIRAC, 2)
    res = simulate_ou(P_null, SineModel(0.0), DIRAC, UNIFORM, b, 2.0, 0.01, replica_seeds(0, 1, 1, 3000),
                      probes=[trig("cos", 1, M=2), trig("sin", 2, M=2)], record_stride=50)
    for j, (theta, sig2, v0) in enumerate([(0.5, 0.5, 0.5), (2.0, 2.0, 0.5)]):
        for k, t in enumerate(res.times):
            want = ou_scalar_variance(t, v0, theta, sig2)
            assert want == pytest.approx(0.5)
            assert abs(variance_se(res.values[:, k, j]).z(want)) <= 3.5


def test_ou_moments_null_is_exact(P_null):
    b = ProbeBasis(DIRAC, 4)
    ts, cov = ou_moments(P_null, SineModel(0.0), DIRAC, UNIFORM, b, 2.0, 0.01, [trig("cos", 1), trig("sin", 3)],
                         record_stride=50)
    assert np.allclose(cov[:, 0, 0], 0.5, atol=1e-12) and np.allclose(cov[:, 1, 1], 0.5, atol=1e-12)
    assert np.allclose(cov[:, 0, 1], 0.0, atol=1e-12)


def test_ou_truncation_leak_aborts(P_fig2):
    law = P_fig2.law
    b = ProbeBasis(law, 1)
    with pytest.raises(TruncationError):
        simulate_ou(P_fig2, SineModel(4.0), law, InitialLaw.von_mises(1.0), b, 1.0, 0.01, [(0, 0)])
    with pytest.raises(ValueError):
        simulate_ou(P_fig2, SineModel(4.0), law, InitialLaw.von_mises(1.0), ProbeBasis(law, 16), 1.0, 0.1, [(0, 0)])


def test_ou_covariance_matches_particles_in_interacting_regime(P_fig2):
    """Finite-N fluctuation variance tracks the OU limit, with interaction and disorder."""
    law = P_fig2.law
    lam = InitialLaw.von_mises(1.0)
    model = SineModel(4.0)
    probes = [trig("cos", 1, 2), trig("sin", 1, 2, atom=0), trig("cos", 2, 2, atom=1)]
    ts, cov = ou_moments(P_fig2, model, law, lam, ProbeBasis(law, 16), 1.0, 0.005, probes, record_stride=100)
    run = simulate_replicas(model, law, lam, 2000, 1.0, 0.01, replica_seeds(3, 4, 600, 1), record_stride=50,
                            probes=[p.padded(2) for p in probes])
    tr = fluct_trace(run, P_fig2, probes)
    assert np.allclose(tr.times, ts)
    for k in range(len(ts)):
        for j in range(len(probes)):
            assert abs(variance_se(tr.values[:, k, j]).z(cov[k, j, j])) <= 3


def test_finite_n_null_variance_matches_ou(P_null):
    N = 10_000
    run = simulate_replicas(SineModel(0.0), DIRAC, UNIFORM, N, 1.0, 0.05, replica_seeds(0, 9, 1000, 1),
                            record_stride=10, probes=[trig("cos", 1), trig("sin", 2, M=2)])
    tr = fluct_trace(run, P_null, [trig("cos", 1), trig("sin", 2, M=2)])
    for k in range(len(tr.times)):
        for j in range(2):
            assert abs(variance_se(tr.values[:, k, j]).z(0.5)) <= 3


# --- order-parameter fluctuations -------------------------------------------------------------------------------


def test_flucts_vanish_when_empirical_equals_limit():
    z = np.array([0.5 + 0.2j, 0.6 - 0.1j])
    f = order_param_flucts(z[None, :], z, 400)
    for arr in (f.R_def, f.R_id, f.Z_def, f.Z_id, f.psi_dev):
        assert np.max(np.abs(arr)) <= 1e-14


@settings(max_examples=50)
@given(st.floats(0.05, 1.0), st.floats(-3, 3), st.floats(-1, 1), st.floats(-1, 1), st.integers(10, 10**6))
def test_identities_hold_exactly(r, psi, ex, ey, N):
    zP = r * np.exp(1j * psi)
    zN = zP + (ex + 1j * ey) * 0.5 * r
    f = order_param_flucts(np.array([[zN]]), np.array([zP]), N)
    assert f.max_rel_identity_error() <= 1e-9


def test_phase_deviation_first_order():
    rng = np.random.default_rng(5)
    N = 10_000
    zP = 0.8 * np.exp(1j * 2.0)
    for _ in range(20):
        eps = (rng.standard_normal() + 1j * rng.standard_normal()) * 1e-4
        zN = zP + eps
        f = order_param_flucts(np.array([[zN]]), np.array([zP]), N)
        zeta = zP / abs(zP)
        lhs = np.imag(np.conj(zeta) * f.Z_def[0, 0])
        assert lhs == pytest.approx(f.psi_dev[0, 0], abs=1e-5 * math.sqrt(N) * abs(eps))


def test_limit_formulas_are_the_linearisation():
    zP = np.array([0.7 * np.exp(0.4j), 0.3 * np.exp(-2j)])
    ec, es = np.array([0.3, -1.2]), np.array([0.8, 0.5])
    R, Z = order_param_limits(zP, ec, es)
    N = 1e10
    f = order_param_flucts((zP + (ec + 1j * es) / math.sqrt(N))[None, :], zP, int(N))
    assert np.allclose(f.R_def[0], R, atol=1e-4)
    assert np.allclose(f.Z_def[0], Z, atol=1e-4)


def test_hr_window_and_violation():
    w = hr_window(np.array([0.5, 0.4, 0.0, 0.3]))
    assert (w.start, w.stop, w.clipped) == (0, 2, True)
    with pytest.raises(HrViolation):
        hr_window(np.array([0.0, 0.5]))
    with pytest.raises(HrViolation):
        order_param_flucts(np.array([[0.0j, 0.1]]), np.array([0.5, 0.5]), 10)


# --- phase drift ------------------------------------------------------------------------------------------


def test_drift_slopes_recover_linear_phase():
    t = np.linspace(0, 10, 101)
    speeds = np.array([0.3, -0.05, 2.0])
    z = 0.7 * np.exp(1j * (1.0 + speeds[:, None] * t))
    assert np.allclose(drift_slopes(t, z), speeds, atol=1e-12)
    with pytest.raises(ValueError):
        unwrap_phase(np.exp(1j * np.array([0.0, 2.0])))
    with pytest.raises(HrViolation):
        unwrap_phase(np.array([0.5, 0.0]))


def test_scaling_point_layout():
    t = np.linspace(0, 5, 51)
    speeds = np.array([0.1, 0.3, -0.2, -0.2])  # two disorder samples x two noise replicas
    z = np.exp(1j * speeds[:, None] * t)
    pt = scaling_point(100, t, z, 2, 2)
    assert pt.mean_abs_speed == pytest.approx(0.2)
    assert pt.signed.group_means == pytest.approx([0.2, -0.2])
