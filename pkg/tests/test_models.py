import math

import numpy as np
import pytest

from dnilab.models import (
    DissipativeDenseEngine, DissipativeEngine, DissipativeParams, GeneralLindbladSpec, LindbladEngine,
    MarkovDephasingEngine, MarkovDephasingParams, OUGaussianEngine, OUMonteCarloEngine, OUNoiseParams,
    SpinBathDenseEngine, SpinBathEngine, SpinBathParams, analytic_d, coherence, dissipative_rates,
    evolve_system, gamma_matrix, make_engine, ou_gaussian_moments, ou_phase_covariance, ou_sample_path,
    system_propagator,
)
from dnilab.qmath import SIGMA_Z, choi_min_eigenvalue, kron, random_density

TIMES = np.linspace(0, 3, 20)


def deterministic_engines():
    return [
        MarkovDephasingEngine(MarkovDephasingParams(0.7)),
        SpinBathEngine(SpinBathParams(1.0, 4)),
        SpinBathDenseEngine(SpinBathParams(1.0, 3)),
        DissipativeEngine(DissipativeParams(1.0, 0.5, 4)),
        DissipativeDenseEngine(DissipativeParams(1.0, 0.5, 3)),
        OUGaussianEngine(OUNoiseParams(1.0, 1.0)),
    ]


def test_analytic_d_closed_forms():
    assert analytic_d(SpinBathParams(0.5, 3), 0.4) == pytest.approx(math.cos(0.4) ** 3)
    assert analytic_d(DissipativeParams(1.0, 0.3, 5), 0.2) == pytest.approx(
        math.exp(-0.4) * math.cos(0.12) ** 2)
    assert analytic_d(OUNoiseParams(2.0, 0.5), 1.0) == pytest.approx(
        math.exp(-4 * (1 - 0.5 * (1 - math.exp(-2)))))
    assert analytic_d(OUNoiseParams(2.0, 0.0), 1.0) == pytest.approx(math.exp(-4))
    assert analytic_d(MarkovDephasingParams(0.3), [0, 1]).tolist() == pytest.approx([1, math.exp(-0.6)])
    with pytest.raises(ValueError):
        analytic_d(MarkovDephasingParams(0.3), -1)


def test_parameter_validation():
    with pytest.raises(ValueError):
        OUNoiseParams(0.0, 1.0)
    with pytest.raises(ValueError):
        DissipativeParams(0.5, 1.0, 3)
    with pytest.raises(ValueError):
        DissipativeParams(1.0, 0.5, 1)
    with pytest.raises(ValueError):
        make_engine("nope")


@pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
def test_gamma_matrix_spectrum(n):
    p = DissipativeParams(1.0, 0.3, n)
    eig = np.sort(np.linalg.eigvalsh(gamma_matrix(p)))
    expected = np.sort([p.gamma - p.chi] * (n - 1) + [p.gamma + (n - 1) * p.chi])
    assert np.max(np.abs(eig - expected)) < 1e-12


@pytest.mark.parametrize("engine", deterministic_engines(), ids=lambda e: e.kind)
def test_semigroup(engine):
    rng = np.random.default_rng(0)
    rho = random_density(2, rng)
    a = engine.reduce(engine.propagate(engine.propagate(engine.initial(rho), 0.3), 0.9))
    b = engine.reduce(engine.propagate(engine.initial(rho), 1.2))
    assert np.max(np.abs(a - b)) < 1e-9


@pytest.mark.parametrize("engine", deterministic_engines(), ids=lambda e: e.kind)
@pytest.mark.parametrize("dt", [0.1, 1.0, 5.0])
def test_trace_and_positivity(engine, dt):
    rng = np.random.default_rng(1)
    for _ in range(3):
        out = evolve_system(engine, random_density(2, rng), dt)
        assert abs(np.trace(out) - 1) < 1e-10
        assert np.linalg.eigvalsh(0.5 * (out + out.conj().T))[0] > -1e-9


@pytest.mark.parametrize("engine", deterministic_engines(), ids=lambda e: e.kind)
def test_populations_constant(engine):
    rho = np.array([[0.8, 0.3 - 0.1j], [0.3 + 0.1j, 0.2]])
    for t in (0.4, 2.0):
        out = evolve_system(engine, rho, t)
        assert abs(out[0, 0] - 0.8) < 1e-10


@pytest.mark.parametrize("engine", deterministic_engines(), ids=lambda e: e.kind)
def test_system_propagator_is_cptp(engine):
    for t in (0.2, 1.0, 2.5):
        lam = system_propagator(engine, t)
        assert choi_min_eigenvalue(lam) >= -1e-9
        assert lam.is_trace_preserving(1e-10)


@pytest.mark.parametrize("n", [1, 4, 10])
def test_spin_bath_coherence(n):
    engine = SpinBathEngine(SpinBathParams(0.8, n))
    assert np.max(np.abs(coherence(engine, TIMES).d - analytic_d(engine.params, TIMES))) < 1e-10


@pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
def test_dissipative_coherence(n):
    engine = DissipativeEngine(DissipativeParams(1.0, 0.4, n))
    assert np.max(np.abs(coherence(engine, TIMES).d - analytic_d(engine.params, TIMES))) < 1e-10


@pytest.mark.parametrize("n", [2, 3, 4])
def test_dissipative_dense_coherence(n):
    engine = DissipativeDenseEngine(DissipativeParams(1.0, 0.4, n))
    assert np.max(np.abs(coherence(engine, TIMES).d - analytic_d(engine.params, TIMES))) < 1e-8


def test_dissipative_structured_matches_dense_bipartite():
    p = DissipativeParams(1.0, 0.6, 3)
    fast, dense = DissipativeEngine(p), DissipativeDenseEngine(p)
    rng = np.random.default_rng(2)
    m = random_density(8, rng)
    out_fast = fast.propagate(fast.from_matrix(m), 0.7).matrix
    out_dense = dense.propagate(dense.from_matrix(m), 0.7).matrix
    assert np.max(np.abs(out_fast - out_dense)) < 1e-10


def test_dissipative_rates_chi_zero_is_independent_dephasing():
    rates = dissipative_rates(DissipativeParams(0.5, 0.0, 2))
    # |00><11| decays through both qubits: rate -2 * 2 * gamma
    assert rates[0, 3] == pytest.approx(-2.0)
    assert rates[0, 0] == 0


def test_spin_bath_sectors_match_dense():
    p = SpinBathParams(0.9, 3)
    sec, dense = SpinBathEngine(p), SpinBathDenseEngine(p)
    rho = random_density(2, np.random.default_rng(3))
    a = sec.propagate(sec.initial(rho), 0.8)
    b = dense.propagate(dense.initial(rho), 0.8)
    assert np.max(np.abs(sec.to_dense(a) - b.matrix)) < 1e-12


def test_generic_lindblad_engine_with_environment():
    h = 0.4 * kron(SIGMA_Z, SIGMA_Z)
    spec = GeneralLindbladSpec(h, [(0.2, kron(SIGMA_Z, np.eye(2)))], env_dim=2)
    engine = LindbladEngine(spec)
    rho = np.full((2, 2), 0.5, dtype=complex)
    out = evolve_system(engine, rho, 1.0)
    # mixed environment: cos(0.8) from the coupling, exp(-0.4) from the jump term
    assert 2 * out[0, 1].real == pytest.approx(math.cos(0.8) * math.exp(-0.4), abs=1e-12)


def test_ou_phase_covariance_closed_form():
    p = OUNoiseParams(0.8, 0.6)
    v1, v2, c = ou_gaussian_moments(p, 0.5, 1.1)
    total = ou_phase_covariance(p, [0, 1.6])[0, 0]
    assert v1 + v2 + 2 * c == pytest.approx(total, rel=1e-13)
    assert analytic_d(p, 1.6) == pytest.approx(math.exp(-total / 2), rel=1e-13)


def test_ou_gaussian_coherence_exact():
    engine = OUGaussianEngine(OUNoiseParams(1.0, 1.0))
    assert np.max(np.abs(coherence(engine, TIMES).d - analytic_d(engine.params, TIMES))) < 1e-10


def test_ou_path_statistics():
    p = OUNoiseParams(1.0, 0.5)
    path = ou_sample_path(p, [0.0, 0.5, 1.5], seed=7, n_paths=200_000)
    # stationary noise variance gamma / (2 tau_c), zero mean
    var = p.gamma / (2 * p.tau_c)
    assert abs(path.values.mean()) < 5 * math.sqrt(var / 200_000)
    np.testing.assert_allclose(path.values.var(axis=0), var, rtol=0.02)
    phase_var = (2 * path.phases[:, 2]).var()
    expected = ou_phase_covariance(p, [0, 1.5])[0, 0]
    assert phase_var == pytest.approx(expected, rel=0.02)


def test_ou_paths_are_prefix_stable_and_deterministic():
    p = OUNoiseParams(1.0, 1.0)
    a = ou_sample_path(p, [0.3, 1.0], seed=3, n_paths=3000)
    b = ou_sample_path(p, [0.3, 1.0], seed=3, n_paths=1500)
    c = ou_sample_path(p, [0.3, 1.0], seed=4, n_paths=1500)
    np.testing.assert_array_equal(a.phases[:1500], b.phases)
    assert not np.allclose(b.phases, c.phases)


def test_ou_paths_reject_white_noise():
    with pytest.raises(ValueError):
        ou_sample_path(OUNoiseParams(1.0, 0.0), [1.0], seed=0)


def test_ou_monte_carlo_phase_covariance_matches_gaussian():
    p = OUNoiseParams(1.0, 1.0)
    engine = OUMonteCarloEngine(p, n_paths=1_000_000, seed=11)
    ph = engine.phases([0.0, 0.6, 1.4])
    phi1 = 2 * (ph[:, 1] - ph[:, 0])
    phi2 = 2 * (ph[:, 2] - ph[:, 1])
    v1, v2, c = ou_gaussian_moments(p, 0.6, 0.8)
    n = len(phi1)
    for sample, exact in ((phi1 * phi1, v1), (phi2 * phi2, v2), (phi1 * phi2, c)):
        se = sample.std(ddof=1) / math.sqrt(n)
        assert abs(sample.mean() - exact) < 4 * se


def test_ou_monte_carlo_coherence_within_standard_errors():
    engine = OUMonteCarloEngine(OUNoiseParams(1.0, 1.0), n_paths=100_000, seed=0)
    series = coherence(engine, TIMES)
    exact = analytic_d(engine.params, TIMES)
    assert np.all(np.abs(series.d - exact) <= 4 * series.stderr + 1e-15)


def test_ou_lattice_convergence_toward_gaussian():
    # refining the noise lattice leaves the sampled decay within noise of the exact one
    p = OUNoiseParams(2.0, 0.25)
    exact = analytic_d(p, 1.0)
    for substeps in (10, 50):
        engine = OUMonteCarloEngine(p, n_paths=50_000, seed=5, substeps=substeps)
        s = coherence(engine, [1.0])
        assert abs(s.d[0] - exact) < 4 * s.stderr[0]


def test_ou_monte_carlo_is_reproducible():
    p = OUNoiseParams(1.0, 1.0)
    a = coherence(OUMonteCarloEngine(p, 5000, seed=9), [0.5, 1.0]).d
    b = coherence(OUMonteCarloEngine(p, 5000, seed=9), [1.0, 0.5]).d
    np.testing.assert_array_equal(a, b[::-1])


def test_engine_size_caps():
    with pytest.raises(ValueError):
        DissipativeDenseEngine(DissipativeParams(1.0, 0.1, 5))
    with pytest.raises(ValueError):
        SpinBathDenseEngine(SpinBathParams(1.0, 11))


def test_make_engine_kinds():
    assert make_engine("spin-bath", g=1, n=2).kind == "spin-bath"
    assert make_engine("ou-mc", gamma=1, tau_c=1, samples=2000, seed=1).n_paths == 2000
    assert make_engine("dissipative", gamma=1, chi=0.2, n=3).params.n_bar == 1
