import numpy as np
import pytest

from dnilab.measurement import (
    X_DIR, Y_DIR, Z_DIR, BlochDirection, bloch_vector, dni_direction, measure_nonselective,
    measure_selective, observable_from_bloch, pauli_eigenstates,
)
from dnilab.qmath import IDENTITY_2, SIGMA_X, random_density


def test_observable_projectors_are_complete_and_orthogonal():
    rng = np.random.default_rng(0)
    for _ in range(10):
        d = BlochDirection(rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi))
        obs = observable_from_bloch(d)
        np.testing.assert_allclose(obs.plus + obs.minus, IDENTITY_2, atol=1e-15)
        np.testing.assert_allclose(obs.plus @ obs.minus, 0, atol=1e-15)
        np.testing.assert_allclose(bloch_vector(obs.plus), d.vector, atol=1e-15)


def test_x_observable_is_sigma_x():
    np.testing.assert_allclose(observable_from_bloch(X_DIR).matrix, SIGMA_X, atol=1e-15)


def test_projector_outcome_validation():
    with pytest.raises(ValueError):
        observable_from_bloch(Z_DIR).projector(0)


def test_selective_probabilities_sum_to_one():
    rng = np.random.default_rng(1)
    for _ in range(20):
        rho = random_density(2, rng)
        obs = observable_from_bloch(BlochDirection(rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi)))
        outs = [measure_selective(rho, obs, m) for m in (1, -1)]
        assert all(0 <= o.probability <= 1 for o in outs)
        assert sum(o.probability for o in outs) == pytest.approx(1, abs=1e-14)
        np.testing.assert_array_equal(outs[0].state, obs.plus)


def test_impossible_outcome_flag():
    up = observable_from_bloch(Z_DIR).plus
    res = measure_selective(up, observable_from_bloch(Z_DIR), -1)
    assert res.impossible and res.probability == 0


def test_nonselective_update_commutation():
    rng = np.random.default_rng(2)
    obs = observable_from_bloch(Z_DIR)
    diag = np.diag([0.7, 0.3]).astype(complex)
    np.testing.assert_allclose(measure_nonselective(diag, obs), diag)
    rho = random_density(2, rng)
    assert np.max(np.abs(measure_nonselective(rho, obs) - rho)) > 1e-3


def test_dni_direction_examples():
    assert dni_direction(observable_from_bloch(Z_DIR).plus).direction.theta == pytest.approx(0)
    res = dni_direction(IDENTITY_2 / 2)
    assert res.degenerate and res.direction == X_DIR
    res = dni_direction(IDENTITY_2 / 2, fallback=Y_DIR)
    assert res.direction == Y_DIR
    rho = np.array([[0.5, 0.2], [0.2, 0.5]], dtype=complex)
    d = dni_direction(rho).direction
    assert d.theta == pytest.approx(np.pi / 2) and d.phi == pytest.approx(0)


def test_dni_direction_commutes():
    rng = np.random.default_rng(3)
    for _ in range(20):
        rho = random_density(2, rng)
        e = observable_from_bloch(dni_direction(rho).direction).plus
        assert np.max(np.abs(e @ rho - rho @ e)) < 1e-10


def test_direction_helpers():
    assert BlochDirection(0.3, -0.1).phi == pytest.approx(2 * np.pi - 0.1)
    with pytest.raises(ValueError):
        BlochDirection(4.0)
    d = BlochDirection(2.0, 1.0)
    c = d.canonical_axis()
    assert c.vector[2] > 0
    assert d.axis_angle(c) == pytest.approx(0, abs=1e-7)
    assert X_DIR.axis_angle(Z_DIR) == pytest.approx(np.pi / 2)
    assert len(pauli_eigenstates()) == 6
