"""Dephasing models and evolution engines.

Every engine evolves a system qubit together with whatever plays the role of
its environment: an explicit environment Hilbert space, a classical label
(spin-bath magnetization) or a noise realization.  Engines share one small
interface used by the protocol code:

``initial(rho, env)``
    state representing ``rho (x) env`` (``env`` defaults to the model's
    initial environment; ``rho`` may be any operator, the map is linear)
``propagate(state, dt)``
    evolve for a time ``dt``
``condition(state, proj)``
    ``(P (x) I) R (P (x) I)``, an unnormalized selective measurement
``reduce(state)``
    partial trace over the environment (a 2x2 array)
``env_marginal(state, op)``
    ``Tr_s[(op (x) I) R]``, usable again as ``env`` in ``initial``

Units: hbar = 1, rates in inverse units of the time grid.
"""
from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.signal
from scipy.special import comb

from .qmath import (
    IDENTITY_2, SIGMA_Z, DimensionError, Superoperator, check_density, dag, herm_eig,
    kossakowski_liouvillian, kron, kron_all, liouvillian, matrix_exp, partial_trace, trace_norm,
    unvec, vec,
)

MIXED_QUBIT = 0.5 * IDENTITY_2
PLUS_X = 0.5 * np.ones((2, 2), dtype=complex)

SPIN_BATH_MAX_N = 14
SPIN_BATH_DENSE_MAX_N = 10
DISSIPATIVE_MAX_N = 10
DISSIPATIVE_DENSE_MAX_N = 4


# ----------------------------------------------------------------------------
# Parameters
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class OUNoiseParams:
    gamma: float
    tau_c: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.tau_c < 0:
            raise ValueError("tau_c must be >= 0")


@dataclass(frozen=True)
class SpinBathParams:
    g: float
    n: int
    max_n: int = SPIN_BATH_MAX_N

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("spin bath needs at least one environment spin")
        if self.n > self.max_n:
            raise ValueError(f"n={self.n} exceeds the configured cap {self.max_n}")


@dataclass(frozen=True)
class DissipativeParams:
    gamma: float
    chi: float
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("dissipative model needs n >= 2 qubits")
        if self.chi < 0:
            raise ValueError("chi must be >= 0")
        if self.gamma < self.chi:
            raise ValueError(f"gamma={self.gamma} < chi={self.chi}: rate matrix not positive, generator not CP")

    @property
    def n_bar(self) -> int:
        return self.n // 2


@dataclass(frozen=True)
class MarkovDephasingParams:
    gamma: float

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


@dataclass(frozen=True)
class GeneralLindbladSpec:
    """Bipartite generator on ``C^2 (x) C^env_dim``."""

    hamiltonian: np.ndarray
    jump_operators: tuple = ()
    env_dim: int = 1

    def __post_init__(self):
        h = np.asarray(self.hamiltonian, dtype=complex)
        d = 2 * self.env_dim
        if h.shape != (d, d):
            raise DimensionError(f"hamiltonian {h.shape} does not act on dimension {d}")
        if np.max(np.abs(h - dag(h))) > 1e-10:
            raise ValueError("hamiltonian is not Hermitian")
        for rate, v in self.jump_operators:
            if rate < 0:
                raise ValueError("jump rates must be >= 0")
            if np.asarray(v).shape != (d, d):
                raise DimensionError("jump operator dimension mismatch")


# ----------------------------------------------------------------------------
# Closed forms
# ----------------------------------------------------------------------------

def analytic_d(params, t):
    """Coherence decay ``d(t)`` of a dephasing model, vectorized over ``t``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be >= 0")
    if isinstance(params, OUNoiseParams):
        if params.tau_c == 0:
            return np.exp(-2 * params.gamma * t)
        return np.exp(-2 * params.gamma * (t - params.tau_c * -np.expm1(-t / params.tau_c)))
    if isinstance(params, SpinBathParams):
        return np.cos(2 * params.g * t) ** params.n
    if isinstance(params, DissipativeParams):
        return np.exp(-2 * params.gamma * t) * np.cos(2 * params.chi * t) ** params.n_bar
    if isinstance(params, MarkovDephasingParams):
        return np.exp(-2 * params.gamma * t)
    raise TypeError(f"no closed-form decay for {type(params).__name__}")


def gamma_matrix(params: DissipativeParams) -> np.ndarray:
    """``G_jk = (gamma - chi) delta_jk + chi i^(j-1) (-i)^(k-1)``."""
    j = np.arange(params.n)
    g = (params.gamma - params.chi) * np.eye(params.n) + params.chi * np.outer(1j ** j, (-1j) ** j)
    if np.linalg.eigvalsh(g)[0] < -1e-12 * max(1.0, params.gamma):
        raise ValueError("rate matrix is not positive semidefinite")
    return g


def _ou_interval_var(gamma: float, tau_c: float, length: float) -> float:
    if tau_c == 0:
        return 4 * gamma * length
    return 4 * gamma * (length - tau_c * -math.expm1(-length / tau_c))


def _ou_interval_cov(gamma: float, tau_c: float, a0: float, a1: float, b0: float, b1: float) -> float:
    # disjoint intervals [a0, a1] <= [b0, b1]
    if tau_c == 0:
        return 0.0
    return (2 * gamma * tau_c * math.exp(-(b0 - a1) / tau_c)
            * -math.expm1(-(a1 - a0) / tau_c) * -math.expm1(-(b1 - b0) / tau_c))


def ou_phase_covariance(params: OUNoiseParams, boundaries: Sequence[float]) -> np.ndarray:
    """Covariance of ``2 * int xi`` over consecutive intervals between ``boundaries``."""
    b = list(boundaries)
    m = len(b) - 1
    cov = np.zeros((m, m))
    for i in range(m):
        cov[i, i] = _ou_interval_var(params.gamma, params.tau_c, b[i + 1] - b[i])
        for j in range(i + 1, m):
            cov[i, j] = cov[j, i] = _ou_interval_cov(params.gamma, params.tau_c, b[i], b[i + 1], b[j], b[j + 1])
    return cov


def ou_gaussian_moments(params: OUNoiseParams, t: float, tau: float) -> tuple[float, float, float]:
    """Variances of ``2 int_0^t xi`` and ``2 int_t^(t+tau) xi`` and their covariance."""
    if t < 0 or tau < 0:
        raise ValueError("t and tau must be >= 0")
    cov = ou_phase_covariance(params, [0.0, t, t + tau])
    return float(cov[0, 0]), float(cov[1, 1]), float(cov[0, 1])


# ----------------------------------------------------------------------------
# Ornstein-Uhlenbeck paths
# ----------------------------------------------------------------------------

PATH_CHUNK = 1024


@dataclass(frozen=True)
class NoisePath:
    """Noise samples ``values[p, k] = xi_p(times[k])`` and phases ``int_0^t xi``."""

    times: np.ndarray
    values: np.ndarray
    phases: np.ndarray
    seed: int
    step: float


def ou_lattice_step(params: OUNoiseParams, substeps: int = 50) -> float:
    return min(params.tau_c, 1.0 / params.gamma) / substeps


def _chunk_rng(seed: int, chunk: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(chunk,))))


def ou_sample_path(params: OUNoiseParams, grid, seed: int, n_paths: int = 1,
                   step: float | None = None) -> NoisePath:
    """Sample stationary OU noise and its time integral at the ``grid`` times.

    Paths live on the lattice ``k * step``; the noise is advanced with the
    exact OU transition and integrated with the trapezoidal rule, i.e. the
    noise between lattice nodes is taken as linear.  Path ``p`` depends only
    on ``(seed, p)``, never on ``grid`` or ``n_paths``.
    """
    if params.tau_c <= 0:
        raise ValueError("tau_c = 0 is white noise; use the Markov dephasing engine")
    times = np.asarray(grid, dtype=float)
    if times.ndim != 1 or times.size == 0 or np.any(times < 0):
        raise ValueError("grid must be a nonempty 1-d array of times >= 0")
    h = ou_lattice_step(params) if step is None else float(step)
    k_max = int(math.ceil(times.max() / h)) + 1
    a = math.exp(-h / params.tau_c)
    s = math.sqrt(params.gamma / (2 * params.tau_c))
    innov = s * math.sqrt(-math.expm1(-2 * h / params.tau_c))

    k = np.minimum((times / h).astype(int), k_max - 1)
    frac = times / h - k
    values = np.empty((n_paths, times.size))
    phases = np.empty((n_paths, times.size))
    for chunk in range((n_paths + PATH_CHUNK - 1) // PATH_CHUNK):
        z = _chunk_rng(seed, chunk).standard_normal((k_max + 1, PATH_CHUNK))
        z[0] *= s
        z[1:] *= innov
        xi = scipy.signal.lfilter([1.0], [1.0, -a], z, axis=0)
        cum = np.concatenate([np.zeros((1, PATH_CHUNK)), np.cumsum(0.5 * h * (xi[1:] + xi[:-1]), axis=0)])
        xi_t = xi[k] + frac[:, None] * (xi[k + 1] - xi[k])
        ph_t = cum[k] + 0.5 * (frac * h)[:, None] * (xi[k] + xi_t)
        lo, hi = chunk * PATH_CHUNK, min(n_paths, (chunk + 1) * PATH_CHUNK)
        values[lo:hi] = xi_t.T[: hi - lo]
        phases[lo:hi] = ph_t.T[: hi - lo]
    return NoisePath(times, values, phases, seed, h)


# ----------------------------------------------------------------------------
# Engines
# ----------------------------------------------------------------------------

class Engine:
    kind = "engine"
    stochastic = False
    # an explicit environment operator exists (discord and environment norms)
    bipartite = True
    params = None

    def initial(self, rho, env=None):
        raise NotImplementedError

    def propagate(self, state, dt: float):
        raise NotImplementedError

    def condition(self, state, proj):
        raise NotImplementedError

    def reduce(self, state) -> np.ndarray:
        raise NotImplementedError

    def env_marginal(self, state, op):
        raise NotImplementedError

    def env_trace(self, env) -> complex:
        raise NotImplementedError

    def env_scale(self, env, factor):
        raise NotImplementedError

    def env_trace_norm(self, env) -> float:
        raise NotImplementedError

    def extra_env_states(self) -> list:
        """Environment states worth probing besides measurement-conditioned ones."""
        return []

    def __repr__(self):
        return f"{type(self).__name__}({self.params!r})"


def _check_dt(dt: float) -> float:
    dt = float(dt)
    if dt < 0:
        raise ValueError(f"dt must be >= 0, got {dt}")
    return dt


# -- dense bipartite ---------------------------------------------------------

@dataclass(frozen=True)
class BipartiteState:
    matrix: np.ndarray
    time: float = 0.0


class DenseBipartiteEngine(Engine):
    """Base for engines that hold the full system-environment matrix."""

    env_dim = 1

    def __init__(self, env0: np.ndarray | None = None):
        d = self.env_dim
        self.env0 = np.eye(d, dtype=complex) / d if env0 is None else check_density(env0)
        if self.env0.shape != (d, d):
            raise DimensionError(f"environment state must be {d}x{d}")

    @property
    def dim(self) -> int:
        return 2 * self.env_dim

    def initial(self, rho, env=None):
        env = self.env0 if env is None else np.asarray(env, dtype=complex)
        rho = np.asarray(rho, dtype=complex)
        if rho.shape != (2, 2) or env.shape != (self.env_dim, self.env_dim):
            raise DimensionError("state dimensions do not match the engine")
        return BipartiteState(kron(rho, env), 0.0)

    def from_matrix(self, matrix: np.ndarray, time: float = 0.0) -> BipartiteState:
        matrix = np.asarray(matrix, dtype=complex)
        if matrix.shape != (self.dim, self.dim):
            raise DimensionError(f"expected a {self.dim}x{self.dim} bipartite matrix")
        return BipartiteState(matrix, time)

    def propagate(self, state, dt):
        dt = _check_dt(dt)
        if state.matrix.shape != (self.dim, self.dim):
            raise DimensionError("state dimension does not match the engine")
        if dt == 0:
            return state
        return BipartiteState(self._evolve(state.matrix, dt), state.time + dt)

    def _evolve(self, m: np.ndarray, dt: float) -> np.ndarray:
        raise NotImplementedError

    def condition(self, state, proj):
        p = kron(proj, np.eye(self.env_dim))
        return BipartiteState(p @ state.matrix @ p, state.time)

    def reduce(self, state):
        return partial_trace(state.matrix, [2, self.env_dim], [0])

    def env_marginal(self, state, op):
        m = kron(op, np.eye(self.env_dim)) @ state.matrix
        return partial_trace(m, [2, self.env_dim], [1])

    def env_trace(self, env):
        return complex(np.trace(env))

    def env_scale(self, env, factor):
        return env * factor

    def env_trace_norm(self, env):
        return trace_norm(env)


class MarkovDephasingEngine(DenseBipartiteEngine):
    """Pure qubit dephasing, coherences damped by ``exp(-2 gamma dt)``."""

    kind = "markov-dephasing"

    def __init__(self, params: MarkovDephasingParams):
        self.params = params
        super().__init__()

    def _evolve(self, m, dt):
        out = m.copy()
        damp = math.exp(-2 * self.params.gamma * dt)
        out[0, 1] *= damp
        out[1, 0] *= damp
        return out


class LindbladEngine(DenseBipartiteEngine):
    """Dense propagation ``exp(dt L)`` of a time-independent bipartite generator."""

    kind = "lindblad"

    def __init__(self, spec: GeneralLindbladSpec, env0: np.ndarray | None = None):
        self.params = spec
        self.env_dim = spec.env_dim
        self.generator = liouvillian(spec.hamiltonian, spec.jump_operators)
        super().__init__(env0)

    @functools.lru_cache(maxsize=64)
    def superop(self, dt: float) -> np.ndarray:
        return matrix_exp(dt * self.generator)

    def _evolve(self, m, dt):
        return unvec(self.superop(dt) @ vec(m), self.dim)


def spin_bath_hamiltonian(params: SpinBathParams) -> np.ndarray:
    n = params.n
    coupling = np.zeros((2 ** n, 2 ** n), dtype=complex)
    for j in range(n):
        ops = [IDENTITY_2] * n
        ops[j] = SIGMA_Z
        coupling += kron_all(ops)
    return params.g * kron(SIGMA_Z, coupling)


def _spin_env_product(n: int, up: float) -> np.ndarray:
    return kron_all([np.diag([up, 1 - up]).astype(complex)] * n)


class SpinBathDenseEngine(DenseBipartiteEngine):
    """Spin bath in the full ``2^(n+1)`` Hilbert space (oracle path)."""

    kind = "spin-bath-dense"

    def __init__(self, params: SpinBathParams, env0: np.ndarray | None = None, env_up: float = 0.5):
        if params.n > SPIN_BATH_DENSE_MAX_N:
            raise ValueError(f"dense spin bath capped at n={SPIN_BATH_DENSE_MAX_N}")
        self.params = params
        self.env_dim = 2 ** params.n
        if env0 is None:
            env0 = _spin_env_product(params.n, env_up)
        super().__init__(env0)
        self._spec = herm_eig(spin_bath_hamiltonian(params))

    @functools.lru_cache(maxsize=64)
    def unitary(self, dt: float) -> np.ndarray:
        phases = np.exp(-1j * dt * np.asarray(self._spec.eigenvalues))
        return sum(ph * p for ph, p in zip(phases, self._spec.projectors))

    def _evolve(self, m, dt):
        u = self.unitary(dt)
        return u @ m @ dag(u)

    def extra_env_states(self):
        n = self.params.n
        return [_spin_env_product(n, 1.0), _spin_env_product(n, 0.0), _spin_env_product(n, 0.8)]


def _z_signs(n: int) -> np.ndarray:
    """Rows are sigma_z eigenvalues of each qubit for the computational basis."""
    return np.array(list(itertools.product([1, -1], repeat=n)), dtype=float)


def dissipative_rates(params: DissipativeParams) -> np.ndarray:
    """Rates ``r_ab`` with ``d rho_ab / dt = r_ab rho_ab`` in the sigma_z product basis.

    The jump operators commute and are diagonal, so each matrix element
    evolves independently: with sign vectors ``u`` (row) and ``v`` (column),
    ``r = u.G.v - u.G.u / 2 - v.G.v / 2``.
    """
    g = gamma_matrix(params)
    s = _z_signs(params.n)
    quad = np.einsum("aj,jk,ak->a", s, g, s)
    return np.einsum("aj,jk,bk->ab", s, g, s) - 0.5 * quad[:, None] - 0.5 * quad[None, :]


class DissipativeEngine(DenseBipartiteEngine):
    """Non-diagonal multi-qubit dephasing by exact element-wise decay."""

    kind = "dissipative"

    def __init__(self, params: DissipativeParams, env0: np.ndarray | None = None):
        if params.n > DISSIPATIVE_MAX_N:
            raise ValueError(f"dissipative structured engine capped at n={DISSIPATIVE_MAX_N}")
        self.params = params
        self.env_dim = 2 ** (params.n - 1)
        super().__init__(env0)
        self.rates = dissipative_rates(params)

    def _evolve(self, m, dt):
        return m * np.exp(self.rates * dt)

    def extra_env_states(self):
        n = self.params.n - 1
        up = _spin_env_product(n, 1.0)
        plus = kron_all([PLUS_X] * n)
        return [up, plus]


class DissipativeDenseEngine(LindbladEngine):
    """Dissipative model through the dense Liouvillian exponential (oracle path)."""

    kind = "dissipative-dense"

    def __init__(self, params: DissipativeParams, env0: np.ndarray | None = None):
        if params.n > DISSIPATIVE_DENSE_MAX_N:
            raise ValueError(f"dense dissipative engine capped at n={DISSIPATIVE_DENSE_MAX_N}")
        self.params = params
        self.env_dim = 2 ** (params.n - 1)
        ops = []
        for j in range(params.n):
            factors = [IDENTITY_2] * params.n
            factors[j] = SIGMA_Z
            ops.append(kron_all(factors))
        self.generator = kossakowski_liouvillian(gamma_matrix(params), ops)
        DenseBipartiteEngine.__init__(self, env0)

    extra_env_states = DissipativeEngine.extra_env_states


# -- spin bath by magnetization sectors -----------------------------------------

@dataclass(frozen=True)
class SectorState:
    """System blocks ``blocks[k]`` summed over environment configurations with ``k`` spins up."""

    blocks: np.ndarray
    time: float = 0.0


class SpinBathEngine(Engine):
    """Spin bath exploiting that the coupling is diagonal in the environment.

    The environment must be diagonal in the sigma_z basis and symmetric
    under spin permutations, so it is described by the total weight of
    each sector with ``k`` spins up (magnetization ``2k - n``).
    """

    kind = "spin-bath"

    def __init__(self, params: SpinBathParams, env_up: float = 0.5):
        self.params = params
        n = params.n
        k = np.arange(n + 1)
        self.magnetization = 2 * k - n
        self.env0 = (comb(n, k) * env_up ** k * (1 - env_up) ** (n - k)).astype(complex)

    def initial(self, rho, env=None):
        env = self.env0 if env is None else np.asarray(env, dtype=complex)
        if env.shape != (self.params.n + 1,):
            raise DimensionError("spin-bath environment is a vector of sector weights")
        rho = np.asarray(rho, dtype=complex)
        if rho.shape != (2, 2):
            raise DimensionError("system state must be 2x2")
        return SectorState(env[:, None, None] * rho[None], 0.0)

    def propagate(self, state, dt):
        dt = _check_dt(dt)
        if dt == 0:
            return state
        ph = np.exp(-2j * self.params.g * self.magnetization * dt)
        b = state.blocks.copy()
        b[:, 0, 1] *= ph
        b[:, 1, 0] *= ph.conj()
        return SectorState(b, state.time + dt)

    def condition(self, state, proj):
        return SectorState(proj @ state.blocks @ proj, state.time)

    def reduce(self, state):
        return state.blocks.sum(axis=0)

    def env_marginal(self, state, op):
        return np.einsum("ij,kji->k", op, state.blocks)

    def env_trace(self, env):
        return complex(np.sum(env))

    def env_scale(self, env, factor):
        return env * factor

    def env_trace_norm(self, env):
        return float(np.sum(np.abs(env)))

    def extra_env_states(self):
        n = self.params.n
        up = np.zeros(n + 1, dtype=complex)
        up[-1] = 1
        down = np.zeros(n + 1, dtype=complex)
        down[0] = 1
        return [up, down, SpinBathEngine(self.params, 0.8).env0]

    def to_dense(self, state) -> np.ndarray:
        """Expand to the full matrix, ordered as ``SpinBathDenseEngine``."""
        n = self.params.n
        ups = (_z_signs(n) > 0).sum(axis=1)
        weights = 1.0 / comb(n, ups)
        env_diag = [np.diag(np.where(ups == k, weights, 0.0)).astype(complex) for k in range(n + 1)]
        return sum(kron(state.blocks[k], env_diag[k]) for k in range(n + 1))


# -- Ornstein-Uhlenbeck noise --------------------------------------------------

@dataclass(frozen=True)
class PathState:
    """Per-realization system operators at a common time."""

    blocks: np.ndarray
    time: float = 0.0


@dataclass(frozen=True)
class PathWeights:
    """Signed weight on each noise realization, valid from ``time`` on."""

    weights: np.ndarray
    time: float = 0.0


class OUMonteCarloEngine(Engine):
    """Stochastic Hamiltonian ``xi(t) sigma_z`` averaged over sampled OU paths."""

    kind = "ou-mc"
    stochastic = True
    bipartite = False

    def __init__(self, params: OUNoiseParams, n_paths: int = 100_000, seed: int = 0,
                 substeps: int = 50):
        if params.tau_c <= 0:
            raise ValueError("tau_c = 0 is white noise; use the Markov dephasing engine")
        self.params = params
        self.n_paths = int(n_paths)
        self.seed = int(seed)
        self.step = ou_lattice_step(params, substeps)
        self._phase_cache: dict[float, np.ndarray] = {}

    def phases(self, times) -> np.ndarray:
        """``int_0^t xi`` per path, shape ``(n_paths, len(times))``."""
        times = [float(t) for t in np.atleast_1d(times)]
        found = {t: self._phase_cache.get(t) for t in times}
        missing = sorted(t for t, v in found.items() if v is None)
        if missing:
            path = ou_sample_path(self.params, missing, self.seed, self.n_paths, self.step)
            for i, t in enumerate(missing):
                found[t] = self._phase_cache[t] = path.phases[:, i]
            if len(self._phase_cache) > 256:
                for key in list(self._phase_cache)[:-64]:
                    self._phase_cache.pop(key, None)
        return np.stack([found[t] for t in times], axis=1)

    def initial(self, rho, env=None):
        env = PathWeights(np.ones(self.n_paths), 0.0) if env is None else env
        rho = np.asarray(rho, dtype=complex)
        return PathState(env.weights[:, None, None] * rho[None], env.time)

    def propagate(self, state, dt):
        dt = _check_dt(dt)
        if dt == 0:
            return state
        t1 = state.time + dt
        ph = self.phases([state.time, t1])
        factor = np.exp(-2j * (ph[:, 1] - ph[:, 0]))
        b = state.blocks.copy()
        b[:, 0, 1] *= factor
        b[:, 1, 0] *= factor.conj()
        return PathState(b, t1)

    def condition(self, state, proj):
        return PathState(proj @ state.blocks @ proj, state.time)

    def reduce(self, state):
        return state.blocks.mean(axis=0)

    def reduce_paths(self, state) -> np.ndarray:
        return state.blocks

    def env_marginal(self, state, op):
        return PathWeights(np.einsum("ij,pji->p", op, state.blocks), state.time)

    def env_trace(self, env):
        return complex(np.mean(env.weights))

    def env_scale(self, env, factor):
        return PathWeights(env.weights * factor, env.time)

    def env_trace_norm(self, env):
        return float(np.mean(np.abs(env.weights)))


@dataclass(frozen=True)
class PhaseTermState:
    """Operator-valued expansion ``sum_a M_a exp(-i a.Phi)`` over interval phases.

    ``boundaries`` are the times separating the elapsed intervals and
    ``Phi_k = 2 int xi`` over interval ``k``.
    """

    boundaries: tuple
    terms: dict

    @property
    def time(self) -> float:
        return self.boundaries[-1]


class OUGaussianEngine(Engine):
    """Exact noise averages through the Gaussian characteristic function.

    Under ``xi sigma_z`` the coherence picks up ``exp(-i Phi)`` over each
    interval, so every quantity is a finite sum of ``exp(-i a.Phi)`` terms
    whose average is ``exp(-a.C.a / 2)`` with ``C`` the phase covariance.
    """

    kind = "ou-gauss"
    stochastic = True
    bipartite = False

    def __init__(self, params: OUNoiseParams):
        self.params = params

    def initial(self, rho, env=None):
        rho = np.asarray(rho, dtype=complex)
        if env is None:
            return PhaseTermState((0.0,), {(): rho.copy()})
        return PhaseTermState(env.boundaries, {a: w * rho for a, w in env.terms.items()})

    def propagate(self, state, dt):
        dt = _check_dt(dt)
        if dt == 0:
            return state
        terms: dict = {}
        for a, m in state.terms.items():
            diag = np.diag(np.diag(m))
            up = np.zeros_like(m)
            up[0, 1] = m[0, 1]
            down = np.zeros_like(m)
            down[1, 0] = m[1, 0]
            for shift, part in ((0, diag), (1, up), (-1, down)):
                if np.any(part):
                    key = a + (shift,)
                    terms[key] = terms[key] + part if key in terms else part
        return PhaseTermState(state.boundaries + (state.time + dt,), terms)

    def condition(self, state, proj):
        return PhaseTermState(state.boundaries, {a: proj @ m @ proj for a, m in state.terms.items()})

    def _average(self, boundaries, terms: dict):
        cov = ou_phase_covariance(self.params, boundaries)
        total = 0
        for a, m in terms.items():
            av = np.asarray(a, dtype=float)
            total = total + m * math.exp(-0.5 * av @ cov @ av) if av.size else total + m
        return total

    def reduce(self, state):
        return np.asarray(self._average(state.boundaries, state.terms), dtype=complex)

    def env_marginal(self, state, op):
        return PhaseTermState(state.boundaries,
                              {a: complex(np.trace(op @ m)) for a, m in state.terms.items()})

    def env_trace(self, env):
        return complex(self._average(env.boundaries, env.terms))

    def env_scale(self, env, factor):
        return PhaseTermState(env.boundaries, {a: w * factor for a, w in env.terms.items()})

    def env_trace_norm(self, env):
        raise TypeError("the noise-averaged engine has no environment operator")


# ----------------------------------------------------------------------------
# Helpers on engines
# ----------------------------------------------------------------------------

def reduced_state(bipartite: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """System (first factor) marginal of a bipartite matrix."""
    return partial_trace(bipartite, dims, [0])


def evolve_system(engine: Engine, rho, t: float, env=None) -> np.ndarray:
    return engine.reduce(engine.propagate(engine.initial(rho, env), t))


def system_propagator(engine: Engine, t: float) -> Superoperator:
    """Tomographic reconstruction of the reduced map from time 0 to ``t``."""
    return Superoperator.from_map(lambda x: evolve_system(engine, x, t), 2)


@dataclass(frozen=True)
class CoherenceSeries:
    times: np.ndarray
    d: np.ndarray
    stderr: np.ndarray


def coherence(engine: Engine, times) -> CoherenceSeries:
    """Numerical ``d(t)`` from evolving ``|+x><+x|`` (with standard errors for Monte Carlo)."""
    times = np.asarray(times, dtype=float)
    d = np.empty(times.size)
    se = np.zeros(times.size)
    if isinstance(engine, OUMonteCarloEngine):
        ph = engine.phases(times)
        samples = np.cos(2 * ph)
        return CoherenceSeries(times, samples.mean(axis=0),
                               samples.std(axis=0, ddof=1) / math.sqrt(engine.n_paths))
    for i, t in enumerate(times):
        d[i] = 2 * evolve_system(engine, PLUS_X, t)[0, 1].real
    return CoherenceSeries(times, d, se)


ENGINE_KINDS = {
    "ou-mc": OUMonteCarloEngine,
    "ou-gauss": OUGaussianEngine,
    "spin-bath": SpinBathEngine,
    "spin-bath-dense": SpinBathDenseEngine,
    "dissipative": DissipativeEngine,
    "dissipative-dense": DissipativeDenseEngine,
    "markov-dephasing": MarkovDephasingEngine,
}


def make_engine(kind: str, **kw) -> Engine:
    """Build an engine from flat keyword parameters (as found in a config)."""
    if kind in ("ou-mc", "ou-gauss"):
        params = OUNoiseParams(float(kw["gamma"]), float(kw["tau_c"]))
        if kind == "ou-gauss":
            return OUGaussianEngine(params)
        return OUMonteCarloEngine(params, int(kw.get("samples", 100_000)), int(kw.get("seed", 0)))
    if kind in ("spin-bath", "spin-bath-dense"):
        params = SpinBathParams(float(kw["g"]), int(kw["n"]))
        return ENGINE_KINDS[kind](params, env_up=float(kw.get("env_up", 0.5)))
    if kind in ("dissipative", "dissipative-dense"):
        return ENGINE_KINDS[kind](DissipativeParams(float(kw["gamma"]), float(kw["chi"]), int(kw["n"])))
    if kind == "markov-dephasing":
        return MarkovDephasingEngine(MarkovDephasingParams(float(kw["gamma"])))
    raise ValueError(f"unknown engine kind {kind!r}; choose from {sorted(ENGINE_KINDS)}")
