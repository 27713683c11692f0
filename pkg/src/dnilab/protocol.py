"""Two- and three-measurement statistics and the checkers built on them.

Outcomes are indexed ``0 -> +1`` and ``1 -> -1``.  Three-time tables are
``table[z, y, x]``; two-time tables are ``table[later, earlier]``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.optimize

from .measurement import (
    X_DIR, BlochDirection, DichotomicObservable, dni_direction, observable_from_bloch,
    pauli_eigenstates,
)
from .models import Engine, analytic_d
from .qmath import TOL_DEGEN, dag, herm_eig, random_density, trace_norm

log = logging.getLogger(__name__)

OUTCOMES = (1, -1)
SIGNS = np.array(OUTCOMES, dtype=float)
MIXED = 0.5 * np.eye(2, dtype=complex)

# time pair labels: later measurement first, as in P2(z, x)
PAIRS = ("yx", "zy", "zx")


class DNIBasisError(ValueError):
    """The conditional states for the two first outcomes have different eigenbases."""


class SchemeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Scheme:
    t: float
    tau: float
    obs_x: DichotomicObservable
    obs_y: DichotomicObservable
    obs_z: DichotomicObservable
    initial_state: np.ndarray = field(default_factory=lambda: MIXED.copy())
    dni: bool = False

    def __post_init__(self):
        if self.t < 0 or self.tau < 0:
            raise ValueError("t and tau must be >= 0")

    @classmethod
    def from_angles(cls, t, tau, x=X_DIR, y=X_DIR, z=X_DIR, initial_state=None) -> "Scheme":
        rho0 = MIXED.copy() if initial_state is None else np.asarray(initial_state, dtype=complex)
        return cls(t, tau, observable_from_bloch(x), observable_from_bloch(y), observable_from_bloch(z), rho0)

    def times(self, pair: str) -> tuple[float, float]:
        return {"yx": (0.0, self.t), "zy": (self.t, self.t + self.tau), "zx": (0.0, self.t + self.tau)}[pair]

    def observables(self, pair: str) -> tuple[DichotomicObservable, DichotomicObservable]:
        """(earlier, later) observables of a measurement pair."""
        return {"yx": (self.obs_x, self.obs_y), "zy": (self.obs_y, self.obs_z),
                "zx": (self.obs_x, self.obs_z)}[pair]


@dataclass(frozen=True)
class JointDist3:
    table: np.ndarray
    # per-realization tables (n_paths, 2, 2, 2) for Monte Carlo engines
    samples: np.ndarray | None = None

    def __post_init__(self):
        if self.table.shape != (2, 2, 2):
            raise ValueError("JointDist3 needs a 2x2x2 table")

    def __call__(self, z: int, y: int, x: int) -> float:
        return float(self.table[OUTCOMES.index(z), OUTCOMES.index(y), OUTCOMES.index(x)])

    @property
    def stderr(self) -> np.ndarray | None:
        if self.samples is None:
            return None
        return self.samples.std(axis=0, ddof=1) / math.sqrt(len(self.samples))


@dataclass(frozen=True)
class JointDist2:
    table: np.ndarray
    times: tuple
    label: str = ""
    samples: np.ndarray | None = None

    def __post_init__(self):
        if self.table.shape != (2, 2):
            raise ValueError("JointDist2 needs a 2x2 table")

    def __call__(self, later: int, earlier: int) -> float:
        return float(self.table[OUTCOMES.index(later), OUTCOMES.index(earlier)])

    def correlator(self) -> float:
        return float(SIGNS @ self.table @ SIGNS)


# ----------------------------------------------------------------------------
# Distributions
# ----------------------------------------------------------------------------

def _prob(engine: Engine, state, proj) -> tuple[float, np.ndarray | None]:
    p = float(np.real(np.trace(proj @ engine.reduce(state))))
    if engine.stochastic and hasattr(engine, "reduce_paths"):
        per_path = np.real(np.einsum("ij,pji->p", proj, engine.reduce_paths(state)))
        return p, per_path
    return p, None


def _check_normalized(table: np.ndarray, engine: Engine, what: str) -> np.ndarray:
    if np.min(table) < -1e-12:
        log.warning("%s has entries down to %.3g", what, np.min(table))
    if not engine.stochastic and abs(table.sum() - 1) > 1e-10:
        log.warning("%s sums to %.15g", what, table.sum())
    return np.maximum(table, -1e-12)


def p1(engine: Engine, scheme: Scheme) -> np.ndarray:
    """``[P1(+1), P1(-1)]`` for the first measurement."""
    rho0 = scheme.initial_state
    return np.array([float(np.real(np.trace(scheme.obs_x.projector(m) @ rho0))) for m in OUTCOMES])


def p2(engine: Engine, scheme: Scheme, pair: str = "zx") -> JointDist2:
    """Joint distribution when only the two measurements named by ``pair`` are made."""
    if pair not in PAIRS:
        raise ValueError(f"pair must be one of {PAIRS}")
    t_a, t_b = scheme.times(pair)
    obs_a, obs_b = scheme.observables(pair)
    start = engine.propagate(engine.initial(scheme.initial_state), t_a)
    table = np.empty((2, 2))
    samples = []
    for ia, a in enumerate(OUTCOMES):
        after = engine.propagate(engine.condition(start, obs_a.projector(a)), t_b - t_a)
        for ib, b in enumerate(OUTCOMES):
            table[ib, ia], per_path = _prob(engine, after, obs_b.projector(b))
            samples.append(per_path)
    table = _check_normalized(table, engine, f"P2[{pair}]")
    stacked = None
    if samples[0] is not None:
        stacked = np.stack(samples, axis=1).reshape(-1, 2, 2).transpose(0, 2, 1)
    return JointDist2(table, (t_a, t_b), pair, stacked)


def p3(engine: Engine, scheme: Scheme) -> JointDist3:
    """Three measurements at ``0``, ``t`` and ``t + tau``; the full state is carried throughout."""
    rho0 = scheme.initial_state
    table = np.empty((2, 2, 2))
    samples = np.empty((2, 2, 2), dtype=object)
    init = engine.initial(rho0)
    for ix, x in enumerate(OUTCOMES):
        ex = scheme.obs_x.projector(x)
        sx = engine.propagate(engine.condition(init, ex), scheme.t)
        for iy, y in enumerate(OUTCOMES):
            sy = engine.propagate(engine.condition(sx, scheme.obs_y.projector(y)), scheme.tau)
            for iz, z in enumerate(OUTCOMES):
                table[iz, iy, ix], samples[iz, iy, ix] = _prob(engine, sy, scheme.obs_z.projector(z))
    table = _check_normalized(table, engine, "P3")
    stacked = None
    if samples[0, 0, 0] is not None:
        stacked = np.stack([samples[idx] for idx in np.ndindex(2, 2, 2)], axis=1).reshape(-1, 2, 2, 2)
    return JointDist3(table, stacked)


def marginal_zx(dist: JointDist3) -> JointDist2:
    """Sum over the intermediate outcome."""
    samples = None if dist.samples is None else dist.samples.sum(axis=2)
    return JointDist2(dist.table.sum(axis=1), (), "zx", samples)


def marginal_yx(dist: JointDist3) -> JointDist2:
    samples = None if dist.samples is None else dist.samples.sum(axis=1)
    return JointDist2(dist.table.sum(axis=0), (), "yx", samples)


def invasiveness(p3zx: JointDist2, p2zx: JointDist2) -> float:
    """``sum_zx |P3(z, x) - P2(z, x)|``, in [0, 2]."""
    if p3zx.label and p2zx.label and p3zx.label != p2zx.label:
        raise SchemeMismatchError(f"cannot compare {p3zx.label} with {p2zx.label}")
    if p3zx.times and p2zx.times and not np.allclose(p3zx.times, p2zx.times):
        raise SchemeMismatchError(f"time pairs differ: {p3zx.times} vs {p2zx.times}")
    return float(np.sum(np.abs(p3zx.table - p2zx.table)))


def scheme_invasiveness(engine: Engine, scheme: Scheme) -> float:
    return invasiveness(marginal_zx(p3(engine, scheme)), p2(engine, scheme, "zx"))


# ----------------------------------------------------------------------------
# Diagonal non-invasive scheme
# ----------------------------------------------------------------------------

def conditional_state(engine: Engine, obs_x: DichotomicObservable, x: int, t: float) -> np.ndarray:
    """System state at ``t`` after outcome ``x`` at time 0 (normalized)."""
    rho = engine.reduce(engine.propagate(engine.initial(obs_x.projector(x)), t))
    return rho / np.trace(rho).real


def dni_scheme(engine: Engine, t: float, tau: float, obs_x: DichotomicObservable,
               obs_z: DichotomicObservable, fallback: BlochDirection = X_DIR,
               initial_state=None, angle_tol: float = 1e-6) -> Scheme:
    """Scheme whose intermediate observable commutes with the conditional state at ``t``."""
    found = []
    for x in OUTCOMES:
        res = dni_direction(conditional_state(engine, obs_x, x, t), fallback)
        if not res.degenerate:
            found.append(res.direction)
    if not found:
        direction = fallback
    else:
        direction = found[0]
        if len(found) == 2 and found[0].axis_angle(found[1]) > angle_tol:
            raise DNIBasisError(
                f"outcome-dependent eigenbases at t={t}: axes differ by {found[0].axis_angle(found[1]):.3g} rad")
    y = observable_from_bloch(direction.canonical_axis())
    rho0 = MIXED.copy() if initial_state is None else np.asarray(initial_state, dtype=complex)
    return Scheme(t, tau, obs_x, y, obs_z, rho0, dni=True)


# ----------------------------------------------------------------------------
# Correlators and LGI
# ----------------------------------------------------------------------------

_SUBSETS = {
    "c_x": (0, 0, 1), "c_y": (0, 1, 0), "c_z": (1, 0, 0),
    "c_yx": (0, 1, 1), "c_zy": (1, 1, 0), "c_zx": (1, 0, 1), "c_zyx": (1, 1, 1),
}


def _sign_tensor(mask) -> np.ndarray:
    sz, sy, sx = (SIGNS if m else np.ones(2) for m in mask)
    return np.einsum("i,j,k->ijk", sz, sy, sx)


@dataclass(frozen=True)
class CorrelatorSet:
    c_x: float
    c_y: float
    c_z: float
    c_yx: float
    c_zy: float
    c_zx: float
    c_zyx: float
    stderr: dict | None = None

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in _SUBSETS}


def correlators(dist: JointDist3) -> CorrelatorSet:
    """Expectations of outcome products, ``c_S = sum prod_{m in S} m P3``."""
    values = {k: float(np.sum(_sign_tensor(mask) * dist.table)) for k, mask in _SUBSETS.items()}
    se = None
    if dist.samples is not None:
        n = len(dist.samples)
        se = {k: float(np.einsum("pijk,ijk->p", dist.samples, _sign_tensor(mask)).std(ddof=1) / math.sqrt(n))
              for k, mask in _SUBSETS.items()}
    return CorrelatorSet(**values, stderr=se)


def extract_d_ttau(cs: CorrelatorSet, theta: float, phi: float, d_sum: float) -> float:
    """Invert ``c_zx = sin^2(theta) [d(t+tau) + cos(2 phi) d(t, tau)] / 2`` for ``d(t, tau)``."""
    s2 = math.sin(theta) ** 2
    c2 = math.cos(2 * phi)
    if abs(s2) < 1e-8 or abs(c2) < 1e-8:
        raise ValueError(f"d(t,tau) is not recoverable at theta={theta}, phi={phi}")
    return (2 * cs.c_zx / s2 - d_sum) / c2


@dataclass(frozen=True)
class LGIResult:
    K: float
    violated: bool
    correlators: tuple


def lgi_value(corr_yx: float, corr_zy: float, corr_zx: float, tol: float = 1e-12) -> LGIResult:
    """``K = <yx> + <zy> - <zx>``; classical values lie in [-3, 1]."""
    k = corr_yx + corr_zy - corr_zx
    return LGIResult(k, bool(k > 1 + tol or k < -3 - tol), (corr_yx, corr_zy, corr_zx))


def lgi_decay(params, t: float, tau: float) -> float:
    return float(analytic_d(params, t) + analytic_d(params, tau) - analytic_d(params, t + tau))


def lgi_from_engine(engine: Engine, scheme: Scheme) -> LGIResult:
    """K from the three two-measurement experiments."""
    return lgi_value(*(p2(engine, scheme, pair).correlator() for pair in PAIRS))


# ----------------------------------------------------------------------------
# Markovianity and superclassicality checkers
# ----------------------------------------------------------------------------

MARGINAL_FLOOR = 1e-12


@dataclass(frozen=True)
class FactorizationDistance:
    value: float
    skipped: tuple

    def __float__(self):
        return self.value


def markov_factorization_distance(dist: JointDist3, p2_pairs: dict) -> FactorizationDistance:
    """``sum |P3(z,y,x) - P2(z|y) P2(y|x) P1(x)|`` over outcome triples.

    ``p2_pairs`` maps ``"yx"`` and ``"zy"`` to the corresponding
    two-measurement tables.  Triples whose conditioning marginal is below
    ``MARGINAL_FLOOR`` are skipped and listed in the result.
    """
    pyx = p2_pairs["yx"].table
    pzy = p2_pairs["zy"].table
    p1x = pyx.sum(axis=0)
    p1y = pzy.sum(axis=0)
    total = 0.0
    skipped = []
    for iz, iy, ix in np.ndindex(2, 2, 2):
        if p1x[ix] < MARGINAL_FLOOR or p1y[iy] < MARGINAL_FLOOR:
            skipped.append((OUTCOMES[iz], OUTCOMES[iy], OUTCOMES[ix]))
            continue
        markov = pzy[iz, iy] / p1y[iy] * pyx[iy, ix]
        total += abs(dist.table[iz, iy, ix] - markov)
    if skipped:
        log.info("factorization distance skipped %d triples with vanishing marginals", len(skipped))
    return FactorizationDistance(float(total), tuple(skipped))


def factorization_distance_for(engine: Engine, scheme: Scheme) -> FactorizationDistance:
    return markov_factorization_distance(
        p3(engine, scheme), {"yx": p2(engine, scheme, "yx"), "zy": p2(engine, scheme, "zy")})


def default_test_states(n_random: int = 20, seed: int = 12345) -> list[np.ndarray]:
    """Pauli eigenstates, the maximally mixed state and seeded random states."""
    rng = np.random.default_rng(seed)
    return pauli_eigenstates() + [MIXED.copy()] + [random_density(2, rng) for _ in range(n_random)]


def _herm_part(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + dag(m))


def superclassicality_deviation(engine: Engine, t: float, tau: float, test_states=None,
                                verbose: bool = False):
    """Largest trace distance between ``Lambda_{t+tau,0}[rho]`` and its
    measured-in-the-eigenbasis-at-``t`` counterpart.

    Eigenspaces of the state at ``t`` are resolved with ``herm_eig``; a
    degenerate eigenspace is measured with its (higher-rank) projector.
    """
    states = default_test_states() if test_states is None else list(test_states)
    rows = []
    for rho in states:
        at_t = engine.propagate(engine.initial(rho), t)
        direct = engine.reduce(engine.propagate(at_t, tau))
        spec = herm_eig(_herm_part(engine.reduce(at_t)))
        measured = sum(engine.reduce(engine.propagate(engine.condition(at_t, p), tau)) for p in spec.projectors)
        rows.append(trace_norm(direct - measured))
    worst = float(max(rows))
    return (worst, rows) if verbose else worst


def discord_condition_norm(engine: Engine, rho, t: float) -> float:
    """Largest trace norm of ``Tr_s[(|c~><c| (x) I) G_t(rho (x) sigma_0)]`` over ``c != c~``.

    ``|c>`` runs over the eigenvectors of the reduced state at ``t``; zero
    means the evolved state is block diagonal in that basis.
    """
    if not engine.bipartite:
        raise TypeError(f"{engine.kind} has no environment operator; discord is undefined")
    state = engine.propagate(engine.initial(rho), t)
    vecs = herm_eig(_herm_part(engine.reduce(state))).vectors
    worst = 0.0
    for c in range(vecs.shape[1]):
        for ct in range(vecs.shape[1]):
            if c == ct:
                continue
            op = np.outer(vecs[:, ct], vecs[:, c].conj())
            worst = max(worst, engine.env_trace_norm(engine.env_marginal(state, op)))
    return worst


def history_env_states(engine: Engine, t: float, initial_state=None) -> list:
    """Normalized environment states at ``t`` left behind by measurement histories.

    Includes the unmeasured environment at ``t`` and, for Pauli first and
    second measurements, every conditional environment ``sigma_{t|y,x}``.
    """
    rho0 = MIXED if initial_state is None else initial_state
    out = []

    def add(env):
        tr = engine.env_trace(env)
        if abs(tr) > 1e-9:
            out.append(engine.env_scale(env, 1.0 / tr))

    add(engine.env_marginal(engine.propagate(engine.initial(rho0), t), np.eye(2)))
    projectors = pauli_eigenstates()
    for ex in projectors:
        at_t = engine.propagate(engine.initial(ex), t)
        for ey in projectors:
            add(engine.env_marginal(at_t, ey))
    return out


def _hermitian_trace_norms(diff: np.ndarray) -> np.ndarray:
    return np.sum(np.abs(np.linalg.eigvalsh(_herm_part(diff))), axis=-1)


def markov_propagator_condition(engine: Engine, t: float, tau: float, test_env_states=None,
                                test_states=None) -> float:
    """Largest change of ``Tr_e[G_{t+tau,t}(rho (x) sigma)]`` across environment states ``sigma``.

    Zero means the system map over ``[t, t+tau]`` does not depend on the
    environment it starts from, i.e. on the measurement history.  The
    default environment set is ``history_env_states`` plus the engine's own
    extra probes; time-independent engines evaluate them from time ``t``
    regardless of their recorded time.
    """
    envs = list(history_env_states(engine, t) if test_env_states is None else test_env_states)
    if test_env_states is None:
        envs += [e for e in engine.extra_env_states()]
    states = default_test_states(n_random=5) if test_states is None else list(test_states)
    worst = 0.0
    for rho in states:
        outs = np.array([engine.reduce(engine.propagate(engine.initial(rho, env), tau)) for env in envs])
        diffs = outs[:, None] - outs[None, :]
        worst = max(worst, float(np.max(_hermitian_trace_norms(diffs))))
    return worst


# ----------------------------------------------------------------------------
# Grid scans
# ----------------------------------------------------------------------------

def direction_grid() -> list[BlochDirection]:
    """Twelve measurement directions: four polar angles times three azimuths."""
    thetas = (math.pi / 6, math.pi / 3, math.pi / 2, 5 * math.pi / 6)
    phis = (0.0, 2 * math.pi / 3, 4 * math.pi / 3)
    return [BlochDirection(th, ph) for th in thetas for ph in phis]


def dni_invasiveness_grid(engine: Engine, times: Sequence[float], directions=None) -> np.ndarray:
    """Invasiveness at the DNI scheme, indexed ``[x_dir, z_dir, t, tau]``."""
    directions = direction_grid() if directions is None else directions
    obs = [observable_from_bloch(d) for d in directions]
    out = np.empty((len(obs), len(obs), len(times), len(times)))
    for i, ox in enumerate(obs):
        for j, oz in enumerate(obs):
            for a, t in enumerate(times):
                for b, tau in enumerate(times):
                    out[i, j, a, b] = scheme_invasiveness(engine, dni_scheme(engine, t, tau, ox, oz))
    return out


def max_lgi_equal_times(decay, t_max: float, n_grid: int = 4001) -> tuple[float, float]:
    """Maximum of ``K(t, t) = 2 d(t) - d(2t)`` over ``[0, t_max]`` and where it occurs."""
    t = np.linspace(0.0, t_max, n_grid)
    k = 2 * decay(t) - decay(2 * t)
    i = int(np.argmax(k))
    best_k, best_t = float(k[i]), float(t[i])
    lo, hi = t[max(i - 1, 0)], t[min(i + 1, n_grid - 1)]
    if hi > lo:
        res = scipy.optimize.minimize_scalar(lambda s: -(2 * decay(s) - decay(2 * s)), bounds=(lo, hi),
                                             method="bounded", options={"xatol": 1e-12})
        if -res.fun > best_k:
            best_k, best_t = float(-res.fun), float(res.x)
    return best_k, best_t


def dissipative_decay(ratio: float, n_bar: int, gamma: float = 1.0):
    """Closed-form ``d(t)`` of the dissipative model for ``chi = ratio * gamma``.

    Evaluated as a formula, so ``ratio > 1`` is accepted even though the
    underlying generator is not completely positive there.
    """
    chi = ratio * gamma
    return lambda t: np.exp(-2 * gamma * np.asarray(t)) * np.cos(2 * chi * np.asarray(t)) ** n_bar


@dataclass(frozen=True)
class Threshold:
    value: float | None
    lo: float
    hi: float
    bracket: tuple | None


def lgi_threshold(max_k, lo: float, hi: float, tol: float = 1e-12, xtol: float = 1e-6,
                  n_scan: int = 201) -> Threshold:
    """Smallest parameter in ``[lo, hi]`` with ``max_k(param) > 1 + tol``, by scan then bisection.

    ``value`` is ``None`` when no violation is found on the scan.
    """
    grid = np.linspace(lo, hi, n_scan)
    flags = [max_k(p) > 1 + tol for p in grid]
    if not any(flags):
        return Threshold(None, lo, hi, None)
    first = flags.index(True)
    if first == 0:
        return Threshold(float(lo), lo, hi, (lo, lo))
    a, b = float(grid[first - 1]), float(grid[first])
    while b - a > xtol:
        mid = 0.5 * (a + b)
        if max_k(mid) > 1 + tol:
            b = mid
        else:
            a = mid
    return Threshold(0.5 * (a + b), lo, hi, (a, b))
