"""Dense complex linear algebra and channel primitives.

Operators are plain ``numpy`` arrays of dtype ``complex128``.  Superoperators
act on column-stacked operators: ``vec(A)`` stacks the columns of ``A`` so that
``vec(A X B) = (B.T kron A) vec(X)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

TOL_HERM = 1e-10
TOL_TRACE = 1e-10
TOL_PSD = 1e-9
TOL_DEGEN = 1e-9

# Beyond this 1-norm the exponential of a generic generator is not trusted.
EXPM_NORM_LIMIT = 700.0

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
IDENTITY_2 = np.eye(2, dtype=complex)
PAULIS = (SIGMA_X, SIGMA_Y, SIGMA_Z)


class DimensionError(ValueError):
    pass


class NotHermitianError(ValueError):
    pass


def _finite(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    m = np.asarray(m, dtype=complex)
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def dag(m: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(m, -1, -2))


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kronecker product, ``out[i*rb + k, j*cb + l] = a[i, j] * b[k, l]``."""
    return np.kron(_finite(a, "a"), _finite(b, "b"))


def kron_all(mats: Sequence[np.ndarray]) -> np.ndarray:
    out = np.ones((1, 1), dtype=complex)
    for m in mats:
        out = np.kron(out, m)
    return out


def partial_trace(state: np.ndarray, dims: Sequence[int], keep: Sequence[int]) -> np.ndarray:
    """Trace out every tensor factor of ``state`` not listed in ``keep``.

    Factors are ordered as in ``kron(f0, f1, ...)``; the kept factors keep
    their relative order in the result.
    """
    state = _finite(state, "state")
    dims = [int(d) for d in dims]
    keep = sorted(set(int(k) for k in keep))
    total = int(np.prod(dims))
    if state.shape != (total, total):
        raise DimensionError(f"state of shape {state.shape} does not match dims {dims}")
    if not keep or keep[0] < 0 or keep[-1] >= len(dims):
        raise DimensionError(f"keep={keep} is not a nonempty subset of factors 0..{len(dims) - 1}")
    n = len(dims)
    t = state.reshape(dims + dims)
    traced = [i for i in range(n) if i not in keep]
    # einsum labels: row indices 0..n-1, column indices n..2n-1; traced pairs share a label
    row = list(range(n))
    col = [i if i in traced else n + i for i in range(n)]
    out_labels = keep + [n + k for k in keep]
    reduced = np.einsum(t, row + col, out_labels)
    d_keep = int(np.prod([dims[k] for k in keep]))
    return reduced.reshape(d_keep, d_keep)


def is_hermitian(m: np.ndarray, tol: float = TOL_HERM) -> bool:
    m = np.asarray(m)
    return m.shape[0] == m.shape[1] and float(np.max(np.abs(m - dag(m)), initial=0.0)) <= tol


def check_density(rho: np.ndarray, tol_herm: float = TOL_HERM, tol_trace: float = TOL_TRACE,
                  tol_psd: float = TOL_PSD) -> np.ndarray:
    """Validate a density matrix and return it as a complex array."""
    rho = _finite(rho, "density matrix")
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise DimensionError(f"density matrix must be square, got {rho.shape}")
    if not is_hermitian(rho, tol_herm):
        raise NotHermitianError("density matrix is not Hermitian")
    if abs(np.trace(rho) - 1.0) > tol_trace:
        raise ValueError(f"density matrix trace {np.trace(rho).real:.3g} != 1")
    if np.linalg.eigvalsh(0.5 * (rho + dag(rho)))[0] < -tol_psd:
        raise ValueError("density matrix is not positive semidefinite")
    return rho


@dataclass(frozen=True)
class Spectrum:
    """Eigen-decomposition grouped into eigenspaces.

    ``eigenvalues`` holds one value per eigenspace (descending) and
    ``projectors`` the matching orthogonal projectors; ``multiplicities``
    gives each projector's rank.
    """

    eigenvalues: np.ndarray
    projectors: tuple
    multiplicities: tuple
    vectors: np.ndarray

    @property
    def degenerate(self) -> bool:
        return any(m > 1 for m in self.multiplicities)

    def reconstruct(self) -> np.ndarray:
        return sum(lam * p for lam, p in zip(self.eigenvalues, self.projectors))


def _fix_phase(vecs: np.ndarray) -> np.ndarray:
    # Make the largest-magnitude component of each column real and positive;
    # ties are broken by the lowest index.
    out = vecs.copy()
    for k in range(out.shape[1]):
        col = out[:, k]
        mags = np.abs(col)
        i = int(np.flatnonzero(mags >= mags.max() * (1 - 1e-12))[0])
        out[:, k] = col * (np.conj(col[i]) / mags[i])
    return out


def herm_eig(h: np.ndarray, tol_herm: float = TOL_HERM, tol_degen: float = TOL_DEGEN) -> Spectrum:
    """Hermitian eigen-decomposition with a reproducible convention.

    Eigenvalues come out in descending order.  Eigenvalues closer than
    ``tol_degen * max(1, spectral radius)`` are merged into one eigenspace
    whose projector has rank > 1.
    """
    h = _finite(h, "h")
    if not is_hermitian(h, tol_herm):
        raise NotHermitianError("herm_eig requires a Hermitian matrix")
    w, v = np.linalg.eigh(0.5 * (h + dag(h)))
    w, v = w[::-1], v[:, ::-1]
    v = _fix_phase(v)
    scale = max(1.0, float(np.max(np.abs(w), initial=0.0)))
    groups: list[list[int]] = []
    for i in range(len(w)):
        if groups and abs(w[groups[-1][0]] - w[i]) < tol_degen * scale:
            groups[-1].append(i)
        else:
            groups.append([i])
    values = np.array([float(np.mean(w[g])) for g in groups])
    projectors = tuple(v[:, g] @ dag(v[:, g]) for g in groups)
    return Spectrum(values, projectors, tuple(len(g) for g in groups), v)


def matrix_exp(m: np.ndarray) -> np.ndarray:
    """Matrix exponential by scaling-and-squaring Pade (``scipy.linalg.expm``)."""
    m = _finite(m, "m")
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError("matrix_exp needs a square matrix")
    if np.linalg.norm(m, 1) > EXPM_NORM_LIMIT:
        raise OverflowError(f"generator norm {np.linalg.norm(m, 1):.3g} exceeds {EXPM_NORM_LIMIT}")
    return scipy.linalg.expm(m)


def trace_norm(m: np.ndarray) -> float:
    return float(np.sum(np.linalg.svd(np.asarray(m), compute_uv=False)))


# ----------------------------------------------------------------------------
# Superoperators (column stacking)
# ----------------------------------------------------------------------------

def vec(m: np.ndarray) -> np.ndarray:
    return np.asarray(m).reshape(-1, order="F")


def unvec(v: np.ndarray, dim: int | None = None) -> np.ndarray:
    v = np.asarray(v)
    if dim is None:
        dim = int(round(np.sqrt(v.size)))
    return v.reshape(dim, dim, order="F")


@dataclass(frozen=True)
class Superoperator:
    """Linear map on ``dim x dim`` operators, stored as a ``dim**2`` square matrix."""

    dim: int
    matrix: np.ndarray

    def __post_init__(self):
        if self.matrix.shape != (self.dim ** 2, self.dim ** 2):
            raise DimensionError(f"superoperator matrix {self.matrix.shape} does not fit dim={self.dim}")

    def __call__(self, op: np.ndarray) -> np.ndarray:
        return unvec(self.matrix @ vec(op), self.dim)

    def __matmul__(self, other: "Superoperator") -> "Superoperator":
        return Superoperator(self.dim, self.matrix @ other.matrix)

    @classmethod
    def from_map(cls, fn: Callable[[np.ndarray], np.ndarray], dim: int) -> "Superoperator":
        """Tomographic reconstruction from the images of the matrix units."""
        cols = []
        for j in range(dim):
            for i in range(dim):
                unit = np.zeros((dim, dim), dtype=complex)
                unit[i, j] = 1.0
                cols.append(vec(fn(unit)))
        return cls(dim, np.array(cols).T)

    def is_trace_preserving(self, tol: float = TOL_TRACE) -> bool:
        # Tr(S[X]) = Tr(X) for all X  <=>  vec(I)^T S = vec(I)^T
        row = vec(np.eye(self.dim)) @ self.matrix
        return float(np.max(np.abs(row - vec(np.eye(self.dim))))) <= tol


def left(a: np.ndarray) -> np.ndarray:
    """Superoperator matrix of ``X -> a X``."""
    return np.kron(np.eye(a.shape[0]), a)


def right(b: np.ndarray) -> np.ndarray:
    """Superoperator matrix of ``X -> X b``."""
    return np.kron(b.T, np.eye(b.shape[0]))


def liouvillian(hamiltonian: np.ndarray, jumps: Sequence[tuple[float, np.ndarray]] = ()) -> np.ndarray:
    """Generator ``-i[H, .] + sum_a g_a (V . V^+ - {V^+ V, .}/2)`` as a matrix."""
    h = np.asarray(hamiltonian, dtype=complex)
    gen = -1j * (left(h) - right(h))
    for rate, v in jumps:
        v = np.asarray(v, dtype=complex)
        vv = dag(v) @ v
        gen = gen + rate * (np.kron(v.conj(), v) - 0.5 * left(vv) - 0.5 * right(vv))
    return gen


def kossakowski_liouvillian(rates: np.ndarray, ops: Sequence[np.ndarray]) -> np.ndarray:
    """Generator ``sum_jk G_jk (A_j . A_k^+ - {A_k^+ A_j, .}/2)`` for a rate matrix ``G``."""
    rates = np.asarray(rates, dtype=complex)
    dim = ops[0].shape[0]
    gen = np.zeros((dim * dim, dim * dim), dtype=complex)
    for j, aj in enumerate(ops):
        for k, ak in enumerate(ops):
            if rates[j, k] == 0:
                continue
            akd = dag(ak)
            gen += rates[j, k] * (np.kron(akd.T, aj) - 0.5 * left(akd @ aj) - 0.5 * right(akd @ aj))
    return gen


def choi_matrix(s: Superoperator) -> np.ndarray:
    """``C = sum_ij |i><j| kron S[|i><j|]``."""
    d = s.dim
    c = np.zeros((d * d, d * d), dtype=complex)
    for i in range(d):
        for j in range(d):
            unit = np.zeros((d, d), dtype=complex)
            unit[i, j] = 1.0
            c[i * d:(i + 1) * d, j * d:(j + 1) * d] = s(unit)
    return c


def choi_min_eigenvalue(s: Superoperator) -> float:
    c = choi_matrix(s)
    return float(np.linalg.eigvalsh(0.5 * (c + dag(c)))[0])


def is_cp(s: Superoperator, tol: float = TOL_PSD) -> bool:
    return choi_min_eigenvalue(s) >= -tol


def random_density(dim: int, rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
    """Random state from the induced (Ginibre) measure."""
    rank = dim if rank is None else rank
    g = rng.standard_normal((dim, rank)) + 1j * rng.standard_normal((dim, rank))
    rho = g @ dag(g)
    return rho / np.trace(rho).real


def random_hermitian(dim: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    return 0.5 * (g + dag(g))
