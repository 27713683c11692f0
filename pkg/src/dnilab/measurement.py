"""Projective qubit measurements built from Bloch directions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .qmath import IDENTITY_2, PAULIS, TOL_DEGEN, check_density, herm_eig


@dataclass(frozen=True)
class BlochDirection:
    theta: float
    phi: float = 0.0

    def __post_init__(self):
        if not (-1e-12 <= self.theta <= np.pi + 1e-12):
            raise ValueError(f"theta={self.theta} outside [0, pi]")
        object.__setattr__(self, "phi", float(self.phi) % (2 * np.pi))

    @property
    def vector(self) -> np.ndarray:
        st = np.sin(self.theta)
        return np.array([st * np.cos(self.phi), st * np.sin(self.phi), np.cos(self.theta)])

    @classmethod
    def from_vector(cls, n) -> "BlochDirection":
        n = np.asarray(n, dtype=float)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ValueError("zero vector has no direction")
        n = n / norm
        theta = float(np.arccos(np.clip(n[2], -1.0, 1.0)))
        phi = float(np.arctan2(n[1], n[0])) if np.hypot(n[0], n[1]) > 1e-15 else 0.0
        return cls(theta, phi)

    def axis_angle(self, other: "BlochDirection") -> float:
        """Angle between the two measurement axes, ignoring orientation."""
        c = abs(float(np.dot(self.vector, other.vector)))
        return float(np.arccos(min(1.0, c)))

    def canonical_axis(self) -> "BlochDirection":
        """Same axis, oriented into the half-space z > 0 (ties broken by x, then y)."""
        n = self.vector
        for comp in (n[2], n[0], n[1]):
            if abs(comp) > 1e-12:
                return self if comp > 0 else BlochDirection.from_vector(-n)
        return self


X_DIR = BlochDirection(np.pi / 2, 0.0)
Y_DIR = BlochDirection(np.pi / 2, np.pi / 2)
Z_DIR = BlochDirection(0.0, 0.0)


@dataclass(frozen=True)
class DichotomicObservable:
    """Two orthogonal rank-1 projectors with outcome values +1 and -1."""

    plus: np.ndarray
    minus: np.ndarray
    direction: BlochDirection | None = None

    def projector(self, outcome: int) -> np.ndarray:
        if outcome == 1:
            return self.plus
        if outcome == -1:
            return self.minus
        raise ValueError(f"outcome must be +1 or -1, got {outcome}")

    @property
    def matrix(self) -> np.ndarray:
        return self.plus - self.minus


def observable_from_bloch(direction: BlochDirection) -> DichotomicObservable:
    n_sigma = sum(c * p for c, p in zip(direction.vector, PAULIS))
    return DichotomicObservable(0.5 * (IDENTITY_2 + n_sigma), 0.5 * (IDENTITY_2 - n_sigma), direction)


@dataclass(frozen=True)
class Outcome:
    probability: float
    state: np.ndarray
    impossible: bool = False


def measure_selective(rho: np.ndarray, obs: DichotomicObservable, outcome: int) -> Outcome:
    """Probability of ``outcome`` and the post-measurement state (the projector itself)."""
    proj = obs.projector(outcome)
    p = float(np.real(np.trace(proj @ rho)))
    return Outcome(min(max(p, 0.0), 1.0), proj.copy(), impossible=p <= 0.0)


def measure_nonselective(rho: np.ndarray, obs: DichotomicObservable) -> np.ndarray:
    return obs.plus @ rho @ obs.plus + obs.minus @ rho @ obs.minus


def bloch_vector(rho: np.ndarray) -> np.ndarray:
    """``(Tr sigma_x rho, Tr sigma_y rho, Tr sigma_z rho)``."""
    rho = np.asarray(rho)
    if rho.shape != (2, 2):
        raise ValueError("bloch_vector needs a 2x2 matrix")
    return np.array([float(np.real(np.trace(p @ rho))) for p in PAULIS])


@dataclass(frozen=True)
class DNIDirection:
    direction: BlochDirection
    degenerate: bool


def dni_direction(rho: np.ndarray, fallback: BlochDirection = X_DIR,
                  tol_degen: float = TOL_DEGEN) -> DNIDirection:
    """Bloch direction of the eigenbasis of ``rho``.

    The returned direction points along the Bloch vector, so the ``+1``
    projector is the eigenvector with the larger eigenvalue.  A maximally
    mixed ``rho`` commutes with everything and yields ``fallback``.
    """
    spec = herm_eig(np.asarray(rho, dtype=complex), tol_degen=tol_degen)
    if spec.degenerate:
        return DNIDirection(fallback, True)
    top = spec.projectors[0]
    return DNIDirection(BlochDirection.from_vector(bloch_vector(top)), False)


def pauli_eigenstates() -> list[np.ndarray]:
    out = []
    for d in (X_DIR, Y_DIR, Z_DIR):
        obs = observable_from_bloch(d)
        out += [obs.plus, obs.minus]
    return out


__all__ = [
    "BlochDirection", "DichotomicObservable", "Outcome", "DNIDirection",
    "X_DIR", "Y_DIR", "Z_DIR", "observable_from_bloch", "measure_selective",
    "measure_nonselective", "bloch_vector", "dni_direction", "pauli_eigenstates",
    "check_density",
]
