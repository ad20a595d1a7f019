"""Truncated polar velocity grid on R^2 and its quadrature.

Nodes are laid out radius-major: node ``i_r * n_phi + i_phi`` sits at speed
``speeds[i_r]`` and angle ``angles[i_phi]``.  Angles are cell midpoints
``(b + 1/2) * 2pi / n_phi`` so the node set is closed under v -> -v,
(v1, v2) -> (v1, -v2) and (v1, v2) -> (-v1, v2) with matching weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SQRT2PI = np.sqrt(2.0 * np.pi)


def maxwellian(v1, v2):
    """Global Maxwellian mu(v) = (2pi)^(-1/2) exp(-|v|^2 / 2)."""
    return np.exp(-0.5 * (np.asarray(v1) ** 2 + np.asarray(v2) ** 2)) / SQRT2PI


def sqrt_maxwellian(v1, v2):
    return np.exp(-0.25 * (np.asarray(v1) ** 2 + np.asarray(v2) ** 2)) / np.sqrt(SQRT2PI)


@dataclass(frozen=True)
class VelocityGrid:
    vmax: float
    n_r: int
    n_phi: int
    speeds: np.ndarray = field(repr=False)
    speed_weights: np.ndarray = field(repr=False)
    angles: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.n_r * self.n_phi

    @property
    def dphi(self) -> float:
        return 2.0 * np.pi / self.n_phi

    @property
    def s(self) -> np.ndarray:
        """Speed of every node."""
        return np.repeat(self.speeds, self.n_phi)

    @property
    def phi(self) -> np.ndarray:
        return np.tile(self.angles, self.n_r)

    @property
    def v1(self) -> np.ndarray:
        return self.s * np.cos(self.phi)

    @property
    def v2(self) -> np.ndarray:
        return self.s * np.sin(self.phi)

    @property
    def nodes(self) -> np.ndarray:
        return np.column_stack([self.v1, self.v2])

    @property
    def weights(self) -> np.ndarray:
        return np.repeat(self.speeds * self.speed_weights, self.n_phi) * self.dphi

    # index maps used by reflections and the Milne boundary condition
    def reflect_index(self, kind: str = "va") -> np.ndarray:
        """Permutation p with node p[i] equal to the reflected node i.

        ``kind`` is "va" for (va, vb) -> (-va, vb), "vb" for (va, -vb) and
        "both" for v -> -v.
        """
        b = np.arange(self.n_phi)
        n = self.n_phi
        if kind == "va":
            bb = (n // 2 - 1 - b) % n
        elif kind == "vb":
            bb = n - 1 - b
        elif kind == "both":
            bb = (b + n // 2) % n
        else:
            raise ValueError(f"unknown reflection {kind!r}")
        return (np.arange(self.n_r)[:, None] * n + bb[None, :]).ravel()

    def as_polar(self, f) -> np.ndarray:
        """View a node field as an (n_r, n_phi) array."""
        return np.asarray(f).reshape(self.n_r, self.n_phi)


def build_grid(vmax: float = 6.0, n_r: int = 24, n_phi: int = 32) -> VelocityGrid:
    if n_phi % 2:
        raise ValueError("n_phi must be even to keep the reflection symmetry")
    if vmax < 5:
        raise ValueError("vmax must be at least 5 (Maxwellian tail mass too large)")
    if n_r < 8 or n_phi < 8:
        raise ValueError("need n_r >= 8 and n_phi >= 8")
    x, w = np.polynomial.legendre.leggauss(n_r)
    speeds = 0.5 * vmax * (x + 1.0)
    speed_weights = 0.5 * vmax * w
    angles = (np.arange(n_phi) + 0.5) * 2.0 * np.pi / n_phi
    return VelocityGrid(float(vmax), int(n_r), int(n_phi), speeds, speed_weights, angles)


def integrate(field, grid: VelocityGrid) -> float:
    f = np.asarray(field, dtype=float)
    if f.shape[-1] != grid.size:
        raise ValueError(f"field has {f.shape[-1]} values, grid has {grid.size} nodes")
    return f @ grid.weights


def inner(f, g, grid: VelocityGrid) -> float:
    return integrate(np.asarray(f) * np.asarray(g), grid)


def norm(f, grid: VelocityGrid) -> float:
    return float(np.sqrt(inner(f, f, grid)))
