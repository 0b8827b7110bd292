"""Energy densities with analytic derivatives and a small registry.

Callbacks are vectorized over leading axes: ``value(z)`` maps ``(..., N)`` to
``(...)``, ``grad`` to ``(..., N)`` and ``hess`` to ``(..., N, N)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from scipy.interpolate import CubicSpline


class DensityError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EnergyDensity:
    N: int
    p: float
    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"
    growth_constants: Mapping[str, float | None] = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def __post_init__(self):
        if self.p < 2:
            raise DensityError("growth exponent p must be >= 2")
        if not self.growth_constants:
            object.__setattr__(self, "growth_constants", estimate_growth(self))

    def __call__(self, z):
        return self.value(np.asarray(z, dtype=float))

    def check_derivatives(self, n: int = 20, radius: float = 2.0, seed: int = 0,
                          h: float = 1e-5) -> dict:
        """Relative central-difference mismatch of ``grad`` and ``hess``."""
        rng = np.random.default_rng(seed)
        z = rng.uniform(-radius, radius, (n, self.N))
        eye = np.eye(self.N) * h
        fd_grad = np.stack(
            [(self.value(z + e) - self.value(z - e)) / (2 * h) for e in eye], axis=-1)
        fd_hess = np.stack(
            [(self.grad(z + e) - self.grad(z - e)) / (2 * h) for e in eye], axis=-1)
        g, H = self.grad(z), self.hess(z)
        eg = np.abs(fd_grad - g).max() / max(1.0, np.abs(g).max())
        eh = np.abs(fd_hess - H).max() / max(1.0, np.abs(H).max())
        return {"grad": float(eg), "hess": float(eh)}


def estimate_growth(W: EnergyDensity, radii=None, n_dirs: int = 64, seed: int = 0) -> dict:
    """Sampled constants for ``|W| <= c_upper (1 + |z|^p)`` and
    ``c_lower (|z|^p - 1) <= W``.  ``c_lower`` is None when no positive
    constant works on the samples."""
    if radii is None:
        radii = np.concatenate([np.linspace(0.0, 1.0, 11)[1:], np.geomspace(1.1, 50.0, 30)])
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_dirs, W.N))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs = np.concatenate([dirs, np.eye(W.N), -np.eye(W.N)])
    z = radii[:, None, None] * dirs[None]
    vals = W.value(z)
    r = np.broadcast_to(radii[:, None], vals.shape)
    rp = r**W.p
    c_upper = float(np.max(np.abs(vals) / (1 + rp)))
    big = rp > 1
    c_low = float(np.min(vals[big] / (rp[big] - 1))) if np.any(big) else math.inf
    small = rp < 1
    need = float(np.max(vals[small] / (rp[small] - 1))) if np.any(small) else -math.inf
    c_lower = c_low if c_low > 0 and c_low >= need else None
    return {"c_upper": c_upper, "c_lower": c_lower}


def _sq(z):
    return np.sum(z * z, axis=-1)


def _eye_like(z, N):
    return np.broadcast_to(np.eye(N), z.shape[:-1] + (N, N))


def quadratic(matrix=None, scale: float = 1.0, N: int | None = None) -> EnergyDensity:
    """``W(z) = 1/2 M z.z`` with ``M = matrix`` or ``scale * I``."""
    if matrix is None:
        if N is None:
            raise DensityError("quadratic needs a matrix or N")
        M = scale * np.eye(N)
    else:
        M = np.array(matrix, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise DensityError("quadratic matrix must be square")
        if not np.allclose(M, M.T):
            raise DensityError("quadratic matrix must be symmetric")
        M = 0.5 * (M + M.T)
    n = M.shape[0]
    return EnergyDensity(
        n, 2.0,
        lambda z: 0.5 * np.einsum("...i,ij,...j->...", z, M, z),
        lambda z: z @ M,
        lambda z: np.broadcast_to(M, z.shape[:-1] + (n, n)),
        name="quadratic",
    )


# D^2 det on 2x2 matrices flattened row-major (F11, F12, F21, F22)
_DET_HESS = np.array([[0, 0, 0, 1], [0, 0, -1, 0], [0, -1, 0, 0], [1, 0, 0, 0]], dtype=float)


def det2(z):
    return z[..., 0] * z[..., 3] - z[..., 1] * z[..., 2]


def cof2(z):
    """Gradient of det on flattened 2x2 matrices."""
    return np.stack([z[..., 3], -z[..., 2], -z[..., 1], z[..., 0]], axis=-1)


def frobenius_det(c: float = 1.0, gamma: float = 0.0) -> EnergyDensity:
    """``W(F) = c |F|^2 + gamma det F`` on 2x2 matrices."""
    H = 2 * c * np.eye(4) + gamma * _DET_HESS
    return EnergyDensity(
        4, 2.0,
        lambda z: c * _sq(z) + gamma * det2(z),
        lambda z: 2 * c * z + gamma * cof2(z),
        lambda z: np.broadcast_to(H, z.shape[:-1] + (4, 4)),
        name="frobenius_det",
    )


def det_squared(c: float = 0.5, kappa: float = 1.0) -> EnergyDensity:
    """``W(F) = c |F|^2 + kappa (det F)^2`` on 2x2 matrices.

    Its Hessian carries the null-Lagrangian term ``2 kappa det(F) D^2 det``
    whose weight varies with the background, so it is rank-one convex but
    not convex once ``2 kappa |det F| > 2c``.
    """
    def hess(z):
        cof = cof2(z)
        return (2 * c * np.eye(4) + 2 * kappa * cof[..., :, None] * cof[..., None, :]
                + 2 * kappa * det2(z)[..., None, None] * _DET_HESS)

    return EnergyDensity(
        4, 4.0,
        lambda z: c * _sq(z) + kappa * det2(z) ** 2,
        lambda z: 2 * c * z + 2 * kappa * det2(z)[..., None] * cof2(z),
        hess,
        name="det_squared",
    )


def _radial_quartic(a: float, b: float, N: int, name: str) -> EnergyDensity:
    """``a |z|^4 + b |z|^2``."""
    def hess(z):
        s = _sq(z)[..., None, None]
        return ((4 * a * s + 2 * b) * _eye_like(z, N)
                + 8 * a * z[..., :, None] * z[..., None, :])

    return EnergyDensity(
        N, 4.0,
        lambda z: a * _sq(z) ** 2 + b * _sq(z),
        lambda z: (4 * a * _sq(z)[..., None] + 2 * b) * z,
        hess,
        name=name,
    )


def double_well(a: float = 1.0, b: float = 1.0, N: int = 1) -> EnergyDensity:
    """``a |z|^4 - b |z|^2``."""
    return _radial_quartic(a, -b, N, "double_well")


def convex_quartic(a: float = 0.25, b: float = 0.5, N: int = 1) -> EnergyDensity:
    """``a |z|^4 + b |z|^2`` with ``a, b >= 0``."""
    if a < 0 or b < 0:
        raise DensityError("convex_quartic needs a, b >= 0")
    return _radial_quartic(a, b, N, "convex_quartic")


def polynomial_1d(sigma) -> EnergyDensity:
    """Scalar density whose derivative is the polynomial ``sigma(u) = sum c_k u^k``."""
    c = np.asarray(sigma, dtype=float)
    if c.ndim != 1 or c.size == 0 or not np.all(np.isfinite(c)):
        raise DensityError("sigma must be a finite list of polynomial coefficients")
    s = np.polynomial.Polynomial(c)
    W = s.integ()
    ds = s.deriv()
    p = max(2.0, float(W.degree()))
    return EnergyDensity(
        1, p,
        lambda z: W(z[..., 0]),
        lambda z: s(z[..., 0])[..., None],
        lambda z: ds(z[..., 0])[..., None, None],
        name="polynomial_1d",
    )


def tabulated(radii, values, N: int = 1, p: float = 2.0) -> EnergyDensity:
    """Radial density ``g(|z|)`` from a table, interpolated by a cubic spline
    clamped to ``g'(0) = 0``; ``radii`` must start at 0."""
    r = np.asarray(radii, dtype=float)
    v = np.asarray(values, dtype=float)
    if r.ndim != 1 or r.shape != v.shape or r[0] != 0 or np.any(np.diff(r) <= 0):
        raise DensityError("tabulated density needs increasing radii starting at 0")
    g = CubicSpline(r, v, bc_type=((1, 0.0), "natural"))
    g1, g2 = g.derivative(1), g.derivative(2)

    def grad(z):
        rr = np.sqrt(_sq(z))
        safe = np.where(rr > 0, rr, 1.0)
        return np.where(rr[..., None] > 0, (g1(rr) / safe)[..., None] * z, 0.0)

    def hess(z):
        rr = np.sqrt(_sq(z))
        safe = np.where(rr > 0, rr, 1.0)
        u = z / safe[..., None]
        uu = u[..., :, None] * u[..., None, :]
        I = _eye_like(z, N)
        gen = g2(rr)[..., None, None] * uu + (g1(rr) / safe)[..., None, None] * (I - uu)
        return np.where(rr[..., None, None] > 0, gen, g2(0.0) * I)

    return EnergyDensity(N, p, lambda z: g(np.sqrt(_sq(z))), grad, hess, name="tabulated")


def v_squared(N: int, p: float) -> EnergyDensity:
    """``|V(z)|^2 = |z|^2 + |z|^p``."""
    def value(z):
        s = _sq(z)
        return s + s ** (p / 2)

    def grad(z):
        s = _sq(z)[..., None]
        return (2 + p * s ** ((p - 2) / 2)) * z

    def hess(z):
        s = _sq(z)
        I = _eye_like(z, N)
        base = 2 * I + p * (s ** ((p - 2) / 2))[..., None, None] * I
        if p != 2:
            w = np.where(s > 0, s, 1.0) ** ((p - 4) / 2)
            w = np.where(s > 0, w, 0.0)
            base = base + (p * (p - 2) * w)[..., None, None] * z[..., :, None] * z[..., None, :]
        return base

    return EnergyDensity(N, p, value, grad, hess, name="v_squared",
                         growth_constants={"c_upper": 2.0, "c_lower": 1.0})


REGISTRY = {
    "quadratic": quadratic,
    "frobenius_det": frobenius_det,
    "det_squared": det_squared,
    "double_well": double_well,
    "convex_quartic": convex_quartic,
    "polynomial_1d": polynomial_1d,
    "tabulated": tabulated,
    "v_squared": v_squared,
}


def make_density(spec, **params) -> EnergyDensity:
    """Build a density from ``"name"`` plus parameters or ``{"name", "params"}``."""
    if isinstance(spec, EnergyDensity):
        return spec
    if isinstance(spec, Mapping):
        params = {**spec.get("params", {}), **params}
        spec = spec["name"]
    try:
        factory = REGISTRY[spec]
    except KeyError:
        raise DensityError(f"unknown density {spec!r}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise DensityError(f"bad parameters for density {spec!r}: {exc}") from None


def load_density(path) -> EnergyDensity:
    return make_density(json.loads(Path(path).read_text()))
