"""Periodic fields on the unit torus and Fourier multiplier operations.

Coefficients use the normalization ``c(xi) = mean_x psi(x) exp(-2 pi i xi.x)``
so that they approximate the Fourier coefficients on ``Q = (0, 1)^d`` and
every integral is a grid mean.  Coefficient arrays are stored in numpy FFT
order; :meth:`Grid.frequencies` gives the integer frequency of each slot.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .opsym import DEFAULT_RANK_TOL, DiffOp, projector_symbols


class FieldError(ValueError):
    pass


class EllipticOperatorError(ValueError):
    """The constraint has trivial kernel at every sampled frequency."""


@dataclass(frozen=True)
class Grid:
    d: int
    n: int

    def __post_init__(self):
        if self.d < 1:
            raise FieldError("d must be >= 1")
        if self.n < 1 or self.n % 2 == 0:
            raise FieldError("n must be odd")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def size(self) -> int:
        return self.n**self.d

    @property
    def axes(self) -> tuple[int, ...]:
        return tuple(range(self.d))

    @property
    def max_frequency(self) -> int:
        return (self.n - 1) // 2

    def frequencies(self) -> np.ndarray:
        """Integer frequencies, shape ``(n,)*d + (d,)`` in FFT order."""
        return _frequencies(self.d, self.n)

    def points(self) -> np.ndarray:
        """Sample points ``j/n``, shape ``(n,)*d + (d,)``."""
        x = np.arange(self.n) / self.n
        return np.stack(np.meshgrid(*([x] * self.d), indexing="ij"), axis=-1)


@lru_cache(maxsize=64)
def _frequencies(d: int, n: int) -> np.ndarray:
    k = np.rint(np.fft.fftfreq(n, 1.0 / n))
    xi = np.stack(np.meshgrid(*([k] * d), indexing="ij"), axis=-1)
    xi.setflags(write=False)
    return xi


@dataclass(frozen=True, eq=False)
class PeriodicField:
    """Real R^N-valued samples on the grid, array shape ``(n,)*d + (N,)``."""

    grid: Grid
    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim == self.grid.d:
            s = s[..., None]
        if s.shape[:-1] != self.grid.shape:
            raise FieldError(f"samples shape {s.shape} does not fit grid {self.grid}")
        if not np.all(np.isfinite(s)):
            raise FieldError("non-finite samples")
        object.__setattr__(self, "samples", s)

    @property
    def N(self) -> int:
        return self.samples.shape[-1]

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=self.grid.axes)

    def flat(self) -> np.ndarray:
        return self.samples.reshape(-1, self.N)

    def __add__(self, other):
        return PeriodicField(self.grid, self.samples + _samples(other))

    def __sub__(self, other):
        return PeriodicField(self.grid, self.samples - _samples(other))

    def __mul__(self, scalar):
        return PeriodicField(self.grid, self.samples * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return PeriodicField(self.grid, -self.samples)


def _samples(other):
    return other.samples if isinstance(other, PeriodicField) else other


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Fourier coefficients, array shape ``(n,)*d + (N,)`` in FFT order."""

    grid: Grid
    coeffs: np.ndarray

    @property
    def N(self) -> int:
        return self.coeffs.shape[-1]

    def at(self, xi) -> np.ndarray:
        idx = tuple(int(k) % self.grid.n for k in xi)
        return self.coeffs[idx]


def field_from_function(grid: Grid, fn) -> PeriodicField:
    """Sample ``fn(x)`` (x of shape ``(..., d)``) on the grid."""
    return PeriodicField(grid, np.asarray(fn(grid.points()), dtype=float))


def zeros(grid: Grid, N: int) -> PeriodicField:
    return PeriodicField(grid, np.zeros(grid.shape + (N,)))


def transform(field: PeriodicField) -> SpectralField:
    g = field.grid
    return SpectralField(g, np.fft.fftn(field.samples, axes=g.axes) / g.size)


def inverse_transform(spec: SpectralField) -> PeriodicField:
    g = spec.grid
    return PeriodicField(g, np.fft.ifftn(spec.coeffs * g.size, axes=g.axes).real)


def apply_multiplier(field: PeriodicField, mult: np.ndarray) -> PeriodicField:
    """Multiply coefficients by a (real or symmetric) scalar multiplier per frequency."""
    g = field.grid
    c = np.fft.fftn(field.samples, axes=g.axes)
    return PeriodicField(g, np.fft.ifftn(c * mult[..., None], axes=g.axes).real)


def apply_matrix_symbol(field: PeriodicField, sym: np.ndarray) -> PeriodicField:
    """``c(xi) -> sym(xi) c(xi)`` with ``sym`` of shape ``(n,)*d + (M, N)``."""
    g = field.grid
    c = np.fft.fftn(field.samples, axes=g.axes)
    out = np.einsum("...mn,...n->...m", sym, c)
    return PeriodicField(g, np.fft.ifftn(out, axes=g.axes).real)


# ---------------------------------------------------------------------------
# symbol grids (cached per operator instance and grid)
# ---------------------------------------------------------------------------

@lru_cache(maxsize=32)
def symbol_grid(op: DiffOp, grid: Grid) -> np.ndarray:
    """Unnormalized symbol at every integer frequency of the grid."""
    out = op.symbol_matrix(grid.frequencies())
    out.setflags(write=False)
    return out


@lru_cache(maxsize=32)
def projector_grid(op: DiffOp, grid: Grid, tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Projector onto ker A(xi) at every frequency; zero at xi = 0."""
    out = projector_symbols(op, grid.frequencies(), tol)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=32)
def abs_frequency(grid: Grid) -> np.ndarray:
    """``|2 pi xi|`` on the grid."""
    out = 2 * np.pi * np.linalg.norm(grid.frequencies(), axis=-1)
    out.setflags(write=False)
    return out


def sobolev_multiplier(grid: Grid, s: float) -> np.ndarray:
    """``|2 pi xi|^s`` for xi != 0 and 0 at xi = 0."""
    a = abs_frequency(grid)
    out = np.zeros_like(a)
    nz = a > 0
    out[nz] = a[nz] ** s
    return out


def band_mask(grid: Grid, band: int) -> np.ndarray:
    return np.max(np.abs(grid.frequencies()), axis=-1) <= band


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def apply_operator(op: DiffOp, field):
    """Apply a constant-coefficient operator as a Fourier multiplier.

    Accepts a :class:`PeriodicField` or :class:`SpectralField` and returns the
    same kind with fiber ``op.M``.
    """
    if op.d != field.grid.d or op.N != field.N:
        raise FieldError(
            f"dimension mismatch: {op!r} applied to d={field.grid.d}, N={field.N} field"
        )
    sym = symbol_grid(op, field.grid)
    if isinstance(field, SpectralField):
        return SpectralField(field.grid, np.einsum("...mn,...n->...m", sym, field.coeffs))
    g = field.grid
    c = np.fft.fftn(field.samples, axes=g.axes)
    out = np.einsum("...mn,...n->...m", sym, c)
    return PeriodicField(g, np.fft.ifftn(out, axes=g.axes).real)


def zero_mean(field: PeriodicField) -> PeriodicField:
    return PeriodicField(field.grid, field.samples - field.mean())


def lp_norm(field: PeriodicField, p: float = 2.0) -> float:
    mag = np.linalg.norm(field.samples, axis=-1)
    if np.isinf(p):
        return float(mag.max())
    return float(np.mean(mag**p) ** (1.0 / p))


def _require_zero_mean(field: PeriodicField, rtol: float = 1e-9):
    scale = lp_norm(field, 2) + np.finfo(float).tiny
    if np.linalg.norm(field.mean()) > rtol * scale:
        raise FieldError("negative order norm requires a zero-mean field")


def sobolev_norm(field: PeriodicField, s: float, p: float = 2.0) -> float:
    """Homogeneous discrete Sobolev norm ``|| F^-1[|2 pi xi|^s c] ||_{L^p}``.

    ``s = 0`` is the plain discrete L^p norm.  Negative orders require a
    zero-mean field; the zero frequency is always dropped for ``s != 0``.
    """
    if p < 1:
        raise FieldError("p must be >= 1")
    if s == 0:
        return lp_norm(field, p)
    if s < 0:
        _require_zero_mean(field)
    return lp_norm(apply_multiplier(field, sobolev_multiplier(field.grid, s)), p)


def sobolev_norm_plancherel(field: PeriodicField, s: float) -> float:
    """p = 2 Sobolev norm evaluated directly on the coefficients."""
    if s < 0:
        _require_zero_mean(field)
    c = transform(field).coeffs
    w = sobolev_multiplier(field.grid, s) ** 2 if s != 0 else np.ones(field.grid.shape)
    return float(np.sqrt(np.sum(w[..., None] * np.abs(c) ** 2)))


def v_energy(field: PeriodicField, p: float) -> float:
    """Integral of ``|V(psi)|^2 = |psi|^2 + |psi|^p``."""
    if p < 2:
        raise FieldError("p must be >= 2")
    sq = np.sum(field.samples**2, axis=-1)
    return float(np.mean(sq + sq ** (p / 2.0)))


def mixed_negative_norm(field: PeriodicField, p: float) -> float:
    """``(||u||^2_{W^-1,2} + ||u||^p_{W^-1,p})^{1/2}``."""
    if p < 2:
        raise FieldError("p must be >= 2")
    n2 = sobolev_norm(field, -1, 2)
    npp = sobolev_norm(field, -1, p)
    return float(np.sqrt(n2**2 + npp**p))


def afree_residual(op: DiffOp, field: PeriodicField) -> float:
    """Scale-free A-freeness defect ``||A psi||_{W^-k,2} / ||psi||_{L^2}``."""
    norm = lp_norm(field, 2)
    if norm == 0:
        return 0.0
    a = apply_operator(op, field)
    if op.k == 0:
        return lp_norm(a, 2) / norm
    return sobolev_norm(a, -op.k, 2) / norm


def random_afree_field(op: DiffOp, grid: Grid, band: int = 4, seed: int = 0,
                       amplitude: float = 1.0) -> PeriodicField:
    """Random real, zero-mean, band-limited field in the kernel of ``op``.

    Coefficients are ``P(xi) g(xi)`` for a Gaussian white-noise field ``g``;
    the result is rescaled to L^2 norm ``amplitude``.
    """
    if band < 1:
        raise FieldError("band must be >= 1")
    if op.d != grid.d:
        raise FieldError("operator and grid dimensions differ")
    band = min(band, grid.max_frequency)
    rng = np.random.default_rng(seed)
    g = rng.standard_normal(grid.shape + (op.N,))
    P = projector_grid(op, grid)
    mask = band_mask(grid, band)
    if not np.any(np.trace(P[mask], axis1=-2, axis2=-1) > 0.5):
        raise EllipticOperatorError(
            f"{op!r} has trivial kernel at every frequency: only the zero field is A-free"
        )
    c = np.fft.fftn(g, axes=grid.axes)
    c = np.einsum("...ij,...j->...i", P, c) * mask[..., None]
    psi = np.fft.ifftn(c, axes=grid.axes).real
    psi -= psi.mean(axis=grid.axes)
    norm = np.sqrt(np.mean(np.sum(psi**2, axis=-1)))
    if norm == 0:
        raise EllipticOperatorError("projected field vanished")
    return PeriodicField(grid, psi * (amplitude / norm))


def random_field(grid: Grid, N: int, band: int | None = None, seed: int = 0,
                 amplitude: float = 1.0) -> PeriodicField:
    """Random real zero-mean band-limited field with no constraint."""
    rng = np.random.default_rng(seed)
    g = rng.standard_normal(grid.shape + (N,))
    if band is not None:
        g = apply_multiplier(PeriodicField(grid, g), band_mask(grid, band).astype(float)).samples
    g -= g.mean(axis=grid.axes)
    return PeriodicField(grid, g * (amplitude / np.sqrt(np.mean(np.sum(g**2, axis=-1)))))
