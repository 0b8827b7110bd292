"""Conservation laws with involutions, a periodic pseudo-spectral solver and
relative-entropy diagnostics for weak-strong comparisons.

The state equation is ``dU/dt + div f(U) = nu Lap U`` on the unit torus with
``f(U)`` stored as an ``(N, d)`` array ``f[j, alpha]``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import trapezoid

from .convexity import excess
from .densities import EnergyDensity, make_density, polynomial_1d, quadratic
from .opsym import DiffOp, curl_op, curlcurl_op, embed_operator, potential_of, sym_basis
from .spectral import (
    FieldError,
    Grid,
    PeriodicField,
    abs_frequency,
    afree_residual,
    apply_operator,
    band_mask,
    lp_norm,
    random_field,
)

log = logging.getLogger(__name__)

BLOWUP_FACTOR = 1e6
# RK4 stability limits along the imaginary and negative real axes, slightly reduced
RK4_IMAG, RK4_REAL = 2.8, 2.78


class SystemSpecError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ConservationSystem:
    N: int
    d: int
    flux: Callable[[np.ndarray], np.ndarray]          # (..., N) -> (..., N, d)
    flux_jac: Callable[[np.ndarray], np.ndarray]      # (..., N) -> (..., N, d, N)
    entropy: EnergyDensity
    entropy_flux: Callable[[np.ndarray], np.ndarray]  # (..., N) -> (..., d)
    involution: DiffOp | None = None
    constraint_map: tuple = ()
    name: str = "custom"
    linear: bool = False
    params: dict = field(default_factory=dict)

    @property
    def p(self) -> float:
        return self.entropy.p


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

def _block_entropy(k: int, W: EnergyDensity, name: str) -> EnergyDensity:
    """``eta(v, F) = 1/2 |v|^2 + W(F)`` with ``v`` the first ``k`` components."""
    N = k + W.N

    def hess(U):
        H = np.zeros(U.shape[:-1] + (N, N))
        H[..., :k, :k] = np.eye(k)
        H[..., k:, k:] = W.hess(U[..., k:])
        return H

    return EnergyDensity(
        N, W.p,
        lambda U: 0.5 * np.sum(U[..., :k] ** 2, axis=-1) + W.value(U[..., k:]),
        lambda U: np.concatenate([U[..., :k], W.grad(U[..., k:])], axis=-1),
        hess,
        name=name,
    )


def psystem1d(sigma=(0.0, 1.0)) -> ConservationSystem:
    """``v_t - sigma(u)_x = 0``, ``u_t - v_x = 0`` for ``U = (v, u)``.

    ``sigma`` is a list of polynomial coefficients (lowest degree first).
    """
    try:
        W = polynomial_1d(sigma)
    except Exception as exc:
        raise SystemSpecError(f"sigma must be a smooth polynomial: {exc}") from None
    c = np.asarray(sigma, dtype=float)
    s = np.polynomial.Polynomial(c)
    ds = s.deriv()

    def flux(U):
        return np.stack([-s(U[..., 1]), -U[..., 0]], axis=-1)[..., None]

    def flux_jac(U):
        J = np.zeros(U.shape[:-1] + (2, 1, 2))
        J[..., 0, 0, 1] = -ds(U[..., 1])
        J[..., 1, 0, 0] = -1.0
        return J

    return ConservationSystem(
        2, 1, flux, flux_jac, _block_entropy(1, W, "psystem_entropy"),
        lambda U: (-U[..., 0] * s(U[..., 1]))[..., None],
        name="psystem1d", linear=bool(np.all(c[2:] == 0)), params={"sigma": c.tolist()},
    )


def elasticity2d(W=None) -> ConservationSystem:
    """``v_t - div DW(F) = 0``, ``F_t - grad v = 0`` with ``U = (v, F)``, ``F`` row-major.

    The involution is the row-wise curl of ``F``.
    """
    W = quadratic(N=4) if W is None else make_density(W)
    if W.N != 4:
        raise SystemSpecError("elasticity2d needs a density on 2x2 matrices (N=4)")

    def flux(U):
        f = np.zeros(U.shape[:-1] + (6, 2))
        P = W.grad(U[..., 2:]).reshape(U.shape[:-1] + (2, 2))
        f[..., 0:2, :] = -P
        for i in range(2):
            for a in range(2):
                f[..., 2 + 2 * i + a, a] = -U[..., i]
        return f

    def flux_jac(U):
        J = np.zeros(U.shape[:-1] + (6, 2, 6))
        H = W.hess(U[..., 2:]).reshape(U.shape[:-1] + (2, 2, 4))
        J[..., 0:2, :, 2:] = -H
        for i in range(2):
            for a in range(2):
                J[..., 2 + 2 * i + a, a, i] = -1.0
        return J

    def q(U):
        P = W.grad(U[..., 2:]).reshape(U.shape[:-1] + (2, 2))
        return -np.einsum("...i,...ia->...a", U[..., :2], P)

    inv = embed_operator(curl_op(2, 2), 6, [2, 3, 4, 5])
    return ConservationSystem(
        6, 2, flux, flux_jac, _block_entropy(2, W, "elasticity_entropy"), q,
        involution=inv, constraint_map=(2, 3, 4, 5), name="elasticity2d",
        linear=W.name in ("quadratic", "frobenius_det"), params={"W": W.name},
    )


def _isotropic(lam: float, mu: float) -> np.ndarray:
    S = sym_basis(2)
    tr = np.trace(S, axis1=1, axis2=2)
    return 2 * mu * np.eye(len(S)) + lam * np.outer(tr, tr)


def linelast2d(C=None, lam: float = 1.0, mu: float = 1.0) -> ConservationSystem:
    """Linear elasticity ``u_t - div(C E) = 0``, ``E_t - sym grad u = 0``.

    ``E`` is stored in orthonormal Sym(2) coordinates and ``C`` acts on those
    coordinates (isotropic Lame moduli by default).  The involution is
    ``curl curl E``.
    """
    Cm = _isotropic(lam, mu) if C is None else np.asarray(C, dtype=float)
    if Cm.shape != (3, 3) or not np.allclose(Cm, Cm.T):
        raise SystemSpecError("C must be a symmetric 3x3 matrix in Sym(2) coordinates")
    S = sym_basis(2)
    W = quadratic(Cm)

    def stress(U):
        return np.einsum("...k,kia->...ia", U[..., 2:] @ Cm, S)

    def flux(U):
        f = np.zeros(U.shape[:-1] + (5, 2))
        f[..., 0:2, :] = -stress(U)
        f[..., 2:, :] = -np.einsum("kia,...i->...ka", S, U[..., :2])
        return f

    J0 = np.zeros((5, 2, 5))
    J0[0:2, :, 2:] = -np.einsum("kl,lia->iak", Cm, S)
    J0[2:, :, 0:2] = -np.einsum("kia->kai", S)

    def q(U):
        return -np.einsum("...i,...ia->...a", U[..., :2], stress(U))

    inv = embed_operator(curlcurl_op(2), 5, [2, 3, 4])
    return ConservationSystem(
        5, 2, flux, lambda U: np.broadcast_to(J0, U.shape[:-1] + J0.shape),
        _block_entropy(2, W, "linelast_entropy"), q,
        involution=inv, constraint_map=(2, 3, 4), name="linelast2d", linear=True,
        params={"C": Cm.tolist()},
    )


SYSTEMS = {"psystem1d": psystem1d, "elasticity2d": elasticity2d, "linelast2d": linelast2d}


def make_system(tag: str, **params) -> ConservationSystem:
    try:
        factory = SYSTEMS[tag]
    except KeyError:
        raise SystemSpecError(f"unknown system {tag!r}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise SystemSpecError(f"bad parameters for system {tag!r}: {exc}") from None


# ---------------------------------------------------------------------------
# entropy pair compatibility
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CompatibilityReport:
    max_residual_q: float
    max_residual_symmetry: float
    n_samples: int
    tol: float

    @property
    def compatible(self) -> bool:
        return max(self.max_residual_q, self.max_residual_symmetry) <= self.tol

    def to_dict(self) -> dict:
        return {"max_residual_q": self.max_residual_q,
                "max_residual_symmetry": self.max_residual_symmetry,
                "n_samples": self.n_samples, "compatible": self.compatible}


def entropy_compat_check(system: ConservationSystem, n_samples: int = 200, radius: float = 1.0,
                         seed: int = 0, h: float = 1e-6, tol: float = 1e-6,
                         entropy_flux=None) -> CompatibilityReport:
    """Residuals of ``dq_a/dU_i = deta/dU_j df_ja/dU_i`` (central differences on
    ``q``) and of the symmetry of ``D^2 eta Df_a`` (analytic), relative to the
    size of the right-hand sides."""
    q = system.entropy_flux if entropy_flux is None else entropy_flux
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((n_samples, system.N))
    U *= (radius * rng.uniform(0, 1, n_samples) ** (1 / system.N)
          / np.linalg.norm(U, axis=1))[:, None]
    eye = np.eye(system.N) * h
    dq = np.stack([(q(U + e) - q(U - e)) / (2 * h) for e in eye], axis=-1)  # (n, d, N)
    J = system.flux_jac(U)                                                # (n, N, d, N)
    rhs = np.einsum("nj,njai->nai", system.entropy.grad(U), J)
    res_q = np.abs(dq - rhs).max() / max(1.0, np.abs(rhs).max())
    S = np.einsum("njk,nkai->naji", system.entropy.hess(U), J)
    res_s = np.abs(S - np.swapaxes(S, -1, -2)).max() / max(1.0, np.abs(S).max())
    return CompatibilityReport(float(res_q), float(res_s), n_samples, tol)


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    system: ConservationSystem
    grid: Grid
    times: list
    states: list
    viscosity: float
    dt: float
    drift: list
    scheme: str = "rk4-pseudospectral"
    cfl: dict = field(default_factory=dict)
    blew_up: bool = False
    seed: int | None = None

    @property
    def T(self) -> float:
        return self.times[-1]

    def entropy_integrals(self) -> np.ndarray:
        return np.array([float(np.mean(self.system.entropy.value(U.samples)))
                         for U in self.states])

    def metadata(self) -> dict:
        return {"dt": self.dt, "scheme": self.scheme, "viscosity": self.viscosity,
                "cfl": dict(self.cfl), "blew_up": self.blew_up, "seed": self.seed,
                "n_states": len(self.states)}


def spectral_radius(system: ConservationSystem, U: np.ndarray) -> float:
    """Largest |eigenvalue| of ``df_alpha/dU`` over the given states and axes."""
    J = system.flux_jac(U.reshape(-1, system.N))
    J = np.moveaxis(J, -2, 1)  # (n, d, N, N)
    return float(np.abs(np.linalg.eigvals(J)).max())


def cfl_numbers(system: ConservationSystem, U0: PeriodicField, dt: float,
                viscosity: float) -> dict:
    """Heuristic RK4 stability numbers; both must stay below 1."""
    n, d = U0.grid.n, U0.grid.d
    rho = spectral_radius(system, U0.samples)
    kmax = math.pi * n
    return {
        "spectral_radius": rho,
        "advective": dt * rho * kmax / RK4_IMAG,
        "diffusive": dt * viscosity * kmax**2 * d / RK4_REAL,
    }


def _drift(system, U: PeriodicField) -> float:
    if system.involution is None:
        return 0.0
    return lp_norm(apply_operator(system.involution, U))


def evolve(system: ConservationSystem, U0: PeriodicField, dt: float, T: float,
           viscosity: float = 0.0, stride: int = 1, tol: float = 1e-8,
           dealias: bool | None = None, seed: int | None = None) -> Trajectory:
    """Integrate to time ``T`` with RK4 in Fourier space.

    The flux is evaluated pointwise and, for nonlinear systems, truncated to
    the inner two thirds of the spectrum before differentiation.  The zero
    mode never changes, so the mean is preserved exactly.  Blow-up (non-finite
    state or L2 norm above 1e6 times the initial one) truncates the trajectory
    and sets ``blew_up``.
    """
    g = U0.grid
    if U0.N != system.N or g.d != system.d:
        raise FieldError("initial state does not match the system")
    if dt <= 0 or T <= 0:
        raise ValueError("dt and T must be positive")
    if viscosity < 0:
        raise ValueError("viscosity must be non-negative")
    scale = lp_norm(U0)
    if np.linalg.norm(U0.mean()) > 1e-12 * max(scale, 1.0):
        raise FieldError("initial state must have zero mean")
    if system.involution is not None and afree_residual(system.involution, U0) > tol:
        raise FieldError("initial state violates the involution")
    cfl = cfl_numbers(system, U0, dt, viscosity)
    if cfl["advective"] > 1 or cfl["diffusive"] > 1:
        raise ValueError(f"dt={dt} violates the CFL heuristic {cfl}")

    steps = max(1, math.ceil(T / dt - 1e-9))
    dt = T / steps
    if dealias is None:
        dealias = not system.linear
    mask = band_mask(g, g.n // 3)[..., None, None] if dealias else 1.0
    ik = 2j * np.pi * g.frequencies()                     # (..., d)
    lap = -(abs_frequency(g) ** 2)[..., None]
    ax = g.axes

    def rhs(c):
        U = np.fft.ifftn(c, axes=ax).real
        fh = np.fft.fftn(system.flux(U), axes=ax) * mask   # (..., N, d)
        out = -np.einsum("...ja,...a->...j", fh, ik)
        if viscosity:
            out = out + viscosity * lap * c
        return out

    c = np.fft.fftn(U0.samples, axes=ax)
    times, states, drift = [0.0], [U0], [_drift(system, U0)]
    limit = BLOWUP_FACTOR * max(scale, np.finfo(float).tiny)
    blew = False
    for step in range(1, steps + 1):
        k1 = rhs(c)
        k2 = rhs(c + 0.5 * dt * k1)
        k3 = rhs(c + 0.5 * dt * k2)
        k4 = rhs(c + dt * k3)
        c = c + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if step % stride == 0 or step == steps:
            U = np.fft.ifftn(c, axes=ax).real
            if not np.all(np.isfinite(U)) or np.sqrt(np.mean(np.sum(U**2, -1))) > limit:
                blew = True
                log.warning("blow-up detected at t=%g", step * dt)
                break
            Uf = PeriodicField(g, U)
            times.append(step * dt)
            states.append(Uf)
            drift.append(_drift(system, Uf))
    return Trajectory(system, g, times, states, float(viscosity), dt, drift,
                      cfl=cfl, blew_up=blew, seed=seed)


# ---------------------------------------------------------------------------
# relative quantities
# ---------------------------------------------------------------------------

def _same_grid(U: PeriodicField, Ubar: PeriodicField):
    if U.grid != Ubar.grid or U.N != Ubar.N:
        raise FieldError("grid mismatch")


def relative_entropy(system: ConservationSystem, U: PeriodicField, Ubar: PeriodicField) -> float:
    _same_grid(U, Ubar)
    return float(np.mean(excess(system.entropy, Ubar.samples, U.samples - Ubar.samples)))


def relative_flux(system: ConservationSystem, U: PeriodicField, Ubar: PeriodicField) -> PeriodicField:
    """``f(U) - f(Ubar) - Df(Ubar)(U - Ubar)``, flattened to ``N*d`` components (row-major)."""
    _same_grid(U, Ubar)
    a, b = U.samples, Ubar.samples
    r = system.flux(a) - system.flux(b) - np.einsum("...jai,...i->...ja", system.flux_jac(b), a - b)
    return PeriodicField(U.grid, r.reshape(r.shape[:-2] + (-1,)))


def dissipation_check(traj: Trajectory, t: float, eps: float) -> dict:
    """``int eta(U0) - (1/eps) int_t^{t+eps} int eta(U)`` by the trapezoid rule
    on the recorded times (linear interpolation at the window ends)."""
    if eps <= 0 or t < 0 or t + eps > traj.T * (1 + 1e-12):
        raise ValueError("window [t, t+eps] outside the trajectory span")
    times = np.asarray(traj.times)
    E = traj.entropy_integrals()
    lo, hi = t, min(t + eps, traj.T)
    inner = (times > lo) & (times < hi)
    ts = np.concatenate([[lo], times[inner], [hi]])
    es = np.interp(ts, times, E)
    avg = float(trapezoid(es, ts) / eps)
    return {"t": t, "eps": eps, "margin": float(E[0] - avg)}


# ---------------------------------------------------------------------------
# weak-strong monitor
# ---------------------------------------------------------------------------

def gronwall_fit(t, v) -> tuple[float, float, bool]:
    """Fit ``v(t) <= C1 v(0) exp(C2 t)``: least squares for ``log(v/v0)`` against
    ``a + C2 t`` subject to every row lying under the line and ``C2 >= 0``.

    The feasible set is a polyhedron in two variables; the optimum is the
    unconstrained fit when feasible, otherwise it has one or two active
    constraints, and all such candidates are enumerated.  Returns
    ``(C1, C2, valid)``.
    """
    t = np.asarray(t, dtype=float)
    v = np.asarray(v, dtype=float)
    v0 = v[0]
    if v0 <= 0:
        ok = bool(np.all(v <= 0))
        return 1.0, 0.0, ok
    pos = v > 0
    tt, y = t[pos], np.log(v[pos] / v0)
    if len(tt) == 1:
        return 1.0 * (1 + 1e-12), 0.0, True

    def feasible(a, c2):
        return (c2 >= 0) & np.all(a[:, None] + c2[:, None] * tt[None, :] >= y[None, :] - 1e-13, axis=1)

    X = np.stack([np.ones_like(tt), tt], axis=1)
    sol = np.linalg.lstsq(X, y, rcond=None)[0]
    A, C = [sol[0], y.max()], [sol[1], 0.0]                 # free fit; C2 = 0 active
    dt_ = tt[None, :] - tt[:, None]                         # one active row i
    dy = y[None, :] - y[:, None]
    den = np.sum(dt_**2, axis=1)
    c_one = np.where(den > 0, np.sum(dt_ * dy, axis=1) / np.where(den > 0, den, 1), 0.0)
    A.extend(y - c_one * tt); C.extend(c_one)
    i, j = np.triu_indices(len(tt), 1)                      # two active rows
    sep = tt[j] != tt[i]
    c_two = (y[j][sep] - y[i][sep]) / (tt[j][sep] - tt[i][sep])
    A.extend(y[i][sep] - c_two * tt[i][sep]); C.extend(c_two)
    A, C = np.array(A), np.array(C)
    ok = feasible(A, C)
    A, C = A[ok], C[ok]
    obj = np.sum((A[:, None] + C[:, None] * tt[None, :] - y[None, :]) ** 2, axis=1)
    best = int(np.argmin(obj))
    a, c2 = float(A[best]), float(C[best])
    C1 = math.exp(a) * (1 + 1e-12)
    valid = bool(np.all(v <= C1 * v0 * np.exp(c2 * t) * (1 + 1e-12)))
    return C1, c2, valid


@dataclass
class StabilityReport:
    times: np.ndarray
    relative_entropy: np.ndarray
    v_distance: np.ndarray
    involution_drift: np.ndarray
    dissipation_margin: np.ndarray
    C1: float
    C2: float
    fit_valid: bool
    blew_up: bool
    p: float
    notes: list = field(default_factory=list)

    @property
    def bound_value(self) -> np.ndarray:
        return self.C1 * self.v_distance[0] * np.exp(self.C2 * self.times)

    def holds(self) -> bool:
        return bool(np.all(self.v_distance <= self.bound_value * (1 + 1e-12)))

    def to_dict(self) -> dict:
        return {"C1": self.C1, "C2": self.C2, "fit_valid": self.fit_valid,
                "blew_up": self.blew_up, "p": self.p, "n_rows": int(len(self.times)),
                "max_v_distance": float(self.v_distance.max()),
                "max_involution_drift": float(self.involution_drift.max()),
                "min_dissipation_margin": float(self.dissipation_margin.min()),
                "notes": list(self.notes)}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "relent", "vdist", "drift", "bound_value"])
            for row in zip(self.times, self.relative_entropy, self.v_distance,
                           self.involution_drift, self.bound_value):
                w.writerow([repr(float(x)) for x in row])


def weak_strong_monitor(system: ConservationSystem, U0: PeriodicField, Ubar0: PeriodicField,
                        dt: float, T: float, viscosity_weak: float = 0.0,
                        stride: int = 1, tol: float = 1e-8) -> StabilityReport:
    """Evolve the strong run (``nu = 0``) from ``Ubar0`` and the weak run from
    ``U0`` and compare them through the relative entropy and ``int|V(U - Ubar)|^2``."""
    _same_grid(U0, Ubar0)
    strong = evolve(system, Ubar0, dt, T, 0.0, stride, tol)
    weak = evolve(system, U0, dt, T, viscosity_weak, stride, tol)
    m = min(len(strong.states), len(weak.states))
    times = np.asarray(weak.times[:m])
    p = system.p
    sq = [np.sum((a.samples - b.samples) ** 2, axis=-1)
          for a, b in zip(weak.states[:m], strong.states[:m])]
    vdist = np.array([float(np.mean(s + s ** (p / 2))) for s in sq])
    relent = np.array([relative_entropy(system, a, b)
                       for a, b in zip(weak.states[:m], strong.states[:m])])
    drift = np.maximum(np.asarray(weak.drift[:m]), np.asarray(strong.drift[:m]))
    E = weak.entropy_integrals()[:m]
    C1, C2, ok = gronwall_fit(times, vdist)
    notes = ["weak run realized by vanishing viscosity; post-shock behaviour is reported, not certified"]
    blew = strong.blew_up or weak.blew_up
    if blew:
        notes.append("blow-up detected; report truncated")
    return StabilityReport(times, relent, vdist, drift, E[0] - E, C1, C2, ok, blew, p, notes)


def smooth_state(system: ConservationSystem, grid: Grid, amplitude: float = 0.1,
                 band: int = 2, seed: int = 0) -> PeriodicField:
    """Band-limited zero-mean initial state compatible with the involution.

    Constrained blocks are built as images of the potential (gradients for
    curl, symmetric gradients for curl curl); free blocks are random.
    """
    U = np.zeros(grid.shape + (system.N,))
    cols = list(system.constraint_map)
    free = [j for j in range(system.N) if j not in cols]
    if free:
        U[..., free] = random_field(grid, len(free), band, seed, 1.0).samples
    if cols:
        B = potential_of(_unembedded(system))
        phi = random_field(grid, B.N, band, seed + 1, 1.0)
        U[..., cols] = apply_operator(B, phi).samples
    U -= U.mean(axis=tuple(range(grid.d)))
    fld = PeriodicField(grid, U)
    return PeriodicField(grid, U * (amplitude / max(lp_norm(fld), np.finfo(float).tiny)))


def _unembedded(system: ConservationSystem) -> DiffOp:
    if system.name == "elasticity2d":
        return curl_op(2, 2)
    if system.name == "linelast2d":
        return curlcurl_op(2)
    raise SystemSpecError(f"no potential known for {system.name}")


__all__ = [
    "ConservationSystem", "make_system", "psystem1d", "elasticity2d", "linelast2d",
    "entropy_compat_check", "evolve", "Trajectory", "relative_entropy", "relative_flux",
    "dissipation_check", "weak_strong_monitor", "StabilityReport", "gronwall_fit",
    "smooth_state", "cfl_numbers", "SystemSpecError",
]
