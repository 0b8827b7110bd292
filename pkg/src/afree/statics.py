"""Sufficiency checks for constrained local minimizers on the torus."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .convexity import aqc_test, cone_minimum, excess, subsample_values
from .densities import EnergyDensity
from .opsym import DiffOp
from .spectral import (
    FieldError,
    Grid,
    PeriodicField,
    afree_residual,
    band_mask,
    lp_norm,
    projector_grid,
    random_afree_field,
    sobolev_norm,
    v_energy,
    zero_mean,
)

MAX_ITERS = 10_000
RAYLEIGH_TOL = 1e-8


def _check(W: EnergyDensity, Ubar: PeriodicField, opA: DiffOp):
    if W.N != Ubar.N or opA.N != Ubar.N or opA.d != Ubar.grid.d:
        raise FieldError("dimension mismatch between density, background and operator")


def _projector(opA: DiffOp, grid: Grid, band: int | None):
    P = np.array(projector_grid(opA, grid))
    if band is not None:
        P *= band_mask(grid, band)[..., None, None]
    ax = grid.axes

    def apply(a):
        c = np.fft.fftn(a, axes=ax)
        return np.fft.ifftn(np.einsum("...ij,...j->...i", P, c), axes=ax).real

    return apply


def euler_lagrange_residual(W: EnergyDensity, Ubar: PeriodicField, opA: DiffOp,
                            tol: float = 1e-8) -> float:
    """L2 norm of the A-free zero-mean projection of ``x -> DW(Ubar(x))``.

    It vanishes exactly when ``int DW(Ubar) psi = 0`` for every discrete
    A-free zero-mean ``psi``.  ``Ubar`` may carry a constant mean.
    """
    _check(W, Ubar, opA)
    if afree_residual(opA, Ubar) > tol:
        raise FieldError("background is not A-free")
    P = _projector(opA, Ubar.grid, None)
    return lp_norm(PeriodicField(Ubar.grid, P(W.grad(Ubar.samples))))


@dataclass(frozen=True)
class RayleighResult:
    value: float
    interval: tuple
    iterations: int
    converged: bool
    field: PeriodicField | None = dataclasses.field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        return {"value": self.value, "interval": list(self.interval),
                "iterations": self.iterations, "converged": self.converged}


def second_variation(W: EnergyDensity, Ubar: PeriodicField, opA: DiffOp,
                     iters: int = MAX_ITERS, tol: float = RAYLEIGH_TOL,
                     band: int | None = None, seed: int = 0) -> RayleighResult:
    """Smallest eigenvalue of ``psi -> P(D^2W(Ubar) psi)`` on A-free zero-mean fields.

    Power iteration on ``s I - L`` with ``s = max_x ||D^2W(Ubar(x))||_2``.  The
    interval is ``rho +- ||L psi - rho psi|| / ||psi||``, which contains an
    eigenvalue of the self-adjoint ``L``; convergence means its half-width is
    below ``tol``.
    """
    _check(W, Ubar, opA)
    g = Ubar.grid
    H = W.hess(Ubar.samples)
    shift = float(np.linalg.norm(H.reshape(-1, W.N, W.N), ord=2, axis=(1, 2)).max())
    P = _projector(opA, g, band)

    def L(a):
        return P(np.einsum("...ij,...j->...i", H, a))

    rng = np.random.default_rng(seed)
    psi = P(rng.standard_normal(g.shape + (W.N,)))
    nrm = np.sqrt(np.sum(psi * psi))
    if nrm == 0:
        raise FieldError("no nonzero A-free field on this grid")
    psi /= nrm
    rho, r, it = math.nan, math.inf, 0
    for it in range(1, iters + 1):
        Lp = L(psi)
        rho = float(np.sum(Lp * psi))
        r = float(np.sqrt(np.sum((Lp - rho * psi) ** 2)))
        if r <= tol:
            break
        # re-project: rounding leaks into the complement, where s I - L is largest
        psi = P(shift * psi - Lp)
        psi /= np.sqrt(np.sum(psi * psi))
    return RayleighResult(rho, (rho - r, rho + r), it, r <= tol, PeriodicField(g, psi))


def second_variation_min(W: EnergyDensity, Ubar: PeriodicField, opA: DiffOp,
                         iters: int = MAX_ITERS, **kw) -> float:
    return second_variation(W, Ubar, opA, iters, **kw).value


def frozen_second_variation(W: EnergyDensity, lam, opA: DiffOp, grid: Grid,
                            band: int | None = None) -> float:
    """Frozen-coefficient value at a constant background ``lam``: the minimum
    over nonzero grid frequencies of ``min D^2W(lam) l.l`` over unit ``l`` in
    ``ker A(xi)``."""
    xis = grid.frequencies().reshape(-1, grid.d)
    keep = np.any(xis != 0, axis=1)
    if band is not None:
        keep &= np.max(np.abs(xis), axis=1) <= band
    return cone_minimum(W.hess(np.asarray(lam, dtype=float)), opA, xis[keep])


@dataclass
class MinimalityReport:
    el_residual: float
    second_variation_min: float
    second_variation_interval: tuple
    second_variation_converged: bool
    aqc_min_gap: float
    epsilon0_used: float
    rows: list
    C_fit: float
    excess_identity_residual: float
    diagnostics: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.diagnostics and self.C_fit > 0

    def to_dict(self) -> dict:
        return {
            "el_residual": self.el_residual,
            "second_variation_min": self.second_variation_min,
            "second_variation_interval": list(self.second_variation_interval),
            "second_variation_converged": self.second_variation_converged,
            "aqc_min_gap": self.aqc_min_gap,
            "epsilon0_used": self.epsilon0_used,
            "C_fit": self.C_fit,
            "excess_identity_residual": self.excess_identity_residual,
            "passed": self.passed,
            "diagnostics": list(self.diagnostics),
            "rows": self.rows,
        }

    def write_csv(self, path) -> None:
        cols = ["id", "w_minus1_p", "energy_gap", "v_distance"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r["id"]] + [repr(float(r[c])) for c in cols[1:]])


def default_epsilon0(Ubar: PeriodicField, p: float) -> float:
    fluct = zero_mean(Ubar)
    if lp_norm(fluct) <= 1e-12 * lp_norm(Ubar):
        return 0.01
    return 0.1 * sobolev_norm(fluct, -1, p) + 0.01


def minimality_check(W: EnergyDensity, Ubar: PeriodicField, opA: DiffOp,
                     epsilon0: float | None = None, n_samples: int = 20, seed: int = 0,
                     band: int = 4, c0_probe: float = 1e-2, aqc_budget: dict | None = None,
                     el_tol: float = 1e-8, sv_iters: int = MAX_ITERS) -> MinimalityReport:
    """Check the three sufficiency hypotheses and measure the energy gap.

    Perturbations are random A-free fields rescaled so that their ``W^{-1,p}``
    norms sweep ``(0, epsilon0]``; ``C_fit`` is the smallest ratio of energy
    gap to ``int |V(psi)|^2``.  Failed hypotheses are listed in
    ``diagnostics`` rather than raised.
    """
    _check(W, Ubar, opA)
    p = W.p
    g = Ubar.grid
    diagnostics = []
    el = euler_lagrange_residual(W, Ubar, opA)
    if el > el_tol:
        diagnostics.append(f"Euler-Lagrange residual {el:.3e} exceeds {el_tol:.0e}")
    sv = second_variation(W, Ubar, opA, iters=sv_iters, band=band, seed=seed)
    if not sv.converged:
        diagnostics.append(f"second variation not converged after {sv.iterations} iterations")
    if sv.value <= 0:
        diagnostics.append(f"second variation not positive ({sv.value:.3e})")
    budget = {"n_random": 2, "n_descent_steps": 30, "band": min(band, 3)}
    budget.update(aqc_budget or {})
    gap = math.inf
    for k, lam in enumerate(subsample_values(Ubar, 64)):
        rep = aqc_test(W, lam, opA, g, c0_probe=c0_probe, seed=seed + k, **budget)
        gap = min(gap, rep.min_gap)
    if gap < -1e-8:
        diagnostics.append(f"strong quasiconvexity probe failed (gap {gap:.3e})")

    eps0 = default_epsilon0(Ubar, p) if epsilon0 is None else float(epsilon0)
    WU = float(np.mean(W.value(Ubar.samples)))
    rows, ident = [], 0.0
    for i in range(n_samples):
        psi = random_afree_field(opA, g, band, seed=seed * 1000 + i)
        target = eps0 * (i + 1) / n_samples
        psi = psi * (target / sobolev_norm(psi, -1, p))
        vd = v_energy(psi, p)
        if vd == 0:
            continue
        egap = float(np.mean(W.value(Ubar.samples + psi.samples))) - WU
        exc = float(np.mean(excess(W, Ubar.samples, psi.samples)))
        ident = max(ident, abs(egap - exc))
        rows.append({"id": i, "w_minus1_p": sobolev_norm(psi, -1, p),
                     "energy_gap": egap, "v_distance": vd})
    C_fit = min(r["energy_gap"] / r["v_distance"] for r in rows) if rows else math.nan
    return MinimalityReport(el, sv.value, sv.interval, sv.converged, float(gap), eps0,
                            rows, float(C_fit), ident, diagnostics)


__all__ = [
    "euler_lagrange_residual", "second_variation", "second_variation_min",
    "frozen_second_variation", "minimality_check", "MinimalityReport", "RayleighResult",
    "default_epsilon0",
]
