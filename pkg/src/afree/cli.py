"""Command-line front end: ``afree --spec run.json [--set key=value ...]``.

Exit status is 0 when the verification passes, 2 when it finds a property
violation and 1 on errors (invalid spec, numerical blow-up, bad input).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .convexity import (
    aqc_test,
    garding_adversary,
    garding_verify,
    lambda_convexity_check,
)
from .densities import make_density
from .dynamics import evolve, make_system, smooth_state, weak_strong_monitor
from .fieldio import save_field
from .opsym import (
    constant_rank_check,
    make_operator,
    potential_compat_check,
    potential_of,
    sphere_samples,
    symbol,
    wave_cone_sample,
)
from .projection import (
    decompose_sequence,
    primitive,
    primitive_bounds_report,
    project_afree,
)
from .spectral import (
    Grid,
    PeriodicField,
    afree_residual,
    apply_operator,
    lp_norm,
    random_afree_field,
    random_field,
)
from .statics import minimality_check

log = logging.getLogger("afree")

EXIT_PASS, EXIT_ERROR, EXIT_VIOLATION = 0, 1, 2


class SpecError(ValueError):
    pass


def load_schema() -> dict:
    return json.loads(resources.files("afree").joinpath("runspec.schema.json").read_text())


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path)


def validate_spec(spec: dict) -> None:
    """Raise :class:`SpecError` naming the offending key on schema violations."""
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(spec), key=lambda e: list(e.absolute_path))
    if not errors:
        return
    e = errors[0]
    where = _pointer(e.absolute_path)
    if list(e.absolute_path)[-2:] == ["grid", "n"] and e.validator == "not":
        raise SpecError(f"{where}: n must be odd")
    if e.validator == "additionalProperties":
        raise SpecError(f"{where or '/'}: {e.message}")
    raise SpecError(f"{where}: {e.message}")


def apply_override(spec: dict, assignment: str) -> None:
    """``a.b.c=value`` with ``value`` parsed as JSON, falling back to a string."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise SpecError(f"--set expects KEY=VALUE, got {assignment!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    *parents, last = key.split(".")
    node = spec
    for p in parents:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise SpecError(f"--set {key}: {p} is not an object")
    node[last] = value


def spec_hash(spec: dict) -> str:
    blob = json.dumps(spec, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

@dataclass
class Outcome:
    violated: bool
    result: dict
    rows: list = field(default_factory=list)
    fields: dict = field(default_factory=dict)
    summary: list = field(default_factory=list)


def _operator(spec):
    if "operator" not in spec:
        raise SpecError("/operator: required for this command")
    op = spec["operator"]
    # a bare tag takes its dimension from the grid
    if isinstance(op, str) and "grid" in spec:
        op = {"tag": op, "d": spec["grid"]["d"]}
    return make_operator(op)


def _grid(spec):
    if "grid" not in spec:
        raise SpecError("/grid: required for this command")
    return Grid(spec["grid"]["d"], spec["grid"]["n"])


def _density(spec):
    if "density" not in spec:
        raise SpecError("/density: required for this command")
    return make_density(spec["density"])


def _constant(grid, value, N):
    v = np.zeros(N) if value is None else np.asarray(value, dtype=float)
    if v.shape != (N,):
        raise SpecError(f"background must have {N} components")
    return PeriodicField(grid, np.broadcast_to(v, grid.shape + (N,)).copy())


def cmd_symbol(spec, P, tol, seed):
    op = _operator(spec)
    rank = constant_rank_check(op, P.get("n_samples", 1000), tol.get("rank", 1e-10), seed)
    out = {"operator": op.to_dict(), "rank": rank.to_dict()}
    violated = not rank.is_constant_rank
    if "xi" in P:
        s = symbol(op, P["xi"], tol.get("rank", 1e-10))
        out["sample"] = {"rank": s.rank, "singular_values": s.singular_values.tolist()}
    try:
        B = potential_of(op)
    except ValueError:
        B = None
    if B is not None:
        compat = potential_compat_check(op, B, P.get("n_samples", 1000), seed=seed)
        out["potential"] = {"name": B.name, **compat.to_dict()}
        violated |= not compat.compatible
    rows = [{"check": "constant_rank", "value": float(rank.is_constant_rank)}]
    if B is not None:
        rows.append({"check": "compat_residual", "value": compat.max_product_residual})
    return Outcome(violated, out, rows,
                   summary=[f"rank {rank.min_rank}..{rank.max_rank} over {rank.sample_count} samples"])


def cmd_wavecone(spec, P, tol, seed):
    op = _operator(spec)
    n = P.get("n_dirs", 64)
    xis = sphere_samples(op.d, n_random=n, seed=seed)
    rows = []
    for xi, V in wave_cone_sample(op, xis, tol.get("rank", 1e-10)):
        rows.append({**{f"xi{i + 1}": float(x) for i, x in enumerate(xi)},
                     "kernel_dim": int(V.shape[1])})
    out = {"n_dirs": len(rows), "kernel_dims": sorted({r["kernel_dim"] for r in rows})}
    if "density" in spec:
        W = _density(spec)
        lc = lambda_convexity_check(W.hess(np.zeros(W.N)), op, n, seed)
        out["lambda_convexity"] = lc.to_dict()
    return Outcome(False, out, rows, summary=[f"kernel dimensions {out['kernel_dims']}"])


def cmd_project(spec, P, tol, seed):
    op, g = _operator(spec), _grid(spec)
    rows = []
    for i in range(P.get("n_fields", 10)):
        v = random_field(g, op.N, P.get("band", 4), seed + i)
        Pv = project_afree(op, v)
        rows.append({"id": i, "afree_residual": afree_residual(op, Pv),
                     "idempotence": lp_norm(project_afree(op, Pv) - Pv) / lp_norm(Pv)})
    worst = max(max(r["afree_residual"], r["idempotence"]) for r in rows)
    t = tol.get("afree", 1e-9)
    return Outcome(worst > t, {"worst": worst, "tol": t}, rows,
                   summary=[f"worst projection defect {worst:.3e}"])


def cmd_primitive(spec, P, tol, seed):
    op, g = _operator(spec), _grid(spec)
    B = potential_of(op)
    p = P.get("p", 2.0)
    rows = []
    for i in range(P.get("n_fields", 10)):
        psi = random_afree_field(op, g, P.get("band", 4), seed + i)
        pair = primitive(B, psi, op)
        err = lp_norm(apply_operator(B, pair.phi) - psi) / lp_norm(psi)
        rows.append({"id": i, "roundtrip": err, **primitive_bounds_report(pair, p).to_dict()})
    worst = max(r["roundtrip"] for r in rows)
    t = tol.get("roundtrip", 1e-9)
    return Outcome(worst > t, {"worst_roundtrip": worst, "tol": t, "potential": B.name}, rows,
                   summary=[f"worst round-trip error {worst:.3e}"])


def cmd_decompose(spec, P, tol, seed):
    op, g = _operator(spec), _grid(spec)
    B = potential_of(op)
    bands = P.get("bands") or [min(1 + j, g.max_frequency) for j in range(P.get("n_fields", 6))]
    fields = [random_afree_field(op, g, b, seed + j) for j, b in enumerate(bands)]
    ks = P.get("k_schedule") or [float(2 ** j) for j in range(len(fields))]
    res = decompose_sequence(op, B, fields, ks, P.get("p", 2.0), tol=tol.get("afree", 1e-8))
    rows = [{"j": j, "additivity_residual": float(res.additivity_residual[j]),
             "tail_mass_max": float(res.tail_mass[j].max()),
             "measure_above_min_delta": float(res.measure_above[j][0])}
            for j in range(len(fields))]
    worst = float(res.additivity_residual.max())
    return Outcome(worst > 1e-10, {"worst_additivity": worst, "notes": res.notes}, rows,
                   summary=[f"{len(fields)} fields decomposed"])


def cmd_garding(spec, P, tol, seed):
    op, g, W = _operator(spec), _grid(spec), _density(spec)
    if P.get("background_mode") == "random":
        Ubar = random_afree_field(op, g, 2, seed + 999, P.get("amplitude", 0.5))
    else:
        Ubar = _constant(g, P.get("background"), W.N)
    amps = P.get("amplitudes", [0.01, 0.1, 1.0])
    tests = [random_afree_field(op, g, P.get("band", 4), seed + i, amps[i % len(amps)])
             for i in range(P.get("n_fields", 12))]
    rep = garding_verify(W, Ubar, op, tests)
    out = {k: v for k, v in rep.to_dict().items() if k != "rows"}
    violated = not rep.holds()
    if P.get("adversary", False):
        adv = garding_adversary(W, Ubar, op, rep.C0_fit, rep.C1_fit,
                                n_random=P.get("n_random", 4),
                                n_descent_steps=P.get("n_descent_steps", 100),
                                band=min(P.get("band", 4), 3), seed=seed + 7)
        out["adversary"] = adv.to_dict()
        violated |= adv.violated
    return Outcome(violated, out, rep.rows,
                   summary=[f"C0_fit={rep.C0_fit!r} C1_fit={rep.C1_fit!r}"])


def cmd_aqc(spec, P, tol, seed):
    op, g, W = _operator(spec), _grid(spec), _density(spec)
    lam = np.zeros(W.N) if "lambda" not in P else np.asarray(P["lambda"], dtype=float)
    rep = aqc_test(W, lam, op, g, n_random=P.get("n_random", 4),
                   n_descent_steps=P.get("n_descent_steps", 100), band=P.get("band", 3),
                   c0_probe=P.get("c0_probe", 0.0),
                   amplitudes=tuple(P.get("amplitudes", [0.1, 1.0])), seed=seed,
                   tol=tol.get("gap", 1e-8))
    fields = {"certificate": rep.certificate_field} if rep.violated else {}
    return Outcome(rep.violated, rep.to_dict(), [{"min_gap": rep.min_gap}], fields,
                   summary=[f"min gap {rep.min_gap:.6e}" + (" (certificate written)" if fields else "")])


class BlowUp(RuntimeError):
    pass


def cmd_dynamics(spec, P, tol, seed):
    g = _grid(spec)
    if "system" not in spec:
        raise SpecError("/system: required for this command")
    sysd = spec["system"]
    system = make_system(sysd["tag"], **sysd.get("params", {}))
    dt, T, stride = P.get("dt", 1e-3), P.get("T", 0.1), P.get("stride", 10)
    U0 = smooth_state(system, g, P.get("amplitude", 0.1), P.get("band", 2), seed)
    if P.get("mode", "evolve") == "evolve":
        tr = evolve(system, U0, dt, T, P.get("viscosity", 0.0), stride, seed=seed)
        if tr.blew_up:
            raise BlowUp(f"blow-up at t={tr.times[-1]!r}")
        rows = [{"t": t, "entropy": e, "drift": d}
                for t, e, d in zip(tr.times, tr.entropy_integrals(), tr.drift)]
        scale = max(lp_norm(s) for s in tr.states)
        worst = max(tr.drift) / max(scale, np.finfo(float).tiny)
        fields = {"final_state": tr.states[-1]}
        return Outcome(worst > tol.get("drift", 1e-8),
                       {"metadata": tr.metadata(), "max_relative_drift": worst}, rows, fields,
                       summary=[f"{len(tr.states)} states, max relative drift {worst:.3e}"])
    eps, band = P.get("perturbation", 0.01), P.get("band", 2)
    if system.involution is None:
        U = U0 + random_field(g, system.N, band, seed + 1, eps)
    else:
        U = U0 + smooth_state(system, g, eps, band, seed + 1)
    rep = weak_strong_monitor(system, U, U0, dt, T, P.get("viscosity_weak", 1e-3), stride)
    if rep.blew_up:
        raise BlowUp("blow-up in the monitored runs")
    rows = [{"t": t, "relent": r, "vdist": v, "drift": d, "bound_value": b}
            for t, r, v, d, b in zip(rep.times, rep.relative_entropy, rep.v_distance,
                                     rep.involution_drift, rep.bound_value)]
    return Outcome(not (rep.fit_valid and rep.holds()), rep.to_dict(), rows,
                   summary=[f"C1={rep.C1!r} C2={rep.C2!r}"])


def cmd_statics(spec, P, tol, seed):
    op, g, W = _operator(spec), _grid(spec), _density(spec)
    Ubar = _constant(g, P.get("background"), W.N)
    rep = minimality_check(W, Ubar, op, P.get("epsilon0"), P.get("n_samples", 20), seed,
                           P.get("band", 4), P.get("c0_probe", 1e-2))
    out = {k: v for k, v in rep.to_dict().items() if k != "rows"}
    return Outcome(not rep.passed, out, rep.rows,
                   summary=[f"C_fit={rep.C_fit!r}"] + rep.diagnostics)


COMMANDS = {
    "symbol": cmd_symbol, "wavecone": cmd_wavecone, "project": cmd_project,
    "primitive": cmd_primitive, "decompose": cmd_decompose, "garding": cmd_garding,
    "aqc": cmd_aqc, "dynamics": cmd_dynamics, "statics": cmd_statics,
}


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else repr(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows(path: Path, rows: list) -> None:
    cols: list = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_cell(r.get(c, "")) for c in cols])


def run(spec: dict, out_dir=None, quiet: bool = False) -> int:
    """Validate and execute a run spec; returns the exit status."""
    try:
        validate_spec(spec)
        out = Path(out_dir or spec.get("output", "afree-out"))
        out.mkdir(parents=True, exist_ok=True)
        seed = spec.get("seed", 0)
        outcome = COMMANDS[spec["command"]](spec, spec.get("params", {}),
                                            spec.get("tolerances", {}), seed)
    except (SpecError, ValueError, BlowUp, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR

    status = "violation" if outcome.violated else "pass"
    report = {
        "command": spec["command"],
        "status": status,
        "toolkit_version": __version__,
        "spec_sha256": spec_hash(spec),
        "spec": spec,
        "result": outcome.result,
    }
    (out / "report.json").write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n")
    write_rows(out / "rows.csv", outcome.rows)
    written = []
    if spec.get("write_fields", True):
        for name, fld in outcome.fields.items():
            save_field(out / f"{name}.fld", fld)
            written.append(f"{name}.fld")
    lines = [f"afree {__version__}  command={spec['command']}  status={status}",
             f"spec sha256 {report['spec_sha256']}", *outcome.summary]
    lines += [f"field file: {w}" for w in written]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    if not quiet:
        print("\n".join(lines))
    return EXIT_VIOLATION if outcome.violated else EXIT_PASS


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="afree", description=__doc__.splitlines()[0])
    ap.add_argument("--spec", required=True, help="run-spec JSON file")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override a spec field (dotted path, JSON value); repeatable")
    ap.add_argument("--out", help="output directory (overrides the run spec's output)")
    ap.add_argument("--seed", type=int, help="override the run spec's seed")
    ap.add_argument("--quiet", action="store_true")
    ap.add_argument("--version", action="version", version=f"afree {__version__}")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = json.loads(Path(args.spec).read_text())
        if not isinstance(spec, dict):
            raise SpecError("run spec must be a JSON object")
        for assignment in args.set:
            apply_override(spec, assignment)
        if args.seed is not None:
            spec["seed"] = args.seed
    except (OSError, json.JSONDecodeError, SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return run(spec, args.out, args.quiet)


if __name__ == "__main__":
    sys.exit(main())
