"""Binary field files and per-frequency CSV export.

Layout: 8-byte little-endian unsigned header length, a UTF-8 JSON header
``{"d", "n", "N", "layout": "row-major", "kind": "samples"|"coeffs"}``, then
little-endian float64 data (coefficients interleave real and imaginary parts).
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .spectral import FieldError, Grid, PeriodicField, SpectralField

_LEN = struct.Struct("<Q")


def save_field(path, field) -> None:
    g = field.grid
    if isinstance(field, PeriodicField):
        kind, data = "samples", field.samples
    elif isinstance(field, SpectralField):
        c = field.coeffs
        kind, data = "coeffs", np.stack([c.real, c.imag], axis=-1)
    else:
        raise TypeError(f"cannot save {type(field).__name__}")
    header = json.dumps(
        {"d": g.d, "n": g.n, "N": field.N, "layout": "row-major", "kind": kind},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_LEN.pack(len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def load_field(path):
    raw = Path(path).read_bytes()
    (hlen,) = _LEN.unpack_from(raw, 0)
    header = json.loads(raw[_LEN.size:_LEN.size + hlen])
    if header.get("layout") != "row-major":
        raise FieldError(f"unsupported layout {header.get('layout')!r}")
    grid = Grid(int(header["d"]), int(header["n"]))
    N = int(header["N"])
    data = np.frombuffer(raw, dtype="<f8", offset=_LEN.size + hlen)
    if header["kind"] == "samples":
        return PeriodicField(grid, data.reshape(grid.shape + (N,)).astype(float))
    if header["kind"] == "coeffs":
        pairs = data.reshape(grid.shape + (N, 2))
        return SpectralField(grid, pairs[..., 0] + 1j * pairs[..., 1])
    raise FieldError(f"unknown field kind {header['kind']!r}")


def write_spectrum_csv(path, spec: SpectralField, min_magnitude: float = 0.0) -> None:
    """One row per frequency: integer frequency components and |c(xi)|."""
    g = spec.grid
    xi = g.frequencies().reshape(-1, g.d).astype(int)
    mag = np.linalg.norm(spec.coeffs.reshape(-1, spec.N), axis=-1)
    order = np.lexsort(xi.T[::-1])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"xi{i + 1}" for i in range(g.d)] + ["magnitude"])
        for idx in order:
            if mag[idx] >= min_magnitude:
                w.writerow(list(xi[idx]) + [repr(float(mag[idx]))])
