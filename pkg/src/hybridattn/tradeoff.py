"""Break-even map between Top-K-only and Top-K plus completion decoding.

Timing components are read from a file (microseconds per token). Top-K-only
load/compute times are sampled over k and interpolated piecewise-linearly;
outside the sampled range the nearest segment is extended and clamped at 0.
Post-processing scales load time by an I/O slowdown ``xi`` and the hybrid's
feature-recompute time by ``c``:

    t_topk(xi, k)    = t_cmp(k) + xi * t_load(k)
    t_hybrid(xi, c)  = (t_cmp - t_phi) + c * t_phi + xi * t_load
    speedup          = t_topk(xi, gamma * k_phi) / t_hybrid(xi, c)
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .errors import FormatError

RECOMPUTE_SCALES = (1.0, 0.5, 0.25, 0.1)
REFERENCE_GAMMA = 800 / 439  # retrieval ratio at matched quality seen on long-context sweeps


@dataclass(frozen=True)
class TimingComponents:
    k: np.ndarray
    t_load: np.ndarray
    t_cmp: np.ndarray
    k_phi: float
    hyb_load: float
    hyb_cmp: float
    hyb_phi: float

    def __post_init__(self):
        for name in ("k", "t_load", "t_cmp"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.k.size < 2:
            raise ValueError("need at least two Top-K timing samples")
        if not (self.k.shape == self.t_load.shape == self.t_cmp.shape):
            raise ValueError("Top-K sample arrays differ in length")
        if np.any(np.diff(self.k) <= 0):
            raise ValueError("Top-K samples must have strictly increasing k")
        if np.any(self.t_load < 0) or np.any(self.t_cmp < 0) or min(self.hyb_load, self.hyb_cmp, self.hyb_phi) < 0:
            raise ValueError("times must be non-negative")
        if self.hyb_phi > self.hyb_cmp:
            raise ValueError("feature-recompute time cannot exceed hybrid compute time")
        if not self.k_phi > 0:
            raise ValueError("k_phi must be positive")


@dataclass(frozen=True)
class MapGrid:
    xi: np.ndarray
    gamma: np.ndarray
    c: tuple[float, ...] = RECOMPUTE_SCALES

    def __post_init__(self):
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=np.float64))
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=np.float64))
        object.__setattr__(self, "c", tuple(float(v) for v in self.c))
        for name, arr in (("xi", self.xi), ("gamma", self.gamma)):
            if arr.size == 0 or np.any(arr <= 0) or np.any(np.diff(arr) <= 0):
                raise ValueError(f"{name} grid must be positive and strictly increasing")
        if not self.c or any(v <= 0 for v in self.c):
            raise ValueError("c values must be positive")


def default_grid(n_xi: int = 25, n_gamma: int = 31) -> MapGrid:
    return MapGrid(np.geomspace(1.0, 64.0, n_xi), np.linspace(1.0, 4.0, n_gamma), RECOMPUTE_SCALES)


def _interp_one(ks: np.ndarray, ts: np.ndarray, k) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    seg = np.clip(np.searchsorted(ks, k, side="right") - 1, 0, ks.size - 2)
    k0, k1 = ks[seg], ks[seg + 1]
    t0, t1 = ts[seg], ts[seg + 1]
    out = t0 + (k - k0) * (t1 - t0) / (k1 - k0)
    return np.maximum(out, 0.0)


def interp_topk_time(components: TimingComponents, k):
    """Interpolated ``(t_load, t_cmp)`` for Top-K-only at retrieval size ``k``."""
    load = _interp_one(components.k, components.t_load, k)
    cmp_ = _interp_one(components.k, components.t_cmp, k)
    if np.ndim(load) == 0:
        return float(load), float(cmp_)
    return load, cmp_


def hybrid_time(components: TimingComponents, xi, c):
    return (components.hyb_cmp - components.hyb_phi) + c * components.hyb_phi + xi * components.hyb_load


def topk_time(components: TimingComponents, xi, k):
    load, cmp_ = interp_topk_time(components, k)
    return cmp_ + xi * load


def speedup(components: TimingComponents, xi, gamma, c, k_phi: float | None = None):
    """Top-K-only time at ``gamma * k_phi`` over hybrid time; above 1 favors the hybrid."""
    k_phi = components.k_phi if k_phi is None else k_phi
    return topk_time(components, xi, np.asarray(gamma) * k_phi) / hybrid_time(components, xi, c)


@dataclass(frozen=True)
class Contour:
    c: float
    points: list[tuple[float, float]] = field(default_factory=list)  # (xi, gamma)


def break_even_contour(components: TimingComponents, grid: MapGrid, c: float,
                       k_phi: float | None = None, xtol: float = 1e-14) -> Contour:
    """Per ``xi`` column, every ``gamma`` where the speedup crosses 1.

    Crossings are bracketed on the grid and refined with Brent's method on
    the interpolated field; columns without a crossing contribute nothing.
    """
    pts = []
    for xi in grid.xi:
        f = lambda g: float(speedup(components, xi, g, c, k_phi)) - 1.0  # noqa: E731
        vals = [f(g) for g in grid.gamma]
        for i, v in enumerate(vals):
            if v == 0.0:
                pts.append((float(xi), float(grid.gamma[i])))
            elif i + 1 < len(vals) and v * vals[i + 1] < 0:
                root = brentq(f, grid.gamma[i], grid.gamma[i + 1], xtol=xtol, rtol=4 * np.finfo(float).eps)
                pts.append((float(xi), float(root)))
    return Contour(c, pts)


def speedup_field(components: TimingComponents, grid: MapGrid, k_phi: float | None = None) -> np.ndarray:
    """Array of shape ``(len(c), len(xi), len(gamma))``."""
    return np.stack([
        np.stack([speedup(components, xi, grid.gamma, c, k_phi) for xi in grid.xi])
        for c in grid.c
    ])


MAP_COLUMNS = ["xi", "gamma", "c", "speedup"]
CONTOUR_COLUMNS = ["c", "xi", "gamma", "speedup"]


@dataclass(frozen=True)
class MapOutput:
    map_csv: str
    contour_csv: str
    metadata: dict


def emit_map(components: TimingComponents, grid: MapGrid, k_phi: float | None = None) -> MapOutput:
    k_phi = components.k_phi if k_phi is None else k_phi
    field_ = speedup_field(components, grid, k_phi)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MAP_COLUMNS)
    for ci, c in enumerate(grid.c):
        for xi_i, xi in enumerate(grid.xi):
            for g_i, g in enumerate(grid.gamma):
                w.writerow([repr(float(xi)), repr(float(g)), repr(c), repr(float(field_[ci, xi_i, g_i]))])
    cbuf = io.StringIO()
    cw = csv.writer(cbuf, lineterminator="\n")
    cw.writerow(CONTOUR_COLUMNS)
    contours = {}
    for c in grid.c:
        contour = break_even_contour(components, grid, c, k_phi)
        contours[repr(c)] = len(contour.points)
        for xi, g in contour.points:
            cw.writerow([repr(c), repr(xi), repr(g), repr(float(speedup(components, xi, g, c, k_phi)))])
    meta = {
        "k_phi": k_phi,
        "reference_gamma": REFERENCE_GAMMA,
        "xi_range": [float(grid.xi[0]), float(grid.xi[-1])],
        "gamma_range": [float(grid.gamma[0]), float(grid.gamma[-1])],
        "c_values": list(grid.c),
        "contour_points": contours,
    }
    return MapOutput(buf.getvalue(), cbuf.getvalue(), meta)


def write_map(out: MapOutput, out_dir) -> None:
    out_dir = Path(out_dir)
    (out_dir / "tradeoff_map.csv").write_text(out.map_csv)
    (out_dir / "tradeoff_contours.csv").write_text(out.contour_csv)
    (out_dir / "tradeoff_meta.json").write_text(json.dumps(out.metadata, indent=2, sort_keys=True) + "\n")


# --- components file ---------------------------------------------------------


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def parse_components(text: str) -> TimingComponents:
    """Parse ``topk,k,t_load,t_cmp`` rows and one ``hybrid,kphi,t_load,t_cmp,t_phi`` row.

    Blank lines, ``#`` comments and header rows (non-numeric second field)
    are skipped.
    """
    topk, hybrid = [], []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        row = [c.strip() for c in row]
        if not row or not row[0] or row[0].startswith("#"):
            continue
        if len(row) > 1 and not _is_number(row[1]):
            continue
        kind = row[0].lower()
        try:
            vals = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise FormatError(f"line {lineno}: non-numeric field in {row}") from exc
        if kind == "topk":
            if len(vals) != 3:
                raise FormatError(f"line {lineno}: topk rows need k,t_load,t_cmp")
            topk.append(vals)
        elif kind == "hybrid":
            if len(vals) != 4:
                raise FormatError(f"line {lineno}: hybrid rows need kphi,t_load,t_cmp,t_phi")
            hybrid.append(vals)
        else:
            raise FormatError(f"line {lineno}: unknown section {row[0]!r}")
    if len(hybrid) != 1:
        raise FormatError(f"expected exactly one hybrid row, found {len(hybrid)}")
    if len(topk) < 2:
        raise FormatError("need at least two topk rows")
    arr = np.asarray(sorted(topk), dtype=np.float64)
    k_phi, h_load, h_cmp, h_phi = hybrid[0]
    try:
        return TimingComponents(arr[:, 0], arr[:, 1], arr[:, 2], k_phi, h_load, h_cmp, h_phi)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def load_components(path) -> TimingComponents:
    return parse_components(Path(path).read_text())


def format_components(components: TimingComponents) -> str:
    lines = ["topk,k,t_load,t_cmp"]
    for k, tl, tc in zip(components.k, components.t_load, components.t_cmp):
        lines.append(f"topk,{float(k)!r},{float(tl)!r},{float(tc)!r}")
    lines.append("hybrid,kphi,t_load,t_cmp,t_phi")
    lines.append(f"hybrid,{float(components.k_phi)!r},{components.hyb_load!r},{components.hyb_cmp!r},{components.hyb_phi!r}")
    return "\n".join(lines) + "\n"


def synthetic_components(prefill_len: int = 131072, load_per_token: float = 0.004,
                         cmp_base: float = 40.0, cmp_per_token: float = 0.002,
                         phi_share: float = 0.5, n_samples: int = 8) -> TimingComponents:
    """Linear-in-k timing model for tests and demos (not a measurement).

    ``k_phi`` is 1% of the prefill length. The hybrid loads ``k_phi`` tokens
    and spends ``phi_share`` of its extra compute on feature recompute.
    """
    k_phi = math.ceil(0.01 * prefill_len)
    ks = np.linspace(k_phi / 2, 8 * k_phi, n_samples)
    t_load = load_per_token * ks
    t_cmp = cmp_base + cmp_per_token * ks
    base_cmp = cmp_base + cmp_per_token * k_phi
    t_phi = phi_share * base_cmp
    return TimingComponents(ks, t_load, t_cmp, float(k_phi), load_per_token * k_phi, base_cmp + t_phi, t_phi)
