"""CLI orchestration, topological counting oracles, and pencil extraction.

The counting oracles use only evaluation and closed-form derivatives, never
the transversality engine: zero counts come from the argument principle on a
cell decomposition (per-cell boundary windings of the phase field), critical
points of pencils from windings and Newton polishing of the Wronskian-type
section W_j = s_0 D_j s_1 - s_1 D_j s_0, which is holomorphic and has first
Chern number 2k on T^2 (matching the Riemann-Hurwitz count of a degree-k
torus map).  Any disagreement between oracle counts and engine claims fails
the run with exit code 3.
"""

from __future__ import annotations

import itertools
import json
import math
import os
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bundle import BundleSpec
from .errors import (ConfigError, OracleDisagreement, TorusjetError,
                     TransversalityFailure)
from .geometry import GeometryContext
from .jets import holomorphic_jet, projectivize_jet
from .sections import (GaussianAtom, SectionField, ah_norms, evaluate,
                       eval_words, section_from_text, section_to_text,
                       torus_grid)
from .strata import boardman_quasistratification
from .perturb import stratum_induction
from .transversality import eta_global


# ---------------------------------------------------------------------------
# exact plain derivatives of gauge representatives (for Newton)
# ---------------------------------------------------------------------------

def _newton(F_and_J, x0: np.ndarray, c_k: float, tol_gk: float = 1e-12,
            maxit: int = 50) -> Optional[np.ndarray]:
    """Damped real Newton on F : R^{2n} -> C^d; returns the root or None.

    The step is solved from the full real Jacobian; tolerance is on the step
    in g_k units.
    """
    x = np.asarray(x0, dtype=float).copy()
    sq = math.sqrt(c_k)
    for _ in range(maxit):
        F, J = F_and_J(x[None, :])
        Fv = np.concatenate([F.real, F.imag])
        if not np.all(np.isfinite(Fv)):
            return None
        try:
            step = np.linalg.lstsq(J, -Fv, rcond=None)[0]
        except np.linalg.LinAlgError:
            return None
        if np.linalg.norm(step) > 0.45:
            step *= 0.45 / np.linalg.norm(step)
        x = x + step
        if sq * np.linalg.norm(step) < tol_gk:
            return x % 1.0
    return None


def _section_F_and_J(section: SectionField, component: int = 0):
    """F = s_component as a gauge function, with its exact real Jacobian."""
    spec = section.spec
    n, c_k = spec.n, spec.c_k

    def fj(pts):
        words = [()] + [(("D", j),) for j in range(n)] + [(("Db", j),) for j in range(n)]
        vals = eval_words(section, pts, words)
        f = vals[()][:, component]
        zc = spec.ctx.to_complex(pts)
        rows = []
        for j in range(n):
            Dj = vals[(("D", j),)][:, component]
            Dbj = vals[(("Db", j),)][:, component]
            dz = Dj + (c_k / 4.0) * np.conj(zc[:, j]) * f
            dzb = Dbj - (c_k / 4.0) * zc[:, j] * f
            rows.append((dz + dzb, 1j * (dz - dzb)))  # d/dx_j, d/dy_j
        F = f
        J = np.empty((2, 2 * n))
        for j, (dx, dy) in enumerate(rows):
            J[0, 2 * j] = dx[0].real; J[0, 2 * j + 1] = dy[0].real
            J[1, 2 * j] = dx[0].imag; J[1, 2 * j + 1] = dy[0].imag
        return F, J

    return fj


def wronskian_values(section: SectionField, pts: np.ndarray) -> np.ndarray:
    """W_j = s_0 D_j s_1 - s_1 D_j s_0, shape (N, n); holomorphic of weight 2."""
    spec = section.spec
    n = spec.n
    words = [()] + [(("D", j),) for j in range(n)]
    vals = eval_words(section, pts, words)
    f = vals[()]
    out = np.empty((len(pts), n), dtype=complex)
    for j in range(n):
        Dj = vals[(("D", j),)]
        out[:, j] = f[:, 0] * Dj[:, 1] - f[:, 1] * Dj[:, 0]
    return out


def _wronskian_F_and_J(section: SectionField):
    """The system (W_1, ..., W_n) with exact plain real Jacobian."""
    spec = section.spec
    n, c_k = spec.n, spec.c_k

    def fj(pts):
        words = [()]
        words += [(("D", j),) for j in range(n)]
        words += [(("Db", j),) for j in range(n)]
        words += [(("D", i), ("D", j)) for i in range(n) for j in range(n)]
        words += [(("Db", i), ("D", j)) for i in range(n) for j in range(n)]
        vals = eval_words(section, pts, words)
        f = vals[()]
        zc = spec.ctx.to_complex(pts)
        N = len(pts)
        W = np.empty((N, n), dtype=complex)
        dW = np.empty((N, n, n), dtype=complex)     # d W_j / d z_i covariant
        dbW = np.empty((N, n, n), dtype=complex)    # Db_i W_j covariant
        D = {j: vals[(("D", j),)] for j in range(n)}
        Db = {j: vals[(("Db", j),)] for j in range(n)}
        DD = {(i, j): vals[(("D", i), ("D", j))] for i in range(n) for j in range(n)}
        DbD = {(i, j): vals[(("Db", i), ("D", j))] for i in range(n) for j in range(n)}

        def wedge(a, b):
            return a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]

        for j in range(n):
            W[:, j] = wedge(f, D[j])
            for i in range(n):
                dW[:, j, i] = wedge(D[i], D[j]) + wedge(f, DD[(i, j)])
                dbW[:, j, i] = wedge(Db[i], D[j]) + wedge(f, DbD[(i, j)])
        # plain derivatives: weight-2 connection terms
        dz = dW + (c_k / 2.0) * np.conj(zc)[:, None, :] * W[:, :, None]
        dzb = dbW - (c_k / 2.0) * zc[:, None, :] * W[:, :, None]
        Jc_x = dz + dzb                 # d/dx_i
        Jc_y = 1j * (dz - dzb)          # d/dy_i
        J = np.empty((2 * n, 2 * n))
        for j in range(n):
            for i in range(n):
                J[2 * j, 2 * i] = Jc_x[0, j, i].real
                J[2 * j, 2 * i + 1] = Jc_y[0, j, i].real
                J[2 * j + 1, 2 * i] = Jc_x[0, j, i].imag
                J[2 * j + 1, 2 * i + 1] = Jc_y[0, j, i].imag
        return W[0], J

    return fj


def _pair_F_and_J(section: SectionField):
    """The system (s_0, s_1) = 0 on T^4 (base points), exact real Jacobian."""
    spec = section.spec
    n, c_k = spec.n, spec.c_k

    def fj(pts):
        words = [()] + [(("D", j),) for j in range(n)] + [(("Db", j),) for j in range(n)]
        vals = eval_words(section, pts, words)
        f = vals[()]
        zc = spec.ctx.to_complex(pts)
        J = np.empty((4, 2 * n))
        for c in range(2):
            for j in range(n):
                dz = vals[(("D", j),)][:, c] + (c_k / 4.0) * np.conj(zc[:, j]) * f[:, c]
                dzb = vals[(("Db", j),)][:, c] - (c_k / 4.0) * zc[:, j] * f[:, c]
                dx = dz + dzb
                dy = 1j * (dz - dzb)
                J[2 * c, 2 * j] = dx[0].real; J[2 * c, 2 * j + 1] = dy[0].real
                J[2 * c + 1, 2 * j] = dx[0].imag; J[2 * c + 1, 2 * j + 1] = dy[0].imag
        return f[0], J

    return fj


# ---------------------------------------------------------------------------
# argument-principle zero counting (n = 1)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ZeroCount:
    total: int
    locations: tuple          # torus points
    degrees: tuple
    cells: int
    samples_per_edge: int


def _grid_windings(values_fn, region, cells, q):
    """Per-cell boundary windings of a complex field over a rectangle.

    The field is sampled on an unwrapped (M+1) x (M+1) grid: gauge
    representatives are smooth on R^2 but their phase is not lattice
    periodic (that monodromy is precisely the Chern number), so cells along
    the seam must be evaluated past the fundamental domain, never wrapped.
    Raises ValueError when a phase step exceeds pi/2 or the field comes too
    close to zero on an edge node.
    """
    (rx0, rx1), (ry0, ry1) = region
    M = cells * q
    ax = rx0 + (rx1 - rx0) * np.arange(M + 1) / M
    ay = ry0 + (ry1 - ry0) * np.arange(M + 1) / M
    gx, gy = np.meshgrid(ax, ay, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    vals = np.asarray(values_fn(pts)).reshape(M + 1, M + 1)
    # validity checks only along the cell-boundary paths actually traversed
    edge_vals = np.concatenate([np.abs(vals[::q, :]).ravel(),
                                np.abs(vals[:, ::q]).ravel()])
    if np.min(edge_vals) < 1e-10 * max(np.max(np.abs(vals)), 1e-30):
        raise ValueError("field vanishes on an edge node")
    ph = np.angle(vals)
    dx = np.angle(np.exp(1j * (ph[1:, :] - ph[:-1, :])))
    dy = np.angle(np.exp(1j * (ph[:, 1:] - ph[:, :-1])))
    if max(np.max(np.abs(dx[:, ::q])), np.max(np.abs(dy[::q, :]))) > 0.5 * np.pi:
        raise ValueError("phase step too large")
    wind = np.zeros((cells, cells))
    for a in range(cells):
        for b in range(cells):
            xs = slice(a * q, (a + 1) * q)
            ys = slice(b * q, (b + 1) * q)
            bottom = np.sum(dx[xs, b * q])
            right = np.sum(dy[(a + 1) * q, ys])
            top = -np.sum(dx[xs, (b + 1) * q])
            left = -np.sum(dy[a * q, ys])
            wind[a, b] = (bottom + right + top + left) / (2 * np.pi)
    return np.round(wind).astype(int)


def count_zeros(section: SectionField, component: int = 0,
                cells: Optional[int] = None, samples_per_edge: int = 8,
                max_refine: int = 4, region: Optional[tuple] = None) -> ZeroCount:
    """Signed zero count by the argument principle on a cell decomposition.

    Works on the full torus (default) or a rectangular sub-region given as
    ((x0, x1), (y0, y1)); for the torus the total equals the first Chern
    number k.  Every cell with nonzero winding is polished by Newton.
    """
    spec = section.spec
    if spec.n != 1:
        raise ValueError("argument-principle counting is the n = 1 oracle")
    if spec.m_plus_1 != 1 and component >= spec.m_plus_1:
        raise ValueError("component out of range")
    sub = _component_section(section, component)
    ctx = spec.ctx
    if cells is None:
        cells = max(6, int(math.ceil(2.2 * math.sqrt(ctx.c_k))))
    q = samples_per_edge

    def values(pts):
        return evaluate(sub, pts)[:, 0]

    for attempt in range(max_refine + 1):
        M = cells * q
        if region is None:
            # irrational-ish offset keeps cell edges away from zeros that sit
            # at symmetric positions (corners, half-lattice points)
            ox = (0.381966 + 0.11 * attempt) / cells % 1.0
            oy = (0.618034 + 0.083 * attempt) / cells % 1.0
            reg = ((ox, 1.0 + ox), (oy, 1.0 + oy))
        else:
            reg = region
        try:
            wind = _grid_windings(values, reg, cells, q)
        except ValueError:
            q *= 2
            continue
        total = int(np.sum(wind))
        locs, degs = [], []
        fj = _section_F_and_J(sub, 0)
        (rx0, rx1), (ry0, ry1) = reg
        for a, b in np.argwhere(wind != 0):
            x0 = np.array([rx0 + (a + 0.5) * (rx1 - rx0) / cells,
                           ry0 + (b + 0.5) * (ry1 - ry0) / cells])
            root = _newton(fj, x0, ctx.c_k)
            if root is None:
                q *= 2
                break
            locs.append(tuple(root))
            degs.append(int(wind[a, b]))
        else:
            locs, degs = _dedupe_roots(locs, degs, ctx.c_k)
            return ZeroCount(total=total, locations=tuple(locs),
                             degrees=tuple(degs), cells=cells, samples_per_edge=q)
    raise OracleDisagreement("zero on a cell edge after max refinement")


def _component_section(section: SectionField, component: int) -> SectionField:
    """Single-component view of a section as an m+1 = 1 section."""
    spec = section.spec
    if spec.m_plus_1 == 1:
        return section
    sub_spec = BundleSpec(spec.ctx, 1)
    atoms = tuple(GaussianAtom(center=a.center, component=0, I=a.I,
                               coefficient=a.coefficient, cutoff=a.cutoff)
                  for a in section.atoms if a.component == component)
    return SectionField(spec=sub_spec, atoms=atoms)


def pencil_member(section: SectionField, c: complex) -> SectionField:
    """s_0 - c * s_1 as a rank-1 section (members of the pencil)."""
    spec = section.spec
    if spec.m_plus_1 != 2:
        raise ValueError("pencil members need a rank-2 section")
    sub_spec = BundleSpec(spec.ctx, 1)
    atoms = []
    for a in section.atoms:
        coeff = a.coefficient if a.component == 0 else -c * a.coefficient
        atoms.append(GaussianAtom(center=a.center, component=0, I=a.I,
                                  coefficient=coeff, cutoff=a.cutoff))
    return SectionField(spec=sub_spec, atoms=tuple(atoms))


def _dedupe_roots(locs, degs, c_k, tol_gk: float = 1e-6):
    out, outd = [], []
    for loc, d in zip(locs, degs):
        dup = False
        for o in out:
            dd = np.asarray(loc) - np.asarray(o)
            dd -= np.round(dd)
            if math.sqrt(c_k) * np.linalg.norm(dd) < tol_gk:
                dup = True
                break
        if not dup:
            out.append(loc)
            outd.append(d)
    return out, outd


def _circle_degree(section: SectionField, center: np.ndarray, radius_g: float,
                   samples: int = 96) -> int:
    th = 2 * np.pi * np.arange(samples + 1) / samples
    pts = np.asarray(center)[None, :] + radius_g * np.stack(
        [np.cos(th), np.sin(th)], axis=-1)
    vals = evaluate(section, pts)[:, 0]
    ph = np.angle(vals)
    d = np.angle(np.exp(1j * np.diff(ph)))
    return int(round(float(np.sum(d) / (2 * np.pi))))


# ---------------------------------------------------------------------------
# Lefschetz pencil extraction
# ---------------------------------------------------------------------------

def fubini_study_distance(a: np.ndarray, b: np.ndarray) -> float:
    """FS distance between points of CP^m given by homogeneous vectors."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    c = abs(np.vdot(a, b)) / (na * nb)
    return float(np.arccos(min(1.0, c)))


@dataclass(frozen=True)
class PencilData:
    critical_points: tuple
    critical_values: tuple      # homogeneous (normalized) pairs
    hessian_margins: tuple      # |phi_2| at each critical point
    min_sigma0: float
    base_points: tuple
    n_critical_expected: Optional[int]
    min_value_separation: float

    def to_dict(self) -> dict:
        return {
            "critical_points": [list(p) for p in self.critical_points],
            "critical_values": [[v[0].real, v[0].imag, v[1].real, v[1].imag]
                                for v in self.critical_values],
            "hessian_margins": list(self.hessian_margins),
            "min_sigma0": self.min_sigma0,
            "base_points": [list(p) for p in self.base_points],
            "n_critical_expected": self.n_critical_expected,
            "min_value_separation": self.min_value_separation,
        }


def extract_pencil(section: SectionField, grid_spacing: float = 0.1) -> PencilData:
    """Base locus and nondegenerate critical data of the map [s_0 : s_1].

    Critical points are zeros of the weight-2 Wronskian section; on T^2 it
    has first Chern number 2k (the Riemann-Hurwitz count for a degree-k
    torus map), counted by the argument principle and polished by Newton.
    Hessian margins are |phi_2| of the projectivized jet at each point.
    """
    spec = section.spec
    if spec.m_plus_1 != 2:
        raise ValueError("pencil extraction needs a rank-2 section")
    ctx = spec.ctx
    pts, h, _ = torus_grid(ctx, grid_spacing)
    vals = evaluate(section, pts)
    min_s0 = float(np.min(np.linalg.norm(vals, axis=1)))

    if ctx.n == 1:
        crit, expected = _critical_points_t2(section)
        base = ()
    else:
        crit = _roots_from_seeds(section, _wronskian_F_and_J(section), pts, vals_fn=lambda p: wronskian_values(section, p))
        expected = None
        base = _base_points_t4(section, pts, vals)

    margins = []
    values = []
    for p in crit:
        jet = holomorphic_jet(section, np.asarray(p), 2)
        pj = projectivize_jet(jet)
        margins.append(float(np.linalg.norm(pj.phi[2])))
        v = jet.sigma[0] / np.linalg.norm(jet.sigma[0])
        values.append((complex(v[0]), complex(v[1])))
    sep = np.inf
    for i in range(len(values)):
        for j in range(i + 1, len(values)):
            sep = min(sep, fubini_study_distance(np.array(values[i]),
                                                 np.array(values[j])))
    return PencilData(critical_points=tuple(tuple(p) for p in crit),
                      critical_values=tuple(values),
                      hessian_margins=tuple(margins),
                      min_sigma0=min_s0,
                      base_points=tuple(tuple(p) for p in base),
                      n_critical_expected=expected,
                      min_value_separation=float(sep) if len(values) > 1 else float("inf"))


def _critical_points_t2(section: SectionField):
    """Zeros of the Wronskian on T^2 via windings + Newton; expect 2k."""
    spec = section.spec
    ctx = spec.ctx
    cells = max(8, int(math.ceil(2.8 * math.sqrt(ctx.c_k))))
    q = 8

    def values(pts):
        return wronskian_values(section, pts)[:, 0]

    for attempt in range(5):
        M = cells * q
        ox = (0.381966 + 0.11 * attempt) / cells % 1.0
        oy = (0.618034 + 0.083 * attempt) / cells % 1.0
        reg = ((ox, 1.0 + ox), (oy, 1.0 + oy))
        try:
            wind = _grid_windings(values, reg, cells, q)
        except ValueError:
            q *= 2
            continue
        fj = _wronskian_F_and_J(section)
        locs, degs = [], []
        ok = True
        for a, b in np.argwhere(wind != 0):
            x0 = np.array([ox + (a + 0.5) / cells, oy + (b + 0.5) / cells])
            root = _newton(fj, x0, ctx.c_k)
            if root is None:
                ok = False
                break
            locs.append(tuple(root))
            degs.append(int(wind[a, b]))
        if not ok:
            q *= 2
            continue
        locs, degs = _dedupe_roots(locs, degs, ctx.c_k)
        total = int(np.sum(wind))
        if len(locs) != total or any(d != 1 for d in degs):
            # a cell may hold two simple zeros; refine the decomposition
            cells = int(cells * 1.5)
            continue
        return locs, 2 * ctx.k
    raise OracleDisagreement("critical point count did not stabilize")


def _roots_from_seeds(section, fj, pts, vals_fn, thresh_quantile: float = 0.05):
    vals = vals_fn(pts)
    mag = np.linalg.norm(np.atleast_2d(vals.reshape(len(pts), -1)), axis=1)
    thresh = np.quantile(mag, thresh_quantile)
    seeds = pts[mag <= thresh]
    c_k = section.spec.c_k
    locs, degs = [], []
    for s in seeds:
        root = _newton(fj, s, c_k)
        if root is not None:
            locs.append(tuple(root))
            degs.append(1)
    locs, _ = _dedupe_roots(locs, degs, c_k)
    return locs


def _base_points_t4(section, pts, vals):
    mag = np.linalg.norm(vals, axis=1)
    thresh = max(np.quantile(mag, 0.02), 1e-6)
    seeds = pts[mag <= thresh]
    fj = _pair_F_and_J(section)
    c_k = section.spec.c_k
    locs = []
    for s in seeds:
        root = _newton(fj, s, c_k)
        if root is not None:
            locs.append(tuple(root))
    locs, _ = _dedupe_roots(locs, [1] * len(locs), c_k)
    return locs


# ---------------------------------------------------------------------------
# run configuration and records
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {
    "model.n": int,
    "model.k": None,        # int or comma list of ints
    "model.m": int,
    "jets.r": int,
    "perturb.delta": float,
    "perturb.nu": int,
    "perturb.net_spacing": float,
    "perturb.batch_distance": float,
    "grid.spacing": float,
    "seed": int,
    "output.dir": str,
}

_CONFIG_DEFAULTS = {
    "model.n": 1,
    "model.k": [4],
    "model.m": 0,
    "jets.r": 0,
    "perturb.delta": 0.5,
    "perturb.nu": 3,
    "perturb.net_spacing": 1.0,
    "perturb.batch_distance": 6.0,
    "grid.spacing": 0.07,
    "seed": 0,
    "output.dir": "runs",
}


@dataclass
class RunConfig:
    """Flat dotted-key configuration; unknown keys are rejected."""

    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = dict(_CONFIG_DEFAULTS)
        for key, raw in self.values.items():
            if key not in _CONFIG_KEYS:
                raise ConfigError(f"unknown configuration key: {key}")
            merged[key] = _parse_config_value(key, raw)
        # n = 2 grids at 0.1 g_k are astronomically large; keep spacing sane
        if merged["model.n"] == 2 and "grid.spacing" not in self.values:
            merged["grid.spacing"] = 0.25
        self.values = merged

    def __getitem__(self, key):
        return self.values[key]

    @property
    def k_list(self):
        k = self.values["model.k"]
        return list(k) if isinstance(k, (list, tuple)) else [int(k)]

    def echo_text(self) -> str:
        lines = []
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"


def _parse_config_value(key, raw):
    if key == "model.k":
        if isinstance(raw, (list, tuple)):
            return [int(x) for x in raw]
        if isinstance(raw, str) and "," in raw:
            return [int(x) for x in raw.split(",") if x.strip()]
        return [int(raw)]
    typ = _CONFIG_KEYS[key]
    try:
        return typ(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {key}: {raw!r}") from e


def parse_config_file(path: str) -> RunConfig:
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"malformed config line: {line!r}")
            key, val = [part.strip() for part in line.split("=", 1)]
            values[key] = val
    return RunConfig(values=values)


@dataclass
class RunRecord:
    """Everything one pipeline invocation measured, reproducible from the
    serialized section alone (measure-only mode re-derives every number)."""

    config: dict
    k: int
    ah_norms: dict
    strata: list                  # per-stratum report dicts (+ budget, remeasured)
    counts: dict
    timing: float
    section_text: str
    plans: list

    def to_dict(self) -> dict:
        return {
            "config": {key: (list(v) if isinstance(v, list) else v)
                       for key, v in self.config.items()},
            "k": self.k,
            "ah_norms": self.ah_norms,
            "strata": self.strata,
            "counts": self.counts,
            "timing": self.timing,
            "plans": self.plans,
        }


def _measure_counts(section: SectionField, config: RunConfig, reports: list) -> dict:
    """Counting oracles + oracle-independence checks; raises on disagreement."""
    n = config["model.n"]
    m = config["model.m"]
    counts: dict = {"zeros": [], "base": [], "critical": []}
    if m == 0:
        zc = count_zeros(section)
        if any(d != 1 for d in zc.degrees):
            raise OracleDisagreement(f"zero of local degree != +1: {zc.degrees}")
        # engine-located zeros: Newton from low-|s| margin-grid points,
        # independent seeding path; must agree with the winding oracle
        engine = _engine_zeros(section, config["grid.spacing"])
        if len(engine) != zc.total or len(zc.locations) != zc.total:
            raise OracleDisagreement(
                f"winding count {zc.total} vs engine count {len(engine)}")
        pairing = _match_points(zc.locations, engine, section.spec.c_k)
        if pairing > 1e-6:
            raise OracleDisagreement(
                f"zero locations disagree by {pairing:.2e} g_k units")
        counts["zeros"] = [{"location": list(p), "degree": d}
                           for p, d in zip(zc.locations, zc.degrees)]
        counts["zero_total"] = zc.total
        counts["zero_match_gk"] = pairing
    elif m == 1:
        pencil = extract_pencil(section, grid_spacing=config["grid.spacing"])
        counts["pencil"] = pencil.to_dict()
        counts["critical"] = [{"location": list(p), "margin": h}
                              for p, h in zip(pencil.critical_points,
                                              pencil.hessian_margins)]
        counts["base"] = [list(p) for p in pencil.base_points]
        if n == 1:
            if pencil.n_critical_expected is not None and \
               len(pencil.critical_points) != pencil.n_critical_expected:
                raise OracleDisagreement(
                    f"critical count {len(pencil.critical_points)} != "
                    f"Riemann-Hurwitz {pencil.n_critical_expected}")
    return counts


def _engine_zeros(section: SectionField, spacing: float):
    ctx = section.spec.ctx
    pts, _, _ = torus_grid(ctx, spacing)
    vals = evaluate(section, pts)
    mag = np.linalg.norm(vals, axis=1)
    thresh = max(np.quantile(mag, 0.03), 5e-3 * np.max(mag))
    seeds = pts[mag <= thresh]
    fj = _section_F_and_J(_component_section(section, 0))
    roots = []
    for s in seeds:
        root = _newton(fj, s, ctx.c_k)
        if root is not None:
            roots.append(tuple(root))
    roots, _ = _dedupe_roots(roots, [1] * len(roots), ctx.c_k)
    return roots


def _match_points(a, b, c_k) -> float:
    """Greedy pairing distance (g_k units); inf if counts differ."""
    if len(a) != len(b):
        return float("inf")
    b_left = [np.asarray(x) for x in b]
    worst = 0.0
    for p in a:
        d = []
        for x in b_left:
            dd = np.asarray(p) - x
            dd -= np.round(dd)
            d.append(math.sqrt(c_k) * np.linalg.norm(dd))
        i = int(np.argmin(d))
        worst = max(worst, d[i])
        b_left.pop(i)
    return worst


def run_pipeline(config: RunConfig, k: Optional[int] = None,
                 initial: Optional[SectionField] = None) -> RunRecord:
    """End-to-end run at a fixed k: geometry, stratum induction over the
    Boardman quasi-stratification, re-measurement, counting, record."""
    t0 = time.monotonic()
    if k is None:
        k = config.k_list[0]
    n = config["model.n"]
    m = config["model.m"]
    r = config["jets.r"]
    ctx = GeometryContext(n=n, k=k)
    spec = BundleSpec(ctx, m_plus_1=m + 1)
    qs = boardman_quasistratification(n, m, r, spec)
    section = initial if initial is not None else SectionField(spec=spec)
    rng = np.random.default_rng(config["seed"])
    ball_spacing = 0.15 if n == 1 else 0.3
    s_final, records = stratum_induction(
        section, qs, config["perturb.delta"], nu=config["perturb.nu"],
        net_spacing=config["perturb.net_spacing"],
        batch_distance=config["perturb.batch_distance"], rng=rng,
        measure_spacing=config["grid.spacing"], ball_spacing=ball_spacing)
    for rec in records:
        if rec.report.eta_cert <= 0:
            raise TransversalityFailure(
                f"stratum {rec.stratum_id}: eta_cert = {rec.report.eta_cert:.3g} <= 0 "
                f"(witness {np.round(rec.report.witness, 4)})")
    ah = ah_norms(s_final, r=min(r, 2), spacing=0.25)
    counts = _measure_counts(s_final, config, records)
    strata_dicts = [rec.to_dict() for rec in records]
    return RunRecord(
        config=dict(config.values), k=k,
        ah_norms={"nabla": list(ah.nabla), "nabla_dbar": list(ah.nabla_dbar),
                  "spacing": ah.spacing},
        strata=strata_dicts,
        counts=counts,
        timing=time.monotonic() - t0,
        section_text=section_to_text(s_final),
        plans=[rec.plan.to_dict() for rec in records],
    )


def measure_record(section: SectionField, config: RunConfig) -> dict:
    """Measure-only mode: recompute reports from a serialized section."""
    n = config["model.n"]
    m = config["model.m"]
    r = config["jets.r"]
    spec = section.spec
    qs = boardman_quasistratification(n, m, r, spec)
    out = {"strata": [], "counts": None}
    achieved = []
    for st in qs.strata:
        preds = [(s, g) for s, g in achieved if s.id in qs.predecessors(st.id)]
        rep = eta_global(section, st, spacing=config["grid.spacing"],
                         exclusions=[(b, 0.25 * g) for b, g in preds])
        achieved.append((st, rep.eta_grid))
        out["strata"].append(rep.to_dict())
    out["counts"] = _measure_counts(section, config, [])
    ah = ah_norms(section, r=min(r, 2), spacing=0.25)
    out["ah_norms"] = {"nabla": list(ah.nabla), "nabla_dbar": list(ah.nabla_dbar),
                       "spacing": ah.spacing}
    return out


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def emit_report(record: RunRecord, out_dir: str) -> dict:
    """Write the run directory: config echo, section, plans, report, tables.

    Returns the paths written.  All numeric JSON fields round-trip exactly
    (Python float repr).
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    cfg_path = os.path.join(out_dir, "config.txt")
    cfg = RunConfig(values={})
    cfg.values = dict(record.config)
    with open(cfg_path, "w") as fh:
        fh.write(cfg.echo_text())
    paths["config"] = cfg_path

    sec_path = os.path.join(out_dir, "section.txt")
    with open(sec_path, "w") as fh:
        fh.write(record.section_text)
    paths["section"] = sec_path

    report_path = os.path.join(out_dir, "report.json")
    with open(report_path, "w") as fh:
        json.dump(record.to_dict(), fh, indent=1)
    paths["report"] = report_path

    plan_path = os.path.join(out_dir, "plan.json")
    with open(plan_path, "w") as fh:
        json.dump(record.plans, fh, indent=1)
    paths["plan"] = plan_path

    margins_path = os.path.join(out_dir, "margins.csv")
    with open(margins_path, "w") as fh:
        fh.write("k,stratum,eta_grid,eta_cert,spacing,lipschitz\n")
        for sd in record.strata:
            rep = sd["report"]
            fh.write(f"{record.k},{rep['stratum_id']},{rep['eta_grid']!r},"
                     f"{rep['eta_cert']!r},{rep['spacing']!r},{rep['lipschitz']!r}\n")
    paths["margins"] = margins_path

    points_path = os.path.join(out_dir, "points.csv")
    dim = 2 * record.config["model.n"]
    with open(points_path, "w") as fh:
        fh.write(",".join(f"x{i+1}" for i in range(dim)) + ",type\n")
        for z in record.counts.get("zeros", []):
            fh.write(",".join(repr(c) for c in z["location"]) + ",zero\n")
        for c in record.counts.get("critical", []):
            fh.write(",".join(repr(x) for x in c["location"]) + ",critical\n")
        for b in record.counts.get("base", []):
            fh.write(",".join(repr(x) for x in b) + ",base\n")
    paths["points"] = points_path
    return paths


def load_report(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)
