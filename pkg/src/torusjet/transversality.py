"""Quantified transversality: margins, minimum angles, certified grid sweeps.

The pointwise margin of a section against a stratum with defining functions
f_1..f_p is the disjunctive scalarization

    margin(x) = max( |h(x)|, sigma_min(grad h(x)) ),

h = f o j^r s, where grad h is taken along g_k-orthonormal holomorphic
directions through the exact germ velocities (sigma_{j+1} contractions) plus
the conj(sigma_0) chain-rule term driven by the measured dbar of the section.
For strata of complex codimension p > n the gradient is never surjective, so
the margin degenerates to the distance |h| (avoidance semantics).

Grid sweeps certify a continuum lower bound with locally measured Lipschitz
constants: eta_cert = min_i (margin_i - L_i * rho) with rho the grid covering
radius and L_i the local slope at grid point i inflated by 25%.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import GridSpacingError, StratumDomainError
from .jets import HoloJet, holomorphic_jet, _sym_multiindices
from .sections import SectionField, eval_words, torus_grid
from .strata import Stratum

LIPSCHITZ_INFLATION = 1.25


def right_inverse_norm(A: np.ndarray) -> float:
    """1/sigma_min over the row space if A : C^n -> C^p is surjective, else inf."""
    A = np.atleast_2d(np.asarray(A, dtype=complex))
    p, n = A.shape
    if p > n:
        return float("inf")
    sv = np.linalg.svd(A, compute_uv=False)
    smin = sv[p - 1]
    return float(1.0 / smin) if smin > 0 else float("inf")


def min_angle(U: np.ndarray, V: np.ndarray, atol: float = 1e-7) -> float:
    """Minimum principal angle between the complements of U cap V in U and V.

    U, V are real subspaces given by basis rows (k, N).  Convention: if
    dim U + dim V < N the subspaces cannot be transverse and the angle is 0;
    if the complements of the intersection are empty (e.g. U = V) the angle
    is pi/2.  For transverse subspaces this is the standard minimum angle.
    """
    U = np.atleast_2d(np.asarray(U, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    N = U.shape[1]
    Qu = np.linalg.qr(U.T)[0][:, :np.linalg.matrix_rank(U)]
    Qv = np.linalg.qr(V.T)[0][:, :np.linalg.matrix_rank(V)]
    du, dv = Qu.shape[1], Qv.shape[1]
    if du + dv < N:
        return 0.0
    cos = np.clip(np.linalg.svd(Qu.T @ Qv, compute_uv=False), 0.0, 1.0)
    angles = np.arccos(cos)
    nontrivial = angles[angles > atol]
    if nontrivial.size == 0:
        return float(np.pi / 2)
    return float(np.min(nontrivial))


# ---------------------------------------------------------------------------
# pointwise margins
# ---------------------------------------------------------------------------

def margin_from_jet(st: Stratum, jet: HoloJet,
                    dbar0: Optional[np.ndarray] = None) -> tuple:
    """(margin, |h|, sigma_min, grad) for a jet carrying order st.r + 1 data.

    ``dbar0``: optional (m+1, n) array of the section's (0,1)-derivative in
    g_k-orthonormal coordinates; its conjugate feeds the conj(sigma_0) part
    of the chain rule.  The antiholomorphic parts of higher jet coordinates
    are part of the error budget, not the margin.
    """
    vals, jac, jbar = st.value_jac(jet)
    V = jet.germ_velocity(st.r)           # (L, n)
    grad = jac @ V
    if dbar0 is not None and np.any(jbar):
        grad = grad + jbar @ np.conj(dbar0)
    p, n = grad.shape
    hnorm = float(np.linalg.norm(vals))
    if p > n:
        smin = 0.0
    else:
        smin = float(np.linalg.svd(grad, compute_uv=False)[p - 1])
    return max(hnorm, smin), hnorm, smin, grad


def eta_at_point(section: SectionField, st: Stratum, x,
                 r: Optional[int] = None) -> float:
    """Transversality margin of the section against the stratum at x."""
    r = st.r if r is None else r
    jet = holomorphic_jet(section, x, r + 1)
    dbar0 = _dbar0(section, np.asarray(x, dtype=float))
    return margin_from_jet(st, jet, dbar0=dbar0)[0]


def _dbar0(section: SectionField, pts: np.ndarray) -> np.ndarray:
    """(0,1)-derivative of the section values, g_k-orthonormal coordinates.

    Shape (m+1, n) for a single point, (N, m+1, n) for a batch.
    """
    spec = section.spec
    n = spec.n
    words = [(("Db", a),) for a in range(n)]
    vals = eval_words(section, pts, words)
    scale = math.sqrt(2.0 / spec.c_k)
    arrs = [vals[w] * scale for w in words]
    out = np.stack(arrs, axis=-1)  # (N, m+1, n)
    return out[0] if np.asarray(pts).ndim == 1 else out


# ---------------------------------------------------------------------------
# batched jets over grids
# ---------------------------------------------------------------------------

def jets_batch(section: SectionField, pts: np.ndarray, r: int):
    """sigma arrays [(N, m+1) + (n,)*j for j <= r] for all points at once."""
    spec = section.spec
    n, c_k = spec.n, spec.c_k
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    words = []
    for j in range(r + 1):
        words.extend(tuple(("D", i) for i in idx) for idx in _sym_multiindices(n, j))
    vals = eval_words(section, pts, words)
    N = pts.shape[0]
    sigma = []
    for j in range(r + 1):
        t = np.zeros((N, spec.m_plus_1) + (n,) * j, dtype=complex)
        scale = (2.0 / c_k) ** (j / 2.0)
        for idx in _sym_multiindices(n, j):
            word = tuple(("D", i) for i in idx)
            v = vals[word] * scale
            import itertools as _it
            for perm in set(_it.permutations(idx)):
                t[(slice(None), slice(None)) + perm] = v
        sigma.append(t)
    return sigma


def jet_at_index(sigma_arrays, i: int, spec, x) -> HoloJet:
    return HoloJet(x=tuple(np.asarray(x, dtype=float)), spec=spec,
                   sigma=tuple(s[i] for s in sigma_arrays))


# ---------------------------------------------------------------------------
# certified grid sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransversalityReport:
    """Grid-measured and Lipschitz-certified margin for one stratum."""

    stratum_id: str
    eta_grid: float
    eta_cert: float
    spacing: float              # g_k units
    lipschitz: float            # local L at the binding grid point
    witness: tuple              # argmin grid point (torus coordinates)
    covering_radius: float
    exclusion_radii: tuple      # (stratum_id, radius) pairs applied
    n_points: int
    n_excluded: int
    defect_budget: float

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["witness"] = list(self.witness)
        d["exclusion_radii"] = [list(e) for e in self.exclusion_radii]
        return d


def margin_field(section: SectionField, st: Stratum, pts: np.ndarray) -> np.ndarray:
    """Pointwise margins over a batch of points."""
    spec = section.spec
    r = st.r
    sig = jets_batch(section, pts, r + 1)
    dbar = _dbar0(section, pts)
    N = pts.shape[0]
    out = np.empty(N)
    if st.has_equations:
        for i in range(N):
            jet = jet_at_index(sig, i, spec, pts[i])
            out[i] = margin_from_jet(st, jet, dbar0=dbar[i])[0]
    else:
        for i in range(N):
            jet = jet_at_index(sig, i, spec, pts[i])
            out[i] = st.distance(jet)
    return out


def distance_field(section: SectionField, st: Stratum, pts: np.ndarray) -> np.ndarray:
    spec = section.spec
    sig = jets_batch(section, pts, st.r)
    out = np.empty(pts.shape[0])
    for i in range(pts.shape[0]):
        out[i] = st.distance(jet_at_index(sig, i, spec, pts[i]))
    return out


def eta_global(section: SectionField, st: Stratum, spacing: float = 0.1,
               exclusions: Sequence = (), defect_budget: float = 0.0) -> TransversalityReport:
    """Certified global margin over a torus grid.

    ``exclusions`` is a sequence of (stratum, radius) pairs implementing the
    kappa*gamma boundary carve-out: grid points whose jet lies within radius
    of a preceding stratum are excluded from the minimum.  The certificate
    subtracts locally measured Lipschitz slopes (inflated 25%) times the grid
    covering radius, plus the jet integrability defect budget.
    """
    if spacing > 0.25 + 1e-12:
        raise GridSpacingError(f"spacing {spacing} too coarse; need <= 0.25")
    spec = section.spec
    ctx = spec.ctx
    pts, h, per_axis = torus_grid(ctx, spacing)
    margins = margin_field(section, st, pts)

    excluded = np.zeros(len(pts), dtype=bool)
    applied = []
    for st_b, radius in exclusions:
        if radius <= 0:
            applied.append((st_b.id, 0.0))
            continue
        db = distance_field(section, st_b, pts)
        excluded |= db < radius
        applied.append((st_b.id, float(radius)))
    if excluded.all():
        raise StratumDomainError("every grid point excluded by boundary carve-out")

    inc = ~excluded
    eta_grid = float(np.min(margins[inc]))

    dim = ctx.dim
    shape = (per_axis,) * dim
    # cap the field at 2 * eta_grid: margins blow up far from scale-normalized
    # strata and would poison slope estimates; capping preserves the minimum
    # and certifies the capped field, hence the minimum itself
    cap = max(2.0 * eta_grid, 1e-300)
    mg = np.minimum(margins, cap).reshape(shape)
    # local slope: max |forward difference| / h over the 2n axes at each point
    slope = np.zeros(shape)
    for ax in range(dim):
        d = np.abs(np.roll(mg, -1, axis=ax) - mg) / h
        slope = np.maximum(slope, np.maximum(d, np.roll(d, 1, axis=ax)))
    L_local = LIPSCHITZ_INFLATION * slope.reshape(-1) + defect_budget
    rho = h * math.sqrt(dim) / 2.0  # covering radius of the grid
    cert = np.minimum(margins, cap) - L_local * rho

    idx = int(np.arange(len(pts))[inc][np.argmin(cert[inc])])
    eta_cert = float(cert[idx])
    return TransversalityReport(
        stratum_id=st.id,
        eta_grid=eta_grid,
        eta_cert=eta_cert,
        spacing=float(h),
        lipschitz=float(L_local[idx]),
        witness=tuple(pts[idx]),
        covering_radius=float(rho),
        exclusion_radii=tuple(applied),
        n_points=len(pts),
        n_excluded=int(np.sum(excluded)),
        defect_budget=float(defect_budget),
    )


# ---------------------------------------------------------------------------
# minimum-angle form (consistency oracle for the local-equations margin)
# ---------------------------------------------------------------------------

def _realify_vec(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=complex).reshape(-1)
    out = np.empty(2 * v.size)
    out[0::2] = v.real
    out[1::2] = v.imag
    return out


def _real_kernel(jac: np.ndarray, jbar: np.ndarray, m1: int) -> np.ndarray:
    """Real basis rows of the kernel of dflat -> jac.dflat + jbar.conj(dflat_0)."""
    p, L = jac.shape
    R = np.zeros((2 * p, 2 * L))
    for a in range(L):
        col = jac[:, a]
        # d(vals) from real part of coordinate a
        dre = col + (jbar[:, a] if a < m1 else 0.0)
        dim_ = 1j * col - (1j * jbar[:, a] if a < m1 else 0.0)
        R[0::2, 2 * a] = dre.real
        R[1::2, 2 * a] = dre.imag
        R[0::2, 2 * a + 1] = dim_.real
        R[1::2, 2 * a + 1] = dim_.imag
    _, sv, Vh = np.linalg.svd(R)
    rank = int(np.sum(sv > 1e-10 * max(1.0, sv[0])))
    return Vh[rank:]


def margin_angle_form(st: Stratum, jet: HoloJet) -> float:
    """max(distance to stratum, minimum angle between graph and parallel
    distribution) in the realified total space; the Definition-3.3-style
    scalarization used to cross-check the local-equations margin."""
    vals, jac, jbar = st.value_jac(jet)
    V = jet.germ_velocity(st.r)        # (L, n) complex
    n = jet.spec.n
    L = V.shape[0]
    graph = []
    for l in range(n):
        fib = V[:, l] / math.sqrt(2.0)
        ex = np.zeros(2 * n)
        ex[2 * l] = 1.0
        graph.append(np.concatenate([ex, _realify_vec(fib)]))
        ey = np.zeros(2 * n)
        ey[2 * l + 1] = 1.0
        graph.append(np.concatenate([ey, _realify_vec(1j * fib)]))
    graph = np.stack(graph)

    ker = _real_kernel(jac, jbar, jet.spec.m_plus_1)
    base = np.concatenate([np.eye(2 * n), np.zeros((2 * n, 2 * L))], axis=1)
    fiber = np.concatenate([np.zeros((ker.shape[0], 2 * n)), ker], axis=1)
    D = np.concatenate([base, fiber], axis=0)

    angle = min_angle(graph, D)
    dist = float(np.linalg.norm(vals)) / max(st.wedge_floor, 1e-12)
    return max(dist, angle)
