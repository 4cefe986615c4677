"""Quasi-stratification library: Z, the first-order Sigma_i, and Sigma_11.

Strata are cut by local defining functions of holomorphic jets.  In the
global unitary trivialization the defining functions are base-point
independent, so each stratum is one evaluator valid wherever its guard holds
(Sigma strata need sigma_0 != 0; Sigma_11 on a 2-fold additionally needs a
1-dimensional kernel).  Defining values of Z are linear in the jet; Sigma
values are normalized by powers of |sigma_0| so they factor through the
projectivized jet and are scale-invariant in magnitude.

Implemented smooth-equation regimes:
  Z                any (n, m, r): values sigma_0, p = m+1;
  Sigma_i  (a)     m = 1, i = n: values wedge(sigma_0, sigma_1(e_u))/|s0|^2;
  Sigma_i  (b)     n = m = 2, i = 1: det[sigma_0, s1 e1, s1 e2]/|s0|^3;
  Sigma_11         n = m = 1: (phi1, phi2) proxies, p = 2;
                   n = m = 2: (det phi1, cokernel component of phi2(u,u)), p = 2.
Other Sigma_i exist as rank-test strata (membership and singular-value
distance only, no equations).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np

from .bundle import BundleSpec
from .errors import StratumDomainError
from .jets import HoloJet, jet_from_flat, jet_length, projectivize_jet, _sym_multiindices

ON_STRATUM_TOL = 1e-8


@dataclass(frozen=True)
class Stratum:
    """One quasi-stratification piece.

    ``value_jac`` maps a HoloJet to (values (p,), d(values)/d(sigma) (p, L),
    d(values)/d(conj sigma_0) (p, m+1)); the last block carries the only
    antiholomorphic dependence our defining functions have (the |sigma_0|
    normalizations).  ``has_equations`` is False for rank-test-only strata,
    whose ``value_jac`` raises StratumDomainError.
    """

    id: str
    codim: int
    n: int
    m_plus_1: int
    r: int
    has_equations: bool
    value_jac: Callable[[HoloJet], tuple]
    membership: Callable[[HoloJet], bool]
    distance: Callable[[HoloJet], float]
    wedge_floor: float = 1.0
    uses_top_order: bool = False  # defining functions read sigma_r itself

    def values(self, jet: HoloJet) -> np.ndarray:
        return self.value_jac(jet)[0]

    def on_stratum(self, jet: HoloJet, tol: float = ON_STRATUM_TOL) -> bool:
        if self.has_equations:
            return bool(np.linalg.norm(self.values(jet)) <= tol)
        return self.membership(jet)


def _check_applicable(st_nm, jet: HoloJet):
    n, m1, r = st_nm
    if jet.spec.n != n or jet.spec.m_plus_1 != m1:
        raise StratumDomainError(
            f"stratum defined for (n, m+1) = ({n}, {m1}), jet has "
            f"({jet.spec.n}, {jet.spec.m_plus_1})")
    if jet.r < r:
        raise StratumDomainError(f"stratum needs jet order >= {r}, got {jet.r}")


def _flat_layout(n: int, m1: int, r: int):
    """[(j, idx, component)] in flattening order."""
    out = []
    for j in range(r + 1):
        for idx in _sym_multiindices(n, j):
            for c in range(m1):
                out.append((j, idx, c))
    return out


def _coord_pos(n: int, m1: int, r: int, j: int, idx: tuple, c: int) -> int:
    layout = _flat_layout(n, m1, r)
    return layout.index((j, tuple(sorted(idx)), c))


# ---------------------------------------------------------------------------
# Z
# ---------------------------------------------------------------------------

def stratum_Z(spec: BundleSpec, r: int) -> Stratum:
    """Jets of sections vanishing at the point: values = sigma_0, p = m+1."""
    n, m1 = spec.n, spec.m_plus_1
    L = jet_length(n, m1, r)

    def value_jac(jet: HoloJet):
        _check_applicable((n, m1, r), jet)
        vals = jet.sigma[0].copy()
        jac = np.zeros((m1, L), dtype=complex)
        for c in range(m1):
            jac[c, c] = 1.0  # sigma_0 block is first in the layout
        return vals, jac, np.zeros((m1, m1), dtype=complex)

    def membership(jet):
        return bool(np.linalg.norm(jet.sigma[0]) <= ON_STRATUM_TOL)

    def distance(jet):
        return float(np.linalg.norm(jet.sigma[0]))

    return Stratum(id="Z", codim=m1, n=n, m_plus_1=m1, r=r,
                   has_equations=True, value_jac=value_jac,
                   membership=membership, distance=distance, wedge_floor=1.0)


# ---------------------------------------------------------------------------
# Sigma_i
# ---------------------------------------------------------------------------

def _wedge2(a: np.ndarray, b: np.ndarray) -> complex:
    return a[0] * b[1] - a[1] * b[0]


def _sigma_i_guard(jet: HoloJet, floor: float = 1e-12):
    if np.linalg.norm(jet.sigma[0]) <= floor:
        raise StratumDomainError("Sigma strata are defined where sigma_0 != 0")


def _phi1_singular_values(jet: HoloJet) -> np.ndarray:
    pj = projectivize_jet(jet)
    n = jet.spec.n
    return np.linalg.svd(pj.phi[1].reshape(-1, n), compute_uv=False)


def stratum_Sigma_i(i: int, spec: BundleSpec, r: int) -> Stratum:
    """Kernel-rank stratum of the projectivized first derivative.

    Admissible range max(0, n - m) < i <= n.  Smooth defining functions in
    the two implemented regimes: (a) m = 1, i = n with p = n; (b) n = m = 2,
    i = 1 with p = 1.  Elsewhere only membership and singular-value distance.
    """
    n, m1 = spec.n, spec.m_plus_1
    m = m1 - 1
    if not (max(0, n - m) < i <= n):
        raise StratumDomainError(
            f"Sigma_{i} admissible range is max(0, n-m) < i <= n for (n, m) = ({n}, {m})")
    if r < 1:
        raise StratumDomainError("Sigma_i needs jets of order r >= 1")
    L = jet_length(n, m1, r)
    codim = i * (m - n + i)
    sid = f"S{i}"

    def membership(jet):
        _sigma_i_guard(jet)
        sv = _phi1_singular_values(jet)
        rank = int(np.sum(sv > ON_STRATUM_TOL))
        return (n - rank) == i

    def distance(jet):
        _sigma_i_guard(jet)
        sv = np.sort(_phi1_singular_values(jet))
        pad = np.concatenate([np.zeros(max(0, i - len(sv))), sv])
        return float(np.linalg.norm(pad[:i]))

    if m == 1 and i == n:
        # regime (a): phi_1 = 0, p = n; values wedge(s0, s1(e_u)) / |s0|^2
        def value_jac(jet: HoloJet):
            _check_applicable((n, m1, r), jet)
            _sigma_i_guard(jet)
            s0 = jet.sigma[0]
            s1 = jet.sigma[1]
            rho = float(np.sum(np.abs(s0) ** 2))
            vals = np.array([_wedge2(s0, s1[:, u]) for u in range(n)]) / rho
            jac = np.zeros((n, L), dtype=complex)
            jbar = np.zeros((n, m1), dtype=complex)
            layout = _flat_layout(n, m1, r)
            for row, u in enumerate(range(n)):
                g = _wedge2(s0, s1[:, u])
                for pos, (j, idx, c) in enumerate(layout):
                    if j == 0:
                        # d wedge / d s0_c = +/- s1 entry
                        dg = s1[1, u] if c == 0 else -s1[0, u]
                        jac[row, pos] = dg / rho
                    elif j == 1 and idx == (u,):
                        dg = -s0[1] if c == 0 else s0[0]
                        jac[row, pos] = dg / rho
                for c in range(m1):
                    jbar[row, c] = -g * s0[c] / rho ** 2
            return vals, jac, jbar

        return Stratum(id=sid, codim=codim, n=n, m_plus_1=m1, r=r,
                       has_equations=True, value_jac=value_jac,
                       membership=membership, distance=distance)

    if n == 2 and m == 2 and i == 1:
        # regime (b): det phi_1 = 0, p = 1; value det[s0, s1 e1, s1 e2]/|s0|^3
        def value_jac(jet: HoloJet):
            _check_applicable((n, m1, r), jet)
            _sigma_i_guard(jet)
            s0 = jet.sigma[0]
            s1 = jet.sigma[1]
            M = np.stack([s0, s1[:, 0], s1[:, 1]], axis=1)  # 3x3 columns
            rho2 = float(np.sum(np.abs(s0) ** 2))
            g = np.linalg.det(M)
            scale = rho2 ** 1.5
            vals = np.array([g / scale])
            cof = np.linalg.inv(M).T * g if abs(g) > 1e-300 else _cofactor(M)
            # d det / d M_{ab} = cofactor_{ab}
            jac = np.zeros((1, L), dtype=complex)
            layout = _flat_layout(n, m1, r)
            for pos, (j, idx, c) in enumerate(layout):
                if j == 0:
                    jac[0, pos] = cof[c, 0] / scale
                elif j == 1:
                    u = idx[0]
                    jac[0, pos] = cof[c, 1 + u] / scale
            jbar = np.array([[-1.5 * g * s0[c] / rho2 ** 2.5 for c in range(m1)]])
            return vals, jac, jbar

        return Stratum(id=sid, codim=codim, n=n, m_plus_1=m1, r=r,
                       has_equations=True, value_jac=value_jac,
                       membership=membership, distance=distance,
                       wedge_floor=1.0)

    # membership / singular-value distance only
    def value_jac(jet):
        raise StratumDomainError(
            f"{sid} has no smooth defining functions for (n, m) = ({n}, {m})")

    return Stratum(id=sid, codim=codim, n=n, m_plus_1=m1, r=r,
                   has_equations=False, value_jac=value_jac,
                   membership=membership, distance=distance)


def _cofactor(M: np.ndarray) -> np.ndarray:
    k = M.shape[0]
    out = np.zeros_like(M)
    for a in range(k):
        for b in range(k):
            minor = np.delete(np.delete(M, a, axis=0), b, axis=1)
            out[a, b] = (-1) ** (a + b) * np.linalg.det(minor)
    return out


# ---------------------------------------------------------------------------
# Sigma_11
# ---------------------------------------------------------------------------

def stratum_Sigma_11(spec: BundleSpec) -> Stratum:
    """Second-order Boardman stratum, implemented for n = m in {1, 2}, r = 2."""
    n, m1 = spec.n, spec.m_plus_1
    m = m1 - 1
    r = 2
    L = jet_length(n, m1, r)

    if n == 1 and m == 1:
        # {phi1 = 0, phi2 = 0}: values (w(s0,s1), w(s0,s2)) / |s0|^2, p = 2
        def value_jac(jet: HoloJet):
            _check_applicable((n, m1, r), jet)
            _sigma_i_guard(jet)
            s0 = jet.sigma[0]
            s1 = jet.sigma[1][:, 0]
            s2 = jet.sigma[2][:, 0, 0]
            rho = float(np.sum(np.abs(s0) ** 2))
            g = np.array([_wedge2(s0, s1), _wedge2(s0, s2)])
            vals = g / rho
            jac = np.zeros((2, L), dtype=complex)
            layout = _flat_layout(n, m1, r)
            for pos, (j, idx, c) in enumerate(layout):
                if j == 0:
                    jac[0, pos] = (s1[1] if c == 0 else -s1[0]) / rho
                    jac[1, pos] = (s2[1] if c == 0 else -s2[0]) / rho
                elif j == 1:
                    jac[0, pos] = (-s0[1] if c == 0 else s0[0]) / rho
                elif j == 2:
                    jac[1, pos] = (-s0[1] if c == 0 else s0[0]) / rho
            jbar = np.zeros((2, m1), dtype=complex)
            for row in range(2):
                for c in range(m1):
                    jbar[row, c] = -g[row] * s0[c] / rho ** 2
            return vals, jac, jbar

        def membership(jet):
            v, _, _ = value_jac(jet)
            return bool(np.linalg.norm(v) <= ON_STRATUM_TOL)

        def distance(jet):
            v, _, _ = value_jac(jet)
            return float(np.linalg.norm(v))

        return Stratum(id="S11", codim=2, n=n, m_plus_1=m1, r=r,
                       has_equations=True, value_jac=value_jac,
                       membership=membership, distance=distance,
                       uses_top_order=True)

    if n == 2 and m == 2:
        # {det phi1 = 0, cokernel component of phi2(u,u) = 0} with u the unit
        # kernel vector of phi1; p = 2.  Jacobian by Wirtinger finite
        # differences in flattened jet coordinates.
        det_stratum = None  # built lazily to avoid recursion

        def _values_only(jet: HoloJet):
            _sigma_i_guard(jet)
            pj = projectivize_jet(jet)
            phi1 = pj.phi[1]      # (3, 2), values in phi0-perp
            phi2 = pj.phi[2]      # (3, 2, 2)
            M = phi1.reshape(-1, 2)
            U, sv, Vh = np.linalg.svd(M)
            if sv[0] < 1e-10:
                raise StratumDomainError("S11 needs rank-1 phi1 (kernel gap)")
            # kernel direction: right singular vector of the smallest sv
            u = Vh[-1].conj()
            # cokernel within phi0-perp: orthogonal to im(phi1) and phi0
            im1 = U[:, 0]
            A = np.stack([pj.phi0.conj(), im1.conj()], axis=0)
            cand = np.linalg.svd(A)[2][-1].conj()
            v = cand - pj.phi0 * np.vdot(pj.phi0, cand) - im1 * np.vdot(im1, cand)
            nv = np.linalg.norm(v)
            if nv < 1e-10:
                raise StratumDomainError("S11 cokernel direction undefined here")
            v = v / nv
            s0 = jet.sigma[0]
            rho2 = float(np.sum(np.abs(s0) ** 2))
            det_val = np.linalg.det(np.stack([s0, jet.sigma[1][:, 0],
                                              jet.sigma[1][:, 1]], axis=1)) / rho2 ** 1.5
            quad = np.einsum("cuv,u,v->c", phi2, u, u)
            second = np.vdot(v, quad)
            return np.array([det_val, second])

        def value_jac(jet: HoloJet):
            _check_applicable((n, m1, r), jet)
            vals = _values_only(jet)
            jac, jbar = _fd_wirtinger_jac(_values_only, jet, r)
            return vals, jac, jbar

        def membership(jet):
            try:
                v = _values_only(jet)
            except StratumDomainError:
                return False
            return bool(np.linalg.norm(v) <= ON_STRATUM_TOL)

        def distance(jet):
            v = _values_only(jet)
            return float(np.linalg.norm(v))

        return Stratum(id="S11", codim=2, n=n, m_plus_1=m1, r=r,
                       has_equations=True, value_jac=value_jac,
                       membership=membership, distance=distance,
                       uses_top_order=True)

    raise StratumDomainError(f"Sigma_11 implemented for n = m in {{1, 2}}, got (n, m) = ({n}, {m})")


def _fd_wirtinger_jac(fn, jet: HoloJet, r: int, h: float = 1e-6):
    """Wirtinger Jacobians of fn(jet) in flattened jet coordinates.

    Returns (d fn / d sigma (p, L), d fn / d conj(sigma_0) (p, m+1)).
    """
    spec = jet.spec
    flat = jet.flatten(r)
    L = flat.size
    p = len(fn(jet))
    jac = np.zeros((p, L), dtype=complex)
    jbar_full = np.zeros((p, L), dtype=complex)

    def f_of(v):
        return fn(jet_from_flat(v, spec, r, x=jet.x))

    for a in range(L):
        e = np.zeros(L, dtype=complex)
        e[a] = h
        d_re = (f_of(flat + e) - f_of(flat - e)) / (2 * h)
        e[a] = 1j * h
        d_im = (f_of(flat + e) - f_of(flat - e)) / (2 * h)
        jac[:, a] = 0.5 * (d_re - 1j * d_im)
        jbar_full[:, a] = 0.5 * (d_re + 1j * d_im)
    return jac, jbar_full[:, :spec.m_plus_1]


# ---------------------------------------------------------------------------
# quasi-stratification assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuasiStratification:
    """Ordered stratum list; the list order extends the precedence relation."""

    strata: tuple
    precedence: tuple  # (a, b) pairs meaning a precedes b, by stratum id

    def __post_init__(self):
        ids = [s.id for s in self.strata]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate stratum ids")
        order = {sid: i for i, sid in enumerate(ids)}
        for a, b in self.precedence:
            if order[a] >= order[b]:
                raise ValueError(f"list order violates precedence {a} < {b}")

    def predecessors(self, sid: str):
        return [a for a, b in self.precedence if b == sid]

    def by_id(self, sid: str) -> Stratum:
        for s in self.strata:
            if s.id == sid:
                return s
        raise KeyError(sid)


def boardman_quasistratification(n: int, m: int, r: int, spec: BundleSpec) -> QuasiStratification:
    """Boardman-type quasi-stratification for the supported desk cases.

    Z first, then Sigma strata by decreasing codimension, so every stratum's
    boundary (or Theta-inaccessible attachment set) appears before it.
    """
    if (spec.n, spec.m_plus_1) != (n, m + 1):
        raise StratumDomainError("bundle spec does not match requested (n, m)")
    if r == 0:
        return QuasiStratification(strata=(stratum_Z(spec, 0),), precedence=())
    supported = {(1, 1), (2, 1), (2, 2)}
    if (n, m) not in supported:
        raise StratumDomainError(f"unsupported (n, m) = ({n}, {m})")

    Z = stratum_Z(spec, r)
    strata = [Z]
    prec = []
    if (n, m) == (1, 1):
        s1 = stratum_Sigma_i(1, spec, r)
        if r >= 2:
            s11 = stratum_Sigma_11(spec)
            strata += [s11, s1]
            prec += [("Z", "S11"), ("Z", "S1"), ("S11", "S1")]
        else:
            strata += [s1]
            prec += [("Z", "S1")]
    elif (n, m) == (2, 1):
        s2 = stratum_Sigma_i(2, spec, r)
        strata += [s2]
        prec += [("Z", "S2")]
    else:  # (2, 2)
        s2 = stratum_Sigma_i(2, spec, r)
        s1 = stratum_Sigma_i(1, spec, r)
        if r >= 2:
            s11 = stratum_Sigma_11(spec)
            strata += [s2, s11, s1]
            prec += [("Z", "S2"), ("Z", "S1"), ("S2", "S11"), ("S2", "S1"),
                     ("Z", "S11"), ("S11", "S1")]
        else:
            strata += [s2, s1]
            prec += [("Z", "S2"), ("Z", "S1"), ("S2", "S1")]
    return QuasiStratification(strata=tuple(strata), precedence=tuple(prec))


# ---------------------------------------------------------------------------
# Theta membership
# ---------------------------------------------------------------------------

def theta_membership(st: Stratum, jet: HoloJet, rng: Optional[np.random.Generator] = None,
                     tol: float = 1e-6) -> bool:
    """Whether some holomorphic (r+1)-jet lift crosses the stratum transversely.

    The germ velocity matrix M(u) = d(values)/d(sigma) @ (jet shifts along u)
    is evaluated for the zero lift and a few random choices of the free
    (r+1)-tensor slot; membership holds iff some lift reaches rank p.  When
    the defining functions do not read sigma_r, the lift cannot matter and a
    single evaluation decides (the paper's lift-independence observation).
    """
    if not st.on_stratum(jet):
        raise StratumDomainError("theta_membership requires an on-stratum jet")
    if st.codim > st.n:
        return False  # no germ can cross a stratum of codimension > n transversely
    if rng is None:
        rng = np.random.default_rng(20240901)
    spec = jet.spec
    n = spec.n
    r = st.r
    _, jac, _ = st.value_jac(jet)
    p = jac.shape[0]

    def rank_with_lift(top: np.ndarray) -> int:
        ext = _extend_jet(jet, top, r)
        V = ext.germ_velocity(r)      # (L, n)
        M = jac @ V                   # (p, n)
        sv = np.linalg.svd(M, compute_uv=False)
        return int(np.sum(sv > tol))

    shape = (spec.m_plus_1,) + (n,) * (r + 1)
    lifts = [np.zeros(shape, dtype=complex)]
    for _ in range(3):
        t = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        lifts.append(_symmetrize_top(t, n, r + 1))
    return any(rank_with_lift(t) == p for t in lifts)


def _symmetrize_top(t: np.ndarray, n: int, order: int) -> np.ndarray:
    out = np.zeros_like(t)
    perms = list(itertools.permutations(range(order)))
    for perm in perms:
        axes = (0,) + tuple(1 + p for p in perm)
        out += np.transpose(t, axes)
    return out / len(perms)


def _extend_jet(jet: HoloJet, top: np.ndarray, r: int) -> HoloJet:
    sigma = tuple(jet.sigma[: r + 1]) + (top,)
    return HoloJet(x=jet.x, spec=jet.spec, sigma=sigma,
                   antisym_defect=jet.antisym_defect)


def measure_wedge_floor(st: Stratum, rng: Optional[np.random.Generator] = None,
                        samples: int = 200) -> float:
    """Measured lower bound of |df_1 ^ ... ^ df_p| on random near-stratum jets.

    The wedge magnitude is sqrt(det(J J*)) for J the defining-function
    Jacobian; the measured floor calibrates the defining-value distance proxy.
    """
    if not st.has_equations:
        raise StratumDomainError(f"{st.id} has no defining functions")
    if rng is None:
        rng = np.random.default_rng(77)
    from .geometry import GeometryContext
    spec = BundleSpec(GeometryContext(n=st.n, k=1), m_plus_1=st.m_plus_1)
    L = jet_length(st.n, st.m_plus_1, st.r)
    floor = np.inf
    got = 0
    attempts = 0
    while got < samples and attempts < 20 * samples:
        attempts += 1
        flat = rng.standard_normal(L) + 1j * rng.standard_normal(L)
        jet = jet_from_flat(flat, spec, st.r)
        try:
            jet = _project_near(st, jet)
            _, jac, _ = st.value_jac(jet)
        except (StratumDomainError, ZeroDivisionError):
            continue
        gram = jac @ jac.conj().T
        w = math.sqrt(max(np.linalg.det(gram).real, 0.0))
        floor = min(floor, w)
        got += 1
    if got == 0:
        raise StratumDomainError(f"could not sample near-stratum jets for {st.id}")
    return float(floor)


def _project_near(st: Stratum, jet: HoloJet, steps: int = 8) -> HoloJet:
    """Gauss-Newton steps pulling a random jet close to the stratum."""
    r = st.r
    spec = jet.spec
    flat = jet.flatten(r)
    for _ in range(steps):
        j2 = jet_from_flat(flat, spec, r)
        vals, jac, _ = st.value_jac(j2)
        if np.linalg.norm(vals) < 1e-10:
            break
        step, *_ = np.linalg.lstsq(jac, -vals, rcond=None)
        flat = flat + step
    out = jet_from_flat(flat, spec, r)
    # keep |sigma_0| in a sane range for scale-normalized strata
    if np.linalg.norm(out.sigma[0]) < 0.3 and st.id != "Z":
        raise StratumDomainError("projection collapsed sigma_0")
    return out
