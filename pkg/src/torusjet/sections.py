"""Gaussian reference sections, monomial dressings, and AH-norm measurement.

A section of E_k = C^{m+1} (x) L_k is a finite sum of Gaussian atoms.  Each
atom is the magnetic translate to its center of

    a * (sqrt(c_k) w)^I * chi(t) * exp(-c_k |w|^2 / 4),   t = sqrt(c_k)|w|,

placed in one C^{m+1} component, periodized over the lattice via the
automorphy multipliers.  chi is a degree-7 smoothstep cutoff, identically 1
up to g_k-radius R1 and 0 beyond R2 (R1 = c_k^(1/6), R2 = 2 R1 by default);
atoms may also be uncut, in which case the lattice sum is truncated where the
Gaussian tail drops below 1e-16.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from . import bundle
from .bundle import BundleSpec, word_terms, ordered_word_gram
from .errors import GridSpacingError

# uncut atoms: exp(-t^2/4) * t^6 < 1e-17 beyond this g_k radius
UNCUT_SUPPORT_RADIUS = 14.0

_CHUNK = 4096


def default_cutoff_radii(c_k: float) -> tuple:
    r1 = c_k ** (1.0 / 6.0)
    return (r1, 2.0 * r1)


def smoothstep7(u: np.ndarray, order: int = 0) -> np.ndarray:
    """Degree-7 smoothstep S(u) = 35u^4 - 84u^5 + 70u^6 - 20u^7 on [0,1].

    C^3 at both ends; ``order`` selects the derivative (0..3).
    """
    u = np.asarray(u, dtype=float)
    if order == 0:
        return u ** 4 * (35.0 + u * (-84.0 + u * (70.0 - 20.0 * u)))
    if order == 1:
        return 140.0 * u ** 3 * (1.0 - u) ** 3
    if order == 2:
        return 420.0 * u ** 2 * (1.0 - u) ** 2 * (1.0 - 2.0 * u)
    if order == 3:
        return 840.0 * u * (1.0 - u) * (1.0 - 5.0 * u + 5.0 * u ** 2)
    raise ValueError("smoothstep derivatives available up to order 3")


@dataclass(frozen=True)
class GaussianAtom:
    """One dressed Gaussian atom.

    center: torus point, interleaved real coordinates (2n,).
    component: index in C^{m+1}.
    I: monomial multi-index over the n complex coordinates, |I| <= 2.
    coefficient: complex amplitude (value at the center when I = 0).
    cutoff: (R1, R2) in g_k units, or None for an uncut atom.
    """

    center: tuple
    component: int
    I: tuple
    coefficient: complex
    cutoff: Optional[tuple]

    def __post_init__(self):
        if sum(self.I) > 2:
            raise ValueError(f"monomial degree |I| <= 2 required, got {self.I}")
        if self.cutoff is not None and not self.cutoff[0] < self.cutoff[1]:
            raise ValueError("cutoff radii must satisfy R1 < R2")

    def support_radius_gk(self) -> float:
        return self.cutoff[1] if self.cutoff is not None else UNCUT_SUPPORT_RADIUS


@dataclass(frozen=True)
class SectionField:
    """Finite atom sum representing a section of E_k, lattice-periodized."""

    spec: BundleSpec
    atoms: tuple = ()

    @property
    def truncation_radius(self) -> float:
        """Lattice-sum radius in g units covering every atom's support."""
        if not self.atoms:
            return 0.0
        r = max(a.support_radius_gk() for a in self.atoms)
        return r / math.sqrt(self.spec.c_k)

    def with_atoms(self, new_atoms: Iterable[GaussianAtom]) -> "SectionField":
        return replace(self, atoms=self.atoms + tuple(new_atoms))

    def scaled(self, factor: complex) -> "SectionField":
        return replace(self, atoms=tuple(
            replace(a, coefficient=a.coefficient * factor) for a in self.atoms))

    def __add__(self, other: "SectionField") -> "SectionField":
        if other.spec != self.spec:
            raise ValueError("cannot add sections over different bundle specs")
        return self.with_atoms(other.atoms)


# ---------------------------------------------------------------------------
# evaluation engine
# ---------------------------------------------------------------------------

def _translate_window(zc: np.ndarray, center: np.ndarray, radius_g: float):
    """Integer lattice translates mu with |z - center - mu| possibly <= radius_g."""
    n = zc.shape[1]
    ranges = []
    for j in range(n):
        d = zc[:, j] - center[j]
        for part in (d.real, d.imag):
            lo = int(np.floor(part.min() - radius_g))
            hi = int(np.ceil(part.max() + radius_g))
            ranges.append(range(lo, hi + 1))
    mus = np.array(list(itertools.product(*ranges)), dtype=float)
    re = mus[:, 0::2]
    im = mus[:, 1::2]
    return re + 1j * im


def _chi_derivatives(t: np.ndarray, cutoff, max_d: int):
    """chi^(d)(t) for d = 0..max_d; chi == 1 (all derivs 0) for uncut atoms."""
    out = []
    if cutoff is None:
        out.append(np.ones_like(t))
        for _ in range(max_d):
            out.append(np.zeros_like(t))
        return out
    r1, r2 = cutoff
    width = r2 - r1
    u = np.clip((t - r1) / width, 0.0, 1.0)
    mid = (t > r1) & (t < r2)
    chi = np.where(t <= r1, 1.0, np.where(t >= r2, 0.0, 1.0 - smoothstep7(u)))
    out.append(chi)
    for d in range(1, max_d + 1):
        v = np.zeros_like(t)
        v[mid] = -smoothstep7(u[mid], d) / width ** d
        out.append(v)
    return out


def eval_words(section: SectionField, pts: np.ndarray, words: Sequence) -> dict:
    """Covariant word values of the section at real points ``pts``.

    Returns {word: (N, m+1) complex array} with word letters ("D", j) or
    ("Db", j) applied right-to-left.  Evaluation sums atoms over all lattice
    translates reaching the points; it is not canonicalized, so values at
    z + lam and z differ exactly by the automorphy multiplier.
    """
    spec = section.spec
    ctx = spec.ctx
    n, c_k = ctx.n, spec.c_k
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    zc_all = ctx.to_complex(pts)
    N = zc_all.shape[0]
    words = [tuple(w) for w in words]
    out = {w: np.zeros((N, spec.m_plus_1), dtype=complex) for w in words}

    chunk = _CHUNK if n == 1 else 512
    for start in range(0, N, chunk):
        zc = zc_all[start:start + chunk]
        for atom in section.atoms:
            _accumulate_atom(out, start, zc, atom, spec, words)
    return out


def _accumulate_atom(out, start, zc, atom: GaussianAtom, spec: BundleSpec, words):
    n, c_k = spec.n, spec.c_k
    k = spec.ctx.k
    p = spec.ctx.to_complex(np.asarray(atom.center, dtype=float))
    radius_g = atom.support_radius_gk() / math.sqrt(c_k)
    mus = _translate_window(zc, p, radius_g)          # (T, n)
    q = p[None, :] + mus                              # effective centers
    w = zc[:, None, :] - q[None, :, :]                # (N, T, n)
    r2 = np.sum(np.abs(w) ** 2, axis=-1)              # (N, T)
    t = np.sqrt(c_k * r2)

    support = t <= atom.support_radius_gk() + 1e-12
    keep = support.any(axis=0)
    if not keep.any():
        return
    mus, q, w, r2, t, support = mus[keep], q[keep], w[:, keep], r2[:, keep], t[:, keep], support[:, keep]

    # combined gauge x Gaussian exponent:
    # m_q(z) * G = exp((c_k/4)(qbar.z - q.zbar - |z-q|^2))
    expo = (c_k / 4.0) * (np.einsum("tj,nj->nt", np.conj(q), zc)
                          - np.einsum("tj,nj->nt", q, np.conj(zc)) - r2)
    base = np.exp(expo) * support
    # translate phase C_mu = exp(i pi k sum a_j b_j - i (c_k/2) omega0(p, mu))
    a, b = mus.real, mus.imag
    om = np.sum((np.conj(p)[None, :] * mus).imag, axis=1)
    C = np.exp(1j * (np.pi * k * np.sum(a * b, axis=1) - (c_k / 2.0) * om))
    base = base * (atom.coefficient * C)[None, :]

    max_d = 3 if atom.cutoff is not None else 0
    chis = _chi_derivatives(t, atom.cutoff, max_d)
    with np.errstate(divide="ignore"):
        s = np.where(t > 0, 1.0 / np.maximum(t, 1e-300), 0.0)

    # powers of w and wbar up to the maximum exponent appearing in any term
    pow_cache = {}

    def monom(a_idx, b_idx, c_pow):
        key = (a_idx, b_idx, c_pow)
        if key in pow_cache:
            return pow_cache[key]
        val = 1.0
        for j in range(n):
            if a_idx[j]:
                val = val * w[:, :, j] ** a_idx[j]
            if b_idx[j]:
                val = val * np.conj(w[:, :, j]) ** b_idx[j]
        if c_pow:
            val = val * s ** c_pow
        pow_cache[key] = val
        return val

    comp = atom.component
    cut = atom.cutoff is not None
    for word in words:
        terms = word_terms(word, tuple(atom.I), c_k, n)
        acc = None
        for (ta, tb, tc, td), coef in terms:
            if td > max_d:
                continue  # cutoff-derivative terms vanish for uncut atoms
            piece = coef * monom(ta, tb, tc)
            if cut:
                piece = piece * chis[td]
            acc = piece if acc is None else acc + piece
        if acc is None:
            continue
        out[word][start:start + zc.shape[0], comp] += np.sum(acc * base, axis=1)


def evaluate(section: SectionField, pts: np.ndarray) -> np.ndarray:
    """Section values in C^{m+1} at the given points (gauge representatives)."""
    pts = np.asarray(pts, dtype=float)
    single = pts.ndim == 1
    vals = eval_words(section, pts, [()])[()]
    return vals[0] if single else vals


# canonical words D^alpha Dbar^beta as concrete letter tuples
def _canonical_word(alpha: tuple, beta: tuple) -> tuple:
    return tuple(("D", j) for j in alpha) + tuple(("Db", j) for j in beta)


def _canonical_pairs(n: int, max_order: int):
    pairs = []
    for w in bundle.canonical_words(n, max_order):
        alpha = tuple(sorted(l[1] for l in w if l[0] == "D"))
        beta = tuple(sorted(l[1] for l in w if l[0] == "Db"))
        if (alpha, beta) not in pairs:
            pairs.append((alpha, beta))
    return pairs


@dataclass(frozen=True)
class AHNormReport:
    """Grid suprema of rescaled covariant norms (lower bounds of true sups).

    nabla[j] is sup |nabla^j s|_{g_k} for j = 0..r+1 and nabla_dbar[j] is
    sup |nabla^j dbar s|_{g_k} for j = 0..r, both real-frame Frobenius norms.
    """

    r: int
    spacing: float
    nabla: tuple
    nabla_dbar: tuple

    def c_norm(self) -> float:
        """C^{r+1} norm: max over derivative orders 0..r+1 of the grid sup."""
        return max(self.nabla)


def torus_grid(ctx, spacing_gk: float) -> tuple:
    """Periodic grid on the torus with g_k spacing <= spacing_gk.

    Returns (points (M, 2n), actual g_k spacing, points per axis).
    """
    sqck = math.sqrt(ctx.c_k)
    per_axis = max(2, int(math.ceil(sqck / spacing_gk)))
    axis = np.arange(per_axis) / per_axis
    grids = np.meshgrid(*([axis] * ctx.dim), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    return pts, sqck / per_axis, per_axis


def ah_norms(section: SectionField, r: int, spacing: float = 0.25,
             pts: Optional[np.ndarray] = None) -> AHNormReport:
    """Measure asymptotic-holomorphicity norms on a torus grid.

    Norm convention: |nabla^j s|^2 sums |nabla_{v_1}...nabla_{v_j} s|^2 over
    all ordered tuples from a g_k-orthonormal real frame, equivalently
    (2/c_k)^j times the sum over ordered covariant Wirtinger words.
    """
    if spacing > 0.25 + 1e-12:
        raise GridSpacingError(
            f"grid spacing {spacing} too coarse; need <= 0.25 g_k units")
    spec = section.spec
    n, c_k = spec.n, spec.c_k
    if pts is None:
        pts, spacing, _ = torus_grid(spec.ctx, spacing)
    pairs = _canonical_pairs(n, r + 2)
    words = [_canonical_word(a, b) for (a, b) in pairs]
    vals = eval_words(section, pts, words)
    index = {pair: i for i, pair in enumerate(pairs)}
    V = np.stack([vals[w] for w in words], axis=-1)  # (N, m+1, C)

    sup_nabla = []
    for j in range(r + 2):
        canon, G = bundle.ordered_word_gram(n, j, c_k)
        sel = [index[c] for c in canon]
        Vj = V[..., sel]
        sq = np.einsum("cd,mpc,mpd->mp", G, np.conj(Vj), Vj, optimize=True).real
        total = np.sum(np.maximum(sq, 0.0), axis=1)
        sup_nabla.append(float(np.sqrt(np.max(total)) * (2.0 / c_k) ** (j / 2.0)))

    sup_dbar = []
    for j in range(r + 1):
        canon, G = _dbar_word_gram(n, j, c_k)
        sel = [index[c] for c in canon]
        Vj = V[..., sel]
        sq = np.einsum("cd,mpc,mpd->mp", G, np.conj(Vj), Vj, optimize=True).real
        total = np.sum(np.maximum(sq, 0.0), axis=1)
        sup_dbar.append(float(np.sqrt(np.max(total)) * (2.0 / c_k) ** ((j + 1) / 2.0)))

    return AHNormReport(r=r, spacing=float(spacing), nabla=tuple(sup_nabla),
                        nabla_dbar=tuple(sup_dbar))


from functools import lru_cache as _lru_cache


@_lru_cache(maxsize=None)
def _dbar_word_gram(n: int, length: int, c_k: float):
    """Gram data for sum over ordered length-j words w and directions a of
    |(w o Db_a)(f)|^2, expressed over canonical words of order <= j+1."""
    basis = {}
    for w in bundle.canonical_words(n, length + 1):
        alpha = tuple(sorted(l[1] for l in w if l[0] == "D"))
        beta = tuple(sorted(l[1] for l in w if l[0] == "Db"))
        basis.setdefault((alpha, beta), len(basis))
    letters = [("D", j) for j in range(n)] + [("Db", j) for j in range(n)]

    def all_ordered(ln):
        if ln == 0:
            return [()]
        shorter = all_ordered(ln - 1)
        return [w + (l,) for w in shorter for l in letters]

    rows = []
    for w in all_ordered(length):
        for a in range(n):
            row = np.zeros(len(basis), dtype=complex)
            for al, be, c in bundle.normal_order(w + (("Db", a),), c_k):
                row[basis[(al, be)]] += c
            rows.append(row)
    A = np.array(rows)
    G = A.conj().T @ A
    canon = [None] * len(basis)
    for kk, i in basis.items():
        canon[i] = kk
    return tuple(canon), G


# ---------------------------------------------------------------------------
# reference and monomial sections
# ---------------------------------------------------------------------------

def make_reference_section(x, component: int, spec: BundleSpec,
                           cutoff: bool = True) -> SectionField:
    """Gaussian reference section concentrated at x: value 1 at its center,
    |value| = exp(-d_k(x,.)^2/4) out to the cutoff, kappa-floor e^(-1/4) on
    the unit g_k ball."""
    if not 0 <= component < spec.m_plus_1:
        raise ValueError(f"component {component} out of range")
    radii = default_cutoff_radii(spec.c_k) if cutoff else None
    atom = GaussianAtom(center=tuple(np.asarray(x, dtype=float)),
                        component=component, I=(0,) * spec.n,
                        coefficient=1.0 + 0.0j, cutoff=radii)
    return SectionField(spec=spec, atoms=(atom,))


@_lru_cache(maxsize=None)
def _monomial_norm(n: int, k: int, I: tuple, r: int, cutoff: bool) -> float:
    """Measured C^{r+1} norm of the unit-coefficient dressed atom (cached).

    Magnetic translations are exact isometries here, so the norm does not
    depend on the center.
    """
    from .geometry import GeometryContext
    spec = BundleSpec(GeometryContext(n=n, k=k), m_plus_1=1)
    center = (0.5,) * (2 * n)
    radii = default_cutoff_radii(spec.c_k) if cutoff else None
    atom = GaussianAtom(center=center, component=0, I=I,
                        coefficient=1.0 + 0.0j, cutoff=radii)
    rep = ah_norms(SectionField(spec=spec, atoms=(atom,)), r=r, spacing=0.24)
    return rep.c_norm()


def monomial_normalization(I: tuple, spec: BundleSpec, r: int = 2,
                           cutoff: bool = True) -> float:
    """1 / (measured C^{r+1} norm) of the dressed reference atom."""
    return 1.0 / _monomial_norm(spec.n, spec.ctx.k, tuple(I), r, cutoff)


def make_monomial_section(x, I, component: int, spec: BundleSpec, r: int = 2,
                          cutoff: bool = True) -> SectionField:
    """Monomially dressed reference section (sqrt(c_k) z)^I s_ref, rescaled to
    unit measured C^{r+1} norm so perturbation bases can divide by p."""
    I = tuple(I)
    if sum(I) > 2:
        raise ValueError(f"monomial degree |I| <= 2 required, got {I}")
    if not 0 <= component < spec.m_plus_1:
        raise ValueError(f"component {component} out of range")
    radii = default_cutoff_radii(spec.c_k) if cutoff else None
    coeff = monomial_normalization(I, spec, r=r, cutoff=cutoff)
    atom = GaussianAtom(center=tuple(np.asarray(x, dtype=float)),
                        component=component, I=I,
                        coefficient=complex(coeff), cutoff=radii)
    return SectionField(spec=spec, atoms=(atom,))


# ---------------------------------------------------------------------------
# covariant derivative tensors (re-exported through the bundle module)
# ---------------------------------------------------------------------------

def _real_letter_expansion(n: int, i: int):
    """Real frame direction -> [(coef, complex letter), ...]:
    d/dx_l = D_l + Db_l, d/dy_l = i(D_l - Db_l)."""
    l = i // 2
    if i % 2 == 0:
        return [(1.0, ("D", l)), (1.0, ("Db", l))]
    return [(1j, ("D", l)), (-1j, ("Db", l))]


def covariant_derivative(section: SectionField, x, order: int) -> np.ndarray:
    """Iterated covariant derivative as a complex tensor over real directions.

    Returns shape (m+1,) + (2n,)*order; entry (c, i1, ..., ij) is
    nabla_{e_{i1}} ... nabla_{e_{ij}} s at x divided by c_k^(order/2)
    (g_k-orthonormal frame).  Orders above 3 are not supported.
    """
    if order > 3:
        raise ValueError("covariant derivatives are capped at order 3")
    spec = section.spec
    n = spec.n
    dim = 2 * n
    real_words = list(itertools.product(range(dim), repeat=order))
    needed = set()
    expansions = {}
    for rw in real_words:
        combos = [(1.0 + 0.0j, ())]
        for i in rw:
            combos = [(c * c2, w + (l,))
                      for (c, w) in combos for (c2, l) in _real_letter_expansion(n, i)]
        expansions[rw] = combos
        needed.update(w for _, w in combos)
    vals = eval_words(section, np.asarray(x, dtype=float), sorted(needed))
    out = np.zeros((spec.m_plus_1,) + (dim,) * order, dtype=complex)
    scale = spec.c_k ** (-order / 2.0)
    for rw, combos in expansions.items():
        acc = sum(c * vals[w][0] for c, w in combos)
        out[(slice(None),) + rw] = acc * scale
    return out


def antiholomorphic_part(section: SectionField, x, order: int = 0) -> np.ndarray:
    """(0,1)-part of the connection applied after ``order`` covariant derivatives.

    Returns shape (m+1,) + (2n,)*order + (n,): the last index is the Dbar
    direction in the g_k-orthonormal (0,1) coframe.  For an uncut Gaussian
    atom this vanishes identically (gauge holomorphy).
    """
    if order > 2:
        raise ValueError("antiholomorphic parts are capped at order 2")
    spec = section.spec
    n = spec.n
    dim = 2 * n
    real_words = list(itertools.product(range(dim), repeat=order))
    needed = set()
    expansions = {}
    for rw in real_words:
        combos = [(1.0 + 0.0j, ())]
        for i in rw:
            combos = [(c * c2, w + (l,))
                      for (c, w) in combos for (c2, l) in _real_letter_expansion(n, i)]
        for a in range(n):
            expansions[rw + (a,)] = [(c, w + (("Db", a),)) for c, w in combos]
            needed.update(w for _, w in expansions[rw + (a,)])
    vals = eval_words(section, np.asarray(x, dtype=float), sorted(needed))
    out = np.zeros((spec.m_plus_1,) + (dim,) * order + (n,), dtype=complex)
    scale = spec.c_k ** (-order / 2.0) * math.sqrt(2.0 / spec.c_k)
    for key, combos in expansions.items():
        acc = sum(c * vals[w][0] for c, w in combos)
        out[(slice(None),) + key] = acc * scale
    return out


# ---------------------------------------------------------------------------
# plain-text serialization (bit-exact)
# ---------------------------------------------------------------------------

def section_to_text(section: SectionField) -> str:
    """Serialize to a line-based plain-text format with hex floats."""
    spec = section.spec
    lines = [
        "torusjet-section v1",
        f"n {spec.n}",
        f"k {spec.ctx.k}",
        f"m_plus_1 {spec.m_plus_1}",
        f"atoms {len(section.atoms)}",
    ]
    for a in section.atoms:
        cut = "none" if a.cutoff is None else " ".join(
            float(c).hex() for c in a.cutoff)
        fields = (
            [float(c).hex() for c in a.center]
            + [str(a.component)]
            + [str(i) for i in a.I]
            + [float(a.coefficient.real).hex(), float(a.coefficient.imag).hex()]
            + [cut]
        )
        lines.append("atom " + " ".join(fields))
    return "\n".join(lines) + "\n"


def section_from_text(text: str) -> SectionField:
    """Inverse of section_to_text; reconstructs the bundle spec from the header."""
    from .geometry import GeometryContext
    lines = [l for l in text.strip().splitlines() if l.strip()]
    if lines[0].strip() != "torusjet-section v1":
        raise ValueError("unrecognized section format")
    header = {}
    idx = 1
    while idx < len(lines) and not lines[idx].startswith("atom "):
        key, val = lines[idx].split()
        header[key] = int(val)
        idx += 1
    n, k, m1 = header["n"], header["k"], header["m_plus_1"]
    spec = BundleSpec(GeometryContext(n=n, k=k), m_plus_1=m1)
    atoms = []
    for line in lines[idx:]:
        tok = line.split()[1:]
        center = tuple(float.fromhex(t) for t in tok[:2 * n])
        pos = 2 * n
        comp = int(tok[pos]); pos += 1
        I = tuple(int(t) for t in tok[pos:pos + n]); pos += n
        re = float.fromhex(tok[pos]); im = float.fromhex(tok[pos + 1]); pos += 2
        if tok[pos] == "none":
            cut = None
        else:
            cut = (float.fromhex(tok[pos]), float.fromhex(tok[pos + 1]))
        atoms.append(GaussianAtom(center=center, component=comp, I=I,
                                  coefficient=complex(re, im), cutoff=cut))
    return SectionField(spec=spec, atoms=tuple(atoms))
