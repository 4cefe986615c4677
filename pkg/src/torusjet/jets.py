"""Symmetric holomorphic r-jets, jet frames, and projectivization.

A holomorphic r-jet stores sigma_j = (2/c_k)^(j/2) D^(j) f as symmetric
j-linear forms on C^n with values in C^{m+1}, in g_k-orthonormal holomorphic
coordinates.  On the flat model the iterated (1,0)-covariant derivatives
commute exactly, so the symmetrization is trivial and the antisymmetric
defect is zero up to floating point; it is still measured and reported
because it feeds the certification error budget.

Jets are computed to order r+1 where needed: the (1,0)-derivative of the
component functions of j^r s along a g_k-unit direction u is exactly the
contraction sigma_{j+1}(u, ...), which is what margin computations use.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .bundle import BundleSpec
from .errors import FrameError
from .sections import SectionField, eval_words, make_monomial_section


def _sym_multiindices(n: int, j: int):
    """Nondecreasing index tuples of length j over range(n)."""
    return list(itertools.combinations_with_replacement(range(n), j))


def sym_dim(n: int, j: int) -> int:
    return len(_sym_multiindices(n, j))


def jet_length(n: int, m_plus_1: int, r: int) -> int:
    """Number of flattened complex jet coordinates."""
    return m_plus_1 * sum(sym_dim(n, j) for j in range(r + 1))


@dataclass(frozen=True)
class HoloJet:
    """Symmetric holomorphic r-jet at a base point.

    sigma[j] has shape (m+1,) + (n,)*j and is symmetric in the direction
    slots.  ``antisym_defect`` is the measured magnitude of the discarded
    antisymmetric second-derivative part.
    """

    x: tuple
    spec: BundleSpec
    sigma: tuple
    antisym_defect: float = 0.0

    @property
    def r(self) -> int:
        return len(self.sigma) - 1

    def flatten(self, r: Optional[int] = None) -> np.ndarray:
        """Complex vector of unique symmetric components up to order r."""
        r = self.r if r is None else r
        n = self.spec.n
        parts = []
        for j in range(r + 1):
            for idx in _sym_multiindices(n, j):
                parts.append(self.sigma[j][(slice(None),) + idx])
        return np.concatenate([np.atleast_1d(p) for p in parts], axis=0).reshape(-1)

    def germ_velocity(self, r: Optional[int] = None) -> np.ndarray:
        """(len, n) matrix: (1,0)-derivative of each flattened coordinate of
        j^r s along the g_k-orthonormal holomorphic directions.

        Requires the jet to carry order r+1 data; the derivative of the
        sigma_j component (c, idx) along u is sigma_{j+1}[c, (u,) + idx].
        """
        r = self.r - 1 if r is None else r
        if r + 1 > self.r:
            raise ValueError("germ velocity needs jet data one order deeper")
        n = self.spec.n
        rows = []
        for j in range(r + 1):
            for idx in _sym_multiindices(n, j):
                rows.append(np.stack(
                    [self.sigma[j + 1][(slice(None), u) + idx] for u in range(n)],
                    axis=-1))
        return np.concatenate(rows, axis=0).reshape(-1, n)


def holomorphic_jet(section: SectionField, x, r: int) -> HoloJet:
    """Holomorphic r-jet of a section: symmetrized (1,0)-covariant derivatives
    rescaled to g_k units.  r <= 2 for the jet proper; internally one more
    order is available via ``holomorphic_jet(..., r+1)`` for germ velocities.
    """
    if r > 3:
        raise ValueError("jets are computed at most to order 3 (r + 1 with r <= 2)")
    spec = section.spec
    n, c_k = spec.n, spec.c_k
    x = np.asarray(x, dtype=float)
    words = []
    for j in range(r + 1):
        words.extend(tuple(("D", i) for i in idx) for idx in _sym_multiindices(n, j))
    vals = eval_words(section, x, words)
    sigma = []
    for j in range(r + 1):
        t = np.zeros((spec.m_plus_1,) + (n,) * j, dtype=complex)
        scale = (2.0 / c_k) ** (j / 2.0)
        for idx in _sym_multiindices(n, j):
            word = tuple(("D", i) for i in idx)
            v = vals[word][0] * scale
            for perm in set(itertools.permutations(idx)):
                t[(slice(None),) + perm] = v
        sigma.append(t)
    # D-operators commute exactly on the flat torus; measure the defect anyway
    defect = 0.0
    if r >= 2 and n > 1:
        w12 = eval_words(section, x, [(("D", 0), ("D", 1)), (("D", 1), ("D", 0))])
        d = np.max(np.abs(w12[(("D", 0), ("D", 1))] - w12[(("D", 1), ("D", 0))]))
        defect = float(d * (2.0 / c_k))
    return HoloJet(x=tuple(x), spec=spec, sigma=tuple(sigma), antisym_defect=defect)


def jet_from_flat(flat: np.ndarray, spec: BundleSpec, r: int,
                  x=(0.0, 0.0)) -> HoloJet:
    """Rebuild a HoloJet from flattened unique components (test/synthetic use)."""
    n = spec.n
    flat = np.asarray(flat, dtype=complex).reshape(-1)
    sigma = []
    pos = 0
    for j in range(r + 1):
        t = np.zeros((spec.m_plus_1,) + (n,) * j, dtype=complex)
        for idx in _sym_multiindices(n, j):
            v = flat[pos:pos + spec.m_plus_1]
            pos += spec.m_plus_1
            for perm in set(itertools.permutations(idx)):
                t[(slice(None),) + perm] = v
        sigma.append(t)
    if pos != flat.size:
        raise ValueError("flattened jet has wrong length")
    return HoloJet(x=tuple(x), spec=spec, sigma=tuple(sigma))


# flattening orders components as (order j, sym index, component c)?  No:
# flatten() concatenates per (j, idx) blocks of length m+1; keep helpers here.

def flat_block_slices(spec: BundleSpec, r: int):
    """[(j, idx, slice), ...] describing the flattened layout."""
    n = spec.n
    out = []
    pos = 0
    for j in range(r + 1):
        for idx in _sym_multiindices(n, j):
            out.append((j, idx, slice(pos, pos + spec.m_plus_1)))
            pos += spec.m_plus_1
    return out


# ---------------------------------------------------------------------------
# jet frames from dressed reference sections
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JetFrame:
    """Dressed reference sections whose r-jets frame J^r E_k at the center.

    ``det_magnitude`` is the raw determinant of the frame matrix;
    ``conditioning`` is the determinant after row normalization, a scale-free
    uniform frame bound (the raw value shrinks with the honest C^{r+1}
    normalizations of the higher dressings).
    """

    x: tuple
    r: int
    spec: BundleSpec
    labels: tuple          # (component, I) per frame section
    sections: tuple        # SectionField per label
    matrix: np.ndarray     # rows = flattened jets of the frame sections
    det_magnitude: float
    conditioning: float

    def solve(self, target_flat: np.ndarray) -> np.ndarray:
        """Coefficients lambda with lambda @ matrix = target."""
        return np.linalg.solve(self.matrix.T, np.asarray(target_flat, dtype=complex))


FRAME_CONDITIONING_FLOOR = 0.1


def jet_frame(x, spec: BundleSpec, r: int,
              conditioning_floor: float = FRAME_CONDITIONING_FLOOR) -> JetFrame:
    """Frame of J^r E_k at x from monomially dressed reference sections.

    The frame matrix is triangular-dominant in monomial order (dressings of
    degree d contribute first at jet order d); its row-normalized determinant
    must stay above the uniform conditioning floor.
    """
    if r > 2:
        raise ValueError("jet frames are capped at r = 2")
    n = spec.n
    labels = []
    secs = []
    for j in range(r + 1):
        for idx in _sym_multiindices(n, j):
            I = tuple(idx.count(i) for i in range(n))
            for c in range(spec.m_plus_1):
                labels.append((c, I))
                secs.append(make_monomial_section(x, I, c, spec, r=r))
    rows = [holomorphic_jet(s, x, r).flatten() for s in secs]
    M = np.stack(rows)
    det = abs(np.linalg.det(M))
    norms = np.linalg.norm(M, axis=1)
    cond = abs(np.linalg.det(M / norms[:, None]))
    if cond < conditioning_floor:
        raise FrameError(
            f"jet frame conditioning {cond:.3g} below floor {conditioning_floor}")
    return JetFrame(x=tuple(np.asarray(x, dtype=float)), r=r, spec=spec,
                    labels=tuple(labels), sections=tuple(secs),
                    matrix=M, det_magnitude=float(det), conditioning=float(cond))


# ---------------------------------------------------------------------------
# projectivization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProjJet:
    """Jet of the induced CP^m-valued map at a point where sigma_0 != 0.

    phi0 is a unit-norm homogeneous representative with its largest-magnitude
    component rotated to the positive real axis (canonical phase); phi[j] for
    j >= 1 takes values in the Euclidean orthogonal complement of phi0.
    """

    phi0: np.ndarray
    phi: tuple  # phi[j] shape (m+1,) + (n,)*j, j >= 1 entries; phi[0] is phi0

    @property
    def r(self) -> int:
        return len(self.phi) - 1

    def kernel_dim(self, tol: float = 1e-8) -> int:
        """dim ker phi_1 as a map C^n -> T_{phi0} CP^m."""
        n = self.phi[1].shape[-1]
        M = self.phi[1].reshape(-1, n)
        sv = np.linalg.svd(M, compute_uv=False)
        rank = int(np.sum(sv > tol))
        return n - rank


def projectivize_jet(jet: HoloJet) -> ProjJet:
    """Push the jet through C^{m+1} \\ {0} -> CP^m (chain rule to order 2).

    With shat = s / <s, phi0> the affine-chart representative, phi_j is the
    orthogonal projection of the j-th derivative of shat at the base point:
    phi1 = P(sigma1)/|sigma0| and
    phi2(u,v) = [P(sigma2(u,v)) - a(u) phi1(v) - a(v) phi1(u)] / |sigma0|
    with a(u) = <sigma1(u), phi0> / |sigma0|.  Scale-invariant after the
    canonical phase normalization.
    """
    sigma0 = jet.sigma[0]
    norm = np.linalg.norm(sigma0)
    if norm == 0:
        raise ZeroDivisionError("projectivization undefined on the zero stratum")
    phi0 = sigma0 / norm
    # canonical phase: largest component real positive
    i0 = int(np.argmax(np.abs(phi0)))
    phase = phi0[i0] / abs(phi0[i0])
    phi0 = phi0 / phase

    def project(t):
        inner = np.tensordot(np.conj(phi0), t, axes=(0, 0))
        return t - phi0.reshape((-1,) + (1,) * (t.ndim - 1)) * inner

    phis = [phi0]
    if jet.r >= 1:
        sigma1 = jet.sigma[1] / phase
        phi1 = project(sigma1) / norm
        phis.append(phi1)
    if jet.r >= 2:
        sigma2 = jet.sigma[2] / phase
        a = np.tensordot(np.conj(phi0), sigma1, axes=(0, 0)) / norm  # (n,)
        corr = (a[None, :, None] * phi1[:, None, :]
                + a[None, None, :] * phi1[:, :, None])
        phi2 = (project(sigma2) - corr * norm) / norm
        phis.append(phi2)
    return ProjJet(phi0=phi0, phi=tuple(phis))
