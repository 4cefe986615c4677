"""Flat model tori and the two constructive geometric procedures.

Points of the torus T^{2n} = R^{2n}/Z^{2n} are row vectors in the interleaved
coordinate order (x_1, y_1, ..., x_n, y_n), so z_j = x_j + i*y_j identifies
R^{2n} with C^n.  The standard symplectic form is sum dx_j ^ dy_j, the
standard complex structure sends d/dx_j to d/dy_j, and the flat metric is
Euclidean.  The ampleness level k rescales the metric by c_k = 2*pi*k.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ChartDomainError, DegenerateFormError, TamingError

TWO_PI = 2.0 * np.pi


def standard_omega_matrix(n: int) -> np.ndarray:
    """Matrix of omega0 = sum dx_j ^ dy_j: omega0(u, v) = u @ M @ v."""
    block = np.array([[0.0, 1.0], [-1.0, 0.0]])
    out = np.zeros((2 * n, 2 * n))
    for j in range(n):
        out[2 * j:2 * j + 2, 2 * j:2 * j + 2] = block
    return out


def standard_J_matrix(n: int) -> np.ndarray:
    """Matrix of J0 (multiplication by i): J0 @ (d/dx_j) = d/dy_j."""
    block = np.array([[0.0, -1.0], [1.0, 0.0]])
    out = np.zeros((2 * n, 2 * n))
    for j in range(n):
        out[2 * j:2 * j + 2, 2 * j:2 * j + 2] = block
    return out


@dataclass(frozen=True)
class GeometryContext:
    """Model torus with its metric scale.

    c_k = 2*pi*k normalizes the curvature so that the induced line bundle has
    first Chern number k on each elementary T^2 factor; g_k = c_k * g.
    """

    n: int
    k: int

    def __post_init__(self):
        if self.n not in (1, 2):
            raise ValueError(f"complex dimension must be 1 or 2, got {self.n}")
        if self.k < 1:
            raise ValueError(f"ampleness level must be positive, got {self.k}")

    @property
    def c_k(self) -> float:
        return TWO_PI * self.k

    @property
    def dim(self) -> int:
        """Real dimension 2n."""
        return 2 * self.n

    @property
    def omega0(self) -> np.ndarray:
        return standard_omega_matrix(self.n)

    @property
    def J0(self) -> np.ndarray:
        return standard_J_matrix(self.n)

    def to_complex(self, pts: np.ndarray) -> np.ndarray:
        """Interleaved real coordinates (..., 2n) -> complex (..., n)."""
        pts = np.asarray(pts, dtype=float)
        return pts[..., 0::2] + 1j * pts[..., 1::2]

    def to_real(self, z: np.ndarray) -> np.ndarray:
        """Complex coordinates (..., n) -> interleaved real (..., 2n)."""
        z = np.asarray(z, dtype=complex)
        out = np.empty(z.shape[:-1] + (2 * z.shape[-1],))
        out[..., 0::2] = z.real
        out[..., 1::2] = z.imag
        return out


def rescaled_distance(x, y, ctx: GeometryContext) -> float:
    """Torus distance in g_k units: sqrt(c_k) times the flat torus distance.

    The flat distance minimizes over lattice representatives, which on the
    unit integer lattice is a per-coordinate wrap to [-1/2, 1/2].
    """
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    d = d - np.round(d)
    return float(np.sqrt(ctx.c_k) * np.linalg.norm(d, axis=-1))


@dataclass(frozen=True)
class TwoFormField:
    """Smooth 2-form given by a pointwise antisymmetric matrix evaluator.

    ``evaluator`` maps an (N, 2n) array of points to (N, 2n, 2n) matrices.
    ``jacobian`` optionally maps points to (N, 2n, 2n, 2n) arrays of partial
    derivatives d(Omega_ij)/dx_l; when absent, consumers fall back to finite
    differences.
    """

    n: int
    evaluator: Callable[[np.ndarray], np.ndarray]
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return self.evaluator(pts)

    def d(self, pts: np.ndarray, h: float = 1e-5) -> np.ndarray:
        """Partial derivatives of the matrix field, analytic or central FD."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.jacobian is not None:
            return self.jacobian(pts)
        dim = 2 * self.n
        out = np.empty(pts.shape[:1] + (dim, dim, dim))
        for l in range(dim):
            e = np.zeros(dim)
            e[l] = h
            out[..., l] = (self.evaluator(pts + e) - self.evaluator(pts - e)) / (2 * h)
        return out

    def closedness_residual(self, pts: np.ndarray) -> float:
        """Max |dOmega| component over the probe points (0 for closed forms)."""
        a = self.d(pts)  # a[n, i, j, l] = d_l O_ij
        # cyclic sum d_l O_ij + d_i O_jl + d_j O_li
        cyc = a + a.transpose(0, 3, 1, 2) + a.transpose(0, 2, 3, 1)
        return float(np.max(np.abs(cyc)))


def constant_two_form(n: int, matrix: np.ndarray) -> TwoFormField:
    matrix = np.asarray(matrix, dtype=float)

    def ev(pts):
        return np.broadcast_to(matrix, (pts.shape[0],) + matrix.shape).copy()

    def jac(pts):
        return np.zeros((pts.shape[0],) + matrix.shape + (matrix.shape[0],))

    return TwoFormField(n=n, evaluator=ev, jacobian=jac)


def standard_omega_field(n: int) -> TwoFormField:
    return constant_two_form(n, standard_omega_matrix(n))


@dataclass(frozen=True)
class AlmostComplexField:
    """Pointwise almost-complex structure J(x) with optional metadata.

    ``metadata`` carries measured constants (e.g. the deviation ratio of a
    compatible structure from its reference); it does not affect evaluation.
    """

    n: int
    evaluator: Callable[[np.ndarray], np.ndarray]
    metadata: dict = field(default_factory=dict)

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return self.evaluator(pts)

    def square_residual(self, pts: np.ndarray) -> float:
        J = self(pts)
        eye = np.eye(J.shape[-1])
        return float(np.max(np.abs(np.einsum("nij,njk->nik", J, J) + eye)))


def standard_J_field(n: int) -> AlmostComplexField:
    M = standard_J_matrix(n)

    def ev(pts):
        return np.broadcast_to(M, (pts.shape[0],) + M.shape).copy()

    return AlmostComplexField(n=n, evaluator=ev)


def _taming_probes(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Standard basis plus 2n random unit vectors (cheap nondegeneracy probe)."""
    probes = [np.eye(dim)]
    v = rng.standard_normal((dim, dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    probes.append(v)
    return np.concatenate(probes, axis=0)


def _frame_at_point(omega: np.ndarray, J: np.ndarray, n: int) -> np.ndarray:
    """omega-compatible J-tilde at one point by the inductive frame construction.

    Builds an omega-standard frame e_1, e'_1, ..., e_n, e'_n starting from
    e'_1 = J e_1, correcting each e'_{m+1} = J e_{m+1} by the span of the
    earlier pairs, then defines J-tilde(e_i) = e'_i, J-tilde(e'_i) = -e_i.
    """
    dim = 2 * n
    pairs = []  # list of (e, e_prime, omega(e, e_prime))

    def omega_pairing(u, v):
        return u @ omega @ v

    def orthogonalize(u):
        v = u.astype(float).copy()
        for (e, ep, w) in pairs:
            v = v - (omega_pairing(e, v) / w) * ep + (omega_pairing(ep, v) / w) * e
        return v

    basis = np.eye(dim)
    for _ in range(n):
        # greedy start vector: the standard basis vector whose symplectic
        # orthogonalization survives with the largest norm
        cands = [orthogonalize(b) for b in basis]
        norms = [np.linalg.norm(c) for c in cands]
        v = cands[int(np.argmax(norms))]
        nv = np.linalg.norm(v)
        if nv < 1e-10:
            raise DegenerateFormError("frame construction ran out of directions")
        e = v / nv
        Je = J @ e
        ep = Je.copy()
        for (e_i, ep_i, w) in pairs:
            ep += (omega_pairing(ep_i, Je) * e_i - omega_pairing(e_i, Je) * ep_i) / w
        w_new = omega_pairing(e, ep)
        if w_new <= 1e-12:
            raise TamingError("omega(e, J e) not positive during frame construction")
        pairs.append((e, ep, w_new))

    P = np.empty((dim, dim))
    K = np.zeros((dim, dim))
    for i, (e, ep, _) in enumerate(pairs):
        P[:, 2 * i] = e
        P[:, 2 * i + 1] = ep
        K[2 * i:2 * i + 2, 2 * i:2 * i + 2] = [[0.0, -1.0], [1.0, 0.0]]
    return P @ K @ np.linalg.inv(P)


def compatible_almost_complex(
    omega: TwoFormField,
    J_ref: AlmostComplexField,
    sample_points: np.ndarray,
    rng: Optional[np.random.Generator] = None,
) -> AlmostComplexField:
    """Construct an omega-compatible almost-complex structure near J_ref.

    At every point the returned structure satisfies J^2 = -I,
    omega(Ju, Jv) = omega(u, v) and omega(v, Jv) > 0 exactly (up to floating
    point).  The measured deviation constant
    C = max ||J - J_ref|| / ||omega - omega0|| over the sample points is
    stored in ``metadata['deviation_constant']``.

    Raises TamingError if omega(v, J_ref v) <= 0 for some probe vector, and
    DegenerateFormError if omega is singular at a sample point.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    n = omega.n
    pts = np.atleast_2d(np.asarray(sample_points, dtype=float))
    O = omega(pts)
    Jr = J_ref(pts)

    dets = np.linalg.det(O)
    if np.any(np.abs(dets) < 1e-12):
        raise DegenerateFormError("omega degenerate at a sample point")
    probes = _taming_probes(2 * n, rng)
    Jp = np.einsum("nij,pj->npi", Jr, probes)
    tame = np.einsum("pi,nij,npj->np", probes, O, Jp)
    if np.any(tame <= 0):
        raise TamingError("omega(v, J_ref v) <= 0 for a probe vector")

    def build(points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        Om = omega(points)
        Jm = J_ref(points)
        return np.stack([_frame_at_point(Om[i], Jm[i], n) for i in range(points.shape[0])])

    Jt = build(pts)
    omega0 = standard_omega_matrix(n)
    dev = np.array([np.linalg.norm(Jt[i] - Jr[i], 2) for i in range(len(pts))])
    gap = np.array([np.linalg.norm(O[i] - omega0, 2) for i in range(len(pts))])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(gap > 1e-14, dev / np.maximum(gap, 1e-300), 0.0)
    meta = {
        "deviation_constant": float(np.max(ratio)) if len(ratio) else 0.0,
        "max_deviation": float(np.max(dev)) if len(dev) else 0.0,
        "max_form_gap": float(np.max(gap)) if len(gap) else 0.0,
    }
    return AlmostComplexField(n=n, evaluator=build, metadata=meta)


# ---------------------------------------------------------------------------
# Moser-flow Darboux coordinates
# ---------------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(20)
_GL_T = 0.5 * (_GL_NODES + 1.0)  # nodes on [0, 1]
_GL_W = 0.5 * _GL_WEIGHTS


@dataclass(frozen=True)
class DarbouxChart:
    """Local complex Darboux coordinates produced by a Moser flow.

    ``forward`` maps torus points near the center to coordinates in the ball;
    ``inverse`` is its inverse (the time-1 Moser flow shifted to the center).
    ``residual`` is the measured sup-norm of inverse^*(omega1) - omega0 over
    the validation set.
    """

    center: np.ndarray
    radius: float
    ode_step: float
    forward: Callable[[np.ndarray], np.ndarray]
    inverse: Callable[[np.ndarray], np.ndarray]
    residual: float
    interpolant_margin: float

    def roundtrip_defect(self, pts: np.ndarray) -> float:
        pts = np.atleast_2d(pts)
        return float(np.max(np.abs(self.forward(self.inverse(pts)) - pts)))


def _moser_alpha(beta_eval, z: np.ndarray) -> np.ndarray:
    """Radial-homotopy primitive of a closed 2-form: alpha with d(alpha) = beta.

    alpha_i(z) = integral_0^1 t * beta(tz)(z, e_i) dt, so alpha(0) = 0.
    ``beta_eval`` maps (M, 2n) points to (M, 2n, 2n) matrices.
    """
    N, dim = z.shape
    tz = _GL_T[:, None, None] * z[None, :, :]          # (Q, N, dim)
    B = beta_eval(tz.reshape(-1, dim)).reshape(len(_GL_T), N, dim, dim)
    # beta(tz)(z, e_i) = z^T B e_i = (B^T z)_i
    return np.einsum("q,qnji,nj->ni", _GL_T * _GL_W, B, z)


def _moser_alpha_dalpha(beta_eval, dbeta_eval, z: np.ndarray):
    """Primitive alpha and its Jacobian d(alpha_i)/dz_l in one quadrature pass."""
    N, dim = z.shape
    tz = _GL_T[:, None, None] * z[None, :, :]
    flat = tz.reshape(-1, dim)
    B = beta_eval(flat).reshape(len(_GL_T), N, dim, dim)
    dB = dbeta_eval(flat).reshape(len(_GL_T), N, dim, dim, dim)
    alpha = np.einsum("q,qnji,nj->ni", _GL_T * _GL_W, B, z, optimize=True)
    # d/dz_l [ (B(tz)^T z)_i ] = t * (dB_l^T z)_i + B_li
    term1 = np.einsum("q,qnjil,nj->nil", _GL_T * _GL_W * _GL_T, dB, z, optimize=True)
    term2 = np.einsum("q,qnli->nil", _GL_T * _GL_W, B)
    return alpha, term1 + term2


def moser_darboux(
    omega1: TwoFormField,
    center: np.ndarray,
    radius: float,
    ode_step: float,
    validation_points: Optional[np.ndarray] = None,
) -> DarbouxChart:
    """Darboux chart for a closed 2-form by integrating the Moser vector field.

    The primitive alpha of omega1 - omega0 with alpha(0) = 0 comes from the
    radial homotopy formula, the non-autonomous field X_t solves
    i_{X_t} omega_t = -alpha for omega_t = omega0 + t(omega1 - omega0), and
    classical RK4 with uniform step integrates both the flow and its tangent
    map from t = 0 to 1.  The inverse chart map is the time-1 flow.

    Raises DegenerateFormError when some interpolant omega_t is singular at a
    probe point, and ChartDomainError if the flow escapes 1.5x the chart ball.
    """
    n = omega1.n
    dim = 2 * n
    center = np.asarray(center, dtype=float).reshape(dim)
    omega0 = standard_omega_matrix(n)

    def beta_eval(u):
        return omega1(u + center) - omega0

    def dbeta_eval(u):
        return omega1.d(u + center)

    # interpolant nondegeneracy probe over the ball and t in [0, 1]
    rng = np.random.default_rng(12345)
    probe = rng.uniform(-radius, radius, size=(64, dim))
    probe = probe[np.linalg.norm(probe, axis=1) <= radius]
    probe = np.concatenate([np.zeros((1, dim)), probe], axis=0)
    B = beta_eval(probe)
    margin = np.inf
    for t in np.linspace(0.0, 1.0, 9):
        Ot = omega0 + t * B
        s = np.linalg.svd(Ot, compute_uv=False)
        margin = min(margin, float(np.min(s)))
    if margin < 0.05:
        raise DegenerateFormError(
            f"interpolant degenerate: min singular value {margin:.3g} < 0.05")

    def X_and_DX(t, z):
        a, da = _moser_alpha_dalpha(beta_eval, dbeta_eval, z)
        Ot = omega0[None] + t * beta_eval(z)
        dOt = t * dbeta_eval(z)
        X = np.linalg.solve(Ot, a[..., None])[..., 0]
        rhs = da - np.einsum("nijl,nj->nil", dOt, X)
        DX = np.linalg.solve(Ot, rhs)
        return X, DX

    def integrate(z0, t0, t1, step):
        """RK4 on the flow and its tangent map, uniform step from t0 to t1."""
        z = np.atleast_2d(np.asarray(z0, dtype=float)).copy()
        D = np.broadcast_to(np.eye(dim), z.shape + (dim,)).copy()
        nsteps = max(1, int(round(abs(t1 - t0) / step)))
        h = (t1 - t0) / nsteps
        t = t0
        for _ in range(nsteps):
            k1, K1 = X_and_DX(t, z)
            K1 = np.einsum("nij,njk->nik", K1, D)
            k2, K2 = X_and_DX(t + h / 2, z + h / 2 * k1)
            K2 = np.einsum("nij,njk->nik", K2, D + h / 2 * K1)
            k3, K3 = X_and_DX(t + h / 2, z + h / 2 * k2)
            K3 = np.einsum("nij,njk->nik", K3, D + h / 2 * K2)
            k4, K4 = X_and_DX(t + h, z + h * k3)
            K4 = np.einsum("nij,njk->nik", K4, D + h * K3)
            z = z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            D = D + h / 6 * (K1 + 2 * K2 + 2 * K3 + K4)
            t += h
            if np.any(np.linalg.norm(z, axis=1) > 1.5 * radius + 1e-9):
                raise ChartDomainError("Moser flow escaped the chart domain")
        return z, D

    def inverse(zeta):
        zeta = np.atleast_2d(np.asarray(zeta, dtype=float))
        z, _ = integrate(zeta, 0.0, 1.0, ode_step)
        return z + center

    def forward(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z, _ = integrate(x - center, 1.0, 0.0, ode_step)
        return z

    if validation_points is None:
        axis = np.linspace(-radius, radius, 21)
        if dim == 2:
            gx, gy = np.meshgrid(axis, axis)
            validation_points = np.stack([gx.ravel(), gy.ravel()], axis=1)
        else:
            validation_points = rng.uniform(-radius, radius, size=(500, dim))
        validation_points = validation_points[
            np.linalg.norm(validation_points, axis=1) <= radius]

    zv, Dv = integrate(validation_points, 0.0, 1.0, ode_step)
    O1 = omega1(zv + center)
    pulled = np.einsum("nji,njk,nkl->nil", Dv, O1, Dv)
    residual = float(np.max(np.abs(pulled - omega0)))

    return DarbouxChart(
        center=center,
        radius=float(radius),
        ode_step=float(ode_step),
        forward=forward,
        inverse=inverse,
        residual=residual,
        interpolant_margin=float(margin),
    )
