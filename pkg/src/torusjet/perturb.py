"""Local perturbation bases, the quantitative-Sard search, and globalization.

One stratum sweep covers the torus with a maximal net of Gaussian-scale
spacing, colors it into batches of mutually distant centers, and at each
center either skips (already far from the stratum, or inside the boundary
carve-out of a preceding stratum) or perturbs: the dressed reference frame
gives p combinations whose jet responses span C^p, the current defining
values are divided through that basis into a C^p-valued field mu, and a
bounded grid search over shifts |w| <= delta_center picks the shift whose
subtraction maximizes the transversality margin of the local field.  The
perturbation added is -sum w_i sigma_i, Gaussian-concentrated at the center.

Budgets: the stratum budget delta is divided by the measured Gaussian
overlap constant of the net, so the C^{r+1} norm of the summed perturbation
stays below delta; the stratum-by-stratum induction halves budgets per
stage and caps them by a quarter of the previously achieved margins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .bundle import BundleSpec
from .errors import BudgetError, StratumDomainError, TransversalityFailure
from .jets import HoloJet, holomorphic_jet, jet_frame
from .sections import SectionField, ah_norms
from .strata import QuasiStratification, Stratum
from .transversality import (TransversalityReport, eta_at_point, eta_global,
                             jets_batch, jet_at_index, margin_from_jet, _dbar0)

FAR_FACTOR = 3.0          # skip a center whose margin already exceeds this x budget
KAPPA = 1.0               # boundary carve-out constant (engineering value, reported)
MIN_BUDGET = 1e-6


@dataclass(frozen=True)
class SardParams:
    """Quantitative-Sard search parameters.

    eta_target = delta * log(1/delta)^(-nu) is the margin scale the local
    search is calibrated against; w_grid is the per-real-axis resolution of
    the shift search, ball_spacing the sample resolution on the unit ball.
    """

    delta: float
    nu: int = 3
    w_grid: int = 41
    w_grid_p2: int = 9
    ball_spacing: float = 0.15
    refine: bool = True

    def __post_init__(self):
        if not 0 < self.delta < 0.5:
            raise ValueError("Sard search requires 0 < delta < 1/2")
        if self.nu < 1:
            raise ValueError("nu must be a positive integer")

    @property
    def eta_target(self) -> float:
        return self.delta * math.log(1.0 / self.delta) ** (-self.nu)


@dataclass(frozen=True)
class SardResult:
    w: np.ndarray              # shift in original h units, |w| <= delta
    margin: float              # achieved margin of h - w, original units
    rescale: float             # sup-norm factor used to normalize h
    n_samples: int
    n_candidates: int


def _ball_grid(n: int, spacing: float, radius: float = 1.1):
    """Regular grid on the bounding box of the radius-1.1 ball in R^{2n}."""
    per_axis = max(3, int(math.ceil(2 * radius / spacing)) + 1)
    axis = np.linspace(-radius, radius, per_axis)
    grids = np.meshgrid(*([axis] * (2 * n)), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    return pts, axis[1] - axis[0], per_axis


def _wirtinger_grad_on_grid(vals: np.ndarray, per_axis: int, spacing: float, n: int):
    """(N, p, n) holomorphic Wirtinger gradient of grid-sampled values."""
    p = vals.shape[1]
    shape = (per_axis,) * (2 * n) + (p,)
    V = vals.reshape(shape)
    grads = []
    for ax in range(2 * n):
        g = np.gradient(V, spacing, axis=ax, edge_order=2)
        grads.append(g)
    out = np.empty(vals.shape + (n,), dtype=complex)
    for j in range(n):
        dz = 0.5 * (grads[2 * j] - 1j * grads[2 * j + 1])
        out[..., j] = dz.reshape(-1, p)
    return out


def _w_candidates(delta: float, p: int, count: int) -> np.ndarray:
    """Grid over the closed delta-ball in C^p, axes of ``count`` points."""
    axis = np.linspace(-delta, delta, count)
    grids = np.meshgrid(*([axis] * (2 * p)), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    pts = pts[np.linalg.norm(pts, axis=1) <= delta + 1e-15]
    w = pts[:, 0::2] + 1j * pts[:, 1::2]
    return w


def _best_w(h_vals: np.ndarray, smin: np.ndarray, delta: float, count: int,
            refine: bool) -> tuple:
    """argmax over candidate shifts of min_i max(|h_i - w|, smin_i)."""
    p = h_vals.shape[1]
    best_w = np.zeros(p, dtype=complex)
    best_m = -np.inf

    def scan(cands):
        nonlocal best_w, best_m
        for start in range(0, len(cands), 2048):
            W = cands[start:start + 2048]
            dist = np.linalg.norm(h_vals[:, None, :] - W[None, :, :], axis=2)
            marg = np.min(np.maximum(dist, smin[:, None]), axis=0)
            i = int(np.argmax(marg))
            if marg[i] > best_m:
                best_m = float(marg[i])
                best_w = W[i]

    scan(_w_candidates(delta, p, count))
    rounds = (1 if p == 1 else 2) if refine else 0
    spacing = 2 * delta / (count - 1)
    for _ in range(rounds):
        axis = np.linspace(-spacing, spacing, count)
        grids = np.meshgrid(*([axis] * (2 * p)), indexing="ij")
        local = np.stack([g.ravel() for g in grids], axis=-1)
        wl = local[:, 0::2] + 1j * local[:, 1::2] + best_w
        wl = wl[np.linalg.norm(
            np.concatenate([wl.real, wl.imag], axis=1), axis=1) <= delta + 1e-15]
        if len(wl):
            scan(wl)
        spacing = 2 * spacing / (count - 1)
    return best_w, best_m


def local_sard_search(h: Callable[[np.ndarray], np.ndarray], params: SardParams,
                      n: int = 1, p: int = 1) -> SardResult:
    """Bounded search for a shift w making h - w uniformly transverse to 0.

    ``h`` maps (N, 2n) real points of the 1.1-ball to (N, p) complex values.
    The field is rescaled to sup <= 1 if needed (factor recorded; the search
    radius shrinks accordingly so |w| <= delta holds in original units).
    Derivatives come from grid finite differences; the margin is evaluated
    over the interior unit ball.  Always returns the best candidate found.
    """
    pts, spacing, per_axis = _ball_grid(n, params.ball_spacing)
    vals = np.asarray(h(pts), dtype=complex).reshape(len(pts), p)
    M = float(np.max(np.abs(vals))) if len(vals) else 1.0
    rescale = max(M, 1.0)
    vals_n = vals / rescale
    grad = _wirtinger_grad_on_grid(vals_n, per_axis, spacing, n)
    if p > n:
        smin = np.zeros(len(pts))
    else:
        sv = np.linalg.svd(grad, compute_uv=False)
        smin = sv[:, p - 1]
    interior = np.linalg.norm(pts, axis=1) <= 1.0
    delta_n = params.delta / rescale
    count = params.w_grid if p == 1 else params.w_grid_p2
    w_n, m_n = _best_w(vals_n[interior], smin[interior], delta_n,
                       count, params.refine)
    return SardResult(w=w_n * rescale, margin=m_n * rescale, rescale=rescale,
                      n_samples=int(np.sum(interior)), n_candidates=params.w_grid)


# ---------------------------------------------------------------------------
# local bases
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LocalBasis:
    """p combinations of dressed reference sections with Theta-wedge floor."""

    x: tuple
    stratum_id: str
    sections: tuple            # p SectionFields, C^{r+1} norm <= 1/p each
    lambdas: np.ndarray        # (N_I, p) coefficients, column 1-norms == 1
    theta_at_center: np.ndarray  # (p, p), approximately diagonal
    wedge: float

    @property
    def p(self) -> int:
        return len(self.sections)


LAMBDA_PRUNE = 1e-10
WEDGE_FLOOR = 1e-6


def local_basis(section: SectionField, x, st: Stratum, spec: BundleSpec,
                r: int) -> LocalBasis:
    """Basis sections sigma_{k,x,i} whose jet responses Theta_i span C^p.

    Theta_I(y) = d(values)(j^r s(y)) . j^r s^ref_I(y); the pseudo-inverse of
    the center matrix gives combinations with Theta_i(x) along e_i, column
    coefficients normalized to unit 1-norm and the result divided by p so
    each basis section has C^{r+1} norm at most 1/p.
    """
    frame = jet_frame(x, spec, r)
    jet_s = holomorphic_jet(section, x, r)
    vals, jac, _ = st.value_jac(jet_s)
    p = len(vals)
    M = jac @ frame.matrix.T            # (p, N_I)
    gram = M @ M.conj().T
    lam = M.conj().T @ np.linalg.inv(gram)   # (N_I, p), M @ lam = I
    norms1 = np.sum(np.abs(lam), axis=0)
    lam = lam / norms1[None, :]
    theta0 = M @ lam                    # diag(1/norm1_i)
    wedge = abs(np.linalg.det(theta0)) / p ** p
    if wedge < WEDGE_FLOOR:
        raise StratumDomainError(
            f"Theta wedge {wedge:.3g} below floor at x={tuple(np.round(x, 4))}")
    secs = []
    for i in range(p):
        atoms = []
        for a, w_c in enumerate(lam[:, i]):
            if abs(w_c) < LAMBDA_PRUNE:
                continue
            base = frame.sections[a]
            atoms.extend(replace(at, coefficient=at.coefficient * w_c / p)
                         for at in base.atoms)
        secs.append(SectionField(spec=spec, atoms=tuple(atoms)))
    return LocalBasis(x=tuple(np.asarray(x, dtype=float)), stratum_id=st.id,
                      sections=tuple(secs), lambdas=lam,
                      theta_at_center=theta0 / p, wedge=wedge)


def theta_fields(section: SectionField, basis: LocalBasis, st: Stratum,
                 pts: np.ndarray) -> tuple:
    """h(y) (N, p) and Theta matrix (N, p, p) with columns Theta_i(y)."""
    spec = section.spec
    r = st.r
    sig = jets_batch(section, pts, r)
    sig_basis = [jets_batch(b, pts, r) for b in basis.sections]
    N = pts.shape[0]
    p = basis.p
    h = np.empty((N, p), dtype=complex)
    Th = np.empty((N, p, p), dtype=complex)
    for idx in range(N):
        jet = jet_at_index(sig, idx, spec, pts[idx])
        vals, jac, _ = st.value_jac(jet)
        h[idx] = vals
        for i in range(p):
            bjet = jet_at_index(sig_basis[i], idx, spec, pts[idx])
            Th[idx, :, i] = jac @ bjet.flatten()
    return h, Th


def mu_field_fn(section: SectionField, basis: LocalBasis, st: Stratum,
                x: np.ndarray, c_k: float) -> Callable:
    """mu with h = sum mu_i Theta_i over the g_k ball at x, as a callable on
    ball coordinates (units: g_k)."""
    x = np.asarray(x, dtype=float)

    def mu(ball_pts: np.ndarray) -> np.ndarray:
        pts = x[None, :] + np.asarray(ball_pts, dtype=float) / math.sqrt(c_k)
        h, Th = theta_fields(section, basis, st, pts)
        return np.linalg.solve(Th, h[..., None])[..., 0]

    return mu


def apply_local_perturbation(section: SectionField, x, w: np.ndarray,
                             basis: LocalBasis, budget: Optional[float] = None) -> SectionField:
    """s + tau with tau = -sum w_i sigma_{k,x,i}; returns s itself when w = 0."""
    w = np.asarray(w, dtype=complex).reshape(-1)
    if budget is not None and np.linalg.norm(w) > budget * (1 + 1e-9):
        raise BudgetError(f"|w| = {np.linalg.norm(w):.3g} exceeds budget {budget:.3g}")
    if np.all(w == 0):
        return section
    atoms = []
    for i, wi in enumerate(w):
        if wi == 0:
            continue
        atoms.extend(replace(a, coefficient=-wi * a.coefficient)
                     for a in basis.sections[i].atoms)
    return section.with_atoms(atoms)


# ---------------------------------------------------------------------------
# nets, coloring, globalization
# ---------------------------------------------------------------------------

def _torus_dist_gk(a: np.ndarray, b: np.ndarray, c_k: float) -> np.ndarray:
    d = a - b
    d = d - np.round(d)
    return math.sqrt(c_k) * np.linalg.norm(d, axis=-1)


def greedy_net(ctx, spacing_gk: float, rng: np.random.Generator) -> np.ndarray:
    """Maximal spacing_gk-separated subset of a shuffled jittered candidate grid."""
    fine = max(2, int(math.ceil(2.0 * math.sqrt(ctx.c_k) / spacing_gk)))
    axis = np.arange(fine) / fine
    grids = np.meshgrid(*([axis] * ctx.dim), indexing="ij")
    cands = np.stack([g.ravel() for g in grids], axis=-1)
    cands = (cands + rng.uniform(0, 1.0 / fine, size=cands.shape)) % 1.0
    order = rng.permutation(len(cands))
    accepted = []
    for i in order:
        c = cands[i]
        if accepted:
            if np.min(_torus_dist_gk(c[None, :], np.array(accepted), ctx.c_k)) < spacing_gk:
                continue
        accepted.append(c)
    return np.array(accepted)


def greedy_coloring(centers: np.ndarray, min_dist_gk: float, c_k: float) -> list:
    """Batches of centers pairwise at least min_dist_gk apart (greedy colors)."""
    ncen = len(centers)
    color = [-1] * ncen
    for i in range(ncen):
        used = set()
        for j in range(i):
            if _torus_dist_gk(centers[i], centers[j], c_k) < min_dist_gk:
                used.add(color[j])
        c = 0
        while c in used:
            c += 1
        color[i] = c
    batches = []
    for c in range(max(color) + 1):
        batches.append([i for i in range(ncen) if color[i] == c])
    return batches


def overlap_constant(centers: np.ndarray, c_k: float) -> float:
    """max over centers of sum_c' exp(-d(c, c')^2 / 4), Gaussian overlap."""
    worst = 0.0
    for i in range(len(centers)):
        d = _torus_dist_gk(centers[i][None, :], centers, c_k)
        worst = max(worst, float(np.sum(np.exp(-0.25 * d ** 2))))
    return worst


@dataclass
class CenterDecision:
    center: tuple
    batch: int
    action: str                # "perturb" | "far" | "boundary" | "zero-shift"
    w: Optional[list] = None   # [re, im] pairs
    local_margin: Optional[float] = None
    rescale: Optional[float] = None
    margin_before: Optional[float] = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None or k in ("w",)}


@dataclass
class PerturbationPlan:
    """Audit record of one stratum sweep."""

    stratum_id: str
    net_spacing: float
    batch_distance: float
    kappa: float
    far_factor: float
    budget: float              # stratum budget (C^{r+1} units)
    center_budget: float       # per-center |w| cap
    overlap: float             # measured Gaussian overlap constant of the net
    centers: list = field(default_factory=list)
    batches: list = field(default_factory=list)
    decisions: list = field(default_factory=list)
    applied_w_total: float = 0.0
    measured_perturbation_norm: Optional[float] = None

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["decisions"] = [x.to_dict() for x in self.decisions]
        return d


def globalize(section: SectionField, st: Stratum, params: SardParams,
              net_spacing: float = 1.0, batch_distance: float = 6.0,
              predecessors: Sequence = (), rng: Optional[np.random.Generator] = None,
              measure_spacing: float = 0.1, kappa: float = KAPPA,
              far_factor: float = FAR_FACTOR, passes: int = 2) -> tuple:
    """One stratum sweep; returns (section, TransversalityReport, plan).

    ``predecessors`` is a sequence of (stratum, achieved_margin) pairs; the
    boundary carve-out skips centers within kappa*gamma/4 of a predecessor
    and excludes the same neighborhoods from the certified measurement.

    The sweep runs ``passes`` times with geometrically halved per-center
    budgets: a later pass revisits regions degraded by far tails of earlier
    perturbations while the far-branch skips regions already transverse at
    the current scale.  The budget split keeps the summed per-center caps at
    delta / overlap, so the total perturbation stays below delta.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    spec = section.spec
    ctx = spec.ctx
    r = st.r
    centers = greedy_net(ctx, net_spacing, rng)
    batches = greedy_coloring(centers, batch_distance, ctx.c_k)
    lam_overlap = overlap_constant(centers, ctx.c_k)
    scale = sum(0.5 ** p for p in range(passes))
    center_budget = params.delta / (lam_overlap * scale)
    plan = PerturbationPlan(
        stratum_id=st.id, net_spacing=net_spacing, batch_distance=batch_distance,
        kappa=kappa, far_factor=far_factor, budget=params.delta,
        center_budget=center_budget, overlap=lam_overlap,
        centers=[list(c) for c in centers],
        batches=[list(b) for b in batches])

    n_atoms_before = len(section.atoms)
    s_cur = section
    for p in range(passes):
        budget_p = center_budget * 0.5 ** p
        center_params = replace(params, delta=min(budget_p, 0.499))
        for bi, batch in enumerate(batches):
            # decisions for a whole batch are taken against the batch-start
            # section; far-apart centers interact only through Gaussian tails
            staged = []
            for ci in batch:
                x = centers[ci]
                decision, basis = _center_step(s_cur, st, x, spec, r, center_params,
                                               predecessors, kappa, far_factor)
                decision.batch = bi + p * len(batches)
                plan.decisions.append(decision)
                if decision.action == "perturb":
                    staged.append((x, decision, basis))
            for x, decision, basis in staged:
                w = np.array(decision.w[0]) + 1j * np.array(decision.w[1])
                s_cur = apply_local_perturbation(s_cur, x, w, basis,
                                                 budget=budget_p)
                plan.applied_w_total += float(np.linalg.norm(w))

    exclusions = [(st_b, 0.25 * kappa * gamma) for st_b, gamma in predecessors]
    report = eta_global(s_cur, st, spacing=measure_spacing, exclusions=exclusions)

    # polish: weak spots left by far tails of earlier perturbations get a
    # targeted center at the measured witness, paid from measured headroom
    polish_target = 0.5 * center_budget
    for _ in range(3):
        if report.eta_cert >= polish_target:
            break
        spent = _tau_norm(s_cur, section, n_atoms_before, r)
        headroom = params.delta - (spent if spent is not None else params.delta)
        budget_pol = min(center_budget, 0.5 * headroom)
        if budget_pol < 1e-4:
            break
        x = np.asarray(report.witness, dtype=float)
        pol_params = replace(params, delta=min(budget_pol, 0.499))
        decision, basis = _center_step(s_cur, st, x, spec, r, pol_params,
                                       predecessors, kappa, far_factor=np.inf)
        decision.action = "polish" if decision.action == "perturb" else decision.action
        decision.batch = -1
        plan.decisions.append(decision)
        if decision.action != "polish":
            break
        w = np.array(decision.w[0]) + 1j * np.array(decision.w[1])
        s_cur = apply_local_perturbation(s_cur, x, w, basis, budget=budget_pol)
        plan.applied_w_total += float(np.linalg.norm(w))
        report = eta_global(s_cur, st, spacing=measure_spacing, exclusions=exclusions)

    plan.measured_perturbation_norm = _tau_norm(s_cur, section, n_atoms_before, r)
    return s_cur, report, plan


def _tau_norm(s_cur: SectionField, s_in: SectionField, n_before: int, r: int):
    tau_atoms = s_cur.atoms[n_before:]
    if not tau_atoms:
        return None
    tau = SectionField(spec=s_cur.spec, atoms=tau_atoms)
    return ah_norms(tau, r=r, spacing=0.25).c_norm()


def _center_step(s_cur: SectionField, st: Stratum, x, spec, r: int,
                 center_params: SardParams, predecessors, kappa, far_factor):
    budget = center_params.delta
    jet = holomorphic_jet(s_cur, x, r)
    for st_b, gamma in predecessors:
        if st_b.distance(jet) < 0.25 * kappa * gamma:
            return CenterDecision(center=tuple(x), batch=-1, action="boundary"), None
    try:
        margin_here = eta_at_point(s_cur, st, x)
    except (StratumDomainError, ZeroDivisionError):
        return CenterDecision(center=tuple(x), batch=-1, action="boundary"), None
    if margin_here >= far_factor * budget:
        return CenterDecision(center=tuple(x), batch=-1, action="far",
                              margin_before=float(margin_here)), None
    basis = local_basis(s_cur, x, st, spec, r)
    mu = mu_field_fn(s_cur, basis, st, np.asarray(x, dtype=float), spec.c_k)
    res = local_sard_search(mu, center_params, n=spec.n, p=basis.p)
    if np.linalg.norm(res.w) == 0:
        return CenterDecision(center=tuple(x), batch=-1, action="zero-shift",
                              local_margin=res.margin, rescale=res.rescale,
                              margin_before=float(margin_here)), None
    dec = CenterDecision(center=tuple(x), batch=-1, action="perturb",
                         w=[list(res.w.real), list(res.w.imag)],
                         local_margin=float(res.margin), rescale=float(res.rescale),
                         margin_before=float(margin_here))
    return dec, basis


# ---------------------------------------------------------------------------
# stratum induction
# ---------------------------------------------------------------------------

@dataclass
class StageRecord:
    stratum_id: str
    budget: float
    report: TransversalityReport
    plan: PerturbationPlan
    remeasured: dict = field(default_factory=dict)  # id -> eta_grid after later stages

    def to_dict(self) -> dict:
        return {
            "stratum_id": self.stratum_id,
            "budget": self.budget,
            "report": self.report.to_dict(),
            "plan": self.plan.to_dict(),
            "remeasured": self.remeasured,
        }


def stratum_induction(section: SectionField, qs: QuasiStratification, delta: float,
                      nu: int = 3, net_spacing: float = 1.0, batch_distance: float = 6.0,
                      rng: Optional[np.random.Generator] = None,
                      measure_spacing: float = 0.1, w_grid: int = 41,
                      ball_spacing: float = 0.15) -> tuple:
    """Sweep all strata in precedence order with geometric budget splitting.

    Budget for stage j is delta / 2^(j+1), further capped by a quarter of
    every previously achieved margin so earlier transversality survives (the
    margins are re-measured after each stage and recorded).  A cap below
    1e-6 aborts with BudgetError (schedule collapse).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    s_cur = section
    records = []
    achieved = []  # (stratum, eta_grid at its own stage)
    for j, st in enumerate(qs.strata):
        budget = delta / 2 ** (j + 1)
        for _, gamma in achieved:
            budget = min(budget, 0.25 * gamma)
        if budget < MIN_BUDGET:
            raise BudgetError(
                f"budget schedule collapsed at stratum {st.id}: {budget:.3g}")
        params = SardParams(delta=budget, nu=nu, w_grid=w_grid,
                            ball_spacing=ball_spacing)
        pred_ids = qs.predecessors(st.id)
        preds = [(stp, g) for stp, g in achieved if stp.id in pred_ids]
        s_cur, report, plan = globalize(
            s_cur, st, params, net_spacing=net_spacing,
            batch_distance=batch_distance, predecessors=preds, rng=rng,
            measure_spacing=measure_spacing)
        records.append(StageRecord(stratum_id=st.id, budget=budget,
                                   report=report, plan=plan))
        achieved.append((st, report.eta_grid))
        # non-destructiveness: re-measure earlier strata
        for rec, (st_prev, _) in zip(records[:-1], achieved[:-1]):
            prev_ids = qs.predecessors(st_prev.id)
            prev_preds = [(stp, g) for stp, g in achieved if stp.id in prev_ids]
            re_rep = eta_global(s_cur, st_prev, spacing=measure_spacing,
                                exclusions=[(b, 0.25 * KAPPA * g) for b, g in prev_preds])
            rec.remeasured[st.id] = re_rep.eta_grid
    return s_cur, records
