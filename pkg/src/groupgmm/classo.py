"""Penalized GMM with multiplicative distance penalties toward group centers.

The estimator runs in three steps: (1) minimize a penalized objective that
shrinks firm-specific parameter vectors toward a set of group centers, using
an outer loop over convex subproblems and an alternate convex search inside
each subproblem (center updates are weighted Fermat-Weber problems solved by
Weiszfeld iteration; firm updates are smoothed-norm quasi-Newton solves);
(2) assign each firm to its nearest center; (3) re-estimate group parameters
by plain GMM on the assigned groups, with firm-clustered sandwich covariances.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.optimize import minimize

from .panel import PanelData, LaggedRows, build_lags, stack_rows
from .moments import (
    MomentSpec,
    DomainError,
    default_start,
    optimal_weighting,
    _evaluate,
)

_BIG = 1e30


class FitError(RuntimeError):
    """Estimation failed in a way that invalidates the whole fit."""


class UnderIdentifiedGroupError(FitError):
    """A group has fewer usable moment periods than parameters."""


@dataclass(frozen=True)
class CLassoConfig:
    """Tuning for the penalized-GMM fit.

    ``lam = None`` defaults to T^(-1/4) with T the mean usable periods per
    firm. ``classification_threshold`` switches on the strict rule that may
    leave firms unclassified. ``weighting`` is ``identity`` or ``two_step``.
    """

    n_groups: int
    lam: float | None = None
    outer_tol: float = 1e-6
    inner_tol: float = 1e-6
    max_outer: int = 200
    max_inner: int = 100
    classification_threshold: float | None = None
    weighting: str = "identity"
    smoothing_mu: float = 1e-8
    multistart: int = 5
    multistart_scale: float = 0.2
    init_seed: int = 12345
    sub_maxiter: int = 200
    sub_ftol: float = 1e-13
    sub_gtol: float = 1e-9

    def __post_init__(self):
        if self.n_groups < 1:
            raise ValueError("n_groups must be at least 1")
        if self.lam is not None and not self.lam > 0:
            raise ValueError("lam must be strictly positive")
        if min(self.outer_tol, self.inner_tol) <= 0:
            raise ValueError("tolerances must be strictly positive")
        if self.weighting not in ("identity", "two_step"):
            raise ValueError(f"unknown weighting {self.weighting!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CLassoConfig":
        data = dict(data)
        if "J" in data:
            data["n_groups"] = data.pop("J")
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        return cls(**data)


# solver option sets: initial firm estimates and post-stage group solves run
# tight; the inner penalized solves favor speed (configurable)
_INIT_OPTS = {"maxiter": 400, "ftol": 1e-14, "gtol": 1e-10}
_POST_OPTS = {"maxiter": 600, "ftol": 1e-15, "gtol": 1e-11}


class FirmProblem:
    """One firm's GMM objective with optional weighting and domain guards.

    Optimization runs over the spec's free coordinates; pinned coordinates
    (a redundant production intercept) stay at zero.
    """

    def __init__(self, rows: LaggedRows, spec: MomentSpec, W: np.ndarray | None = None):
        self.rows = rows
        self.spec = spec
        self.W = W
        self.free = spec.free_mask
        self.n_free = int(self.free.sum())
        bounds = [(None, None)] * spec.P
        if spec.strategy == "gnr":
            bounds[0] = (1e-8, 1e8)
            bounds[1] = (1e-8, 1e8)
        self.bounds = [b for b, f in zip(bounds, self.free) if f]

    def embed(self, x_free: np.ndarray) -> np.ndarray:
        theta = np.zeros(self.spec.P)
        theta[self.free] = x_free
        return theta

    def value(self, theta: np.ndarray) -> float:
        try:
            _, gbar, _ = _evaluate(self.rows, theta, self.spec)
        except DomainError:
            return math.inf
        q = float(gbar @ gbar) if self.W is None else float(gbar @ self.W @ gbar)
        return q if math.isfinite(q) else math.inf

    def value_and_grad(self, theta: np.ndarray):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                _, gbar, J = _evaluate(self.rows, theta, self.spec, with_jac=True)
        except DomainError:
            return math.inf, np.zeros(self.spec.P)
        Wg = gbar if self.W is None else self.W @ gbar
        q = float(gbar @ Wg)
        g = 2.0 * (J.T @ Wg)
        if not (math.isfinite(q) and np.all(np.isfinite(g))):
            return math.inf, np.zeros(self.spec.P)
        return q, g

    def _clip(self, x_free: np.ndarray) -> np.ndarray:
        x = x_free.copy()
        for i, (lo, hi) in enumerate(self.bounds):
            if lo is not None:
                x[i] = max(x[i], lo)
            if hi is not None:
                x[i] = min(x[i], hi)
        return x

    def solve(self, x0_full: np.ndarray, opts: dict):
        """Plain GMM minimization from one start; returns (theta, value, ok)."""

        def fun(x):
            q, g = self.value_and_grad(self.embed(x))
            if not math.isfinite(q):
                return _BIG, np.zeros(self.n_free)
            return q, g[self.free]

        x0 = self._clip(np.asarray(x0_full, dtype=float)[self.free])
        res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=self.bounds,
                       options=opts)
        theta = self.embed(res.x)
        return theta, self.value(theta), bool(res.success)

    def solve_penalized(self, center: np.ndarray, lam_zeta: float,
                        x0_full: np.ndarray, mu: float, opts: dict):
        """Minimize gmm + lam_zeta * sqrt(||theta - center||^2 + mu^2)."""
        c_free = center[self.free]
        frozen_gap2 = float(np.sum((center[~self.free]) ** 2))

        def fun(x):
            q, g = self.value_and_grad(self.embed(x))
            if not math.isfinite(q):
                return _BIG, np.zeros(self.n_free)
            diff = x - c_free
            root = math.sqrt(float(diff @ diff) + frozen_gap2 + mu * mu)
            return q + lam_zeta * root, g[self.free] + lam_zeta * diff / root

        x0 = self._clip(np.asarray(x0_full, dtype=float)[self.free])
        res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=self.bounds,
                       options=opts)
        return self.embed(res.x), bool(res.success)


def _sub_opts(config: CLassoConfig) -> dict:
    return {"maxiter": config.sub_maxiter, "ftol": config.sub_ftol,
            "gtol": config.sub_gtol}


# ---------------------------------------------------------------------------
# Weighted geometric median (Fermat-Weber) via Weiszfeld iteration
# ---------------------------------------------------------------------------

def weighted_geometric_median(points, weights, tol: float = 1e-10,
                              max_iter: int = 10_000) -> np.ndarray:
    """Minimize sum_i w_i ||x_i - theta|| with anchor-point handling.

    When an iterate lands on a data point, the point's subgradient optimality
    condition is tested; if it fails, the iterate is nudged along the descent
    direction and iteration continues. Stops when the step is below ``tol``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    w = np.asarray(weights, dtype=float)
    if len(w) != len(pts):
        raise ValueError("points and weights have different lengths")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if not np.any(w > 0):
        raise ValueError("at least one weight must be strictly positive")
    keep = w > 0
    pts, w = pts[keep], w[keep]
    if len(pts) == 1:
        return pts[0].copy()

    x = np.average(pts, axis=0, weights=w)
    for _ in range(max_iter):
        diff = pts - x
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        on = dist < 1e-12
        if on.any():
            others = ~on
            if not others.any():
                return x  # all mass coincides with the iterate
            pull = (w[others] / dist[others]) @ diff[others]
            anchor_w = w[on].sum()
            pull_norm = float(np.linalg.norm(pull))
            if pull_norm <= anchor_w:
                return x  # subgradient optimality at the anchor
            x = x + 1e-10 * pull / pull_norm
            continue
        inv = w / dist
        x_new = (inv @ pts) / inv.sum()
        step = float(np.linalg.norm(x_new - x))
        x = x_new
        if step < tol:
            break
    return x


# ---------------------------------------------------------------------------
# Subproblem machinery
# ---------------------------------------------------------------------------

def _update_firm(pr: FirmProblem, pi_i: np.ndarray, f_i: float,
                 center: np.ndarray, lam_zeta: float, mu: float, opts: dict):
    """Guarded firm update; never increases the firm's subproblem term.

    Returns (point, gmm value, distance to center, changed).
    """
    d_cur = float(np.linalg.norm(pi_i - center))
    c_cur = f_i + lam_zeta * d_cur

    if lam_zeta == 0.0:
        q, g = pr.value_and_grad(pi_i)
        if math.isfinite(q) and np.linalg.norm(g[pr.free]) <= opts["gtol"]:
            return pi_i, f_i, d_cur, False
        x, f_new, _ = pr.solve(pi_i, opts)
        if f_new < f_i:
            return x, f_new, float(np.linalg.norm(x - center)), True
        return pi_i, f_i, d_cur, False

    f_c, g_c = pr.value_and_grad(center)
    snap_ok = math.isfinite(f_c) and \
        float(np.linalg.norm(g_c[pr.free])) <= lam_zeta
    if snap_ok and f_c <= c_cur:
        changed = d_cur != 0.0
        return center.copy(), f_c, 0.0, changed

    x, _ = pr.solve_penalized(center, lam_zeta, pi_i, mu, opts)
    f_new = pr.value(x)
    d_new = float(np.linalg.norm(x - center))
    c_new = f_new + lam_zeta * d_new

    best, choice = c_cur, "cur"
    if c_new < best:
        best, choice = c_new, "new"
    if math.isfinite(f_c) and f_c <= best:
        choice = "center"   # prefer an exact coincidence on ties
    if choice == "center":
        return center.copy(), f_c, 0.0, not np.array_equal(center, pi_i)
    if choice == "new":
        return x, f_new, d_new, True
    return pi_i, f_i, d_cur, False


def solve_firm_subproblem(rows: LaggedRows, theta_j: np.ndarray, lam: float,
                          zeta: float, W, spec: MomentSpec, init: np.ndarray,
                          mu: float = 1e-8, opts: dict | None = None):
    """Approximate minimizer of one firm's penalized GMM problem.

    With ``zeta = 0`` this is plain firm GMM. Returns (point, flag) where the
    flag marks a solve that carries only the best point found.
    """
    if zeta < 0:
        raise ValueError("zeta must be non-negative")
    pr = FirmProblem(rows, spec, W)
    opts = opts or {"maxiter": 200, "ftol": 1e-13, "gtol": 1e-9}
    init = np.asarray(init, dtype=float)
    f0 = pr.value(init)
    if not math.isfinite(f0):
        raise DomainError("initial point is outside the objective domain")
    x, f, d, _ = _update_firm(pr, init, f0, np.asarray(theta_j, float),
                              lam * zeta, mu, opts)
    converged = True
    if lam * zeta > 0 and d > 0:
        q, g = pr.value_and_grad(x)
        diff = (x - theta_j)[pr.free]
        root = math.sqrt(float(diff @ diff) + mu * mu)
        pen_grad = g[pr.free] + lam * zeta * diff / root
        converged = float(np.linalg.norm(pen_grad)) <= max(10 * opts["gtol"], 1e-6)
    return x, converged


def _acs(problems, theta0, pi0, zeta_col, lam, config: CLassoConfig):
    """Alternate convex search on one subproblem; Q_inner is non-increasing."""
    n = len(problems)
    opts = _sub_opts(config)
    pi = pi0.copy()
    theta = theta0.copy()
    gvals = np.array([pr.value(pi[i]) for i, pr in enumerate(problems)])
    dists = np.linalg.norm(pi - theta, axis=1)
    q = float((gvals.sum() + lam * (zeta_col * dists).sum()) / n)
    trace = [q]
    for _ in range(config.max_inner):
        # center step: weighted Fermat-Weber location
        if zeta_col.sum() > 0:
            cand = weighted_geometric_median(pi, zeta_col)
            cand_d = np.linalg.norm(pi - cand, axis=1)
            if (zeta_col * cand_d).sum() <= (zeta_col * dists).sum():
                theta, dists = cand, cand_d
        # firm steps
        for i, pr in enumerate(problems):
            x, f, d, changed = _update_firm(pr, pi[i], gvals[i], theta,
                                            lam * zeta_col[i],
                                            config.smoothing_mu, opts)
            if changed:
                pi[i] = x
            gvals[i], dists[i] = f, d
        q_new = float((gvals.sum() + lam * (zeta_col * dists).sum()) / n)
        trace.append(q_new)
        done = abs(q_new - q) / (q + 1.0) < config.inner_tol
        q = q_new
        if done:
            break
    return pi, theta, trace


def alternate_convex_search(panel: PanelData, theta_init, pi_init, zeta_col,
                            lam: float, spec: MomentSpec,
                            W_list=None, config: CLassoConfig | None = None):
    """Public wrapper over the inner search; see ``fit`` for the full loop."""
    config = config or CLassoConfig(n_groups=1)
    rows_list = build_lags(panel)
    problems = [FirmProblem(r, spec, None if W_list is None else W_list[i])
                for i, r in enumerate(rows_list)]
    return _acs(problems, np.asarray(theta_init, float),
                np.asarray(pi_init, float), np.asarray(zeta_col, float),
                lam, config)


def pgmm_objective(panel: PanelData, pi, theta, lam: float, spec: MomentSpec,
                   W_list=None) -> float:
    """Full penalized objective: mean over firms of GMM term plus
    lam * prod_j ||pi_i - theta_j|| (exact norms, no smoothing)."""
    pi = np.asarray(pi, dtype=float)
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    rows_list = build_lags(panel)
    if pi.shape != (len(rows_list), spec.P):
        raise ValueError(f"pi has shape {pi.shape}, expected {(len(rows_list), spec.P)}")
    if theta.shape[1] != spec.P:
        raise ValueError("theta row length does not match the parameter count")
    total = 0.0
    for i, rows in enumerate(rows_list):
        pr = FirmProblem(rows, spec, None if W_list is None else W_list[i])
        dist = np.linalg.norm(pi[i] - theta, axis=1)
        total += pr.value(pi[i]) + lam * float(np.prod(dist))
    return total / len(rows_list)


# ---------------------------------------------------------------------------
# Classification and label matching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Classification:
    """Firm-to-group assignment; label -1 marks an unclassified firm."""

    labels: np.ndarray
    distances: np.ndarray
    threshold: float | None = None

    @property
    def n_classified(self) -> int:
        return int((self.labels >= 0).sum())

    def members(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.labels == j)


def classify(pi_hat, theta_hat, threshold: float | None = None) -> Classification:
    """Nearest-center assignment in Euclidean distance; ties go to the lowest
    group index; with a threshold, distant firms become unclassified."""
    pi_hat = np.atleast_2d(np.asarray(pi_hat, dtype=float))
    theta_hat = np.atleast_2d(np.asarray(theta_hat, dtype=float))
    if pi_hat.shape[1] != theta_hat.shape[1]:
        raise ValueError("pi and theta have incompatible widths")
    d = np.linalg.norm(pi_hat[:, None, :] - theta_hat[None, :, :], axis=2)
    labels = np.argmin(d, axis=1)
    min_d = d[np.arange(len(pi_hat)), labels]
    if threshold is not None:
        labels = np.where(min_d <= threshold, labels, -1)
    return Classification(labels=labels, distances=min_d, threshold=threshold)


def match_labels(estimated, truth):
    """Best label permutation and the resulting agreement rate.

    Groups are identified only up to relabeling, so accuracy is maximized
    over all permutations (exhaustive; intended for small group counts).
    Unclassified firms never match.
    """
    est = estimated.labels if isinstance(estimated, Classification) else np.asarray(estimated)
    true = np.asarray(truth)
    if len(est) != len(true):
        raise ValueError("label arrays have different lengths")
    n_groups = int(true.max()) + 1
    if est.max() + 1 > n_groups:
        raise ValueError(
            f"estimated labels use {int(est.max()) + 1} groups but truth has {n_groups}"
        )
    best_perm, best_acc = None, -1.0
    for perm in itertools.permutations(range(n_groups)):
        mapped = np.where(est >= 0, np.asarray(perm)[est], -1)
        acc = float(np.mean(mapped == true))
        if acc > best_acc:
            best_perm, best_acc = perm, acc
    return best_perm, best_acc


# ---------------------------------------------------------------------------
# Post-classification estimation and inference
# ---------------------------------------------------------------------------

@dataclass
class GroupEstimate:
    """Third-step estimate for one group."""

    index: int
    theta: np.ndarray
    cov: np.ndarray
    cov_flag: bool
    members: np.ndarray
    firm_ids: tuple
    residuals: dict            # firm_id -> {component name: array, "composite": array}
    n_rows: int


@dataclass
class GroupEstimates:
    """All group estimates plus bookkeeping flags."""

    groups: tuple
    spec: MomentSpec
    weighting: str
    skipped: tuple = ()

    def by_index(self, j: int) -> GroupEstimate | None:
        for g in self.groups:
            if g.index == j:
                return g
        return None

    def ssr(self) -> float:
        return float(sum(
            np.sum(r["composite"] ** 2)
            for g in self.groups for r in g.residuals.values()
        ))

    def n_resid(self) -> int:
        return int(sum(len(r["composite"])
                       for g in self.groups for r in g.residuals.values()))

    def msr(self) -> float:
        n = self.n_resid()
        return self.ssr() / n if n else math.nan


def sandwich_covariance(firm_moments: np.ndarray, mean_jac: np.ndarray,
                        W: np.ndarray | None, free_mask: np.ndarray):
    """Firm-clustered GMM sandwich, scaled by the number of firms.

    ``firm_moments`` holds one averaged moment vector per firm (n x P');
    ``mean_jac`` is the Jacobian of the group-averaged moments (P' x P).
    Returns (cov P x P with pinned rows zeroed, pseudo_inverse_flag).
    """
    n, p_prime = firm_moments.shape
    P = mean_jac.shape[1]
    Df = mean_jac[:, free_mask]
    Wm = np.eye(p_prime) if W is None else W
    A = Df.T @ Wm @ Df
    S = firm_moments.T @ firm_moments / n
    B = Df.T @ Wm @ S @ Wm @ Df
    flag = False
    try:
        if np.linalg.cond(A) > 1e12:
            raise np.linalg.LinAlgError
        A_inv = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        A_inv = np.linalg.pinv(A)
        flag = True
    Vf = A_inv @ B @ A_inv.T / n
    V = np.zeros((P, P))
    idx = np.flatnonzero(free_mask)
    V[np.ix_(idx, idx)] = 0.5 * (Vf + Vf.T)
    return V, flag


def sandwich_se(rows_list, theta, spec: MomentSpec, W: np.ndarray | None = None):
    """Covariance of a group estimate from its members' moments."""
    moments = np.empty((len(rows_list), spec.P_prime))
    jac = np.zeros((spec.P_prime, spec.P))
    for i, rows in enumerate(rows_list):
        _, gbar, J = _evaluate(rows, theta, spec, with_jac=True)
        moments[i] = gbar
        jac += J
    jac /= len(rows_list)
    return sandwich_covariance(moments, jac, W, spec.free_mask)


def _residual_components(rows, theta, spec):
    from .moments import gnr_residuals, acf_residuals, dynpanel_residual
    if spec.strategy == "gnr":
        eps, eta = gnr_residuals(rows, theta, spec)
        return {"eps": eps, "eta": eta, "composite": eps + eta}
    if spec.strategy == "acf":
        eps, v = acf_residuals(rows, theta, spec)
        return {"eps": eps, "v": v, "composite": eps + v}
    w = dynpanel_residual(rows, theta, spec)
    return {"w": w, "composite": w}


class _GroupProblem:
    """GMM on group-averaged moments: q(theta) = gbar_J' W gbar_J."""

    def __init__(self, problems, members, W=None):
        self.problems = [problems[i] for i in members]
        self.spec = self.problems[0].spec
        self.W = W
        self.free = self.spec.free_mask
        self.n_free = int(self.free.sum())
        self.bounds = self.problems[0].bounds

    def embed(self, x_free):
        theta = np.zeros(self.spec.P)
        theta[self.free] = x_free
        return theta

    def avg_moments(self, theta, with_jac=False):
        gbar = np.zeros(self.spec.P_prime)
        jac = np.zeros((self.spec.P_prime, self.spec.P)) if with_jac else None
        for pr in self.problems:
            _, g, J = _evaluate(pr.rows, theta, self.spec, with_jac=with_jac)
            gbar += g
            if with_jac:
                jac += J
        gbar /= len(self.problems)
        if with_jac:
            jac /= len(self.problems)
        return gbar, jac

    def value(self, theta):
        try:
            gbar, _ = self.avg_moments(theta)
        except DomainError:
            return math.inf
        q = float(gbar @ gbar) if self.W is None else float(gbar @ self.W @ gbar)
        return q if math.isfinite(q) else math.inf

    def solve(self, starts, opts=None):
        opts = opts or _POST_OPTS

        def fun(x):
            theta = self.embed(x)
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    gbar, J = self.avg_moments(theta, with_jac=True)
            except DomainError:
                return _BIG, np.zeros(self.n_free)
            Wg = gbar if self.W is None else self.W @ gbar
            q = float(gbar @ Wg)
            g = 2.0 * (J.T @ Wg)
            if not (math.isfinite(q) and np.all(np.isfinite(g))):
                return _BIG, np.zeros(self.n_free)
            return q, g[self.free]

        best_x, best_val = None, math.inf
        for x0_full in starts:
            x0 = np.asarray(x0_full, dtype=float)[self.free]
            for i, (lo, hi) in enumerate(self.bounds):
                if lo is not None:
                    x0[i] = max(x0[i], lo)
                if hi is not None:
                    x0[i] = min(x0[i], hi)
            res = minimize(fun, x0, jac=True, method="L-BFGS-B",
                           bounds=self.bounds, options=opts)
            val = self.value(self.embed(res.x))
            if val < best_val:
                best_x, best_val = self.embed(res.x), val
        if best_x is None:
            raise FitError("group GMM solve failed from every start")
        return best_x, best_val


def _group_starts(spec, rows_list, members, n_extra: int = 2):
    """Deterministic multistart set from the member set only."""
    pooled = stack_rows([rows_list[i] for i in members])
    base = default_start(spec, pooled)
    rng = np.random.default_rng(7)
    starts = [base]
    for _ in range(n_extra):
        pert = base + 0.2 * (np.abs(base) + 0.1) * rng.standard_normal(spec.P)
        if spec.strategy == "gnr":
            pert[0] = max(pert[0], 1e-3)
            pert[1] = max(pert[1], 1e-3)
        starts.append(pert)
    return starts


def post_lasso(panel: PanelData, classification: Classification,
               spec: MomentSpec, weighting: str = "identity",
               _rows_list=None, _problems=None) -> GroupEstimates:
    """Plain GMM per estimated group; unclassified firms are excluded."""
    rows_list = _rows_list if _rows_list is not None else build_lags(panel)
    problems = _problems if _problems is not None else \
        [FirmProblem(r, spec) for r in rows_list]
    labels = classification.labels
    n_groups = int(labels.max()) + 1 if (labels >= 0).any() else 0
    if n_groups == 0:
        raise FitError("no classified firms; nothing to estimate")

    groups, skipped = [], []
    for j in range(n_groups):
        members = np.flatnonzero(labels == j)
        if len(members) == 0:
            skipped.append(j)
            continue
        n_rows = int(sum(rows_list[i].n_obs for i in members))
        if n_rows < spec.P:
            raise UnderIdentifiedGroupError(
                f"group {j + 1} has {n_rows} usable periods for {spec.P} parameters"
            )
        gp = _GroupProblem(problems, members, W=None)
        starts = _group_starts(spec, rows_list, members)
        theta, _ = gp.solve(starts)
        if weighting == "two_step":
            gs = np.array([_evaluate(rows_list[i], theta, spec)[1] for i in members])
            S = gs.T @ gs / len(members)
            ridge = 1e-10 * np.trace(S) / spec.P_prime
            try:
                W = np.linalg.inv(S + ridge * np.eye(spec.P_prime))
                W = 0.5 * (W + W.T)
            except np.linalg.LinAlgError:
                W = None
            gp = _GroupProblem(problems, members, W=W)
            theta, _ = gp.solve([theta] + starts)
        cov, cov_flag = sandwich_se([rows_list[i] for i in members], theta,
                                    spec, gp.W)
        residuals = {
            rows_list[i].firm_id: _residual_components(rows_list[i], theta, spec)
            for i in members
        }
        groups.append(GroupEstimate(
            index=j, theta=theta, cov=cov, cov_flag=cov_flag,
            members=members,
            firm_ids=tuple(rows_list[i].firm_id for i in members),
            residuals=residuals, n_rows=n_rows,
        ))
    if skipped:
        warnings.warn(f"empty estimated groups skipped: {[j + 1 for j in skipped]}")
    return GroupEstimates(groups=tuple(groups), spec=spec,
                          weighting=weighting, skipped=tuple(skipped))


# ---------------------------------------------------------------------------
# Initial estimates and the full fit
# ---------------------------------------------------------------------------

@dataclass
class InitialEstimates:
    """Firm-wise GMM estimates used to start the penalized fit."""

    theta0s: np.ndarray
    pooled: np.ndarray
    W_list: list | None = None


def prepare_initial_estimates(panel: PanelData, spec: MomentSpec,
                              config: CLassoConfig,
                              _rows_list=None) -> InitialEstimates:
    """Multistart firm-wise GMM: pooled point plus random perturbations."""
    rows_list = _rows_list if _rows_list is not None else build_lags(panel)
    problems = [FirmProblem(r, spec) for r in rows_list]
    gp = _GroupProblem(problems, list(range(len(problems))), W=None)
    pooled, _ = gp.solve(_group_starts(spec, rows_list, list(range(len(rows_list)))))

    rng = np.random.default_rng(config.init_seed)
    theta0s = np.empty((len(problems), spec.P))
    for i, pr in enumerate(problems):
        starts = [pooled]
        for _ in range(config.multistart - 1):
            pert = pooled + config.multistart_scale * \
                (np.abs(pooled) + 0.1) * rng.standard_normal(spec.P)
            if spec.strategy == "gnr":
                pert[0] = max(pert[0], 1e-3)
                pert[1] = max(pert[1], 1e-3)
            starts.append(pert)
        best_x, best_val = None, math.inf
        for x0 in starts:
            x, val, _ = pr.solve(x0, _INIT_OPTS)
            if val < best_val:
                best_x, best_val = x, val
        if best_x is None or not math.isfinite(best_val):
            raise FitError(f"initial GMM solve failed for firm {rows_list[i].firm_id!r}")
        theta0s[i] = best_x

    W_list = None
    if config.weighting == "two_step":
        W_list = []
        for i, pr in enumerate(problems):
            ow = optimal_weighting(rows_list[i], theta0s[i], spec)
            W_list.append(ow.matrix)
        # re-solve firm estimates under their weighting matrices
        for i, rows in enumerate(rows_list):
            pr = FirmProblem(rows, spec, W_list[i])
            x, val, _ = pr.solve(theta0s[i], _INIT_OPTS)
            if math.isfinite(val):
                theta0s[i] = x
    return InitialEstimates(theta0s=theta0s, pooled=pooled, W_list=W_list)


@dataclass
class CLassoState:
    """First-step state: subproblem copies, centers, penalty weights."""

    pi: np.ndarray             # (J, N, P)
    theta: np.ndarray          # (J, P)
    zeta: np.ndarray           # (N, J)
    outer_value: float


@dataclass
class FitResult:
    """Everything produced by the three-step estimation."""

    spec: MomentSpec
    config: CLassoConfig
    lam: float
    state: CLassoState
    classification: Classification
    estimates: GroupEstimates
    firm_estimates: np.ndarray
    pi_hat: np.ndarray
    trace: list
    converged: bool
    firm_ids: tuple

    def assignment_records(self) -> list[dict]:
        recs = []
        for i, fid in enumerate(self.firm_ids):
            lab = int(self.classification.labels[i])
            recs.append({
                "firm": fid,
                "group": lab + 1 if lab >= 0 else 0,   # 0 marks unclassified
                "distance": float(self.classification.distances[i]),
            })
        return recs

    def to_dict(self) -> dict:
        return {
            "moments": self.spec.to_dict(),
            "classo": self.config.to_dict(),
            "lambda_used": self.lam,
            "n_firms": len(self.firm_ids),
            "converged": self.converged,
            "trace": [float(q) for q in self.trace],
            "theta": {str(g.index + 1): g.theta.tolist()
                      for g in self.estimates.groups},
            "cov": {str(g.index + 1): g.cov.tolist()
                    for g in self.estimates.groups},
            "cov_flags": {str(g.index + 1): bool(g.cov_flag)
                          for g in self.estimates.groups},
            "group_sizes": {str(g.index + 1): int(len(g.members))
                            for g in self.estimates.groups},
            "skipped_groups": [j + 1 for j in self.estimates.skipped],
            "assignment": self.assignment_records(),
        }


def fit(panel: PanelData, config: CLassoConfig, spec: MomentSpec,
        init: InitialEstimates | None = None) -> FitResult:
    """Three-step estimation: penalized first step, classification, re-fit.

    The outer loop cycles over the group subproblems (recomputing the fixed
    penalty weights before each), runs the alternate convex search on each,
    and stops on a relative-change criterion. A cycle that would increase the
    outer value is rolled back and treated as converged.
    """
    rows_list = build_lags(panel)
    n = len(rows_list)
    J = config.n_groups
    if J > n:
        raise ValueError(f"n_groups = {J} exceeds the number of firms {n}")
    lam = config.lam if config.lam is not None else panel.mean_usable ** -0.25

    if init is None:
        init = prepare_initial_estimates(panel, spec, config, _rows_list=rows_list)
    W_list = init.W_list
    problems = [FirmProblem(r, spec, None if W_list is None else W_list[i])
                for i, r in enumerate(rows_list)]

    P = spec.P
    pi = np.repeat(init.theta0s[None, :, :], J, axis=0).copy()
    theta = np.zeros((J, P))
    zeta = np.ones((n, J))

    trace: list[float] = []
    prev = None
    converged = False
    for _ in range(config.max_outer):
        snap_pi, snap_theta, snap_zeta = pi.copy(), theta.copy(), zeta.copy()
        q_subs = []
        for j in range(J):
            others = [jp for jp in range(J) if jp != j]
            if others:
                dists = np.stack([np.linalg.norm(pi[jp] - theta[jp], axis=1)
                                  for jp in others])
                zeta[:, j] = np.prod(dists, axis=0)
            else:
                zeta[:, j] = 1.0
            pi[j], theta[j], sub_trace = _acs(problems, theta[j], pi[j],
                                              zeta[:, j], lam, config)
            q_subs.append(sub_trace[-1])
        q_outer = float(sum(q_subs))
        if prev is not None and q_outer > prev + 1e-10 * (1.0 + abs(prev)):
            pi, theta, zeta = snap_pi, snap_theta, snap_zeta
            q_outer = prev
            converged = True
            break
        trace.append(q_outer)
        if prev is not None and abs(q_outer - prev) / (prev + 1.0) < config.outer_tol:
            converged = True
            break
        prev = q_outer

    pi_hat = pi.mean(axis=0)
    classification = classify(pi_hat, theta, config.classification_threshold)
    estimates = post_lasso(panel, classification, spec,
                           weighting=config.weighting,
                           _rows_list=rows_list, _problems=problems)
    state = CLassoState(pi=pi, theta=theta, zeta=zeta,
                        outer_value=trace[-1] if trace else math.nan)
    return FitResult(
        spec=spec, config=config, lam=lam, state=state,
        classification=classification, estimates=estimates,
        firm_estimates=init.theta0s, pi_hat=pi_hat, trace=trace,
        converged=converged, firm_ids=tuple(r.firm_id for r in rows_list),
    )
