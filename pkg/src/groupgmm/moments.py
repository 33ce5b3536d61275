"""Moment systems for three production-function identification strategies.

Each strategy defines a parameter layout, residual functions, a per-period
moment vector of instrument-interacted residuals, firm-averaged moments, the
firm-level GMM quadratic form, and closed-form Jacobians/gradients.

Strategies
----------
``gnr``
    Share-equation (first-order condition) approach for gross output:
    the share residual identifies the intermediates elasticity and the mean
    of the exponentiated ex-post shock; a linear AR(1) law of motion for
    persistent productivity identifies the remaining parameters.
``acf``
    Control-function approach with a linear first stage in (k, l, m).
``dynpanel``
    Quasi-differenced dynamic panel estimator with lagged instruments.

Layouts are dense vectors; positions are given by ``MomentSpec.param_names``.
With an AR(1) intercept the production intercept is exactly collinear with
the AR constant (the law of motion absorbs it), so the ``beta0`` slot is kept
in the layout but excluded from ``free_mask`` and pinned to zero by solvers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .panel import LaggedRows

STRATEGIES = ("gnr", "acf", "dynpanel")


class DomainError(ValueError):
    """Parameter value outside the residual function's domain."""


@dataclass(frozen=True)
class MomentSpec:
    """Identification strategy plus functional-form switches.

    Parameters
    ----------
    strategy : str
        One of ``gnr``, ``acf``, ``dynpanel``.
    ar1_intercept : bool
        Productivity law of motion with intercept (gnr only):
        h(x) = delta0 + delta1 * x instead of h(x) = delta * x.
    include_labor : bool
        Three-input (k, l, m) versus two-input (k, m) layout.
    """

    strategy: str
    ar1_intercept: bool = False
    include_labor: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.ar1_intercept and self.strategy != "gnr":
            raise ValueError("ar1_intercept is only available for the gnr strategy")

    @property
    def param_names(self) -> tuple[str, ...]:
        lab = self.include_labor
        if self.strategy == "gnr":
            names = ["beta3", "ee", "beta0", "beta1"] + (["beta2"] if lab else [])
            names += ["delta0", "delta1"] if self.ar1_intercept else ["delta"]
            return tuple(names)
        if self.strategy == "acf":
            names = ["alpha0", "alpha1"] + (["alpha2"] if lab else []) + ["alpha3"]
            names += ["beta0", "beta1"] + (["beta2"] if lab else []) + ["delta"]
            return tuple(names)
        names = ["beta0", "beta1"] + (["beta2"] if lab else []) + ["beta3", "delta"]
        return tuple(names)

    @property
    def moment_names(self) -> tuple[str, ...]:
        lab = self.include_labor
        if self.strategy == "gnr":
            names = ["eps", "exp_eps", "eta", "eta_k"] + (["eta_l"] if lab else [])
            names += ["eta_yr_lag"]
            if self.ar1_intercept:
                names += ["eta_k_lag"]
            return tuple(names)
        if self.strategy == "acf":
            names = ["eps", "eps_k"] + (["eps_l"] if lab else []) + ["eps_m"]
            names += ["v", "v_k", "v_k_lag"] + (["v_l_lag"] if lab else []) + ["v_m_lag"]
            return tuple(names)
        names = ["w", "w_k"] + (["w_l"] if lab else []) + ["w_k_lag"]
        names += (["w_l_lag"] if lab else []) + ["w_m_lag"]
        return tuple(names)

    @property
    def P(self) -> int:
        return len(self.param_names)

    @property
    def P_prime(self) -> int:
        return len(self.moment_names)

    @property
    def free_mask(self) -> np.ndarray:
        """Free coordinates for optimization; beta0 is pinned to zero when the
        AR(1) intercept makes it redundant."""
        mask = np.ones(self.P, dtype=bool)
        if self.strategy == "gnr" and self.ar1_intercept:
            mask[self.index("beta0")] = False
        return mask

    def index(self, name: str) -> int:
        return self.param_names.index(name)

    def needs_shares(self) -> bool:
        return self.strategy == "gnr"

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "ar1_intercept": self.ar1_intercept,
            "include_labor": self.include_labor,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MomentSpec":
        return cls(
            strategy=data["strategy"],
            ar1_intercept=bool(data.get("ar1_intercept", False)),
            include_labor=bool(data.get("include_labor", True)),
        )


def make_theta(spec: MomentSpec, **values: float) -> np.ndarray:
    """Build a parameter vector from named slots; unnamed slots are zero."""
    theta = np.zeros(spec.P)
    for name, val in values.items():
        theta[spec.index(name)] = val
    return theta


def _check_rows(rows: LaggedRows, spec: MomentSpec) -> None:
    if spec.include_labor and rows.l is None:
        raise ValueError(
            "moment spec includes labor but the panel has no labor column; "
            "set include_labor=False or supply an l column"
        )


# ---------------------------------------------------------------------------
# Strategy evaluations: residuals, per-period moments, averaged Jacobians
# ---------------------------------------------------------------------------

def _gnr_pieces(rows: LaggedRows, theta: np.ndarray, spec: MomentSpec):
    b3, ee = theta[0], theta[1]
    if b3 <= 0.0 or ee <= 0.0:
        raise DomainError(f"gnr requires beta3 > 0 and ee > 0, got ({b3}, {ee})")
    b0 = theta[spec.index("beta0")]
    b1 = theta[spec.index("beta1")]
    b2 = theta[spec.index("beta2")] if spec.include_labor else 0.0
    if spec.ar1_intercept:
        d0, d1 = theta[spec.index("delta0")], theta[spec.index("delta1")]
    else:
        d0, d1 = 0.0, theta[spec.index("delta")]

    lc = np.log(b3 * ee)
    eps = lc - rows.s
    eps_lag = lc - rows.s_lag
    yr = rows.y - b3 * rows.m - eps
    yr_lag = rows.y_lag - b3 * rows.m_lag - eps_lag
    arg = yr_lag - b1 * rows.k_lag
    lin = b0 + b1 * rows.k
    if spec.include_labor:
        arg = arg - b2 * rows.l_lag
        lin = lin + b2 * rows.l
    eta = yr - lin - (d0 + d1 * arg)
    return eps, eta, yr_lag, arg, (b3, ee, d1)


def gnr_residuals(rows: LaggedRows, theta: np.ndarray, spec: MomentSpec):
    """Share-equation and law-of-motion residuals (eps, eta), per period."""
    _check_rows(rows, spec)
    eps, eta, _, _, _ = _gnr_pieces(rows, theta, spec)
    return eps, eta


def acf_residuals(rows: LaggedRows, theta: np.ndarray, spec: MomentSpec):
    """First-stage and innovation residuals (eps, v), per period."""
    _check_rows(rows, spec)
    a0 = theta[spec.index("alpha0")]
    a1 = theta[spec.index("alpha1")]
    a2 = theta[spec.index("alpha2")] if spec.include_labor else 0.0
    a3 = theta[spec.index("alpha3")]
    b0 = theta[spec.index("beta0")]
    b1 = theta[spec.index("beta1")]
    b2 = theta[spec.index("beta2")] if spec.include_labor else 0.0
    delta = theta[spec.index("delta")]

    phi = a0 + a1 * rows.k + a3 * rows.m
    phi_lag = a0 + a1 * rows.k_lag + a3 * rows.m_lag
    lin = b0 + b1 * rows.k
    lin_lag = b0 + b1 * rows.k_lag
    if spec.include_labor:
        phi = phi + a2 * rows.l
        phi_lag = phi_lag + a2 * rows.l_lag
        lin = lin + b2 * rows.l
        lin_lag = lin_lag + b2 * rows.l_lag
    eps = rows.y - phi
    v = rows.y - lin - delta * (phi_lag - lin_lag)
    return eps, v


def dynpanel_residual(rows: LaggedRows, theta: np.ndarray, spec: MomentSpec):
    """Quasi-differenced residual w, per period."""
    _check_rows(rows, spec)
    b0 = theta[spec.index("beta0")]
    b1 = theta[spec.index("beta1")]
    b2 = theta[spec.index("beta2")] if spec.include_labor else 0.0
    b3 = theta[spec.index("beta3")]
    delta = theta[spec.index("delta")]
    w = (rows.y - delta * rows.y_lag) - (1.0 - delta) * b0 \
        - b1 * (rows.k - delta * rows.k_lag) \
        - b3 * (rows.m - delta * rows.m_lag)
    if spec.include_labor:
        w = w - b2 * (rows.l - delta * rows.l_lag)
    return w


def _gnr_eval(rows, theta, spec, with_jac):
    eps, eta, yr_lag, arg, (b3, ee, d1) = _gnr_pieces(rows, theta, spec)
    n = rows.n_obs
    exp_eps = np.exp(eps)
    instruments = [np.ones(n), rows.k]
    if spec.include_labor:
        instruments.append(rows.l)
    instruments.append(yr_lag)
    if spec.ar1_intercept:
        instruments.append(rows.k_lag)

    G = np.empty((n, spec.P_prime))
    G[:, 0] = eps
    G[:, 1] = exp_eps - ee
    for col, z in enumerate(instruments, start=2):
        G[:, col] = eta * z
    gbar = G.mean(axis=0)
    if not with_jac:
        return G, gbar, None

    # residual derivatives; eps depends on (beta3, ee) only
    d_eps_b3 = 1.0 / b3
    d_eps_ee = 1.0 / ee
    d_yr_b3 = -rows.m - 1.0 / b3
    d_yrlag_b3 = -rows.m_lag - 1.0 / b3
    d_eta = np.zeros((n, spec.P))
    d_eta[:, 0] = d_yr_b3 - d1 * d_yrlag_b3
    d_eta[:, 1] = -(1.0 - d1) / ee
    d_eta[:, spec.index("beta0")] = -1.0
    d_eta[:, spec.index("beta1")] = -rows.k + d1 * rows.k_lag
    if spec.include_labor:
        d_eta[:, spec.index("beta2")] = -rows.l + d1 * rows.l_lag
    if spec.ar1_intercept:
        d_eta[:, spec.index("delta0")] = -1.0
        d_eta[:, spec.index("delta1")] = -arg
    else:
        d_eta[:, spec.index("delta")] = -arg

    J = np.zeros((spec.P_prime, spec.P))
    J[0, 0] = d_eps_b3
    J[0, 1] = d_eps_ee
    mean_exp = exp_eps.mean()
    J[1, 0] = mean_exp * d_eps_b3
    J[1, 1] = mean_exp * d_eps_ee - 1.0
    for col, z in enumerate(instruments, start=2):
        J[col, :] = (z[:, None] * d_eta).mean(axis=0)
    # the yr_lag instrument itself moves with (beta3, ee)
    row_yr = spec.moment_names.index("eta_yr_lag")
    J[row_yr, 0] += (eta * d_yrlag_b3).mean()
    J[row_yr, 1] += (eta * (-1.0 / ee)).mean()
    return G, gbar, J


def _acf_eval(rows, theta, spec, with_jac):
    eps, v = acf_residuals(rows, theta, spec)
    n = rows.n_obs
    delta = theta[spec.index("delta")]
    b0 = theta[spec.index("beta0")]
    b1 = theta[spec.index("beta1")]
    b2 = theta[spec.index("beta2")] if spec.include_labor else 0.0
    a0 = theta[spec.index("alpha0")]
    a1 = theta[spec.index("alpha1")]
    a2 = theta[spec.index("alpha2")] if spec.include_labor else 0.0
    a3 = theta[spec.index("alpha3")]

    z_eps = [np.ones(n), rows.k] + ([rows.l] if spec.include_labor else []) + [rows.m]
    z_v = [np.ones(n), rows.k, rows.k_lag] \
        + ([rows.l_lag] if spec.include_labor else []) + [rows.m_lag]

    G = np.empty((n, spec.P_prime))
    for col, z in enumerate(z_eps):
        G[:, col] = eps * z
    off = len(z_eps)
    for col, z in enumerate(z_v):
        G[:, off + col] = v * z
    gbar = G.mean(axis=0)
    if not with_jac:
        return G, gbar, None

    d_eps = np.zeros((n, spec.P))
    d_eps[:, spec.index("alpha0")] = -1.0
    d_eps[:, spec.index("alpha1")] = -rows.k
    if spec.include_labor:
        d_eps[:, spec.index("alpha2")] = -rows.l
    d_eps[:, spec.index("alpha3")] = -rows.m

    phi_lag = a0 + a1 * rows.k_lag + a3 * rows.m_lag
    lin_lag = b0 + b1 * rows.k_lag
    if spec.include_labor:
        phi_lag = phi_lag + a2 * rows.l_lag
        lin_lag = lin_lag + b2 * rows.l_lag
    d_v = np.zeros((n, spec.P))
    d_v[:, spec.index("alpha0")] = -delta
    d_v[:, spec.index("alpha1")] = -delta * rows.k_lag
    if spec.include_labor:
        d_v[:, spec.index("alpha2")] = -delta * rows.l_lag
    d_v[:, spec.index("alpha3")] = -delta * rows.m_lag
    d_v[:, spec.index("beta0")] = -(1.0 - delta)
    d_v[:, spec.index("beta1")] = -(rows.k - delta * rows.k_lag)
    if spec.include_labor:
        d_v[:, spec.index("beta2")] = -(rows.l - delta * rows.l_lag)
    d_v[:, spec.index("delta")] = -(phi_lag - lin_lag)

    J = np.zeros((spec.P_prime, spec.P))
    for col, z in enumerate(z_eps):
        J[col, :] = (z[:, None] * d_eps).mean(axis=0)
    for col, z in enumerate(z_v):
        J[off + col, :] = (z[:, None] * d_v).mean(axis=0)
    return G, gbar, J


def _dyn_eval(rows, theta, spec, with_jac):
    w = dynpanel_residual(rows, theta, spec)
    n = rows.n_obs
    delta = theta[spec.index("delta")]
    b0 = theta[spec.index("beta0")]
    b1 = theta[spec.index("beta1")]
    b2 = theta[spec.index("beta2")] if spec.include_labor else 0.0
    b3 = theta[spec.index("beta3")]

    z = [np.ones(n), rows.k] + ([rows.l] if spec.include_labor else [])
    z += [rows.k_lag] + ([rows.l_lag] if spec.include_labor else []) + [rows.m_lag]

    G = np.empty((n, spec.P_prime))
    for col, zi in enumerate(z):
        G[:, col] = w * zi
    gbar = G.mean(axis=0)
    if not with_jac:
        return G, gbar, None

    d_w = np.zeros((n, spec.P))
    d_w[:, spec.index("beta0")] = -(1.0 - delta)
    d_w[:, spec.index("beta1")] = -(rows.k - delta * rows.k_lag)
    if spec.include_labor:
        d_w[:, spec.index("beta2")] = -(rows.l - delta * rows.l_lag)
    d_w[:, spec.index("beta3")] = -(rows.m - delta * rows.m_lag)
    d_delta = -rows.y_lag + b0 + b1 * rows.k_lag + b3 * rows.m_lag
    if spec.include_labor:
        d_delta = d_delta + b2 * rows.l_lag
    d_w[:, spec.index("delta")] = d_delta

    J = np.zeros((spec.P_prime, spec.P))
    for col, zi in enumerate(z):
        J[col, :] = (zi[:, None] * d_w).mean(axis=0)
    return G, gbar, J


_EVALS = {"gnr": _gnr_eval, "acf": _acf_eval, "dynpanel": _dyn_eval}


def _evaluate(rows, theta, spec, with_jac=False):
    _check_rows(rows, spec)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.P,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({spec.P},)")
    return _EVALS[spec.strategy](rows, theta, spec, with_jac)


def moment_vector(rows: LaggedRows, theta, spec: MomentSpec) -> np.ndarray:
    """Per-period moment matrix of shape (n_obs, P'); one row per period."""
    G, _, _ = _evaluate(rows, theta, spec)
    return G


def firm_avg_moments(rows: LaggedRows, theta, spec: MomentSpec) -> np.ndarray:
    """Arithmetic mean of per-period moment vectors over the firm's periods."""
    if rows.n_obs < 1:
        raise ValueError("firm has no usable lagged rows")
    _, gbar, _ = _evaluate(rows, theta, spec)
    return gbar


def moment_jacobian(rows: LaggedRows, theta, spec: MomentSpec) -> np.ndarray:
    """Jacobian (P' x P) of the firm-averaged moment vector."""
    _, _, J = _evaluate(rows, theta, spec, with_jac=True)
    return J


def gmm_objective(rows: LaggedRows, theta, W, spec: MomentSpec) -> float:
    """Quadratic form gbar' W gbar; W = None means the identity."""
    _, gbar, _ = _evaluate(rows, theta, spec)
    if W is None:
        return float(gbar @ gbar)
    return float(gbar @ W @ gbar)


def gmm_value_and_gradient(rows: LaggedRows, theta, W, spec: MomentSpec):
    """Objective and its analytic gradient 2 J' W gbar in one evaluation."""
    _, gbar, J = _evaluate(rows, theta, spec, with_jac=True)
    if W is None:
        return float(gbar @ gbar), 2.0 * (J.T @ gbar)
    Wg = W @ gbar
    return float(gbar @ Wg), 2.0 * (J.T @ Wg)


def gmm_gradient(rows: LaggedRows, theta, W, spec: MomentSpec) -> np.ndarray:
    return gmm_value_and_gradient(rows, theta, W, spec)[1]


@dataclass(frozen=True)
class OptimalWeighting:
    """Two-step weighting matrix; identity_fallback marks a singular S."""

    matrix: np.ndarray
    identity_fallback: bool = False


def optimal_weighting(rows: LaggedRows, theta_first, spec: MomentSpec,
                      ridge_scale: float = 1e-10) -> OptimalWeighting:
    """Inverse outer-product weighting from first-step estimates.

    W = (mean_t g_t g_t' + ridge I)^(-1) with ridge = ridge_scale * tr(S)/P'.
    Falls back to the identity (flagged) if inversion still fails.
    """
    G, _, _ = _evaluate(rows, theta_first, spec)
    S = G.T @ G / G.shape[0]
    p = spec.P_prime
    ridge = ridge_scale * np.trace(S) / p
    S_r = S + ridge * np.eye(p)
    try:
        chol = np.linalg.cholesky(S_r)
        W = np.linalg.inv(chol.T) @ np.linalg.inv(chol)
        W = 0.5 * (W + W.T)
        return OptimalWeighting(matrix=W)
    except np.linalg.LinAlgError:
        return OptimalWeighting(matrix=np.eye(p), identity_fallback=True)


# ---------------------------------------------------------------------------
# Coarse data-driven starting values
# ---------------------------------------------------------------------------

def _lstsq_coef(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return coef


def default_start(spec: MomentSpec, rows: LaggedRows) -> np.ndarray:
    """Heuristic starting point from pooled data (share/OLS based)."""
    _check_rows(rows, spec)
    theta = np.zeros(spec.P)
    if spec.strategy == "gnr":
        b3 = float(np.clip(1.0 / np.mean(np.exp(-rows.s)), 1e-3, 1e3))
        ee = float(np.clip(np.exp(np.mean(rows.s)) / b3, 1e-3, 1e3))
        theta[0], theta[1] = b3, ee
        lc = np.log(b3 * ee)
        yr = rows.y - b3 * rows.m - (lc - rows.s)
        yr_lag = rows.y_lag - b3 * rows.m_lag - (lc - rows.s_lag)
        cols = [np.ones_like(yr), rows.k, yr_lag, rows.k_lag]
        if spec.include_labor:
            cols.insert(2, rows.l)
        coef = _lstsq_coef(np.column_stack(cols), yr)
        theta[spec.index("beta1")] = coef[1]
        if spec.include_labor:
            theta[spec.index("beta2")] = coef[2]
        slope = float(np.clip(coef[3 if spec.include_labor else 2], -0.98, 0.98))
        if spec.ar1_intercept:
            theta[spec.index("delta0")] = coef[0]
            theta[spec.index("delta1")] = slope
        else:
            theta[spec.index("beta0")] = coef[0]
            theta[spec.index("delta")] = slope
        return theta

    cols = [np.ones(rows.n_obs), rows.k] + ([rows.l] if spec.include_labor else []) + [rows.m]
    coef = _lstsq_coef(np.column_stack(cols), rows.y)
    if spec.strategy == "acf":
        theta[spec.index("alpha0")] = coef[0]
        theta[spec.index("alpha1")] = coef[1]
        if spec.include_labor:
            theta[spec.index("alpha2")] = coef[2]
        theta[spec.index("alpha3")] = coef[-1]
        theta[spec.index("beta0")] = coef[0]
        theta[spec.index("beta1")] = coef[1]
        if spec.include_labor:
            theta[spec.index("beta2")] = coef[2]
        theta[spec.index("delta")] = 0.5
        return theta

    theta[spec.index("beta0")] = coef[0]
    theta[spec.index("beta1")] = coef[1]
    if spec.include_labor:
        theta[spec.index("beta2")] = coef[2]
    theta[spec.index("beta3")] = coef[-1]
    theta[spec.index("delta")] = 0.5
    return theta
