"""Synthetic firm panels from a dynamic model with latent technology groups.

Each firm draws a Cobb-Douglas technology (capital + intermediates, constant
returns) from one of several groups, faces quadratic capital adjustment costs,
and chooses intermediates and investment optimally. Intermediates follow a
closed form; investment is a truncated convergent series. Productivity has a
persistent AR(1) component plus an ex-post shock. A long burn-in ensures
sampling from the stationary distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.signal import lfilter

from .panel import FirmSeries, PanelData


class SimulationError(RuntimeError):
    """A simulated firm produced an unusable path (non-positive levels)."""


@dataclass(frozen=True)
class GroupParams:
    """Technology and shock parameters of one latent group."""

    share: float          # relative occurrence N_j / N
    gamma: float          # output elasticity of intermediates
    sigma_eps: float      # sd of ex-post shock
    alpha: float          # AR(1) constant
    delta: float          # AR(1) slope
    sigma_eta: float      # sd of AR(1) innovation

    def __post_init__(self):
        if not 0.0 < self.share < 1.0:
            raise ValueError(f"share must be in (0, 1), got {self.share}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if not abs(self.delta) < 1.0:
            raise ValueError(f"|delta| must be < 1 for stationarity, got {self.delta}")
        if self.sigma_eps < 0 or self.sigma_eta < 0:
            raise ValueError("shock standard deviations must be non-negative")

    @property
    def beta(self) -> float:
        """Capital elasticity under constant returns: 1 - gamma."""
        return 1.0 - self.gamma

    @property
    def ee(self) -> float:
        """Expectation of exp of the ex-post shock: exp(sigma_eps^2 / 2)."""
        return float(np.exp(self.sigma_eps**2 / 2.0))


#: Baseline three-group configuration used throughout the experiments.
DEFAULT_GROUPS = (
    GroupParams(share=0.30, gamma=0.35, sigma_eps=0.02, alpha=0.00, delta=0.90, sigma_eta=0.01),
    GroupParams(share=0.40, gamma=0.50, sigma_eps=0.04, alpha=0.20, delta=0.80, sigma_eta=0.01),
    GroupParams(share=0.30, gamma=0.65, sigma_eps=0.02, alpha=0.40, delta=0.70, sigma_eta=0.01),
)


@dataclass(frozen=True)
class SimConfig:
    """Full parameterization of the data generating process."""

    n_firms: int = 200
    horizon: int = 15          # T: usable periods after the lag-supplying period 0
    groups: tuple[GroupParams, ...] = DEFAULT_GROUPS
    b: float = 0.985           # discount factor
    d: float = 0.100           # depreciation rate
    burn_in: int = 1000
    series_terms: int = 1001
    seed: int = 0

    def __post_init__(self):
        if self.n_firms < 1 or self.horizon < 2:
            raise ValueError("need n_firms >= 1 and horizon >= 2")
        total = sum(g.share for g in self.groups)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"group shares must sum to 1, got {total}")
        if not 0.0 < self.b < 1.0 or not 0.0 < self.d < 1.0:
            raise ValueError("need b and d in (0, 1)")
        if self.b * (1.0 - self.d) >= 1.0:
            raise ValueError("investment series diverges: b(1 - d) must be < 1")
        if self.series_terms < 1 or self.burn_in < 0:
            raise ValueError("need series_terms >= 1 and burn_in >= 0")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["groups"] = [asdict(g) for g in self.groups]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        data = dict(data)
        if "groups" in data:
            data["groups"] = tuple(GroupParams(**g) for g in data["groups"])
        return cls(**data)


@dataclass(frozen=True)
class SimulatedPanel:
    """A simulated panel plus the latent ground truth per firm."""

    panel: PanelData
    group_index: np.ndarray            # 0-based group per firm
    phi: np.ndarray                    # adjustment-cost parameter per firm
    omega: tuple[np.ndarray, ...]      # persistent productivity, emitted periods
    eps: tuple[np.ndarray, ...]        # ex-post shocks
    eta: tuple[np.ndarray, ...]        # AR(1) innovations
    investment: tuple[np.ndarray, ...] # investment levels, emitted periods
    config: SimConfig = field(repr=False, default=None)


def group_sizes(shares, n: int) -> np.ndarray:
    """Apportion n firms to groups by largest remainder."""
    shares = np.asarray(shares, dtype=float)
    raw = shares * n
    sizes = np.floor(raw).astype(int)
    short = n - sizes.sum()
    if short > 0:
        order = np.argsort(-(raw - sizes))
        sizes[order[:short]] += 1
    return sizes


def optimal_intermediate(omega, K, gamma: float, beta: float, ee: float):
    """Closed-form optimal intermediate input in levels.

    M* = (gamma * exp(omega) * ee)^(1/beta) * K, requiring K > 0.
    """
    K = np.asarray(K, dtype=float)
    if np.any(K <= 0):
        raise ValueError("capital must be strictly positive")
    return (gamma * np.exp(omega) * ee) ** (1.0 / beta) * K


def _investment_coeffs(g: GroupParams, b: float, d: float, terms: int):
    """Per-term constants of the investment series for one group.

    Term tau contributes exp(base[tau] + slope[tau] * omega), where the inner
    geometric sums over the AR(1) slope are evaluated in closed form.
    """
    if b * (1.0 - d) >= 1.0:
        raise ValueError("investment series diverges: b(1 - d) must be < 1")
    tau = np.arange(terms, dtype=float)
    delta = g.delta
    if delta == 1.0:
        sum_d = tau + 1.0
        sum_d2 = tau + 1.0
    else:
        sum_d = (1.0 - delta ** (tau + 1.0)) / (1.0 - delta)
        sum_d2 = (1.0 - (delta**2) ** (tau + 1.0)) / (1.0 - delta**2)
    beta = g.beta
    base = tau * np.log(b * (1.0 - d)) + g.alpha * sum_d / beta \
        + g.sigma_eta**2 * sum_d2 / (2.0 * beta**2)
    slope = delta ** (tau + 1.0) / beta
    scale = b * beta * (g.gamma * g.ee) ** (g.gamma / beta)
    return base, slope, scale


def optimal_investment(omega, g: GroupParams, phi: float, b: float, d: float,
                       terms: int):
    """Optimal investment in levels via the truncated series.

    Vectorized over omega; the partial sum keeps exactly ``terms`` terms.
    """
    base, slope, scale = _investment_coeffs(g, b, d, terms)
    omega_arr = np.atleast_1d(np.asarray(omega, dtype=float))
    out = np.empty_like(omega_arr)
    chunk = max(1, 2_000_000 // terms)
    for lo in range(0, len(omega_arr), chunk):
        block = omega_arr[lo:lo + chunk, None]
        out[lo:lo + chunk] = np.exp(base[None, :] + slope[None, :] * block).sum(axis=1)
    out *= scale / phi
    return out if np.ndim(omega) else float(out[0])


def true_theta(g: GroupParams, ar1_intercept: bool = True) -> np.ndarray:
    """Group parameters mapped to the two-input share-based moment layout.

    With an AR(1) intercept: (beta3, ee, beta0, beta1, delta0, delta1) =
    (gamma, exp(sigma_eps^2/2), 0, 1 - gamma, alpha, delta). Without one the
    AR constant must be zero for the mapping to exist.
    """
    if ar1_intercept:
        return np.array([g.gamma, g.ee, 0.0, g.beta, g.alpha, g.delta])
    if g.alpha != 0.0:
        raise ValueError("AR(1) constant is nonzero; an intercept-free layout cannot hold")
    return np.array([g.gamma, g.ee, 0.0, g.beta, g.delta])


def _firm_stream(seed: int, firm_index: int, attempt: int = 0) -> np.random.Generator:
    """Counter-based per-firm substream; independent of scheduling order."""
    ss = np.random.SeedSequence(entropy=(int(seed), int(firm_index), int(attempt)))
    return np.random.Generator(np.random.Philox(ss))


def _simulate_firm(g: GroupParams, cfg: SimConfig, rng: np.random.Generator):
    """Simulate one firm; returns emitted log-level rows and latent series."""
    total = cfg.burn_in + cfg.horizon + 1   # simulated indices 0 .. total-1
    base, slope, scale = _investment_coeffs(g, cfg.b, cfg.d, cfg.series_terms)

    phi = float(np.exp(-rng.normal(0.0, 1.0)))   # log(phi^-1) ~ N(0, 1)
    omega0 = float(rng.normal(g.alpha / (1.0 - g.delta),
                              np.sqrt(g.sigma_eta**2 / (1.0 - g.delta**2))))
    eta = np.concatenate(([0.0], rng.normal(0.0, g.sigma_eta, size=total - 1)))
    eps = rng.normal(0.0, g.sigma_eps, size=total)

    # omega_t = alpha + delta * omega_{t-1} + eta_t for t >= 1
    drive = g.alpha + eta[1:]
    omega = np.empty(total)
    omega[0] = omega0
    if total > 1:
        omega[1:] = lfilter([1.0], [1.0, -g.delta], drive, zi=[g.delta * omega0])[0]

    # investment depends on omega only, so the whole path is vectorized
    inv = np.empty(total)
    chunk = max(1, 2_000_000 // cfg.series_terms)
    for lo in range(0, total, chunk):
        block = omega[lo:lo + chunk, None]
        inv[lo:lo + chunk] = np.exp(base[None, :] + slope[None, :] * block).sum(axis=1)
    inv *= scale / phi

    # K_t = (1 - d) K_{t-1} + I_{t-1}, K_0 = 0
    K = np.empty(total)
    K[0] = 0.0
    if total > 1:
        K[1:] = lfilter([1.0], [1.0, -(1.0 - cfg.d)], inv[:-1])

    keep = slice(cfg.burn_in, total)
    K_kept, omega_kept, eps_kept = K[keep], omega[keep], eps[keep]
    if np.any(K_kept <= 0.0) or not np.all(np.isfinite(K_kept)):
        return None

    M_kept = optimal_intermediate(omega_kept, K_kept, g.gamma, g.beta, g.ee)
    k = np.log(K_kept)
    m = np.log(M_kept)
    y = g.beta * k + g.gamma * m + omega_kept + eps_kept
    s = m - y
    return k, m, y, s, omega_kept, eps_kept, eta[keep], inv[keep], phi


def draw_panel(config: SimConfig) -> SimulatedPanel:
    """Simulate a full panel with per-firm reproducible substreams.

    Emits periods 0..T per firm (period 0 supplies lags only), so the panel
    has N(T+1) observations and NT usable moment rows.
    """
    sizes = group_sizes([g.share for g in config.groups], config.n_firms)
    group_index = np.repeat(np.arange(len(config.groups)), sizes)
    width = max(4, len(str(config.n_firms)))

    firms, omegas, epss, etas, invs, phis = [], [], [], [], [], []
    for i in range(config.n_firms):
        g = config.groups[group_index[i]]
        result = _simulate_firm(g, config, _firm_stream(config.seed, i))
        if result is None:
            result = _simulate_firm(g, config, _firm_stream(config.seed, i, attempt=1))
        if result is None:
            raise SimulationError(
                f"firm index {i} (group {group_index[i] + 1}) produced a "
                "non-positive capital path twice; check configuration"
            )
        k, m, y, s, om, ep, et, inv, phi = result
        firms.append(
            FirmSeries(firm_id=f"F{i:0{width}d}", start=0, y=y, k=k, m=m, s=s)
        )
        omegas.append(om)
        epss.append(ep)
        etas.append(et)
        invs.append(inv)
        phis.append(phi)

    panel = PanelData(firms=tuple(firms), prices_normalized=True)
    return SimulatedPanel(
        panel=panel,
        group_index=group_index,
        phi=np.array(phis),
        omega=tuple(omegas),
        eps=tuple(epss),
        eta=tuple(etas),
        investment=tuple(invs),
        config=config,
    )
