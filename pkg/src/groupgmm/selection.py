"""Group-count selection via a BIC-type information criterion.

The criterion is log mean squared composite residual plus J * P * p(N, T),
with two penalty forms: p1 = r * (N T)^(-1/2) and p2 = r * log(log(T)) / T.
The number of groups is chosen by grid minimization at fixed lambda; lambda
and J can also be chosen jointly over a (lambda, J) grid. Fits across a grid
share the firm-wise initial estimates, which do not depend on lambda or J.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .panel import PanelData
from .moments import MomentSpec
from .classo import (
    CLassoConfig,
    FitError,
    GroupEstimates,
    InitialEstimates,
    fit,
    prepare_initial_estimates,
)


@dataclass(frozen=True)
class PenaltySpec:
    """One penalty form with a finite-sample adjustment factor r > 0."""

    form: str      # "p1" or "p2"
    r: float = 1.0

    def __post_init__(self):
        if self.form not in ("p1", "p2"):
            raise ValueError(f"unknown penalty form {self.form!r}")
        if not self.r > 0:
            raise ValueError("adjustment factor r must be strictly positive")

    def value(self, n_firms: int, horizon: float) -> float:
        if self.form == "p1":
            return self.r * (n_firms * horizon) ** -0.5
        return self.r * math.log(math.log(horizon)) / horizon

    @property
    def label(self) -> str:
        return f"{self.form}(r={self.r:g})"

    def to_dict(self) -> dict:
        return {"form": self.form, "r": self.r}

    @classmethod
    def from_dict(cls, data: dict) -> "PenaltySpec":
        return cls(form=data["form"], r=float(data.get("r", 1.0)))


@dataclass(frozen=True)
class SelectionGrid:
    """Candidate group counts and exponents a for lambda = T^(-a)."""

    j_values: tuple[int, ...]
    a_values: tuple[float, ...] = (0.25,)

    def __post_init__(self):
        if not self.j_values:
            raise ValueError("j_values must be non-empty")
        if any(j < 1 for j in self.j_values):
            raise ValueError("group counts must be at least 1")
        if any(not 0.0 < a < 0.5 for a in self.a_values):
            raise ValueError("exponents must lie strictly inside (0, 0.5)")


def information_criterion(fit_result, n_firms: int, horizon: float, P: int,
                          penalty: PenaltySpec, n_groups: int | None = None) -> float:
    """log(MSR) + J * P * p(N, T).

    ``fit_result`` is a GroupEstimates (its residual series give the MSR) or
    a float MSR directly. ``n_groups`` defaults to the number of candidate
    groups charged by the criterion. A zero MSR returns -inf with a warning.
    """
    if isinstance(fit_result, GroupEstimates):
        msr = fit_result.msr()
        if n_groups is None:
            n_groups = len(fit_result.groups) + len(fit_result.skipped)
    else:
        msr = float(fit_result)
        if n_groups is None:
            raise ValueError("n_groups is required when passing a bare MSR")
    if msr == 0.0:
        warnings.warn("zero residual sum of squares; information criterion is -inf")
        return -math.inf
    return math.log(msr) + n_groups * P * penalty.value(n_firms, horizon)


def _classified_counts(estimates: GroupEstimates):
    n_class = sum(len(g.members) for g in estimates.groups)
    return n_class, estimates.n_resid()


@dataclass
class SelectJResult:
    j_hat: int
    table: pd.DataFrame
    fits: dict


def _fit_grid_row(panel, spec, config, lam, j, init, penalties):
    """Fit one (lambda, J) point and evaluate every penalty's criterion."""
    cfg = CLassoConfig(**{**config.to_dict(), "n_groups": j, "lam": lam})
    n_firms = panel.n_firms
    horizon = panel.mean_usable
    try:
        res = fit(panel, cfg, spec, init=init)
    except FitError as exc:
        warnings.warn(f"fit failed at (lambda={lam:g}, J={j}): {exc}")
        row = {"lambda": lam, "J": j, "msr": math.nan, "converged": False,
               "n_classified": 0}
        for idx, pen in enumerate(penalties, start=1):
            row[f"IC{idx}"] = math.nan
        return row, None
    est = res.estimates
    msr = est.msr()
    n_class, _ = _classified_counts(est)
    if n_class < n_firms:
        warnings.warn(
            f"{n_firms - n_class} unclassified firms excluded from the "
            "residual average; the effective NT is reduced accordingly"
        )
    row = {"lambda": lam, "J": j, "msr": msr, "converged": res.converged,
           "n_classified": n_class}
    for idx, pen in enumerate(penalties, start=1):
        row[f"IC{idx}"] = information_criterion(msr, n_firms, horizon, spec.P,
                                                pen, n_groups=j)
    return row, res


def select_J(panel: PanelData, lam: float, j_values, penalty: PenaltySpec,
             spec: MomentSpec, config: CLassoConfig | None = None,
             init: InitialEstimates | None = None,
             extra_penalties=()) -> SelectJResult:
    """Fit every candidate J at fixed lambda and minimize the criterion.

    Ties and the argmin both resolve to the smallest J. Failed fits are
    excluded with a warning. The criterion of ``penalty`` decides; any
    ``extra_penalties`` are evaluated on the same fits for reporting.
    """
    config = config or CLassoConfig(n_groups=1)
    penalties = [penalty, *extra_penalties]
    if init is None:
        init = prepare_initial_estimates(panel, spec, config)
    rows, fits = [], {}
    for j in sorted(set(int(j) for j in j_values)):
        row, res = _fit_grid_row(panel, spec, config, lam, j, init, penalties)
        rows.append(row)
        if res is not None:
            fits[j] = res
    table = pd.DataFrame(rows)
    valid = table.dropna(subset=["IC1"])
    if valid.empty:
        raise FitError("every candidate group count failed to fit")
    j_hat = int(valid.loc[valid["IC1"].idxmin(), "J"])
    return SelectJResult(j_hat=j_hat, table=table, fits=fits)


@dataclass
class SelectJointResult:
    a_hat: float
    lam_hat: float
    j_hat: int
    surface: pd.DataFrame
    fits: dict


def select_joint(panel: PanelData, grid: SelectionGrid, penalty: PenaltySpec,
                 spec: MomentSpec, config: CLassoConfig | None = None,
                 extra_penalties=()) -> SelectJointResult:
    """Joint (lambda, J) choice: minimize IC(J_hat(lambda), lambda) over the
    lambda grid, where lambda = T^(-a). Emits the full criterion surface."""
    config = config or CLassoConfig(n_groups=1)
    horizon = panel.mean_usable
    init = prepare_initial_estimates(panel, spec, config)
    frames, per_a = [], {}
    for a in grid.a_values:
        lam = horizon ** -a
        sel = select_J(panel, lam, grid.j_values, penalty, spec,
                       config=config, init=init, extra_penalties=extra_penalties)
        tbl = sel.table.copy()
        tbl.insert(0, "a", a)
        frames.append(tbl)
        chosen = tbl[tbl["J"] == sel.j_hat].iloc[0]
        per_a[a] = (lam, sel.j_hat, float(chosen["IC1"]), sel.fits)
    surface = pd.concat(frames, ignore_index=True)
    a_hat = min(per_a, key=lambda a: per_a[a][2])
    lam_hat, j_hat, _, fits = per_a[a_hat]
    return SelectJointResult(a_hat=a_hat, lam_hat=lam_hat, j_hat=j_hat,
                             surface=surface, fits=fits)
