"""Firm-panel data model in logs: CSV ingestion, lag construction, validity checks.

All variables are natural logs: output ``y``, capital ``k``, labor ``l``,
intermediates ``m``, and the intermediate-expenditure share ``s``. Periods are
consecutive integers per firm; panels may be balanced or unbalanced. PanelData
is immutable after construction and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

CANONICAL_COLUMNS = ("firm", "period", "y", "k", "l", "m", "s")

REQUIRED_VARS = ("y", "k", "m")
MIN_OBS_PER_FIRM = 3


class PanelError(ValueError):
    """Base class for panel construction and ingestion errors."""


class SchemaError(PanelError):
    """A required column is missing or the schema mapping is invalid."""


class PeriodGapError(PanelError):
    """A firm's periods are not consecutive integers."""


class RowParseError(PanelError):
    """A row contains a non-finite or unparseable value."""


class EmptyPanelError(PanelError):
    """An operation produced a panel with no firms."""


def _as_float_array(values, name: str, firm_id) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr))[0])
        raise RowParseError(
            f"non-finite value in column '{name}' for firm {firm_id!r} "
            f"(observation index {bad})"
        )
    return arr


@dataclass(frozen=True)
class Observation:
    """One firm-period record of log variables plus optional extras."""

    firm_id: object
    period: int
    y: float
    k: float
    m: float
    s: float
    l: float | None = None
    extra: Mapping[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class FirmSeries:
    """All observations of one firm over consecutive periods.

    Arrays are aligned to periods ``start, start + 1, ..., start + n - 1``.
    ``l`` is None for panels without a labor column.
    """

    firm_id: object
    start: int
    y: np.ndarray
    k: np.ndarray
    m: np.ndarray
    s: np.ndarray
    l: np.ndarray | None = None
    extra: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.y)
        for name in ("k", "m", "s"):
            if len(getattr(self, name)) != n:
                raise PanelError(f"firm {self.firm_id!r}: ragged variable arrays")
        if self.l is not None and len(self.l) != n:
            raise PanelError(f"firm {self.firm_id!r}: ragged labor array")
        if n < MIN_OBS_PER_FIRM:
            raise PanelError(
                f"firm {self.firm_id!r} has {n} observations; "
                f"at least {MIN_OBS_PER_FIRM} are required"
            )
        for name in ("y", "k", "m", "s"):
            _as_float_array(getattr(self, name), name, self.firm_id)
        if self.l is not None:
            _as_float_array(self.l, "l", self.firm_id)
        object.__setattr__(self, "extra", MappingProxyType(dict(self.extra)))

    @property
    def n_obs(self) -> int:
        return len(self.y)

    @property
    def end(self) -> int:
        return self.start + self.n_obs - 1

    @property
    def periods(self) -> np.ndarray:
        return np.arange(self.start, self.start + self.n_obs)


@dataclass(frozen=True)
class PanelData:
    """An immutable collection of FirmSeries with panel-level flags."""

    firms: tuple[FirmSeries, ...]
    prices_normalized: bool = False
    extra_names: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.firms:
            raise EmptyPanelError("panel contains no firms")
        ids = [f.firm_id for f in self.firms]
        if len(set(ids)) != len(ids):
            raise PanelError("duplicate firm ids in panel")
        if self.prices_normalized:
            for f in self.firms:
                if not np.allclose(f.s, f.m - f.y, atol=1e-8, rtol=0.0):
                    raise PanelError(
                        f"firm {f.firm_id!r}: share column inconsistent with m - y "
                        "although prices_normalized is set"
                    )

    @property
    def n_firms(self) -> int:
        return len(self.firms)

    @property
    def firm_ids(self) -> tuple:
        return tuple(f.firm_id for f in self.firms)

    @property
    def has_labor(self) -> bool:
        return self.firms[0].l is not None

    @property
    def balanced(self) -> bool:
        spans = {(f.start, f.n_obs) for f in self.firms}
        return len(spans) == 1

    @property
    def n_obs(self) -> int:
        return sum(f.n_obs for f in self.firms)

    @property
    def n_usable(self) -> int:
        """Total moment periods after lag construction: sum of T_i - t_i."""
        return sum(f.n_obs - 1 for f in self.firms)

    @property
    def mean_usable(self) -> float:
        return self.n_usable / self.n_firms


@dataclass(frozen=True)
class LaggedRows:
    """Current and one-period-lagged values for one firm's usable periods.

    Row ``r`` corresponds to period ``periods[r]``; lagged fields hold the
    same firm's values at ``periods[r] - 1``.
    """

    firm_id: object
    periods: np.ndarray
    y: np.ndarray
    k: np.ndarray
    m: np.ndarray
    s: np.ndarray
    y_lag: np.ndarray
    k_lag: np.ndarray
    m_lag: np.ndarray
    s_lag: np.ndarray
    l: np.ndarray | None = None
    l_lag: np.ndarray | None = None

    @property
    def n_obs(self) -> int:
        return len(self.y)


def build_lags(panel: PanelData) -> list[LaggedRows]:
    """Materialize per-firm lagged rows; a firm with n observations yields n - 1."""
    out = []
    for f in panel.firms:
        out.append(
            LaggedRows(
                firm_id=f.firm_id,
                periods=f.periods[1:],
                y=f.y[1:], k=f.k[1:], m=f.m[1:], s=f.s[1:],
                y_lag=f.y[:-1], k_lag=f.k[:-1], m_lag=f.m[:-1], s_lag=f.s[:-1],
                l=None if f.l is None else f.l[1:],
                l_lag=None if f.l is None else f.l[:-1],
            )
        )
    return out


def _default_schema(has_l: bool, has_s: bool) -> dict:
    schema = {c: c for c in ("firm", "period", "y", "k", "m")}
    if has_l:
        schema["l"] = "l"
    if has_s:
        schema["s"] = "s"
    return schema


def load_csv(
    path,
    schema: Mapping[str, str] | None = None,
    prices_normalized: bool = False,
    delimiter: str = ",",
) -> PanelData:
    """Load a panel CSV into a validated PanelData.

    Parameters
    ----------
    path : str or path-like
        UTF-8 CSV with a header row.
    schema : mapping, optional
        Maps canonical names (firm, period, y, k, l, m, s) to actual column
        names. ``l`` and ``s`` may be omitted; omitted ``s`` is computed as
        ``m - y`` when ``prices_normalized`` is set and rejected otherwise.
    prices_normalized : bool
        Declares that prices are normalized to one, so ``s = m - y``.
    delimiter : str
        Field separator, default comma.
    """
    df = pd.read_csv(path, sep=delimiter)
    if schema is None:
        schema = _default_schema("l" in df.columns, "s" in df.columns)
    else:
        schema = dict(schema)
    for key in ("firm", "period", "y", "k", "m"):
        if key not in schema:
            raise SchemaError(f"schema is missing required key '{key}'")
    for key, col in schema.items():
        if col is not None and col not in df.columns:
            raise SchemaError(f"column '{col}' (mapped from '{key}') not found in {path}")

    has_l = schema.get("l") is not None
    has_s = schema.get("s") is not None
    if not has_s and not prices_normalized:
        raise SchemaError(
            "share column 's' absent and prices_normalized is false; "
            "provide s = log((P^M M)/(P^Y Y)) or declare normalized prices"
        )

    mapped = {key: col for key, col in schema.items() if col is not None}
    used = set(mapped.values())
    extra_names = tuple(c for c in df.columns if c not in used)

    try:
        periods_all = df[mapped["period"]].astype(int)
    except (TypeError, ValueError) as exc:
        raise RowParseError(f"period column is not integer-valued: {exc}") from None
    df = df.assign(_period=periods_all)
    if df.duplicated(subset=[mapped["firm"], "_period"]).any():
        dup = df[df.duplicated(subset=[mapped["firm"], "_period"])].iloc[0]
        raise PanelError(
            f"duplicate (firm, period) pair: ({dup[mapped['firm']]!r}, {dup['_period']})"
        )

    numeric_keys = ["y", "k", "m"] + (["l"] if has_l else []) + (["s"] if has_s else [])
    for key in numeric_keys:
        col = mapped[key]
        vals = pd.to_numeric(df[col], errors="coerce")
        bad = ~np.isfinite(vals.to_numpy(dtype=float))
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise RowParseError(
                f"non-finite value in column '{col}' at data row {row + 1} "
                f"(file line {row + 2})"
            )
        df[col] = vals

    firms = []
    for firm_id, grp in df.groupby(mapped["firm"], sort=True):
        grp = grp.sort_values("_period")
        periods = grp["_period"].to_numpy()
        if len(periods) >= 2 and not np.all(np.diff(periods) == 1):
            gap_at = int(periods[np.flatnonzero(np.diff(periods) != 1)[0]])
            raise PeriodGapError(
                f"firm {firm_id!r} has non-consecutive periods (gap after {gap_at})"
            )
        if len(periods) < MIN_OBS_PER_FIRM:
            raise PanelError(
                f"firm {firm_id!r} has {len(periods)} observations; "
                f"at least {MIN_OBS_PER_FIRM} are required"
            )
        y = grp[mapped["y"]].to_numpy(dtype=float)
        m = grp[mapped["m"]].to_numpy(dtype=float)
        s = grp[mapped["s"]].to_numpy(dtype=float) if has_s else m - y
        firms.append(
            FirmSeries(
                firm_id=firm_id,
                start=int(periods[0]),
                y=y,
                k=grp[mapped["k"]].to_numpy(dtype=float),
                m=m,
                s=s,
                l=grp[mapped["l"]].to_numpy(dtype=float) if has_l else None,
                extra={c: grp[c].to_numpy() for c in extra_names},
            )
        )
    return PanelData(
        firms=tuple(firms),
        prices_normalized=prices_normalized,
        extra_names=extra_names,
    )


def to_frame(panel: PanelData) -> pd.DataFrame:
    """Canonical long-format frame: firms sorted by id, periods ascending."""
    parts = []
    for f in sorted(panel.firms, key=lambda f: str(f.firm_id)):
        block = {
            "firm": np.repeat(f.firm_id, f.n_obs),
            "period": f.periods,
            "y": f.y,
            "k": f.k,
        }
        if f.l is not None:
            block["l"] = f.l
        block["m"] = f.m
        block["s"] = f.s
        for name in panel.extra_names:
            block[name] = f.extra[name]
        parts.append(pd.DataFrame(block))
    return pd.concat(parts, ignore_index=True)


def write_csv(panel: PanelData, path, delimiter: str = ",") -> None:
    """Write the canonicalized panel (see to_frame) as UTF-8 CSV."""
    to_frame(panel).to_csv(path, sep=delimiter, index=False)


def subset_balanced(panel: PanelData, t0: int, t1: int) -> PanelData:
    """Keep firms observed at every period in [t0, t1], trimmed to that window."""
    if not t0 < t1:
        raise ValueError(f"need t0 < t1, got ({t0}, {t1})")
    kept = []
    for f in panel.firms:
        if f.start <= t0 and f.end >= t1:
            lo = t0 - f.start
            hi = t1 - f.start + 1
            kept.append(
                FirmSeries(
                    firm_id=f.firm_id,
                    start=t0,
                    y=f.y[lo:hi], k=f.k[lo:hi], m=f.m[lo:hi], s=f.s[lo:hi],
                    l=None if f.l is None else f.l[lo:hi],
                    extra={n: v[lo:hi] for n, v in f.extra.items()},
                )
            )
    if not kept:
        raise EmptyPanelError(f"no firm covers the window [{t0}, {t1}]")
    return PanelData(
        firms=tuple(kept),
        prices_normalized=panel.prices_normalized,
        extra_names=panel.extra_names,
    )


def stack_rows(rows_list: Sequence[LaggedRows]) -> LaggedRows:
    """Concatenate lagged rows across firms (pooled view for coarse starts)."""
    if not rows_list:
        raise ValueError("no rows to stack")
    has_l = rows_list[0].l is not None
    cat = lambda name: np.concatenate([getattr(r, name) for r in rows_list])
    return LaggedRows(
        firm_id="__pooled__",
        periods=cat("periods"),
        y=cat("y"), k=cat("k"), m=cat("m"), s=cat("s"),
        y_lag=cat("y_lag"), k_lag=cat("k_lag"), m_lag=cat("m_lag"), s_lag=cat("s_lag"),
        l=cat("l") if has_l else None,
        l_lag=cat("l_lag") if has_l else None,
    )
