"""Command-line driver and Monte Carlo harness.

Subcommands: simulate, estimate, select, montecarlo, crosstab, compare-fits,
tfp. Every command is a pure function of its input files and seed; outputs
are CSV/JSON. Exit codes: 0 success, 2 configuration error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace, asdict
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import norm

from .panel import PanelData, PanelError, build_lags, load_csv, write_csv
from .moments import MomentSpec
from .classo import (
    Classification,
    CLassoConfig,
    FitError,
    FitResult,
    GroupEstimates,
    _residual_components,
    fit,
    match_labels,
    post_lasso,
    prepare_initial_estimates,
)
from .selection import PenaltySpec, SelectionGrid, select_J, select_joint
from .simulate import SimConfig, SimulationError, draw_panel

Z_95 = float(norm.ppf(0.975))


class ConfigError(ValueError):
    """Invalid or missing configuration input."""


# ---------------------------------------------------------------------------
# Monte Carlo harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class McConfig:
    """A Monte Carlo experiment: selection (group-count) or estimation mode."""

    mode: str
    replications: int
    sim: SimConfig
    spec: MomentSpec
    classo: CLassoConfig
    penalties: tuple[PenaltySpec, ...] = ()
    j_values: tuple[int, ...] = (1, 2, 3, 4, 5)
    base_seed: int = 1000

    def __post_init__(self):
        if self.mode not in ("selection", "estimation"):
            raise ValueError(f"unknown Monte Carlo mode {self.mode!r}")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.mode == "selection" and not self.penalties:
            raise ValueError("selection mode needs at least one penalty")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "replications": self.replications,
            "base_seed": self.base_seed,
            "j_values": list(self.j_values),
            "sim": self.sim.to_dict(),
            "moments": self.spec.to_dict(),
            "classo": self.classo.to_dict(),
            "penalties": [p.to_dict() for p in self.penalties],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "McConfig":
        return cls(
            mode=data["mode"],
            replications=int(data["replications"]),
            sim=SimConfig.from_dict(data.get("sim", {})),
            spec=MomentSpec.from_dict(data["moments"]),
            classo=CLassoConfig.from_dict(data["classo"]),
            penalties=tuple(PenaltySpec.from_dict(p)
                            for p in data.get("penalties", [])),
            j_values=tuple(int(j) for j in data.get("j_values", (1, 2, 3, 4, 5))),
            base_seed=int(data.get("base_seed", 1000)),
        )


def _firm_truth(sim_panel):
    groups = sim_panel.config.groups
    gamma = np.array([groups[g].gamma for g in sim_panel.group_index])
    beta = np.array([groups[g].beta for g in sim_panel.group_index])
    return gamma, beta


def _extract_firm_estimates(result_estimates: GroupEstimates, labels, spec, n):
    """Per-firm point estimates and standard errors from assigned groups."""
    gi, bi = spec.index("beta3"), spec.index("beta1")
    out = {name: np.full(n, np.nan) for name in
           ("gamma_hat", "beta_hat", "se_gamma", "se_beta")}
    for g in result_estimates.groups:
        th, cov = g.theta, g.cov
        sg = math.sqrt(max(cov[gi, gi], 0.0))
        sb = math.sqrt(max(cov[bi, bi], 0.0))
        for i in g.members:
            out["gamma_hat"][i] = th[gi]
            out["beta_hat"][i] = th[bi]
            out["se_gamma"][i] = sg
            out["se_beta"][i] = sb
    return out


def run_estimation_replication(cfg: McConfig, rep: int) -> dict:
    """One estimation-mode replication: fit, label-match, oracle comparison."""
    sim_cfg = replace(cfg.sim, seed=cfg.base_seed + rep)
    sp = draw_panel(sim_cfg)
    res = fit(sp.panel, cfg.classo, cfg.spec)
    perm, accuracy = match_labels(res.classification, sp.group_index)

    n = sp.panel.n_firms
    est = _extract_firm_estimates(res.estimates, res.classification.labels,
                                  cfg.spec, n)

    oracle_cls = Classification(labels=sp.group_index,
                                distances=np.zeros(n), threshold=None)
    oracle = post_lasso(sp.panel, oracle_cls, cfg.spec,
                        weighting=cfg.classo.weighting)
    orc = _extract_firm_estimates(oracle, sp.group_index, cfg.spec, n)

    oracle_diff = math.nan
    if accuracy == 1.0:
        diffs = []
        for g in res.estimates.groups:
            true_g = perm[g.index]
            counterpart = oracle.by_index(true_g)
            if counterpart is not None:
                diffs.append(float(np.max(np.abs(g.theta - counterpart.theta))))
        oracle_diff = max(diffs) if diffs else math.nan

    return {
        "rep": rep,
        "accuracy": accuracy,
        "oracle_max_diff": oracle_diff,
        "converged": res.converged,
        "post": est,
        "oracle": orc,
    }


def run_selection_replication(cfg: McConfig, rep: int) -> dict:
    """One selection-mode replication: J-hat per penalty on shared fits."""
    sim_cfg = replace(cfg.sim, seed=cfg.base_seed + rep)
    sp = draw_panel(sim_cfg)
    lam = cfg.classo.lam
    if lam is None:
        lam = sp.panel.mean_usable ** -0.25
    init = prepare_initial_estimates(sp.panel, cfg.spec, cfg.classo)
    sel = select_J(sp.panel, lam, cfg.j_values, cfg.penalties[0], cfg.spec,
                   config=cfg.classo, init=init,
                   extra_penalties=cfg.penalties[1:])
    table = sel.table.sort_values("J").reset_index(drop=True)
    j_hats = {}
    for idx, pen in enumerate(cfg.penalties, start=1):
        col = table[f"IC{idx}"]
        if col.notna().any():
            j_hats[pen.label] = int(table.loc[col.idxmin(), "J"])
        else:
            j_hats[pen.label] = -1
    return {"rep": rep, "j_hat": j_hats}


def _mc_worker(payload):
    cfg_dict, rep = payload
    cfg = McConfig.from_dict(cfg_dict)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            if cfg.mode == "selection":
                return run_selection_replication(cfg, rep)
            return run_estimation_replication(cfg, rep)
        except (FitError, SimulationError, np.linalg.LinAlgError) as exc:
            return {"rep": rep, "failed": True, "error": f"{type(exc).__name__}: {exc}"}


@dataclass
class McResult:
    summary: pd.DataFrame
    details: pd.DataFrame
    meta: dict
    raw: list


def _summarize_selection(cfg: McConfig, results: list) -> McResult:
    j_true = len(cfg.sim.groups)
    ok = [r for r in results if not r.get("failed")]
    n_failed = len(results) - len(ok)
    rows, detail_rows = [], []
    for pen in cfg.penalties:
        js = np.array([r["j_hat"][pen.label] for r in ok])
        js = js[js > 0]
        rows.append({
            "penalty": pen.form,
            "r": pen.r,
            "e_j": js.mean() if len(js) else math.nan,
            "pr_eq": float(np.mean(js == j_true)) if len(js) else math.nan,
            "pr_ge": float(np.mean(js >= j_true)) if len(js) else math.nan,
            "n_reps": len(js),
            "n_failed": n_failed,
        })
    for r in ok:
        row = {"rep": r["rep"]}
        row.update({f"j_hat[{k}]": v for k, v in r["j_hat"].items()})
        detail_rows.append(row)
    meta = {"config": cfg.to_dict(), "j_true": j_true, "n_failed": n_failed}
    return McResult(summary=pd.DataFrame(rows),
                    details=pd.DataFrame(detail_rows), meta=meta, raw=results)


def _relative_stats(estimates: np.ndarray, ses: np.ndarray, truth: np.ndarray):
    """Firm-level relative bias/sd/rmse (percent), SE/SD ratio, coverage.

    ``estimates``/``ses`` have shape (reps, firms). Aggregates are means over
    firms of per-firm quantities; rmse^2 = bias^2 + population variance holds
    per firm by construction.
    """
    mean_est = np.nanmean(estimates, axis=0)
    bias_rel = 100.0 * (mean_est - truth) / truth
    sd = np.nanstd(estimates, axis=0, ddof=1)
    sd_rel = 100.0 * sd / truth
    rmse = np.sqrt(np.nanmean((estimates - truth) ** 2, axis=0))
    rmse_rel = 100.0 * rmse / truth
    with np.errstate(divide="ignore", invalid="ignore"):
        se_sd = np.nanmean(ses, axis=0) / sd
    covered = np.abs(estimates - truth) <= Z_95 * ses
    coverage = np.nanmean(covered, axis=0)
    return {
        "bias_rel_pct": float(np.nanmean(bias_rel)),
        "sd_rel_pct": float(np.nanmean(sd_rel)),
        "rmse_rel_pct": float(np.nanmean(rmse_rel)),
        "se_over_sd": float(np.nanmean(se_sd)),
        "coverage_95": float(np.nanmean(coverage)),
    }


def _summarize_estimation(cfg: McConfig, results: list) -> McResult:
    ok = [r for r in results if not r.get("failed")]
    n_failed = len(results) - len(ok)
    if not ok:
        raise FitError("every Monte Carlo replication failed")
    sim_cfg = replace(cfg.sim, seed=cfg.base_seed + ok[0]["rep"])
    sp = draw_panel(sim_cfg)   # group layout is seed-independent
    gamma_true, beta_true = _firm_truth(sp)

    def stack(source, key):
        return np.vstack([r[source][key] for r in ok])

    accuracy = float(np.mean([r["accuracy"] for r in ok]))
    rows = []
    for source, label in (("post", "post_lasso"), ("oracle", "infeasible")):
        for param, truth, est_key, se_key in (
            ("gamma", gamma_true, "gamma_hat", "se_gamma"),
            ("beta", beta_true, "beta_hat", "se_beta"),
        ):
            stats = _relative_stats(stack(source, est_key),
                                    stack(source, se_key), truth)
            rows.append({"estimator": label, "param": param,
                         "accuracy": accuracy if source == "post" else math.nan,
                         **stats, "n_reps": len(ok), "n_failed": n_failed})
    details = pd.DataFrame([
        {"rep": r["rep"], "accuracy": r["accuracy"],
         "oracle_max_diff": r["oracle_max_diff"], "converged": r["converged"]}
        for r in ok
    ])
    meta = {
        "config": cfg.to_dict(),
        "n_failed": n_failed,
        "se_sd_aggregation": "mean of per-firm ratios",
        "rmse_decomposition": "rmse^2 = bias^2 + population variance per firm",
        "coverage": "per firm from assigned-group estimate and SE, then averaged",
    }
    return McResult(summary=pd.DataFrame(rows), details=details,
                    meta=meta, raw=results)


def run_montecarlo(cfg: McConfig, workers: int = 1) -> McResult:
    """Run all replications (optionally in parallel) and aggregate.

    Replication r uses seed base_seed + r; aggregation is in replication
    order, so results are identical for any worker count.
    """
    payloads = [(cfg.to_dict(), rep) for rep in range(cfg.replications)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_mc_worker, payloads))
    else:
        results = [_mc_worker(p) for p in payloads]
    if cfg.mode == "selection":
        return _summarize_selection(cfg, results)
    return _summarize_estimation(cfg, results)


# ---------------------------------------------------------------------------
# Empirical pipeline utilities
# ---------------------------------------------------------------------------

def _theta_by_group(fit_dict: dict) -> dict[int, np.ndarray]:
    return {int(k) - 1: np.asarray(v, dtype=float)
            for k, v in fit_dict["theta"].items()}


def _labels_from_fit(fit_dict: dict, firm_ids) -> np.ndarray:
    by_firm = {rec["firm"]: int(rec["group"]) - 1
               for rec in fit_dict["assignment"]}
    labels = np.array([by_firm.get(fid, -1) for fid in firm_ids])
    return labels


def tfp_levels(panel: PanelData, fit_dict: dict) -> pd.DataFrame:
    """Per-observation TFP in levels: exp(y - b1 k - b2 l - b3 m).

    Elasticity slots absent from the fitted layout contribute zero; the
    production intercept is excluded. Unclassified firms are skipped.
    """
    spec = MomentSpec.from_dict(fit_dict["moments"])
    thetas = _theta_by_group(fit_dict)
    labels = _labels_from_fit(fit_dict, [f.firm_id for f in panel.firms])
    names = spec.param_names

    def elasticity(th, name):
        return th[spec.index(name)] if name in names else 0.0

    rows = []
    for i, f in enumerate(panel.firms):
        lab = labels[i]
        if lab < 0 or lab not in thetas:
            continue
        th = thetas[lab]
        log_tfp = f.y - elasticity(th, "beta1") * f.k \
            - elasticity(th, "beta3") * f.m
        if "beta2" in names and f.l is not None:
            log_tfp = log_tfp - elasticity(th, "beta2") * f.l
        rows.append(pd.DataFrame({
            "firm": np.repeat(f.firm_id, f.n_obs),
            "period": f.periods,
            "group": lab + 1,
            "tfp": np.exp(log_tfp),
        }))
    if not rows:
        raise FitError("no classified firm is covered by the fit")
    return pd.concat(rows, ignore_index=True)


def _fit_msr(panel: PanelData, fit_dict: dict) -> tuple[float, int, int]:
    """Mean squared composite residual of a fit on a panel, recomputed."""
    spec = MomentSpec.from_dict(fit_dict["moments"])
    thetas = _theta_by_group(fit_dict)
    rows_list = build_lags(panel)
    labels = _labels_from_fit(fit_dict, [r.firm_id for r in rows_list])
    ssr, count, n_params = 0.0, 0, spec.P * len(thetas)
    for i, rows in enumerate(rows_list):
        lab = labels[i]
        if lab < 0 or lab not in thetas:
            continue
        comp = _residual_components(rows, thetas[lab], spec)["composite"]
        ssr += float(np.sum(comp ** 2))
        count += len(comp)
    if count == 0:
        raise FitError("fit covers no firm in the panel")
    return ssr / count, count, n_params


def compare_fits(panel: PanelData, fit_a: dict, fit_b: dict) -> dict:
    """Mean squared residual comparison of two fits on the same panel."""
    msr_a, n_a, p_a = _fit_msr(panel, fit_a)
    msr_b, n_b, p_b = _fit_msr(panel, fit_b)
    return {
        "msr_a": msr_a, "n_resid_a": n_a, "n_params_a": p_a,
        "msr_b": msr_b, "n_resid_b": n_b, "n_params_b": p_b,
        "better_fit": "a" if msr_a < msr_b else ("b" if msr_b < msr_a else "tie"),
    }


def crosstab_frame(assign_df: pd.DataFrame, labels: pd.Series) -> pd.DataFrame:
    """Counts of (ex-ante label, estimated group) with margins.

    Unclassified firms (group 0) are excluded, so the grand total equals the
    number of classified firms.
    """
    merged = assign_df.copy()
    merged["label"] = merged["firm"].map(labels)
    merged = merged[merged["group"] > 0]
    tab = pd.crosstab(merged["label"], merged["group"], margins=True,
                      margins_name="total")
    tab.columns = [f"group_{c}" if c != "total" else "total" for c in tab.columns]
    return tab


def groupwise_fit_from_labels(panel: PanelData, labels: pd.Series,
                              spec: MomentSpec,
                              weighting: str = "identity") -> dict:
    """Groupwise GMM on an ex-ante partition, emitted in the fit JSON shape."""
    firm_ids = [f.firm_id for f in panel.firms]
    values = [labels[fid] for fid in firm_ids]
    cats = sorted(set(values), key=str)
    code = {c: i for i, c in enumerate(cats)}
    label_arr = np.array([code[v] for v in values])
    cls = Classification(labels=label_arr,
                         distances=np.zeros(len(firm_ids)), threshold=None)
    estimates = post_lasso(panel, cls, spec, weighting=weighting)
    return {
        "moments": spec.to_dict(),
        "classo": None,
        "lambda_used": None,
        "n_firms": len(firm_ids),
        "converged": True,
        "trace": [],
        "theta": {str(g.index + 1): g.theta.tolist() for g in estimates.groups},
        "cov": {str(g.index + 1): g.cov.tolist() for g in estimates.groups},
        "cov_flags": {str(g.index + 1): bool(g.cov_flag) for g in estimates.groups},
        "group_sizes": {str(g.index + 1): int(len(g.members))
                        for g in estimates.groups},
        "skipped_groups": [j + 1 for j in estimates.skipped],
        "label_mapping": {str(c): i + 1 for c, i in code.items()},
        "assignment": [
            {"firm": fid, "group": int(label_arr[i]) + 1, "distance": 0.0}
            for i, fid in enumerate(firm_ids)
        ],
    }


def residual_frame(panel: PanelData, estimates: GroupEstimates) -> pd.DataFrame:
    """Long-format residual series (one row per usable firm-period)."""
    rows_list = build_lags(panel)
    periods = {r.firm_id: r.periods for r in rows_list}
    out = []
    for g in estimates.groups:
        for fid, comps in g.residuals.items():
            block = {"firm": np.repeat(fid, len(comps["composite"])),
                     "period": periods[fid], "group": g.index + 1}
            for name, arr in comps.items():
                block[name] = arr
            out.append(pd.DataFrame(block))
    return pd.concat(out, ignore_index=True).sort_values(
        ["firm", "period"]).reset_index(drop=True)


# ---------------------------------------------------------------------------
# Command implementations
# ---------------------------------------------------------------------------

def _load_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None


def _dump_json(data, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_panel(args, cfg: dict) -> PanelData:
    try:
        return load_csv(
            args.panel,
            schema=cfg.get("schema"),
            prices_normalized=bool(cfg.get("prices_normalized", False)),
        )
    except FileNotFoundError:
        raise ConfigError(f"panel file not found: {args.panel}") from None


def cmd_simulate(args) -> int:
    cfg_dict = _load_json(args.config) if args.config else {}
    try:
        cfg = SimConfig.from_dict(cfg_dict)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid simulation config: {exc}") from None
    sp = draw_panel(cfg)
    out = _out_dir(args)
    write_csv(sp.panel, out / "panel.csv")
    truth = pd.DataFrame({
        "firm": [f.firm_id for f in sp.panel.firms],
        "group": sp.group_index + 1,
        "phi": sp.phi,
    })
    truth.to_csv(out / "truth.csv", index=False)
    if args.latents:
        blocks = []
        for i, f in enumerate(sp.panel.firms):
            blocks.append(pd.DataFrame({
                "firm": np.repeat(f.firm_id, f.n_obs),
                "period": f.periods,
                "omega": sp.omega[i], "eps": sp.eps[i], "eta": sp.eta[i],
                "investment": sp.investment[i],
            }))
        pd.concat(blocks, ignore_index=True).to_csv(out / "latents.csv", index=False)
    _dump_json(cfg.to_dict(), out / "sim_config.json")
    print(f"simulated {sp.panel.n_firms} firms x {sp.panel.firms[0].n_obs} periods "
          f"-> {out / 'panel.csv'}")
    return 0


def _spec_from_cfg(cfg: dict) -> MomentSpec:
    if "moments" not in cfg:
        raise ConfigError("config is missing the 'moments' block")
    try:
        return MomentSpec.from_dict(cfg["moments"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid moments block: {exc}") from None


def _classo_from_cfg(cfg: dict) -> CLassoConfig:
    try:
        return CLassoConfig.from_dict(cfg.get("classo", {"n_groups": 1}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid classo block: {exc}") from None


def cmd_estimate(args) -> int:
    cfg = _load_json(args.config)
    spec = _spec_from_cfg(cfg)
    panel = _load_panel(args, cfg)
    if spec.needs_shares() and panel.firms[0].s is None:
        raise ConfigError("the share-based strategy requires an s column")
    if spec.include_labor and not panel.has_labor:
        raise ConfigError(
            "moments.include_labor is true but the panel has no labor column"
        )
    out = _out_dir(args)
    if args.groups_from_column:
        col = args.groups_from_column
        labels = {}
        for f in panel.firms:
            if col not in f.extra:
                raise ConfigError(f"panel has no column {col!r} for ex-ante groups")
            labels[f.firm_id] = f.extra[col][0]
        fit_dict = groupwise_fit_from_labels(panel, labels, spec,
                                             weighting=cfg.get("weighting", "identity"))
        cls_labels = np.array([fit_dict["assignment"][i]["group"] - 1
                               for i in range(panel.n_firms)])
        estimates = None
    else:
        classo_cfg = _classo_from_cfg(cfg)
        result = fit(panel, classo_cfg, spec)
        fit_dict = result.to_dict()
        estimates = result.estimates
    _dump_json(fit_dict, out / "fit.json")
    pd.DataFrame(fit_dict["assignment"]).to_csv(out / "assignment.csv", index=False)
    if estimates is None:
        cls = Classification(labels=cls_labels,
                             distances=np.zeros(panel.n_firms), threshold=None)
        estimates = post_lasso(panel, cls, spec)
    residual_frame(panel, estimates).to_csv(out / "residuals.csv", index=False)
    print(f"estimated {len(fit_dict['theta'])} groups -> {out / 'fit.json'}")
    return 0


def cmd_select(args) -> int:
    cfg = _load_json(args.config)
    spec = _spec_from_cfg(cfg)
    classo_cfg = _classo_from_cfg(cfg)
    panel = _load_panel(args, cfg)
    grid_cfg = cfg.get("grid", {})
    try:
        grid = SelectionGrid(
            j_values=tuple(int(j) for j in grid_cfg.get("J_values", range(1, 6))),
            a_values=tuple(float(a) for a in grid_cfg.get("a_values", (0.25,))),
        )
        penalties = [PenaltySpec.from_dict(p) for p in cfg.get(
            "penalties", [{"form": "p1", "r": 1.0}, {"form": "p2", "r": 0.25}])]
    except ValueError as exc:
        raise ConfigError(f"invalid selection grid: {exc}") from None
    result = select_joint(panel, grid, penalties[0], spec, config=classo_cfg,
                          extra_penalties=penalties[1:])
    out = _out_dir(args)
    result.surface.to_csv(out / "ic_surface.csv", index=False)
    _dump_json({
        "a_hat": result.a_hat,
        "lambda_hat": result.lam_hat,
        "j_hat": result.j_hat,
        "penalty": penalties[0].to_dict(),
        "extra_penalties": [p.to_dict() for p in penalties[1:]],
    }, out / "selection.json")
    print(f"selected J = {result.j_hat} at lambda = {result.lam_hat:.4f} "
          f"(a = {result.a_hat}) -> {out / 'ic_surface.csv'}")
    return 0


def cmd_montecarlo(args) -> int:
    cfg_dict = _load_json(args.config)
    try:
        cfg = McConfig.from_dict(cfg_dict)
        if args.seed is not None:
            cfg = replace(cfg, base_seed=args.seed)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid Monte Carlo config: {exc}") from None
    result = run_montecarlo(cfg, workers=max(1, args.threads))
    out = _out_dir(args)
    result.summary.to_csv(out / "mc_summary.csv", index=False)
    result.details.to_csv(out / "mc_details.csv", index=False)
    _dump_json(result.meta, out / "mc_meta.json")
    print(result.summary.to_string(index=False))
    n_failed = result.meta.get("n_failed", 0)
    if n_failed:
        print(f"warning: {n_failed} replication(s) failed", file=sys.stderr)
    return 0


def cmd_crosstab(args) -> int:
    assign = pd.read_csv(args.assignments)
    if "firm" not in assign.columns or "group" not in assign.columns:
        raise ConfigError("assignment CSV needs 'firm' and 'group' columns")
    if args.panel:
        panel_df = pd.read_csv(args.panel)
        if args.label_column not in panel_df.columns:
            raise ConfigError(f"panel has no column {args.label_column!r}")
        labels = panel_df.groupby("firm")[args.label_column].first()
    else:
        if args.label_column not in assign.columns:
            raise ConfigError(
                f"assignment CSV has no column {args.label_column!r}; "
                "pass --panel to join labels from the panel file"
            )
        labels = assign.set_index("firm")[args.label_column]
    tab = crosstab_frame(assign, labels)
    tab.to_csv(args.out)
    print(tab.to_string())
    return 0


def cmd_compare_fits(args) -> int:
    cfg = _load_json(args.config) if args.config else {}
    panel = _load_panel(args, cfg)
    report = compare_fits(panel, _load_json(args.fit_a), _load_json(args.fit_b))
    _dump_json(report, args.out)
    print(json.dumps(report, indent=2))
    return 0


def cmd_tfp(args) -> int:
    cfg = _load_json(args.config) if args.config else {}
    panel = _load_panel(args, cfg)
    frame = tfp_levels(panel, _load_json(args.fit))
    frame.to_csv(args.out, index=False)
    print(f"wrote {len(frame)} TFP rows -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="groupgmm",
        description="Panel production functions with latent group structures",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a synthetic panel")
    p.add_argument("--config", help="SimConfig JSON (defaults used if omitted)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--latents", action="store_true",
                   help="also write the latent series CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="fit the penalized-GMM estimator")
    p.add_argument("--panel", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--groups-from-column", default=None,
                   help="skip the penalized step; groupwise GMM on this column")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("select", help="information-criterion grid over (lambda, J)")
    p.add_argument("--panel", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("montecarlo", help="replication study of the estimator")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None, help="override base seed")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_montecarlo)

    p = sub.add_parser("crosstab", help="ex-ante labels vs estimated groups")
    p.add_argument("--assignments", required=True)
    p.add_argument("--panel", default=None)
    p.add_argument("--label-column", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_crosstab)

    p = sub.add_parser("compare-fits", help="mean squared residual comparison")
    p.add_argument("--panel", required=True)
    p.add_argument("--fit-a", required=True)
    p.add_argument("--fit-b", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare_fits)

    p = sub.add_parser("tfp", help="per-observation TFP levels from a fit")
    p.add_argument("--panel", required=True)
    p.add_argument("--fit", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tfp)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, PanelError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (FitError, SimulationError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
