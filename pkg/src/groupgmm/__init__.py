"""Panel production functions with latent group structures via penalized GMM."""

from .panel import (
    PanelData,
    FirmSeries,
    LaggedRows,
    PanelError,
    build_lags,
    load_csv,
    subset_balanced,
    write_csv,
)
from .moments import MomentSpec, make_theta
from .classo import (
    Classification,
    CLassoConfig,
    FitResult,
    classify,
    fit,
    match_labels,
    post_lasso,
    weighted_geometric_median,
)
from .selection import PenaltySpec, SelectionGrid, information_criterion, select_J, select_joint
from .simulate import GroupParams, SimConfig, SimulatedPanel, draw_panel, true_theta

__all__ = [
    "PanelData", "FirmSeries", "LaggedRows", "PanelError",
    "build_lags", "load_csv", "subset_balanced", "write_csv",
    "MomentSpec", "make_theta",
    "Classification", "CLassoConfig", "FitResult",
    "classify", "fit", "match_labels", "post_lasso", "weighted_geometric_median",
    "PenaltySpec", "SelectionGrid", "information_criterion", "select_J", "select_joint",
    "GroupParams", "SimConfig", "SimulatedPanel", "draw_panel", "true_theta",
]

__version__ = "0.1.0"
