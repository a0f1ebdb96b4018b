"""Treatment-effect estimation for panel data with a latent subject confounder.

A joint model ties the outcome regression and the treatment propensity
together through one subject-level random intercept; both blocks are fitted
jointly by an EM algorithm whose E-step uses Laplace-approximate posterior
moments. Effects, cluster-bootstrap inference, and a synthetic replication
harness sit on top.
"""

from .effects import EffectQuery, HteGridSpec, ate, hte, hte_grid
from .em import FitConfig, FitResult
from .estimator import ConfoundEM
from .inference import (BootstrapResult, TestReport, cluster_bootstrap,
                        conditional_loglik, fit_reduced, lrt_sigma_b,
                        summarize, wald_group_test)
from .initialization import InitReport, initialize, select_init
from .laplace import NumericalError, PosteriorSummary, Theta
from .panel_data import (DataValidationError, ExpandedDesign, PanelDataset,
                         PanelRecord, SchemaConfig, SchemaError, Subject,
                         expand_design, load_csv, validate, write_csv)
from .sim import DgpConfig, ReplicationTable, gen_dataset, run_replications, true_ate

__version__ = "0.1.0"

__all__ = [
    "ate", "BootstrapResult", "cluster_bootstrap", "conditional_loglik",
    "ConfoundEM", "DataValidationError", "DgpConfig", "EffectQuery",
    "expand_design", "ExpandedDesign", "FitConfig", "fit_reduced", "FitResult",
    "gen_dataset", "hte", "hte_grid", "HteGridSpec", "InitReport", "initialize",
    "load_csv", "lrt_sigma_b", "NumericalError", "PanelDataset", "PanelRecord",
    "PosteriorSummary", "ReplicationTable", "run_replications", "SchemaConfig",
    "SchemaError", "select_init", "Subject", "summarize", "TestReport", "Theta",
    "true_ate", "validate", "wald_group_test", "write_csv",
]
