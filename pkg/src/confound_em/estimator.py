"""Estimator facade over the initialization + EM pipeline.

ConfoundEM follows the familiar fit/predict estimator protocol: constructor
arguments are loop controls, fitted state lives in trailing-underscore
attributes, fit returns self. The functional modules remain the primary API;
this class just packages the common path.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import effects, em, initialization, panel_data
from .effects import EffectQuery
from .em import FitConfig
from .panel_data import ExpandedDesign, PanelDataset


class ConfoundEM(BaseEstimator):
    """Joint outcome/treatment mixed-effects model with a shared latent intercept.

    Parameters mirror FitConfig. fit accepts a PanelDataset or an already
    expanded design; the outcome lives inside the panel, so no separate y.
    """

    def __init__(self, max_em_iters=500, em_tol=1e-6, newton_max_iters=50,
                 newton_tol=1e-8, step_halving_max=20):
        self.max_em_iters = max_em_iters
        self.em_tol = em_tol
        self.newton_max_iters = newton_max_iters
        self.newton_tol = newton_tol
        self.step_halving_max = step_halving_max

    def _config(self) -> FitConfig:
        return FitConfig(max_em_iters=self.max_em_iters, em_tol=self.em_tol,
                         newton_max_iters=self.newton_max_iters,
                         newton_tol=self.newton_tol,
                         step_halving_max=self.step_halving_max)

    @staticmethod
    def _as_design(X) -> ExpandedDesign:
        if isinstance(X, ExpandedDesign):
            return X
        if isinstance(X, PanelDataset):
            return panel_data.expand_design(X)
        raise TypeError("X must be a PanelDataset or ExpandedDesign")

    def fit(self, X, y=None):
        design = self._as_design(X)
        cfg = self._config()
        self.init_report_ = initialization.initialize(design, cfg)
        self.result_ = em.fit(design, self.init_report_.theta0, cfg)
        self.theta_ = self.result_.theta
        self.converged_ = self.result_.converged
        self.design_ = design
        return self

    def _check_fitted(self):
        if not hasattr(self, "result_"):
            raise RuntimeError("call fit before using the estimator")

    def predict(self, X=None) -> np.ndarray:
        """Per-record expected outcome.

        With no argument, predictions are for the fitted panel and include
        each subject's posterior-mean latent intercept. For new data the
        latent value is unknown and enters as 0.
        """
        self._check_fitted()
        th = self.theta_
        if X is None:
            design = self.design_
            b = np.array([s.mean for s in self.result_.posterior])
            bj = b[design.subject_index]
        else:
            design = self._as_design(X)
            bj = np.zeros(design.N)
        return design.x_tilde @ th.beta + (1.0 + th.omega * design.d) * bj

    def score(self, X=None, y=None) -> float:
        """Observed log-likelihood (of the fitted panel when X is None)."""
        self._check_fitted()
        if X is None:
            return self.result_.loglik
        from . import laplace
        return laplace.observed_loglik(self._as_design(X), self.theta_)

    def ate(self) -> float:
        self._check_fitted()
        return effects.ate(self.result_, self.design_)

    def hte(self, x_star, b=None) -> float:
        self._check_fitted()
        return effects.hte(self.result_, EffectQuery(x_star=x_star, b=b))
