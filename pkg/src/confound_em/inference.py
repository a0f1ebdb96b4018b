"""Resampling inference and model-comparison tests.

Cluster bootstrap (subjects resampled with replacement, each replicate
refitted from scratch on its own RNG stream), percentile summaries,
chi-square group tests on propensity coefficients, a likelihood-ratio test
for the latent variance, and conditional log-likelihood sensitivity values.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit
from scipy.stats import chi2

from . import effects, em, initialization, laplace, panel_data, runtime
from .em import FitConfig, FitResult
from .laplace import NumericalError, Theta, softplus


@dataclass(frozen=True)
class BootstrapResult:
    """Retained replicates only; every stored entry converged."""

    B: int
    replicates: list          # (Theta, ate, converged) triples
    seed: int
    n_failed: int


@dataclass(frozen=True)
class TestReport:
    statistic: float
    df: int
    p_value: float
    method: str

    def as_dict(self):
        return {"statistic": self.statistic, "df": self.df,
                "p_value": self.p_value, "method": self.method}


# --------------------------------------------------------------------------
# cluster bootstrap
# --------------------------------------------------------------------------

def _boot_one(r, design, cfg, seed, warm):
    rng = runtime.stream(seed, runtime.DOMAIN_BOOT, r)
    indices = rng.integers(0, design.m, size=design.m)
    sub = panel_data.subset_design(design, indices)
    try:
        theta0 = warm if warm is not None else initialization.initialize(sub, cfg).theta0
        res = em.fit(sub, theta0, cfg)
    except (NumericalError, np.linalg.LinAlgError):
        return r, False, None, None
    if not res.converged:
        return r, False, None, None
    return r, True, res.theta, effects.ate(res, sub)


def cluster_bootstrap(design, cfg: FitConfig, B: int, seed: int, *,
                      threads=None, warm_start: Theta | None = None) -> BootstrapResult:
    """Refit on B subject-resampled copies of the design.

    Replicate r uses only its own stream (seed, bootstrap domain, r), so the
    result is independent of worker count and execution order. Non-converged
    or aborted replicates are dropped; more than B/2 failures is an error.
    """
    if B < 1:
        raise ValueError("B must be at least 1")
    fn = partial(_boot_one, design=design, cfg=cfg, seed=seed, warm=warm_start)
    results = runtime.parallel_map(fn, list(range(B)), runtime.resolve_threads(threads))
    replicates = []
    n_failed = 0
    for _, ok, theta, ate_r in results:
        if ok:
            replicates.append((theta, ate_r, True))
        else:
            n_failed += 1
    if n_failed > B / 2:
        raise NumericalError(
            f"bootstrap unstable: {n_failed} of {B} replicates failed to converge")
    return BootstrapResult(B=B, replicates=replicates, seed=seed, n_failed=n_failed)


def _replicate_matrix(boot, with_ate=True):
    if with_ate:
        return np.stack([np.append(th.as_vector(), a) for th, a, _ in boot.replicates])
    return np.stack([th.as_vector() for th, _, _ in boot.replicates])


def summarize(boot: BootstrapResult, level: float = 0.95):
    """Per-parameter bootstrap mean, SD, percentile CI, and sign-flip p-value."""
    n = len(boot.replicates)
    if n < 20:
        raise ValueError(f"need at least 20 retained replicates, have {n}")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    p_dim = boot.replicates[0][0].p
    names = list(Theta.param_names(p_dim)) + ["ate"]
    mat = _replicate_matrix(boot)
    mean = mat.mean(axis=0)
    se = mat.std(axis=0, ddof=1)
    lo = np.quantile(mat, (1.0 - level) / 2.0, axis=0)
    hi = np.quantile(mat, (1.0 + level) / 2.0, axis=0)
    floor = 2.0 / (n + 1)
    out = {}
    for k, name in enumerate(names):
        col = mat[:, k]
        two_sided = 2.0 * min(float(np.mean(col <= 0.0)), float(np.mean(col >= 0.0)))
        out[name] = {
            "mean": float(mean[k]),
            "se": float(se[k]),
            "ci": (float(lo[k]), float(hi[k])),
            "p": min(1.0, max(floor, two_sided)),
        }
    return out


def wald_group_test(boot: BootstrapResult, group, fit: FitResult) -> TestReport:
    """Joint chi-square test that a block of propensity coefficients is zero.

    The statistic pairs the point fit's subvector with the bootstrap
    covariance of the same block.
    """
    group = list(group)
    if not group:
        raise ValueError("empty coefficient group")
    names = list(Theta.param_names(fit.theta.p))
    for g in group:
        if g not in names or not (g == "xi" or g.startswith("eta")):
            raise ValueError(f"{g!r} is not a propensity coefficient (eta*/xi)")
    idx = [names.index(g) for g in group]
    point = fit.theta.as_vector()[idx]
    mat = _replicate_matrix(boot, with_ate=False)[:, idx]
    cov = np.atleast_2d(np.cov(mat, rowvar=False, ddof=1))
    cond = np.linalg.cond(cov)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericalError(
            f"bootstrap covariance of {group} singular (condition {cond:.2e}); "
            "increase B")
    stat = float(point @ np.linalg.solve(cov, point))
    df = len(group)
    return TestReport(statistic=stat, df=df, p_value=float(chi2.sf(stat, df)),
                      method="wald chi-square on bootstrap covariance")


# --------------------------------------------------------------------------
# reduced model, LRT, conditional log-likelihood
# --------------------------------------------------------------------------

def _logistic_irls(X, d, *, max_iters=100, tol=1e-12):
    eta = np.zeros(X.shape[1])
    eye = np.eye(X.shape[1])
    for _ in range(max_iters):
        p_hat = expit(X @ eta)
        grad = X.T @ (d - p_hat)
        w = p_hat * (1.0 - p_hat)
        hess = (X * w[:, None]).T @ X
        try:
            step = cho_solve(cho_factor(hess + 1e-12 * eye), grad)
        except np.linalg.LinAlgError:
            raise NumericalError("logistic design ill-conditioned")
        norm = float(np.linalg.norm(step))
        if norm > 1e3:
            step *= 1e3 / norm
        eta = eta + step
        if float(np.max(np.abs(step))) < tol:
            break
    return eta


def fit_reduced(design, cfg: FitConfig = FitConfig()) -> FitResult:
    """No-latent-confounder fit: OLS outcome block, plain logistic propensity.

    omega, xi, sigma_b have no meaning here and are reported as 0.
    """
    gram = design.x_tilde.T @ design.x_tilde
    em._check_gram(design, gram)
    beta = cho_solve(cho_factor(gram), design.x_tilde.T @ design.y)
    resid = design.y - design.x_tilde @ beta
    s2 = float(np.dot(resid, resid)) / design.N
    eta = _logistic_irls(design.x_star, design.d)
    lin = design.x_star @ eta
    ll_or = -0.5 * design.N * (np.log(2.0 * np.pi * s2) + 1.0)
    ll_ps = float(np.sum(design.d * lin - softplus(lin)))
    theta = Theta(beta=beta, sigma=float(np.sqrt(s2)), omega=0.0,
                  eta=eta, xi=0.0, sigma_b=0.0)
    ll = ll_or + ll_ps
    return FitResult(
        theta=theta, converged=True, n_iters=1,
        loglik_trace=np.array([ll]), loglik=ll, posterior=[],
        diagnostics=["reduced model: b fixed at 0; omega, xi, sigma_b reported as 0"],
    )


def lrt_sigma_b(design, cfg: FitConfig = FitConfig(), *,
                full_fit: FitResult | None = None) -> TestReport:
    """Likelihood-ratio test of zero latent variance on the outcome block.

    Both log-likelihoods are outcome-only: the full model integrates b out
    of its Gaussian factor exactly; the reduced model is OLS. df = 2 (the
    full outcome block adds omega and sigma_b).
    """
    if full_fit is None:
        theta0 = initialization.initialize(design, cfg).theta0
        full_fit = em.fit(design, theta0, cfg)
    ll_full = laplace.or_marginal_loglik(design, full_fit.theta)
    gram = design.x_tilde.T @ design.x_tilde
    em._check_gram(design, gram)
    beta = cho_solve(cho_factor(gram), design.x_tilde.T @ design.y)
    resid = design.y - design.x_tilde @ beta
    s2 = float(np.dot(resid, resid)) / design.N
    ll_reduced = -0.5 * design.N * (np.log(2.0 * np.pi * s2) + 1.0)
    stat = 2.0 * (ll_full - ll_reduced)
    n_beta = design.x_tilde.shape[1]
    method = (f"outcome-block likelihood ratio, parameter counts {n_beta + 2} vs "
              f"{n_beta}; plain chi-square tail (variance-boundary caveat)")
    if stat < -1e-6:
        method += "; negative statistic: optimization failure suspected, p forced to 1"
        p = 1.0
    else:
        p = float(chi2.sf(max(stat, 0.0), 2))
    return TestReport(statistic=float(stat), df=2, p_value=p, method=method)


def conditional_loglik(fit: FitResult, design, plug_b: str = "posterior_mean") -> float:
    """Sum of outcome and treatment log-densities at a plugged-in b per subject."""
    if plug_b not in ("posterior_mean", "zero"):
        raise ValueError("plug_b must be 'posterior_mean' or 'zero'")
    if plug_b == "posterior_mean":
        if not fit.posterior:
            raise ValueError("fit carries no posterior summaries; use plug_b='zero'")
        b = np.array([s.mean for s in fit.posterior])
    else:
        b = np.zeros(design.m)
    th = fit.theta
    bj = b[design.subject_index]
    resid = design.y - design.x_tilde @ th.beta - (1.0 + th.omega * design.d) * bj
    s2 = th.sigma ** 2
    ll_or = (-0.5 * design.N * np.log(2.0 * np.pi * s2)
             - 0.5 * float(np.dot(resid, resid)) / s2)
    lin = design.x_star @ th.eta + th.xi * bj
    ll_ps = float(np.sum(design.d * lin - softplus(lin)))
    return float(ll_or + ll_ps)


def sensitivity_drops(dataset, drops, cfg: FitConfig = FitConfig()):
    """Conditional log-likelihood after removing one covariate at a time."""
    out = {}
    for name in drops:
        ds = panel_data.drop_columns(dataset, [name])
        design = panel_data.expand_design(ds)
        theta0 = initialization.initialize(design, cfg).theta0
        res = em.fit(design, theta0, cfg)
        out[name] = conditional_loglik(res, design, "posterior_mean")
    return out


# --------------------------------------------------------------------------
# report assembly
# --------------------------------------------------------------------------

def report_dict(fit: FitResult, design, boot: BootstrapResult, *,
                level: float = 0.95, groups=(), lrt: TestReport | None = None,
                sensitivity=None):
    """The inference artifact: per-parameter block plus tests and sensitivity."""
    summ = summarize(boot, level)
    names = list(Theta.param_names(fit.theta.p)) + ["ate"]
    estimates = np.append(fit.theta.as_vector(), effects.ate(fit, design))
    report = {}
    for k, name in enumerate(names):
        s = summ[name]
        report[name] = {
            "estimate": float(estimates[k]),
            "boot_mean": s["mean"],
            "se": s["se"],
            "ci": [s["ci"][0], s["ci"][1]],
            "p": s["p"],
        }
    tests = {}
    if lrt is not None:
        tests["lrt"] = lrt.as_dict()
    if groups:
        entries = []
        for group in groups:
            tr = wald_group_test(boot, group, fit)
            entries.append({"members": list(group), **tr.as_dict()})
        tests["groups"] = entries
    if tests:
        report["tests"] = tests
    if sensitivity is not None:
        report["sensitivity"] = sensitivity
    return report
