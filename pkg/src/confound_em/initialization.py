"""Starting values for the EM loop.

Three cheap fits feed the candidate list: a random-intercept Gaussian
mixed model for (beta, sigma), separate treated/untreated mixed models
whose variance ratio seeds omega and sigma_b, and a random-intercept
logistic fit whose latent variance seeds xi up to sign. Both xi signs
are raced with short EM probes and the winner becomes theta0.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit

from . import em
from .em import FitConfig
from .laplace import NumericalError, SIGMA_FLOOR, Theta

_LMM_TOL = 1e-8
_LMM_MAX_ITERS = 200
_SIGMA_B2_INIT_FLOOR = 1e-3    # EM stalls in a near-zero latent-variance basin
_OMEGA_INIT_FLOOR = -0.99
_XI_INIT_CAP = 10.0


@dataclass
class InitReport:
    theta0: Theta
    candidates_tried: list[tuple[Theta, float]]
    notes: list[str] = field(default_factory=list)


def _note(notes, text):
    if notes is not None:
        notes.append(text)


# --------------------------------------------------------------------------
# Gaussian random-intercept fit (exact EM)
# --------------------------------------------------------------------------

def fit_lmm(y, X, groups, *, notes=None, tol=_LMM_TOL, max_iters=_LMM_MAX_ITERS):
    """Maximum-likelihood (beta, sigma2, sigma_b2) for y = X beta + b_g + eps.

    Conjugate E-step, closed-form M-steps. Returns sigma_b2 = 0 when the
    between-group variance collapses or every group is a singleton.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    _, dense = np.unique(np.asarray(groups), return_inverse=True)
    n_g = np.bincount(dense).astype(float)
    m = n_g.shape[0]
    N = y.shape[0]

    gram = X.T @ X
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericalError(f"mixed-model initializer design singular (condition {cond:.2e})")
    fac = cho_factor(gram)
    beta = cho_solve(fac, X.T @ y)
    r = y - X @ beta

    if np.all(n_g == 1.0):
        _note(notes, "one record per group: sigma^2 and sigma_b^2 jointly "
                     "unidentified; returning sigma_b^2 = 0")
        return beta, float(np.mean(r * r)), 0.0

    rbar = np.bincount(dense, weights=r, minlength=m) / n_g
    total = float(np.var(r))
    sb2 = max(float(np.var(rbar)), _SIGMA_B2_INIT_FLOOR)
    s2 = max(total - sb2, _SIGMA_B2_INIT_FLOOR)

    for _ in range(max_iters):
        r = y - X @ beta
        seg_r = np.bincount(dense, weights=r, minlength=m)
        A = n_g / s2 + 1.0 / sb2
        mu = seg_r / s2 / A
        v = 1.0 / A
        delta = v + mu * mu

        beta_new = cho_solve(fac, X.T @ (y - mu[dense]))
        r_new = y - X @ beta_new
        res = r_new - mu[dense]
        s2_new = (float(np.dot(res, res)) + float(np.dot(n_g, v))) / N
        sb2_new = float(np.mean(delta))

        old = np.concatenate([beta, [s2, sb2]])
        new = np.concatenate([beta_new, [s2_new, sb2_new]])
        change = float(np.max(np.abs(new - old) / (1.0 + np.abs(old))))
        if sb2_new < 1e-12:
            beta = cho_solve(fac, X.T @ y)
            r = y - X @ beta
            return beta, float(np.dot(r, r)) / N, 0.0
        beta, s2, sb2 = beta_new, s2_new, sb2_new
        if change < tol:
            break
    return beta, float(s2), float(sb2)


def init_beta_sigma(design, *, notes=None):
    """(beta, sigma) from a random-intercept fit of y on the full design."""
    beta, s2, _ = fit_lmm(design.y, design.x_tilde, design.subject_index, notes=notes)
    return beta, float(np.sqrt(max(s2, SIGMA_FLOOR ** 2)))


def init_omega_sigma_b(design, *, notes=None):
    """(omega, sigma_b2) from the treated/untreated variance ratio.

    Random-intercept variance is estimated separately on treated and
    untreated records (clustered by subject); the square-root ratio minus
    one seeds omega (positive root; the sign race resolves the rest).
    """
    def pooled():
        # x_star, not x_tilde: with an empty arm the interaction block is
        # identically zero and the pooled gram would be singular
        _, _, sb2 = fit_lmm(design.y, design.x_star, design.subject_index, notes=notes)
        return 0.0, max(sb2, _SIGMA_B2_INIT_FLOOR)

    treated = design.d == 1.0
    if not treated.any() or treated.all():
        _note(notes, "one treatment arm empty: omega init 0, sigma_b^2 from pooled fit")
        return pooled()
    try:
        _, _, var_t = fit_lmm(design.y[treated], design.x_star[treated],
                              design.subject_index[treated], notes=notes)
        _, _, var_u = fit_lmm(design.y[~treated], design.x_star[~treated],
                              design.subject_index[~treated], notes=notes)
    except NumericalError as exc:
        _note(notes, f"per-arm variance fits failed ({exc}): omega init 0, "
                     "sigma_b^2 from pooled fit")
        return pooled()
    if var_u <= 1e-10:
        _note(notes, "untreated random-intercept variance ~0: omega init 0, "
                     "sigma_b^2 from pooled fit")
        return pooled()
    omega = float(np.sqrt(var_t / var_u)) - 1.0
    if omega < _OMEGA_INIT_FLOOR:
        _note(notes, f"omega init floored at {_OMEGA_INIT_FLOOR}")
        omega = _OMEGA_INIT_FLOOR
    elif omega < 0.0:
        _note(notes, "treated variance below untreated: omega init in (-1, 0), "
                     "sign resolved by the candidate race")
    return omega, max(float(var_u), _SIGMA_B2_INIT_FLOOR)


# --------------------------------------------------------------------------
# logistic random-intercept fit (Laplace)
# --------------------------------------------------------------------------

def _glmm_logit(design, *, notes=None, tol=1e-6, max_outer=100):
    """(eta, latent variance) for logit P(d=1) = eta'x* + b_g, b_g ~ N(0, s2)."""
    X = design.x_star
    d = design.d
    idx = design.subject_index
    m = design.m
    eta = np.zeros(design.p)
    s2 = 0.5
    b = np.zeros(m)
    separation_noted = False

    for _ in range(max_outer):
        lin = X @ eta
        for _ in range(50):
            p_ij = expit(lin + b[idx])
            g = np.bincount(idx, weights=d - p_ij, minlength=m) - b / s2
            h = np.bincount(idx, weights=p_ij * (1.0 - p_ij), minlength=m) + 1.0 / s2
            step = np.clip(g / h, -5.0, 5.0)
            b += step
            if float(np.max(np.abs(step))) < 1e-9:
                break
        p_ij = expit(lin + b[idx])
        grad = X.T @ (d - p_ij)
        w = p_ij * (1.0 - p_ij)
        hess = (X * w[:, None]).T @ X
        try:
            step = cho_solve(cho_factor(hess + 1e-10 * np.eye(design.p)), grad)
        except np.linalg.LinAlgError:
            raise NumericalError("propensity initializer hessian singular")
        norm = float(np.linalg.norm(step))
        if norm > 1e3:
            step *= 1e3 / norm
            if not separation_noted:
                _note(notes, "possible separation in the propensity initializer: "
                             "Newton step capped")
                separation_noted = True
        eta = eta + step
        h = np.bincount(idx, weights=p_ij * (1.0 - p_ij), minlength=m) + 1.0 / s2
        s2_new = max(float(np.mean(b * b + 1.0 / h)), 1e-6)
        done = (float(np.max(np.abs(step))) < tol
                and abs(s2_new - s2) < tol * (1.0 + s2))
        s2 = s2_new
        if done:
            break
    return eta, s2


def init_eta_xi(design, sigma_b2, *, notes=None):
    """Candidate (eta, xi) pairs: both signs of sqrt(Var(b*)/sigma_b2)."""
    eta, s2 = _glmm_logit(design, notes=notes)
    if sigma_b2 <= 0.0:
        _note(notes, "sigma_b^2 init nonpositive: single candidate with xi = 0")
        return [(eta, 0.0)]
    xi0 = float(np.sqrt(s2 / sigma_b2))
    if xi0 > _XI_INIT_CAP:
        _note(notes, f"xi init capped at {_XI_INIT_CAP}")
        xi0 = _XI_INIT_CAP
    return [(eta, xi0), (eta, -xi0)]


# --------------------------------------------------------------------------
# candidate race
# --------------------------------------------------------------------------

def select_init(design, candidates, cfg: FitConfig = FitConfig()) -> InitReport:
    """Probe each candidate with a 5-iteration EM run; best log-likelihood wins.

    theta0 is the winning ORIGINAL candidate (the full fit restarts from it),
    tie-broken by list position. Failed probes score -inf.
    """
    if not candidates:
        raise ValueError("select_init needs at least one candidate")
    probe_cfg = replace(cfg, max_em_iters=5)
    tried: list[tuple[Theta, float]] = []
    notes: list[str] = []
    for k, th in enumerate(candidates):
        try:
            score = em.fit(design, th, probe_cfg).loglik
        except (NumericalError, np.linalg.LinAlgError) as exc:
            score = float("-inf")
            notes.append(f"candidate {k} probe failed: {exc}")
        tried.append((th, score))
    best = 0
    for k in range(1, len(tried)):
        if tried[k][1] > tried[best][1]:
            best = k
    if tried[best][1] == float("-inf"):
        raise NumericalError("all initialization candidates failed: " + "; ".join(notes))
    return InitReport(theta0=tried[best][0], candidates_tried=tried, notes=notes)


def initialize(design, cfg: FitConfig = FitConfig()) -> InitReport:
    """Full starting-value pipeline: component inits, candidate assembly, race."""
    notes: list[str] = []
    beta, sigma = init_beta_sigma(design, notes=notes)
    omega, sb2 = init_omega_sigma_b(design, notes=notes)
    sb2 = max(sb2, _SIGMA_B2_INIT_FLOOR)
    ps_candidates = init_eta_xi(design, sb2, notes=notes)
    sigma_b = float(np.sqrt(sb2))
    candidates = [
        Theta(beta=beta, sigma=sigma, omega=omega, eta=eta, xi=float(xi), sigma_b=sigma_b)
        for eta, xi in ps_candidates
    ]
    report = select_init(design, candidates, cfg)
    report.notes = notes + report.notes
    return report
