"""EM engine: Laplace E-step summaries, closed-form M-steps, Newton inner loop.

One iteration freezes the posterior summaries, then updates sequentially:
beta (with the incoming omega and means), omega (with the fresh beta),
sigma^2 (fresh beta and omega), sigma_b^2, and finally (eta, xi) by damped
Newton on the propensity component. Each substep maximizes its own piece of
the E-step objective given the frozen summaries.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit

from . import laplace
from .laplace import (NumericalError, PosteriorSummary, PosteriorTable, Theta,
                      SIGMA_B_FLOOR, SIGMA_FLOOR, softplus)

_COND_LIMIT = 1e12


@dataclass(frozen=True)
class FitConfig:
    """Loop controls; all entries must be positive."""

    max_em_iters: int = 500
    em_tol: float = 1e-6
    newton_max_iters: int = 50
    newton_tol: float = 1e-8
    step_halving_max: int = 20
    sigma_floor: float = SIGMA_FLOOR
    sigma_b_floor: float = SIGMA_B_FLOOR

    def __post_init__(self):
        for name in ("max_em_iters", "em_tol", "newton_max_iters", "newton_tol",
                     "step_halving_max", "sigma_floor", "sigma_b_floor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"FitConfig.{name} must be positive")


@dataclass
class FitResult:
    theta: Theta
    converged: bool
    n_iters: int
    loglik_trace: np.ndarray        # observed log-likelihood at the start of each iteration
    loglik: float                   # observed log-likelihood at the returned theta
    posterior: list[PosteriorSummary]
    diagnostics: list[str] = field(default_factory=list)


# --------------------------------------------------------------------------
# posterior plumbing
# --------------------------------------------------------------------------

def _moment_arrays(posterior):
    """(b_mode, precision, mean, variance, second_moment) from either form."""
    if isinstance(posterior, PosteriorTable):
        return (posterior.b_mode, posterior.precision, posterior.mean,
                posterior.variance, posterior.second_moment)
    b = np.array([s.b_mode for s in posterior])
    a = np.array([s.precision for s in posterior])
    mu = np.array([s.mean for s in posterior])
    v = np.array([s.variance for s in posterior])
    delta = np.array([s.second_moment for s in posterior])
    return b, a, mu, v, delta


def e_step(design, th: Theta) -> list[PosteriorSummary]:
    """One posterior summary per subject, dataset order."""
    table = laplace.posterior_table(design, th)
    return [
        PosteriorSummary(
            b_mode=float(table.b_mode[i]),
            precision=float(table.precision[i]),
            mean=float(table.mean[i]),
            variance=float(table.variance[i]),
            second_moment=float(table.second_moment[i]),
        )
        for i in range(design.m)
    ]


# --------------------------------------------------------------------------
# closed-form M-steps
# --------------------------------------------------------------------------

def _check_gram(design, gram):
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        r, pivot = scipy.linalg.qr(design.x_tilde, mode="r", pivoting=True)
        diag = np.abs(np.diag(r))
        tol = diag[0] * 1e-12 if diag.size and diag[0] > 0 else 0.0
        from .panel_data import design_column_names
        names = design_column_names(design)
        offending = [names[pivot[k]] for k in range(diag.size) if diag[k] <= tol]
        raise NumericalError(
            f"rank-deficient design (condition {cond:.2e}); offending columns: {offending}")


def _gram_factor(design):
    gram = design.x_tilde.T @ design.x_tilde
    _check_gram(design, gram)
    return cho_factor(gram), design.x_tilde.T @ design.y


def m_step_beta(design, posterior, omega_k: float, *, _factor=None) -> np.ndarray:
    """Weighted-residual normal equations solved by an SPD factorization."""
    cho, xty = _gram_factor(design) if _factor is None else _factor
    _, _, mu, _, _ = _moment_arrays(posterior)
    w = 1.0 + float(omega_k) * design.d
    rhs = xty - design.x_tilde.T @ (w * mu[design.subject_index])
    return cho_solve(cho, rhs)


def m_step_omega(design, posterior, beta_next) -> float:
    """Treated-record moment ratio minus one."""
    _, _, mu, _, delta = _moment_arrays(posterior)
    r = design.y - design.x_tilde @ np.asarray(beta_next, dtype=float)
    num = float(np.dot(np.bincount(design.subject_index, weights=r * design.d,
                                   minlength=design.m), mu))
    treated = np.bincount(design.subject_index, weights=design.d, minlength=design.m)
    den = float(np.dot(treated, delta))
    if den == 0.0:
        raise NumericalError("omega unidentified: no treated records or all second moments zero")
    return num / den - 1.0


def _expected_ssr(design, posterior, beta, omega) -> float:
    """E || y - x_tilde beta - (1 + omega d) b ||^2 under the frozen posterior."""
    _, _, mu, _, delta = _moment_arrays(posterior)
    r = design.y - design.x_tilde @ np.asarray(beta, dtype=float)
    w = 1.0 + float(omega) * design.d
    treated = np.bincount(design.subject_index, weights=design.d, minlength=design.m)
    n = design.n_per_subject.astype(float)
    cross = float(np.sum(r * w * mu[design.subject_index]))
    quad = float(np.dot(n + (2.0 * omega + omega * omega) * treated, delta))
    return float(np.dot(r, r)) - 2.0 * cross + quad


def m_step_sigma2(design, posterior, beta_next, omega_next,
                  *, floor: float = SIGMA_FLOOR) -> float:
    """Expected residual mean square, floored at floor**2."""
    raw = _expected_ssr(design, posterior, beta_next, omega_next) / design.N
    return max(raw, floor * floor)


def m_step_sigma_b2(posterior, *, floor: float = SIGMA_B_FLOOR) -> float:
    """Mean posterior second moment, floored at floor**2."""
    _, _, _, _, delta = _moment_arrays(posterior)
    return max(float(np.mean(delta)), floor * floor)


def q1_objective(design, posterior, beta, omega, sigma2: float) -> float:
    """Outcome component of the E-step objective (used by ascent checks)."""
    essr = _expected_ssr(design, posterior, beta, omega)
    return -0.5 * design.N * np.log(2.0 * np.pi * sigma2) - 0.5 * essr / sigma2


def q3_objective(posterior, sigma_b2: float) -> float:
    """Latent-variance component of the E-step objective."""
    _, _, _, _, delta = _moment_arrays(posterior)
    m = delta.shape[0]
    return float(-0.5 * m * np.log(2.0 * np.pi * sigma_b2) - 0.5 * np.sum(delta) / sigma_b2)


# --------------------------------------------------------------------------
# propensity block
# --------------------------------------------------------------------------

def q2_objective(design, posterior, eta, xi: float):
    """Propensity component of the E-step objective with exact derivatives.

    The linear term couples d to the posterior mean; the softplus term is the
    plug-in at the subject mode. Returns (value, gradient, hessian) in the
    stacked variable (eta, xi).
    """
    b_mode, _, mu, _, _ = _moment_arrays(posterior)
    eta = np.asarray(eta, dtype=float)
    xi = float(xi)
    idx = design.subject_index
    bmj = b_mode[idx]
    lin = design.x_star @ eta
    logits = lin + xi * bmj
    p = expit(logits)
    d = design.d
    d_mu = float(np.sum(d * mu[idx]))
    value = float(np.sum(d * lin)) + xi * d_mu - float(np.sum(softplus(logits)))
    grad = np.append(design.x_star.T @ (d - p), d_mu - float(np.sum(bmj * p)))
    u = np.hstack([design.x_star, bmj[:, None]])
    hess = -(u * (p * (1.0 - p))[:, None]).T @ u
    return value, grad, hess


def _newton_step(hess, grad):
    """Solve -hess s = grad, escalating a ridge when the solve fails."""
    neg = -hess
    if not np.all(np.isfinite(neg)):
        raise NumericalError("PS update ill-conditioned: non-finite hessian")
    ridge = 0.0
    while True:
        try:
            fac = cho_factor(neg + ridge * np.eye(neg.shape[0]))
            return cho_solve(fac, grad)
        except np.linalg.LinAlgError:
            pass
        except scipy.linalg.LinAlgError:
            pass
        ridge = 1e-8 if ridge == 0.0 else ridge * 10.0
        if ridge > 1e-2:
            raise NumericalError("PS update ill-conditioned")


# When the latent-variance estimate is near zero the posterior moments carry
# almost no curvature in xi, so Newton can move xi by several units per call
# without lowering the frozen-posterior objective; the next E-step then lands
# outside the stencil's validity region (approximate variance goes negative
# once xi^2 sum(pq) exceeds the Gaussian curvature A). Bounding the total xi
# movement per call keeps the walk slower than the sigma_b^2 collapse that
# eventually makes the stencil safe again.
_XI_TRUST_RADIUS = 1.0


def newton_eta_xi(design, posterior, start, cfg: FitConfig = FitConfig()):
    """Damped Newton ascent of q2_objective from start = (eta, xi)."""
    eta = np.asarray(start[0], dtype=float).copy()
    xi = float(start[1])
    xi_start = xi
    value, grad, hess = q2_objective(design, posterior, eta, xi)
    for _ in range(cfg.newton_max_iters):
        step = _newton_step(hess, grad)
        if step[-1] > 0.0:
            room = (xi_start + _XI_TRUST_RADIUS) - xi
        else:
            room = xi - (xi_start - _XI_TRUST_RADIUS)
        if abs(step[-1]) > room:
            step = step * (room / abs(step[-1]))
        scale = 1.0
        accepted = None
        for _ in range(cfg.step_halving_max + 1):
            cand_eta = eta + scale * step[:-1]
            cand_xi = xi + scale * step[-1]
            cand = q2_objective(design, posterior, cand_eta, cand_xi)
            if cand[0] >= value:
                accepted = (cand_eta, cand_xi, cand, scale)
                break
            scale *= 0.5
        if accepted is None:
            break  # no non-decreasing step along this direction
        eta, xi, (value, grad, hess), scale = accepted
        moved = scale * step
        if float(np.dot(moved, moved)) < cfg.newton_tol:
            break
    return eta, xi


# --------------------------------------------------------------------------
# the loop
# --------------------------------------------------------------------------

def fit(design, init: Theta, cfg: FitConfig = FitConfig()) -> FitResult:
    """Run the EM loop from init until both parameters and log-likelihood stall.

    Convergence requires max relative parameter change < em_tol AND relative
    log-likelihood change < em_tol. Hitting max_em_iters is reported via
    converged=False, not an exception; M-step failures raise.
    """
    th = init.validate()
    factor = _gram_factor(design)
    trace: list[float] = []
    diagnostics: list[str] = []
    clamp_events = 0
    converged = False
    prev_ll = None
    last_good = None

    for iteration in range(1, cfg.max_em_iters + 1):
        try:
            table = laplace.posterior_table(design, th)
        except NumericalError as exc:
            # A mid-run iterate left the stencil's validity region (possible
            # when sigma_b^2 is collapsing toward zero). The previous iterate
            # is still a perfectly good, evaluable parameter point, so stop
            # there and report the truncation as a state, like
            # non-convergence, rather than destroying the whole fit. A first
            # E-step failure means the start itself is invalid: re-raise.
            if last_good is None:
                raise
            th = last_good
            diagnostics.append(
                f"E-step left the approximation's validity region at iteration "
                f"{iteration} ({exc}); rolled back to the last stable iterate")
            break
        last_good = th
        clamp_events += int(np.sum(table.clamped))
        ll = float(np.sum(table.loglik))
        trace.append(ll)

        beta = m_step_beta(design, table, th.omega, _factor=factor)
        omega = m_step_omega(design, table, beta)
        sigma2_raw = _expected_ssr(design, table, beta, omega) / design.N
        sigma2 = max(sigma2_raw, cfg.sigma_floor ** 2)
        if sigma2 > sigma2_raw:
            diagnostics.append(f"iteration {iteration}: sigma^2 floored at {cfg.sigma_floor}^2")
        _, _, _, _, delta = _moment_arrays(table)
        sigma_b2_raw = float(np.mean(delta))
        sigma_b2 = max(sigma_b2_raw, cfg.sigma_b_floor ** 2)
        if sigma_b2 > sigma_b2_raw:
            diagnostics.append(f"iteration {iteration}: sigma_b^2 floored at {cfg.sigma_b_floor}^2")
        eta, xi = newton_eta_xi(design, table, (th.eta, th.xi), cfg)
        new_th = Theta(beta=beta, sigma=float(np.sqrt(sigma2)), omega=float(omega),
                       eta=eta, xi=float(xi), sigma_b=float(np.sqrt(sigma_b2)))

        old_vec = th.as_vector()
        new_vec = new_th.as_vector()
        param_delta = float(np.max(np.abs(new_vec - old_vec) / (1.0 + np.abs(old_vec))))
        ll_delta = None if prev_ll is None else abs(ll - prev_ll) / (1.0 + abs(ll))
        th = new_th
        prev_ll = ll
        if ll_delta is not None and param_delta < cfg.em_tol and ll_delta < cfg.em_tol:
            converged = True
            break

    try:
        final_table = laplace.posterior_table(design, th)
    except NumericalError as exc:
        # converged-break evaluates a theta the loop never E-stepped; if that
        # point is invalid, fall back to its predecessor
        if last_good is None:
            raise
        th = last_good
        converged = False
        diagnostics.append(
            f"final iterate left the approximation's validity region ({exc}); "
            "rolled back to the last stable iterate")
        final_table = laplace.posterior_table(design, th)
    clamp_events += int(np.sum(final_table.clamped))
    if clamp_events:
        diagnostics.append(f"posterior variance clamped to 0 in {clamp_events} subject-iterations")
    posterior = [
        PosteriorSummary(
            b_mode=float(final_table.b_mode[i]),
            precision=float(final_table.precision[i]),
            mean=float(final_table.mean[i]),
            variance=float(final_table.variance[i]),
            second_moment=float(final_table.second_moment[i]),
        )
        for i in range(design.m)
    ]
    return FitResult(
        theta=th,
        converged=converged,
        n_iters=len(trace),
        loglik_trace=np.asarray(trace),
        loglik=float(np.sum(final_table.loglik)),
        posterior=posterior,
        diagnostics=diagnostics,
    )
