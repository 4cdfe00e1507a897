"""Standard penalized Levenberg-Marquardt history matching.

Minimizes the prior-penalized objective (data misfit plus squared prior
norm of the deviation from the prior mean) with a multiplicative damping
schedule: the damping drops tenfold after a decrease of the objective and
grows tenfold otherwise.  By default an uphill proposal is rejected and
retried with stronger damping; ``accept_uphill`` keeps every proposal,
mimicking a schedule-only variant.  Stopping requires both a relative
objective change below ``eps0`` and a relative iterate change below
``eps1``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigError, NumericalError
from .geostat import CovarianceOperator
from .reg_lm import _check_gamma, _whiten

log = logging.getLogger(__name__)

LAMBDA_DROP = 0.1
LAMBDA_RAISE = 10.0


@dataclass(frozen=True)
class StdLMConfig:
    lambda0: float | None = None     # None: J(u0) / n_obs
    eps0: float = 1e-4
    eps1: float = 1e-3
    max_iterations: int = 50
    lambda_floor: float = 1e-10
    lambda_cap: float = 1e10
    accept_uphill: bool = False

    def __post_init__(self):
        if self.eps0 <= 0 or self.eps1 <= 0:
            raise ConfigError("stopping tolerances must be positive")
        if self.lambda0 is not None and not self.lambda0 > 0:
            raise ConfigError("lambda0 must be positive")
        if not 0 < self.lambda_floor <= self.lambda_cap:
            raise ConfigError("need 0 < lambda_floor <= lambda_cap")


@dataclass
class StdIterationRecord:
    iteration: int
    misfit: float
    objective: float
    lam: float
    stop_metric_obj: float = np.nan
    stop_metric_u: float = np.nan
    rel_error: float = np.nan
    accepted: bool = True
    seconds: float = 0.0
    u: np.ndarray | None = None


@dataclass
class StdLMResult:
    u: np.ndarray
    records: list[StdIterationRecord]
    converged: bool

    @property
    def accepted_records(self) -> list[StdIterationRecord]:
        return [r for r in self.records if r.accepted]


def objective(u, y, g, gamma, cov: CovarianceOperator, u_prior) -> float:
    """Half squared whitened misfit plus half squared prior norm."""
    y = np.asarray(y, dtype=float)
    g = np.asarray(g, dtype=float)
    gamma = _check_gamma(gamma, y.size)
    data = 0.5 * float(np.sum((y - g) ** 2 / gamma))
    dev = np.asarray(u, dtype=float) - np.asarray(u_prior, dtype=float)
    prior = 0.5 * cov.inv_norm_sq(dev)
    return data + prior


def std_lm_step(u, u_prior, residual, dg, c_dgt, dg_c_dgt, gamma, lam: float) -> np.ndarray:
    """Damped Gauss-Newton increment for the penalized objective.

    Computed in the observation space:
    ``du = C DG^T [DG C DG^T + (1+lam) Gamma]^{-1}
    [d + (1+lam)^{-1} DG (u - u_prior)] + (1+lam)^{-1} (u_prior - u)``,
    the dual form of the normal equations
    ``[DG^T Gamma^{-1} DG + (1+lam) C^{-1}] du =
    DG^T Gamma^{-1} d - C^{-1} (u - u_prior)``.
    """
    if lam < 0:
        raise ConfigError("damping must be nonnegative")
    u = np.asarray(u, dtype=float)
    residual = np.asarray(residual, dtype=float)
    gamma = _check_gamma(gamma, residual.size)
    w, d_white, sig = _whiten(np.asarray(dg_c_dgt, dtype=float), gamma, residual)
    dev = u - np.asarray(u_prior, dtype=float)
    scale = 1.0 / (1.0 + lam)
    rhs = d_white + scale * ((dg @ dev) / sig)
    system = w + (1.0 + lam) * np.eye(w.shape[0])
    try:
        x = cho_solve(cho_factor(system, lower=True), rhs)
    except np.linalg.LinAlgError:
        # Diverged iterates can make ||W|| so large that roundoff drowns the
        # (1+lam) shift; the symmetric indefinite factorization still solves
        # the system in its well-determined directions.
        try:
            x = scipy.linalg.solve(system, rhs, assume_a="sym")
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular augmented system at lambda={lam}") from exc
    return c_dgt @ (x / sig) - scale * dev


def lambda_schedule(lam: float, obj_new: float, obj_old: float,
                    floor: float, cap: float) -> float:
    """Tenfold drop on a decrease, tenfold raise otherwise, clamped."""
    nxt = lam * LAMBDA_DROP if obj_new < obj_old else lam * LAMBDA_RAISE
    return min(max(nxt, floor), cap)


def run_std_lm(problem, cov: CovarianceOperator, y, gamma, config: StdLMConfig,
               u0, u_prior=None, truth=None, keep_iterates: bool = False) -> StdLMResult:
    """Drive the penalized scheme from u0 (normally the prior mean).

    A proposal is accepted when the objective does not increase (or always,
    with ``accept_uphill``); rejected proposals keep the iterate and the
    Jacobian and only raise the damping.  Records are appended for every
    proposal with an ``accepted`` flag; stopping metrics are evaluated on
    accepted steps only.
    """
    y = np.asarray(y, dtype=float)
    gamma = _check_gamma(gamma, y.size)
    sig = np.sqrt(gamma)
    u = np.asarray(u0, dtype=float).copy()
    u_prior = u.copy() if u_prior is None else np.asarray(u_prior, dtype=float)
    truth_v = None if truth is None else np.asarray(truth, dtype=float)
    truth_norm = None if truth_v is None else float(np.linalg.norm(truth_v))

    def rel_err(v):
        if truth_norm:
            return float(np.linalg.norm(v - truth_v)) / truth_norm
        return np.nan

    t0 = time.perf_counter()
    g = problem.forward(u)
    obj = objective(u, y, g, gamma, cov, u_prior)
    misfit = float(np.linalg.norm((y - g) / sig))
    lam = config.lambda0 if config.lambda0 is not None else max(obj / y.size, 1e-300)
    records = [StdIterationRecord(iteration=0, misfit=misfit, objective=obj, lam=lam,
                                  rel_error=rel_err(u), seconds=time.perf_counter() - t0,
                                  u=u.copy() if keep_iterates else None)]
    converged = False
    dg = c_dgt = dg_c_dgt = None

    for m in range(1, config.max_iterations + 1):
        t_start = time.perf_counter()
        if dg is None:
            dg = problem.jacobian(u)
            c_dgt = cov.matrix @ dg.T
            dg_c_dgt = dg @ c_dgt
            dg_c_dgt = 0.5 * (dg_c_dgt + dg_c_dgt.T)
        du = std_lm_step(u, u_prior, y - g, dg, c_dgt, dg_c_dgt, gamma, lam)
        u_trial = u + du
        try:
            g_trial = problem.forward(u_trial)
        except NumericalError as exc:
            raise NumericalError(
                f"forward evaluation failed at iteration {m} "
                f"(lambda={lam:.3e}): {exc}"
            ) from exc
        obj_trial = objective(u_trial, y, g_trial, gamma, cov, u_prior)
        misfit_trial = float(np.linalg.norm((y - g_trial) / sig))
        accepted = bool(obj_trial <= obj) or config.accept_uphill
        lam_used = lam
        lam = lambda_schedule(lam, obj_trial, obj, config.lambda_floor, config.lambda_cap)

        rec = StdIterationRecord(iteration=m, misfit=misfit_trial, objective=obj_trial,
                                 lam=lam_used, accepted=accepted)
        if accepted:
            denom_obj = obj_trial if obj_trial > 0 else np.finfo(float).tiny
            denom_u = float(np.linalg.norm(u_trial))
            rec.stop_metric_obj = abs(obj_trial - obj) / denom_obj
            rec.stop_metric_u = float(np.linalg.norm(du)) / denom_u if denom_u > 0 else 0.0
            u, g, obj, misfit = u_trial, g_trial, obj_trial, misfit_trial
            rec.rel_error = rel_err(u)
            dg = c_dgt = dg_c_dgt = None  # refresh the linearization next time
        else:
            rec.rel_error = rel_err(u)
            log.info("iteration %d rejected: objective %.6e >= %.6e, lambda -> %.3e",
                     m, obj_trial, obj, lam)
        if keep_iterates:
            rec.u = u.copy()
        rec.seconds = time.perf_counter() - t_start
        records.append(rec)
        log.info("iteration %d: %s J %.6e misfit %.6e lambda %.3e",
                 m, "accepted" if accepted else "rejected", obj_trial,
                 misfit_trial, lam_used)
        if accepted and rec.stop_metric_obj <= config.eps0 and rec.stop_metric_u <= config.eps1:
            converged = True
            log.info("iteration %d: stopping metrics %.3e / %.3e below tolerances",
                     m, rec.stop_metric_obj, rec.stop_metric_u)
            break

    return StdLMResult(u=u, records=records, converged=converged)
