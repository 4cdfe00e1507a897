"""Self-check battery behind the ``check`` verb.

Runs the cross-cutting invariants on the configured case: physics balances
on the actual model, adjoint-versus-finite-difference agreement on a few
columns, and the algebraic update equivalences on random instances.
"""

from __future__ import annotations

import numpy as np

from .errors import ResinvError
from .experiments import CaseSetup
from .reg_lm import RegLMConfig, kappa_eval, reg_lm_step, select_alpha
from .sensitivity import jacobian_adjoint, jacobian_fd
from .simulator import KIND_OIL_RATE, KIND_WATER_RATE
from .std_lm import std_lm_step


def _random_instance(rng, n_params=12, n_obs=5):
    dg = rng.standard_normal((n_obs, n_params))
    b = rng.standard_normal((n_params, n_params))
    cov = b @ b.T + n_params * np.eye(n_params)
    gamma = rng.uniform(0.5, 2.0, n_obs)
    d = rng.standard_normal(n_obs)
    return dg, cov, gamma, d


def check_mass_balance(setup: CaseSetup):
    model = setup.model
    result = model.simulate(setup.prior_mean, record_trajectory=True)
    traj = result.trajectory
    lo, hi = model.params.s_iw, 1.0 - model.params.s_or
    s_ok = bool(np.all(traj.s_nodes >= lo - 1e-12) and np.all(traj.s_nodes <= hi + 1e-12))
    overshoot_ok = result.max_preclamp_overshoot <= 1e-6
    ok = s_ok and overshoot_ok
    return ok, (f"pre-clamp overshoot {result.max_preclamp_overshoot:.2e}, "
                f"saturation bounds {'held' if s_ok else 'violated'} "
                f"(pressure residuals checked at every solve)")


def check_producer_split(setup: CaseSetup):
    model = setup.model
    obs = model.simulate(setup.prior_mean).observations
    lay = obs.layout
    worst = 0.0
    name_to_well = {w.name: i for i, w in enumerate(model.wells)}
    for r in range(lay.report_times.size):
        base = r * lay.block_size
        for i in range(base, base + lay.block_size):
            if lay.kinds[i] != KIND_WATER_RATE:
                continue
            j = next(k for k in range(base, base + lay.block_size)
                     if lay.kinds[k] == KIND_OIL_RATE
                     and lay.well_names[k] == lay.well_names[i])
            q = abs(model.well_rates[name_to_well[lay.well_names[i]], r])
            worst = max(worst, abs(obs.values[i] + obs.values[j] - q) / q)
    ok = worst <= 1e-13
    return ok, f"max relative water+oil vs total-rate error {worst:.2e}"


def check_adjoint_vs_fd(setup: CaseSetup, n_columns=3, seed=0):
    model = setup.model
    base = model.simulate(setup.prior_mean, record_trajectory=True)
    adj = jacobian_adjoint(model, setup.prior_mean, base=base).matrix
    rng = np.random.default_rng(seed)
    cols = rng.choice(model.n_cells, size=min(n_columns, model.n_cells), replace=False)
    h = setup.fd_step
    worst = 0.0
    scale = np.abs(adj).max()
    for j in cols:
        up = setup.prior_mean.copy()
        up[j] += h
        gp = model.simulate(up, fixed_steps=base.dts).observations.values
        up[j] -= 2 * h
        gm = model.simulate(up, fixed_steps=base.dts).observations.values
        fd_col = (gp - gm) / (2 * h)
        denom = np.linalg.norm(fd_col) + 1e-12 * scale
        worst = max(worst, np.linalg.norm(adj[:, j] - fd_col) / denom)
    ok = worst <= 1e-3
    return ok, f"max relative column error {worst:.2e} over {len(cols)} columns"


def check_reglm_equivalence(n_instances=20, seed=1):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        dg, cov, gamma, d = _random_instance(rng)
        alpha = float(rng.uniform(0.05, 5.0))
        c_dgt = cov @ dg.T
        m = dg @ c_dgt
        dual = reg_lm_step(np.zeros(dg.shape[1]), d, c_dgt, 0.5 * (m + m.T), gamma, alpha)
        lhs = dg.T @ (dg / gamma[:, None]) + alpha * np.linalg.inv(cov)
        primal = np.linalg.solve(lhs, dg.T @ (d / gamma))
        worst = max(worst, np.linalg.norm(dual - primal) / np.linalg.norm(primal))
    ok = worst <= 1e-8
    return ok, f"max relative dual/primal mismatch {worst:.2e}"


def check_stdlm_equivalence(n_instances=20, seed=2):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        dg, cov, gamma, d = _random_instance(rng)
        lam = float(rng.uniform(0.0, 3.0))
        u = rng.standard_normal(dg.shape[1])
        u_prior = rng.standard_normal(dg.shape[1])
        c_dgt = cov @ dg.T
        m = dg @ c_dgt
        dual = std_lm_step(u, u_prior, d, dg, c_dgt, 0.5 * (m + m.T), gamma, lam)
        cinv = np.linalg.inv(cov)
        lhs = dg.T @ (dg / gamma[:, None]) + (1 + lam) * cinv
        rhs = dg.T @ (d / gamma) - cinv @ (u - u_prior)
        primal = np.linalg.solve(lhs, rhs)
        worst = max(worst, np.linalg.norm(dual - primal) / max(np.linalg.norm(primal), 1e-30))
    ok = worst <= 1e-8
    return ok, f"max relative dual/primal mismatch {worst:.2e}"


def check_kappa_monotone(seed=3):
    rng = np.random.default_rng(seed)
    dg, cov, gamma, d = _random_instance(rng)
    m = dg @ cov @ dg.T
    m = 0.5 * (m + m.T)
    scale = np.linalg.norm(m, 2)
    alphas = np.logspace(-6, 6, 40) * scale
    vals = np.array([kappa_eval(a, m, gamma, d) for a in alphas])
    limit = float(np.sum(d**2 / gamma))
    mono = bool(np.all(np.diff(vals) >= -1e-12 * limit))
    tail = kappa_eval(1e12 * scale, m, gamma, d)
    tail_ok = abs(tail - limit) <= 1e-6 * limit
    ok = mono and tail_ok
    return ok, f"monotone={mono}, limit error {abs(tail - limit) / limit:.2e}"


def check_alpha_selection():
    cfg = RegLMConfig(rho=0.5, tau=2.5, alpha0=0.25, alpha_growth=2.0)
    alpha, trials = select_alpha(cfg, np.array([[1.0]]), np.array([1.0]), np.array([1.0]))
    ok = abs(alpha - 1.0) < 1e-15 and trials == 3
    return ok, f"scalar boundary case returned alpha={alpha}, trials={trials}"


ALL_CHECKS = (
    ("mass_balance", check_mass_balance, True),
    ("producer_rate_split", check_producer_split, True),
    ("adjoint_vs_fd", check_adjoint_vs_fd, True),
    ("reglm_update_equivalence", check_reglm_equivalence, False),
    ("stdlm_update_equivalence", check_stdlm_equivalence, False),
    ("kappa_monotone", check_kappa_monotone, False),
    ("alpha_selection", check_alpha_selection, False),
)


def run_checks(setup: CaseSetup):
    """Run every check; yields (name, ok, detail)."""
    results = []
    for name, fn, needs_setup in ALL_CHECKS:
        try:
            ok, detail = fn(setup) if needs_setup else fn()
        except ResinvError as exc:
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
    return results
