"""The experiments behind the ``rwre-lab`` subcommands.

Each ``run_<name>`` takes an :class:`ExperimentConfig` and returns an
:class:`ExperimentRun` holding CSV rows, a JSON report, extra tables and
named pass/fail checks.
"""
from __future__ import annotations

import math

import numpy as np

from .config import ExperimentConfig, ExperimentRun
from .env import EnvDistribution, EnvironmentField, PerturbedView, local_drift
from .parallel import pmap
from .rng import derive_key, generator
from .stats import Estimate, InsufficientData, lag_correlation, mean_ci
from .walk import LevelClock, walker_key


def _ell(cfg: ExperimentConfig, d: int) -> np.ndarray:
    ell = cfg.params.get("ell")
    if ell is None:
        ell = np.eye(d)[0]
    return np.asarray(ell, dtype=np.float64)


def _within(values, factor: float = 2.0) -> tuple[float, bool]:
    v = np.asarray(values, dtype=np.float64)
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        return math.inf, False
    r = float(v.max() / v.min())
    return r, r < factor


# ---------------------------------------------------------------------------


def run_girsanov(cfg: ExperimentConfig) -> ExperimentRun:
    from .measure import reweighted_block_estimator, unit_mean_oracle

    run = ExperimentRun(cfg)
    p = cfg.params
    n_max = int(p.get("n_max", 6))
    count = int(p.get("instances", 50))
    worst = 0.0
    detail = []
    for i in range(count):
        dist, lam, fld = random_instance(cfg.seed, i)
        n = 1 + i % n_max
        err = abs(unit_mean_oracle(fld, lam, n) - 1.0)
        worst = max(worst, err)
        detail.append({"instance": i, "lambda": lam, "n": n, "error": err})
    run.add_exact("unit_mean_max_error", worst, count)
    run.report["unit_mean"] = detail
    run.checks["unit_mean"] = worst < 1e-12
    if cfg.dist is not None and cfg.lambdas:
        dist = cfg.distribution()
        fld = EnvironmentField(dist, int(derive_key(cfg.seed, "env", "girsanov")))
        f = dist.omega[:, 0]
        for lam in cfg.lambdas:
            if lam == 0:
                continue
            try:
                res = reweighted_block_estimator(f, fld, lam, float(p.get("t", 1.0)), cfg.replicas, cfg.seed)
            except InsufficientData as err:
                run.report[f"reweighted_{lam}"] = str(err)
                continue
            run.add("direct", res.direct, lam)
            run.add("reweighted", res.reweighted, lam)
            run.report[f"ess_{lam}"] = res.ess
            run.checks[f"reweighted_{lam}"] = res.agree()
    return run


def random_instance(seed: int, i: int, d: int = 2, n_atoms: int = 3):
    """A random finite-support distribution, a valid ``lambda`` and a field."""
    rng = generator(seed, "data", "girsanov", i)
    kappa = float(rng.uniform(0.05, 0.2))
    om = kappa + rng.dirichlet(np.ones(2 * d), size=n_atoms) * (1 - 2 * d * kappa)
    xi = rng.uniform(-1, 1, size=(n_atoms, 2 * d))
    xi -= xi.mean(axis=1, keepdims=True)
    xi /= max(1.0, np.abs(xi).max())
    dist = EnvDistribution.finite_support(om, xi, rng.dirichlet(np.ones(n_atoms)), kappa)
    lam = float(rng.uniform(0, kappa / 2))
    return dist, lam, EnvironmentField(dist, int(rng.integers(2**62)))


# ---------------------------------------------------------------------------


def run_kalikow(cfg: ExperimentConfig) -> ExperimentRun:
    from .kalikow import build_chain, certify_condition_K, default_family, estimate_rho
    from .slab import box

    run = ExperimentRun(cfg)
    dist = cfg.distribution()
    p = cfg.params
    lo, hi = p.get("box", [[-1, -1], [1, 1]])
    geom = box(lo, hi)
    start = np.zeros(dist.d, dtype=np.int64)
    ell = _ell(cfg, dist.d)
    for lam in cfg.lambdas:
        chain = build_chain(dist, geom, start, lam)
        tv = 0.5 * float(np.abs(chain.exit_law() - chain.annealed_exit).sum())
        run.add_exact("exit_identity_tv", tv, 1, lam)
        run.checks[f"exit_identity_{lam}"] = tv < 1e-9
    rep = certify_condition_K(dist, ell, 0.0, seed=cfg.seed)
    run.report["condition_K"] = rep.as_dict()
    run.add_exact("condition_K_min_ratio", rep.minimum)
    if bool(p.get("rho", True)):
        for lam in cfg.lambdas:
            if lam > 0:
                r = estimate_rho(dist, ell, lam, default_family(dist.d))
                run.add_exact("rho", r.rho, 1, lam)
                run.report[f"rho_{lam}"] = r.as_dict()
    return run


# ---------------------------------------------------------------------------


def run_harnack(cfg: ExperimentConfig) -> ExperimentRun:
    from .slab import harnack_batch

    run = ExperimentRun(cfg)
    p = cfg.params
    R = int(p.get("R", 8))
    sigma = float(p.get("sigma", 0.5))
    lamR = float(p.get("lam_times_R", 0.3))
    count = int(p.get("count", 200))
    kw = dict(d=int(p.get("d", 2)), kappa=float(p.get("kappa", 0.1)), n_atoms=int(p.get("n_atoms", 4)))
    a = harnack_batch(R, sigma, lamR, count, cfg.seed, **kw)
    b = harnack_batch(2 * R, sigma, lamR, count, cfg.seed, **kw)
    change = abs(b.max_ratio - a.max_ratio) / a.max_ratio
    run.add_exact(f"max_ratio_R{R}", a.max_ratio, count, a.lam)
    run.add_exact(f"max_ratio_R{2 * R}", b.max_ratio, count, b.lam)
    run.add_exact("relative_change", change, count)
    run.report.update(R=R, sigma=sigma, lam_times_R=lamR, count=count,
                      ratios_R=a.ratios, ratios_2R=b.ratios)
    run.tables["harnack.csv"] = (("instance", "ratio_R", "ratio_2R"),
                                 [(i, float(x), float(y)) for i, (x, y) in enumerate(zip(a.ratios, b.ratios))])
    run.checks["stability"] = change < 0.2
    return run


# ---------------------------------------------------------------------------


def run_einstein(cfg: ExperimentConfig) -> ExperimentRun:
    from .renewal import einstein

    run = ExperimentRun(cfg)
    dist = cfg.distribution()
    p = cfg.params
    rep = einstein(dist, cfg.lambdas, cfg.replicas, cfg.horizon, cfg.seed, _ell(cfg, dist.d),
                   d_replicas=p.get("d_replicas"), d_horizon=p.get("d_horizon"))
    for row in rep.rows:
        run.add("v_over_lambda", row.v_over_lam, row.lam)
        run.add("Q_lambda_d_omega", row.Q_domega, row.lam)
        run.add("lambda_Q_lambda_d_xi", row.lam_Q_dxi, row.lam)
        run.add("identity_gap", row.identity_gap, row.lam)
        run.checks[f"identity_{row.lam}"] = row.identity_gap.contains(0.0)
    run.add("D11", rep.D11)
    small = min(cfg.lambdas)
    v = rep.row(small).v_over_lam
    if rep.exact_slope is not None:
        run.add_exact("exact_slope", rep.exact_slope)
        for row in rep.rows:
            run.checks[f"exact_slope_{row.lam}"] = row.v_over_lam.contains(rep.exact_slope)
    else:
        tol = float(p.get("tolerance", 0.1))
        rel = abs(v.value - rep.D11.value) / rep.D11.value
        run.add_exact("relative_gap_D11", rel, v.n, small)
        run.checks["einstein"] = rel < tol
    return run


# ---------------------------------------------------------------------------


def run_regen(cfg: ExperimentConfig) -> ExperimentRun:
    from .kalikow import default_family, estimate_rho
    from .regeneration import endpoint_equivalence, moment_suite, rerun_extraction, run_regeneration

    run = ExperimentRun(cfg)
    dist = cfg.distribution()
    p = cfg.params
    ell = _ell(cfg, dist.d)
    stats, blocks = {}, []
    for lam in cfg.lambdas:
        rho = p.get("rho")
        if rho is None:
            rho = estimate_rho(dist, ell, lam, default_family(dist.d)).rho
        rr = run_regeneration(dist, lam, cfg.replicas, cfg.n_levels, cfg.seed, cfg.W, rho=rho,
                              L=cfg.lateral_period, candidates=tuple(cfg.betas))
        st = rr.stats
        stats[lam] = st
        run.add_exact("beta", st.beta, 1, lam)
        run.add_exact("rho", rho, 1, lam)
        run.add_exact("slab_leak", rr.leak, 1, lam)
        run.add_exact("construction_violations", st.violations, cfg.replicas, lam)
        pinf = Estimate(st.p_inf / max(st.p_decided, 1),
                        math.sqrt(max(st.p_inf * (st.p_decided - st.p_inf), 0)) / max(st.p_decided, 1) ** 1.5,
                        st.p_decided)
        run.add("p_lambda", pinf, lam)
        for name, series in (("dtau", st.dtau), ("dx1", st.dx)):
            for lag in (1, 2, 3):
                est = st.lag_corr(series, lag)
                run.add(f"lag{lag}_corr_{name}", est, lam)
                if lag >= 2:
                    run.checks[f"one_dependence_{name}_lag{lag}_{lam}"] = est.contains(0.0)
        run.add("lam2_mean_dtau", mean_ci(lam ** 2 * st.pooled("dtau")), lam)
        run.add("lam_mean_dx1", mean_ci(lam * st.pooled("dx")), lam)
        run.checks[f"block_count_{lam}"] = st.n_blocks >= int(p.get("min_blocks", 30))
        # W sensitivity on the same paths
        st2 = rerun_extraction(rr, 2 * cfg.W, rho)
        m1, m2 = mean_ci(st.pooled("dtau")), mean_ci(st2.pooled("dtau"))
        shift = abs(m1.value - m2.value) / m1.stderr
        run.add_exact("W_doubling_shift_sigma", shift, st2.n_blocks, lam)
        run.checks[f"W_sensitivity_{lam}"] = shift < 1.0
        for r, rec in enumerate(rr.records):
            pos = rec.positions
            for k in range(rec.tau.size - 1):
                dx = pos[rec.tau[k + 1]] - pos[rec.tau[k]]
                blocks.append((lam, r, k + 1, int(rec.tau[k + 1] - rec.tau[k]), *map(int, dx), 0))
            if rec.tau.size:
                dx = pos[-1] - pos[rec.tau[-1]]
                blocks.append((lam, r, rec.tau.size, int(pos.shape[0] - 1 - rec.tau[-1]), *map(int, dx), 1))
        n_eq = int(p.get("equivalence_samples", 0))
        if n_eq:
            eq = endpoint_equivalence(dist, lam, cfg.seed, n_eq, int(p.get("equivalence_levels", 3)))
            run.add_exact("equivalence_pvalue", eq.test.pvalue, n_eq, lam)
            run.checks[f"equivalence_{lam}"] = eq.test.passed
    header = ("lambda", "replica", "k", "dtau") + tuple(f"dx{i + 1}" for i in range(dist.d)) + ("censored",)
    run.tables["blocks.csv"] = (header, blocks)
    if len(stats) >= 2:
        m = moment_suite(stats)
        for which in ("scaled_tau", "scaled_dx"):
            ratio = m.scaling_ratio(which)
            run.add_exact(f"{which}_max_over_min", ratio, len(stats))
            run.checks[f"scaling_{which}"] = ratio < 2.0
        if m.tail_slope is not None:
            run.add("tail_slope", m.tail_slope, min(stats))
            run.checks["tail_slope"] = m.tail_slope.hi < 0
        for lam, est in m.exp_moment.items():
            run.add("exp_moment_first_height", est, lam)
    run.report["K_distribution"] = {str(lam): np.bincount(st.K.astype(np.int64)).tolist() for lam, st in stats.items()}
    return run


# ---------------------------------------------------------------------------


def run_ballistic(cfg: ExperimentConfig) -> ExperimentRun:
    from .renewal import (ballistic_check, detect_renewals, lambda_operator, renewal_blocks,
                          second_moment_probe, speed_derivative)
    from .walk import simulate

    run = ExperimentRun(cfg)
    dist = cfg.distribution()
    p = cfg.params
    ell = _ell(cfg, dist.d)
    fs = {
        "one": np.ones(dist.n_atoms),
        "d_omega": local_drift(dist.omega) @ ell,
        "d_xi": local_drift(dist.xi) @ ell,
        "omega_e1": dist.omega[:, 0],
    }
    blocks = renewal_blocks(dist, cfg.replicas, cfg.horizon, cfg.seed, ell)
    v = ballistic_check(blocks)
    run.add("speed_base", v, 0.0)
    run.add_exact("renewal_density", float(blocks.density.mean()), cfg.replicas, 0.0)
    run.add_exact("unconfirmed_renewals", blocks.unconfirmed, cfg.replicas, 0.0)
    lams = {}
    for n, f in fs.items():
        est = lambda_operator(blocks, f, n_f=1, seed=cfg.seed)
        lams[n] = est
        run.add(f"Lambda_{n}", est.estimate, 0.0)
        run.report[f"Lambda_{n}"] = {"EUV": est.EUV, "cross": est.cross, "mean_dT": est.mean_dT, "Q": est.Q}
    run.checks["Lambda_constant_zero"] = lams["one"].contains(0.0)
    # linearity on common blocks
    lc = lambda_operator(blocks, fs["d_omega"] + 2 * fs["omega_e1"], n_f=1, seed=cfg.seed)
    target = lams["d_omega"].value + 2 * lams["omega_e1"].value
    se = math.hypot(lc.stderr, math.hypot(lams["d_omega"].stderr, 2 * lams["omega_e1"].stderr))
    run.add_exact("Lambda_linearity_gap", lc.value - target, lc.n, 0.0)
    run.checks["Lambda_linearity"] = abs(lc.value - target) <= 3 * se + 1e-12
    # iid inter-renewal pairs
    dx = np.concatenate(blocks.dX)
    for lag in (1, 2):
        est = lag_correlation(dx, lag)
        run.add(f"renewal_lag{lag}_corr_dx", est, 0.0)
    rows = []
    for r in range(min(cfg.replicas, int(p.get("renewal_table_replicas", 3)))):
        fld = EnvironmentField(dist, int(derive_key(cfg.seed, "env", "renewal", r)))
        path = simulate(PerturbedView(fld, 0.0), np.zeros(dist.d, np.int64), cfg.horizon,
                        walker_key(cfg.seed, "renewal", r))
        rt = detect_renewals(path, ell, 50.0)
        for k, t in enumerate(rt.times):
            rows.append((r, k + 1, int(t), *map(int, path.positions[t])))
    run.tables["renewals.csv"] = (("replica", "k", "T") + tuple(f"x{i + 1}" for i in range(dist.d)), rows)
    if len(cfg.lambdas) >= 3:
        sd = speed_derivative(dist, cfg.lambdas, cfg.replicas, int(p.get("speed_horizon", cfg.horizon)),
                              cfg.seed, ell, renewal_horizon=cfg.horizon)
        for lam, est in sd.slopes.items():
            run.add("fd_slope", est, lam)
        run.add("fd_slope_extrapolated", sd.intercept, 0.0)
        run.add("Q_d_xi", sd.Q_dxi, 0.0)
        run.add("predicted_slope", sd.predicted, 0.0)
        run.checks["speed_derivative"] = sd.agrees("intercept")
        if sd.Lambda_domega is not None:
            run.add("Lambda_d_omega_speed_blocks", sd.Lambda_domega.estimate, 0.0)
            if len(np.unique(dist.omega, axis=0)) == 1:
                # deterministic base: the first-order term reduces to E[d(xi)]
                run.checks["Lambda_d_omega_zero"] = sd.Lambda_domega.contains(0.0)
    if p.get("second_moment_n"):
        sm = second_moment_probe(dist, 0.0, fs["omega_e1"], p["second_moment_n"], cfg.replicas, cfg.seed)
        for n, est in sm.scaled.items():
            run.add(f"second_moment_n{n}", est, 0.0)
        a, b = min(sm.n_grid), max(sm.n_grid)
        if sm.scaled[a].value > 0:
            r = sm.ratio(a, b)
            run.add_exact("second_moment_ratio", r, cfg.replicas)
            run.checks["second_moment_flat"] = 0.5 <= r <= 2.0
    return run


# ---------------------------------------------------------------------------


def run_couple(cfg: ExperimentConfig) -> ExperimentRun:
    from .coupling import (envelope, exit_time_cell, gambler_ruin, run_coupling,
                           z_hitting_probability_mc, z_probs)

    run = ExperimentRun(cfg)
    dist = cfg.distribution()
    p = cfg.params
    n_grid = list(p.get("n_grid", [2, 4]))
    c_reps = int(p.get("coupling_replicas", cfg.replicas))
    c_steps = int(p.get("coupling_steps", cfg.horizon))
    dom_rows, exit_rows = [], []
    total_viol = 0
    cells = []
    for lam in cfg.lambdas:
        clock = LevelClock(lam)

        def one(r, lam=lam, clock=clock):
            fld = EnvironmentField(dist, int(derive_key(cfg.seed, "env", "couple", r)))
            return run_coupling(PerturbedView(fld, lam), clock, c_steps, cfg.seed, r)

        reps = pmap(one, range(c_reps))
        for r, rep in enumerate(reps):
            total_viol += rep.violations
            dom_rows.append((lam, r, rep.steps, rep.violations, rep.first_violation, rep.e1_moves,
                             rep.z_up, rep.z_down, rep.pairs_checked))
        zu = sum(x.z_up for x in reps)
        zd = sum(x.z_down for x in reps)
        up, _ = z_probs(lam, dist.kappa)
        run.add("z_up_fraction", Estimate(zu / max(zu + zd, 1), math.sqrt(up * (1 - up) / max(zu + zd, 1)),
                                           zu + zd), lam)
        run.add_exact("z_up_probability", up, 1, lam)
        view = PerturbedView(EnvironmentField(dist, int(derive_key(cfg.seed, "env", "exit-base"))), lam)
        for n in n_grid:
            cell = exit_time_cell(view, n, int(p.get("exit_replicas", cfg.replicas)), cfg.seed)
            cells.append(cell)
            exit_rows.append((lam, n, cell.gap, cell.mean_T, cell.se_T, cell.scaled_T, cell.exact_S,
                              cell.scaled_S, cell.scaled_S_away, cell.p_top, cell.p_top / lam,
                              cell.p_top_away / lam, cell.exp_moment, cell.censored))
            run.add(f"scaled_T_tilde_n{n}", Estimate(cell.scaled_T, lam ** 2 * cell.se_T / n,
                                                     int(p.get("exit_replicas", cfg.replicas)), cell.censored), lam)
            run.add_exact(f"scaled_S_n{n}", cell.scaled_S, 1, lam)
            run.add_exact(f"scaled_S_away_n{n}", cell.scaled_S_away, 1, lam)
            run.add_exact(f"p_top_over_lambda_n{n}", cell.p_top / lam, 1, lam)
            run.add_exact(f"exp_moment_n{n}", cell.exp_moment, 1, lam)
        # Z-chain one-step ruin against the closed form
        zr = int(p.get("z_replicas", 20000))
        ph, se = z_hitting_probability_mc(lam, dist.kappa, 2, zr, cfg.seed)
        run.add("z_hit_2_before_0", Estimate(ph, se, zr), lam)
        run.add_exact("z_hit_2_before_0_exact", 1 - gambler_ruin(up / (1 - up), 1, 1), 1, lam)
        rho = p.get("rho")
        if rho is not None:
            lo, hi = envelope(lam, dist.kappa, float(rho), clock.gap, 1, 1)
            run.add_exact("envelope_low", lo, 1, lam)
            run.add_exact("envelope_high", hi, 1, lam)
    run.add_exact("coupling_violations", total_viol, c_reps * len(cfg.lambdas))
    run.add_exact("coupling_steps", c_steps * c_reps * len(cfg.lambdas), c_reps * len(cfg.lambdas))
    run.checks["coupling_invariants"] = total_viol == 0
    rT, okT = _within([c.scaled_T for c in cells])
    rS, okS = _within([c.scaled_S for c in cells])
    rA, _ = _within([c.scaled_S_away for c in cells])
    run.add_exact("scaled_T_max_over_min", rT, len(cells))
    run.add_exact("scaled_S_max_over_min", rS, len(cells))
    run.add_exact("scaled_S_away_max_over_min", rA, len(cells))
    run.checks["exit_T_scaling"] = okT
    run.checks["exit_S_scaling"] = okS
    run.tables["domination.csv"] = (("lambda", "replica", "steps", "violations", "first_violation",
                                     "e1_moves", "z_up", "z_down", "levels_checked"), dom_rows)
    run.tables["exit_times.csv"] = (("lambda", "n", "gap", "mean_T", "se_T", "scaled_T", "exact_S", "scaled_S",
                                     "scaled_S_away", "p_top", "p_top_over_lambda", "p_top_away_over_lambda",
                                     "exp_moment", "censored"), exit_rows)
    return run


RUNNERS = {
    "einstein": run_einstein,
    "regen": run_regen,
    "kalikow": run_kalikow,
    "harnack": run_harnack,
    "ballistic": run_ballistic,
    "couple": run_couple,
    "girsanov": run_girsanov,
}


def run(cfg: ExperimentConfig) -> ExperimentRun:
    return RUNNERS[cfg.experiment](cfg)
