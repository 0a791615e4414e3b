"""Checks specific to Brownian motion on the Heisenberg group.

x_t = (b_t, w_t, z_t / 2) is the left process started at the origin and
y_t = A x_t with A = diag(-1, -1, 1) the right one.  Both have the same law.
"""

import warnings

import numpy as np

from ..expr import heisenberg_field_coefficients
from ..models import heisenberg_isometry, make_heisenberg
from ..rng import BrownianDriver
from ..sde import simulate
from .checks import require_smooth, run_paths
from .core import entropy_report, summarize, variance_report
from .regression import RankDeficiencyWarning, cond_exp_regression
from .semigroups import inner_driver, q_values

SUITE_PARTS = ("poincare", "lsi", "right-poincare", "carre-du-champ", "key1", "martingale-drift")


def carre_du_champ(f, points, right=False):
    """|Xf|^2 + |Yf|^2 (or the right-invariant |Xhat f|^2 + |Yhat f|^2) at points (..., 3)."""
    names = ("Xhat", "Yhat") if right else ("X", "Y")
    out = 0.0
    for name in names:
        out = out + f.directional(points, heisenberg_field_coefficients(points, name))[1] ** 2
    return out


def _terminal(grid, n_paths, seed, workers):
    model = make_heisenberg()
    s = run_paths(model, grid, seed, n_paths, lambda b: {"x": b.x[:, -1]}, np.zeros(3), workers,
                  width=3 + 4, flows=False)
    return s["x"]


def left_right_residual(f, grid, t, seed=0, n_outer=200, n_inner=512, n_fit=200000, degree=3, workers=1):
    """E[f(y_T) | y_t] by regression against the nested-MC Q_{T-t} f(y_t).

    Each squared difference is corrected for the inner-sample variance of
    the nested estimate and for the regression's prediction variance (HC0),
    so the corrected residual has mean zero when the two agree.
    """
    model = make_heisenberg()
    k = grid.index(t)

    def collect(b):
        return {"yt": heisenberg_isometry(b.x[:, k]), "yT": heisenberg_isometry(b.x[:, -1])}

    fit = run_paths(model, grid, BrownianDriver(seed).child(0, 10, 0).seed, n_fit, collect,
                    np.zeros(3), workers, width=3 + 4, flows=False)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficiencyWarning)
        reg = cond_exp_regression(fit["yt"], f(fit["yT"]), degree)

    outer = BrownianDriver(seed).child(0, 11, 0)
    ob = simulate(model, grid, outer, np.zeros(3), streams=np.arange(n_outer), flows=False)
    yt = heisenberg_isometry(ob.x[:, k])
    R_hat = reg.predict(yt)
    pred_var = reg.prediction_variance(yt)
    Q_hat = np.empty(n_outer)
    inner_var = np.empty(n_outer)
    for o in range(n_outer):
        vals = q_values(model, grid.T - t, f, yt[o][None], n_inner, inner_driver(outer, o), grid.dt)[0]
        Q_hat[o] = vals.mean()
        inner_var[o] = vals.var(ddof=1) / n_inner
    raw = (R_hat - Q_hat) ** 2
    corrected = summarize(raw - inner_var - pred_var)
    return {"residual": corrected, "raw_mean_square": summarize(raw),
            "inner_variance": float(inner_var.mean()), "prediction_variance": float(pred_var.mean()),
            "regression": reg.diagnostics(),
            "passed": bool(abs(corrected.mean) <= 3 * corrected.stderr + 1e-12)}


def martingale_drift(f, grid, times, seed=0, n_outer=100, n_inner=1024):
    """Increments of t -> Q_{T-t} f(y_t) (nested MC) must have mean zero."""
    model = make_heisenberg()
    nodes = [grid.index(t) for t in times]
    outer = BrownianDriver(seed).child(0, 12, 0)
    ob = simulate(model, grid, outer, np.zeros(3), streams=np.arange(n_outer), flows=False)
    M = np.empty((n_outer, len(nodes)))
    for o in range(n_outer):
        drv = inner_driver(outer, o)
        for j, k in enumerate(nodes):
            y = heisenberg_isometry(ob.x[o, k])
            if k == grid.steps:
                M[o, j] = f(y)
            else:
                M[o, j] = q_values(model, grid.T - k * grid.dt, f, y[None], n_inner, drv, grid.dt)[0].mean()
    rows = []
    ok = True
    for j in range(len(nodes) - 1):
        inc = summarize(M[:, j + 1] - M[:, j])
        within = abs(inc.mean) <= 3 * inc.stderr + 1e-12
        ok = ok and within
        rows.append({"s": times[j], "t": times[j + 1], "increment": inc, "within_3_stderr": bool(within)})
    return {"rows": rows, "passed": bool(ok)}


def heisenberg_suite(f, grid, n_paths, seed=0, parts=SUITE_PARTS, t=0.5, n_outer=200, n_inner=512,
                     n_fit=200000, degree=3, drift_times=(0.0, 0.25, 0.5, 0.75, 1.0),
                     drift_outer=100, drift_inner=1024, workers=1, clip=1e-8):
    """Poincare and log-Sobolev inequalities at time T plus the left/right semigroup checks."""
    require_smooth(f)
    if f.arity != 3:
        raise ValueError("the Heisenberg suite needs a function of arity 3")
    unknown = set(parts) - set(SUITE_PARTS)
    if unknown:
        raise ValueError(f"unknown suite parts {sorted(unknown)}")
    params = {"f": f.text, "T": grid.T, "steps": grid.steps, "paths": n_paths, "parts": list(parts)}
    out = {"name": "heisenberg-suite", "params": params, "seed": seed, "reports": {}}
    passed = True
    if {"poincare", "lsi", "right-poincare", "carre-du-champ"} & set(parts):
        x1 = _terminal(grid, n_paths, seed, workers)
        y1 = heisenberg_isometry(x1)
        gam = carre_du_champ(f, x1)
        if "poincare" in parts:
            out["reports"]["poincare"] = variance_report("heisenberg-poincare", f(x1), gam, seed=seed)
        if "lsi" in parts:
            out["reports"]["lsi"] = entropy_report("heisenberg-lsi", f(x1), 2.0 * gam, clip=clip,
                                                   seed=seed)
        gam_hat = carre_du_champ(f, y1, right=True)
        if "right-poincare" in parts:
            out["reports"]["right-poincare"] = variance_report("heisenberg-right-poincare", f(y1),
                                                               gam_hat, seed=seed)
        if "carre-du-champ" in parts:
            diff = summarize(gam_hat - gam)
            ok = abs(diff.mean) <= 3 * diff.stderr + 1e-12
            out["carre-du-champ"] = {"right": summarize(gam_hat), "left": summarize(gam),
                                     "difference": diff, "passed": bool(ok)}
            passed = passed and ok
        passed = passed and all(r.passed for r in out["reports"].values())
    if "key1" in parts:
        out["key1"] = left_right_residual(f, grid, t, seed, n_outer, n_inner, n_fit, degree, workers)
        passed = passed and out["key1"]["passed"]
    if "martingale-drift" in parts:
        out["martingale-drift"] = martingale_drift(f, grid, drift_times, seed, drift_outer, drift_inner)
        passed = passed and out["martingale-drift"]["passed"]
    out["passed"] = bool(passed)
    return out


def levy_area(dB):
    """Euler Levy area sum_i (b_i dw_i - w_i db_i) for increments (S, N, 2)."""
    W = np.cumsum(dB, axis=1) - dB
    return np.sum(W[..., 0] * dB[..., 1] - W[..., 1] * dB[..., 0], axis=1)


__all__ = ["heisenberg_suite", "left_right_residual", "martingale_drift", "carre_du_champ", "levy_area"]
