import json
import warnings

import numpy as np
import pytest

from degdiff import TimeGrid, make_model, parse, right_factor
from degdiff.estimators import (NonFiniteSampleError, RankDeficiencyWarning, check_logsob_path,
                                check_poincare_path, check_state_inequalities, cond_exp_regression,
                                factorization_sweep, m_semigroup, mc, q_semigroup, summarize,
                                to_json, verdict)
from degdiff.estimators import diagnostics as diag
from degdiff.estimators.core import chunk_size, entropy_terms, variance_terms

GRID = TimeGrid(1.0, 32)


# --- Monte Carlo core ------------------------------------------------------

def test_mc_constant_and_determinism():
    r = mc(lambda drv, s: np.full(len(s), 2.5), 100, seed=0)
    assert (r.mean, r.stderr, r.n) == (2.5, 0.0, 100)
    sampler = lambda drv, s: drv.normals(s, 9, 0, 1)[:, 0]  # noqa: E731
    a = mc(sampler, 5000, seed=3, chunk=64)
    b = mc(sampler, 5000, seed=3, chunk=512, workers=4)
    assert a == b


def test_mc_normal_mean():
    r = mc(lambda drv, s: drv.normals(s, 9, 0, 1)[:, 0], 10 ** 6, seed=1)
    assert abs(r.mean) < 4e-3


def test_mc_non_finite_handling():
    def one_bad(drv, s):
        out = np.zeros(len(s))
        out[s == 0] = np.nan
        return out
    r = mc(one_bad, 2000, seed=0)
    assert r.n == 1999 and r.n_nonfinite == 1
    with pytest.raises(NonFiniteSampleError):
        mc(lambda drv, s: np.where(s % 10 == 0, np.inf, 0.0), 2000, seed=0)


def test_chunk_size_ignores_workers():
    assert chunk_size(10 ** 4, 257, 7) == chunk_size(10 ** 4, 257, 7)
    assert chunk_size(10, 1000, 10) == 10


def test_verdicts():
    assert verdict(1.0, 2.0, 1.0, 0.1) == "holds"
    assert verdict(1.0, 1.05, 0.05, 0.1) == "holds-at-equality"
    assert verdict(0.0, 0.0, 0.0, 0.0) == "holds-at-equality"
    assert verdict(1.0, 0.0, -1.0, 0.1) == "violated"
    assert verdict(0.1, 0.0, -0.1, 0.1) == "violated-within-noise"


def test_variance_and_entropy_terms(rng):
    F = rng.normal(size=1000)
    assert variance_terms(F).mean() == pytest.approx(F.var(ddof=1))
    ent, _ = entropy_terms(F)
    g = F ** 2
    assert ent.mean() == pytest.approx(np.mean(g * np.log(g)) - g.mean() * np.log(g.mean()))
    assert ent.mean() >= 0
    ent0, _ = entropy_terms(np.zeros(10))
    assert np.all(np.isfinite(ent0))


def test_json_is_stable():
    out = to_json({"b": np.float64(1.5), "a": np.array([1, 2]), "c": summarize([1.0, 2.0, 3.0]),
                   "d": np.bool_(True), "e": float("nan")}, runtime_ms=12.7)
    data = json.loads(out)
    assert list(data) == ["b", "a", "c", "d", "e", "runtime_ms"]
    assert data["c"] == {"mean": 2.0, "stderr": summarize([1.0, 2.0, 3.0]).stderr, "n": 3}
    assert data["e"] == "nan" and data["runtime_ms"] == 12


# --- regression --------------------------------------------------------------

def test_regression_exact_recovery(rng):
    X = rng.normal(size=(2000, 2))
    y = 1 + X[:, 0] - 2 * X[:, 0] * X[:, 1] + 0.5 * X[:, 1] ** 3
    reg = cond_exp_regression(X, y, 3)
    Xt = rng.normal(size=(50, 2))
    yt = 1 + Xt[:, 0] - 2 * Xt[:, 0] * Xt[:, 1] + 0.5 * Xt[:, 1] ** 3
    assert np.abs(reg.predict(Xt) - yt).max() <= 1e-8


def test_regression_on_noise_is_null(rng):
    from degdiff.estimators.regression import chi2_quantile
    X = rng.normal(size=(5000, 2))
    reg = cond_exp_regression(X, rng.normal(size=5000), 2)
    stat, k = reg.wald(skip_intercept=True)
    assert stat <= chi2_quantile(0.999, k)


def test_regression_rank_deficiency(rng):
    x = rng.normal(size=500)
    X = np.stack([x, 2 * x], axis=1)
    with pytest.warns(RankDeficiencyWarning):
        reg = cond_exp_regression(X, x ** 2, 2)
    assert reg.regularized
    assert np.allclose(reg.predict(X), x ** 2, atol=1e-4)
    with pytest.raises(ValueError):
        cond_exp_regression(rng.normal(size=(20, 2)), rng.normal(size=20), 3)


# --- semigroups --------------------------------------------------------------

def test_q_semigroup_examples():
    H = make_model("heisenberg")
    r = q_semigroup(H, 1.0, parse("x1", 3), np.zeros(3), 4000, seed=2)
    assert abs(r.mean) <= 3 * r.stderr
    r = q_semigroup(H, 1.0, parse("x1^2", 3), np.zeros(3), 4000, seed=2)
    assert abs(r.mean - 1) <= 3 * r.stderr
    r = q_semigroup(H, 0.0, parse("x1 + x3", 3), np.array([1.0, 2.0, 3.0]), 10)
    assert r.mean == 4.0 and r.stderr == 0.0


def test_m_semigroup_at_zero_is_the_gradient():
    H = make_model("heisenberg")
    f = parse("x1*x3 + x2^2", 3)
    xi = np.array([0.5, -1.0, 2.0])
    r = m_semigroup(H, 0.0, f, xi, 8)
    assert np.allclose(r.mean, f.grad(xi))


# --- inequality checks (small sizes) -----------------------------------------

def test_constant_function_gives_zero_on_both_sides():
    H = make_model("heisenberg")
    f = parse("3", 3)
    rep = check_poincare_path(H, f, [1.0], GRID, 200)
    assert rep.lhs.mean == 0 and rep.rhs.mean == 0 and rep.verdict == "holds-at-equality"
    rep = check_state_inequalities(H, f, GRID, 200)
    assert rep.lhs.mean == 0 and rep.rhs.mean == 0


def test_poincare_path_is_shift_invariant():
    H = make_model("heisenberg")
    a = check_poincare_path(H, parse("x1*x6 - x2", 6), [0.5, 1.0], GRID, 500, seed=4)
    b = check_poincare_path(H, parse("x1*x6 - x2 + 10", 6), [0.5, 1.0], GRID, 500, seed=4)
    assert a.lhs.mean == pytest.approx(b.lhs.mean, rel=1e-9)
    assert a.rhs == b.rhs
    assert a.passed


def test_checks_refuse_non_smooth_and_bad_arity():
    H = make_model("heisenberg")
    with pytest.raises(ValueError, match="abs"):
        check_poincare_path(H, parse("abs(x1)", 3), [1.0], GRID, 100)
    with pytest.raises(ValueError, match="arity"):
        check_poincare_path(H, parse("x1", 3), [0.5, 1.0], GRID, 100)


def test_logsob_on_dyson_lists_candidates():
    D = make_model("dyson", d=3, gamma=1.0)
    rep = check_logsob_path(D, parse("x1", 3), [1.0], TimeGrid(1.0, 64), 300, seed=1)
    cands = rep.details["candidates"]
    assert set(cands) == {"generic_2", "stated_2_gamma_sqrtT", "lipschitz_8_T_gamma2",
                          "empirical_smallest"}
    assert rep.verdict in ("holds", "holds-at-equality")


def test_state_lsi_gradient_bound_for_classical():
    C = make_model("classical", n=2, d=2, A=[[-1.0, 0.0], [0.5, -1.0]], Sigma=np.eye(2))
    rep = check_state_inequalities(C, parse("exp(x1/2)", 2), GRID, 1000, kind="state-lsi")
    gb = rep.details["gradient_bound"]
    assert gb["chain_rule_constant"] >= gb["stated_constant"] or gb["asserted"] == "stated"
    assert gb["asserted_verdict"] in ("holds", "holds-at-equality")


def test_factorization_sweep():
    RL = make_model("rankline")
    single = factorization_sweep([RL], parse("x1", 1), GRID, 300, seed=2)
    plain = check_state_inequalities(RL, parse("x1", 1), GRID, 300, seed=2)
    assert single.lhs == plain.lhs and single.rhs == plain.rhs
    with pytest.raises(ValueError, match="reproduce"):
        factorization_sweep([RL, right_factor(RL, [[2.0], [0.0]])], parse("x1", 1), GRID, 100)


# --- diagnostics ---------------------------------------------------------------

def test_levels_validation():
    assert diag.check_levels([128, 64]) == [64, 128]
    with pytest.raises(ValueError):
        diag.check_levels([100])


def test_jk_and_calcul1_sweeps_are_small_and_refuse_dyson():
    C = make_model("circle")
    r = diag.jk_inverse_sweep(C, [32, 64], 50)
    assert [row["steps"] for row in r["table"]] == [32, 64]
    r = diag.representation_sweep(C, [64], 50)
    assert len(r["table"]) == 1 and r["table"][0]["relative_l2"] <= 0.05
    with pytest.raises(ValueError):
        diag.jk_inverse_sweep(make_model("dyson"), [32], 10)


@pytest.mark.parametrize("name", ["heisenberg", "circle", "rankline"])
def test_identity_checks_pass(name):
    m = make_model(name)
    g = TimeGrid(1.0, 32)
    assert diag.cond_exp_check(m, g, 2000, seed=1)["passed"]
    assert diag.wick_check(m, g, 2000, seed=1)["passed"]
    assert diag.ibp_check(m, g, 2000, seed=1)["passed"]
    assert diag.chaos_check(m, g, 2000, seed=1, n_paths_order2=100)["passed"]


def test_lipschitz_shift_small():
    D = make_model("dyson", d=3, gamma=1.0)
    r = diag.lipschitz_shift_check(D, TimeGrid(1.0, 128), 50, seed=3)
    assert r["violations"] == 0 and r["max_ratio"] <= 1


def test_dyson_suite_small():
    D = make_model("dyson", d=3, gamma=1.0)
    r = diag.dyson_suite(D, TimeGrid(1.0, 128), 300, seed=0, n_pairs=20)
    assert r["ordering"]["violations"] == 0
    assert r["passed"]


def test_left_translation_shortcut_matches_direct_simulation():
    from degdiff import BrownianDriver
    from degdiff.estimators.semigroups import q_values, terminal_states
    H = make_model("heisenberg")
    f = parse("x1*x3 + x2^2", 3)
    pts = np.random.default_rng(0).normal(size=(4, 3))
    fast = q_values(H, 0.5, f, pts, 500, BrownianDriver(0), 1 / 256)
    direct = f(terminal_states(H, 0.5, pts, 500, BrownianDriver(0), 1 / 256))
    assert np.abs(fast - direct).max() <= 1e-12
