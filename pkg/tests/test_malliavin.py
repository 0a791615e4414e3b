import numpy as np
import pytest

from degdiff import CameronMartinVector, TimeGrid, make_model, parse, simulate
from degdiff.malliavin import (chaos_integrals, cond_ito_integral_deterministic, conditional_wick,
                               dhat, dirichlet_energy, div_adapted, flow_energy, ibp_samples,
                               terminal_integrand)


@pytest.fixture(scope="module")
def heis():
    g = TimeGrid(1.0, 32)
    return simulate(make_model("heisenberg"), g, 3, np.zeros(3), streams=np.arange(50),
                    accumulate=("gram",))


@pytest.fixture(scope="module")
def rank():
    g = TimeGrid(1.0, 16)
    return simulate(make_model("rankline"), g, 3, np.zeros(1), streams=np.arange(100))


def test_dhat_on_the_diagonal(heis):
    k = 10
    s = heis.model.sigma(heis.x[:, k])
    assert np.allclose(dhat(heis, k, k), s, atol=1e-12)
    with pytest.raises(ValueError):
        dhat(heis, 5, 4)


def test_trivial_directions(heis, rank):
    g = heis.grid
    assert np.all(div_adapted(heis, np.zeros((g.steps, 2))) == 0)
    assert np.all(conditional_wick(heis, CameronMartinVector.zero(g, 2)) == 1)
    c = chaos_integrals(heis)
    assert np.all(c["I1"] == 0) and np.all(c["I2"] == 0)
    u = cond_ito_integral_deterministic(heis, np.zeros((g.steps, 2)))
    assert np.all(u["lhs_sample"] == 0) and np.all(u["rhs_sample"] == 0)
    hidden = np.tile([0.0, 2.5], (rank.grid.steps, 1))
    assert np.allclose(conditional_wick(rank, CameronMartinVector(hidden)), 1.0)


def test_rankline_first_chaos(rank):
    f1 = np.tile([1.0, 0.0], (rank.grid.steps, 1))
    I1 = chaos_integrals(rank, f1)["I1"]
    assert np.allclose(I1, rank.x[:, -1, 0] - rank.x[:, 0, 0])


def test_second_chaos_shape_check(rank):
    with pytest.raises(ValueError):
        chaos_integrals(rank, f2=np.zeros((3, 3, 2, 2)))


def test_adapted_divergence_uses_projection(rank):
    eta = np.tile([1.0, 1.0], (rank.grid.steps, 1))
    assert np.allclose(div_adapted(rank, eta), rank.dB[..., 0].sum(axis=1))


def test_energy_ignores_constants(heis):
    N = heis.grid.steps
    f = parse("x1*x3 + x2^2", 3)
    g = parse("x1*x3 + x2^2 + 7", 3)
    xT = heis.x[:, -1]
    e_f = dirichlet_energy(heis, f.grad(xT)[:, None], [N])
    e_g = dirichlet_energy(heis, g.grad(xT)[:, None], [N])
    assert np.all(e_f >= 0)
    assert np.array_equal(e_f, e_g)


def test_terminal_integrand_energy(heis):
    N = heis.grid.steps
    f = parse("x1*x3 + x2^2", 3)
    xT = heis.x[:, -1]
    u = terminal_integrand(heis, f.grad(xT))
    direct = np.sum(u * u, axis=(1, 2)) * heis.grid.dt
    assert np.allclose(direct, dirichlet_energy(heis, f.grad(xT)[:, None], [N]), rtol=1e-10)


def test_flow_energy_checks_split(heis):
    g = TimeGrid(1.0, 32)
    b = simulate(make_model("circle"), g, 1, np.zeros(1), streams=[0, 1], accumulate=("flowgram",),
                 gram_times=[0.5, 1.0])
    with pytest.raises(ValueError):
        flow_energy(b, np.zeros((2, 1, 1)), [32])


def test_first_chaos_inversion():
    g = TimeGrid(1.0, 8)
    f1 = np.stack([np.linspace(-1, 1, 8), np.zeros(8)], axis=-1)
    b = simulate(make_model("rankline"), g, 0, np.zeros(1), streams=np.arange(100000), flows=False)
    F = chaos_integrals(b, f1)["I1"]
    proj = F[:, None, None] * b.dm / g.dt
    mean, se = proj.mean(axis=0), proj.std(axis=0, ddof=1) / np.sqrt(len(F))
    live = se > 0
    assert np.all(np.abs(mean - f1)[live] <= 3.5 * se[live])
    assert np.all(mean[~live] == 0)


def test_integration_by_parts_is_unbiased():
    g = TimeGrid(1.0, 64)
    m = make_model("heisenberg")
    h = CameronMartinVector.from_function(g, lambda t: [np.cos(t), 1.0])
    b = simulate(m, g, 8, np.zeros(3), h=h, streams=np.arange(20000), record=[64])
    s = ibp_samples(b, parse("x1 + x3", 3), parse("x2^2 + 1", 3), h)
    diff = s["lhs"] - s["rhs"]
    assert abs(diff.mean()) <= 3 * diff.std(ddof=1) / np.sqrt(len(diff))


def test_classical_kernel_is_exponential_times_sigma():
    from scipy.linalg import expm
    from degdiff.models import make_classical
    A = np.array([[-0.5, 1.0], [-1.0, 0.0]])
    S = np.array([[1.0, 0.0], [0.3, 0.5]])
    b = simulate(make_classical(2, 2, A, S), TimeGrid(1.0, 1024), 1, np.zeros(2), streams=[0],
                 record=[256, 1024])
    want = expm(A * 0.75) @ S
    got = dhat(b, 256, 1024)[0]
    assert np.linalg.norm(got - want) <= 0.02 * np.linalg.norm(want)


def test_rankline_kernel_is_constant(rank):
    N = rank.grid.steps
    for t in (0, N // 2, N):
        assert np.allclose(dhat(rank, t, N), [[1.0, 0.0]])


def test_heisenberg_wick_is_unconditioned(heis):
    g = heis.grid
    hdot = np.column_stack([np.sin(np.arange(g.steps)), np.ones(g.steps)])
    full = np.exp(np.einsum("id,sid->s", hdot, heis.dB) - 0.5 * np.sum(hdot ** 2) * g.dt)
    assert np.allclose(conditional_wick(heis, CameronMartinVector(hdot)), full)
    u = cond_ito_integral_deterministic(heis, hdot)
    assert np.allclose(u["lhs_sample"], u["rhs_sample"])


def test_constant_second_chaos_matches_double_sum():
    g = TimeGrid(1.0, 24)
    b = simulate(make_model("rankline"), g, 8, np.zeros(1), streams=np.arange(20))
    N, c = g.steps, 1.7
    f2 = np.zeros((N, N, 2, 2))
    f2[..., 0, 0] = c
    I2 = chaos_integrals(b, f2=f2)["I2"]
    dm = b.dm[..., 0]
    brute = np.array([c * sum(dm[s, i] * dm[s, j] for i in range(N) for j in range(i + 1, N))
                      for s in range(20)])
    assert np.allclose(I2, brute)
    mT, qv = dm.sum(axis=1), np.sum(dm ** 2, axis=1)
    assert np.allclose(I2, c * (mT ** 2 - qv) / 2)


def test_adapted_divergence_isometry():
    g = TimeGrid(1.0, 16)
    b = simulate(make_model("rankline"), g, 21, np.zeros(1), streams=np.arange(10000))
    eta = np.tile([1.0, 2.0], (g.steps, 1))
    v = div_adapted(b, eta)
    n = len(v)
    assert abs(v.mean()) <= 3 * v.std(ddof=1) / np.sqrt(n)
    # only the first coordinate survives the projection: E v^2 = 1
    sq = v ** 2
    assert abs(sq.mean() - 1.0) <= 3 * sq.std(ddof=1) / np.sqrt(n)


def test_filtered_noise_is_not_explained_by_the_state():
    g = TimeGrid(1.0, 16)
    b = simulate(make_model("rankline"), g, 22, np.zeros(1), streams=np.arange(5000))
    u = cond_ito_integral_deterministic(b, np.tile([0.0, 1.0], (g.steps, 1)))
    assert np.all(u["rhs_sample"] == 0)
    X = np.column_stack([np.ones(5000), b.x[:, -1, 0], b.x[:, -1, 0] ** 2])
    coef, *_ = np.linalg.lstsq(X, u["lhs_sample"], rcond=None)
    resid = u["lhs_sample"] - X @ coef
    cov = np.linalg.inv(X.T @ X) * resid.var()
    assert np.all(np.abs(coef) <= 3.5 * np.sqrt(np.diag(cov)))
