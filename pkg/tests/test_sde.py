import io

import numpy as np
import pytest

from degdiff import BrownianDriver, CameronMartinVector, TimeGrid, make_model, simulate
from degdiff.malliavin import dirichlet_energy, flow_energy
from degdiff.models import make_classical
from degdiff.sde import dyson_safeguard, shift_simulate, write_path_csv


def test_grid():
    g = TimeGrid(2.0, 8)
    assert g.dt == 0.25
    assert g.index(0.5) == 2
    with pytest.raises(ValueError):
        g.index(0.3)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 4)


def test_cameron_martin_norms():
    g = TimeGrid(1.0, 4)
    h = CameronMartinVector(np.array([[1.0, 0.0], [0.0, 2.0], [0.0, 0.0], [1.0, 1.0]]))
    assert h.norm(g) == pytest.approx(np.sqrt((1 + 4 + 2) / 4))
    assert np.allclose(h.running_norm(g) ** 2, [0, 0.25, 1.25, 1.25, 1.75])
    assert np.allclose(h.path(g)[-1], [0.5, 0.75])


def test_zero_direction_changes_nothing():
    m, g = make_model("heisenberg"), TimeGrid(1.0, 32)
    a = simulate(m, g, 5, np.zeros(3), streams=np.arange(4))
    b = simulate(m, g, 5, np.zeros(3), streams=np.arange(4), h=CameronMartinVector.zero(g, 2))
    assert np.array_equal(a.x, b.x) and np.array_equal(a.J, b.J) and np.array_equal(a.K, b.K)
    assert np.all(b.nabla == 0)
    c = shift_simulate(m, g, 5, np.zeros(3), CameronMartinVector.zero(g, 2), streams=np.arange(4))
    assert np.array_equal(a.x, c.x)


def test_bundles_do_not_depend_on_batching():
    m, g = make_model("circle"), TimeGrid(1.0, 64)
    whole = simulate(m, g, 11, np.zeros(1), streams=np.arange(6))
    part = simulate(m, g, 11, np.zeros(1), streams=[4, 5])
    assert np.array_equal(whole.x[4:], part.x)
    assert np.array_equal(whole.J[4:], part.J)


@pytest.mark.parametrize("name", ["circle", "heisenberg"])
def test_k_tracks_the_inverse_of_j(name):
    m = make_model(name)
    errs = []
    for steps in (128, 1024):
        b = simulate(m, TimeGrid(1.0, steps), 2, np.full(m.n, 0.3), streams=np.arange(200))
        errs.append(np.median(np.abs(b.K[:, -1] - np.linalg.inv(b.J[:, -1])).max(axis=(-2, -1))))
    assert errs[1] <= errs[0] + 1e-14
    assert errs[1] < 0.05


def test_classical_flow_bound():
    A = np.array([[-1.0, 2.0], [0.0, -0.5]])
    S = np.array([[1.0, 0.0], [0.5, 1.0]])
    m = make_classical(2, 2, A, S)
    g = TimeGrid(1.0, 1024)
    b = simulate(m, g, 0, np.zeros(2), streams=[0], record=[0, 256, 1024])
    lip = np.linalg.eigvalsh(0.5 * (A + A.T)).max()
    normS = np.linalg.norm(S, 2)
    for s_node, t_node in [(0, 1024), (256, 1024), (0, 256)]:
        flow = b.J_at(t_node)[0] @ b.K_at(s_node)[0] @ S
        bound = normS * np.exp(lip * (t_node - s_node) * g.dt)
        assert np.linalg.norm(flow, 2) <= bound * 1.05


def test_flowgram_matches_gram():
    m, g = make_model("heisenberg"), TimeGrid(1.0, 64)
    times = [0.25, 0.75, 1.0]
    nodes = [g.index(t) for t in times]
    b1 = simulate(m, g, 9, np.zeros(3), streams=np.arange(8), record=nodes, accumulate=("gram",),
                  gram_times=times)
    b2 = simulate(m, g, 9, np.zeros(3), streams=np.arange(8), record=nodes, accumulate=("flowgram",),
                  gram_times=times)
    grads = np.random.default_rng(0).normal(size=(8, 3, 3))
    e1, e2 = dirichlet_energy(b1, grads, nodes), flow_energy(b2, grads, nodes)
    assert np.all(e1 >= 0)
    assert np.allclose(e1, e2, rtol=1e-10, atol=1e-12)


def test_safeguard_examples():
    x = np.array([-1.0, 0.0, 1.0])
    b = np.array([0.1, 0.0, -0.1])
    tb, capped = dyson_safeguard(x, b, 1e-3)
    assert np.array_equal(tb, b) and not capped
    x = np.array([0.0, 1e-6, 1.0])
    m = make_model("dyson", d=3, gamma=1.0)
    tb, capped = dyson_safeguard(x, m.b(x), 1e-3)
    assert capped
    assert np.linalg.norm(tb) * 1e-3 <= 0.5e-6 * (1 + 1e-12)
    assert np.all(np.diff(x + tb * 1e-3) > 0)


def test_dyson_paths_stay_ordered_on_a_coarse_grid():
    m = make_model("dyson", d=3, gamma=1.0)
    b = simulate(m, TimeGrid(1.0, 64), 0, np.array([-1.0, 0.0, 1.0]), streams=np.arange(400),
                 accumulate=("flowgram",), record=[0, 64])
    assert np.all(np.diff(b.x, axis=-1) > 0)
    assert b.acc["refined_steps"].sum() > 0
    assert np.all(np.isfinite(b.J)) and np.all(np.isfinite(b.acc["flowgram"]))
    again = simulate(m, TimeGrid(1.0, 64), 0, np.array([-1.0, 0.0, 1.0]), streams=np.arange(400),
                     flows=False)
    assert np.array_equal(b.x, again.x)


def test_simulate_validation():
    m = make_model("dyson", d=3, gamma=1.0)
    with pytest.raises(ValueError, match="ordered"):
        simulate(m, TimeGrid(1.0, 8), 0, np.array([1.0, 0.0, 2.0]))
    h = make_model("heisenberg")
    with pytest.raises(ValueError):
        simulate(h, TimeGrid(1.0, 8), 0, np.zeros(3), accumulate=("gram",), flows=False)
    with pytest.raises(ValueError):
        simulate(h, TimeGrid(1.0, 8), 0, np.zeros(3), accumulate=("nope",))


def test_path_csv():
    m = make_model("heisenberg")
    b = simulate(m, TimeGrid(1.0, 8), BrownianDriver(7), np.zeros(3), flows=False)
    fh = io.StringIO()
    write_path_csv(b, 0, fh)
    lines = fh.getvalue().splitlines()
    assert lines[0] == "t,x_1,x_2,x_3,dB_1,dB_2"
    assert len(lines) == 10
    rows = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    assert rows.shape == (9, 6)
    assert np.array_equal(rows[:, 1:4], b.x[0])
    assert np.array_equal(rows[1:, 4:], b.dB[0])


def test_additive_noise_paths_and_shifts():
    m = make_classical(2, 2, np.zeros((2, 2)), np.eye(2))
    g = TimeGrid(1.0, 64)
    x0 = np.array([0.3, -1.0])
    b = simulate(m, g, 4, x0, streams=np.arange(5))
    assert np.allclose(b.x[:, 1:] - x0, np.cumsum(b.dB, axis=1), atol=1e-13)
    h = CameronMartinVector(np.column_stack([np.linspace(-1, 1, 64), np.ones(64)]))
    s = shift_simulate(m, g, 4, x0, h, streams=np.arange(5))
    assert np.allclose(s.x - b.x, h.path(g)[None], atol=1e-13)


def test_heisenberg_coordinates_are_brownian_path_and_levy_area():
    from degdiff.estimators.heisenberg import levy_area
    b = simulate(make_model("heisenberg"), TimeGrid(1.0, 128), 6, np.zeros(3), streams=np.arange(8))
    assert np.array_equal(b.x[:, 1:, :2], np.cumsum(b.dB, axis=1))
    assert np.allclose(b.x[:, -1, 2], 0.5 * levy_area(b.dB), atol=1e-13)


def test_classical_flow_matches_matrix_exponential():
    from scipy.linalg import expm
    A = np.array([[0.0, 1.0], [-1.0, 0.0]])
    m = make_classical(2, 2, A, np.eye(2))
    b = simulate(m, TimeGrid(1.0, 1024), 0, np.zeros(2), streams=[0, 1])
    want = expm(A)
    err = np.linalg.norm(b.J_at(1024) - want, axis=(-2, -1)) / np.linalg.norm(want)
    assert np.all(err <= 0.02)


def test_stiff_rows_are_stepped_implicitly():
    from degdiff.sde import _implicit_batch
    m = make_model("dyson", d=3, gamma=1.0)
    x = np.array([[-1.0, 0.0, 1.0], [-1.0, 0.0, 0.004], [-0.5, -0.49, 2.0]])
    dB = np.array([[0.1, -0.2, 0.0], [0.0, 0.03, -0.03], [0.02, -0.02, 0.0]])
    dt = 2.0 ** -12
    y = _implicit_batch(m, x, None, None, None, dB, dt, None, np.broadcast_to(np.eye(3), (3, 3, 3)))[0]
    assert np.all(np.diff(y, axis=-1) > 0)
    assert np.allclose(y - m.b(y) * dt, x + dB, atol=1e-13)
    # the near pair is far beyond the explicit stability limit dt |Db| <= 1
    assert dt * np.abs(m.db(x[1])).sum(axis=-1).max() > 10


def test_implicit_scheme_contracts_shift_differences():
    m, g = make_model("dyson", d=3, gamma=1.0), TimeGrid(1.0, 256)
    x0 = np.array([-0.05, 0.0, 0.05])
    h = CameronMartinVector(np.tile([1.0, -1.0, 0.5], (256, 1)))
    a = simulate(m, g, 3, x0, streams=np.arange(50), flows=False, implicit=True)
    b = shift_simulate(m, g, 3, x0, h, streams=np.arange(50), flows=False, implicit=True)
    assert np.all(a.acc["implicit_steps"] == g.steps)
    gap = np.linalg.norm(b.x - a.x, axis=-1)[:, 1:]
    assert np.all(gap <= np.sqrt(g.times[1:]) * h.running_norm(g)[1:] * (1 + 1e-9))
