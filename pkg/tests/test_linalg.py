import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from degdiff.linalg import InvalidInputError, norms, operator_norm, pinv, projection_range_adjoint

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def matrices(max_side=6):
    shapes = st.tuples(st.integers(1, max_side), st.integers(1, max_side))
    return shapes.flatmap(lambda s: arrays(float, s, elements=finite))


def test_pinv_examples():
    assert np.allclose(pinv(np.eye(2)), np.eye(2))
    assert np.allclose(pinv(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]))


def test_pinv_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        pinv([[1.0, np.nan], [0.0, 1.0]])
    with pytest.raises(ValueError):
        pinv(np.eye(2), tol_rel=0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 6), st.integers(0, 2 ** 32 - 1))
def test_penrose_identities(r, c, rank, seed):
    g = np.random.default_rng(seed)
    rank = min(rank, r, c)
    u = np.linalg.qr(g.normal(size=(r, r)))[0][:, :rank]
    v = np.linalg.qr(g.normal(size=(c, c)))[0][:, :rank]
    m = (u * g.uniform(0.1, 10.0, rank)) @ v.T
    p = pinv(m)
    assert np.abs(m @ p @ m - m).max() <= 1e-9
    assert np.abs(p @ m @ p - p).max() <= 1e-9
    assert np.abs((m @ p).T - m @ p).max() <= 1e-9
    assert np.abs((p @ m).T - p @ m).max() <= 1e-9


def test_projection_examples():
    s = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.5]])
    assert np.allclose(projection_range_adjoint(s), np.eye(2), atol=1e-12)
    assert np.allclose(projection_range_adjoint([[1.0, 0.0]]), [[1, 0], [0, 0]])
    th = np.pi / 4
    assert np.allclose(projection_range_adjoint([[np.cos(th), np.sin(th)]]), 0.5)


@settings(max_examples=200, deadline=None)
@given(matrices())
def test_projection_properties(sigma):
    P = projection_range_adjoint(sigma)
    assert np.linalg.norm(P @ P - P) <= 1e-9
    assert np.linalg.norm(P - P.T) <= 1e-12
    assert np.linalg.norm(P @ sigma.T - sigma.T) <= 1e-9 * max(1.0, np.linalg.norm(sigma))


@settings(max_examples=100, deadline=None)
@given(matrices(4), st.integers(0, 2 ** 32 - 1))
def test_projection_depends_only_on_range(sigma, seed):
    n = sigma.shape[0]
    G = np.random.default_rng(seed).normal(size=(n, n)) + 3 * np.eye(n)
    s = np.linalg.svd(sigma, compute_uv=False)
    if s.size and s[0] > 0 and np.any((s > 1e-10 * s[0]) & (s < 1e-6 * s[0])):
        return  # rank decision is ambiguous for nearly-degenerate spectra
    P1 = projection_range_adjoint(sigma)
    P2 = projection_range_adjoint(G.T @ sigma)  # sigma* G spans the same range as sigma*
    assert np.abs(P1 - P2).max() <= 1e-9


def test_batched_projection():
    th = np.linspace(0, np.pi, 7)
    sig = np.stack([np.cos(th), np.sin(th)], axis=-1)[:, None, :]
    P = projection_range_adjoint(sig)
    assert P.shape == (7, 2, 2)
    assert np.allclose(P[:, 0, 0], np.cos(th) ** 2)


def test_norms():
    assert norms(np.eye(2)) == pytest.approx({"frobenius": np.sqrt(2), "operator": 1.0})
    assert norms(np.diag([3.0, 4.0])) == pytest.approx({"frobenius": 5.0, "operator": 4.0})
    assert np.allclose(operator_norm(np.stack([np.eye(2), 2 * np.eye(2)])), [1, 2])
