"""Nested Monte Carlo for the scalar semigroup Q_t and the vector semigroup M_t."""

import numpy as np

from ..models import group_product, heisenberg_isometry
from ..rng import TAG_INNER, BrownianDriver
from ..sde import TimeGrid, simulate
from .core import summarize, vector_summary

DEFAULT_INNER_DT = 1.0 / 64


def inner_driver(driver, outer_stream):
    """Driver for the inner paths hanging off one outer stream."""
    return driver.child(outer_stream, TAG_INNER, 0)


def inner_grid(t, dt=DEFAULT_INNER_DT):
    return TimeGrid(t, max(1, int(round(t / dt))))


def terminal_states(model, t, points, n_inner, driver, dt=DEFAULT_INNER_DT, flows=False):
    """X_t started from each of ``points`` (k, n), all sharing the same n_inner noises.

    Returns states (k, n_inner, n) and, with ``flows``, J_t (k, n_inner, n, n).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    k = len(points)
    if t == 0:
        x = np.broadcast_to(points[:, None, :], (k, n_inner, model.n)).copy()
        J = np.broadcast_to(np.eye(model.n), (k, n_inner, model.n, model.n)).copy()
        return (x, J) if flows else x
    grid = inner_grid(t, dt)
    streams = np.arange(n_inner)
    dB = driver.increments(streams, grid.steps, grid.T, model.d)
    b = simulate(model, grid, driver, np.repeat(points, n_inner, axis=0),
                 streams=np.tile(streams, k), dB=np.tile(dB, (k, 1, 1)),
                 record=[grid.steps] if flows else [], flows=flows)
    x = b.x[:, -1].reshape(k, n_inner, model.n)
    if flows:
        return x, b.J[:, 0].reshape(k, n_inner, model.n, model.n)
    return x


def q_values(model, t, f, points, n_inner, driver, dt=DEFAULT_INNER_DT, side="left"):
    """Inner samples of f at time t from each point, shape (k, n_inner).

    For the Heisenberg group, ``left`` gives Q_t f(p) = E f(p * x_t) and
    ``right`` gives R_t f(p) = E f(y_t * p) with y = A x.  For other models
    both mean E f(X_t(p)).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if side not in ("left", "right"):
        raise ValueError("side must be 'left' or 'right'")
    if model.params.get("group") == "heisenberg":
        # the Euler scheme is left invariant: the path from p is p * (path from 0)
        x = terminal_states(model, t, np.zeros((1, model.n)), n_inner, driver, dt)[0]
        if side == "right":
            return np.stack([f(group_product(heisenberg_isometry(x), p)) for p in points])
        return np.stack([f(group_product(p, x)) for p in points])
    return f(terminal_states(model, t, points, n_inner, driver, dt))


def q_semigroup(model, t, f, p, n_inner, side="left", seed=0, dt=DEFAULT_INNER_DT):
    """Nested-MC estimate of the semigroup applied to f at p (McResult)."""
    if t < 0:
        raise ValueError("t must be non-negative")
    vals = q_values(model, t, f, p, n_inner, BrownianDriver(seed), dt, side)[0]
    if t == 0:
        return summarize(np.full(max(n_inner, 2), vals[0]))
    return summarize(vals)


def _alpha(f):
    return f.grad if hasattr(f, "grad") else f


def m_values(model, t, f, points, n_inner, driver, dt=DEFAULT_INNER_DT):
    """Inner samples of J_t(xi)* alpha(X_t(xi)), shape (k, n_inner, n); alpha = grad f."""
    x, J = terminal_states(model, t, points, n_inner, driver, dt, flows=True)
    a = _alpha(f)(x)
    return np.einsum("knba,knb->kna", J, a)


def m_semigroup(model, t, f, xi, n_inner, seed=0, dt=DEFAULT_INNER_DT):
    """Nested-MC estimate of M_t alpha(xi) = E[J_t(xi)* alpha(X_t(xi))] (VectorMcResult).

    ``f`` is an ExprFunction (alpha is its gradient) or a callable alpha.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    vals = m_values(model, t, f, xi, n_inner, BrownianDriver(seed), dt)[0]
    return vector_summary(vals)
