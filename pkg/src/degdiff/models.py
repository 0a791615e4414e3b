"""Diffusion models: drift b, diffusion sigma and their state derivatives.

All coefficient functions broadcast over leading axes, so a batch of states
of shape (S, n) yields drifts (S, n), diffusions (S, n, d), drift Jacobians
(S, n, n) and diffusion derivative tensors (S, n, d, n) with
``[..., a, i, c] = d sigma_{a i} / d x_c``.
"""

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

COLLISION_TOL = 1e-12


class SingularStateError(ArithmeticError):
    """Drift evaluated at (or within 1e-12 of) a singular state."""


@dataclass(frozen=True)
class Model:
    name: str
    n: int
    d: int
    drift: Callable
    diffusion: Callable
    drift_jacobian: Callable
    diffusion_tensor: Callable
    drift_singular: bool = False
    projection_constant: bool = False
    sigma_constant: bool = False
    params: dict = field(default_factory=dict)

    def b(self, x):
        return self.drift(np.asarray(x, dtype=float))

    def sigma(self, x):
        return self.diffusion(np.asarray(x, dtype=float))

    def db(self, x):
        return self.drift_jacobian(np.asarray(x, dtype=float))

    def dsigma_tensor(self, x):
        return self.diffusion_tensor(np.asarray(x, dtype=float))

    def dsigma(self, x, v):
        """Directional derivative of sigma at x along v, shape (..., n, d)."""
        return np.einsum("...aic,...c->...ai", self.dsigma_tensor(x), np.asarray(v, dtype=float))

    def a(self, x):
        s = self.sigma(x)
        return s @ np.swapaxes(s, -1, -2)


def _zeros_like_batch(x, *shape):
    return np.zeros(np.shape(x)[:-1] + shape)


def _constant(mat, x):
    return np.broadcast_to(mat, np.shape(x)[:-1] + mat.shape).copy()


# --- Heisenberg group ------------------------------------------------------

HEISENBERG_ISOMETRY = np.diag([-1.0, -1.0, 1.0])


def group_product(p, q):
    """(x, y, z) * (a, b, c) = (x + a, y + b, z + c + (x b - y a) / 2)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    z = p[..., 2] + q[..., 2] + 0.5 * (p[..., 0] * q[..., 1] - p[..., 1] * q[..., 0])
    return np.stack([p[..., 0] + q[..., 0], p[..., 1] + q[..., 1], z], axis=-1)


def group_inverse(p):
    return -np.asarray(p, dtype=float)


def heisenberg_isometry(x):
    """y = A x with A = diag(-1, -1, 1); maps the left process to the right one."""
    return np.asarray(x, dtype=float) @ HEISENBERG_ISOMETRY


def make_heisenberg():
    def sigma(x):
        s = _zeros_like_batch(x, 3, 2)
        s[..., 0, 0] = 1.0
        s[..., 1, 1] = 1.0
        s[..., 2, 0] = -x[..., 1] / 2
        s[..., 2, 1] = x[..., 0] / 2
        return s

    ds = np.zeros((3, 2, 3))
    ds[2, 0, 1] = -0.5
    ds[2, 1, 0] = 0.5
    return Model(
        name="heisenberg", n=3, d=2,
        drift=lambda x: np.zeros_like(x),
        diffusion=sigma,
        drift_jacobian=lambda x: _zeros_like_batch(x, 3, 3),
        diffusion_tensor=lambda x: _constant(ds, x),
        # sigma has rank 2 everywhere, so P is the identity of R^2
        projection_constant=True,
        params={"group": "heisenberg"},
    )


# --- Dyson Brownian motion -------------------------------------------------

def _pair_inverse(x):
    """1 / (x_i - x_j) off the diagonal, 0 on it."""
    eye = np.eye(x.shape[-1])
    diff = x[..., :, None] - x[..., None, :] + eye
    if np.min(np.abs(diff)) < COLLISION_TOL:
        raise SingularStateError("particles collide")
    return 1.0 / diff - eye


def make_dyson(d, gamma):
    if d < 2:
        raise ValueError("Dyson model needs d >= 2")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    eye = np.eye(d)

    def drift(x):
        return gamma * _pair_inverse(x).sum(axis=-1)

    def drift_jacobian(x):
        inv2 = _pair_inverse(x) ** 2
        jac = gamma * inv2
        diag = -gamma * inv2.sum(axis=-1)
        return jac * (1 - eye) + diag[..., :, None] * eye

    return Model(
        name="dyson", n=d, d=d,
        drift=drift,
        diffusion=lambda x: _constant(eye, x),
        drift_jacobian=drift_jacobian,
        diffusion_tensor=lambda x: _zeros_like_batch(x, d, d, d),
        drift_singular=True,
        projection_constant=True,
        sigma_constant=True,
        params={"d": d, "gamma": gamma},
    )


# --- constant-diffusion models ---------------------------------------------

def make_classical(n, d, A_drift, Sigma):
    """Linear drift b(x) = A x and constant diffusion Sigma."""
    A = np.asarray(A_drift, dtype=float).reshape(n, n)
    S = np.asarray(Sigma, dtype=float).reshape(n, d)
    return Model(
        name="classical", n=n, d=d,
        drift=lambda x: x @ A.T,
        diffusion=lambda x: _constant(S, x),
        drift_jacobian=lambda x: _constant(A, x),
        diffusion_tensor=lambda x: _zeros_like_batch(x, n, d, n),
        projection_constant=True,
        sigma_constant=True,
        params={"A": A.tolist(), "Sigma": S.tolist()},
    )


def make_rankline():
    """X = x + b^1: the second noise coordinate is invisible to the state."""
    return replace(make_classical(1, 2, [[0.0]], [[1.0, 0.0]]), name="rankline", params={})


def make_circle():
    """n = 1, d = 2, sigma(x) = [cos x, sin x], no drift; P(x) has rank one."""

    def sigma(x):
        return np.stack([np.cos(x), np.sin(x)], axis=-1)

    def tensor(x):
        return np.stack([-np.sin(x), np.cos(x)], axis=-1)[..., None]

    return Model(
        name="circle", n=1, d=2,
        drift=lambda x: np.zeros_like(x),
        diffusion=sigma,
        drift_jacobian=lambda x: _zeros_like_batch(x, 1, 1),
        diffusion_tensor=tensor,
    )


def right_factor(model, R, name=None):
    """Same model with diffusion sigma R for a constant R (d x d').

    The generator depends only on a = sigma sigma*, so the law is unchanged
    whenever sigma R R* sigma* = sigma sigma*; :func:`factorization_sweep`
    verifies that on sampled states.
    """
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or R.shape[0] != model.d:
        raise ValueError(f"R must have {model.d} rows")
    return Model(
        name=name or f"{model.name}*R", n=model.n, d=R.shape[1],
        drift=model.drift,
        diffusion=lambda x: model.diffusion(x) @ R,
        drift_jacobian=model.drift_jacobian,
        diffusion_tensor=lambda x: np.einsum("...aic,ij->...ajc", model.diffusion_tensor(x), R),
        drift_singular=model.drift_singular,
        projection_constant=model.projection_constant,
        sigma_constant=model.sigma_constant,
        params={**model.params, "R": R.tolist()},
    )


MODEL_NAMES = ("heisenberg", "dyson", "classical", "circle", "rankline")


def make_model(name, **params):
    """Build a model from its CLI name and parameters."""
    if name == "heisenberg":
        return make_heisenberg()
    if name == "dyson":
        return make_dyson(int(params.get("d", 3)), float(params.get("gamma", 1.0)))
    if name == "classical":
        n = int(params.get("n", 1))
        d = int(params.get("d", n))
        A = params.get("A", np.zeros((n, n)))
        Sigma = params.get("Sigma", np.eye(n, d))
        return make_classical(n, d, A, Sigma)
    if name == "circle":
        return make_circle()
    if name == "rankline":
        return make_rankline()
    raise ValueError(f"unknown model {name!r}; expected one of {', '.join(MODEL_NAMES)}")


def default_x0(model):
    if model.name == "dyson":
        return np.arange(model.n) - (model.n - 1) / 2
    return np.zeros(model.n)
