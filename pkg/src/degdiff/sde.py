"""Euler-Maruyama simulation of X coupled with its flows.

One call advances a batch of streams together.  Besides the state the
recursion carries

* the projected martingale increments dm = P(X) dB,
* the state-space derivative J (driven by the projected noise),
* its inverse K, integrated by its own recursion so that J K = I is a check
  rather than an identity,
* optionally the conditional derivative along a Cameron-Martin direction h.

For singular (Dyson) drifts, rows where the explicit step is beyond its
stability limit are stepped drift-implicitly; taming and recursive bridge
halving back this up.

Arrays in a :class:`PathBundle` carry a leading path axis.
"""

from dataclasses import dataclass, field

import numpy as np

from .linalg import DEFAULT_TOL_REL, operator_norm, projection_range_adjoint
from .rng import TAG_SAFEGUARD, BrownianDriver, bridge_bisect

MAX_HALVINGS = 20
# dt times a bound on |Db| above which a singular drift is stepped implicitly
STIFF_LIMIT = 1.0
ACCUMULATORS = ("jk", "z", "gram", "vc", "flowgram")


class SimulationError(RuntimeError):
    pass


class StepRejectionError(SimulationError):
    def __init__(self, step, stream):
        super().__init__(f"ordering could not be preserved at step {step} (stream {stream})")
        self.step = step
        self.stream = stream


class BlowUpError(SimulationError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    T: float = 1.0
    steps: int = 256

    def __post_init__(self):
        if self.T <= 0 or self.steps < 1:
            raise ValueError("grid needs T > 0 and steps >= 1")

    @property
    def dt(self):
        return self.T / self.steps

    @property
    def times(self):
        return np.arange(self.steps + 1) * self.dt

    def index(self, t):
        """Grid index of time t (must lie on the grid up to rounding)."""
        k = int(round(t / self.dt))
        if not 0 <= k <= self.steps or abs(k * self.dt - t) > 1e-9 * max(1.0, self.T):
            raise ValueError(f"time {t} is not a node of {self}")
        return k


@dataclass(frozen=True)
class CameronMartinVector:
    """Piecewise-constant density hdot, shape (steps, d)."""

    hdot: np.ndarray

    @classmethod
    def from_function(cls, grid, fn):
        """hdot_i = fn(t_i) evaluated at the left node of each cell."""
        vals = np.array([np.atleast_1d(fn(t)) for t in grid.times[:-1]], dtype=float)
        return cls(vals)

    @classmethod
    def zero(cls, grid, d):
        return cls(np.zeros((grid.steps, d)))

    def norm(self, grid, upto=None):
        """|h|_H on [0, t_upto] (one value per path for batched densities)."""
        h = self.hdot if upto is None else self.hdot[..., :upto, :]
        out = np.sqrt(np.sum(h * h, axis=(-2, -1)) * grid.dt)
        return float(out) if out.ndim == 0 else out

    def running_norm(self, grid):
        """|h|_H on [0, t_i] for every node i, shape (..., steps + 1)."""
        sq = np.cumsum(np.sum(self.hdot ** 2, axis=-1), axis=-1) * grid.dt
        zero = np.zeros(sq.shape[:-1] + (1,))
        return np.sqrt(np.concatenate([zero, sq], axis=-1))

    def path(self, grid):
        """h(t_i) at every node, shape (..., steps + 1, d)."""
        cum = np.cumsum(self.hdot * grid.dt, axis=-2)
        zero = np.zeros(cum.shape[:-2] + (1, cum.shape[-1]))
        return np.concatenate([zero, cum], axis=-2)


@dataclass
class PathBundle:
    model: object
    grid: TimeGrid
    streams: np.ndarray
    x: np.ndarray            # (S, N+1, n)
    dB: np.ndarray           # (S, N, d), shift included
    dm: np.ndarray           # (S, N, d)
    record: np.ndarray       # node indices where J, K, nabla are stored
    J: np.ndarray = None     # (S, R, n, n)
    K: np.ndarray = None
    nabla: np.ndarray = None  # (S, R, n)
    acc: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return self.x.shape[0]

    def slot(self, node):
        """Position of a grid node inside ``record``."""
        k = np.searchsorted(self.record, node)
        if k >= len(self.record) or self.record[k] != node:
            raise IndexError(f"node {node} was not recorded")
        return int(k)

    def projections(self, nodes=slice(None)):
        """P(X) at the given nodes, shape (S, len(nodes), d, d)."""
        return projections(self.model, self.x[:, nodes])

    def J_at(self, node):
        return self.J[:, self.slot(node)]

    def K_at(self, node):
        return self.K[:, self.slot(node)]

    def path(self, k):
        """A single-path view (leading axis of length one)."""
        sl = slice(k, k + 1)
        return PathBundle(
            self.model, self.grid, self.streams[sl], self.x[sl], self.dB[sl], self.dm[sl], self.record,
            None if self.J is None else self.J[sl], None if self.K is None else self.K[sl],
            None if self.nabla is None else self.nabla[sl],
            {key: (v if key == "gram_breaks" else v[sl]) for key, v in self.acc.items()})


def projections(model, x, tol_rel=DEFAULT_TOL_REL):
    """P(x) for a batch of states, shape (..., d, d)."""
    x = np.asarray(x, dtype=float)
    if model.projection_constant:
        p = projection_range_adjoint(model.sigma(x.reshape(-1, model.n)[0]), tol_rel)
        return np.broadcast_to(p, x.shape[:-1] + p.shape)
    return projection_range_adjoint(model.sigma(x), tol_rel)


def _tame(b, x, dt):
    gap = np.min(np.diff(x, axis=-1), axis=-1)
    size = np.linalg.norm(b, axis=-1) * dt
    scale = np.minimum(1.0, 0.5 * gap / np.maximum(size, 1e-300))
    return b * scale[..., None], scale < 1.0


def _ordered(x):
    return np.all(np.diff(x, axis=-1) > 1e-12, axis=-1)


class _Stepper:
    """Single Euler step of state and flows for a batch."""

    def __init__(self, model, flows, P_const, implicit=False):
        self.model = model
        self.flows = flows
        self.P_const = P_const
        self.implicit = implicit and model.drift_singular
        self.eye = np.eye(model.n)

    def proj(self, x):
        if self.P_const is not None:
            return np.broadcast_to(self.P_const, x.shape[:-1] + self.P_const.shape)
        return projections(self.model, x)

    def __call__(self, x, J, K, nab, dB, dt, hdot):
        m = self.model
        if self.implicit:
            out = _implicit_batch(m, x, J, K, nab, dB, dt, hdot, self.proj(x))
            none = np.zeros(x.shape[:-1], dtype=bool)
            return out[:5] + (none, out[5], ~none)
        if m.drift_singular:
            # implicit where the explicit step is unstable or would need taming
            b, Db = m.b(x), m.db(x)
            stiff = dt * np.max(np.sum(np.abs(Db), axis=-1), axis=-1) > STIFF_LIMIT
            stiff |= _tame(b, x, dt)[1]
            out = self._explicit(x, J, K, nab, dB, dt, hdot, b, Db)
            if np.any(stiff):
                return self._split(x, J, K, nab, dB, dt, hdot, stiff, out)
            return out + (stiff,)
        return self._explicit(x, J, K, nab, dB, dt, hdot) + (np.zeros(x.shape[:-1], dtype=bool),)

    def _split(self, x, J, K, nab, dB, dt, hdot, stiff, explicit):
        """Replace the explicit step by a drift-implicit one on the stiff rows."""
        x_new, J_new, K_new, nab_new, dm, tamed, phi = explicit
        idx = np.flatnonzero(stiff)
        hd = None if hdot is None else (hdot[idx] if hdot.ndim == 2 else hdot)
        out = _implicit_batch(self.model, x[idx], None if J is None else J[idx],
                              None if K is None else K[idx], None if nab is None else nab[idx],
                              dB[idx], dt, hd, self.proj(x[idx]))
        x_new[idx], dm[idx] = out[0], out[4]
        if J is not None:
            J_new[idx], K_new[idx], phi[idx] = out[1], out[2], out[5]
        if nab is not None:
            nab_new[idx] = out[3]
        tamed[idx] = False
        return x_new, J_new, K_new, nab_new, dm, tamed, phi, stiff

    def _explicit(self, x, J, K, nab, dB, dt, hdot, b=None, Db=None):
        m = self.model
        s = m.sigma(x)
        P = self.proj(x)
        dm = np.einsum("...ij,...j->...i", P, dB)
        b = m.b(x) if b is None else b
        tamed = None
        if m.drift_singular:
            b, tamed = _tame(b, x, dt)
        x_new = x + b * dt + np.einsum("...ij,...j->...i", s, dB)
        phi = None
        if self.flows:
            Db = m.db(x) if Db is None else Db
            if m.drift_singular:
                # backward Euler: Db blows up near collisions and is negative
                # semidefinite there, so the explicit flow is unstable
                M = self.eye - dt * Db
                phi = np.linalg.inv(M)
                J = phi @ J
                # K = J^-1 really does outgrow floating point when J contracts
                # hard; nothing downstream needs it for these models
                with np.errstate(over="ignore", invalid="ignore"):
                    K = K @ M
                L = phi - self.eye
            elif m.sigma_constant:
                L = dt * Db
                J = J + L @ J
                K = K - K @ L
            else:
                Ds = m.dsigma_tensor(x)
                A = np.einsum("...akc,...k->...ac", Ds, dm)
                L = A + dt * Db
                J = J + L @ J
                C = np.einsum("...aic,...cje,...ij->...ae", Ds, Ds, P)
                K = K - K @ A + dt * (K @ (C - Db))
            if nab is not None:
                nab = (nab + np.einsum("...ac,...c->...a", L, nab)
                       + dt * np.einsum("...ai,...i->...a", s, hdot))
            if phi is None:
                phi = self.eye + L
        return x_new, J, K, nab, dm, tamed, phi


def simulate(model, grid, driver, x0, h=None, streams=(0,), record=None, accumulate=(),
             gram_times=None, flows=True, shift=None, dB=None, implicit=False):
    """Simulate a batch of paths.

    Parameters
    ----------
    model : Model
    grid : TimeGrid
    driver : BrownianDriver or int seed
    x0 : array_like, shape (n,) or (S, n)
    h : CameronMartinVector, optional
        Direction for the conditional derivative (needs ``flows``).
    streams : sequence of int
        Stream indices; one path per stream.
    record : sequence of int or None
        Nodes at which J, K and the conditional derivative are stored
        (default: every node).
    accumulate : iterable of {"jk", "z", "gram", "vc"}
        On-the-fly functionals: running sup of |J K - I|_F; the integral
        of |sigma* K*|_op^2; Gram matrices sum K a K* dt split at
        ``gram_times``; the variation-of-constants sum of K sigma hdot dt;
        the same Gram matrices carried in flow coordinates (``flowgram``,
        see :func:`_flowgram_step`).
    shift : CameronMartinVector, optional
        Replaces every increment dB_i by dB_i + hdot_i dt (the path w + h).
        Densities of shape (S, steps, d) give one direction per path, and so
        may ``h``.
    dB : array (S, steps, d), optional
        Increments to use instead of drawing them from ``driver``; lets
        several starting points share common random numbers.
    implicit : bool
        For singular drifts, step every row drift-implicitly instead of only
        the stiff ones.  Slower, but the map from increments to paths then
        inherits the contraction of a monotone drift exactly.
    """
    if not isinstance(driver, BrownianDriver):
        driver = BrownianDriver(driver)
    streams = np.atleast_1d(np.asarray(streams, dtype=np.int64))
    S, N, dt = len(streams), grid.steps, grid.dt
    n, d = model.n, model.d
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (S, n)).copy()
    if model.drift_singular and not np.all(_ordered(x0)):
        raise ValueError("x0 must be strictly ordered for a singular drift")
    accumulate = set(accumulate)
    unknown = accumulate - set(ACCUMULATORS)
    if unknown:
        raise ValueError(f"unknown accumulators {sorted(unknown)}")
    if accumulate and not flows:
        raise ValueError("accumulators need flows")
    if h is not None and not flows:
        raise ValueError("the conditional derivative needs flows")
    if "vc" in accumulate and h is None:
        raise ValueError("the variation-of-constants sum needs h")

    if dB is None:
        dB = driver.increments(streams, N, grid.T, d)
    elif dB.shape != (S, N, d):
        raise ValueError(f"increments must have shape {(S, N, d)}")
    if shift is not None:
        hd = shift.hdot if shift.hdot.ndim == 3 else shift.hdot[None]
        dB = dB + hd * dt
    record = np.arange(N + 1) if record is None else np.unique(np.asarray(record, dtype=int))
    if record.size and (record[0] < 0 or record[-1] > N):
        raise ValueError("record indices outside the grid")

    P_const = None
    if model.projection_constant:
        P_const = projections(model, x0[0])
    stepper = _Stepper(model, flows, P_const, implicit)

    xs = np.empty((S, N + 1, n))
    dms = np.empty((S, N, d))
    xs[:, 0] = x0
    eye = np.eye(n)
    J = np.broadcast_to(eye, (S, n, n)).copy() if flows else None
    K = J.copy() if flows else None
    nab = np.zeros((S, n)) if h is not None else None
    Js = np.empty((S, len(record), n, n)) if flows else None
    Ks = np.empty_like(Js) if flows else None
    nabs = np.empty((S, len(record), n)) if nab is not None else None

    acc = {}
    if "jk" in accumulate:
        acc["jk_sup"] = np.zeros(S)
    if "z" in accumulate:
        acc["z"] = np.zeros(S)
    breaks = sorted([N] if gram_times is None else [grid.index(t) for t in gram_times])
    if "gram" in accumulate:
        # one extra slot collects the cells after the last break
        acc["gram"] = np.zeros((S, len(breaks) + 1, n, n))
        acc["gram_breaks"] = np.array(breaks)
        interval_of = np.searchsorted(np.array(breaks), np.arange(N), side="right")
    if "vc" in accumulate:
        acc["vc"] = np.zeros((S, n))
    if "flowgram" in accumulate:
        if breaks[0] < 1:
            raise ValueError("flowgram times must be positive")
        m = len(breaks)
        acc["flowgram"] = np.zeros((S, m, n, n))
        acc["flowgram_transfer"] = np.broadcast_to(np.eye(n), (S, m, m, n, n)).copy()
        acc["gram_breaks"] = np.array(breaks)
        fg = {"G": np.zeros((S, n, n)), "R": {}, "pos": {b: j for j, b in enumerate(breaks)}}
    acc["tamed_steps"] = np.zeros(S, dtype=np.int64)
    acc["refined_steps"] = np.zeros(S, dtype=np.int64)
    acc["max_halvings"] = np.zeros(S, dtype=np.int64)
    acc["implicit_substeps"] = np.zeros(S, dtype=np.int64)
    acc["implicit_steps"] = np.zeros(S, dtype=np.int64)

    slot = 0
    x = x0
    for i in range(N + 1):
        if flows and slot < len(record) and record[slot] == i:
            Js[:, slot] = J
            Ks[:, slot] = K
            if nabs is not None:
                nabs[:, slot] = nab
            slot += 1
        if flows and accumulate - {"flowgram"}:
            _accumulate(acc, model, x, J, K, dt, i, N, h, interval_of if "gram" in acc else None)
        if i == N:
            break
        hdot = h.hdot[..., i, :] if h is not None else None
        x_new, J_new, K_new, nab_new, dm, tamed, phi, stiff = stepper(x, J, K, nab, dB[:, i], dt, hdot)
        if tamed is not None:
            acc["tamed_steps"] += tamed
        acc["implicit_steps"] += stiff
        if model.drift_singular:
            bad = np.flatnonzero(~_ordered(x_new))
            for p in bad:
                sub = _refine(stepper, driver, streams[p], i, x[p], None if J is None else J[p],
                              None if K is None else K[p], None if nab is None else nab[p],
                              dB[p, i], dt, None if hdot is None else (hdot[p] if hdot.ndim == 2 else hdot))
                x_new[p], dm[p] = sub[0], sub[4]
                if flows:
                    J_new[p], K_new[p], phi[p] = sub[1], sub[2], sub[6]
                if nab is not None:
                    nab_new[p] = sub[3]
                acc["refined_steps"][p] += 1
                acc["implicit_substeps"][p] += sub[7]
                acc["max_halvings"][p] = max(acc["max_halvings"][p], sub[5])
        if not np.all(np.isfinite(x_new)):
            raise BlowUpError(f"non-finite state at step {i}")
        if "flowgram" in acc:
            _flowgram_step(acc, fg, model, x, phi, dt, i)
        x, J, K, nab = x_new, J_new, K_new, nab_new
        xs[:, i + 1] = x
        dms[:, i] = dm

    return PathBundle(model, grid, streams, xs, dB, dms, record, Js, Ks, nabs, acc)


def _accumulate(acc, model, x, J, K, dt, i, N, h, interval_of):
    if "jk_sup" in acc:
        err = J @ K - np.eye(model.n)
        acc["jk_sup"] = np.maximum(acc["jk_sup"], np.sqrt(np.sum(err * err, axis=(-2, -1))))
    if i == N:
        return
    s = model.sigma(x)
    KS = K @ s
    if "z" in acc:
        acc["z"] += operator_norm(KS) ** 2 * dt
    if "gram" in acc:
        acc["gram"][:, interval_of[i]] += KS @ np.swapaxes(KS, -1, -2) * dt
    if "vc" in acc:
        acc["vc"] += np.einsum("...ai,...i->...a", KS, h.hdot[..., i, :]) * dt


def _flowgram_step(acc, fg, model, x, phi, dt, i):
    """G_{i+1} = Phi_i (G_i + a(X_i) dt) Phi_i*, so G at node t is
    sum_{j < t} (J_t K_j) a (J_t K_j)* dt without ever forming K.

    G is snapshotted at every break t_k, and the transfer flows
    J_{t_l} K_{t_k} between breaks are kept as running products.
    """
    G = fg["G"] + model.a(x) * dt
    fg["G"] = phi @ G @ np.swapaxes(phi, -1, -2)
    for k in fg["R"]:
        fg["R"][k] = phi @ fg["R"][k]
    l = fg["pos"].get(i + 1)
    if l is not None:
        acc["flowgram"][:, l] = fg["G"]
        for k, R in fg["R"].items():
            acc["flowgram_transfer"][:, k, l] = R
        fg["R"][l] = np.broadcast_to(np.eye(phi.shape[-1]), phi.shape).copy()


def _implicit_batch(model, x, J, K, nab, dB, dt, hdot, P):
    """Drift-implicit step y = x + b(y) dt + sigma dB for a batch of rows.

    Used where dt |Db| is beyond the explicit stability limit: there the
    explicit step amplifies differences between nearby paths, while the
    implicit one inherits the contraction of a monotone drift.  Rows whose
    damped Newton iteration stalls fall back to :func:`_implicit_step`; a
    row that fails there too comes back as NaN for the caller's safeguard.
    """
    S, n = x.shape
    c = x + np.einsum("...ij,...j->...i", model.sigma(x), dB)
    # warm start from the explicit predictor where it is admissible
    y = c + model.b(x) * dt
    bad = ~_ordered(y)
    y[bad] = x[bad]
    res = y - model.b(y) * dt - c
    scale = 1e-14 * (1.0 + np.linalg.norm(c, axis=-1))
    eye = np.eye(n)
    active = np.linalg.norm(res, axis=-1) > scale
    for _ in range(60):
        a = np.flatnonzero(active)
        if a.size == 0:
            break
        step = np.linalg.solve(eye - dt * model.db(y[a]), res[a][..., None])[..., 0]
        lam = np.ones(a.size)
        accepted = np.zeros(a.size, dtype=bool)
        r0 = np.linalg.norm(res[a], axis=-1)
        trial, r_trial = y[a].copy(), res[a].copy()
        for _ in range(45):
            todo = np.flatnonzero(~accepted)
            if todo.size == 0:
                break
            t = y[a[todo]] - lam[todo, None] * step[todo]
            ok = _ordered(t)
            rt = np.full_like(t, np.inf)
            if np.any(ok):
                rt[ok] = t[ok] - model.b(t[ok]) * dt - c[a[todo[ok]]]
            better = ok & (np.linalg.norm(rt, axis=-1) < r0[todo])
            trial[todo[better]], r_trial[todo[better]] = t[better], rt[better]
            accepted[todo[better]] = True
            lam[todo[~better]] *= 0.5
        y[a[accepted]], res[a[accepted]] = trial[accepted], r_trial[accepted]
        stalled = a[~accepted]
        active[stalled] = False
        active[a[accepted]] = np.linalg.norm(res[a[accepted]], axis=-1) > scale[a[accepted]]
    fallback = np.flatnonzero(np.linalg.norm(res, axis=-1) > scale)
    dm = np.einsum("...ij,...j->...i", P, dB)
    J_out = K_out = phi = nab_out = None
    if J is not None or nab is not None:
        M = eye - dt * model.db(y)
        phi = np.linalg.inv(M)
        J_out = None if J is None else phi @ J
        with np.errstate(over="ignore", invalid="ignore"):
            K_out = None if K is None else K @ M
    if nab is not None:
        nab_out = np.einsum("...ij,...j->...i", phi,
                            nab + dt * np.einsum("...ij,...j->...i", model.sigma(x), hdot))
    for r in fallback:
        one = _implicit_step(model, x[r], None if J is None else J[r], None if K is None else K[r],
                             None if nab is None else nab[r], dB[r], dt,
                             None if hdot is None else (hdot[r] if hdot.ndim == 2 else hdot), P[r])
        if one is None:
            # left unordered on purpose: the caller's safeguard takes over
            y[r] = np.nan
            continue
        y[r], dm[r] = one[0], one[4]
        if phi is not None:
            phi[r] = one[5]
        if J is not None:
            J_out[r], K_out[r] = one[1], one[2]
        if nab is not None:
            nab_out[r] = one[3]
    return y, J_out, K_out, nab_out, dm, phi


def _implicit_step(model, x, J, K, nab, dB, dt, hdot, P):
    """Drift-implicit step y = x + b(y) dt + sigma(x) dB by damped Newton.

    For a repulsive barrier drift the solution stays strictly ordered for
    any dt, so this step cannot be rejected.  Flows use the exact
    derivative (I - dt Db(y))^-1 of the implicit map (sigma is constant).
    """
    n = x.shape[-1]
    c = x + model.sigma(x) @ dB
    y = x.copy()
    res = y - model.b(y) * dt - c
    for _ in range(100):
        if np.linalg.norm(res) <= 1e-14 * (1.0 + np.linalg.norm(c)):
            break
        step = np.linalg.solve(np.eye(n) - dt * model.db(y), res)
        lam = 1.0
        while lam > 1e-12:
            trial = y - lam * step
            if _ordered(trial):
                r_trial = trial - model.b(trial) * dt - c
                if np.linalg.norm(r_trial) < np.linalg.norm(res):
                    break
            lam *= 0.5
        else:
            return None
        y, res = trial, r_trial
    else:
        return None
    M = np.eye(n) - dt * model.db(y)
    phi = np.linalg.inv(M)
    dm = P @ dB
    J = None if J is None else phi @ J
    with np.errstate(over="ignore", invalid="ignore"):
        K = None if K is None else K @ M
    if nab is not None:
        nab = phi @ (nab + dt * model.sigma(x) @ hdot)
    return y, J, K, nab, dm, phi


def _refine(stepper, driver, stream, step, x, J, K, nab, dB, dt, hdot):
    """Redo one rejected step of one path by recursive halving.

    The step is split in two by bridge bisection of its Brownian increment
    (so the coarse increment is preserved) and each half is taken as an
    ordinary tamed step; a half that is rejected again is halved again, up
    to MAX_HALVINGS levels.  The taming cap is proportional to the gap, so
    close to a collision halving alone need not help; a sub-interval still
    rejected at the deepest level is taken drift-implicitly.  Normals for
    the node at heap position k of the bisection tree come from a driver
    derived from (stream, step).

    Returns (x, J, K, nabla, dm, depth, phi, implicit_substeps).
    """
    d = dB.shape[-1]
    sub_driver = driver.child(stream, TAG_SAFEGUARD, step)
    model = stepper.model
    P = stepper.proj(x[None])[0]
    flows = J is not None
    stats = {"depth": 0, "implicit": 0}

    def advance(state, inc, sub_dt, depth, node):
        xs, Js, Ks, ns = state
        if depth > 0:
            out = stepper(xs[None], None if Js is None else Js[None], None if Ks is None else Ks[None],
                          None if ns is None else ns[None], inc[None], sub_dt, hdot)
            if _ordered(out[0])[0]:
                stats["depth"] = max(stats["depth"], depth)
                phi = None if out[6] is None else out[6][0]
                return ((out[0][0], None if out[1] is None else out[1][0],
                         None if out[2] is None else out[2][0], None if out[3] is None else out[3][0]),
                        out[4][0], phi)
        if depth == MAX_HALVINGS:
            imp = _implicit_step(model, xs, Js, Ks, ns, inc, sub_dt, hdot, P)
            if imp is None:
                raise StepRejectionError(step, int(stream))
            stats["depth"] = depth
            stats["implicit"] += 1
            return imp[:4], imp[4], imp[5] if flows else None
        z = sub_driver.normals([node], 0, 0, d)[0]
        left = 0.5 * inc + 0.5 * np.sqrt(sub_dt) * z
        right = inc - left
        s1, dm1, phi1 = advance(state, left, sub_dt / 2, depth + 1, 2 * node)
        s2, dm2, phi2 = advance(s1, right, sub_dt / 2, depth + 1, 2 * node + 1)
        return s2, dm1 + dm2, (phi2 @ phi1 if flows else None)

    (xs, Js, Ks, ns), dm, phi = advance((x, J, K, nab), dB, dt, 0, 1)
    return xs, Js, Ks, ns, dm, stats["depth"], phi, stats["implicit"]


def shift_simulate(model, grid, driver, x0, h, **kwargs):
    """Simulate the shifted paths w + h (increments dB_i + hdot_i dt)."""
    return simulate(model, grid, driver, x0, shift=h, **kwargs)


def dyson_safeguard(x, b, dt):
    """Tamed drift: |b| dt is capped at half the smallest gap. Returns (b, capped)."""
    return _tame(np.asarray(b, dtype=float), np.asarray(x, dtype=float), dt)


def write_path_csv(bundle, k, fh):
    """One row per node: t, x_1..x_n, dB_1..dB_d (increment into the node; 0 at t = 0)."""
    n, d = bundle.x.shape[-1], bundle.dB.shape[-1]
    header = ["t"] + [f"x_{j + 1}" for j in range(n)] + [f"dB_{j + 1}" for j in range(d)]
    fh.write(",".join(header) + "\n")
    dB = np.vstack([np.zeros(d), bundle.dB[k]])
    for i, t in enumerate(bundle.grid.times):
        row = [t, *bundle.x[k, i], *dB[i]]
        fh.write(",".join(repr(float(v)) for v in row) + "\n")
