"""Pathwise Malliavin objects on simulated bundles.

All functions work on a whole :class:`~degdiff.sde.PathBundle` and return one
value per path (leading axis).  Sums are left-point Ito sums on the grid.
"""

import numpy as np


def _per_path(arr, S, shape):
    arr = np.asarray(arr, dtype=float)
    if arr.shape == shape:
        return np.broadcast_to(arr, (S,) + shape)
    if arr.shape == (S,) + shape:
        return arr
    raise ValueError(f"expected shape {shape} or {(S,) + shape}, got {arr.shape}")


def dhat(bundle, t_index, tau_index):
    """Conditional derivative kernel J_tau K_t sigma(X_t), shape (S, n, d)."""
    if t_index > tau_index:
        raise ValueError("t_index must not exceed tau_index")
    s = bundle.model.sigma(bundle.x[:, t_index])
    return bundle.J_at(tau_index) @ bundle.K_at(t_index) @ s


def div_adapted(bundle, etadot):
    """Ito sum of (P(X_i) etadot_i, dB_i).

    ``etadot`` has shape (steps, d) or (S, steps, d) and must be adapted:
    entry i may only use information up to node i.  Since P is symmetric
    this equals sum (etadot_i, dm_i).
    """
    S, N, d = bundle.dm.shape
    eta = _per_path(etadot, S, (N, d))
    return np.einsum("sid,sid->s", eta, bundle.dm)


def conditional_wick(bundle, h):
    """exp(sum (P_i hdot_i, dB_i) - 1/2 sum |P_i hdot_i|^2 dt) per path."""
    P = bundle.projections(slice(0, -1))
    ph = np.einsum("sicd,id->sic", P, h.hdot)
    expo = np.einsum("sid,sid->s", ph, bundle.dB) - 0.5 * np.sum(ph * ph, axis=(1, 2)) * bundle.grid.dt
    return np.exp(expo)


def chaos_integrals(bundle, f1=None, f2=None):
    """First and second order iterated integrals with respect to m.

    Parameters
    ----------
    f1 : array (steps, d), optional
    f2 : array (steps, steps, d, d), optional
        Only entries with i < j are used.

    Returns
    -------
    dict with arrays ``I1`` and ``I2`` of shape (S,)
    """
    dm = bundle.dm
    S, N, d = dm.shape
    I1 = np.zeros(S) if f1 is None else np.einsum("id,sid->s", np.asarray(f1, dtype=float), dm)
    if f2 is None:
        I2 = np.zeros(S)
    else:
        f2 = np.asarray(f2, dtype=float)
        if f2.shape != (N, N, d, d):
            raise ValueError(f"f2 must have shape {(N, N, d, d)}")
        upper = np.triu(np.ones((N, N)), k=1)[:, :, None, None]
        I2 = np.einsum("ijab,sia,sjb->s", f2 * upper, dm, dm)
    return {"I1": I1, "I2": I2}


def cond_ito_integral_deterministic(bundle, udot):
    """Samples of sum (udot_i, dB_i) and of its conditional version sum (P_i udot_i, dB_i)."""
    udot = np.asarray(udot, dtype=float)
    lhs = np.einsum("id,sid->s", udot, bundle.dB)
    rhs = np.einsum("id,sid->s", udot, bundle.dm)
    return {"lhs_sample": lhs, "rhs_sample": rhs}


def terminal_integrand(bundle, grad_T):
    """sigma*(X_i) K_i* J_N* grad_T at every recorded node before N, shape (S, R, d).

    ``grad_T`` is the gradient of f at X_T, shape (S, n).  This is the
    conditional derivative density of F = f(X_T) at the recorded times.
    """
    N = bundle.grid.steps
    v = np.einsum("sba,sb->sa", bundle.J_at(N), grad_T)
    nodes = bundle.record[bundle.record < N]
    K = bundle.K[:, : len(nodes)]
    s = bundle.model.sigma(bundle.x[:, nodes])
    return np.einsum("srac,srab,sb->src", s, np.swapaxes(K, -1, -2), v)


def cylinder_covectors(bundle, grads, times_idx):
    """v_j = sum_{k >= j} J_{t_k}* grad_k for a cylinder over nodes ``times_idx``.

    ``grads`` has shape (S, m, n).  Returns (S, m, n).
    """
    out = np.zeros_like(grads)
    acc = np.zeros(grads[:, 0].shape)
    for j in range(len(times_idx) - 1, -1, -1):
        acc = acc + np.einsum("sba,sb->sa", bundle.J_at(times_idx[j]), grads[:, j])
        out[:, j] = acc
    return out


def dirichlet_energy(bundle, grads, times_idx):
    """Pathwise |P(X) grad-hat F|_H^2 for F = f(X_{t_1}, ..., X_{t_m}).

    Needs a bundle simulated with the ``gram`` accumulator split at the
    cylinder times.  The projection drops out because P sigma* = sigma*.
    """
    breaks = list(bundle.acc["gram_breaks"])
    if breaks != list(times_idx):
        raise ValueError("gram accumulator was split at different times")
    v = cylinder_covectors(bundle, grads, times_idx)
    G = bundle.acc["gram"][:, : len(times_idx)]
    return np.einsum("sja,sjab,sjb->s", v, G, v)


def ibp_samples(bundle, f, g, h):
    """Both sides of E[grad_h F G] = E[F (G delta(P h) - grad_h G)] for F = f(X_T), G = g(X_T).

    The bundle must carry the conditional derivative along the same h;
    delta(P h) is rebuilt from the stored projected increments.
    """
    if bundle.nabla is None:
        raise ValueError("bundle has no conditional derivative")
    N = bundle.grid.steps
    xT = bundle.x[:, -1]
    nab = bundle.nabla[:, bundle.slot(N)]
    F, G = f(xT), g(xT)
    dF = np.einsum("sa,sa->s", f.grad(xT), nab)
    dG = np.einsum("sa,sa->s", g.grad(xT), nab)
    delta = np.einsum("id,sid->s", h.hdot, bundle.dm)
    return {"lhs": dF * G, "rhs": F * (G * delta - dG)}



def flow_energy(bundle, grads, times_idx):
    """|P grad-hat F|_H^2 for a cylindrical F from the ``flowgram`` accumulator.

    Same quantity as :func:`dirichlet_energy` but never forms K, which
    overflows when J contracts strongly (singular repulsive drift):
    sum_k g_k* H_k g_k + 2 sum_{k<l} g_l* T_kl H_k g_k with H_k the Gram
    matrix in flow coordinates at t_k and T_kl = J_{t_l} K_{t_k}.
    """
    if list(bundle.acc["gram_breaks"]) != list(times_idx):
        raise ValueError("flowgram accumulator was split at different times")
    H = bundle.acc["flowgram"]
    T = bundle.acc["flowgram_transfer"]
    out = np.einsum("ska,skab,skb->s", grads, H, grads)
    m = len(times_idx)
    for k in range(m):
        Hg = np.einsum("sab,sb->sa", H[:, k], grads[:, k])
        for l in range(k + 1, m):
            out += 2 * np.einsum("sa,sab,sb->s", grads[:, l], T[:, k, l], Hg)
    return out
