"""Analytic gradients of the batch-mean NLL by backpropagation through time.

With z = (s - mu) / sigma the per-element NLL term is
``z + 2 softplus(-z) + log sigma`` and its partials are::

    d/ds     =  tanh(z/2) / sigma
    d/dmu    = -tanh(z/2) / sigma
    d/dsigma = (1 - z tanh(z/2)) / sigma

The determinant term contributes ``-T W^{-T}`` per sequence.
"""
from __future__ import annotations

import numpy as np

from .errors import NonFiniteGradient
from .matcore import RngStream, lu_factor
from .model import PARAM_NAMES, DropoutMask, ModelParams, batch_nll_terms, sigmoid


def backward(params: ModelParams, batch, mask: DropoutMask | None = None):
    """Return ``(mean NLL, gradients)`` for an N x T x D batch.

    ``mask`` is the dropout draw used for the initial-state network; the
    same mask must be reused if the caller re-evaluates the loss.
    """
    x = np.asarray(batch, dtype=np.float64)
    nll, tr, lu = batch_nll_terms(params, x, mask)
    n, t_len, _ = x.shape
    scale = 1.0 / n

    z = (tr.s - tr.mu) / tr.sigma
    th = np.tanh(0.5 * z)
    g_s = scale * th / tr.sigma
    g_mu = -g_s
    g_raw = scale * (1.0 - z * th) / tr.sigma * sigmoid(tr.raw_scale)

    g = {}
    w_inv = lu.inverse()
    g["W"] = -t_len * w_inv.T + np.einsum("nti,ntj->ij", g_s, x)
    g["W_mu"] = np.einsum("nti,ntk->ik", g_mu, tr.h)
    g["W_sigma"] = np.einsum("nti,ntk->ik", g_raw, tr.h)

    dh_out = g_mu @ params.W_mu + g_raw @ params.W_sigma
    h = tr.h
    g_ur = np.zeros_like(params.U_R)
    g_ui = np.zeros_like(params.U_I)
    g_b = np.zeros_like(params.b)
    carry = np.zeros((n, params.hidden_units))
    for t in range(t_len - 1, 0, -1):
        da = (dh_out[:, t] + carry) * (1.0 - h[:, t] ** 2)
        g_ur += da.T @ h[:, t - 1]
        g_ui += da.T @ x[:, t - 1]
        g_b += da.sum(axis=0)
        carry = da @ params.U_R
    g["U_R"], g["U_I"], g["b"] = g_ur, g_ui, g_b

    dz1 = (dh_out[:, 0] + carry) * (1.0 - h[:, 0] ** 2)
    g["mlp_w2"] = dz1.T @ tr.mlp_hidden
    g["mlp_b2"] = dz1.sum(axis=0)
    dpre = (dz1 @ params.mlp_w2) * (tr.mask / tr.keep) * sigmoid(tr.mlp_pre)
    first_in = x[:, 0] if params.leaky_first_step else np.zeros_like(x[:, 0])
    g["mlp_w1"] = dpre.T @ first_in
    g["mlp_b1"] = dpre.sum(axis=0)

    for name in PARAM_NAMES:
        if not np.all(np.isfinite(g[name])):
            raise NonFiniteGradient(name)
    return float(np.mean(nll)), params.with_arrays(g)


def logdet_gradient(w):
    """Gradient of ``log|det W|``; kept separate so it can be checked alone."""
    return lu_factor(w).inverse().T


def global_norm(grads: ModelParams):
    return float(np.sqrt(sum(np.sum(v * v) for v in grads.arrays().values())))


def clip_by_global_norm(grads: ModelParams, max_norm):
    if not max_norm or max_norm <= 0:
        return grads, global_norm(grads)
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return grads.with_arrays({k: v * factor for k, v in grads.items()}), norm


def reference_nll_terms(params: ModelParams, batch, mask: DropoutMask | None = None):
    """Loss terms of the batch-mean NLL, recomputed in extended precision.

    Written independently of ``forward_batch`` (explicit per-sequence time
    loop, own elimination for the determinant) so it can serve as the
    finite-difference oracle. Returns a flat long-double array whose sum is
    the batch-mean NLL.
    """
    ld = np.longdouble
    p = {k: np.asarray(v, dtype=ld) for k, v in params.items()}
    x = np.asarray(batch, dtype=ld)
    n, t_len, d = x.shape
    if mask is None:
        keep_mask = np.ones((n, params.mlp_units), dtype=ld)
        keep = ld(1)
    else:
        keep_mask = np.broadcast_to(np.asarray(mask.mask, dtype=ld), (n, params.mlp_units))
        keep = ld(mask.keep)

    a = p["W"].copy()
    logdet = ld(0)
    for k in range(d):
        piv = k + int(np.argmax(np.abs(a[k:, k])))
        a[[k, piv]] = a[[piv, k]]
        logdet += np.log(np.abs(a[k, k]))
        a[k + 1:] -= np.outer(a[k + 1:, k] / a[k, k], a[k])

    terms = [-t_len * logdet]
    floor = ld(params.sigma_floor)
    for i in range(n):
        x1 = x[i, 0] if params.leaky_first_step else np.zeros(d, dtype=ld)
        hid = np.log1p(np.exp(p["mlp_w1"] @ x1 + p["mlp_b1"])) * keep_mask[i] / keep
        h = np.tanh(p["mlp_w2"] @ hid + p["mlp_b2"])
        for t in range(t_len):
            if t > 0:
                h = np.tanh(p["U_R"] @ h + p["U_I"] @ x[i, t - 1] + p["b"])
            s = p["W"] @ x[i, t]
            mu = p["W_mu"] @ h
            sigma = np.log1p(np.exp(p["W_sigma"] @ h)) + floor
            z = (s - mu) / sigma
            logp = -z - 2 * np.log1p(np.exp(-z)) - np.log(sigma)
            terms.extend(-logp / n)
    return np.array(terms, dtype=ld)


def grad_check(params: ModelParams, batch, step=1e-6, tolerance=1e-5, *, mask=None,
               loss_fn=None, grad_fn=None, max_coords=5000, seed=0):
    """Compare analytic gradients against central finite differences.

    The step for coordinate theta is ``step * max(1, |theta|)``. Above
    ``max_coords`` coordinates a seeded random subset is checked. Returns a
    dict with ``max_rel_err``, ``worst_param``, ``worst_index`` and ``pass``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if loss_fn is None:
        def loss_fn(p, b):
            return reference_nll_terms(p, b, mask)
    if grad_fn is None:
        def grad_fn(p, b):
            return backward(p, b, mask)[1]

    analytic = grad_fn(params, batch)
    work = params.copy()
    coords = [(name, idx) for name, arr in work.items() for idx in np.ndindex(arr.shape)]
    if len(coords) > max_coords:
        pick = RngStream(seed, 7).permutation(len(coords))[:max_coords]
        coords = [coords[i] for i in sorted(pick)]

    worst = (0.0, None, None)
    per_param = {}
    for name, idx in coords:
        arr = getattr(work, name)
        orig = arr[idx]
        h = step * max(1.0, abs(orig))
        hi, lo = orig + h, orig - h
        arr[idx] = hi
        up = np.asarray(loss_fn(work, batch))
        arr[idx] = lo
        down = np.asarray(loss_fn(work, batch))
        arr[idx] = orig
        # difference term by term before summing to limit cancellation
        diff = np.atleast_1d(up - down).astype(np.longdouble)
        numeric = float(np.sum(np.sort(diff.ravel())) / (np.longdouble(hi) - np.longdouble(lo)))
        a = getattr(analytic, name)[idx]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        per_param[name] = max(per_param.get(name, 0.0), rel)
        if rel > worst[0]:
            worst = (rel, name, idx)
    return {"max_rel_err": worst[0], "worst_param": worst[1], "worst_index": worst[2],
            "per_param": per_param, "pass": bool(worst[0] <= tolerance)}
