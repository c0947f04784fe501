"""Post-training analyses: sources, FNC, next-step Jacobians, community
grouping, regression and the significance tests used on the results."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

from .errors import (EmptyGraph, LengthMismatch, RankDeficient, SingularMatrix,
                     TooFewSamples, ZeroVariance)
from .matcore import RngStream, lu_factor
from .model import ModelParams, forward, log_abs_det_unmixing, sigmoid


def extract_sources(params: ModelParams, x_seq):
    """Apply the unmixing matrix to every time step of an L x D series."""
    log_abs_det_unmixing(params)
    return np.asarray(x_seq, dtype=np.float64) @ params.W.T


def pearson(a, b):
    """Pearson correlation of two 1-D series; NaN when either is constant."""
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    den = np.sqrt(np.dot(a, a) * np.dot(b, b))
    return float(np.dot(a, b) / den) if den > 0 else float("nan")


def corr_matrix(x):
    """Column-wise Pearson correlations of an L x D array (NaN rows/cols for
    constant columns, unit diagonal otherwise)."""
    x = np.asarray(x, dtype=np.float64)
    c = x - x.mean(axis=0)
    norms = np.sqrt(np.sum(c * c, axis=0))
    flat = norms == 0
    safe = np.where(flat, 1.0, norms)
    r = (c.T @ c) / np.outer(safe, safe)
    r = np.clip(0.5 * (r + r.T), -1.0, 1.0)
    np.fill_diagonal(r, 1.0)
    r[flat, :] = np.nan
    r[:, flat] = np.nan
    return r, flat


def fnc(sources):
    """Subject-averaged matrix of temporal cross-correlations between components.

    Components with zero variance in a subject are left out of that
    subject's contribution (with a warning).
    """
    if len(sources) == 0:
        raise TooFewSamples("fnc needs at least one subject")
    mats = []
    for i, s in enumerate(sources):
        r, flat = corr_matrix(s)
        if flat.any():
            warnings.warn(f"subject {i}: zero-variance components {np.flatnonzero(flat).tolist()} excluded",
                          RuntimeWarning, stacklevel=2)
        mats.append(r)
    stack = np.stack(mats)
    counts = np.sum(~np.isnan(stack), axis=0)
    if np.any(counts == 0):
        raise ZeroVariance("some component has zero variance in every subject")
    out = np.nansum(stack, axis=0) / counts
    np.fill_diagonal(out, 1.0)
    return 0.5 * (out + out.T)


def next_step_jacobian(params: ModelParams, x_seq):
    """Jacobians J(t)[i, j] = d mu_{i,t} / d s_{j,t-1} for t = 2..T.

    Returns ``(J, mean_abs)`` with J of shape (T-1) x D x D. Away from the
    first step only the input path through x_{t-1} exists, giving
    ``W_mu diag(1 - h_t^2) U_I W^{-1}``. At t = 2 with a leaky first step the
    initial state also depends on x_1, and that path is added.
    """
    x = np.asarray(x_seq, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("next_step_jacobian needs T >= 2")
    w_inv = log_abs_det_unmixing(params).inverse()
    tr = forward(params, x)
    gain = 1.0 - tr.h[1:] ** 2
    direct = np.einsum("ik,tk,kj->tij", params.W_mu, gain, params.U_I)
    if params.leaky_first_step:
        # d h_1 / d x_1 through the initial-state network (eval mode)
        d_h1 = ((1.0 - tr.h[0] ** 2)[:, None] * params.mlp_w2) @ (
            sigmoid(tr.mlp_pre)[:, None] * params.mlp_w1)
        direct[0] += params.W_mu @ (gain[0][:, None] * (params.U_R @ d_h1))
    jac = direct @ w_inv
    return jac, np.mean(np.abs(jac), axis=0)


def group_mean_abs_jacobian(params: ModelParams, sequences):
    """Mean of |J| over time and subjects, plus the per-subject signed means."""
    signed, absolute = [], []
    for x in sequences:
        jac, mean_abs = next_step_jacobian(params, x)
        signed.append(jac.mean(axis=0))
        absolute.append(mean_abs)
    return np.mean(absolute, axis=0), np.stack(signed)


def connectivity_similarity(jbar):
    """Pearson correlations between the column profiles of a D x D matrix."""
    j = np.asarray(jbar, dtype=np.float64)
    if not np.all(np.isfinite(j)):
        raise ValueError("connectivity matrix has non-finite entries")
    r, flat = corr_matrix(j)
    if flat.any():
        raise ZeroVariance(f"columns {np.flatnonzero(flat).tolist()} are constant")
    return r


def similarity_graph(rho):
    """Undirected weights for community detection: negatives clipped, no self-loops."""
    w = np.clip(np.asarray(rho, dtype=np.float64), 0.0, None)
    np.fill_diagonal(w, 0.0)
    return w


@dataclass
class ConnectivityGraph:
    nodes: list[int]
    labels: list[str]
    edges: list[tuple[int, int, float]]
    communities: np.ndarray | None = None

    @classmethod
    def from_matrix(cls, weights, labels=None, communities=None):
        """Edge i -> j carries weights[j, i]: source j at t-1 driving mean i at t."""
        w = np.asarray(weights, dtype=np.float64)
        if not np.all(np.isfinite(w)):
            raise ValueError("graph weights must be finite")
        n = w.shape[0]
        labels = list(labels) if labels is not None else [f"IC{i}" for i in range(n)]
        edges = [(j, i, float(w[i, j])) for i in range(n) for j in range(n)
                 if i != j and w[i, j] != 0.0]
        return cls(list(range(n)), labels, edges,
                   None if communities is None else np.asarray(communities, dtype=int))


# -- Louvain -------------------------------------------------------------------------------

def modularity(weights, labels):
    """Newman modularity of a partition of a symmetric nonnegative weight matrix."""
    a = np.asarray(weights, dtype=np.float64)
    two_m = a.sum()
    if two_m == 0:
        return 0.0
    k = a.sum(axis=1)
    labels = np.asarray(labels)
    q = 0.0
    for c in np.unique(labels):
        idx = labels == c
        q += a[np.ix_(idx, idx)].sum() / two_m - (k[idx].sum() / two_m) ** 2
    return float(q)


def _one_level(a, order):
    """Local moving phase on the (possibly aggregated) graph ``a``.

    Self-loops in ``a`` are internal weight of aggregated nodes.
    """
    n = a.shape[0]
    k = a.sum(axis=1)
    two_m = k.sum()
    comm = np.arange(n)
    tot = k.copy()
    improved = False
    moved = True
    while moved:
        moved = False
        for i in order:
            ci = comm[i]
            links = np.bincount(comm, weights=a[i], minlength=n)
            links[ci] -= a[i, i]
            tot[ci] -= k[i]
            gains = links - tot * k[i] / two_m
            best = ci
            best_gain = gains[ci]
            # candidates: communities of neighbours, in ascending id order
            for c in np.unique(comm[a[i] > 0]):
                if gains[c] > best_gain + 1e-12:
                    best, best_gain = c, gains[c]
            tot[best] += k[i]
            if best != ci:
                comm[i] = best
                moved = improved = True
    _, relabeled = np.unique(comm, return_inverse=True)
    return relabeled, improved


def _multilevel(a, rng, max_levels):
    membership = np.arange(a.shape[0])
    level_graph = a
    for _ in range(max_levels):
        size = level_graph.shape[0]
        order = rng.permutation(size) if rng is not None else np.arange(size)
        comm, improved = _one_level(level_graph, order)
        if not improved:
            break
        membership = comm[membership]
        onehot = np.zeros((size, comm.max() + 1))
        onehot[np.arange(size), comm] = 1.0
        level_graph = onehot.T @ level_graph @ onehot
    return membership


def _merge_communities(a, labels):
    """Greedily merge the pair of communities with the largest positive gain."""
    labels = labels.copy()
    k = a.sum(axis=1)
    two_m = k.sum()
    while True:
        ids = np.unique(labels)
        onehot = (labels[:, None] == ids[None, :]).astype(float)
        between = onehot.T @ a @ onehot
        tot = onehot.T @ k
        gain = 2.0 * (between / two_m - np.outer(tot, tot) / two_m ** 2)
        np.fill_diagonal(gain, -np.inf)
        i, j = np.unravel_index(np.argmax(gain), gain.shape)
        if len(ids) < 2 or gain[i, j] <= 1e-12:
            return labels
        labels[labels == ids[j]] = ids[i]


def _kernighan_lin(a, labels):
    """Tentatively move every node once (best move first, even if it lowers Q)
    and keep the best prefix of the sequence; repeat while that helps.

    Moving node i from community p to c changes modularity by
    ``(L_ic - L_ip) / m - k_i (tot_c - tot_p + k_i) / (2 m^2)``.
    """
    n = a.shape[0]
    k = a.sum(axis=1)
    m = k.sum() / 2.0
    _, comm = np.unique(labels, return_inverse=True)
    while True:
        cur = comm.copy()
        locked = np.zeros(n, dtype=bool)
        best_gain, total, best_comm = 1e-12, 0.0, None
        for _ in range(n):
            # column n_comm is an empty community
            n_comm = cur.max() + 2
            onehot = np.zeros((n, n_comm))
            onehot[np.arange(n), cur] = 1.0
            links = a @ onehot
            tot = k @ onehot
            own = cur
            gain = ((links - links[np.arange(n), own][:, None]) / m
                    - k[:, None] * (tot[None, :] - tot[own][:, None] + k[:, None]) / (2 * m * m))
            gain[np.arange(n), own] = -np.inf
            gain[locked] = -np.inf
            i, c = np.unravel_index(np.argmax(gain), gain.shape)
            if not np.isfinite(gain[i, c]):
                break
            total += gain[i, c]
            cur[i] = c
            _, cur = np.unique(cur, return_inverse=True)
            locked[i] = True
            if total > best_gain:
                best_gain, best_comm = total, cur.copy()
        if best_comm is None:
            return comm
        comm = best_comm


def louvain(weights, seed=None, restarts=8, max_levels=100, perturbations=16):
    """Multi-level greedy modularity maximisation.

    ``weights`` is a symmetric nonnegative matrix without self-loops. The
    first pass visits nodes in index order; ``restarts`` further passes use
    visiting orders drawn from ``seed`` (0 when None). Each pass is polished by
    node moves and community merges on the original graph, and the best
    partition wins (ties keep the earliest). The winner then goes through
    ``perturbations`` rounds of random reassignment of a few nodes followed by
    the same polishing, kept only when modularity improves. Returns ``(labels, Q)`` with
    labels contiguous from 0 in order of first appearance.
    """
    a = np.asarray(weights, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] == 0:
        raise EmptyGraph("graph has no nodes")
    if a.shape[0] != a.shape[1] or np.any(a < 0) or not np.allclose(a, a.T):
        raise ValueError("weights must be a square, symmetric, nonnegative matrix")
    if np.any(np.diag(a) != 0):
        raise ValueError("self-loops are not allowed")
    n = a.shape[0]
    if a.sum() == 0:
        return np.arange(n), 0.0

    rng = RngStream(0 if seed is None else seed).child("louvain")
    best_labels, best_q = None, -np.inf
    for attempt in range(restarts + 1):
        labels = _polish(a, _multilevel(a, rng if attempt else None, max_levels))
        q = modularity(a, labels)
        if q > best_q + 1e-12:
            best_labels, best_q = labels, q
    # iterated local search: scramble a few nodes of the incumbent and re-polish
    kick = rng.child("perturb")
    for _ in range(perturbations):
        labels = best_labels.copy()
        size = int(kick.integers(2, max(3, n // 3 + 1)))
        nodes = kick.permutation(n)[:size]
        labels[nodes] = kick.integers(0, labels.max() + 2, size)
        labels = _polish(a, labels)
        q = modularity(a, labels)
        if q > best_q + 1e-12:
            best_labels, best_q = labels, q
    labels = _canonical_labels(best_labels)
    return labels, modularity(a, labels)


def _polish(a, labels):
    while True:
        q_before = modularity(a, labels)
        moved, _ = _one_level_from(a, labels)
        labels = _kernighan_lin(a, _merge_communities(a, moved))
        if modularity(a, labels) <= q_before + 1e-12:
            return labels


def _one_level_from(a, labels):
    """Node-move phase on the original graph starting from ``labels``."""
    n = a.shape[0]
    k = a.sum(axis=1)
    two_m = k.sum()
    _, comm = np.unique(labels, return_inverse=True)
    tot = np.bincount(comm, weights=k, minlength=n)
    improved = moved = True
    improved = False
    while moved:
        moved = False
        for i in range(n):
            ci = comm[i]
            links = np.bincount(comm, weights=a[i], minlength=n)
            tot[ci] -= k[i]
            gains = links - tot * k[i] / two_m
            best, best_gain = ci, gains[ci]
            for c in np.unique(comm[a[i] > 0]):
                if gains[c] > best_gain + 1e-12:
                    best, best_gain = c, gains[c]
            tot[best] += k[i]
            if best != ci:
                comm[i] = best
                moved = improved = True
    return comm, improved


def _canonical_labels(labels):
    mapping = {}
    out = np.empty(len(labels), dtype=int)
    for i, c in enumerate(labels):
        out[i] = mapping.setdefault(int(c), len(mapping))
    return out


def communities_from_correlation(rho, seed=None):
    return louvain(similarity_graph(rho), seed=seed)


# -- regression and tests ----------------------------------------------------------------------

def regress(y, design):
    """Ordinary least squares via the normal equations.

    ``y`` may be a vector or an L x V matrix (one regression per column).
    Returns ``(betas, residual_variance)`` with residual variance RSS / (L - p).
    """
    x = np.asarray(design, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = x.shape
    if y.shape[0] != n:
        raise LengthMismatch(f"y has {y.shape[0]} rows, design has {n}")
    if n <= p:
        raise RankDeficient(f"need more observations ({n}) than regressors ({p})")
    gram = x.T @ x
    try:
        lu = lu_factor(gram)
    except SingularMatrix:
        raise RankDeficient("design matrix is rank deficient") from None
    if np.min(np.abs(np.diag(lu.lu))) <= 1e-12 * np.max(np.abs(np.diag(gram))):
        raise RankDeficient("design matrix is numerically rank deficient")
    betas = lu.solve(x.T @ y)
    resid = y - x @ betas
    return betas, np.sum(resid * resid, axis=0) / (n - p)


def design_with_intercept(*regressors):
    cols = [np.asarray(r, dtype=np.float64) for r in regressors]
    return np.column_stack([np.ones(len(cols[0]))] + cols)


@dataclass
class StatResult:
    statistic: np.ndarray | float
    df: np.ndarray | float
    pvalue: np.ndarray | float
    sign: np.ndarray | float


def t_sf2(t, df):
    """Two-sided tail probability P(|T| >= |t|) of Student's t."""
    t = np.asarray(t, dtype=np.float64)
    df = np.asarray(df, dtype=np.float64)
    p = betainc(df / 2.0, 0.5, df / (df + t * t))
    return np.clip(p, 0.0, 1.0)


def f_sf(f, d1, d2):
    """Upper tail probability of the F distribution."""
    f = np.asarray(f, dtype=np.float64)
    p = betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))
    return np.clip(p, 0.0, 1.0)


def _unwrap(x):
    x = np.asarray(x)
    return x.item() if x.ndim == 0 else x


def ttest_1samp(values, popmean=0.0):
    """One-sample t-test along axis 0 (columns are separate variables)."""
    v = np.asarray(values, dtype=np.float64)
    n = v.shape[0]
    if n < 2:
        raise TooFewSamples("one-sample t-test needs at least 2 values")
    diff = v.mean(axis=0) - popmean
    sd = v.std(axis=0, ddof=1)
    if np.any(sd == 0):
        raise ZeroVariance("sample has zero variance")
    t = diff / (sd / np.sqrt(n))
    df = np.full_like(t, n - 1.0)
    return StatResult(_unwrap(t), _unwrap(df), _unwrap(t_sf2(t, df)), _unwrap(np.sign(t)))


def ttest_2samp(a, b, equal_var=False):
    """Two-sample t-test along axis 0; Welch's unequal-variance form by default."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = a.shape[0], b.shape[0]
    if na < 2 or nb < 2:
        raise TooFewSamples("two-sample t-test needs at least 2 values per group")
    va, vb = a.var(axis=0, ddof=1), b.var(axis=0, ddof=1)
    diff = a.mean(axis=0) - b.mean(axis=0)
    if equal_var:
        df = np.asarray(na + nb - 2.0)
        pooled = ((na - 1) * va + (nb - 1) * vb) / df
        se2 = pooled * (1.0 / na + 1.0 / nb)
    else:
        qa, qb = va / na, vb / nb
        se2 = qa + qb
        with np.errstate(invalid="ignore", divide="ignore"):
            df = se2 ** 2 / (qa ** 2 / (na - 1) + qb ** 2 / (nb - 1))
    if np.any(se2 == 0):
        raise ZeroVariance("pooled variance is zero")
    t = diff / np.sqrt(se2)
    df = np.broadcast_to(df, np.shape(t)).astype(np.float64)
    return StatResult(_unwrap(t), _unwrap(df), _unwrap(t_sf2(t, df)), _unwrap(np.sign(t)))


def anova_1way(groups):
    """One-way ANOVA F test across groups (each an array, axis 0 = samples)."""
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    k = len(groups)
    if k < 2 or any(g.shape[0] < 2 for g in groups):
        raise TooFewSamples("ANOVA needs at least 2 groups with 2 samples each")
    n = sum(g.shape[0] for g in groups)
    grand = np.concatenate(groups).mean(axis=0)
    between = sum(g.shape[0] * (g.mean(axis=0) - grand) ** 2 for g in groups)
    within = sum(((g - g.mean(axis=0)) ** 2).sum(axis=0) for g in groups)
    if np.any(within == 0):
        raise ZeroVariance("within-group variance is zero")
    d1, d2 = k - 1.0, n - k * 1.0
    f = (between / d1) / (within / d2)
    df = np.broadcast_to(np.asarray([d1, d2]), np.shape(f) + (2,))
    return StatResult(_unwrap(f), _unwrap(df), _unwrap(f_sf(f, d1, d2)), _unwrap(np.ones_like(f)))


def fdr_bh(pvals, q=0.05):
    """Benjamini-Hochberg step-up. Returns ``(reject_mask, threshold)``, where
    threshold is the largest rejected p-value (0.0 if nothing is rejected)."""
    p = np.asarray(pvals, dtype=np.float64)
    flat = p.ravel()
    if np.any((flat < 0) | (flat > 1)) or np.any(np.isnan(flat)):
        raise ValueError("p-values must lie in [0, 1]")
    m = flat.size
    if m == 0:
        return np.zeros(p.shape, dtype=bool), 0.0
    order = np.argsort(flat, kind="stable")
    ranked = flat[order]
    ok = ranked <= q * np.arange(1, m + 1) / m
    reject = np.zeros(m, dtype=bool)
    if ok.any():
        last = np.flatnonzero(ok)[-1]
        reject[order[: last + 1]] = True
        threshold = float(ranked[last])
    else:
        threshold = 0.0
    return reject.reshape(p.shape), threshold


def state_correlation(traces, state_vecs):
    """Pearson r between every unit of each subject's trace and its state vector.

    ``traces`` is a list of T x U arrays and ``state_vecs`` a list of length-T
    vectors (state codes used as numbers). Returns a subjects x units array;
    flat units give NaN.
    """
    if len(traces) != len(state_vecs):
        raise LengthMismatch(f"{len(traces)} traces but {len(state_vecs)} state vectors")
    out = []
    for trace, states in zip(traces, state_vecs):
        u = np.asarray(trace, dtype=np.float64)
        s = np.asarray(states, dtype=np.float64)
        if u.ndim == 1:
            u = u[:, None]
        if u.shape[0] != s.shape[0]:
            raise LengthMismatch(f"trace length {u.shape[0]} != state vector length {s.shape[0]}")
        uc = u - u.mean(axis=0)
        sc = s - s.mean()
        den = np.sqrt(np.sum(uc * uc, axis=0) * np.dot(sc, sc))
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.where(den > 0, (uc * sc[:, None]).sum(axis=0) / np.where(den > 0, den, 1.0), np.nan)
        out.append(r)
    return np.array(out)


def model_traces(params: ModelParams, x_seq):
    """Full-sequence eval-mode outputs used for the state analyses."""
    tr = forward(params, x_seq)
    return {"sources": tr.s, "mu": tr.mu, "sigma": tr.sigma, "hidden": tr.h}
