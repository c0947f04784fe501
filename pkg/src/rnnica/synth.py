"""Synthetic two-group cohorts with Markov-switching covariance states.

Each subject's neural series switches between K covariance patterns
following a group-specific Markov chain. Innovations are Laplace (the
sources must be non-Gaussian for ICA to identify them), each component is
convolved with a per-subject jittered double-gamma HRF, and the result is
mixed by a shared well-conditioned matrix plus Gaussian sensor noise.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import gamma

from .errors import (ConfigError, InvalidHrfParams, InvalidStochasticMatrix,
                     NotPositiveDefinite)
from .matcore import RngStream, condition_number, sqrtm_spd, sym_eig


@dataclass
class SimConfig:
    n_sources: int
    n_states: int = 5
    timepoints: int = 480
    tr: float = 2.0
    subjects_per_group: int = 10
    transition_a: list | None = None
    transition_b: list | None = None
    pi0: list | None = None
    covariances: list | None = None
    state_var_low: float = 0.25
    state_var_high: float = 4.0
    state_correlation: float = 0.5
    peak_delay: float = 6.0
    undershoot_delay: float = 16.0
    peak_disp: float = 1.0
    undershoot_disp: float = 1.0
    ratio: float = 1.0 / 6.0
    hrf_length: float = 32.0
    hrf_model: str = "double_gamma"
    peak_delay_range: list = field(default_factory=lambda: [5.0, 7.0])
    undershoot_delay_range: list = field(default_factory=lambda: [14.0, 18.0])
    noise_std: float = 0.1
    mixing_cond_max: float = 10.0
    identity_mixing: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_sources < 1 or self.n_states < 1 or self.timepoints < 1:
            raise ConfigError("n_sources, n_states and timepoints must be positive")
        if self.subjects_per_group < 0 or self.tr <= 0 or self.noise_std < 0:
            raise ConfigError("subjects_per_group >= 0, tr > 0 and noise_std >= 0 required")
        if self.hrf_model not in ("double_gamma", "delta"):
            raise ConfigError("hrf_model must be 'double_gamma' or 'delta'")
        if self.mixing_cond_max < 1:
            raise ConfigError("mixing_cond_max must be >= 1")

    def to_dict(self):
        return asdict(self)

    def transitions(self):
        k = self.n_states
        a = default_transition(k, "A") if self.transition_a is None else np.asarray(self.transition_a, float)
        b = default_transition(k, "B") if self.transition_b is None else np.asarray(self.transition_b, float)
        for name, p in (("transition_a", a), ("transition_b", b)):
            check_stochastic(p, k, name)
        return a, b

    def initial_distribution(self):
        k = self.n_states
        pi0 = np.full(k, 1.0 / k) if self.pi0 is None else np.asarray(self.pi0, float)
        if pi0.shape != (k,) or np.any(pi0 < 0) or abs(pi0.sum() - 1.0) > 1e-12:
            raise InvalidStochasticMatrix("pi0 must be a length-K probability vector")
        return pi0

    def state_covariances(self):
        k, m = self.n_states, self.n_sources
        if self.covariances is None:
            covs = default_covariances(k, m, RngStream(self.seed).child("covariances"),
                                       self.state_var_low, self.state_var_high,
                                       self.state_correlation)
        else:
            covs = [np.asarray(c, float) for c in self.covariances]
        if len(covs) != k or any(c.shape != (m, m) for c in covs):
            raise ConfigError(f"need {k} covariance matrices of shape {m}x{m}")
        for c in covs:
            check_spd(c)
        return covs


def default_transition(k, group):
    """Stand-in chains: group A switches often, group B is sticky."""
    if k == 1:
        return np.ones((1, 1))
    if group == "A":
        p = np.full((k, k), 0.1)
        np.fill_diagonal(p, 1.0 - 0.1 * (k - 1))
        if p[0, 0] < 0:
            p = np.full((k, k), 1.0 / k)
    else:
        p = np.full((k, k), 0.1 / (k - 1))
        np.fill_diagonal(p, 0.9)
    return p


def default_covariances(k, m, rng: RngStream, var_low=0.25, var_high=4.0, rho=0.5):
    """State k scales a random +/-rho correlation block by a variance level
    that grows geometrically from var_low (state 1) to var_high (state K)."""
    covs = []
    for i in range(k):
        level = var_low if k == 1 else var_low * (var_high / var_low) ** (i / (k - 1))
        members = rng.permutation(m)[: max(2, m // 2)] if m > 1 else np.arange(m)
        u = np.zeros(m)
        u[members] = np.where(rng.random(len(members)) < 0.5, -1.0, 1.0)
        corr = np.eye(m) + rho * (np.outer(u, u) - np.diag(u * u))
        covs.append(level * corr)
    return covs


def check_stochastic(p, k, name="P"):
    p = np.asarray(p, float)
    if p.shape != (k, k) or np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-12):
        raise InvalidStochasticMatrix(f"{name} must be a {k}x{k} row-stochastic matrix")


def check_spd(c):
    values, _ = sym_eig(c)
    if values[-1] <= 1e-8:
        raise NotPositiveDefinite(f"covariance has minimum eigenvalue {values[-1]:.3g}")


def sample_state_sequence(p, pi0, t_len, rng: RngStream):
    """Markov chain draw; states are coded 1..K."""
    p = np.asarray(p, float)
    pi0 = np.asarray(pi0, float)
    k = len(pi0)
    check_stochastic(p, k)
    if np.any(pi0 < 0) or abs(pi0.sum() - 1.0) > 1e-12:
        raise InvalidStochasticMatrix("pi0 must be a probability vector")
    # inverse-CDF sampling on one uniform per step
    cum = np.cumsum(p, axis=1)
    cum[:, -1] = 1.0
    u = rng.random(t_len)
    states = np.empty(t_len, dtype=np.int64)
    c0 = np.cumsum(pi0)
    c0[-1] = 1.0
    cur = int(np.searchsorted(c0, u[0], side="right"))
    states[0] = cur
    for t in range(1, t_len):
        cur = int(np.searchsorted(cum[cur], u[t], side="right"))
        states[t] = cur
    return states + 1


def generate_sources(states, covariances, rng: RngStream):
    """Laplace innovations (unit variance) colored by the active state's covariance."""
    states = np.asarray(states)
    covs = [np.asarray(c, float) for c in covariances]
    if states.min() < 1 or states.max() > len(covs):
        raise ConfigError("state codes must lie in 1..K")
    for c in covs:
        check_spd(c)
    roots = np.stack([sqrtm_spd(c) for c in covs])
    m = covs[0].shape[0]
    z = rng.laplace(1.0 / np.sqrt(2.0), (len(states), m))
    return np.einsum("tij,tj->ti", roots[states - 1], z)


def hrf_kernel(peak_delay=6.0, undershoot_delay=16.0, peak_disp=1.0, undershoot_disp=1.0,
               ratio=1.0 / 6.0, tr=2.0, length=16):
    """Double-gamma HRF sampled at 0, TR, 2TR, ... and scaled to unit peak."""
    if min(peak_delay, undershoot_delay, peak_disp, undershoot_disp, tr) <= 0 or ratio < 0 or length < 1:
        raise InvalidHrfParams("HRF delays, dispersions and TR must be positive, ratio >= 0")
    t = np.arange(length) * tr
    k = (gamma.pdf(t, peak_delay / peak_disp, scale=peak_disp)
         - ratio * gamma.pdf(t, undershoot_delay / undershoot_disp, scale=undershoot_disp))
    peak = np.max(np.abs(k))
    if peak == 0:
        raise InvalidHrfParams("HRF kernel is identically zero on this grid")
    return k / peak


def convolve_hrf(series, kernel):
    """Causal convolution of each column, truncated to the input length."""
    x = np.asarray(series, float)
    out = np.empty_like(x)
    for j in range(x.shape[1]):
        out[:, j] = np.convolve(x[:, j], kernel)[: len(x)]
    return out


def draw_mixing(m, cond_max, rng: RngStream, max_tries=10000):
    """Gaussian matrix, rejection-sampled until its condition number <= cond_max.

    Every 50 rejections the proposal is shifted toward the identity so the
    loop terminates for large m or tight bounds.
    """
    for attempt in range(max_tries):
        shift = 0.1 * (attempt // 50)
        cand = rng.normal((m, m)) / np.sqrt(m) + shift * np.eye(m)
        if condition_number(cand) <= cond_max:
            return cand
    raise ConfigError(f"could not draw a mixing matrix with condition number <= {cond_max}")


@dataclass
class GroundTruth:
    states: list
    sources: list
    bold: list
    labels: np.ndarray
    mixing: np.ndarray
    hrf_params: np.ndarray
    config: SimConfig


def simulate_subject(cfg: SimConfig, p, pi0, covs, mixing, rng: RngStream):
    states = sample_state_sequence(p, pi0, cfg.timepoints, rng.child("states"))
    neural = generate_sources(states, covs, rng.child("sources"))
    jit = rng.child("hrf")
    pd = jit.uniform(*cfg.peak_delay_range)
    ud = jit.uniform(*cfg.undershoot_delay_range)
    if cfg.hrf_model == "delta":
        kernel = np.ones(1)
    else:
        length = max(1, int(round(cfg.hrf_length / cfg.tr)))
        kernel = hrf_kernel(pd, ud, cfg.peak_disp, cfg.undershoot_disp, cfg.ratio, cfg.tr, length)
    bold = convolve_hrf(neural, kernel)
    noise = cfg.noise_std * rng.child("noise").normal(bold.shape) if cfg.noise_std else 0.0
    obs = bold @ mixing.T + noise
    return obs, states, neural, bold, (pd, ud)


def simulate_cohort(cfg: SimConfig):
    """Simulate ``subjects_per_group`` subjects in each of two groups.

    Subjects of group A (label 0) come first, then group B (label 1).
    Returns ``(observations, truth)`` where ``observations`` is a list of
    timepoints x n_sources arrays.
    """
    p_a, p_b = cfg.transitions()
    pi0 = cfg.initial_distribution()
    covs = cfg.state_covariances()
    root = RngStream(cfg.seed)
    if cfg.identity_mixing:
        mixing = np.eye(cfg.n_sources)
    else:
        mixing = draw_mixing(cfg.n_sources, cfg.mixing_cond_max, root.child("mixing"))

    obs, states, sources, bolds, hrf = [], [], [], [], []
    labels = np.repeat([0, 1], cfg.subjects_per_group)
    for i, label in enumerate(labels):
        p = p_a if label == 0 else p_b
        x, s, e, b, h = simulate_subject(cfg, p, pi0, covs, mixing, root.child(f"subject/{i}"))
        obs.append(x)
        states.append(s)
        sources.append(e)
        bolds.append(b)
        hrf.append(h)
    truth = GroundTruth(states, sources, bolds, labels, mixing, np.array(hrf), cfg)
    return obs, truth
