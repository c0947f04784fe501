"""RNN-ICA model: a square unmixing matrix whose sources get logistic
densities with per-step location and scale predicted by a tanh RNN.

For an observed sequence x_1..x_T (rows of a T x D array)::

    s_t     = W x_t
    h_1     = tanh(A2 (mask * softplus(A1 x_1 + b1)) / keep + b2)
    h_t     = tanh(U_R h_{t-1} + U_I x_{t-1} + b)          t >= 2
    mu_t    = W_mu h_t
    sigma_t = softplus(W_sigma h_t) + sigma_floor
    NLL     = -(T log|det W| + sum_t sum_i log Logistic(s_ti; mu_ti, sigma_ti))

Everything is vectorized over a leading batch axis; single-sequence
helpers wrap the batched versions.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NonPositiveScale, SingularMatrix, SingularUnmixing
from .matcore import RngStream, lu_factor

PARAM_NAMES = ("W", "U_R", "U_I", "b", "W_mu", "W_sigma",
               "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    # tanh form is stable for any finite x
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ModelParams:
    """Learnable arrays plus the fixed hyperparameters that shape the model."""

    W: np.ndarray
    U_R: np.ndarray
    U_I: np.ndarray
    b: np.ndarray
    W_mu: np.ndarray
    W_sigma: np.ndarray
    mlp_w1: np.ndarray
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray
    mlp_b2: np.ndarray
    sigma_floor: float = field(default=1e-4, compare=False)
    leaky_first_step: bool = field(default=True, compare=False)
    dropout_keep: float = field(default=0.8, compare=False)

    @property
    def n_components(self):
        return self.W.shape[0]

    @property
    def hidden_units(self):
        return self.U_R.shape[0]

    @property
    def mlp_units(self):
        return self.mlp_w1.shape[0]

    def arrays(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def items(self):
        return self.arrays().items()

    def with_arrays(self, arrays):
        return replace(self, **arrays)

    def copy(self):
        return self.with_arrays({k: v.copy() for k, v in self.items()})

    def zeros_like(self):
        return self.with_arrays({k: np.zeros_like(v) for k, v in self.items()})

    def n_coordinates(self):
        return sum(v.size for v in self.arrays().values())

    def check_shapes(self):
        d, h, m = self.n_components, self.hidden_units, self.mlp_units
        expected = {"W": (d, d), "U_R": (h, h), "U_I": (h, d), "b": (h,),
                    "W_mu": (d, h), "W_sigma": (d, h), "mlp_w1": (m, d),
                    "mlp_b1": (m,), "mlp_w2": (h, m), "mlp_b2": (h,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")


# Gradients share the container; each array holds d(loss)/d(param).
Gradients = ModelParams


def zero_params(d, h, mlp_units=None, **hyper):
    m = h if mlp_units is None else mlp_units
    return ModelParams(
        W=np.zeros((d, d)), U_R=np.zeros((h, h)), U_I=np.zeros((h, d)),
        b=np.zeros(h), W_mu=np.zeros((d, h)), W_sigma=np.zeros((d, h)),
        mlp_w1=np.zeros((m, d)), mlp_b1=np.zeros(m),
        mlp_w2=np.zeros((h, m)), mlp_b2=np.zeros(h), **hyper)


def init_params(d, h, mlp_units, rng: RngStream, *, sigma_floor=1e-4,
                leaky_first_step=True, dropout_keep=0.8):
    """Near-identity unmixing, Glorot-uniform weights, zero biases."""

    def glorot(shape):
        a = np.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-a, a, shape)

    return ModelParams(
        W=np.eye(d) + rng.uniform(-0.01, 0.01, (d, d)),
        U_R=glorot((h, h)), U_I=glorot((h, d)), b=np.zeros(h),
        W_mu=glorot((d, h)), W_sigma=glorot((d, h)),
        mlp_w1=glorot((mlp_units, d)), mlp_b1=np.zeros(mlp_units),
        mlp_w2=glorot((h, mlp_units)), mlp_b2=np.zeros(h),
        sigma_floor=sigma_floor, leaky_first_step=leaky_first_step,
        dropout_keep=dropout_keep)


def logistic_log_density(s, mu, sigma):
    """Log density of the location-scale logistic distribution.

    Uses ``-|z| - 2 log1p(exp(-|z|))``, which equals
    ``-z - 2 log(1 + exp(-z))`` and never overflows.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(~(sigma > 0)):
        raise NonPositiveScale("logistic scale must be positive")
    z = np.abs((np.asarray(s, dtype=np.float64) - mu) / sigma)
    out = -z - 2.0 * np.log1p(np.exp(-z)) - np.log(sigma)
    return out if out.ndim else float(out)


def rnn_step(params: ModelParams, h_prev, x_prev):
    return np.tanh(h_prev @ params.U_R.T + x_prev @ params.U_I.T + params.b)


@dataclass
class DropoutMask:
    mask: np.ndarray
    keep: float

    @classmethod
    def ones(cls, units, batch=None):
        shape = (units,) if batch is None else (batch, units)
        return cls(np.ones(shape), 1.0)

    @classmethod
    def sample(cls, units, keep, rng: RngStream, batch=None):
        shape = (units,) if batch is None else (batch, units)
        if keep >= 1.0:
            return cls(np.ones(shape), 1.0)
        return cls((rng.random(shape) < keep).astype(np.float64), keep)

    def scaled(self):
        return self.mask / self.keep


def _first_input(params, x1):
    # non-leaky variant: the initial state never sees the value it predicts
    return x1 if params.leaky_first_step else np.zeros_like(x1)


def init_state(params: ModelParams, x1, mask: DropoutMask | None = None):
    x1 = np.asarray(x1, dtype=np.float64)
    if mask is None:
        mask = DropoutMask.ones(params.mlp_units)
    pre = _first_input(params, x1) @ params.mlp_w1.T + params.mlp_b1
    hidden = softplus(pre) * mask.scaled()
    return np.tanh(hidden @ params.mlp_w2.T + params.mlp_b2)


@dataclass
class ForwardTrace:
    """Intermediate values of a batched forward pass (leading axis = batch).

    ``logp`` holds per-element log-density terms, shape N x T x D.
    """

    x: np.ndarray
    s: np.ndarray
    h: np.ndarray
    mu: np.ndarray
    raw_scale: np.ndarray
    sigma: np.ndarray
    logp: np.ndarray
    mlp_pre: np.ndarray
    mlp_hidden: np.ndarray
    mask: np.ndarray
    keep: float

    def single(self, n=0):
        """Per-sequence view (drops the batch axis)."""
        return ForwardTrace(self.x[n], self.s[n], self.h[n], self.mu[n],
                            self.raw_scale[n], self.sigma[n], self.logp[n],
                            self.mlp_pre[n], self.mlp_hidden[n], self.mask[n], self.keep)


def forward_batch(params: ModelParams, x, mask: DropoutMask | None = None) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] < 1:
        raise ValueError(f"expected N x T x D input with T >= 1, got {x.shape}")
    n, t_len, _ = x.shape
    if mask is None:
        mask = DropoutMask.ones(params.mlp_units, batch=n)
    mask_arr = np.broadcast_to(mask.mask, (n, params.mlp_units))

    s = x @ params.W.T
    mlp_pre = _first_input(params, x[:, 0]) @ params.mlp_w1.T + params.mlp_b1
    mlp_hidden = softplus(mlp_pre) * (mask_arr / mask.keep)
    h = np.empty((n, t_len, params.hidden_units))
    h[:, 0] = np.tanh(mlp_hidden @ params.mlp_w2.T + params.mlp_b2)
    if t_len > 1:
        drive = x[:, :-1] @ params.U_I.T + params.b
        for t in range(1, t_len):
            h[:, t] = np.tanh(h[:, t - 1] @ params.U_R.T + drive[:, t - 1])
    mu = h @ params.W_mu.T
    raw = h @ params.W_sigma.T
    sigma = softplus(raw) + params.sigma_floor
    logp = logistic_log_density(s, mu, sigma)
    return ForwardTrace(x, s, h, mu, raw, sigma, logp, mlp_pre, mlp_hidden,
                        np.array(mask_arr), mask.keep)


def sample_masks(params: ModelParams, n, mode, rng: RngStream | None):
    if mode == "eval" or rng is None or params.dropout_keep >= 1.0:
        return DropoutMask.ones(params.mlp_units, batch=n)
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return DropoutMask.sample(params.mlp_units, params.dropout_keep, rng, batch=n)


def forward(params: ModelParams, x_seq, mode="eval", rng: RngStream | None = None) -> ForwardTrace:
    """Forward pass over one T x D sequence."""
    x = np.asarray(x_seq, dtype=np.float64)[None]
    return forward_batch(params, x, sample_masks(params, 1, mode, rng)).single(0)


def log_abs_det_unmixing(params: ModelParams):
    try:
        return lu_factor(params.W)
    except SingularMatrix as exc:
        raise SingularUnmixing(f"unmixing matrix is singular ({exc})") from None


def batch_nll_terms(params: ModelParams, x, mask=None):
    """Per-sequence NLL values for an N x T x D batch, plus the trace."""
    lu = log_abs_det_unmixing(params)
    trace = forward_batch(params, x, mask)
    t_len = trace.x.shape[1]
    nll = -(t_len * lu.log_abs_det() + trace.logp.sum(axis=(1, 2)))
    return nll, trace, lu


def sequence_nll(params: ModelParams, x_seq, mode="eval", rng: RngStream | None = None):
    x = np.asarray(x_seq, dtype=np.float64)[None]
    nll, _, _ = batch_nll_terms(params, x, sample_masks(params, 1, mode, rng))
    return float(nll[0])


def batch_nll(params: ModelParams, x, mask=None):
    """Mean sequence NLL over an N x T x D batch."""
    nll, _, _ = batch_nll_terms(params, x, mask)
    return float(np.mean(nll))
