"""Data preparation and the RMSProp training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import (ConfigError, DegreeTooHigh, NonFiniteGradient, NonFiniteUpdate,
                     SingularMatrix, SingularUnmixing, WindowTooLong, ZeroVariance)
from .grad import backward, clip_by_global_norm
from .matcore import RngStream, lu_factor
from .model import PARAM_NAMES, DropoutMask, ModelParams, init_params

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    n_components: int
    hidden_units: int = 100
    mlp_units: int = 100
    window: int = 20
    stride: int = 1
    batch_size: int = 100
    epochs: int = 500
    learning_rate: float = 1e-4
    l2_w: float = 0.002
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-8
    sigma_floor: float = 1e-4
    dropout_keep: float = 0.8
    seed: int = 0
    leaky_first_step: bool = True
    clip_norm: float = 5.0
    checkpoint_every: int = 50
    early_stop: bool = False
    early_stop_patience: int = 20
    early_stop_tol: float = 1e-6

    def __post_init__(self):
        if self.n_components < 1 or self.hidden_units < 1 or self.mlp_units < 1:
            raise ConfigError("n_components, hidden_units and mlp_units must be positive")
        if self.window < 1 or self.stride < 1 or self.batch_size < 1:
            raise ConfigError("window, stride and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.l2_w < 0:
            raise ConfigError("l2_w must be >= 0")
        if not 0 < self.dropout_keep <= 1:
            raise ConfigError("dropout_keep must be in (0, 1]")
        if not 0 <= self.rmsprop_decay < 1:
            raise ConfigError("rmsprop_decay must be in [0, 1)")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def field_types(cls):
        return {f.name: f.type for f in fields(cls)}


# -- preprocessing -----------------------------------------------------------

def detrend(series, degree=4):
    """Subtract the least-squares polynomial fit (per column for 2-D input)."""
    y = np.asarray(series, dtype=np.float64)
    length = y.shape[0]
    if degree < 0 or length <= degree:
        raise DegreeTooHigh(f"degree {degree} needs more than {degree} samples, got {length}")
    t = np.linspace(-1.0, 1.0, length) if length > 1 else np.zeros(1)
    basis = np.polynomial.polynomial.polyvander(t, degree)
    coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
    return y - basis @ coef


def variance_normalize(series):
    """Scale to unit sample variance (ddof=1), per column for 2-D input."""
    y = np.asarray(series, dtype=np.float64)
    std = y.std(axis=0, ddof=1)
    if np.any(std == 0) or not np.all(np.isfinite(std)):
        raise ZeroVariance("cannot normalize a constant series")
    return y / std


def window(seq, w, stride=1):
    """Stack the length-w slices starting at 0, stride, 2*stride, ..."""
    x = np.asarray(seq, dtype=np.float64)
    length = x.shape[0]
    if w < 1 or stride < 1:
        raise ConfigError("window and stride must be >= 1")
    if length < w:
        raise WindowTooLong(f"window {w} longer than sequence of length {length}")
    return np.stack([x[s:s + w] for s in window_starts(length, w, stride)])


def window_starts(length, w, stride=1):
    return np.arange(0, length - w + 1, stride)


@dataclass
class SequenceBatch:
    sequences: np.ndarray
    provenance: list[tuple[int, int]]

    def __post_init__(self):
        if len(self.provenance) != self.sequences.shape[0]:
            raise ValueError("provenance must have one entry per sequence")

    @classmethod
    def from_subjects(cls, subjects, w, stride=1):
        slices, prov = [], []
        for sid, data in enumerate(subjects):
            slices.append(window(data, w, stride))
            prov.extend((sid, int(s)) for s in window_starts(len(data), w, stride))
        return cls(np.concatenate(slices), prov)


# -- optimizer -----------------------------------------------------------------

@dataclass
class OptimizerState:
    """RMSProp mean-square accumulators (same container as the parameters)."""

    accum: ModelParams
    epoch: int = 0
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams):
        return cls(params.zeros_like())


def rmsprop_step(params: ModelParams, grads: ModelParams, opt: OptimizerState, cfg: TrainConfig):
    """One RMSProp update; the L2 penalty's gradient 2*l2_w*W is added to W first."""
    new_params, new_accum = {}, {}
    for name in PARAM_NAMES:
        theta = getattr(params, name)
        g = getattr(grads, name)
        if name == "W" and cfg.l2_w:
            g = g + 2.0 * cfg.l2_w * theta
        v = cfg.rmsprop_decay * getattr(opt.accum, name) + (1.0 - cfg.rmsprop_decay) * g * g
        updated = theta - cfg.learning_rate * g / (np.sqrt(v) + cfg.rmsprop_eps)
        if not np.all(np.isfinite(updated)):
            raise NonFiniteUpdate(name)
        new_params[name] = updated
        new_accum[name] = v
    return (params.with_arrays(new_params),
            OptimizerState(opt.accum.with_arrays(new_accum), opt.epoch, opt.step + 1))


# -- training loop -------------------------------------------------------------

@dataclass
class TrainState:
    params: ModelParams
    opt: OptimizerState
    history: list[float] = field(default_factory=list)

    @property
    def epoch(self):
        return self.opt.epoch


def init_state(cfg: TrainConfig) -> TrainState:
    rng = RngStream(cfg.seed).child("init")
    params = init_params(cfg.n_components, cfg.hidden_units, cfg.mlp_units, rng,
                         sigma_floor=cfg.sigma_floor, leaky_first_step=cfg.leaky_first_step,
                         dropout_keep=cfg.dropout_keep)
    return TrainState(params, OptimizerState.zeros(params))


def epoch_rng(cfg: TrainConfig, epoch: int) -> RngStream:
    """Shuffling and dropout stream for a 1-based epoch index."""
    return RngStream(cfg.seed).child(f"epoch/{epoch}")


def _check_identifiable(batch: SequenceBatch):
    rows = batch.sequences.reshape(-1, batch.sequences.shape[-1])
    centered = rows - rows.mean(axis=0)
    cov = centered.T @ centered / max(len(rows) - 1, 1)
    try:
        lu_factor(cov)
    except SingularMatrix:
        raise SingularUnmixing("data covariance is singular; the unmixing matrix is undetermined") from None


def run_epoch(state: TrainState, batch: SequenceBatch, cfg: TrainConfig):
    epoch = state.opt.epoch + 1
    rng = epoch_rng(cfg, epoch)
    order = rng.permutation(len(batch.provenance))
    params, opt = state.params, state.opt
    total = 0.0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        mask = DropoutMask.sample(params.mlp_units, params.dropout_keep, rng, batch=len(idx))
        loss, grads = backward(params, batch.sequences[idx], mask)
        grads, _ = clip_by_global_norm(grads, cfg.clip_norm)
        params, opt = rmsprop_step(params, grads, opt, cfg)
        total += loss * len(idx)
    opt = OptimizerState(opt.accum, epoch, opt.step)
    return TrainState(params, opt, state.history + [total / len(order)])


def fit(cfg: TrainConfig, dataset, sink=None, resume: TrainState | None = None, progress=None):
    """Train on a list of per-subject L x D arrays.

    ``sink(state)`` is called every ``cfg.checkpoint_every`` epochs and after
    the last one; whatever it returns (typically a path) is remembered and
    attached to a ``SingularUnmixing`` raised later. ``progress(epoch, nll)``
    receives the mean NLL of each finished epoch.

    Returns the final :class:`TrainState` (parameters, optimizer state and the
    per-epoch loss history).
    """
    subjects = [np.asarray(d, dtype=np.float64) for d in dataset]
    if not subjects:
        raise ConfigError("no subjects to train on")
    for s in subjects:
        if s.ndim != 2 or s.shape[1] != cfg.n_components:
            raise ConfigError(f"subject data has shape {s.shape}, expected L x {cfg.n_components}")
    batch = SequenceBatch.from_subjects(subjects, cfg.window, cfg.stride)

    state = resume if resume is not None else init_state(cfg)
    if state.params.n_components != cfg.n_components or state.params.hidden_units != cfg.hidden_units:
        raise ConfigError("resume state does not match the configuration")
    last = None
    if sink is not None and resume is None and cfg.epochs > 0:
        last = sink(state)

    try:
        if cfg.epochs > state.epoch:
            _check_identifiable(batch)
        while state.epoch < cfg.epochs:
            state = run_epoch(state, batch, cfg)
            nll = state.history[-1]
            if not np.isfinite(nll):
                raise NonFiniteGradient("loss", f"non-finite mean NLL at epoch {state.epoch}")
            if progress is not None:
                progress(state.epoch, nll)
            log.debug("epoch %d nll %.6f", state.epoch, nll)
            done = state.epoch == cfg.epochs or _should_stop(state.history, cfg)
            if sink is not None and (done or state.epoch % max(cfg.checkpoint_every, 1) == 0):
                last = sink(state)
            if done:
                break
    except SingularUnmixing as exc:
        exc.last_checkpoint = last
        raise
    return state


def _should_stop(history, cfg: TrainConfig):
    k = cfg.early_stop_patience
    if not cfg.early_stop or len(history) <= k:
        return False
    before, now = history[-k - 1], history[-1]
    return (before - now) / max(abs(before), 1e-300) < cfg.early_stop_tol
