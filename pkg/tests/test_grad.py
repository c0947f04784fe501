import mpmath as mp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rnnica.errors import NonFiniteGradient, SingularUnmixing
from rnnica.grad import (backward, clip_by_global_norm, global_norm, grad_check,
                         logdet_gradient, reference_nll_terms)
from rnnica.matcore import RngStream
from rnnica.model import DropoutMask, batch_nll, forward_batch, zero_params

from .test_model import random_params


def batch_for(seed, n, t, d):
    return np.random.default_rng(seed).standard_normal((n, t, d))


def test_single_step_identity_det_term():
    p = random_params(3, 4, 5, 1)
    p.W = np.eye(3)
    x = batch_for(1, 1, 1, 3)
    _, g = backward(p, x)
    # density part alone, rebuilt from the log-density partials
    tr = forward_batch(p, x)
    z = (tr.s - tr.mu) / tr.sigma
    g_s = np.tanh(z / 2) / tr.sigma
    density = np.einsum("nti,ntj->ij", g_s, x)
    assert np.allclose(g.W - density, -np.eye(3), atol=1e-14)


def test_zero_input_weights_gradient_from_density_only():
    p = random_params(3, 4, 5, 2)
    p.U_I = np.zeros_like(p.U_I)
    x = batch_for(2, 2, 4, 3)
    report = grad_check(p, x, tolerance=1e-5)
    assert report["per_param"]["U_I"] <= 1e-5


def test_reference_loss_matches_model():
    p = random_params(4, 5, 6, 3)
    x = batch_for(3, 3, 6, 4)
    assert float(np.sum(reference_nll_terms(p, x))) == pytest.approx(batch_nll(p, x), abs=1e-11)


@pytest.mark.parametrize("leaky", [True, False])
def test_backward_matches_finite_differences(leaky):
    p = random_params(6, 8, 7, 4, leaky_first_step=leaky)
    report = grad_check(p, batch_for(4, 2, 5, 6), step=1e-6, tolerance=1e-5)
    assert report["pass"], report


def test_backward_with_dropout_mask():
    p = random_params(3, 4, 6, 5)
    mask = DropoutMask.sample(6, 0.5, RngStream(5), batch=2)
    report = grad_check(p, batch_for(5, 2, 3, 3), mask=mask)
    assert report["pass"], report


def test_grad_check_quadratic_toy():
    p = random_params(2, 2, 2, 6)

    def loss(q, _):
        return np.concatenate([v.ravel() ** 2 for v in q.arrays().values()])

    def grad(q, _):
        return q.with_arrays({k: 2 * v for k, v in q.items()})

    report = grad_check(p, None, loss_fn=loss, grad_fn=grad)
    assert report["max_rel_err"] <= 1e-8 and report["pass"]


def test_grad_check_catches_corrupted_gradient():
    p = random_params(3, 4, 5, 7)
    x = batch_for(7, 2, 4, 3)

    def corrupted(q, b):
        _, g = backward(q, b)
        g.W_mu = g.W_mu * 1.1
        return g

    report = grad_check(p, x, grad_fn=corrupted)
    assert not report["pass"] and report["worst_param"] == "W_mu"


def test_grad_check_wide_model():
    p = random_params(10, 12, 12, 8)
    report = grad_check(p, batch_for(8, 1, 8, 10), tolerance=1e-4)
    assert report["pass"], report


def test_grad_check_subsamples_large_models():
    p = random_params(3, 4, 5, 9)
    report = grad_check(p, batch_for(9, 1, 3, 3), max_coords=20)
    assert report["pass"]


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        grad_check(random_params(2, 2, 2, 0), batch_for(0, 1, 2, 2), step=0)


def mp_log_abs_det(w):
    return mp.log(abs(mp.det(mp.matrix(w))))


@pytest.mark.parametrize("d,coords", [(3, None), (8, None), (20, 40)])
def test_logdet_gradient_identity(d, coords):
    mp.mp.dps = 50
    rng = np.random.default_rng(d)
    w = rng.standard_normal((d, d)) + d ** 0.5 * np.eye(d)
    analytic = logdet_gradient(w)
    cells = [(i, j) for i in range(d) for j in range(d)]
    if coords is not None:
        cells = [cells[k] for k in rng.permutation(len(cells))[:coords]]
    wm = [[mp.mpf(float(v)) for v in row] for row in w]
    h = mp.mpf("1e-20")
    for i, j in cells:
        up = [row[:] for row in wm]
        dn = [row[:] for row in wm]
        up[i][j] += h
        dn[i][j] -= h
        fd = float((mp_log_abs_det(up) - mp_log_abs_det(dn)) / (2 * h))
        assert abs(analytic[i, j] - fd) <= 1e-8 * max(abs(fd), 1e-300) + 1e-15


@given(st.integers(0, 10_000))
def test_gradient_is_linear_in_batch(seed):
    p = random_params(3, 4, 5, seed)
    x = batch_for(seed, 2, 4, 3)
    _, g2 = backward(p, x)
    _, ga = backward(p, x[:1])
    _, gb = backward(p, x[1:])
    for name, arr in g2.items():
        assert np.allclose(arr, 0.5 * (getattr(ga, name) + getattr(gb, name)), rtol=0, atol=1e-12)


def test_stationary_location_gradient_vanishes():
    p = random_params(3, 4, 5, 10)
    p.U_I = np.zeros_like(p.U_I)
    p.U_R = np.zeros_like(p.U_R)
    p.mlp_w1 = np.zeros_like(p.mlp_w1)
    p.mlp_w2 = np.zeros_like(p.mlp_w2)
    p.mlp_b2 = p.b.copy()
    mu = p.W_mu @ np.tanh(p.b)
    x_point = np.linalg.solve(p.W, mu)
    x = np.broadcast_to(x_point, (2, 5, 3)).copy()
    _, g = backward(p, x)
    assert np.max(np.abs(g.W_mu)) <= 1e-10


def test_backward_errors():
    with pytest.raises(SingularUnmixing):
        backward(zero_params(2, 3), batch_for(0, 1, 2, 2))
    p = random_params(2, 3, 3, 11)
    p.W = np.eye(2) * 1e300  # |z| overflows, so the scale-path gradients do too
    x = np.full((1, 3, 2), 1e10)
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NonFiniteGradient) as info:
        backward(p, x)
    assert info.value.param == "U_R"
    assert "U_R" in str(info.value)


def test_clip_by_global_norm():
    p = random_params(2, 3, 3, 12)
    g = p.with_arrays({k: np.full_like(v, 10.0) for k, v in p.items()})
    clipped, norm = clip_by_global_norm(g, 5.0)
    assert norm == pytest.approx(global_norm(g))
    assert global_norm(clipped) == pytest.approx(5.0, rel=1e-12)
    small = p.with_arrays({k: np.full_like(v, 1e-3) for k, v in p.items()})
    same, _ = clip_by_global_norm(small, 5.0)
    assert same is small
