import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedkper import nn
from fedkper.errors import DimensionError, NumericError, ValidationError

from conftest import random_instance, relative_error


def dense_oracle(params, x):
    """Triple-loop matrix products; no numpy broadcasting or matmul."""
    arrays = params.arrays()
    names = [n for n, s in params.manifest if len(s) == 2]
    h = [list(map(float, row)) for row in x]
    for li, wname in enumerate(names):
        w = arrays[wname]
        bname = wname.replace("weight", "bias")
        b = arrays.get(bname)
        out = []
        for row in h:
            new = []
            for j in range(w.shape[1]):
                acc = 0.0 if b is None else float(b[j])
                for i in range(w.shape[0]):
                    acc += row[i] * float(w[i, j])
                new.append(max(acc, 0.0) if li < len(names) - 1 else acc)
            out.append(new)
        h = out
    return np.array(h)


def test_model_params_manifest_invariant():
    manifest = nn.mlp_manifest([3, 4, 2])
    assert len(nn.ModelParams.zeros(manifest)) == 3 * 4 + 4 + 4 * 2 + 2
    with pytest.raises(DimensionError):
        nn.ModelParams(np.zeros(5), manifest)


def test_model_params_arithmetic_and_immutability():
    p = nn.init_mlp([3, 4, 2], seed=1)
    q = nn.init_mlp([3, 4, 2], seed=2)
    np.testing.assert_array_equal((p + q).values, p.values + q.values)
    np.testing.assert_array_equal((2.0 * p - q).values, 2.0 * p.values - q.values)
    with pytest.raises(ValueError):
        p.values[0] = 1.0
    with pytest.raises(DimensionError):
        p + nn.init_mlp([3, 5, 2], seed=1)


def test_init_is_glorot_and_deterministic():
    a = nn.init_mlp([16, 64, 8], seed=7)
    b = nn.init_mlp([16, 64, 8], seed=7)
    assert a.identical(b)
    w = a.arrays()["dense0.weight"]
    assert np.abs(w).max() <= math.sqrt(6 / (16 + 64))
    assert not a.arrays()["dense0.bias"].any()
    assert not a.identical(nn.init_mlp([16, 64, 8], seed=7, owner=3))


def test_forward_zero_weights_gives_zero_logits():
    p = nn.ModelParams.zeros(nn.mlp_manifest([4, 6, 3]))
    out = nn.forward(p, np.random.default_rng(0).standard_normal((5, 4)))
    assert out.shape == (5, 3)
    assert not out.any()


def test_forward_identity_layer():
    p = nn.ModelParams.from_arrays([("dense0.weight", np.eye(4))])
    np.testing.assert_array_equal(nn.forward(p, [[1.0, 0, 0, 0]]), [[1.0, 0, 0, 0]])


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_dense_oracle(seed):
    p = nn.init_mlp([5, 7, 3], seed)
    p = p.with_values(p.values + 0.2 * np.random.default_rng(seed).standard_normal(len(p)))
    x = np.random.default_rng(seed + 100).standard_normal((6, 5))
    np.testing.assert_allclose(nn.forward(p, x), dense_oracle(p, x), rtol=0, atol=1e-12)


def test_forward_shape_mismatch():
    p = nn.init_mlp([5, 3], 0)
    with pytest.raises(DimensionError):
        nn.forward(p, np.zeros((2, 4)))


def test_ce_uniform_logits():
    loss, grad = nn.ce_loss(np.zeros((3, 4)), [0, 1, 3])
    assert loss == pytest.approx(math.log(4), abs=1e-12)
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-15)


def test_ce_confident_limit_decreases_to_zero():
    losses = [nn.ce_loss(s * np.array([[1.0, 0, 0]]), [0])[0] for s in (1, 2, 5, 10, 50, 200)]
    assert all(a >= b for a, b in zip(losses, losses[1:]))
    assert losses[0] > losses[2] > losses[3]
    assert losses[-1] < 1e-15


@pytest.mark.parametrize("seed", range(10))
def test_ce_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    logits = 3 * rng.standard_normal((7, 5))
    labels = rng.integers(0, 5, 7)
    expected = 0.0
    for row, y in zip(logits, labels):
        denom = sum(math.exp(v) for v in row)
        expected -= math.log(math.exp(row[y]) / denom)
    loss, _ = nn.ce_loss(logits, labels)
    assert loss == pytest.approx(expected / 7, rel=0, abs=1e-12)


def test_ce_label_out_of_range():
    with pytest.raises(ValidationError):
        nn.ce_loss(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ValidationError):
        nn.ce_loss(np.zeros((2, 3)), [0, -1])


def test_kd_identity_is_zero():
    z = np.random.default_rng(0).standard_normal((4, 6))
    loss, grad = nn.kd_loss(z, z)
    assert loss == 0.0
    np.testing.assert_allclose(grad, 0.0, atol=1e-17)


def test_kd_uniform_teacher_direct_formula():
    student = np.array([[8.0, 0.0, 0.0, 0.0]])
    p = np.exp(student[0]) / np.exp(student[0]).sum()
    expected = sum(0.25 * math.log(0.25 / pc) for pc in p)
    loss, _ = nn.kd_loss(np.zeros((1, 4)), student)
    assert loss == pytest.approx(expected, abs=1e-12)


def test_kd_shape_mismatch():
    with pytest.raises(DimensionError):
        nn.kd_loss(np.zeros((2, 3)), np.zeros((2, 4)))


def _logit_fd(fn, z, eps=1e-6):
    g = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        up, down = z.copy(), z.copy()
        up[idx] += eps
        down[idx] -= eps
        g[idx] = (fn(up) - fn(down)) / (2 * eps)
    return g


@pytest.mark.parametrize("seed", range(5))
def test_logit_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    t, s = rng.standard_normal((2, 5, 4))
    y = rng.integers(0, 4, 5)
    _, g = nn.kd_loss(t, s)
    assert relative_error(g, _logit_fd(lambda z: nn.kd_loss(t, z)[0], s)) < 1e-4
    _, g = nn.ce_loss(s, y)
    assert relative_error(g, _logit_fd(lambda z: nn.ce_loss(z, y)[0], s)) < 1e-4


def test_adaptive_lambda_examples():
    assert nn.adaptive_lambda(0.5) == 2.0
    assert nn.adaptive_lambda(0.05) == 10.0
    assert nn.adaptive_lambda(0.0) == 10.0
    assert nn.adaptive_lambda(0.1) == 10.0
    with pytest.raises(ValidationError):
        nn.adaptive_lambda(-1.0)


@given(st.floats(0, 1e6, allow_nan=False), st.floats(0, 1e6, allow_nan=False))
def test_adaptive_lambda_monotone_and_bounded(a, b):
    lo, hi = sorted((a, b))
    assert nn.adaptive_lambda(lo) >= nn.adaptive_lambda(hi)
    assert 0 < nn.adaptive_lambda(hi) <= 10


def test_fedkper_loss_student_equals_global():
    s, _, x, y = random_instance(0)
    out = nn.fedkper_loss(s, s, x, y)
    assert out.kd == 0.0
    assert out.total == out.ce


def test_fedkper_loss_bad_teacher_small_lambda():
    s, _, x, y = random_instance(1)
    # teacher puts all mass on one class, wrong for most rows
    arrays = {k: v.copy() for k, v in nn.ModelParams.zeros(s.manifest).arrays().items()}
    arrays["dense2.bias"][np.bincount((y + 1) % 4, minlength=4).argmax()] = 200.0
    teacher = nn.ModelParams.from_arrays([(n, arrays[n]) for n, _ in s.manifest])
    out = nn.fedkper_loss(s, teacher, x, y)
    assert out.lam < 0.02
    assert abs(out.total - out.ce) <= out.lam * out.kd + 1e-12


def test_loss_breakdown_total_identity():
    s, g, x, y = random_instance(2)
    out = nn.local_objective(s, g, x, y, distill=True, mu=0.3)
    assert out.total == pytest.approx(out.ce + out.lam * out.kd + out.prox, rel=1e-12)
    assert 0 <= out.lam <= 10


def test_sgd_step_clipping():
    p = nn.ModelParams.zeros(nn.mlp_manifest([2, 1], bias=False))
    g = p.with_values([3.0, 0.0])
    np.testing.assert_allclose(nn.sgd_step(p, g, 1.0, 5.0).values, [-3.0, 0.0])
    g = p.with_values([6.0, 8.0])
    step = nn.sgd_step(p, g, 1.0, 5.0)
    assert np.linalg.norm(step.values) == pytest.approx(5.0, abs=1e-12)
    assert nn.sgd_step(p, p, 0.1, 5.0).identical(p)


def test_sgd_step_rejects_non_finite():
    p = nn.ModelParams.zeros(nn.mlp_manifest([2, 1], bias=False))
    with pytest.raises(NumericError):
        nn.sgd_step(p, p.with_values([np.nan, 0.0]), 0.1, 5.0)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=3, max_size=3),
    st.floats(1e-3, 100),
)
def test_sgd_effective_gradient_norm_bounded(gvals, max_norm):
    p = nn.ModelParams.zeros(nn.mlp_manifest([3, 1], bias=False))
    lr = 0.5
    stepped = nn.sgd_step(p, p.with_values(gvals), lr, max_norm)
    effective = -stepped.values / lr
    assert np.linalg.norm(effective) <= max_norm + 1e-9


def test_finite_diff_quadratic_and_linear():
    p = nn.ModelParams.from_arrays([("dense0.weight", np.array([[1.5, -2.0], [0.25, 3.0]]))])
    g = nn.finite_diff_grad(lambda q: 0.5 * float(q.values @ q.values), p)
    np.testing.assert_allclose(g.values, p.values, atol=1e-8)
    a = np.array([0.5, -1.0, 2.0, 3.0])
    g = nn.finite_diff_grad(lambda q: float(a @ q.values), p)
    np.testing.assert_allclose(g.values, a, atol=1e-9)
