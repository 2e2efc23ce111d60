"""Gradient checks for the closed op set, against central finite differences.

Each case builds the same scalar graph twice: once in float32 through the
tape (analytic backward), once in float64 forward-only for the numeric
oracle. Inputs are chosen away from kinks (relu at 0, norm clamp) so the
finite-difference estimate is valid.
"""

from __future__ import annotations

import numpy as np
import pytest

import sanf.autodiff as ad
from sanf.errors import ContractViolation, UsageError

EPS = 1e-3
TOL = 1e-4


def fd_grad(build, arrays, which):
    """Central finite differences of build(arrays)[1] w.r.t. arrays[which], in f64."""
    base = [np.asarray(a, dtype=np.float64) for a in arrays]
    g = np.zeros_like(base[which])
    flat = g.reshape(-1)
    src = base[which].reshape(-1)
    for i in range(src.size):
        keep = src[i]
        src[i] = keep + EPS
        hi = build([ad.Tensor(a) for a in base]).item()
        src[i] = keep - EPS
        lo = build([ad.Tensor(a) for a in base]).item()
        src[i] = keep
        flat[i] = (hi - lo) / (2 * EPS)
    return g


def check_all_grads(build, arrays):
    tensors = [ad.tensor(a, requires_grad=True, dtype=np.float32) for a in arrays]
    loss = build(tensors)
    ad.backward(loss, params=tensors)
    for which, t in enumerate(tensors):
        num = fd_grad(build, arrays, which)
        ana = t.grad.astype(np.float64)
        rel = np.abs(ana - num) / np.maximum(np.abs(num), 1.0)
        assert rel.max() < TOL, f"input {which}: max rel err {rel.max():.3g}"


def _rng():
    return np.random.default_rng(7)


def proj(t):
    """Reduce any tensor to a scalar through a fixed projection (keeps grads dense)."""
    r = np.random.default_rng(99)
    p = ad.constant(r.uniform(0.5, 1.5, size=t.shape), dtype=t.data.dtype)
    return ad.sum_all(ad.mul(t, p))


CASES = {
    "add": (lambda ts: proj(ad.add(ts[0], ts[1])), lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "add_const": (lambda ts: proj(ad.add_const(ts[0], 2.5)), lambda r: [r.normal(size=(5,))]),
    "scale": (lambda ts: proj(ad.scale(ts[0], -1.7)), lambda r: [r.normal(size=(4, 2))]),
    "mul": (lambda ts: proj(ad.mul(ts[0], ts[1])), lambda r: [r.normal(size=(3, 3)), r.normal(size=(3, 3))]),
    "matmul": (lambda ts: proj(ad.matmul(ts[0], ts[1])), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
    "matmul_tb": (
        lambda ts: proj(ad.matmul(ts[0], ts[1], transpose_b=True)),
        lambda r: [r.normal(size=(3, 4)), r.normal(size=(2, 4))],
    ),
    "add_bias": (lambda ts: proj(ad.add_bias(ts[0], ts[1])), lambda r: [r.normal(size=(4, 3)), r.normal(size=(3,))]),
    "relu": (lambda ts: proj(ad.relu(ts[0])), lambda r: [r.choice([-1, 1], size=12) * r.uniform(0.2, 1.5, size=12)]),
    "sigmoid": (lambda ts: proj(ad.sigmoid(ts[0])), lambda r: [r.normal(size=(6,))]),
    "exp": (lambda ts: proj(ad.exp(ts[0])), lambda r: [r.uniform(-1, 1, size=(2, 5))]),
    "sum_all": (lambda ts: ad.sum_all(ts[0]), lambda r: [r.normal(size=(3, 4))]),
    "sum_axis": (lambda ts: proj(ad.sum_axis(ts[0], 1)), lambda r: [r.normal(size=(3, 5))]),
    "mean_all": (lambda ts: ad.mean_all(ts[0]), lambda r: [r.normal(size=(4, 4))]),
    "mse": (lambda ts: ad.mse(ts[0], ts[1]), lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "reshape": (lambda ts: proj(ad.reshape(ts[0], (2, 6))), lambda r: [r.normal(size=(3, 4))]),
    "take_rows": (
        lambda ts: proj(ad.take_rows(ts[0], np.array([0, 2, 2, 1]))),
        lambda r: [r.normal(size=(4, 3))],
    ),
    "cumsum_exclusive": (lambda ts: proj(ad.cumsum_exclusive(ts[0])), lambda r: [r.normal(size=(3, 6))]),
    "weighted_sum": (
        lambda ts: proj(ad.weighted_sum(ts[0], ts[1])),
        lambda r: [r.uniform(0, 1, size=(3, 5)), r.normal(size=(3, 5, 2))],
    ),
    "outer": (lambda ts: proj(ad.outer(ts[0], ts[1])), lambda r: [r.normal(size=(4,)), r.normal(size=(3,))]),
    "row_normalize": (
        lambda ts: proj(ad.row_normalize(ts[0])),
        lambda r: [r.normal(size=(4, 3)) + np.sign(r.normal(size=(4, 3))) * 0.3],
    ),
    "sigma_to_alpha": (  # the exact composition used by the renderer
        lambda ts: proj(
            ad.mul(
                ad.exp(ad.scale(ad.cumsum_exclusive(ts[0]), -1.0)),
                ad.add_const(ad.scale(ad.exp(ad.scale(ts[0], -1.0)), -1.0), 1.0),
            )
        ),
        lambda r: [r.uniform(0.01, 2.0, size=(3, 6))],
    ),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradient_matches_finite_differences(name):
    build, make = CASES[name]
    check_all_grads(build, make(_rng()))


def test_grid_gather_gradient():
    r = _rng()
    values = r.normal(size=(27, 4))
    idx = r.integers(0, 27, size=(10, 8))
    w = r.dirichlet(np.ones(8), size=10)

    def build(ts):
        return proj(ad.grid_gather(ts[0], idx, w))

    check_all_grads(build, [values])


def test_grad_accumulates_across_branches():
    # x used twice: d/dx (x*x + 3x) = 2x + 3
    x = ad.tensor([2.0], requires_grad=True)
    loss = ad.sum_all(ad.add(ad.mul(x, x), ad.scale(x, 3.0)))
    ad.backward(loss)
    assert np.allclose(x.grad, [7.0])


def test_mse_backward_frozen_value():
    # mean squared error of a single element: d/dx (x - 0)^2 = 2x = 4 at x=2
    x = ad.tensor([2.0], requires_grad=True)
    loss = ad.mse(x, ad.constant([0.0]))
    ad.backward(loss)
    assert loss.item() == pytest.approx(4.0)
    assert np.allclose(x.grad, [4.0])


def test_unused_param_gets_zero_grad():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    unused = ad.tensor([5.0], requires_grad=True)
    ad.backward(ad.sum_all(x), params=[x, unused])
    assert np.allclose(unused.grad, [0.0])
    assert np.allclose(x.grad, [1.0, 1.0])


def test_backward_on_leaf_is_usage_error():
    with pytest.raises(UsageError):
        ad.backward(ad.tensor([1.0], requires_grad=True))


def test_backward_on_nonscalar_is_usage_error():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(UsageError):
        ad.backward(ad.add(x, x))


def test_shape_mismatch_is_contract_violation():
    a = ad.tensor(np.zeros((2, 3)))
    b = ad.tensor(np.zeros((3, 2)))
    with pytest.raises(ContractViolation):
        ad.add(a, b)
    with pytest.raises(ContractViolation):
        ad.matmul(a, ad.tensor(np.zeros((2, 2))))


def test_row_normalize_zero_row_is_safe():
    # zero row falls into the eps clamp: output 0, gradient g/eps, no NaN
    x = ad.tensor([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]], requires_grad=True)
    y = ad.row_normalize(x, eps=1e-12)
    assert np.all(np.isfinite(y.data))
    assert np.allclose(y.data[1], [0.6, 0.8, 0.0])
    ad.backward(ad.sum_all(y))
    assert np.all(np.isfinite(x.grad))


def test_cumsum_exclusive_values():
    x = ad.tensor([[1.0, 2.0, 3.0]])
    y = ad.cumsum_exclusive(x)
    assert np.allclose(y.data, [[0.0, 1.0, 3.0]])
