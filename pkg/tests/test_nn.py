from __future__ import annotations

import numpy as np
import pytest

import sanf.autodiff as ad
from sanf.errors import ContractViolation
from sanf.nn import Adam, LrSchedule, Mlp, make_mlp


def test_mlp_forward_hand_value():
    # single layer, no activation on the output: [1,1] @ [[2,0],[0,2]] + [1,1] = [3,3]
    w = ad.tensor([[2.0, 0.0], [0.0, 2.0]], requires_grad=True)
    b = ad.tensor([1.0, 1.0], requires_grad=True)
    mlp = Mlp(input_dim=2, output_dim=2, weights=[w], biases=[b])
    out = mlp(ad.tensor([[1.0, 1.0]]))
    assert np.allclose(out.data, [[3.0, 3.0]])


def test_zero_layer_mlp_is_identity():
    mlp = Mlp(input_dim=3, output_dim=3)
    x = ad.tensor([[1.0, -2.0, 0.5]])
    assert np.array_equal(mlp(x).data, x.data)


def test_mlp_rejects_mismatched_chain():
    w1 = ad.tensor(np.zeros((2, 4), dtype=np.float32))
    w2 = ad.tensor(np.zeros((3, 2), dtype=np.float32))  # fan_in 3 != 4
    b1 = ad.tensor(np.zeros(4, dtype=np.float32))
    b2 = ad.tensor(np.zeros(2, dtype=np.float32))
    with pytest.raises(ContractViolation):
        Mlp(input_dim=2, output_dim=2, weights=[w1, w2], biases=[b1, b2])


def test_mlp_rejects_bad_output_dim():
    w = ad.tensor(np.zeros((2, 4), dtype=np.float32))
    b = ad.tensor(np.zeros(4, dtype=np.float32))
    with pytest.raises(ContractViolation):
        Mlp(input_dim=2, output_dim=3, weights=[w], biases=[b])


def test_make_mlp_xavier_bounds_and_zero_bias():
    rng = np.random.default_rng(3)
    mlp = make_mlp(8, [16, 16], 4, rng)
    dims = [(8, 16), (16, 16), (16, 4)]
    for (fan_in, fan_out), w, b in zip(dims, mlp.weights, mlp.biases):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        assert np.abs(w.data).max() <= limit
        assert np.all(b.data == 0)
    # same seed -> bitwise identical init
    again = make_mlp(8, [16, 16], 4, np.random.default_rng(3))
    for a, b2 in zip(mlp.params(), again.params()):
        assert np.array_equal(a.data, b2.data)


def test_relu_between_layers_not_after_last():
    rng = np.random.default_rng(0)
    mlp = make_mlp(2, [8], 2, rng)
    out = mlp(ad.tensor(rng.normal(size=(32, 2))))
    # output of the final linear layer can be negative; a trailing relu could not
    assert (out.data < 0).any()


def test_lr_schedule_endpoints():
    sched = LrSchedule(start=0.01, end=0.001, total_steps=100)
    assert sched.at(0) == pytest.approx(0.01)
    assert sched.at(100) == pytest.approx(0.001)
    assert sched.at(50) == pytest.approx(np.sqrt(0.01 * 0.001))
    mids = [sched.at(s) for s in range(101)]
    assert all(a >= b for a, b in zip(mids, mids[1:]))  # monotone decay


def test_adam_single_step_hand_value():
    # p=1, g=1, lr=0.1, defaults: mhat=1, vhat=1 -> p' = 1 - 0.1/(1+1e-8) ~= 0.9
    p = ad.tensor([1.0], requires_grad=True)
    p.grad = np.array([1.0], dtype=np.float32)
    opt = Adam([p], LrSchedule(0.1, 0.1, 10))
    opt.step()
    assert p.data[0] == pytest.approx(0.9, abs=1e-6)


def test_adam_minimizes_quadratic():
    p = ad.tensor(np.full(4, 5.0, dtype=np.float32), requires_grad=True)
    opt = Adam([p], LrSchedule(0.5, 0.05, 200))
    for _ in range(200):
        opt.zero_grad()
        loss = ad.mse(p, ad.constant(np.zeros(4)))
        ad.backward(loss, params=[p])
        opt.step()
    assert np.abs(p.data).max() < 0.05


def test_adam_is_deterministic():
    def run():
        rng = np.random.default_rng(11)
        mlp = make_mlp(3, [8], 1, rng)
        opt = Adam(mlp.params(), LrSchedule(0.01, 0.001, 50))
        x = ad.constant(rng.normal(size=(16, 3)))
        y = ad.constant(rng.normal(size=(16, 1)))
        for _ in range(50):
            opt.zero_grad()
            ad.backward(ad.mse(mlp(x), y), params=mlp.params())
            opt.step()
        return np.concatenate([q.data.reshape(-1) for q in mlp.params()])

    a, b = run(), run()
    assert np.array_equal(a, b)
