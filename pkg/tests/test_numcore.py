import numpy as np
import pytest

from lacework.errors import ContractViolation, TrainingDivergence
from lacework.numcore import Mlp, SeededRng, param_count
from lacework.numcore import autodiff as ad

# frozen from a reference run of this implementation; forward must stay
# bit-stable for seed 20260810, widths [3, 4, 2], x = [0.25, -0.5, 1.0]
GOLDEN_FORWARD = bytes.fromhex("c0e91c3d9561993d")


def test_param_count_matches_layout():
    assert param_count([5, 8, 3]) == 5 * 8 + 8 + 8 * 3 + 3
    net = Mlp([5, 8, 3], SeededRng(0))
    assert net.params.shape == (param_count([5, 8, 3]),)


def test_forward_identity_linear_layer():
    net = Mlp([2, 2], params=np.zeros(6, dtype=np.float32))
    w_sl, _ = net.layer_slices()[0]
    net.params[w_sl] = np.eye(2, dtype=np.float32).ravel()
    out = net.forward(np.array([1.0, 2.0], dtype=np.float32))
    assert np.array_equal(out, np.array([1.0, 2.0], dtype=np.float32))


def test_forward_zero_params_zero_output():
    net = Mlp([4, 8, 3], params=np.zeros(param_count([4, 8, 3]), dtype=np.float32))
    x = SeededRng(1).normal((5, 4))
    assert np.array_equal(net.forward(x), np.zeros((5, 3), dtype=np.float32))


def test_forward_golden_value_bit_stable():
    net = Mlp([3, 4, 2], SeededRng(20260810))
    x = np.array([0.25, -0.5, 1.0], dtype=np.float32)
    assert net.forward(x).astype("<f4").tobytes() == GOLDEN_FORWARD


def test_forward_shape_mismatch_rejected():
    net = Mlp([3, 4, 2], SeededRng(0))
    with pytest.raises(ContractViolation):
        net.forward(np.zeros((2, 5), dtype=np.float32))


def test_grad_of_half_norm_squared_is_theta():
    net = Mlp([5, 8, 3], SeededRng(2))
    pl = net.param_leaf()
    loss = ad.scale(ad.sum_all(ad.square(pl)), 0.5)
    (g,) = ad.grad(loss, [pl])
    np.testing.assert_allclose(g, net.params, rtol=1e-6)


def test_grad_of_constant_loss_is_zero():
    net = Mlp([5, 8, 3], SeededRng(2))
    pl = net.param_leaf()
    loss = ad.mean_all(ad.square(ad.leaf(np.ones(4, dtype=np.float32))))
    grads = ad.grad(loss, [pl])
    assert np.array_equal(grads[0], np.zeros_like(net.params))


def test_backward_rejects_nonscalar_loss():
    with pytest.raises(ContractViolation):
        ad.backward(ad.leaf(np.ones(3, dtype=np.float32)))


def test_gradient_check_mse_small_net():
    rng = SeededRng(3)
    net = Mlp([4, 6, 3], rng)
    x = rng.normal((5, 4))
    t = rng.normal((5, 3))

    def build(params):
        pred = net.forward_graph(ad.leaf(x.astype(params.dtype)), params)
        return ad.mse(pred, ad.leaf(t.astype(params.dtype)))

    assert ad.gradient_check(build, net.params) <= 1e-3


def test_gradient_check_cross_entropy():
    rng = SeededRng(4)
    net = Mlp([4, 6, 5], rng)
    x = rng.normal((3, 4))
    probs = np.abs(rng.normal((3, 5))) + 0.1
    probs = (probs / probs.sum(-1, keepdims=True)).astype(np.float32)

    def build(params):
        logits = net.forward_graph(ad.leaf(x.astype(params.dtype)), params)
        return ad.cross_entropy(logits, ad.leaf(probs.astype(params.dtype)))

    assert ad.gradient_check(build, net.params) <= 1e-3


def test_adam_zero_gradient_keeps_parameters():
    net = Mlp([3, 3], SeededRng(5))
    before = net.params.copy()
    net.adam_step(np.zeros_like(before), lr=0.1)
    assert np.array_equal(net.params, before)


def test_adam_first_step_closed_form():
    net = Mlp([2, 2], SeededRng(6))
    g = np.array([0.5, -0.25, 0.1, 0.0, 1.0, -1.0], dtype=np.float32)
    before = net.params.copy()
    net.adam_step(g, lr=0.01)
    expected = before - 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(net.params, expected, atol=1e-7)


def test_adam_two_identical_gradients_match_recurrence():
    net = Mlp([2, 2], SeededRng(7))
    g = np.array([0.3, -0.2, 0.05, 0.4, -0.6, 0.1], dtype=np.float32)
    net.adam_step(g, lr=0.01)
    net.adam_step(g, lr=0.01)
    # moments after two identical gradients
    m = (0.9 * (0.1 * g) + 0.1 * g).astype(np.float32)
    v = (0.999 * (0.001 * g * g) + 0.001 * g * g).astype(np.float32)
    np.testing.assert_allclose(net.m, m, rtol=1e-5)
    np.testing.assert_allclose(net.v, v, rtol=1e-5)
    assert net.step_count == 2


def test_adam_rejects_nonfinite_gradient():
    net = Mlp([2, 2], SeededRng(8))
    g = np.full(6, np.nan, dtype=np.float32)
    with pytest.raises(TrainingDivergence):
        net.adam_step(g, lr=0.01, where="unit test")


def test_training_determinism_same_seed_same_params():
    def train(seed):
        r = SeededRng(seed)
        net = Mlp([5, 16, 3], r.split("init"))
        data = r.split("data")
        for _ in range(40):
            x = data.normal((8, 5))
            t = data.normal((8, 3))
            pl = net.param_leaf()
            loss = ad.mse(net.forward_graph(ad.leaf(x), pl), ad.leaf(t))
            (g,) = ad.grad(loss, [pl])
            net.adam_step(g, 3e-4)
        return net.params

    assert np.array_equal(train(11), train(11))


def test_checkpoint_roundtrip(tmp_path):
    net = Mlp([5, 8, 3], SeededRng(9))
    path = tmp_path / "net.lwnc"
    net.save(path)
    loaded = Mlp.load(path)
    assert loaded.widths == net.widths
    assert np.array_equal(loaded.params, net.params)
    raw = path.read_bytes()
    assert raw[:4] == b"LWNC"
    assert int.from_bytes(raw[4:8], "little") == 1


def test_checkpoint_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.lwnc"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(ContractViolation):
        Mlp.load(path)


def test_polyak_update_formula():
    a = Mlp([3, 3], SeededRng(10))
    b = Mlp([3, 3], SeededRng(11))
    expected = 0.995 * a.params + 0.005 * b.params
    a.polyak_from(b, 0.005)
    np.testing.assert_allclose(a.params, expected.astype(np.float32), atol=1e-7)


def test_rng_reproducible_and_splittable():
    a = SeededRng(42).normal((5,))
    b = SeededRng(42).normal((5,))
    assert np.array_equal(a, b)
    child1 = SeededRng(42).split("x", 1)
    child2 = SeededRng(42).split("x", 2)
    assert not np.array_equal(child1.normal((5,)), child2.normal((5,)))
    # splitting does not consume draws from the parent
    parent = SeededRng(42)
    parent.split("anything")
    assert np.array_equal(parent.normal((5,)), SeededRng(42).normal((5,)))


def test_clip_op_gradient_mask():
    x = ad.leaf(np.array([-2.0, 0.5, 3.0], dtype=np.float32))
    loss = ad.sum_all(ad.clip(x, -1.0, 1.0))
    (g,) = ad.grad(loss, [x])
    assert np.array_equal(g, np.array([0.0, 1.0, 0.0], dtype=np.float32))


def test_reshape_and_slice_ops_roundtrip_gradients():
    x = ad.leaf(np.arange(12, dtype=np.float32).reshape(3, 4))
    y = ad.reshape(x, (12,))
    z = ad.slice_last(x, 1, 3)
    loss = ad.add(ad.sum_all(ad.square(y)), ad.sum_all(z))
    (g,) = ad.grad(loss, [x])
    expected = 2.0 * x.value
    expected[:, 1:3] += 1.0
    np.testing.assert_allclose(g, expected, rtol=1e-6)
