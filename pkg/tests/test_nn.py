import math

import numpy as np
import pytest

from activeshift import verify
from activeshift.errors import FormatError, ShapeError, StateError
from activeshift.nn import SGD, LinearSchedule, Network, StepSchedule, normalized_shift_update
from activeshift.nn import checkpoint
from activeshift.nn.layers import (
    ActiveShift, BatchNorm, Conv1x1, Conv3x3, DepthwiseConv3x3, GlobalAvgPool, Linear, Param, ReLU,
    Residual, Sequential, eltwise_sum, softmax_xent,
)
from activeshift.shift import init_shift


def fd_check(net, x, y, h=1e-6):
    net.forward(x, y)
    grads = net.backward()
    worst = 0.0
    for name, p in net.named_parameters():
        if not p.trainable:
            continue
        flat = p.data.reshape(-1)
        num = np.empty(flat.size)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            lp = net.forward(x, y)[1]
            flat[k] = orig - h
            lm = net.forward(x, y)[1]
            flat[k] = orig
            num[k] = (lp - lm) / (2 * h)
        worst = max(worst, verify.rel_error(grads[name].reshape(-1), num))
    return worst


def two_layer_net(seed=0):
    rng = np.random.default_rng(seed)
    body = Sequential([
        Conv1x1(2, 3, rng=rng, dtype=np.float64), ReLU(), GlobalAvgPool(),
        Linear(3, 4, rng=rng, dtype=np.float64),
    ])
    return Network(body, 4, np.float64)


# -- forward ------------------------------------------------------------------

def test_zero_fc_gives_log_classes():
    fc = Linear(5, 7, dtype=np.float64)
    fc.weight.data[...] = 0
    net = Network(Sequential([GlobalAvgPool(), fc]), 7, np.float64)
    logits, loss = net.forward(np.random.default_rng(0).standard_normal((3, 5, 2, 2)), [0, 3, 6])
    assert np.allclose(logits, logits[0, 0])
    assert loss == pytest.approx(math.log(7), abs=1e-12)


def test_identity_conv_chain_gives_pooled_features():
    convs = [Conv1x1(4, 4, dtype=np.float64) for _ in range(3)]
    for c in convs:
        c.weight.data[...] = np.eye(4)
    fc = Linear(4, 4, dtype=np.float64)
    fc.weight.data[...] = np.eye(4)
    net = Network(Sequential(convs + [GlobalAvgPool(), fc]), 4, np.float64)
    x = np.random.default_rng(0).standard_normal((2, 4, 3, 3))
    np.testing.assert_allclose(net.forward(x)[0], x.mean(axis=(2, 3)), atol=1e-14)


def test_two_layer_gradients():
    net = two_layer_net()
    rng = np.random.default_rng(1)
    assert fd_check(net, rng.standard_normal((3, 2, 4, 4)), [0, 1, 3]) < 1e-4


def test_every_layer_kind_gradients():
    rng = np.random.default_rng(2)
    shifts = init_shift("uniform", 3, seed=3)
    body = Sequential([
        Conv3x3(2, 3, stride=2, rng=rng, dtype=np.float64),
        BatchNorm(3, dtype=np.float64), ReLU(),
        Residual(Sequential([ActiveShift(shifts), Conv1x1(3, 3, rng=rng, dtype=np.float64)])),
        DepthwiseConv3x3(3, stride=2, rng=rng, dtype=np.float64),
        GlobalAvgPool(), Linear(3, 3, rng=rng, dtype=np.float64),
    ])
    net = Network(body, 3, np.float64)
    net.parameters()[1].data[...] = rng.uniform(0.5, 1.5, 3)  # BN gamma away from 1
    assert fd_check(net, rng.standard_normal((4, 2, 7, 7)), [0, 1, 2, 1]) < 1e-4


def test_toy_network_gradient_suite():
    r = verify.network_gradient_suite(coords=20, tol=1e-3)
    assert r.passed, r.line()


def test_layer_shape_error_names_layer():
    net = Network(Sequential([Conv1x1(3, 4, name="proj"), GlobalAvgPool(), Linear(4, 2)]), 2)
    with pytest.raises(ShapeError, match="proj"):
        net.forward(np.zeros((1, 5, 4, 4), np.float32))


# -- backward -----------------------------------------------------------------------

def test_backward_before_forward():
    with pytest.raises(StateError):
        two_layer_net().backward()


def test_backward_without_labels():
    net = two_layer_net()
    net.forward(np.zeros((1, 2, 3, 3)))
    with pytest.raises(StateError):
        net.backward()


def test_unused_parameter_has_zero_gradient():
    # a conv unit that never fires leaves its weight row and its fc column untouched
    net = two_layer_net()
    conv, fc = net.layers()[1], net.layers()[4]
    conv.weight.data[0] = -1.0
    x = np.abs(np.random.default_rng(0).standard_normal((2, 2, 3, 3)))
    net.forward(x, [1, 3])
    grads = net.backward()
    wname = [n for n, p in net.named_parameters() if p is conv.weight][0]
    fname = [n for n, p in net.named_parameters() if p is fc.weight][0]
    assert not grads[wname][0].any()
    assert not grads[fname][:, 0].any()
    assert grads[wname][1:].any()


def test_loss_scale_doubles_gradients():
    net = two_layer_net()
    x = np.random.default_rng(0).standard_normal((2, 2, 3, 3))
    net.forward(x, [0, 2])
    g1 = {k: v.copy() for k, v in net.backward().items()}
    net.forward(x, [0, 2])
    g2 = net.backward(scale=2.0)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-14)


def test_frozen_parameter_gets_no_gradient():
    layer = ActiveShift(init_shift("grouped", 9))
    net = Network(Sequential([layer, GlobalAvgPool(), Linear(9, 2, dtype=np.float64)]), 2, np.float64)
    net.forward(np.ones((1, 9, 3, 3)), [0])
    grads = net.backward()
    assert layer.shift.grad is None and not any(k.endswith("shift") for k in grads)


# -- layers ----------------------------------------------------------------------------

def test_batchnorm_normalizes():
    x = np.random.default_rng(0).standard_normal((8, 3, 5, 5)) * 4 + 2
    y = BatchNorm(3, dtype=np.float64).forward(x)
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)


def test_batchnorm_eval_before_stats():
    with pytest.raises(StateError):
        BatchNorm(2).forward(np.zeros((1, 2, 2, 2), np.float32), training=False)


def test_batchnorm_running_stats_momentum():
    bn = BatchNorm(1, dtype=np.float64)
    x = np.full((2, 1, 2, 2), 5.0)
    bn.forward(x)
    assert bn.running_mean[0] == pytest.approx(0.5)
    assert bn.running_var[0] == pytest.approx(0.9)


def test_relu_and_pool():
    r = ReLU()
    np.testing.assert_array_equal(r.forward(np.array([-2.0, 0.0, 3.0])), [0, 0, 3])
    assert GlobalAvgPool().forward(np.full((2, 3, 4, 5), 1.25)).tolist() == [[1.25] * 3] * 2


def test_eltwise_sum_mismatch():
    with pytest.raises(ShapeError):
        eltwise_sum(np.zeros((1, 2)), np.zeros((2, 1)))


def test_softmax_xent_gradient_sums_to_zero():
    _, g = softmax_xent(np.random.default_rng(0).standard_normal((4, 5)), [0, 1, 2, 3])
    np.testing.assert_allclose(g.sum(axis=1), 0, atol=1e-15)


def test_asl_layer_has_two_params_per_channel():
    assert ActiveShift(init_shift("uniform", 13, 0)).shift.data.size == 26


# -- optimizer ---------------------------------------------------------------------------------

def make_param(values, kind="weight", trainable=True):
    return Param("p", np.asarray(values, dtype=np.float64), kind=kind, trainable=trainable)


def test_step_schedule_values():
    s = StepSchedule(0.1, (32000, 48000))
    assert s(0) == 0.1 and s(31999) == 0.1
    assert s(32000) == pytest.approx(0.01) and s(48000) == pytest.approx(0.001)


def test_linear_schedule():
    s = LinearSchedule(0.1, 100)
    assert s(0) == 0.1 and s(50) == pytest.approx(0.05) and s(100) == 0.0


def test_sgd_zero_grad_zero_velocity_is_noop():
    p = make_param([1.0, -2.0])
    p.grad = np.zeros(2)
    SGD([("p", p)], StepSchedule(0.1), weight_decay=0).step(0)
    assert p.data.tolist() == [1.0, -2.0]


def test_sgd_plain_step():
    p = make_param([1.0, -2.0])
    p.grad = np.array([0.5, 1.0])
    SGD([("p", p)], StepSchedule(0.1), momentum=0.0, weight_decay=0.0).step(0)
    np.testing.assert_allclose(p.data, [0.95, -2.1], rtol=0, atol=1e-15)


def test_sgd_momentum_and_decay():
    p = make_param([1.0])
    opt = SGD([("p", p)], StepSchedule(1.0), momentum=0.9, weight_decay=0.1)
    p.grad = np.array([1.0])
    opt.step(0)  # v = 1 + 0.1 = 1.1, p = -0.1
    p.grad = np.array([0.0])
    opt.step(1)  # v = 0.99 - 0.01 = 0.98, p = -1.08
    assert p.data[0] == pytest.approx(-1.08)


def test_no_decay_on_bn_params():
    p = make_param([1.0], kind="bn")
    p.grad = np.zeros(1)
    SGD([("p", p)], StepSchedule(1.0), weight_decay=0.5).step(0)
    assert p.data[0] == 1.0


def test_frozen_is_bit_identical():
    net = verify.toy_network()
    for layer in net.shift_layers():
        layer.shift.trainable = False
    net.parameters()[0].trainable = False
    before = [p.data.copy() for p in net.parameters() if not p.trainable]
    opt = SGD(net.named_parameters(), StepSchedule(0.1), weight_decay=1e-4)
    rng = np.random.default_rng(0)
    for it in range(3):
        net.forward(rng.standard_normal((2, 3, 8, 8)), [0, 1])
        net.backward()
        opt.step(it)
    after = [p.data for p in net.parameters() if not p.trainable]
    assert all(np.array_equal(a, b) for a, b in zip(before, after))


def test_lr_zero_step_changes_nothing():
    net = verify.toy_network()
    before = [p.data.copy() for p in net.parameters()]
    net.forward(np.random.default_rng(0).standard_normal((2, 3, 8, 8)), [0, 1])
    net.backward()
    SGD(net.named_parameters(), StepSchedule(0.0), weight_decay=1e-4).step(0)
    assert all(np.array_equal(a, p.data) for a, p in zip(before, net.parameters()))


def test_normalized_update_zero_grad():
    p = make_param([[0.3, -0.2]], kind="shift")
    p.grad = np.zeros((1, 2))
    normalized_shift_update([p], 0.01)
    assert p.data.tolist() == [[0.3, -0.2]]


@pytest.mark.parametrize("seed", range(5))
def test_normalized_update_magnitude(seed):
    rng = np.random.default_rng(seed)
    start = rng.standard_normal((6, 2))
    p = make_param(start.copy(), kind="shift")
    p.grad = rng.standard_normal((6, 2)) * 10 ** rng.uniform(-6, 6)
    normalized_shift_update([p], 0.01)
    assert np.linalg.norm(p.data - start) == pytest.approx(0.01, rel=1e-9)


def test_normalized_update_pair_mode():
    p = make_param(np.zeros((3, 2)), kind="shift")
    p.grad = np.array([[3.0, 4.0], [0.0, 1e-3], [-2.0, 0.0]])
    normalized_shift_update([p], 0.1, mode="pair")
    np.testing.assert_allclose(np.linalg.norm(p.data, axis=1), 0.1, rtol=1e-9)


def test_shift_lr_follows_main_schedule():
    opt = SGD([], StepSchedule(0.1, (10, 20)), shift_lr=1e-2)
    assert opt.shift_lr_at(0) == pytest.approx(1e-2)
    assert opt.shift_lr_at(10) == pytest.approx(1e-3)
    assert opt.shift_lr_at(25) == pytest.approx(1e-4)


def test_shift_params_skip_momentum_and_decay():
    p = make_param([[0.0, 0.0]], kind="shift")
    opt = SGD([("s", p)], StepSchedule(0.1), momentum=0.9, weight_decay=1.0, shift_lr=0.5)
    assert "s" not in opt.velocity
    p.grad = np.array([[0.0, -2.0]])
    opt.step(0)
    np.testing.assert_allclose(p.data, [[0.0, 0.5]])


# -- determinism and checkpoints ------------------------------------------------------------------

def run_steps(net, steps, seed=0):
    opt = SGD(net.named_parameters(), StepSchedule(0.05), weight_decay=1e-4)
    rng = np.random.default_rng(seed)
    losses = []
    for it in range(steps):
        _, loss = net.forward(rng.standard_normal((4, 3, 8, 8)), rng.integers(0, 3, 4))
        net.backward()
        opt.step(it)
        losses.append(loss)
    return losses, opt


def test_training_is_deterministic():
    assert run_steps(verify.toy_network(0), 4)[0] == run_steps(verify.toy_network(0), 4)[0]


def test_checkpoint_round_trip(tmp_path):
    net = verify.toy_network(1)
    _, opt = run_steps(net, 2)
    path = tmp_path / "ck.bin"
    checkpoint.save(path, net, opt, {"iteration": 2})
    assert path.read_bytes()[:8] == b"ASLCKPT1"
    other = verify.toy_network(2)
    other_opt = SGD(other.named_parameters(), StepSchedule(0.05))
    assert checkpoint.load(path, other, other_opt) == {"iteration": 2}
    for (n, a), (_, b) in zip(net.named_parameters(), other.named_parameters()):
        assert np.array_equal(a.data, b.data), n
    for n in opt.velocity:
        assert np.array_equal(opt.velocity[n], other_opt.velocity[n])
    for (n, a), (_, b) in zip(net.named_buffers(), other.named_buffers()):
        assert np.array_equal(a, b), n


def test_checkpoint_shape_mismatch(tmp_path):
    path = tmp_path / "ck.bin"
    checkpoint.save(path, verify.toy_network(width=4))
    with pytest.raises(ShapeError):
        checkpoint.load(path, verify.toy_network(width=6))


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "ck.bin"
    checkpoint.save(path, verify.toy_network())
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="offset"):
        checkpoint.read_checkpoint(path)
    path.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(FormatError):
        checkpoint.read_checkpoint(path)
