import math
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from dynamic_flow.errors import CheckpointFormatError, ContractError, NonFiniteError, ShapeError
from dynamic_flow.tensorcore import (
    AdamState,
    ConvLayer,
    Optimizer,
    Parameter,
    Tensor,
    backward,
    concat,
    concat_channels,
    conv2d,
    global_avg_pool,
    gradcheck,
    instance_norm,
    load_checkpoint,
    no_grad,
    optimizer_step,
    pointwise,
    relu,
    save_checkpoint,
    sigmoid,
    softmax,
    tanh,
)


def leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def test_conv2d_single_pixel_with_bias():
    out = conv2d(Tensor([[[[2.0]]]]), Tensor([[[[3.0]]]]), Tensor([1.0]))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 7.0


def test_conv2d_identity_kernel_reproduces_input():
    rng = np.random.default_rng(3)
    image = rng.normal(size=(2, 3, 5, 6))
    kernel = np.zeros((3, 3, 3, 3))
    for channel in range(3):
        kernel[channel, channel, 1, 1] = 1.0

    out = conv2d(Tensor(image), Tensor(kernel), Tensor(np.zeros(3)), padding=1)

    np.testing.assert_allclose(out.data, image, atol=1e-12, rtol=0)


def test_conv2d_matches_direct_sum():
    rng = np.random.default_rng(11)
    image = rng.normal(size=(1, 1, 2, 2))
    kernel = rng.normal(size=(1, 1, 2, 2))
    # only odd kernels are accepted, so embed the 2x2 case in a 3x3 window with a zero border
    padded_kernel = np.zeros((1, 1, 3, 3))
    padded_kernel[0, 0, 1:, 1:] = kernel[0, 0]
    padded_image = np.zeros((1, 1, 3, 3))
    padded_image[0, 0, 1:, 1:] = image[0, 0]

    out = conv2d(Tensor(padded_image), Tensor(padded_kernel))

    assert out.shape == (1, 1, 1, 1)
    assert out.item() == pytest.approx(float((image * kernel).sum()), abs=1e-12)


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ShapeError, match="channels"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv2d_stride_two_halves_even_extent():
    layer = ConvLayer(1, 4, 3, np.random.default_rng(0), stride=2)
    out = layer(Tensor(np.ones((1, 1, 8, 6))))
    assert out.shape == (1, 4, 4, 3)
    assert layer.output_size(8, 6) == (4, 3)


def test_pointwise_values():
    assert relu(Tensor([-3.0])).data[0] == 0.0
    assert sigmoid(Tensor([0.0])).data[0] == 0.5
    assert tanh(Tensor([0.7])).data[0] == pytest.approx(math.tanh(0.7), abs=1e-12)
    assert pointwise(Tensor([2.0]), "relu").data[0] == 2.0
    with pytest.raises(ValueError):
        pointwise(Tensor([1.0]), "gelu")


def test_relu_derivative_at_zero_is_zero():
    x = leaf([0.0, 1.0])
    backward(relu(x).sum())
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_global_avg_pool_examples():
    assert global_avg_pool(Tensor(np.full((1, 1, 3, 3), 4.0))).data.reshape(()) == 4.0
    assert global_avg_pool(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data.reshape(()) == 2.5
    values = np.random.default_rng(5).normal(size=(1, 1, 3, 3))
    assert global_avg_pool(Tensor(values)).data.reshape(()) == pytest.approx(values.sum() / 9, abs=1e-12)


def test_global_avg_pool_gradient_spreads_evenly():
    x = leaf(np.ones((1, 2, 2, 3)))
    backward(global_avg_pool(x).sum())
    np.testing.assert_allclose(x.grad, np.full((1, 2, 2, 3), 1 / 6))


def test_concat_channels_blocks_and_gradients():
    a = leaf(np.zeros((1, 2, 2, 2)))
    b = leaf(np.ones((1, 3, 2, 2)))
    out = concat_channels([a, b])

    assert out.shape == (1, 5, 2, 2)
    np.testing.assert_array_equal(out.data[:, :2], a.data)
    np.testing.assert_array_equal(out.data[:, 2:], b.data)

    backward(out.sum())
    np.testing.assert_array_equal(a.grad, np.ones_like(a.data))
    np.testing.assert_array_equal(b.grad, np.ones_like(b.data))


def test_concat_channels_single_part_and_mismatch():
    part = Tensor(np.ones((1, 2, 3, 3)))
    assert concat_channels([part]) is part
    with pytest.raises(ShapeError, match="share N, H and W"):
        concat_channels([part, Tensor(np.ones((1, 2, 4, 3)))])


def test_backward_square_sum():
    x = leaf([1.0, 2.0])
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_dead_branch_gives_zero_gradient():
    w = Parameter(np.array([5.0]))
    unused = Parameter(np.array([1.0]))
    loss = (relu(Tensor([-3.0])) * w).sum()
    backward(loss, [w, unused])
    assert w.grad[0] == 0.0
    np.testing.assert_array_equal(unused.grad, [0.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError, match="scalar"):
        backward(leaf([1.0, 2.0]) * 2.0)


def test_shared_node_gradients_accumulate():
    x = leaf([3.0])
    y = x * x
    backward((y + y).sum())
    assert x.grad[0] == pytest.approx(12.0)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.creator is None


def test_composite_conv_relu_pool_l1_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = leaf(rng.normal(size=(1, 2, 4, 4)))
    weight = Parameter(rng.normal(size=(3, 2, 3, 3)))
    bias = Parameter(rng.normal(size=3))
    target = Tensor(rng.normal(size=(1, 3, 1, 1)))

    def loss():
        pooled = global_avg_pool(relu(conv2d(x, weight, bias, padding=1)))
        return (pooled - target).abs().sum()

    result = gradcheck(loss, [x, weight, bias], eps=1e-4)
    assert result.relative_error < 1e-4


def test_instance_norm_standardises_each_channel():
    rng = np.random.default_rng(3)
    out = instance_norm(Tensor(rng.normal(3.0, 2.0, size=(2, 3, 4, 5)))).data

    np.testing.assert_allclose(out.mean(axis=(2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=(2, 3)), 1.0, atol=1e-5)
    assert not instance_norm(Tensor(np.full((1, 2, 3, 3), 4.0))).data.any()


def test_instance_norm_matches_finite_differences():
    rng = np.random.default_rng(4)
    x = leaf(rng.normal(size=(2, 2, 3, 4)))
    weights = Tensor(rng.normal(size=(2, 2, 3, 4)))
    result = gradcheck(lambda: (instance_norm(x) * weights).sum(), [x], eps=1e-5)
    assert result.relative_error < 1e-4


@pytest.mark.parametrize(
    "build",
    [
        lambda a, b: (a * b).sum(),
        lambda a, b: (a / (b * b + 1.0)).sum(),
        lambda a, b: (a - b).abs().mean(),
        lambda a, b: (a @ b.transpose(1, 0)).sum(),
        lambda a, b: (sigmoid(a) * tanh(b)).sum(),
        lambda a, b: (softmax(a, axis=1) * b).sum(),
        lambda a, b: (concat([a, b], axis=0)[1:3] * 2.0).sum(),
        lambda a, b: (a.reshape(3, 4).sum(axis=0) * b.reshape(3, 4).mean(axis=0)).sum(),
    ],
)
def test_primitive_gradients_match_finite_differences(build):
    rng = np.random.default_rng(7)
    a = leaf(rng.normal(size=(4, 3)) + 0.5)
    b = leaf(rng.normal(size=(4, 3)) - 0.5)
    result = gradcheck(lambda: build(a, b), [a, b], eps=1e-4)
    assert result.relative_error < 1e-4


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-3, 3)), arrays(np.float64, (2, 3), elements=st.floats(-3, 3)))
def test_backward_is_linear_in_the_loss(values, weights):
    def gradient(loss_builder):
        x = leaf(values)
        backward(loss_builder(x))
        return x.grad

    def first(x):
        return (x * x * Tensor(weights)).sum()

    def second(x):
        return sigmoid(x).sum()

    combined = gradient(lambda x: first(x) + second(x))
    np.testing.assert_allclose(combined, gradient(first) + gradient(second), atol=1e-10, rtol=0)


def test_forward_is_deterministic():
    layer_a = ConvLayer(2, 3, 3, np.random.default_rng(9))
    layer_b = ConvLayer(2, 3, 3, np.random.default_rng(9))
    image = Tensor(np.random.default_rng(1).normal(size=(1, 2, 5, 5)))
    np.testing.assert_array_equal(layer_a(image).data, layer_b(image).data)


def test_conv_layer_initialisation_bound():
    layer = ConvLayer(4, 8, 3, np.random.default_rng(0))
    bound = math.sqrt(1.0 / (4 * 9))
    assert np.abs(layer.weight.data).max() <= bound
    assert np.abs(layer.bias.data).max() <= bound


def test_optimizer_plain_step():
    p = Parameter(np.array([1.0]))
    optimizer_step([("p", p)], [np.array([1.0])], 0.1)
    assert p.data[0] == pytest.approx(0.9)

    optimizer_step([("p", p)], [np.array([0.0])], 0.1)
    assert p.data[0] == pytest.approx(0.9)


def test_optimizer_momentum_two_steps():
    p = Parameter(np.array([0.0]))
    velocity = {}
    for _ in range(2):
        optimizer_step([("p", p)], [np.array([1.0])], 0.1, "momentum", momentum=0.9, velocity=velocity)
    assert p.data[0] == pytest.approx(-0.29, abs=1e-12)


def test_adam_first_steps_move_by_the_learning_rate_along_the_gradient_sign():
    p = Parameter(np.array([0.0, 0.0]))
    state = AdamState()
    for _ in range(2):
        optimizer_step([("p", p)], [np.array([5.0, -0.01])], 0.1, "adam", adam=state)

    assert state.steps == 2
    np.testing.assert_allclose(p.data, [-0.2, 0.2], atol=1e-5)


def test_adam_needs_its_state():
    with pytest.raises(ContractError, match="AdamState"):
        optimizer_step([("p", Parameter(np.zeros(1)))], [np.ones(1)], 0.1, "adam")


def test_optimizer_rejects_non_finite_gradient_without_moving_anything():
    good = Parameter(np.array([1.0]))
    bad = Parameter(np.array([2.0]))
    with pytest.raises(NonFiniteError) as excinfo:
        optimizer_step([("good", good), ("bad", bad)], [np.array([1.0]), np.array([np.nan])], 0.1)
    assert excinfo.value.parameter == "bad"
    assert good.data[0] == 1.0 and bad.data[0] == 2.0


def test_optimizer_rejects_non_positive_learning_rate():
    with pytest.raises(ContractError):
        optimizer_step([("p", Parameter(np.zeros(1)))], [np.zeros(1)], 0.0)


def test_optimizer_clips_global_norm():
    p = Parameter(np.array([0.0, 0.0]))
    p.grad = np.array([3.0, 4.0])
    optimizer = Optimizer([("p", p)], 1.0, mode="plain", clip_norm=1.0)

    norm = optimizer.step()

    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(p.data, [-0.6, -0.8])


def test_checkpoint_round_trip_and_corruption(tmp_path: Path):
    state = {"b.weight": np.arange(6.0).reshape(2, 3), "a.bias": np.array([1.5])}
    path = save_checkpoint(state, tmp_path / "model.bin")

    loaded = load_checkpoint(path)

    assert list(loaded) == ["a.bias", "b.weight"]
    np.testing.assert_array_equal(loaded["b.weight"], state["b.weight"])

    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointFormatError, match="Truncated"):
        load_checkpoint(path)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.bin")
