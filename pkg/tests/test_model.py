"""Graph model and builder tests: shape contracts, parameter-count
oracle, capture semantics, and finite-difference checks of
backward_to_capture and the full parameter backward."""

import numpy as np
import pytest

from helpers import fd_grad, rel_err
from xmed.errors import ConfigError, ShapeError
from xmed.model import build_densenet_mini, build_resnet_mini
from xmed.ops import softmax_cross_entropy


def expected_param_count(model):
    """Closed-form count from the LayerSpecs alone."""
    total = 0
    for spec in model.layers:
        hp = spec.hp
        if spec.kind == "conv":
            total += hp["out_c"] * hp["in_c"] * hp["k"] ** 2 + hp["out_c"]
        elif spec.kind == "batchnorm":
            total += 2 * hp["c"]
        elif spec.kind == "dense":
            total += hp["d"] * hp["k"] + hp["k"]
        elif spec.kind == "residual_block":
            i, o = hp["in_c"], hp["out_c"]
            total += (o * i * 9 + o) + 2 * o          # conv1 + bn1
            total += (o * o * 9 + o) + 2 * o          # conv2 + bn2
            if hp["project"]:
                total += o * i + o
        elif spec.kind == "dense_block":
            c, g = hp["in_c"], hp["growth"]
            for li in range(hp["layers"]):
                width = c + li * g
                total += 2 * width                     # bn
                total += g * width * 9 + g             # 3x3 conv
        elif spec.kind == "transition":
            total += hp["out_c"] * hp["in_c"] + hp["out_c"]
    return total


RESNET_GRID = [
    dict(stages=(1,), base_width=4, input_shape=(1, 8, 8)),
    dict(stages=(2,), base_width=4, input_shape=(1, 8, 8)),
    dict(stages=(1, 1), base_width=4, input_shape=(1, 8, 8)),
    dict(stages=(1, 1), base_width=8, input_shape=(2, 12, 8)),
    dict(stages=(2, 2), base_width=4, input_shape=(1, 16, 16)),
    dict(stages=(1, 1, 1), base_width=4, input_shape=(1, 16, 16)),
    dict(stages=(2, 2, 2), base_width=8, input_shape=(1, 32, 32)),
]
DENSENET_GRID = [
    dict(blocks=(2,), growth_rate=4, input_shape=(1, 8, 8)),
    dict(blocks=(3,), growth_rate=2, input_shape=(2, 8, 8)),
    dict(blocks=(2, 2), growth_rate=4, input_shape=(1, 8, 8)),
    dict(blocks=(4, 4), growth_rate=8, input_shape=(1, 32, 32)),
    dict(blocks=(2, 2, 2), growth_rate=4, input_shape=(1, 16, 16)),
]


def build_grid():
    models = [build_resnet_mini(num_classes=2, seed=11, **kw)
              for kw in RESNET_GRID]
    models += [build_densenet_mini(num_classes=2, seed=11, **kw)
               for kw in DENSENET_GRID]
    return models


def test_logits_shape_contract():
    m = build_resnet_mini(stages=(2, 2, 2), base_width=8, num_classes=2,
                          input_shape=(1, 32, 32), seed=0)
    x = np.zeros((1, 1, 32, 32), dtype=np.float32)
    logits, _, _ = m.forward(x)
    assert logits.shape == (1, 2)
    m = build_densenet_mini(blocks=(2, 2), growth_rate=4, num_classes=2,
                            input_shape=(1, 32, 32), seed=0)
    logits, _, _ = m.forward(x)
    assert logits.shape == (1, 2)


def test_grid_forward_finite_and_capture_shape():
    rng = np.random.default_rng(0)
    for m in build_grid():
        x = rng.uniform(0, 1, (2,) + m.input_shape).astype(np.float32)
        logits, captured, _ = m.forward(x, mode="train")
        assert logits.shape == (2, 2)
        assert np.isfinite(logits).all()
        assert captured is not None and captured.shape[0] == 2
        names = [s.name for s in m.layers]
        assert m.capture_layer in names


def test_param_count_matches_closed_form():
    for m in build_grid():
        assert m.param_count() == expected_param_count(m)


def test_single_stage_has_one_residual_block():
    m = build_resnet_mini(stages=(1,), base_width=4, input_shape=(1, 8, 8))
    kinds = [s.kind for s in m.layers]
    assert kinds.count("residual_block") == 1


def test_dense_block_channel_arithmetic():
    # L=3 layers on c0=8 input with growth 4 -> 8 + 3*4 = 20 channels
    m = build_densenet_mini(blocks=(3,), growth_rate=4,
                            input_shape=(1, 8, 8), seed=0)
    assert m.layers[0].hp["out_c"] == 8  # stem = 2 * growth
    x = np.random.default_rng(1).uniform(0, 1, (1, 1, 8, 8)).astype(np.float32)
    _, captured, _ = m.forward(x)
    assert captured.shape[1] == 20


def test_capture_defaults_to_last_block():
    m = build_resnet_mini(stages=(2, 2), base_width=4, input_shape=(1, 16, 16))
    assert m.capture_layer == "s2b2"
    d = build_densenet_mini(blocks=(2, 2), growth_rate=4,
                            input_shape=(1, 16, 16))
    assert d.capture_layer == "db2"


def test_capture_override_and_validation():
    m = build_resnet_mini(stages=(1,), base_width=4, input_shape=(1, 8, 8),
                          capture_layer="stem_relu")
    assert m.capture_layer == "stem_relu"
    with pytest.raises(ConfigError):
        build_resnet_mini(stages=(1,), base_width=4, input_shape=(1, 8, 8),
                          capture_layer="nope")
    with pytest.raises(ConfigError):
        m.with_capture("head")  # dense output is not a feature map


def test_too_small_input_rejected():
    with pytest.raises(ConfigError):
        build_resnet_mini(stages=(1, 1, 1, 1), base_width=4,
                          input_shape=(1, 4, 4))
    with pytest.raises(ConfigError):
        build_densenet_mini(blocks=(2, 2, 2), growth_rate=2,
                            input_shape=(1, 3, 3))


def test_forward_validates_input_shape():
    m = build_resnet_mini(stages=(1,), base_width=4, input_shape=(1, 8, 8))
    with pytest.raises(ShapeError):
        m.forward(np.zeros((1, 1, 9, 9), dtype=np.float32))


def test_backward_to_capture_matches_finite_differences():
    # spot-check the whole grid at rel. tol 1e-3 (infer mode end to end)
    rng = np.random.default_rng(2)
    for m in build_grid():
        x = rng.uniform(0, 1, (1,) + m.input_shape).astype(np.float64)
        logits, captured, caches = m.forward(x, mode="infer")
        grad = m.backward_to_capture(caches, class_index=1)
        assert grad.shape == captured.shape

        idx = [s.name for s in m.layers].index(m.capture_layer)

        def tail_logit(a):
            h = a
            for spec in m.layers[idx + 1:]:
                h, _ = m._layer_forward(spec, h, "infer")
            return float(h[0, 1])

        num = fd_grad(tail_logit, captured, step=1e-3)
        assert rel_err(grad, num) < 1e-3


def test_backward_to_capture_requires_single_image():
    m = build_resnet_mini(stages=(1,), base_width=4, input_shape=(1, 8, 8))
    x = np.zeros((2, 1, 8, 8), dtype=np.float32)
    _, _, caches = m.forward(x)
    with pytest.raises(ShapeError):
        m.backward_to_capture(caches, 0)


def test_head_bias_shift_leaves_capture_grad_bit_identical():
    m = build_resnet_mini(stages=(1, 1), base_width=4,
                          input_shape=(1, 8, 8), seed=5)
    x = np.random.default_rng(3).uniform(0, 1, (1, 1, 8, 8)).astype(np.float32)
    _, _, caches = m.forward(x, mode="infer")
    g1 = m.backward_to_capture(caches, 0)
    m.params["head.b"] += np.float32(3.7)
    logits2, _, caches2 = m.forward(x, mode="infer")
    g2 = m.backward_to_capture(caches2, 0)
    assert np.array_equal(g1, g2)
    assert logits2[0, 0] != 0  # the bias did change the logits


def test_full_backward_matches_finite_differences():
    # d(loss)/d(params) for a tiny model, train mode, float64. The probe
    # step is 1e-5 here: through a whole network a 1e-3 step pushes some
    # pre-activation across its relu kink, which breaks the fd estimate
    # even when every layer gradient is exact.
    m = build_resnet_mini(stages=(1,), base_width=2,
                          input_shape=(1, 8, 8), seed=9)
    m.params = {k: v.astype(np.float64) for k, v in m.params.items()}
    m.buffers = {k: v.astype(np.float64) for k, v in m.buffers.items()}
    rng = np.random.default_rng(4)
    x = rng.uniform(0, 1, (2, 1, 8, 8))
    y = np.array([0, 1])

    logits, _, caches = m.forward(x, mode="train")
    loss, grad_logits = softmax_cross_entropy(logits, y)
    grads = m.backward(caches, grad_logits)
    assert set(grads) == set(m.params)

    saved_buffers = {k: v.copy() for k, v in m.buffers.items()}
    for key in ["stem.w", "s1b1.conv2.w", "s1b1.bn1.gamma", "head.w",
                "head.b", "s1b1.bn2.beta"]:
        orig = m.params[key]

        def loss_at(v):
            m.params[key] = v
            for k in m.buffers:  # keep EMA state out of the probe
                m.buffers[k][...] = saved_buffers[k]
            out, _, _ = m.forward(x, mode="train")
            m.params[key] = orig
            return float(softmax_cross_entropy(out, y)[0])

        assert rel_err(grads[key], fd_grad(loss_at, orig, 1e-5)) < 1e-6, key


def test_clone_is_independent():
    m = build_resnet_mini(stages=(1,), base_width=4, input_shape=(1, 8, 8))
    c = m.clone()
    c.params["stem.w"][...] = 0
    assert m.params["stem.w"].any()


def test_train_and_infer_modes_differ():
    m = build_resnet_mini(stages=(1,), base_width=4, input_shape=(1, 8, 8),
                          seed=1)
    x = np.random.default_rng(5).uniform(0, 1, (4, 1, 8, 8)).astype(np.float32)
    a, _, _ = m.forward(x, mode="train")
    b, _, _ = m.forward(x, mode="infer")
    assert not np.array_equal(a, b)
