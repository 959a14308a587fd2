"""Manual forward/backward passes, the loss, SGD, and checkpointing."""

import numpy as np
import pytest

from splitmark.linalg import NumericalError, RngStream, StreamLabel
from splitmark.nn import (
    Layer,
    LayerSpec,
    OptimizerConfig,
    Segment,
    SgdOptimizer,
    SplitModel,
    SplitSpec,
    accuracy,
    backward_segment,
    forward_full,
    forward_segment,
    init_segment,
    init_split_model,
    load_model,
    save_model,
    segments_equal,
    softmax_xent,
)


def _segment(*layers):
    return Segment([Layer(spec, w, b) for spec, w, b in layers])


def _random_segment(rng, dims, activations=None):
    specs = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        act = activations[i] if activations else ("relu" if b != dims[-1] else "identity")
        specs.append(LayerSpec(a, b, act))
    return init_segment(specs, rng)


def test_identity_layer_passthrough():
    seg = _segment((LayerSpec(3, 3, "identity"), np.eye(3), np.zeros(3)))
    x = np.array([[1.0, -2.0, 0.5], [0.0, 4.0, -1.0]])
    out, _ = forward_segment(seg, x)
    assert np.array_equal(out, x)


def test_relu_kills_negative_preactivations():
    seg = _segment((LayerSpec(2, 2), np.eye(2), np.array([-10.0, -10.0])))
    out, _ = forward_segment(seg, np.array([[1.0, 2.0]]))
    assert np.array_equal(out, np.zeros((1, 2)))


def test_hand_preactivation():
    # [1,1] @ [[1,2],[3,4]] = [4,6]
    seg = _segment((LayerSpec(2, 2, "identity"), np.array([[1.0, 2.0], [3.0, 4.0]]),
                    np.zeros(2)))
    out, tape = forward_segment(seg, np.array([[1.0, 1.0]]))
    assert np.allclose(out, [[4.0, 6.0]])
    assert np.allclose(tape.pre[0], [[4.0, 6.0]])


def test_forward_rejects_wrong_width():
    seg = _segment((LayerSpec(2, 2), np.eye(2), np.zeros(2)))
    with pytest.raises(ValueError):
        forward_segment(seg, np.ones((1, 3)))


def _loss_of(seg, x, labels):
    out, _ = forward_segment(seg, x)
    loss, _ = softmax_xent(out, labels)
    return loss


def test_backward_matches_finite_differences():
    # Central differences with h=1e-5 on a random 3-layer net, batch 4.
    rng = RngStream(1, StreamLabel.MODEL_INIT)
    seg = _random_segment(rng, (5, 7, 6, 3), ["relu", "relu", "identity"])
    x = rng.normal(4 * 5).reshape(4, 5)
    labels = np.array([0, 2, 1, 0])

    out, tape = forward_segment(seg, x)
    loss, gout = softmax_xent(out, labels)
    gin, grads = backward_segment(seg, tape, gout)

    h = 1e-5
    worst = 0.0
    for li, layer in enumerate(seg.layers):
        for tensor, analytic in ((layer.w, grads[li][0]), (layer.b, grads[li][1])):
            flat = tensor.ravel()
            for idx in range(0, flat.size, max(1, flat.size // 10)):
                orig = flat[idx]
                flat[idx] = orig + h
                up = _loss_of(seg, x, labels)
                flat[idx] = orig - h
                down = _loss_of(seg, x, labels)
                flat[idx] = orig
                fd = (up - down) / (2 * h)
                ref = analytic.ravel()[idx]
                worst = max(worst, abs(fd - ref) / max(1.0, abs(ref)))
    for idx in range(x.size):
        orig = x.ravel()[idx]
        x.ravel()[idx] = orig + h
        up = _loss_of(seg, x, labels)
        x.ravel()[idx] = orig - h
        down = _loss_of(seg, x, labels)
        x.ravel()[idx] = orig
        fd = (up - down) / (2 * h)
        ref = gin.ravel()[idx]
        worst = max(worst, abs(fd - ref) / max(1.0, abs(ref)))
    assert worst < 1e-5


def test_backward_zero_upstream():
    rng = RngStream(2, StreamLabel.MODEL_INIT)
    seg = _random_segment(rng, (4, 4, 4))
    x = rng.normal(8).reshape(2, 4)
    out, tape = forward_segment(seg, x)
    gin, grads = backward_segment(seg, tape, np.zeros_like(out))
    assert np.array_equal(gin, np.zeros_like(x))
    for dw, db in grads:
        assert not dw.any() and not db.any()


def test_backward_identity_passthrough():
    seg = _segment((LayerSpec(3, 3, "identity"), np.eye(3), np.zeros(3)))
    x = np.array([[0.5, -1.0, 2.0]])
    _, tape = forward_segment(seg, x)
    up = np.array([[1.0, 2.0, 3.0]])
    gin, _ = backward_segment(seg, tape, up)
    assert np.allclose(gin, up)


def test_softmax_uniform_logits():
    for c in (2, 5, 10):
        loss, grad = softmax_xent(np.zeros((3, c)), np.zeros(3, dtype=int))
        assert np.isclose(loss, np.log(c))


def test_softmax_confident_margin():
    logits = np.array([[40.0, 0.0]])
    loss, _ = softmax_xent(logits, np.array([0]))
    assert loss < 1e-12


def test_softmax_scalar_closed_form():
    # ln(1 + e^-1) for logits [1, 0] with label 0.
    loss, _ = softmax_xent(np.array([[1.0, 0.0]]), np.array([0]))
    assert np.isclose(loss, 0.31326168751822286, atol=1e-12)


def test_softmax_rejects_bad_labels():
    with pytest.raises(ValueError):
        softmax_xent(np.zeros((2, 3)), np.array([0, 3]))


def test_sgd_plain_step():
    seg = _segment((LayerSpec(1, 1, "identity"), np.array([[1.0]]), np.zeros(1)))
    opt = SgdOptimizer(lr=1.0)
    opt.step([seg], [[(np.array([[0.5]]), np.zeros(1))]])
    assert np.isclose(seg.layers[0].w[0, 0], 0.5)


def test_sgd_momentum_recurrence():
    # Two identical unit gradients at m=0.9: v1=1, v2=1.9, total drop lr*2.9.
    seg = _segment((LayerSpec(1, 1, "identity"), np.array([[5.0]]), np.zeros(1)))
    opt = SgdOptimizer(lr=0.1, momentum=0.9)
    g = [[(np.array([[1.0]]), np.zeros(1))]]
    opt.step([seg], g)
    opt.step([seg], g)
    assert np.isclose(seg.layers[0].w[0, 0], 5.0 - 0.1 * (1.0 + 1.9), atol=1e-12)


def test_sgd_zero_gradient_no_decay():
    seg = _segment((LayerSpec(1, 1, "identity"), np.array([[2.0]]), np.ones(1)))
    opt = SgdOptimizer(lr=0.5)
    opt.step([seg], [[(np.zeros((1, 1)), np.zeros(1))]])
    assert seg.layers[0].w[0, 0] == 2.0
    assert seg.layers[0].b[0] == 1.0


def test_sgd_weight_decay_pulls_to_zero():
    seg = _segment((LayerSpec(1, 1, "identity"), np.array([[2.0]]), np.zeros(1)))
    opt = SgdOptimizer(lr=0.1, weight_decay=0.5)
    opt.step([seg], [[(np.zeros((1, 1)), np.zeros(1))]])
    assert np.isclose(seg.layers[0].w[0, 0], 2.0 - 0.1 * 0.5 * 2.0)


def test_sgd_rejects_nonfinite_gradient():
    seg = _segment((LayerSpec(1, 1, "identity"), np.array([[1.0]]), np.zeros(1)))
    opt = SgdOptimizer(lr=0.1)
    with pytest.raises(NumericalError):
        opt.step([seg], [[(np.array([[np.nan]]), np.zeros(1))]])


def test_init_is_deterministic_and_scaled():
    spec = [LayerSpec(64, 64), LayerSpec(64, 32, "identity")]
    a = init_segment(spec, RngStream(4, StreamLabel.MODEL_INIT))
    b = init_segment(spec, RngStream(4, StreamLabel.MODEL_INIT))
    assert segments_equal(a, b)
    # std approximately 1/sqrt(fan_in), biases exactly zero
    assert abs(a.layers[0].w.std() - 1 / 8) < 0.02
    assert not a.layers[0].b.any()


def test_split_model_roundtrip(tmp_path):
    spec = SplitSpec(
        bottom=(LayerSpec(8, 16), LayerSpec(16, 16)),
        middle=(LayerSpec(16, 16),),
        head=(LayerSpec(16, 3, "identity"),),
    )
    model = init_split_model(spec, RngStream(9, StreamLabel.MODEL_INIT))
    path = tmp_path / "model.ckpt"
    save_model(model, str(path))
    clone = load_model(str(path))
    for seg, other in zip(
        (model.bottom, model.middle, model.head), (clone.bottom, clone.middle, clone.head)
    ):
        assert segments_equal(seg, other)
    # byte-stable: saving the clone reproduces the file exactly
    path2 = tmp_path / "model2.ckpt"
    save_model(clone, str(path2))
    assert path.read_bytes() == path2.read_bytes()


def test_split_spec_dimension_chain():
    with pytest.raises(ValueError):
        SplitSpec(
            bottom=(LayerSpec(8, 16),),
            middle=(LayerSpec(32, 16),),
            head=(LayerSpec(16, 3, "identity"),),
        )


def test_forward_full_composes_segments():
    spec = SplitSpec(
        bottom=(LayerSpec(4, 8),),
        middle=(LayerSpec(8, 8),),
        head=(LayerSpec(8, 2, "identity"),),
    )
    model = init_split_model(spec, RngStream(1, StreamLabel.MODEL_INIT))
    x = RngStream(2, StreamLabel.DATA).normal(12).reshape(3, 4)
    a, _ = forward_segment(model.bottom, x)
    m, _ = forward_segment(model.middle, a)
    logits, _ = forward_segment(model.head, m)
    assert np.array_equal(forward_full(model, x), logits)


def test_accuracy():
    logits = np.array([[2.0, 1.0], [0.0, 3.0], [1.0, 0.0], [0.0, 1.0]])
    labels = np.array([0, 1, 1, 1])
    assert accuracy(logits, labels) == 0.75


def test_optimizer_config_builds():
    opt = OptimizerConfig(lr=0.01, momentum=0.5, weight_decay=0.1).build()
    assert isinstance(opt, SgdOptimizer)
    assert opt.lr == 0.01 and opt.momentum == 0.5 and opt.weight_decay == 0.1
