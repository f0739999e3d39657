import math

import numpy as np
import pytest

from ulu_kit.activations import ActivationSpec, AdaptiveParams, ulu_dx
from ulu_kit.autodiff import Graph, OpKind, ParamStore, lr_schedule, sgd_step
from ulu_kit.errors import (BackwardBeforeForwardError, NonFiniteGradientError, ParamStoreFormatError,
                            ShapeMismatchError)


def _numeric_grad(loss_fn, tensor, index, step=1e-6):
    original = tensor[index]
    tensor[index] = original + step
    plus = loss_fn()
    tensor[index] = original - step
    minus = loss_fn()
    tensor[index] = original
    return (plus - minus) / (2 * step)


def test_zero_weight_linear_model_loss_is_log_classes():
    store = ParamStore()
    store.add("w", np.zeros((5, 4)))
    graph = Graph(store)
    logits = graph.matmul(graph.input(np.ones((3, 5))), graph.param("w"))
    loss = graph.softmax_cross_entropy(logits, [0, 1, 3])
    assert float(graph.value(loss)) == pytest.approx(math.log(4), rel=1e-15)


def test_cross_entropy_is_stable_for_large_logits():
    graph = Graph(ParamStore())
    loss = graph.softmax_cross_entropy(graph.input([[1000.0, 0.0], [0.0, 1000.0]]), [0, 0])
    assert float(graph.value(loss)) == pytest.approx(500.0, rel=1e-12)
    graph.backward()


def test_activation_of_zero_is_zero():
    graph = Graph(ParamStore())
    out = graph.activation(graph.input([0.0]), ActivationSpec.ulu(0.3, 0.8))
    assert graph.value(out).tolist() == [0.0]


def test_identity_1x1_conv_returns_input():
    store = ParamStore()
    store.add("k", np.ones((1, 1, 1, 1)))
    graph = Graph(store)
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 5))
    out = graph.conv2d(graph.input(x), graph.param("k"))
    assert np.array_equal(graph.value(out), x)


def test_conv2d_matches_direct_sum():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 4, 4))
    k = rng.normal(size=(3, 2, 3, 3))
    store = ParamStore()
    store.add("k", k)
    graph = Graph(store)
    out = graph.value(graph.conv2d(graph.input(x), graph.param("k")))

    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((1, 3, 4, 4))
    for o in range(3):
        for r in range(4):
            for c in range(4):
                expected[0, o, r, c] = np.sum(padded[0, :, r:r + 3, c:c + 3] * k[o])
    assert np.allclose(out, expected, atol=1e-12)


def test_shape_mismatch_names_node():
    store = ParamStore()
    store.add("w", np.zeros((4, 2)))
    graph = Graph(store)
    x = graph.input(np.ones((3, 5)))
    w = graph.param("w")
    with pytest.raises(ShapeMismatchError) as info:
        graph.matmul(x, w)
    assert info.value.node == "MatMul#2"


def test_backward_before_forward():
    with pytest.raises(BackwardBeforeForwardError):
        Graph(ParamStore()).backward()


def test_scalar_chain_rule_through_ulu():
    store = ParamStore()
    store.add("w", np.array([[1.0]]))
    store.add("head", np.array([[1.0, 0.0]]))
    graph = Graph(store)
    h = graph.activation(graph.matmul(graph.input([[1.0]]), graph.param("w")), ActivationSpec.ulu(0.3, 0.8))
    graph.softmax_cross_entropy(graph.matmul(h, graph.param("head")), [0])
    graph.backward()

    # logits [h, 0] with label 0: dloss/dh = p0 - 1
    h_value = 0.5 * (math.tanh(0.8) + 1.0)
    p0 = math.exp(h_value) / (math.exp(h_value) + 1.0)
    assert store.grads["w"][0, 0] == pytest.approx((p0 - 1.0) * ulu_dx(1.0, 0.3, 0.8), rel=1e-12)


def test_activation_backward_uses_analytic_derivative():
    graph = Graph(ParamStore())
    x = graph.input([[1.0, 0.0]])
    h = graph.activation(x, ActivationSpec.ulu(0.3, 0.8))
    loss = graph.softmax_cross_entropy(h, [1])
    graph.backward()

    logits = np.array([0.5 * (math.tanh(0.8) + 1.0), 0.0])
    probs = np.exp(logits) / np.exp(logits).sum()
    expected = (probs - np.array([0.0, 1.0])) * np.array([ulu_dx(1.0, 0.3, 0.8), 0.5])
    assert np.allclose(graph.nodes[x].grad[0], expected, rtol=1e-12)
    assert graph.nodes[loss].op is OpKind.SOFTMAX_CROSS_ENTROPY


def test_unused_parameter_gets_exact_zero_gradient():
    store = ParamStore()
    store.add("used", np.ones((3, 2)))
    store.add("unused", np.ones(7))
    graph = Graph(store)
    logits = graph.matmul(graph.input(np.ones((2, 3))), graph.param("used"))
    graph.softmax_cross_entropy(logits, [0, 1])
    graph.backward()
    assert np.array_equal(store.grads["unused"], np.zeros(7))


def _build_small_network(store, images, labels, act):
    graph = Graph(store)
    h = graph.flatten(graph.input(images[:, None]))
    h = graph.bias_add(graph.matmul(h, graph.param("w0")), graph.param("b0"))
    h = graph.activation(h, act)
    h = graph.bias_add(graph.matmul(h, graph.param("w1")), graph.param("b1"))
    loss = graph.softmax_cross_entropy(h, labels)
    return graph, loss


@pytest.mark.parametrize("act", [ActivationSpec.ulu(0.3, 0.8), ActivationSpec.parse("gelu"),
                                 ActivationSpec.parse("mish")])
def test_network_gradients_match_finite_differences(act):
    rng = np.random.default_rng(5)
    images = rng.normal(size=(8, 3, 2))
    labels = np.array([0, 2, 1, 2, 1, 0, 0, 2])
    store = ParamStore()
    store.add("w0", rng.normal(size=(6, 5)))
    store.add("b0", rng.normal(size=5))
    store.add("w1", rng.normal(size=(5, 3)))
    store.add("b1", rng.normal(size=3))

    graph, _ = _build_small_network(store, images, labels, act)
    graph.backward()

    def loss_fn():
        g, loss = _build_small_network(store, images, labels, act)
        return float(g.value(loss))

    for name in ("w0", "b0", "w1", "b1"):
        tensor = store.tensors[name]
        for index in np.ndindex(tensor.shape):
            assert store.grads[name][index] == pytest.approx(_numeric_grad(loss_fn, tensor, index),
                                                             rel=1e-5, abs=1e-8)


def test_attention_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    store = ParamStore()
    store.add("wq", rng.normal(size=(4, 4)))
    store.add("wk", rng.normal(size=(4, 4)))
    store.add("wv", rng.normal(size=(4, 4)))
    store.add("head", rng.normal(size=(4, 3)))
    x = rng.normal(size=(8, 3, 4))
    labels = np.array([1, 2, 0, 0, 2, 1, 1, 0])

    def record():
        graph = Graph(store)
        e = graph.input(x)
        q = graph.scale(graph.matmul(e, graph.param("wq")), 0.5)
        k = graph.matmul(e, graph.param("wk"))
        v = graph.matmul(e, graph.param("wv"))
        h = graph.add(e, graph.attention_apply(graph.attention_scores(q, k), v))
        h = graph.mean_pool(h, axes=(1,))
        loss = graph.softmax_cross_entropy(graph.matmul(h, graph.param("head")), labels)
        return graph, loss

    graph, _ = record()
    graph.backward()

    def loss_fn():
        g, loss = record()
        return float(g.value(loss))

    for name in ("wq", "wk", "wv", "head"):
        tensor = store.tensors[name]
        for index in np.ndindex(tensor.shape):
            assert store.grads[name][index] == pytest.approx(_numeric_grad(loss_fn, tensor, index),
                                                             rel=1e-5, abs=1e-8)


def test_conv_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    store = ParamStore()
    store.add("k", rng.normal(size=(2, 1, 3, 3)))
    store.add("cb", rng.normal(size=2))
    store.add("head", rng.normal(size=(2, 3)))
    x = rng.normal(size=(8, 1, 5, 5))
    labels = np.array([0, 2, 1, 1, 0, 2, 2, 0])

    def record():
        graph = Graph(store)
        h = graph.bias_add(graph.conv2d(graph.input(x), graph.param("k")), graph.param("cb"), axis=1)
        h = graph.activation(h, ActivationSpec.ulu(0.3, 0.8))
        h = graph.mean_pool(h, axes=(2, 3))
        loss = graph.softmax_cross_entropy(graph.matmul(h, graph.param("head")), labels)
        return graph, loss

    graph, _ = record()
    graph.backward()

    def loss_fn():
        g, loss = record()
        return float(g.value(loss))

    for name in ("k", "cb", "head"):
        tensor = store.tensors[name]
        for index in np.ndindex(tensor.shape):
            assert store.grads[name][index] == pytest.approx(_numeric_grad(loss_fn, tensor, index),
                                                             rel=1e-5, abs=1e-8)


def test_adaptive_network_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    store = ParamStore()
    store.add("w0", rng.normal(size=(6, 5)))
    store.add("b0", rng.normal(size=5))
    store.add("w1", rng.normal(size=(5, 3)))
    store.add("b1", rng.normal(size=3))
    site = store.add_adaptive(AdaptiveParams(0.9, 1.1))
    images = rng.normal(size=(8, 3, 2))
    labels = np.array([2, 0, 1, 1, 0, 2, 1, 0])
    assert store.num_parameters() <= 500

    graph, _ = _build_small_network(store, images, labels, site)
    graph.backward()

    def loss_fn():
        g, loss = _build_small_network(store, images, labels, AdaptiveParams(site.beta1, site.beta2))
        return float(g.value(loss))

    for name in ("w0", "b0", "w1", "b1"):
        tensor = store.tensors[name]
        for index in np.ndindex(tensor.shape):
            assert store.grads[name][index] == pytest.approx(_numeric_grad(loss_fn, tensor, index),
                                                             rel=1e-5, abs=1e-8)

    def loss_with(beta1, beta2):
        g, loss = _build_small_network(store, images, labels, AdaptiveParams(beta1, beta2))
        return float(g.value(loss))

    h = 1e-6
    numeric1 = (loss_with(0.9 + h, 1.1) - loss_with(0.9 - h, 1.1)) / (2 * h)
    numeric2 = (loss_with(0.9, 1.1 + h) - loss_with(0.9, 1.1 - h)) / (2 * h)
    assert site.grad_beta1 == pytest.approx(numeric1, rel=1e-5, abs=1e-9)
    assert site.grad_beta2 == pytest.approx(numeric2, rel=1e-5, abs=1e-9)


def test_sgd_step_examples():
    store = ParamStore()
    p = store.add("p", np.array([1.0, -2.0]))
    store.grads["p"][:] = [0.5, 0.25]

    sgd_step(store, lr=0.0, momentum=0.9, weight_decay=0.1)
    assert p.tolist() == [1.0, -2.0]

    store = ParamStore()
    p = store.add("p", np.array([1.0]))
    store.grads["p"][:] = [0.5]
    sgd_step(store, lr=0.1, momentum=0.0, weight_decay=0.0)
    assert p[0] == pytest.approx(1.0 - 0.1 * 0.5)


def test_sgd_momentum_two_steps():
    store = ParamStore()
    p = store.add("p", np.array([0.0]))
    g, lr = 0.5, 0.1
    for _ in range(2):
        store.grads["p"][:] = [g]
        sgd_step(store, lr=lr, momentum=0.9, weight_decay=0.0)
    assert p[0] == pytest.approx(-lr * (g + 1.9 * g), rel=1e-14)


def test_sgd_updates_betas_without_decay_and_skips_frozen():
    store = ParamStore()
    live = store.add_adaptive(AdaptiveParams(1.0, 1.0))
    frozen = store.add_adaptive(AdaptiveParams(1.0, 1.0, frozen=True))
    for site in (live, frozen):
        site.grad_beta1, site.grad_beta2 = 0.5, -0.5
    sgd_step(store, lr=0.1, momentum=0.9, weight_decay=10.0)
    assert (live.beta1, live.beta2) == pytest.approx((0.95, 1.05))
    assert (frozen.beta1, frozen.beta2) == (1.0, 1.0)


def test_sgd_aborts_on_non_finite_gradient():
    store = ParamStore()
    a = store.add("a", np.array([1.0]))
    store.add("b", np.array([1.0]))
    store.grads["a"][:] = [1.0]
    store.grads["b"][:] = [np.nan]
    with pytest.raises(NonFiniteGradientError):
        sgd_step(store, lr=0.1, momentum=0.0, weight_decay=0.0)
    assert a[0] == 1.0


def test_lr_schedule():
    assert lr_schedule(99, 100, 0.05) == 0.05
    assert lr_schedule(0, 100, 0.05) == pytest.approx(0.005)
    assert lr_schedule(9, 100, 0.05) == 0.05
    assert all(lr_schedule(s, 100, 0.0) == 0.0 for s in range(100))
    with pytest.raises(ValueError):
        lr_schedule(0, 0, 0.05)


def test_param_store_save_load(tmp_path):
    rng = np.random.default_rng(0)
    store = ParamStore()
    store.add("conv0.weight", rng.normal(size=(2, 1, 3, 3)))
    store.add("head.bias", np.arange(4.0))
    store.add_adaptive(AdaptiveParams(0.6, -1.3))
    path = tmp_path / "params.bin"
    store.save(path)

    loaded = ParamStore.load(path)
    assert list(loaded.tensors) == ["conv0.weight", "head.bias"]
    assert loaded.fingerprint() == store.fingerprint()
    assert loaded.num_parameters() == store.num_parameters() == 18 + 4 + 2
    assert path.read_bytes()[:4] == b"ULUK"


@pytest.mark.parametrize("blob", [b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00", b"ULUK\x02\x00\x00\x00\x00\x00\x00\x00",
                                  b"ULUK\x01\x00\x00\x00\x01\x00\x00\x00\x05",
                                  b"ULUK\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00\xff"])
def test_param_store_load_rejects(tmp_path, blob):
    path = tmp_path / "bad.bin"
    path.write_bytes(blob)
    with pytest.raises(ParamStoreFormatError):
        ParamStore.load(path)


def test_param_store_rejects_duplicate_names():
    store = ParamStore()
    store.add("w", np.zeros(2))
    with pytest.raises(ValueError):
        store.add("w", np.zeros(2))
