import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from op_cases import OPS, op_cases
from tapm.models import ARCHITECTURES, build_model
from tapm.tensor_core import (DegenerateLossError, Graph, GraphError, backward, checkpoint_bytes,
                              conv2d_backward, conv2d_forward, cross_entropy, dlr_loss,
                              dlr_loss_grad, evaluate, finite_diff_check, parse_checkpoint,
                              relative_error)


def test_matmul_identity():
    g = Graph()
    x = g.input("x", (3,), batched=False)
    eye = g.param("I", (3, 3))
    out = g.matmul(x, eye)
    v = evaluate(g, {"x": np.array([1.0, 2.0, 3.0]), "I": np.eye(3)})
    np.testing.assert_array_equal(v[out], [1, 2, 3])


def test_relu_values():
    g = Graph()
    a = g.input("a", (3,), batched=False)
    r = g.relu(a)
    np.testing.assert_array_equal(evaluate(g, {"a": np.array([-1.0, 0.0, 2.0])})[r], [0, 0, 2])


def test_cross_entropy_uniform_logits_is_log_c():
    g = Graph()
    z = g.input("z", (4,))
    y = g.input("y", (), labels=True)
    loss = g.softmax_cross_entropy(z, y)
    v = evaluate(g, {"z": np.zeros((1, 4)), "y": np.array([2])})
    assert v[loss] == pytest.approx(math.log(4), abs=1e-12)


def test_square_gradient():
    g = Graph()
    x = g.input("x", (1,), batched=False)
    loss = g.sum(g.mul(x, x))
    grads = backward(g, evaluate(g, {"x": np.array([3.0])}), loss)
    np.testing.assert_allclose(grads[g.node_id("x")], [6.0])
    assert grads[loss] == 1.0


def test_cross_entropy_gradient_closed_form():
    g = Graph()
    z = g.input("z", (2,))
    y = g.input("y", (), labels=True)
    loss = g.softmax_cross_entropy(z, y)
    grads = backward(g, evaluate(g, {"z": np.zeros((1, 2)), "y": np.array([0])}), loss)
    np.testing.assert_allclose(grads[g.node_id("z")], [[-0.5, 0.5]])


def test_backward_rejects_non_scalar_loss():
    g = Graph()
    a = g.input("a", (3,))
    r = g.relu(a)
    with pytest.raises(GraphError):
        backward(g, evaluate(g, {"a": np.ones((2, 3))}), r)


def test_shape_mismatch_names_the_node():
    g = Graph()
    g.input("x", (3,))
    with pytest.raises(GraphError) as info:
        evaluate(g, {"x": np.ones((2, 4))})
    assert info.value.name == "x"


def test_unbound_input_is_an_error():
    g = Graph()
    g.input("x", (3,))
    with pytest.raises(GraphError, match="unbound"):
        evaluate(g, {})


def test_graph_construction_rejects_bad_shapes():
    g = Graph()
    x = g.input("x", (3,))
    w = g.param("w", (4, 2))
    with pytest.raises(GraphError):
        g.matmul(x, w)
    with pytest.raises(GraphError):
        g.input("x", (2,))  # duplicate name


def test_conv2d_4x4_with_2x2_kernel_matches_finite_differences():
    g, b = op_cases(3)["conv2d"]
    rep = finite_diff_check(g, b, h=1e-5, tol=1e-4, n_coords=100)
    assert rep.passed, rep.max_rel_error


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    out = conv2d_forward(x, w, stride=2, pad=1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o])
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)
    # adjoint identity <conv(x), g> = <x, conv^T(g)>
    gout = rng.normal(size=out.shape)
    gx, gw = conv2d_backward(x, w, gout, stride=2, pad=1)
    assert np.sum(out * gout) == pytest.approx(np.sum(x * gx), rel=1e-12)
    assert np.sum(out * gout) == pytest.approx(np.sum(w * gw), rel=1e-12)


@pytest.mark.parametrize("op", OPS)
def test_every_op_passes_finite_differences(op):
    for seed in range(3):
        g, b = op_cases(seed)[op]
        rep = finite_diff_check(g, b, h=1e-5, tol=1e-4, n_coords=100, seed=seed)
        assert rep.passed, (op, seed, rep.max_rel_error)


def test_linear_model_gradients_are_exact_to_rounding():
    g, b = op_cases(5)["matmul"]
    rep = finite_diff_check(g, b, h=1e-3)
    assert max(rep.max_rel_error.values()) < 1e-8


def test_two_layer_mlp_away_from_kinks():
    rng = np.random.default_rng(1)
    g = Graph()
    x = g.input("x", (6,))
    y = g.input("y", (), labels=True)
    h = g.relu(g.add(g.matmul(x, g.param("w1", (6, 8))), g.param("b1", (8,)), axis=-1))
    z = g.matmul(h, g.param("w2", (8, 3)))
    g.softmax_cross_entropy(z, y)
    b = {"x": rng.normal(size=(4, 6)), "y": np.array([0, 1, 2, 0]),
         "w1": rng.normal(size=(6, 8)), "b1": rng.normal(size=8), "w2": rng.normal(size=(8, 3))}
    rep = finite_diff_check(g, b, tol=1e-4)
    assert rep.passed, rep.max_rel_error


def test_relu_exactly_at_zero_is_skipped():
    g = Graph()
    a = g.input("a", (3,), batched=False)
    g.sum(g.relu(a))
    rep = finite_diff_check(g, {"a": np.array([0.0, 1.0, -1.0])}, n_coords=3)
    assert rep.skipped["a"] == 1
    assert rep.checked["a"] == 2
    # subgradient at zero is defined as 0
    grads = backward(g, evaluate(g, {"a": np.array([0.0, 1.0, -1.0])}))
    np.testing.assert_array_equal(grads[g.node_id("a")], [0.0, 1.0, 0.0])


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_catalog_models_pass_finite_differences(arch):
    clf = build_model(arch, (3, 12, 12), 4, seed=2)
    g = clf.graph
    rng = np.random.default_rng(2)
    x = rng.uniform(0, 1, size=(2, 3, 12, 12))
    vals = clf.forward(x)
    z = vals[clf.logits_node]
    seed = rng.normal(size=z.shape)
    grads = clf.vjp(vals, clf.logits_node, seed)
    analytic = grads[g.node_id("x")].ravel()
    h = 1e-5
    for c in rng.choice(x.size, 20, replace=False):
        xp, xm = x.copy().ravel(), x.copy().ravel()
        xp[c] += h
        xm[c] -= h
        fp = np.sum(seed * clf.forward(xp.reshape(x.shape))[clf.logits_node])
        fm = np.sum(seed * clf.forward(xm.reshape(x.shape))[clf.logits_node])
        assert relative_error(analytic[c], (fp - fm) / (2 * h)) < 1e-4


def test_dlr_hand_values():
    assert dlr_loss(np.array([3.0, 1.0, 0.0]), 0) == pytest.approx(-2 / 3)
    assert dlr_loss(np.array([1.0, 3.0, 0.0]), 0) == pytest.approx(2 / 3)


def test_dlr_degenerate_and_too_few_classes():
    with pytest.raises(DegenerateLossError):
        dlr_loss(np.array([2.0, 2.0, 2.0]), 1)
    g = Graph()
    z = g.input("z", (2,))
    y = g.input("y", (), labels=True)
    with pytest.raises(GraphError):
        g.dlr_loss(z, y)


def test_dlr_gradient_matches_differences():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(5, 6))
    y = rng.integers(0, 6, size=5)
    gz = dlr_loss_grad(z, y)
    h = 1e-6
    for i in range(5):
        for j in range(6):
            zp, zm = z.copy(), z.copy()
            zp[i, j] += h
            zm[i, j] -= h
            num = (dlr_loss(zp[i], y[i]) - dlr_loss(zm[i], y[i])) / (2 * h)
            assert gz[i, j] == pytest.approx(num, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8), st.data())
def test_cross_entropy_is_nonnegative(logits, data):
    y = data.draw(st.integers(0, len(logits) - 1))
    assert cross_entropy(np.array([logits]), np.array([y]))[0] >= 0


def test_evaluate_is_pure():
    clf = build_model("cnn-small", (3, 12, 12), 4, seed=0)
    x = np.random.default_rng(0).uniform(size=(3, 3, 12, 12))
    a = clf.forward(x)[clf.logits_node]
    b = clf.forward(x.copy())[clf.logits_node]
    assert a.tobytes() == b.tobytes()


def test_non_finite_forward_raises():
    g = Graph()
    a = g.input("a", (2,), batched=False)
    g.scale(a, 1e300)
    with pytest.raises(GraphError):
        evaluate(g, {"a": np.array([1e300, 1.0])})


@settings(max_examples=25, deadline=None)
@given(st.dictionaries(st.text("abcdefgh", min_size=1, max_size=6),
                       st.lists(st.integers(1, 4), min_size=0, max_size=3), max_size=4),
       st.integers(0, 2**31 - 1))
def test_checkpoint_roundtrip(shapes, seed):
    rng = np.random.default_rng(seed)
    params = {k: rng.normal(size=tuple(v)) for k, v in shapes.items()}
    back = parse_checkpoint(checkpoint_bytes(params))
    assert list(back) == list(params)
    for k in params:
        assert back[k].shape == params[k].shape
        assert back[k].tobytes() == np.asarray(params[k], dtype="<f8").tobytes()


def test_checkpoint_header_layout():
    blob = checkpoint_bytes({"w": np.arange(6.0).reshape(2, 3)})
    assert blob[:4] == b"TAPM"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 1
    with pytest.raises(ValueError):
        parse_checkpoint(b"XXXX" + blob[4:])
