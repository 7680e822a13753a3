import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from immunekit.autodiff import Graph, backward, clip_to_ball, finite_diff_grad, forward
from immunekit.errors import GraphStateError, NumericError, ShapeError, StructuralError


def rel_err(a, b, floor=1e-4):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def test_identity_graph():
    g = Graph()
    x = g.input("x", width=2)
    g.set_loss(x)
    assert np.array_equal(forward(g, {"x": [0.2, 0.8]}), [0.2, 0.8])


def test_affine_relu_docstring_case():
    g = Graph()
    x = g.input("x", width=2)
    g.set_loss(g.relu(g.affine(x, g.param("w", np.eye(2)), g.param("b", np.zeros(2)))))
    assert np.array_equal(forward(g, {"x": np.array([-1.0, 2.0])}), [0.0, 2.0])


def test_two_layer_net_matches_hand_loop():
    gen = np.random.default_rng(4)
    w1, b1 = gen.normal(size=(2, 4)), gen.normal(size=4)
    w2, b2 = gen.normal(size=(4, 2)), gen.normal(size=2)
    xin = np.array([0.3, -0.7])
    g = Graph()
    x = g.input("x", width=2)
    h = g.relu(g.affine(x, g.param("w1", w1), g.param("b1", b1)))
    g.set_loss(g.affine(h, g.param("w2", w2), g.param("b2", b2)))
    out = forward(g, {"x": xin})
    hid = [max(0.0, sum(xin[i] * w1[i, j] for i in range(2)) + b1[j]) for j in range(4)]
    want = [sum(hid[j] * w2[j, k] for j in range(4)) + b2[k] for k in range(2)]
    assert np.allclose(out, want, rtol=0, atol=1e-14)


def test_ce_gradient_zero_at_confident_label():
    g = Graph()
    z = g.input("z", width=3)
    y = g.input("y", labels=True)
    g.set_loss(g.softmax_ce(z, y))
    forward(g, {"z": np.array([[800.0, 0.0, 0.0]]), "y": np.array([0])})
    assert np.array_equal(backward(g, ["z"])["z"], np.zeros((1, 3)))


def test_single_neuron_derivatives():
    g = Graph()
    x = g.input("x", width=1)
    w = g.param("w", [[2.5]])
    b = g.param("b", [0.5])
    g.set_loss(g.affine(x, w, b))
    forward(g, {"x": np.array([[3.0]])})
    d = backward(g, ["x", "w", "b"])
    assert d["x"][0, 0] == 2.5 and d["w"][0, 0] == 3.0 and d["b"][0] == 1.0


def test_backward_reaches_intermediate_node():
    gen = np.random.default_rng(0)
    g = Graph()
    x = g.input("x", width=3)
    y = g.input("y", labels=True)
    mid = g.tanh(g.affine(x, g.param("w", gen.normal(size=(3, 3))), g.param("b", np.zeros(3))))
    g.set_loss(g.softmax_ce(mid, y))
    xv, yv = gen.uniform(size=(2, 3)), np.array([0, 2])
    forward(g, {"x": xv, "y": yv})
    d = backward(g, [mid])[mid]

    def loss_of_mid(m):
        h = Graph()
        mi = h.input("m", width=3)
        h.set_loss(h.softmax_ce(mi, h.input("y", labels=True)))
        return forward(h, {"m": m, "y": yv})

    assert rel_err(d, finite_diff_grad(loss_of_mid, g.value(mid).copy())) < 1e-6


@pytest.mark.parametrize("act", ["relu", "tanh", "sigmoid"])
def test_random_three_layer_net_matches_finite_differences(act):
    gen = np.random.default_rng(7)
    widths = [5, 7, 6, 4]
    g = Graph()
    x = g.input("x", width=5)
    y = g.input("y", labels=True)
    h = x
    for i in range(3):
        h = g.affine(h, g.param(f"w{i}", gen.normal(size=(widths[i], widths[i + 1]))), g.param(f"b{i}", gen.normal(size=widths[i + 1])))
        if i < 2:
            h = getattr(g, act)(h)
    g.set_loss(g.softmax_ce(h, y))
    xv, yv = gen.uniform(size=(3, 5)), np.array([0, 3, 1])
    forward(g, {"x": xv, "y": yv})
    pre = [n for n in g.nodes if n.op == "affine"][:2]
    if act == "relu":
        assert min(np.abs(n.value).min() for n in pre) > 1e-3
    analytic = backward(g, ["x", "w0"])
    fd = finite_diff_grad(lambda v: forward(g, {"x": v, "y": yv}), xv)
    assert rel_err(analytic["x"], fd) < 1e-5
    w0 = g.nodes[g.params["w0"]].attrs["data"]
    fdw = finite_diff_grad(lambda v: forward(g, {"x": xv, "y": yv, "w0": v}), w0)
    assert rel_err(analytic["w0"], fdw) < 1e-5


@pytest.mark.parametrize("op", ["margin_hinge", "sq_dist"])
def test_extra_losses_match_finite_differences(op):
    gen = np.random.default_rng(11)
    g = Graph()
    z = g.input("z", width=4)
    if op == "margin_hinge":
        y = g.input("y", labels=True)
        g.set_loss(g.margin_hinge(z, y, 5.0))
        binds = {"y": np.array([1, 2, 0])}
    else:
        t = g.input("t", width=4)
        g.set_loss(g.sq_dist(z, t))
        binds = {"t": gen.normal(size=(3, 4))}
    zv = gen.normal(size=(3, 4))
    forward(g, {"z": zv, **binds})
    d = backward(g, ["z"])["z"]
    assert rel_err(d, finite_diff_grad(lambda v: forward(g, {"z": v, **binds}), zv)) < 1e-6


def test_non_scalar_loss_uses_upstream():
    g = Graph()
    x = g.input("x", width=2)
    g.set_loss(g.scale(x, 3.0))
    forward(g, {"x": np.ones((1, 2))})
    d = backward(g, ["x"], upstream=np.array([[1.0, 0.0]]))["x"]
    assert np.array_equal(d, [[3.0, 0.0]])


def test_finite_diff_examples():
    assert np.allclose(finite_diff_grad(lambda v: (v**2).sum(), np.array([1.0, 2.0])), [2.0, 4.0], atol=1e-6)
    assert np.array_equal(finite_diff_grad(lambda v: 3.0, np.array([1.0, 2.0])), [0.0, 0.0])
    with pytest.raises(NumericError):
        finite_diff_grad(lambda v: np.inf, np.array([1.0]))
    with pytest.raises(ValueError):
        finite_diff_grad(lambda v: 0.0, np.array([1.0]), h=0)


def test_errors():
    g = Graph()
    x = g.input("x", width=2)
    g.set_loss(g.relu(x))
    with pytest.raises(GraphStateError):
        backward(g, ["x"])
    with pytest.raises(ShapeError):
        forward(g, {"x": np.ones(3)})
    with pytest.raises(StructuralError):
        forward(g, {})
    with pytest.raises(StructuralError):
        g.input("x")
    forward(g, {"x": np.ones(2)})
    other = g.input("z", width=2)
    g.set_loss(g.relu(x))
    forward(g, {"x": np.ones(2), "z": np.ones(2)})
    with pytest.raises(StructuralError):
        backward(g, [other])


def test_non_finite_names_node():
    g = Graph()
    x = g.input("x", width=1)
    g.set_loss(g.scale(x, 1e308, name="blowup"))
    with np.errstate(over="ignore"), pytest.raises(NumericError, match="blowup"):
        forward(g, {"x": np.array([10.0])})


def test_forward_deterministic():
    gen = np.random.default_rng(1)
    g = Graph()
    x = g.input("x", width=8)
    g.set_loss(g.sigmoid(g.affine(x, g.param("w", gen.normal(size=(8, 8))), g.param("b", gen.normal(size=8)))))
    xv = gen.normal(size=(5, 8))
    assert forward(g, {"x": xv}).tobytes() == forward(g, {"x": xv}).tobytes()


def test_clip_to_ball_examples():
    assert clip_to_ball(np.array([0.7]), np.array([0.5]), 0.1)[0] == pytest.approx(0.6, abs=1e-15)
    assert clip_to_ball(np.array([0.55]), np.array([0.5]), 0.1)[0] == 0.55
    assert clip_to_ball(np.array([1.2]), np.array([1.0]), 0.5)[0] == 1.0
    with pytest.raises(ShapeError):
        clip_to_ball(np.zeros(2), np.zeros(3), 0.1)


wide = arrays(np.float64, 16, elements=st.floats(-0.5, 1.5, allow_nan=False))
unit = arrays(np.float64, 16, elements=st.floats(0.0, 1.0, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(wide, unit, st.floats(0.0, 0.6))
def test_clip_to_ball_properties(x, c, tau):
    out = clip_to_ball(x, c, tau)
    assert np.all(out >= 0.0) and np.all(out <= 1.0)
    assert np.all(np.abs(out - c) <= tau + 1e-15)
    assert np.array_equal(clip_to_ball(out, c, tau), out)
