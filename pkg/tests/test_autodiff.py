import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from umbpo import autodiff as ad
from umbpo.params import ParamSet, init_mlp, mlp_forward


def test_record_add():
    tape = ad.Tape()
    x, y = tape.constant([1.0, 2.0]), tape.constant([3.0, 4.0])
    np.testing.assert_array_equal(tape.record("add", [x, y]).value, [4.0, 6.0])


def test_record_matmul_identity_rows():
    tape = ad.Tape()
    W = tape.constant([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    v = tape.constant([5.0, 6.0, 7.0])
    np.testing.assert_array_equal(tape.record("matmul", [W, v]).value, [5.0, 7.0])


def test_record_tanh_zero():
    tape = ad.Tape()
    assert tape.record("tanh", [tape.constant([0.0])]).value[0] == 0.0


def test_unknown_primitive_rejected():
    tape = ad.Tape()
    with pytest.raises(KeyError):
        tape.record("erf", [tape.constant(1.0)])


def test_shape_error_names_operation():
    tape = ad.Tape()
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(tape.variable(np.ones((2, 3))), np.ones((2, 3)))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(tape.variable(np.ones(3)), np.ones(4))


def test_cross_tape_inputs_rejected():
    a, b = ad.Tape(), ad.Tape()
    with pytest.raises(ValueError):
        ad.add(a.variable(1.0), b.variable(2.0))


def test_grad_of_sum_of_squares():
    tape = ad.Tape()
    x = tape.variable([1.0, 2.0, 3.0], name="x")
    grads = tape.backward(ad.sum_(ad.mul(x, x)))
    np.testing.assert_array_equal(grads["x"], [2.0, 4.0, 6.0])


def test_grad_tanh_linearisation_at_zero():
    x = np.array([0.3, -1.2, 2.0])
    tape = ad.Tape()
    w = tape.variable(np.zeros(3), name="w")
    grads = tape.backward(ad.tanh(ad.sum_(ad.mul(w, x))))
    np.testing.assert_allclose(grads["w"], x, rtol=0, atol=1e-15)


def test_root_adjoint_is_one_and_scalar_required():
    tape = ad.Tape()
    x = tape.variable([1.0, 2.0], name="x")
    root = ad.sum_(ad.square(x))
    tape.backward(root)
    assert tape.grad(root) == 1.0
    with pytest.raises(ValueError):
        tape.backward(ad.square(x))


def test_inputs_reference_earlier_nodes():
    tape = ad.Tape()
    x = tape.variable(np.ones((2, 2)), name="x")
    ad.sum_(ad.tanh(ad.matmul(x, x)))
    for i, ins in enumerate(tape.inputs):
        assert all(j < i for j in ins)


def _mlp_loss(flat, params, arch, x):
    p = params.unflatten(flat)
    return float(np.sum(mlp_forward(p, x, arch) ** 2))


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(0)
    arch = [3, 5, 2]
    params = init_mlp(arch, rng)
    x = rng.normal(size=(4, 3))
    tape = ad.Tape()
    nodes = params.on_tape(tape)
    grads = tape.backward(ad.sum_(ad.square(mlp_forward(nodes, tape.constant(x), arch))))
    analytic = np.concatenate([grads[k].ravel() for k in params])
    numeric = ad.numerical_gradient(lambda f: _mlp_loss(f, params, arch, x), params.flatten())
    assert ad.max_relative_error(analytic, numeric) < 1e-6


# one builder per primitive, each mapping a node/array x (shape (3, 4)) to a scalar
PRIMITIVE_GRAPHS = {
    "add": lambda x: ad.sum_(ad.add(x, np.arange(4.0))),
    "sub": lambda x: ad.sum_(ad.square(ad.sub(np.ones((3, 4)), x))),
    "mul": lambda x: ad.sum_(ad.mul(x, x)),
    "div": lambda x: ad.sum_(ad.div(x, ad.add(ad.square(x), 1.0))),
    "scale": lambda x: ad.sum_(ad.scale(ad.square(x), -2.5)),
    "matmul": lambda x: ad.sum_(ad.square(ad.matmul(x, np.linspace(-1, 1, 8).reshape(4, 2)))),
    "tanh": lambda x: ad.sum_(ad.tanh(x)),
    "relu": lambda x: ad.sum_(ad.mul(ad.relu(x), x)),
    "square": lambda x: ad.sum_(ad.square(x)),
    "sqrt": lambda x: ad.sum_(ad.sqrt(ad.square(x), 1e-3)),
    "sin": lambda x: ad.sum_(ad.sin(x)),
    "cos": lambda x: ad.sum_(ad.cos(x)),
    "atan2": lambda x: ad.sum_(ad.atan2(x, ad.add(ad.square(x), 0.5))),
    "clip": lambda x: ad.sum_(ad.square(ad.clip(x, -0.7, 0.7))),
    "sum": lambda x: ad.sum_(ad.square(ad.sum_(x, axis=0))),
    "mean": lambda x: ad.sum_(ad.square(ad.mean(x, axis=1, keepdims=True))),
    "concat": lambda x: ad.sum_(ad.square(ad.concat([x, ad.tanh(x)], axis=-1))),
    "slice": lambda x: ad.sum_(ad.square(x[1:, ::2])),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_GRAPHS))
def test_primitive_gradients(name):
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(3, 4))
    # keep relu/clip evaluation points away from their kinks
    x0[np.abs(x0) < 0.05] += 0.2
    x0[np.abs(np.abs(x0) - 0.7) < 0.05] += 0.2
    f = PRIMITIVE_GRAPHS[name]
    tape = ad.Tape()
    x = tape.variable(x0, name="x")
    analytic = tape.backward(f(x))["x"]
    numeric = ad.numerical_gradient(lambda v: f(v), x0)
    assert ad.max_relative_error(analytic, numeric) < 1e-5


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), depth=st.integers(1, 50))
def test_random_composed_graphs(seed, depth):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=4)
    ops = rng.integers(0, 6, size=depth)
    coef = rng.uniform(0.02, 0.1, size=depth)

    # residual blocks keep gradients O(1) so finite differences stay accurate
    def f(x):
        h = x
        for op, c in zip(ops, coef):
            if op == 0:
                g = ad.tanh(ad.scale(h, 2.0))
            elif op == 1:
                g = ad.sin(h)
            elif op == 2:
                g = ad.mul(h, ad.cos(h))
            elif op == 3:
                g = ad.square(ad.tanh(h))
            elif op == 4:
                g = ad.sqrt(ad.add(ad.square(h), 0.5), 1e-12)
            else:
                g = ad.add(ad.mean(h), ad.relu(h))
            h = ad.add(h, ad.scale(g, c))
        return ad.sum_(h)

    tape = ad.Tape()
    analytic = tape.backward(f(tape.variable(x0, name="x")))["x"]
    numeric = ad.numerical_gradient(f, x0)
    assert ad.max_relative_error(analytic, numeric) < 1e-5


def test_adjoint_accumulation_is_linear():
    rng = np.random.default_rng(2)
    x0 = rng.normal(size=5)
    a, b = 1.7, -0.4

    def grad(build):
        tape = ad.Tape()
        return tape.backward(build(tape.variable(x0, name="x")))["x"]

    f = lambda x: ad.sum_(ad.tanh(x))
    g = lambda x: ad.sum_(ad.mul(ad.sin(x), x))
    combined = grad(lambda x: ad.add(ad.scale(f(x), a), ad.scale(g(x), b)))
    np.testing.assert_allclose(combined, a * grad(f) + b * grad(g), rtol=1e-14, atol=1e-15)


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    params = init_mlp([2, 8, 1], rng)
    x = rng.normal(size=(6, 2))

    def run():
        tape = ad.Tape()
        nodes = params.on_tape(tape)
        return tape.backward(ad.mean(ad.square(mlp_forward(nodes, x, [2, 8, 1]))))

    g1, g2 = run(), run()
    for k in g1:
        assert np.array_equal(g1[k], g2[k])


def test_adjoint_read_only_after_all_writes():
    rng = np.random.default_rng(4)
    arch = [3, 6, 6, 2]
    params = init_mlp(arch, rng)
    tape = ad.Tape()
    nodes = params.on_tape(tape)
    h = mlp_forward(nodes, rng.normal(size=(5, 3)), arch)
    root = ad.sum_(ad.add(ad.square(h), ad.tanh(h)))  # h has two consumers
    trace = []
    tape.backward(root, trace=trace)
    last_write, first_read = {}, {}
    for pos, (kind, i) in enumerate(trace):
        if kind == "write":
            last_write[i] = pos
        else:
            first_read.setdefault(i, pos)
    for i, pos in first_read.items():
        assert last_write.get(i, -1) < pos


def test_mlp_zero_weights_give_zero_output():
    arch = [3, 4, 2]
    params = init_mlp(arch, np.random.default_rng(0)).map(np.zeros_like)
    np.testing.assert_array_equal(mlp_forward(params, np.random.default_rng(1).normal(size=(7, 3)), arch),
                                  np.zeros((7, 2)))


def test_single_identity_layer():
    params = ParamSet({"W0": np.eye(3), "b0": np.zeros(3)})
    x = np.array([[0.5, -2.0, 3.0]])
    np.testing.assert_array_equal(mlp_forward(params, x, [3, 3]), x)


def test_mlp_matches_scalar_reference():
    rng = np.random.default_rng(7)
    arch = [3, 32, 32, 1]
    params = init_mlp(arch, rng)
    x = [0.3, -0.8, 1.1]
    h = list(x)
    for layer in range(3):
        W, b = params[f"W{layer}"], params[f"b{layer}"]
        out = []
        for j in range(W.shape[1]):
            acc = b[j]
            for i in range(W.shape[0]):
                acc += h[i] * W[i, j]
            out.append(np.tanh(acc) if layer < 2 else acc)
        h = out
    np.testing.assert_allclose(mlp_forward(params, np.array(x), arch), h, rtol=1e-13, atol=1e-14)


def test_eager_and_taped_forward_agree():
    rng = np.random.default_rng(8)
    arch = [2, 5, 3]
    params = init_mlp(arch, rng)
    x = rng.normal(size=(4, 2))
    tape = ad.Tape()
    taped = mlp_forward(params.on_tape(tape), tape.constant(x), arch)
    assert np.array_equal(taped.value, mlp_forward(params, x, arch))


def test_sqrt_epsilon_keeps_gradient_finite_at_zero():
    tape = ad.Tape()
    x = tape.variable(np.zeros(3), name="x")
    grads = tape.backward(ad.sum_(ad.sqrt(ad.square(x))))
    assert np.all(np.isfinite(grads["x"]))
