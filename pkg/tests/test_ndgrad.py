import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noopdc.ndgrad import (
    Adam,
    AdamState,
    CheckpointFormatError,
    Graph,
    GraphError,
    NonFiniteError,
    Tensor,
    adam_step,
    grad_check,
)
from noopdc.ndgrad import checkpoint
from noopdc.ndgrad import functional as F

N_INSTANCES = 10


def weighted(out: Tensor, r: np.ndarray) -> Tensor:
    return F.sum(F.mul(out, r))


def away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, x + np.sign(x + 1e-9) * 2 * margin, x)


# ---------------------------------------------------------------- examples


def test_add_example():
    np.testing.assert_array_equal(F.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_conv_full_overlap_center():
    out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
    assert out.data[0, 0, 1, 1] == 9.0
    assert out.data[0, 0, 0, 0] == 4.0


def test_relu_example():
    np.testing.assert_array_equal(F.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    F.sum(F.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_mean():
    x = Tensor(np.arange(4.0), requires_grad=True)
    F.mean(x).backward()
    np.testing.assert_array_equal(x.grad, [0.25] * 4)


def test_conv_relu_chain_matches_finite_differences():
    rng = np.random.default_rng(3)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    r = rng.normal(size=(2, 3, 5, 5))
    x = Tensor(rng.normal(size=(2, 2, 5, 5)))
    err = grad_check(lambda t: weighted(F.relu(F.conv2d(t, w, padding=1)), r), x)
    assert err < 1e-4


# ---------------------------------------------------------------- grad_check


def test_grad_check_sum_of_squares():
    assert grad_check(lambda t: F.sum(F.mul(t, t)), Tensor([1.0, 2.0])) < 1e-8


def test_grad_check_constant_function():
    c = Tensor(np.array(5.0))
    assert grad_check(lambda t: F.add(F.scale(F.sum(t), 0.0), c), Tensor([1.0, 2.0])) == 0.0


def test_grad_check_rejects_non_scalar():
    with pytest.raises(ValueError):
        grad_check(lambda t: F.mul(t, t), Tensor([1.0, 2.0]))


def test_grad_check_requires_float64():
    with pytest.raises(TypeError):
        grad_check(lambda t: F.sum(t), Tensor(np.ones(2, np.float32)))


# ------------------------------------------------------- per-primitive oracle


def _unary_cases():
    return {
        "scale": (lambda x: F.scale(x, -1.7), (3, 4)),
        "shift": (lambda x: F.shift(x, 0.3), (3, 4)),
        "relu": (F.relu, (3, 4)),
        "silu": (F.silu, (3, 4)),
        "exp": (F.exp, (3, 4)),
        "sum_axis": (lambda x: F.sum(x, axis=1, keepdims=True), (3, 4)),
        "mean_axis": (lambda x: F.mean(x, axis=(0, 2)), (2, 3, 4)),
        "logsumexp": (lambda x: F.logsumexp(x, axis=1), (3, 5)),
        "reshape": (lambda x: F.reshape(x, (4, 3)), (3, 4)),
        "repeat": (lambda x: F.repeat(x, 3, axis=0), (2, 4)),
        "upsample2x": (F.upsample2x, (2, 2, 3, 3)),
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()))
def test_unary_primitive_gradients(name):
    fn, shape = _unary_cases()[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(N_INSTANCES):
        x = Tensor(away_from_zero(rng, shape))
        r = rng.normal(size=fn(Tensor(x.data)).shape)
        assert grad_check(lambda t: weighted(fn(t), r), x) < 1e-4


def test_sqrt_and_log_gradients():
    rng = np.random.default_rng(11)
    for _ in range(N_INSTANCES):
        x = Tensor(rng.uniform(0.5, 2.0, size=(3, 3)))
        r = rng.normal(size=(3, 3))
        assert grad_check(lambda t: weighted(F.sqrt(t), r), x) < 1e-4
        assert grad_check(lambda t: weighted(F.log(t), r), x) < 1e-4


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "sqdiff_sum"])
def test_binary_primitive_gradients_with_broadcast(op):
    rng = np.random.default_rng(5)
    fn = {
        "add": F.add,
        "sub": F.sub,
        "mul": F.mul,
        "div": F.div,
        "sqdiff_sum": lambda a, b: F.sqdiff_sum(a, b, axis=(2,)),
    }[op]
    for _ in range(N_INSTANCES):
        a = rng.normal(size=(2, 3, 4))
        b = rng.uniform(0.5, 1.5, size=(2, 1, 4))
        r = rng.normal(size=fn(Tensor(a), Tensor(b)).shape)
        assert grad_check(lambda t: weighted(fn(t, Tensor(b)), r), Tensor(a.copy())) < 1e-4
        assert grad_check(lambda t: weighted(fn(Tensor(a), t), r), Tensor(b.copy())) < 1e-4


def test_matmul_gradients():
    rng = np.random.default_rng(6)
    for _ in range(N_INSTANCES):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        r = rng.normal(size=(3, 2))
        assert grad_check(lambda t: weighted(F.matmul(t, Tensor(b)), r), Tensor(a.copy())) < 1e-4
        assert grad_check(lambda t: weighted(F.matmul(Tensor(a), t), r), Tensor(b.copy())) < 1e-4


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_gradients(stride):
    rng = np.random.default_rng(7 + stride)
    for _ in range(N_INSTANCES):
        x = rng.normal(size=(2, 2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out_shape = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=1).shape
        r = rng.normal(size=out_shape)

        def conv(xx, ww, bb):
            return weighted(F.conv2d(xx, ww, bb, stride=stride, padding=1), r)

        assert grad_check(lambda t: conv(t, Tensor(w), Tensor(b)), Tensor(x.copy())) < 1e-4
        assert grad_check(lambda t: conv(Tensor(x), t, Tensor(b)), Tensor(w.copy())) < 1e-4
        assert grad_check(lambda t: conv(Tensor(x), Tensor(w), t), Tensor(b.copy())) < 1e-4


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradients(training):
    rng = np.random.default_rng(8)
    for _ in range(N_INSTANCES):
        x = rng.normal(size=(3, 2, 3, 3))
        gamma, beta = rng.normal(size=2), rng.normal(size=2)
        rm, rv = rng.normal(size=2), rng.uniform(0.5, 2, size=2)
        r = rng.normal(size=x.shape)

        def bn(xx, gg, bb):
            return weighted(F.batch_norm(xx, gg, bb, rm.copy(), rv.copy(), training=training), r)

        assert grad_check(lambda t: bn(t, Tensor(gamma), Tensor(beta)), Tensor(x.copy())) < 1e-4
        assert grad_check(lambda t: bn(Tensor(x), t, Tensor(beta)), Tensor(gamma.copy())) < 1e-4
        assert grad_check(lambda t: bn(Tensor(x), Tensor(gamma), t), Tensor(beta.copy())) < 1e-4


def test_embedding_and_concat_gradients():
    rng = np.random.default_rng(9)
    for _ in range(N_INSTANCES):
        table = rng.normal(size=(4, 3))
        idx = rng.integers(0, 4, size=6)
        r = rng.normal(size=(6, 3))
        assert grad_check(lambda t: weighted(F.embedding(t, idx), r), Tensor(table.copy())) < 1e-4
        a, b = rng.normal(size=(2, 1, 2, 2)), rng.normal(size=(2, 3, 2, 2))
        rc = rng.normal(size=(2, 4, 2, 2))
        assert grad_check(lambda t: weighted(F.concat([t, Tensor(b)]), rc), Tensor(a.copy())) < 1e-4
        assert grad_check(lambda t: weighted(F.concat([Tensor(a), t]), rc), Tensor(b.copy())) < 1e-4


# ---------------------------------------------------------------- semantics


def test_batch_norm_running_stats_and_eval_mode():
    x = Tensor(np.arange(8.0).reshape(2, 1, 2, 2))
    rm, rv = np.zeros(1), np.ones(1)
    out = F.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, training=True)
    assert abs(out.data.mean()) < 1e-12
    np.testing.assert_allclose(rm, [0.35])
    np.testing.assert_allclose(rv, [0.9 + 0.1 * np.var(np.arange(8.0), ddof=1)])
    ev = F.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, training=False)
    np.testing.assert_allclose(ev.data, (x.data - 0.35) / np.sqrt(rv + 1e-5))


def test_fan_out_accumulates_exactly():
    rng = np.random.default_rng(1)
    xv = rng.normal(size=5)
    x = Tensor(xv, requires_grad=True)
    F.add(F.sum(F.mul(x, x)), F.sum(F.exp(x))).backward()
    xf = Tensor(xv, requires_grad=True)
    F.sum(F.mul(xf, xf)).backward()
    xg = Tensor(xv, requires_grad=True)
    F.sum(F.exp(xg)).backward()
    np.testing.assert_array_equal(x.grad, xf.grad + xg.grad)


def test_graph_topological_order():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = F.mul(x, x)
    loss = F.sum(F.add(y, F.exp(y)))
    graph = Graph.from_loss(loss)
    position = {id(t): i for i, t in enumerate(graph.tensors)}
    for t in graph.tensors:
        for inp in t._node.inputs:
            if inp._node is not None:
                assert position[id(inp)] < position[id(t)]
    assert len({n.id for n in graph.nodes}) == len(graph.nodes)


def test_backward_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GraphError):
        F.mul(x, x).backward()
    loss = F.sum(F.mul(x, x))
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_shape_mismatch_errors():
    with pytest.raises(ValueError):
        F.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ValueError):
        F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError):
        F.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        F.log(Tensor([0.0]))


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(size=(2, 2, 8, 8)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 2, 3, 3)).astype(np.float32), requires_grad=True)
        out = F.silu(F.conv2d(x, w, stride=2, padding=1))
        loss = F.sum(F.mul(out, out))
        loss.backward()
        return out.data, x.grad, w.grad

    a, b = run(), run()
    for u, v in zip(a, b):
        assert u.tobytes() == v.tobytes()


def test_float32_is_preserved():
    x = Tensor(np.ones((1, 1, 4, 4), np.float32), requires_grad=True)
    w = Tensor(np.ones((1, 1, 3, 3), np.float32))
    out = F.silu(F.scale(F.conv2d(x, w, padding=1), 0.5))
    assert out.dtype == np.float32
    F.mean(out).backward()
    assert x.grad.dtype == np.float32


# ---------------------------------------------------------------- adam


def test_adam_first_step_magnitude_is_lr():
    rng = np.random.default_rng(0)
    for scale in (1e-6, 1.0, 1e4):
        p = rng.normal(size=10)
        g = rng.normal(size=10) * scale
        before = p.copy()
        adam_step({"p": p}, {"p": g}, AdamState(lr=0.01))
        delta = np.abs(p - before)
        assert np.all(delta <= 0.01 * (1 + 1e-6))
        np.testing.assert_allclose(np.sign(before - p), np.sign(g))


def test_adam_zero_gradient_is_identity():
    p = np.array([1.0, -2.0, 3.0])
    state = AdamState(lr=0.1)
    for _ in range(5):
        adam_step({"p": p}, {"p": np.zeros(3)}, state)
    np.testing.assert_array_equal(p, [1.0, -2.0, 3.0])
    assert state.step == 5


def test_adam_quadratic_bowl():
    x = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam({"x": x}, lr=1e-1)
    for _ in range(500):
        opt.zero_grad()
        d = F.shift(x, -3.0)
        F.sum(F.mul(d, d)).backward()
        opt.step()
    assert abs(x.data[0] - 3.0) < 1e-2
    assert opt.state.step == 500


def test_adam_errors():
    with pytest.raises(ValueError):
        AdamState(lr=0.0)
    with pytest.raises(ValueError):
        adam_step({"p": np.ones(2)}, {"p": np.ones(3)}, AdamState(lr=0.1))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.floats(1e-4, 1.0))
def test_adam_moments_shape_congruent(values, lr):
    p = np.array(values)
    state = AdamState(lr=lr)
    adam_step({"p": p}, {"p": np.ones_like(p)}, state)
    assert state.m["p"].shape == p.shape and state.v["p"].shape == p.shape


# ---------------------------------------------------------------- NOCK1


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a.weight": rng.normal(size=(2, 3)).astype(np.float32),
        "b": rng.normal(size=(4,)),
        "scalar": np.array(1.5),
    }
    path = tmp_path / "x.nock"
    checkpoint.save(path, tensors)
    back = checkpoint.load(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype
        assert back[k].tobytes() == tensors[k].tobytes()


def test_checkpoint_layout_bytes():
    buf = checkpoint.dumps({"w": np.array([1.0, 2.0], np.float32)})
    expected = b"NOCK1" + (1).to_bytes(4, "little") + (1).to_bytes(2, "little") + b"w"
    expected += bytes([0, 1]) + (2).to_bytes(4, "little") + np.array([1.0, 2.0], "<f4").tobytes()
    assert buf == expected


def test_checkpoint_bad_magic_and_truncation():
    with pytest.raises(CheckpointFormatError):
        checkpoint.loads(b"NOPE1" + bytes(4))
    buf = checkpoint.dumps({"w": np.ones(3)})
    with pytest.raises(CheckpointFormatError):
        checkpoint.loads(buf[:-1])


@pytest.mark.parametrize("rows", [1, 3, 300, 700])
def test_forward_products_are_batch_invariant(rows):
    rng = np.random.default_rng(rows)
    x = rng.standard_normal((rows, 576)).astype(np.float32)
    w = rng.standard_normal((576, 64)).astype(np.float32)
    full = F.matmul(Tensor(x), Tensor(w)).data
    for i in {0, rows // 2, rows - 1}:
        assert F.matmul(Tensor(x[i:i + 1]), Tensor(w)).data.tobytes() == full[i:i + 1].tobytes()
    img = rng.standard_normal((rows % 5 + 2, 16, 8, 8)).astype(np.float32)
    k = rng.standard_normal((32, 16, 3, 3)).astype(np.float32)
    conv = F.conv2d(Tensor(img), Tensor(k), padding=1).data
    assert F.conv2d(Tensor(img[1:2]), Tensor(k), padding=1).data.tobytes() == conv[1:2].tobytes()
