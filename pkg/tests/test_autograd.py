import numpy as np
import pytest

from seqrec import autograd as ag
from seqrec.autograd import Tape, Tensor, GraphError

H = 1e-5


def contract(y: Tensor, r: np.ndarray) -> Tensor:
    """Scalar <y, r> built from tape ops, so the upstream gradient is ``r``."""
    flat = ag.reshape(y, (1, -1))
    return ag.sum_all(ag.matmul(flat, Tensor(r.reshape(-1, 1))))


def grad_check(op_name, fn, inputs):
    """Compare tape gradients with central differences for every input.

    ``fn`` maps a list of Tensors to an output Tensor. All arrays are float64.
    """
    rng = np.random.default_rng(123)
    tensors = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    with Tape() as tape:
        out = fn(tensors)
        r = rng.standard_normal(out.shape)
        tape.backward(contract(out, r))

    def value(arrays):
        return float((fn([Tensor(a) for a in arrays]).data * r).sum())

    for which, t in enumerate(tensors):
        num = np.zeros_like(inputs[which])
        for idx in np.ndindex(num.shape):
            plus = [x.copy() for x in inputs]
            minus = [x.copy() for x in inputs]
            plus[which][idx] += H
            minus[which][idx] -= H
            num[idx] = (value(plus) - value(minus)) / (2 * H)
        ana = t.grad
        rel = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-6)
        worst = np.unravel_index(int(np.argmax(rel)), rel.shape)
        assert rel[worst] < 1e-4, f"{op_name}: input {which} coordinate {worst} rel err {rel[worst]:.2e}"


def shapes(seed):
    rng = np.random.default_rng(seed)
    return rng, int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(2, 6))


@pytest.mark.parametrize("seed", range(10))
def test_matmul_gradient(seed):
    rng, b, n, d = shapes(seed)
    m = int(rng.integers(1, 5))
    grad_check("matmul-2d", lambda t: ag.matmul(t[0], t[1]), [rng.standard_normal((b, n, d)), rng.standard_normal((d, m))])
    grad_check("matmul-batched", lambda t: ag.matmul(t[0], t[1]),
               [rng.standard_normal((b, n, d)), rng.standard_normal((b, d, m))])


@pytest.mark.parametrize("seed", range(10))
def test_add_scale_gradient(seed):
    rng, b, n, d = shapes(seed)
    grad_check("add-broadcast", lambda t: ag.add(t[0], t[1]), [rng.standard_normal((b, n, d)), rng.standard_normal((d,))])
    grad_check("add-same", lambda t: ag.add(t[0], t[1]), [rng.standard_normal((n, d)), rng.standard_normal((n, d))])
    grad_check("scale", lambda t: ag.scale(t[0], -1.7), [rng.standard_normal((b, d))])
    c = rng.standard_normal((n, d))
    grad_check("add_constant", lambda t: ag.add_constant(t[0], c), [rng.standard_normal((b, n, d))])


@pytest.mark.parametrize("seed", range(10))
def test_gather_gradient(seed):
    rng, b, n, d = shapes(seed)
    idx = rng.integers(0, 4, size=(b, n))  # repeats on purpose
    grad_check("embedding_gather", lambda t: ag.embedding_gather(t[0], idx), [rng.standard_normal((4, d))])


@pytest.mark.parametrize("seed", range(10))
def test_softmax_gelu_gradient(seed):
    rng, b, n, d = shapes(seed)
    grad_check("softmax", lambda t: ag.softmax(t[0]), [rng.standard_normal((b, n, d)) * 2])
    grad_check("gelu", lambda t: ag.gelu(t[0]), [rng.standard_normal((b, n, d)) * 2])


@pytest.mark.parametrize("seed", range(10))
def test_layer_norm_gradient(seed):
    rng, b, n, d = shapes(seed)
    d = max(d, 3)
    grad_check("layer_norm", lambda t: ag.layer_norm(t[0], t[1], t[2]),
               [rng.standard_normal((b, n, d)), rng.standard_normal(d), rng.standard_normal(d)])


@pytest.mark.parametrize("seed", range(10))
def test_dropout_reshape_transpose_gradient(seed):
    rng, b, n, d = shapes(seed)
    grad_check("dropout", lambda t: ag.dropout(t[0], 0.3, ag.make_rng(seed), train=True),
               [rng.standard_normal((b, n, d))])
    grad_check("transpose", lambda t: ag.transpose(t[0], (2, 0, 1)), [rng.standard_normal((b, n, d))])
    grad_check("reshape", lambda t: ag.reshape(t[0], (-1,)), [rng.standard_normal((b, n, d))])


@pytest.mark.parametrize("seed", range(10))
def test_cross_entropy_gradient(seed):
    rng, b, n, d = shapes(seed)
    rows = b * n + 1
    targets = rng.integers(0, d, size=rows)
    targets[0] = -100
    grad_check("cross_entropy", lambda t: ag.cross_entropy(t[0], targets), [rng.standard_normal((rows, d))])


def test_tied_tensor_gets_sum_of_paths():
    rng = np.random.default_rng(0)
    x0, w0 = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
    idx = np.array([0, 2, 2])

    def fn(t):
        w = t[1]
        h = ag.add(t[0], ag.embedding_gather(w, idx))       # first use: input embedding
        return ag.matmul(h, ag.transpose(w))                  # second use: output projection

    grad_check("tied", fn, [x0, w0])


def test_linear_map_gradient_is_column_sums():
    w = np.arange(6, dtype=float).reshape(2, 3)
    x = Tensor(np.ones((3, 1)), requires_grad=True)
    with Tape() as tape:
        tape.backward(ag.sum_all(ag.matmul(Tensor(w), x)))
    np.testing.assert_array_equal(x.grad[:, 0], w.sum(axis=0))


def test_gradients_accumulate_across_tapes():
    x = Tensor(np.ones(3), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            tape.backward(ag.sum_all(x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])


def test_backward_errors():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ag.scale(x, 2.0)
        with pytest.raises(GraphError, match="scalar"):
            tape.backward(y)
        loss = ag.sum_all(y)
        tape.backward(loss)
        with pytest.raises(GraphError, match="second"):
            tape.backward(loss)
    with Tape() as other:
        with pytest.raises(GraphError, match="detached"):
            other.backward(loss)
    with pytest.raises(GraphError, match="detached"):
        Tape().backward(ag.sum_all(Tensor(np.ones(2))))


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ValueError, match=r"matmul.*\(2, 3\).*\(4, 2\)"):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ValueError, match="add"):
        ag.add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))
    with pytest.raises(ValueError, match="cross_entropy"):
        ag.cross_entropy(Tensor(np.ones((2, 3))), [0])
    with pytest.raises(ValueError):
        ag.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)
    with pytest.raises(ValueError):
        ag.dropout(Tensor(np.ones(3)), 1.0, ag.make_rng(0), True)


def test_ignore_only_batch_is_zero():
    logits = Tensor(np.random.default_rng(0).standard_normal((4, 5)), requires_grad=True)
    with Tape() as tape:
        loss = ag.cross_entropy(logits, [-100] * 4)
        assert loss.item() == 0.0
        tape.backward(loss)
    assert not logits.grad.any()


def test_forward_properties():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((6, 7)).astype(np.float32) * 5
    np.testing.assert_allclose(ag.matmul(Tensor(x), Tensor(np.eye(7, dtype=np.float32))).data, x)
    np.testing.assert_allclose(ag.softmax(Tensor(x)).data.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(ag.softmax(Tensor(np.full((1, 4), 3.0))).data, 0.25)
    ln = ag.layer_norm(Tensor(x.astype(np.float64)), Tensor(np.ones(7)), Tensor(np.zeros(7))).data
    np.testing.assert_allclose(ln.mean(axis=-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(ln.var(axis=-1), 1.0, atol=1e-5 + 1e-5 / x.var(axis=-1).min())
    confident = np.array([[30.0, 0.0, 0.0]])
    assert ag.cross_entropy(Tensor(confident), [0]).item() < 1e-3
    np.testing.assert_array_equal(ag.dropout(Tensor(x), 0.5, None, train=False).data, x)
    assert ag.dropout(Tensor(x), 0.5, ag.make_rng(1), True).data.dtype == np.float32
    for op in (ag.softmax, ag.gelu):
        assert np.isfinite(op(Tensor(x * 100)).data).all()


def test_dropout_replay_is_bit_identical():
    x = Tensor(np.random.default_rng(0).standard_normal((5, 5)))
    a = ag.dropout(x, 0.4, ag.make_rng(9), True).data
    b = ag.dropout(x, 0.4, ag.make_rng(9), True).data
    assert a.tobytes() == b.tobytes()


def test_adam():
    w = np.array([1.0, -2.0])
    state = ag.AdamState(np.zeros(2), np.zeros(2))
    ag.adam_step(w, np.zeros(2), state, lr=0.1)
    np.testing.assert_array_equal(w, [1.0, -2.0])

    w = np.array([1.0])
    ag.adam_step(w, 2 * w, ag.AdamState(np.zeros(1), np.zeros(1)), lr=0.1)
    assert w[0] < 1.0

    # convex quadratic 0.5 w^T A w - b^T w
    a = np.array([[3.0, 0.5], [0.5, 1.0]])
    b = np.array([1.0, -1.0])
    p = Tensor(np.array([2.0, 2.0]), requires_grad=True)
    opt = ag.Adam({"w": p}, lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        p.grad = a @ p.data - b
        opt.step()
    assert np.linalg.norm(a @ p.data - b) < 1e-3

    with pytest.raises(FloatingPointError, match="encoder.w"):
        ag.adam_step(np.ones(2), np.array([1.0, np.nan]), ag.AdamState(np.zeros(2), np.zeros(2)), 0.1, name="encoder.w")


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"emb": rng.standard_normal((4, 3)).astype(np.float32), "bias": np.zeros(3, np.float32),
               "scalar": np.float32(2.5)}
    ag.save_checkpoint(tmp_path / "a.ckpt", tensors)
    back = ag.load_checkpoint(tmp_path / "a.ckpt")
    assert list(back) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
    ag.save_checkpoint(tmp_path / "b.ckpt", back)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    (tmp_path / "c.ckpt").write_bytes((tmp_path / "a.ckpt").read_bytes()[:-4])
    with pytest.raises(ValueError, match="truncated"):
        ag.load_checkpoint(tmp_path / "c.ckpt")
    with pytest.raises(ValueError):
        ag.save_checkpoint(tmp_path / "d.ckpt", {"bad name": np.zeros(1)})
