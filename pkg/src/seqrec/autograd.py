"""A small dense-tensor library with tape-based reverse-mode differentiation.

Only the operations the masked-item transformer needs are provided. Every op
computes its forward value eagerly with numpy; when a :class:`Tape` is active
and at least one input requires a gradient, the op appends a record to the
tape. :meth:`Tape.backward` replays the records in exact reverse order.

Without an active tape the ops are plain numpy computations, which is what
inference uses.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "GraphError",
    "make_rng",
    "matmul",
    "add",
    "add_constant",
    "scale",
    "embedding_gather",
    "softmax",
    "layer_norm",
    "gelu",
    "dropout",
    "cross_entropy",
    "reshape",
    "transpose",
    "sum_all",
    "Adam",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
]


class GraphError(RuntimeError):
    """Raised for invalid uses of the tape (detached loss, double backward)."""


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator (Philox) seeded explicitly by the caller."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


class Tensor:
    """Dense array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float32
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; ops executed inside the block are recorded.
    A tape supports a single :meth:`backward` call, after which it must be
    cleared (or discarded) before recording again.
    """

    records: list[_Record] = field(default_factory=list)
    _produced: set[int] = field(default_factory=set)
    _consumed: bool = False

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, op, inputs, output, backward) -> None:
        if self._consumed:
            raise GraphError("tape already consumed by backward(); call clear() first")
        self.records.append(_Record(op, tuple(inputs), output, backward))
        self._produced.add(id(output))

    def clear(self) -> None:
        self.records.clear()
        self._produced.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every leaf tensor that requires a gradient.

        Gradients are added to any existing ``.grad`` so a tensor used at
        several places in the graph (weight tying) receives the sum of all
        contributions.
        """
        if self._consumed:
            raise GraphError("second backward() on the same tape without clear()")
        if loss.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad or id(loss) not in self._produced:
            raise GraphError("loss is detached from this tape")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g_out = grads.pop(id(rec.output), None)
            if g_out is None:
                continue
            in_grads = rec.backward(g_out)
            for inp, g in zip(rec.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if key not in self._produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            leaf.accumulate_grad(grads[key])


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    tape = _active_tape() if needs else None
    result = Tensor(out, requires_grad=tape is not None, dtype=out.dtype)
    if tape is not None:
        tape.record(op, inputs, result, backward)
    return result


def _shape_error(op: str, *shapes) -> ValueError:
    listed = " vs ".join(str(tuple(s)) for s in shapes)
    return ValueError(f"{op}: incompatible shapes {listed}")


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where ``b`` is 2-D or shares all leading dims with ``a``."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    if b.ndim != 2 and b.shape[:-2] != a.shape[:-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def backward(g):
        ga = g @ _swap(b.data) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _swap(a.data) @ g
        return ga, gb

    return _emit("matmul", out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may match a trailing suffix of ``a``'s shape."""
    a, b = _wrap(a), _wrap(b)
    if b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
        raise _shape_error("add", a.shape, b.shape)
    out = a.data + b.data

    def backward(g):
        gb = None
        if b.requires_grad:
            gb = g.reshape((-1,) + b.shape).sum(axis=0) if b.ndim < a.ndim else g
        return g, gb

    return _emit("add", out, (a, b), backward)


def add_constant(x: Tensor, c: np.ndarray) -> Tensor:
    """``x + c`` for a non-differentiable array ``c`` broadcastable to ``x``."""
    x = _wrap(x)
    out = x.data + np.asarray(c, dtype=x.dtype)
    if out.shape != x.shape:
        raise _shape_error("add_constant", x.shape, np.shape(c))
    return _emit("add_constant", out, (x,), lambda g: (g,))


def scale(x: Tensor, c: float) -> Tensor:
    x = _wrap(x)
    c = float(c)
    return _emit("scale", x.data * x.dtype.type(c), (x,), lambda g: (g * c,))


def embedding_gather(table: Tensor, indices) -> Tensor:
    """Rows of a 2-D ``table`` at integer ``indices`` (any shape)."""
    table = _wrap(table)
    idx = np.asarray(indices)
    if table.ndim != 2:
        raise _shape_error("embedding_gather", table.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding_gather: index out of range for table of {table.shape[0]} rows")
    out = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit("embedding_gather", out, (table,), backward)


def softmax(x: Tensor) -> Tensor:
    x = _wrap(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last dimension, then apply ``gain`` and ``bias``."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise _shape_error("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gxhat = g * gain.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, d)
        ggain = (flat_g * xhat.reshape(-1, d)).sum(axis=0) if gain.requires_grad else None
        gbias = flat_g.sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return _emit("layer_norm", out, (x, gain, bias), backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of the Gaussian error linear unit."""
    x = _wrap(x)
    v = x.data
    c = x.dtype.type(_GELU_C)
    inner = c * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _emit("gelu", out, (x,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout. Identity when ``train`` is false or ``rate`` is 0."""
    x = _wrap(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: an rng is required in training mode")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _emit("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ignored.

    A batch where every target equals ``ignore_index`` yields a zero loss
    and zero gradient.
    """
    logits = _wrap(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != logits.shape[:1]:
        raise _shape_error("cross_entropy", logits.shape, targets.shape)
    valid = targets != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        out = np.zeros((), dtype=logits.dtype)
        return _emit("cross_entropy", out, (logits,), lambda g: (np.zeros_like(logits.data),))
    rows = np.flatnonzero(valid)
    tgt = targets[rows]
    if tgt.min() < 0 or tgt.max() >= logits.shape[1]:
        raise IndexError("cross_entropy: target index out of range")
    z = logits.data[rows]
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    out = np.asarray((lse - z[np.arange(len(rows)), tgt]).mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(len(rows)), tgt] -= 1.0
        full = np.zeros_like(logits.data)
        full[rows] = p * (g / n_valid)
        return (full,)

    return _emit("cross_entropy", out, (logits,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _wrap(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", x.shape, shape) from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    x = _wrap(x)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _emit("transpose", out, (x,), lambda g: (np.transpose(g, inverse),))


def sum_all(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _emit("sum", out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


# -- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    name: str = "param",
) -> None:
    """In-place Adam update with bias correction."""
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    if state.m.shape != param.shape or grad.shape != param.shape:
        raise ValueError(f"adam_step: state/grad shape mismatch for {name!r}")
    state.t += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * grad
    state.v *= beta2
    state.v += (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1**state.t)
    v_hat = state.v / (1.0 - beta2**state.t)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)


class Adam:
    """Adam over a named parameter dict. Parameters with no gradient are skipped."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = {
            name: AdamState(np.zeros_like(p.data), np.zeros_like(p.data)) for name, p in params.items()
        }

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, self.state[name], lr, self.beta1, self.beta2, self.eps, name=name)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


# -- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = "seqrec-ckpt v1"


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors as little-endian float32.

    Layout: ``seqrec-ckpt v1 <count>\\n`` then, per tensor, a text line
    ``<name> <dim0,dim1,...>\\n`` followed by the raw bytes.
    """
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"{CKPT_MAGIC} {len(tensors)}\n".encode())
        for name, arr in tensors.items():
            if not name or any(ch.isspace() for ch in name):
                raise ValueError(f"invalid tensor name {name!r}")
            arr = np.asarray(arr)
            dims = ",".join(str(d) for d in arr.shape)
            fh.write(f"{name} {dims}\n".encode())
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        if len(header) != 3 or " ".join(header[:2]) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a {CKPT_MAGIC} file")
        out: dict[str, np.ndarray] = {}
        for _ in range(int(header[2])):
            name, dims = fh.readline().decode().rstrip("\n").split(" ")
            shape = tuple(int(d) for d in dims.split(",")) if dims else ()
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise ValueError(f"{path}: truncated tensor {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        return out

