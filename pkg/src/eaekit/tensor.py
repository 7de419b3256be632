"""Dense float64 tensors with a scoped reverse-mode tape.

Operations are recorded only while a :class:`Tape` is active on the current
thread and at least one operand requires a gradient. Outside a tape every
operation is a plain numpy computation, which is what evaluation code relies
on for speed.

Two gradient entry points exist:

* :func:`backward` accumulates ``d root / d leaf`` into ``leaf.grad`` for every
  leaf with ``requires_grad`` (a parameter pass).
* :func:`grad` returns ``d root / d x`` for an explicit list of tensors without
  touching any ``.grad`` slot (an input-gradient pass, used by attacks).

Both bump the module-level :data:`COUNTERS`, which the training loops read to
prove how many passes each method spends.
"""

import threading
import weakref
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, DomainError

__all__ = [
    "COUNTERS",
    "PassCounters",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "backward",
    "conv2d",
    "elementwise",
    "exp",
    "grad",
    "linear",
    "log",
    "matmul",
    "maxpool2x2",
    "mean",
    "mul",
    "neg",
    "relu",
    "reshape",
    "scale",
    "sub",
    "sum",
]


@dataclass
class PassCounters:
    forward_passes: int = 0
    param_backward_passes: int = 0
    input_grad_passes: int = 0

    def snapshot(self):
        return PassCounters(
            self.forward_passes, self.param_backward_passes, self.input_grad_passes
        )

    def since(self, earlier):
        return PassCounters(
            self.forward_passes - earlier.forward_passes,
            self.param_backward_passes - earlier.param_backward_passes,
            self.input_grad_passes - earlier.input_grad_passes,
        )


COUNTERS = PassCounters()

_local = threading.local()


def _stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Append-only operation log, active between ``__enter__`` and ``__exit__``.

    Nodes are appended in execution order, so the list is already topologically
    sorted and a single reversed sweep visits every node once.
    """

    def __init__(self):
        # weak, so a finished step's graph is freed by refcounting: live
        # nodes are reachable from their outputs, and a strong list here
        # would close a cycle through node.tape
        self._refs = []

    @property
    def nodes(self):
        return [n for n in (r() for r in self._refs) if n is not None]

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape exited out of order")
        stack.pop()
        return False

    def __len__(self):
        return len(self._refs)


class _Node:
    __slots__ = ("inputs", "backward", "index", "tape", "op", "__weakref__")

    def __init__(self, op, inputs, backward, index, tape):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.index = index
        self.tape = tape


class Tensor:
    """A float64 array plus an optional gradient slot.

    The ``data`` array is never mutated in place by library code; optimisers
    rebind it instead.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sum(self):
        return sum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op, data, inputs, backward_fn):
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(op, tuple(inputs), backward_fn, len(tape._refs), tape)
        tape._refs.append(weakref.ref(node))
        out._node = node
    return out


def _binary_shapes(a, b):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise DimensionError(f"shapes {a.shape} and {b.shape} differ and neither is scalar")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise operations


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b)

    def bw(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _record("add", a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b)

    def bw(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return _record("sub", a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b)

    def bw(g, needs):
        return (
            _unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None,
        )

    return _record("mul", a.data * b.data, (a, b), bw)


def neg(a):
    a = _wrap(a)
    return _record("neg", -a.data, (a,), lambda g, needs: (-g,))


def scale(a, factor):
    a = _wrap(a)
    factor = float(factor)
    return _record("scale", a.data * factor, (a,), lambda g, needs: (g * factor,))


def relu(a):
    a = _wrap(a)
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g, needs: (g * mask,))


def exp(a):
    a = _wrap(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g, needs: (g * out,))


def log(a):
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return _record("log", np.log(a.data), (a,), lambda g, needs: (g / a.data,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "neg": neg,
    "scale": scale,
}


def elementwise(tag, *operands):
    """Dispatch by name: ``elementwise("relu", x)``, ``elementwise("scale", x, 2.0)``."""
    try:
        fn = _ELEMENTWISE[tag]
    except KeyError:
        raise ContractError(f"unknown elementwise op {tag!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# reductions and shape


def sum(a):  # noqa: A001 - mirrors numpy naming
    a = _wrap(a)
    shape = a.shape
    return _record(
        "sum", np.asarray(a.data.sum()), (a,), lambda g, needs: (np.broadcast_to(g, shape).copy(),)
    )


def mean(a):
    a = _wrap(a)
    shape, n = a.shape, a.size
    return _record(
        "mean",
        np.asarray(a.data.mean()),
        (a,),
        lambda g, needs: (np.broadcast_to(g / n, shape).copy(),),
    )


def reshape(a, shape):
    a = _wrap(a)
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _record("reshape", data, (a,), lambda g, needs: (g.reshape(old),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")

    def bw(g, needs):
        return (
            g @ b.data.T if needs[0] else None,
            a.data.T @ g if needs[1] else None,
        )

    return _record("matmul", a.data @ b.data, (a, b), bw)


def linear(x, w, b):
    """``x @ w + b`` with ``b`` added to every row (the dense-layer affine map)."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"cannot multiply {x.shape} by {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"bias shape {b.shape} does not match {w.shape[1]} outputs")

    def bw(g, needs):
        return (
            g @ w.data.T if needs[0] else None,
            x.data.T @ g if needs[1] else None,
            g.sum(axis=0) if needs[2] else None,
        )

    return _record("linear", x.data @ w.data + b.data, (x, w, b), bw)


# ---------------------------------------------------------------------------
# convolution and pooling


def _conv_out(size, k, stride, padding):
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise DimensionError(
            f"size {size} with kernel {k}, stride {stride}, padding {padding} "
            "does not give an integral output size"
        )
    return span // stride + 1


def _im2col(xp, kh, kw, stride):
    # (N, C, Hp, Wp) -> (N*H'*W', C*kh*kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _col2im(gcols, padded_shape, kh, kw, stride, ho, wo):
    n, c = padded_shape[:2]
    g6 = gcols.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g6[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return out


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation of NCHW ``x`` with an FCkhkw ``kernel`` via im2col."""
    x, kernel = _wrap(x), _wrap(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv2d expects NCHW input and FCkhkw kernel")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"input has {c} channels, kernel expects {kc}")
    if stride < 1 or padding < 0:
        raise DimensionError("stride must be positive and padding non-negative")
    _conv_out(h, kh, stride, padding)
    _conv_out(w, kw, stride, padding)
    inputs = [x, kernel]
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (f,):
            raise DimensionError(f"bias shape {bias.shape} does not match {f} filters")
        inputs.append(bias)

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad) if padding else x.data
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    kmat = kernel.data.reshape(f, -1)
    out = cols @ kmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def bw(g, needs):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gx = gk = gb = None
        if needs[0]:
            gxp = _col2im(g2 @ kmat, xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if needs[1]:
            gk = (g2.T @ cols).reshape(kernel.shape)
        if len(needs) > 2 and needs[2]:
            gb = g2.sum(axis=0)
        return (gx, gk, gb)[: len(needs)]

    return _record("conv2d", np.ascontiguousarray(out), inputs, bw)


def maxpool2x2(x):
    x = _wrap(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"maxpool2x2 needs NCHW with even H, W; got {x.shape}")
    n, c, h, w = x.shape
    r = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    r = r.reshape(n, c, h // 2, w // 2, 4)
    idx = r.argmax(axis=-1)[..., None]
    out = np.take_along_axis(r, idx, axis=-1)[..., 0]

    def bw(g, needs):
        gr = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(gr, idx, g[..., None], axis=-1)
        gr = gr.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gr.reshape(n, c, h, w),)

    return _record("maxpool2x2", out, (x,), bw)


# ---------------------------------------------------------------------------
# gradient traversal


def _propagate(root, wrt_ids=None):
    node = root._node
    tape = node.tape
    # every ancestor of root is alive; dead refs belong to unrelated branches
    nodes = [n for n in (r() for r in tape._refs[: node.index + 1]) if n is not None]

    def internal(t):
        return t._node is not None and t._node.tape is tape

    relevant = None
    if wrt_ids is not None:
        relevant = [False] * (node.index + 1)
        for n in nodes:
            relevant[n.index] = any(
                id(t) in wrt_ids or (internal(t) and relevant[t._node.index]) for t in n.inputs
            )

    pending = {node.index: np.ones_like(root.data)}
    leaves = {}
    for n in reversed(nodes):
        g = pending.pop(n.index, None)
        if g is None:
            continue
        if wrt_ids is None:
            needs = tuple(t.requires_grad for t in n.inputs)
        else:
            needs = tuple(
                id(t) in wrt_ids or (internal(t) and relevant[t._node.index]) for t in n.inputs
            )
        if not any(needs):
            continue
        for t, need, gi in zip(n.inputs, needs, n.backward(g, needs)):
            if not need or gi is None:
                continue
            if internal(t):
                k = t._node.index
                pending[k] = pending[k] + gi if k in pending else gi
            else:
                entry = leaves.get(id(t))
                if entry is None:
                    leaves[id(t)] = [t, gi]
                else:
                    entry[1] = entry[1] + gi
    return leaves


def _check_root(root):
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if root._node is None:
        raise ContractError("root was not produced under an active tape")


def backward(root):
    """Accumulate ``d root / d leaf`` into ``.grad`` of every reachable leaf.

    Gradients add onto existing ``.grad`` values; call ``zero_grad`` (or
    ``sgd_step``, which zeroes) between minibatches.
    """
    _check_root(root)
    for t, g in _propagate(root).values():
        if t.requires_grad:
            g = np.asarray(g, dtype=np.float64).reshape(t.shape)
            t.grad = g if t.grad is None else t.grad + g
    COUNTERS.param_backward_passes += 1


def grad(root, inputs):
    """Return ``d root / d x`` for each tensor in ``inputs``; no ``.grad`` is written."""
    _check_root(root)
    inputs = list(inputs)
    found = _propagate(root, {id(t) for t in inputs})
    COUNTERS.input_grad_passes += 1
    out = []
    for t in inputs:
        entry = found.get(id(t))
        out.append(np.zeros(t.shape) if entry is None else np.asarray(entry[1]).reshape(t.shape))
    return out
