"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is dynamic: every forward pass builds a fresh set of nodes, and
``backward`` walks them once in reverse topological order.  Gradients reach
any leaf created with ``requires_grad=True``, which covers both trainable
parameters and attack inputs.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "clamp",
    "sign",
    "relu",
    "matmul",
    "conv2d",
    "reduce_sum",
    "reduce_mean",
    "argmax",
    "reshape",
    "bias_add",
    "channel_affine",
    "softmax",
    "softmax_cross_entropy",
    "weighted_sum",
]


class Tensor:
    """A float64 n-d array plus an optional slot in a computation graph.

    ``grad`` is populated by :func:`backward` and has the same shape as
    ``data``.  Leaves are created directly; interior nodes are created by the
    op functions in this module and carry a closure that routes the incoming
    gradient to their parents.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data)

    def sum(self, axis=None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return reduce_mean(self, axis)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: Sequence[Tensor], bw, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = bw
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    # First contribution may alias the child's grad; never mutate it in place.
    t.grad = g if t.grad is None else t.grad + g


def _check_binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if b.data.size != 1 and a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (only scalar broadcast allowed)")


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes("add", a, b)
    scalar_b = b.data.size == 1 and a.shape != b.shape

    def bw(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, np.sum(g).reshape(b.shape) if scalar_b else g)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes("sub", a, b)
    scalar_b = b.data.size == 1 and a.shape != b.shape

    def bw(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, (-np.sum(g)).reshape(b.shape) if scalar_b else -g)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes("mul", a, b)
    scalar_b = b.data.size == 1 and a.shape != b.shape

    def bw(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            gb = g * a.data
            _accum(b, np.sum(gb).reshape(b.shape) if scalar_b else gb)

    return _node(a.data * b.data, (a, b), bw, "mul")


def scale(a, c: float) -> Tensor:
    """Multiply by a plain scalar constant."""
    a = _as_tensor(a)
    c = float(c)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * c)

    return _node(a.data * c, (a,), bw, "scale")


def clamp(a, lo: float, hi: float) -> Tensor:
    """Bound every element to [lo, hi]; subgradient 0 at the boundaries."""
    a = _as_tensor(a)
    if lo > hi:
        raise ValueError(f"clamp: lo={lo} exceeds hi={hi}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g * ((a.data > lo) & (a.data < hi)))

    return _node(np.clip(a.data, lo, hi), (a,), bw, "clamp")


def sign(a) -> Tensor:
    """Elementwise sign with sign(0) = 0.

    Non-differentiable; the output is a constant (gradient contract is zero
    everywhere), so no graph edge is created.
    """
    a = _as_tensor(a)
    return _node(np.sign(a.data), (), None, "sign")


def relu(a) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * (a.data > 0))

    return _node(np.maximum(a.data, 0.0), (a,), bw, "relu")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul: expected rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def _conv_windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    shape = (n, c, oh, ow, kh, kw)
    strides = (sn, sc, sh * stride, sw * stride, sh, sw)
    return np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides)


def _pad2d(arr: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return arr
    n, c, h, w = arr.shape
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    out[:, :, padding : padding + h, padding : padding + w] = arr
    return out


def _corr2d(x_arr: np.ndarray, w4: np.ndarray, stride: int, padding: int):
    """Raw cross-correlation via one im2col copy and a batched GEMM.

    Returns (out [N,F,OH,OW], cols [N, C*kH*kW, OH*OW]); cols is reusable for
    the weight gradient.
    """
    n, c, h, w = x_arr.shape
    f, _, kh, kw = w4.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    xp = _pad2d(x_arr, padding)
    windows = _conv_windows(xp, kh, kw, stride, oh, ow).transpose(0, 1, 4, 5, 2, 3)
    cols = np.ascontiguousarray(windows).reshape(n, c * kh * kw, oh * ow)
    out = np.matmul(w4.reshape(f, c * kh * kw), cols).reshape(n, f, oh, ow)
    return out, cols


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding over NCHW input.

    Output spatial extent must divide exactly: (H + 2*padding - kH) % stride
    has to be 0, and likewise for width.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d: expected NCHW input and FCHW kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise ValueError(f"conv2d: kernel expects {ck} channels, input has {c}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} or padding={padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if (hp - kh) % stride != 0 or (wp - kw) % stride != 0:
        raise ValueError(
            f"conv2d: non-integral output size for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )
    oh, ow = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    out, cols = _corr2d(x.data, kernel.data, stride, padding)
    w_mat = kernel.data.reshape(f, c * kh * kw)

    def bw(g):
        g3 = np.ascontiguousarray(g).reshape(n, f, oh * ow)
        if kernel.requires_grad:
            dw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0)
            _accum(kernel, dw.reshape(f, c, kh, kw))
        if x.requires_grad:
            if stride == 1 and kh == kw and padding <= kh - 1:
                # d/dx of a stride-1 correlation is itself a correlation with
                # the spatially flipped, channel-transposed kernel.
                w_flip = np.ascontiguousarray(kernel.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
                dx, _ = _corr2d(g3.reshape(n, f, oh, ow), w_flip, 1, kh - 1 - padding)
                _accum(x, dx)
            else:
                dcols = np.matmul(w_mat.T, g3).reshape(n, c, kh, kw, oh, ow)
                dxp = np.zeros((n, c, hp, wp), dtype=np.float64)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, :, i, j]
                if padding:
                    dxp = dxp[:, :, padding : padding + h, padding : padding + w]
                _accum(x, dxp)

    return _node(out, (x, kernel), bw, "conv2d")


# ---------------------------------------------------------------------------
# reductions and shape ops


def _check_axis(op: str, a: Tensor, axis) -> None:
    axes = axis if isinstance(axis, tuple) else (axis,)
    for ax in axes:
        if not isinstance(ax, int) or not -a.ndim <= ax < a.ndim:
            raise ValueError(f"{op}: invalid axis {axis} for rank-{a.ndim} tensor")


def _unreduce(g: np.ndarray, shape: tuple[int, ...], axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(shape) for ax in axes)
    g_exp = np.expand_dims(g, axes)
    return np.broadcast_to(g_exp, shape)


def reduce_sum(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    if axis is not None:
        _check_axis("sum", a, axis)
    shape = a.shape

    def bw(g):
        if a.requires_grad:
            _accum(a, np.ascontiguousarray(_unreduce(g, shape, axis)))

    return _node(np.sum(a.data, axis=axis), (a,), bw, "sum")


def reduce_mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    if axis is not None:
        _check_axis("mean", a, axis)
    shape = a.shape
    out = np.mean(a.data, axis=axis)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[ax % len(shape)] for ax in axes]))

    def bw(g):
        if a.requires_grad:
            _accum(a, np.ascontiguousarray(_unreduce(g, shape, axis)) / count)

    return _node(out, (a,), bw, "mean")


def argmax(a, axis=None) -> np.ndarray:
    """Index of the largest element; ties resolve to the lowest index.

    Non-differentiable, so the result is a plain integer array.
    """
    a = _as_tensor(a)
    if axis is not None:
        _check_axis("argmax", a, axis)
    return np.argmax(a.data, axis=axis)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape

    def bw(g):
        if a.requires_grad:
            _accum(a, g.reshape(old))

    return _node(a.data.reshape(shape), (a,), bw, "reshape")


# ---------------------------------------------------------------------------
# layer helpers


def bias_add(x, b) -> Tensor:
    """Add a rank-1 bias along axis 1 of ``x`` (channels or features)."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.ndim != 1 or x.ndim < 2 or b.shape[0] != x.shape[1]:
        raise ValueError(f"bias_add: bias {b.shape} does not match axis 1 of {x.shape}")
    bshape = (1, b.shape[0]) + (1,) * (x.ndim - 2)
    other_axes = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        if x.requires_grad:
            _accum(x, g)
        if b.requires_grad:
            _accum(b, g.sum(axis=other_axes))

    return _node(x.data + b.data.reshape(bshape), (x, b), bw, "bias_add")


def channel_affine(x, scale_c, shift_c) -> Tensor:
    """Per-channel affine map x*scale + shift over NCHW input (axis 1)."""
    x, scale_c, shift_c = _as_tensor(x), _as_tensor(scale_c), _as_tensor(shift_c)
    if x.ndim != 4 or scale_c.ndim != 1 or shift_c.ndim != 1:
        raise ValueError("channel_affine: expected NCHW input and rank-1 scale/shift")
    c = x.shape[1]
    if scale_c.shape[0] != c or shift_c.shape[0] != c:
        raise ValueError(f"channel_affine: channel count mismatch, input has {c} channels, "
                         f"scale {scale_c.shape[0]}, shift {shift_c.shape[0]}")
    sc = scale_c.data.reshape(1, c, 1, 1)

    def bw(g):
        if x.requires_grad:
            _accum(x, g * sc)
        if scale_c.requires_grad:
            _accum(scale_c, (g * x.data).sum(axis=(0, 2, 3)))
        if shift_c.requires_grad:
            _accum(shift_c, g.sum(axis=(0, 2, 3)))

    return _node(x.data * sc + shift_c.data.reshape(1, c, 1, 1), (x, scale_c, shift_c), bw, "channel_affine")


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        if a.requires_grad:
            _accum(a, s * (g - np.sum(g * s, axis=axis, keepdims=True)))

    return _node(s, (a,), bw, "softmax")


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log softmax probability of the true class.

    Stabilized by max subtraction; backward is (softmax - onehot) / N.
    """
    logits = _as_tensor(logits)
    y = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"softmax_cross_entropy: expected [N,K] logits, got {logits.shape}")
    n, k = logits.shape
    if y.shape != (n,):
        raise ValueError(f"softmax_cross_entropy: expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("softmax_cross_entropy: labels must be integers")
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"softmax_cross_entropy: label out of range [0,{k}), got {int(y.min())}..{int(y.max())}")

    z = logits.data - np.max(logits.data, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1))
    loss = np.mean(lse - z[np.arange(n), y])

    def bw(g):
        if logits.requires_grad:
            p = np.exp(z - lse[:, None])
            p[np.arange(n), y] -= 1.0
            _accum(logits, (float(g) / n) * p)

    return _node(np.asarray(loss), (logits,), bw, "softmax_cross_entropy")


def weighted_sum(outputs: Sequence[Tensor], weights) -> Tensor:
    """Per-sample weighted sum of stacked [N,K] tensors with [N,n] weights.

    out[s] = sum_i weights[s,i] * outputs[i][s]; differentiable in both the
    stacked tensors and the weights.
    """
    weights = _as_tensor(weights)
    outputs = [_as_tensor(o) for o in outputs]
    if not outputs:
        raise ValueError("weighted_sum: need at least one tensor")
    if weights.ndim != 2 or weights.shape[1] != len(outputs):
        raise ValueError(f"weighted_sum: weights {weights.shape} do not match {len(outputs)} tensors")
    n, k = outputs[0].shape
    for i, o in enumerate(outputs):
        if o.shape != (n, k):
            raise ValueError(f"weighted_sum: tensor {i} has shape {o.shape}, expected {(n, k)}")
    if weights.shape[0] != n:
        raise ValueError(f"weighted_sum: weights {weights.shape} do not match batch {n}")

    stacked = np.stack([o.data for o in outputs], axis=2)  # [N,K,n]
    out = np.einsum("nkj,nj->nk", stacked, weights.data)

    def bw(g):
        for i, o in enumerate(outputs):
            if o.requires_grad:
                _accum(o, g * weights.data[:, i : i + 1])
        if weights.requires_grad:
            _accum(weights, np.einsum("nk,nkj->nj", g, stacked))

    return _node(out, tuple(outputs) + (weights,), bw, "weighted_sum")


# ---------------------------------------------------------------------------
# backward pass


def _topological_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS; ON_PATH marks the current descent, so revisiting an
    # ON_PATH node is a true cycle while revisiting a DONE node is just a
    # shared subgraph (residual connections make diamonds).
    ON_PATH, DONE = 0, 1
    state: dict[int, int] = {id(root): ON_PATH}
    order: list[Tensor] = []
    stack: list[tuple[Tensor, object]] = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            st = state.get(id(p))
            if st == ON_PATH:
                raise ValueError("backward: cycle detected in computation graph")
            if st is None:
                state[id(p)] = ON_PATH
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            stack.pop()
            state[id(node)] = DONE
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``grad`` for every reachable node.

    The loss must be scalar.  Grads of the visited subgraph are reset first,
    so each call reports exactly this graph's derivatives; accumulation order
    follows the fixed topological order, making repeated runs bit-identical.
    """
    if not isinstance(loss, Tensor):
        raise ValueError("backward: loss must be a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _topological_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
