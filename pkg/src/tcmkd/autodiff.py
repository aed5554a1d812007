"""Small dense-tensor engine with reverse-mode differentiation.

Only the operations needed by the fault-detection CNN/MLP models are
provided: 1-D convolution (cross-correlation), linear layers, ReLU,
non-overlapping max pooling, flattening, softmax cross-entropy and mean
squared error.  Arrays keep whatever float dtype they are created with, so a
float64 copy of a graph can be used for finite-difference checks while the
models themselves run in float32.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class Tensor:
    """An ndarray plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return scale(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable tensor carrying its own Adam moment estimates."""

    __slots__ = ("name", "m", "v", "step_count")

    def __init__(self, name, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step_count = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


# --------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        return g, g

    return _node(a.data + b.data, (a, b), backward)


def scale(a, c):
    """Multiply a tensor by a python scalar."""
    if isinstance(c, Tensor):
        raise TypeError("scale expects a python scalar")
    a = _as_tensor(a)
    c = float(c)
    out = a.data * a.data.dtype.type(c)

    def backward(g):
        return (g * g.dtype.type(c),)

    return _node(out, (a,), backward)


def reshape(a, shape):
    a = _as_tensor(a)
    orig = a.shape

    def backward(g):
        return (g.reshape(orig),)

    return _node(a.data.reshape(shape), (a,), backward)


def flatten(a):
    """Collapse every axis after the batch axis."""
    return reshape(a, (a.shape[0], -1))


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, a.data.dtype.type(0))

    def backward(g):
        # subgradient at exactly 0 is 0
        return (g * mask,)

    return _node(out, (a,), backward)


# --------------------------------------------------------------------------
# layers


def linear(x, weight, bias):
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise DimensionError(
            f"linear: expected input [B, F_in], weight [F_out, F_in], bias [F_out]; "
            f"got {x.shape}, {weight.shape}, {bias.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input features (axis 1 of input) = {x.shape[1]} but weight expects "
            f"F_in (axis 1 of weight) = {weight.shape[1]}")
    if bias.shape[0] != weight.shape[0]:
        raise DimensionError(
            f"linear: bias length {bias.shape[0]} != F_out (axis 0 of weight) {weight.shape[0]}")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _node(out, (x, weight, bias), backward)


def same_padding(length, kernel, stride):
    """Return (pad_left, pad_right, out_length) for 'same' padding."""
    out_len = -(-length // stride)
    total = max((out_len - 1) * stride + kernel - length, 0)
    left = total // 2
    return left, total - left, out_len


def conv1d(x, weight, bias, stride=1, padding="valid"):
    """Cross-correlation over the last axis.

    ``out[b, o, j] = bias[o] + sum_{c,k} xpad[b, c, j*stride + k] * w[o, c, k]``
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 3:
        raise DimensionError(f"conv1d: input must be [B, C_in, L], got {x.shape}")
    if weight.data.ndim != 3:
        raise DimensionError(f"conv1d: weight must be [C_out, C_in, K], got {weight.shape}")
    B, C, L = x.shape
    O, Cw, K = weight.shape
    if Cw != C:
        raise DimensionError(
            f"conv1d: input channels (axis 1 of input) = {C} but weight C_in (axis 1) = {Cw}")
    if bias.shape != (O,):
        raise DimensionError(f"conv1d: bias shape {bias.shape} != (C_out,) = ({O},)")
    if stride < 1:
        raise ValueError("conv1d: stride must be >= 1")
    if padding == "same":
        left, right, out_len = same_padding(L, K, stride)
    elif padding == "valid":
        left = right = 0
        if K > L:
            raise DimensionError(f"conv1d: kernel {K} longer than input length {L} (axis 2)")
        out_len = (L - K) // stride + 1
    else:
        raise ValueError(f"conv1d: unknown padding {padding!r}")

    xd = x.data
    if left or right:
        xd = np.pad(xd, ((0, 0), (0, 0), (left, right)))
    Lp = xd.shape[2]
    # (B, C, out_len, K) view -> (B, out_len, C*K) columns
    win = np.lib.stride_tricks.sliding_window_view(xd, K, axis=2)[:, :, ::stride][:, :, :out_len]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B, out_len, C * K)
    wmat = weight.data.reshape(O, C * K)
    cols2 = cols.reshape(B * out_len, C * K)
    out = (cols2 @ wmat.T + bias.data).reshape(B, out_len, O).transpose(0, 2, 1)
    need_x = x.requires_grad

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(B * out_len, O)
        gw = (g2.T @ cols2).reshape(O, C, K)
        gb = g2.sum(axis=0)
        if not need_x:
            return None, gw, gb
        dcols = (g2 @ wmat).reshape(B, out_len, C, K)
        gx = np.zeros((B, C, Lp), dtype=g.dtype)
        if K <= out_len:
            for k in range(K):
                gx[:, :, k:k + stride * (out_len - 1) + 1:stride] += dcols[:, :, :, k].transpose(0, 2, 1)
        else:
            for j in range(out_len):
                gx[:, :, j * stride:j * stride + K] += dcols[:, j]
        if left or right:
            gx = gx[:, :, left:Lp - right]
        return gx, gw, gb

    return _node(np.ascontiguousarray(out), (x, weight, bias), backward)


def max_pool1d(x, window=2):
    """Non-overlapping max pooling; a ragged tail is padded with -inf."""
    x = _as_tensor(x)
    B, C, L = x.shape
    xd = x.data
    rem = L % window
    if rem:
        xd = np.pad(xd, ((0, 0), (0, 0), (0, window - rem)), constant_values=-np.inf)
    n = xd.shape[2] // window
    blocks = xd.reshape(B, C, n, window)
    idx = blocks.argmax(axis=3)
    out = np.take_along_axis(blocks, idx[..., None], axis=3)[..., 0]

    def backward(g):
        gb = np.zeros((B, C, n, window), dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=3)
        return (gb.reshape(B, C, n * window)[:, :, :L],)

    return _node(out, (x,), backward)


# --------------------------------------------------------------------------
# losses


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be [B, C], got {logits.shape}")
    B, C = logits.shape
    if labels.shape != (B,):
        raise DimensionError(f"softmax_cross_entropy: labels shape {labels.shape} != ({B},)")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {C}), got "
                         f"range [{labels.min()}, {labels.max()}]")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(B), labels]
    loss = nll.mean()
    dtype = logits.dtype

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(B), labels] -= 1.0
        return ((p * (float(g) / B)).astype(dtype),)

    return _node(np.asarray(loss, dtype=dtype), (logits,), backward)


def mse(a, b):
    """Mean of squared differences over every entry."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    n = diff.size
    loss = np.mean(diff * diff)
    dtype = a.dtype

    def backward(g):
        ga = (diff * (2.0 * float(g) / n)).astype(dtype)
        return ga, -ga

    return _node(np.asarray(loss, dtype=dtype), (a, b), backward)


# --------------------------------------------------------------------------
# backward pass


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Intermediate gradients live only for the duration of the call, so calling
    ``backward`` twice adds the leaf gradients together.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------------
# optimisation


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


class NoGradientError(RuntimeError):
    pass


def adam_step(params: Iterable[Parameter], config: AdamConfig = AdamConfig()):
    """One bias-corrected Adam update of every parameter holding a gradient.

    Parameters without a gradient are left alone (frozen).  Gradients are
    cleared afterwards.
    """
    params = list(params)
    live = [p for p in params if p.grad is not None]
    if not live:
        raise NoGradientError("adam_step called with no accumulated gradients; call backward first")
    b1, b2 = config.beta1, config.beta2
    for p in live:
        g = p.grad.astype(p.dtype, copy=False)
        p.step_count += 1
        t = p.step_count
        p.m *= p.dtype.type(b1)
        p.m += p.dtype.type(1.0 - b1) * g
        p.v *= p.dtype.type(b2)
        p.v += p.dtype.type(1.0 - b2) * (g * g)
        m_hat = p.m / p.dtype.type(1.0 - b1 ** t)
        v_hat = p.v / p.dtype.type(1.0 - b2 ** t)
        p.data -= p.dtype.type(config.learning_rate) * m_hat / (np.sqrt(v_hat) + p.dtype.type(config.epsilon))
        p.grad = None


# --------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], epsilon=1e-5,
               max_coords=None, seed=0):
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the graph from ``params`` on every call and returns a scalar
    Tensor.  Parameters should be float64.  With ``max_coords`` a seeded random
    subset of coordinates per parameter is checked instead of all of them.
    """
    for p in params:
        p.grad = None
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(f().data)
            flat[i] = orig - epsilon
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2 * epsilon)
            an = float(a.reshape(-1)[i])
            err = abs(an - num) / max(abs(an), abs(num), 1e-8)
            if err > worst:
                worst = err
    return worst


__all__ = [
    "AdamConfig", "DimensionError", "NoGradientError", "Parameter", "Tensor",
    "adam_step", "add", "backward", "conv1d", "flatten", "grad_check", "linear",
    "max_pool1d", "mse", "relu", "reshape", "same_padding", "scale", "softmax",
    "softmax_cross_entropy",
]
