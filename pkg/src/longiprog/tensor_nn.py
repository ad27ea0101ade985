"""Small reverse-mode autodiff over float64 numpy arrays.

Only what the encoder, the recurrent head and the loss need: elementwise
arithmetic with broadcasting, matmul, convolution, pooling, the GRU cell,
activations, binary cross-entropy and Adam.  ``backward`` walks the graph
in a fixed topological order so repeated runs accumulate gradients in the
same order and give identical bits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    pass


class InputError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def check_finite(self):
        if not np.all(np.isfinite(self.data)):
            bad = int(np.flatnonzero(~np.isfinite(self.data.reshape(-1)))[0])
            raise NumericError(f"non-finite value in {self.name or 'tensor'} at flat index {bad}")

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(data, (a, b), back)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so large |x| never overflows exp
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _node(t, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return _node(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside ``[lo, hi]``."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# -- shape and reduction ------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Select along one axis with an integer index or slice."""
    sl = [slice(None)] * x.data.ndim
    sl[axis] = index
    sl = tuple(sl)

    def back(g):
        out = np.zeros_like(x.data)
        out[sl] = g
        return (out,)

    return _node(x.data[sl], (x,), back)


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("cannot stack an empty list")
    if any(t.shape != ts[0].shape for t in ts):
        raise ShapeError(f"cannot stack shapes {[t.shape for t in ts]}")

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _node(np.stack([t.data for t in ts], axis=axis), ts, back)


def total(x: Tensor) -> Tensor:
    return _node(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _node(np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n),))


# -- linear algebra -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        if a.data.ndim == 1:
            return g @ b.data.T, np.outer(a.data, g)
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), back)


def dense(x, weights, bias) -> Tensor:
    """``x @ W + b`` for a vector ``x`` of length n or a batch of shape (B, n)."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if weights.data.ndim != 2 or bias.shape != (weights.shape[1],) or x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"dense shape mismatch: input {x.shape}, weights {weights.shape}, bias {bias.shape}")
    return add(matmul(x, weights), bias)


# -- convolution ------------------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """(output size, pad before, pad after) along one axis."""
    if padding == "valid":
        if k > n:
            raise ShapeError(f"kernel {k} larger than input {n} with valid padding")
        return (n - k) // stride + 1, 0, 0
    if padding == "same":
        out = -(-n // stride)
        pad = max((out - 1) * stride + k - n, 0)
        return out, pad // 2, pad - pad // 2
    raise ShapeError(f"padding must be 'same' or 'valid', got {padding!r}")


def _patches(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    return as_strided(xp, (n, ho, wo, k, k, c), (sn, sh * stride, sw * stride, sh, sw, sc), writeable=False)


def conv2d(x, kernels, stride: int = 1, padding: str = "same", bias=None) -> Tensor:
    """2-D cross-correlation on H x W x Cin (or N x H x W x Cin) input.

    ``kernels`` is k x k x Cin x Cout.  'same' follows the usual convention:
    output ceil(H / stride), any odd padding pixel going after the image.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d expects HxWxC input and kxkxCinxCout kernels, got {x.shape}, {kernels.shape}")
    k, k2, cin, cout = kernels.shape
    if k != k2:
        raise ShapeError(f"kernels must be square, got {k}x{k2}")
    n, h, w, c = xd.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels, kernels expect {cin}")
    ho, ph0, ph1 = conv_output_size(h, k, stride, padding)
    wo, pw0, pw1 = conv_output_size(w, k, stride, padding)
    if k > h + ph0 + ph1 or k > w + pw0 + pw1:
        raise ShapeError(f"kernel {k} larger than padded input {h + ph0 + ph1}x{w + pw0 + pw1}")
    xp = np.pad(xd, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0))) if ph0 + ph1 + pw0 + pw1 else xd
    cols = np.ascontiguousarray(_patches(xp, k, stride, ho, wo)).reshape(n * ho * wo, k * k * cin)
    wmat = kernels.data.reshape(k * k * cin, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)
    parents = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv bias must have shape ({cout},), got {bias.shape}")
        out = out + bias.data
        parents.append(bias)

    def back(g):
        g4 = g[None] if single else g
        gm = g4.reshape(n * ho * wo, cout)
        gk = (cols.T @ gm).reshape(kernels.shape)
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat.T).reshape(n, ho, wo, k, k, cin)
            gxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, ph0 : ph0 + h, pw0 : pw0 + w, :]
            if single:
                gx = gx[0]
        grads = [gx, gk]
        if bias is not None:
            grads.append(gm.sum(axis=0))
        return tuple(grads)

    return _node(out[0] if single else out, parents, back)


def global_avg_pool(x) -> Tensor:
    """Mean over the two spatial axes of H x W x C (or N x H x W x C)."""
    x = as_tensor(x)
    if x.data.ndim not in (3, 4) or min(x.shape[-3:-1]) < 1:
        raise ShapeError(f"global_avg_pool expects HxWxC or NxHxWxC, got {x.shape}")
    h, w = x.shape[-3], x.shape[-2]

    def back(g):
        return (np.broadcast_to(g[..., None, None, :] / (h * w), x.shape).copy(),)

    return _node(x.data.mean(axis=(-3, -2)), (x,), back)


# -- recurrent cell ---------------------------------------------------------------


@dataclass
class GruParams:
    """Gate weights for update (z), reset (r) and candidate (h) paths."""

    w_z: Tensor
    w_r: Tensor
    w_h: Tensor
    u_z: Tensor
    u_r: Tensor
    u_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    NAMES = ("w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h")

    def __post_init__(self):
        f_in, h = self.w_z.shape if self.w_z.data.ndim == 2 else (-1, -1)
        for name in self.NAMES:
            t = getattr(self, name)
            want = (f_in, h) if name[0] == "w" else (h, h) if name[0] == "u" else (h,)
            if t.shape != want:
                raise ShapeError(f"GRU parameter {name} has shape {t.shape}, expected {want}")

    @property
    def input_size(self) -> int:
        return self.w_z.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.w_z.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {n: getattr(self, n) for n in self.NAMES}


def gru_step(x_t, h_prev, params: GruParams) -> Tensor:
    """One GRU update.  Works on a single vector or a (B, F_in) batch."""
    x_t, h_prev = as_tensor(x_t), as_tensor(h_prev)
    if x_t.shape[-1] != params.input_size or h_prev.shape[-1] != params.hidden_size:
        raise ShapeError(
            f"gru_step got input {x_t.shape} and state {h_prev.shape} for "
            f"F_in={params.input_size}, H={params.hidden_size}"
        )
    z = sigmoid(matmul(x_t, params.w_z) + matmul(h_prev, params.u_z) + params.b_z)
    r = sigmoid(matmul(x_t, params.w_r) + matmul(h_prev, params.u_r) + params.b_r)
    cand = tanh(matmul(x_t, params.w_h) + matmul(mul(r, h_prev), params.u_h) + params.b_h)
    return h_prev + z * (cand - h_prev)


# -- loss ----------------------------------------------------------------------------

BCE_EPS = 1e-7


def bce_loss(p, y, pos_weight: float = 1.0, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against labels ``y``.

    ``pos_weight`` multiplies the positive-class term; 1.0 is the plain loss.
    """
    p = as_tensor(p)
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise InputError("labels must be 0 or 1")
    if y.shape != p.shape:
        raise ShapeError(f"labels {y.shape} do not match probabilities {p.shape}")
    pc = clip(p, eps, 1.0 - eps)
    term = mul(log(pc), pos_weight * y) + mul(log(1.0 - pc), 1.0 - y)
    return neg(mean(term))


# -- backward -----------------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, 0)]
    while stack:
        node, i = stack.pop()
        key = id(node)
        if i == 0:
            if state.get(key) == 2:
                continue
            if state.get(key) == 1:
                raise GraphError("cycle in computation graph")
            state[key] = 1
        if i < len(node._parents):
            stack.append((node, i + 1))
            child = node._parents[i]
            cstate = state.get(id(child))
            if cstate == 1:
                raise GraphError("cycle in computation graph")
            if cstate is None and child.requires_grad:
                stack.append((child, 0))
        else:
            state[key] = 2
            order.append(node)
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=np.float64)
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            k = id(parent)
            grads[k] = pg if k not in grads else grads[k] + pg


# -- optimiser ------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """Bias-corrected Adam, in place on ``params``; returns ``state``.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    checked = {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        checked[name] = g
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = checked[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        m = (1.0 - state.beta1) * g if m is None else state.beta1 * m + (1.0 - state.beta1) * g
        v = (1.0 - state.beta2) * g * g if v is None else state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return state


# -- verification ----------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


def grad_check(fn, inputs, delta: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps a list of Tensors to a scalar Tensor.  Relative error is
    ``|a - n| / max(1, |a| + |n|)`` per element.
    """
    if not 1e-7 <= delta <= 1e-3:
        raise InputError(f"delta must be in [1e-7, 1e-3], got {delta}")
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(leaves)
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar output, got shape {out.shape}")
    backward(out)
    worst = 0.0
    for k, (arr, leaf) in enumerate(zip(arrays, leaves)):
        analytic = np.zeros_like(arr) if leaf.grad is None else leaf.grad
        flat = arr.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + delta
            up = float(fn([Tensor(a) for a in arrays]).data)
            flat[i] = keep - delta
            down = float(fn([Tensor(a) for a in arrays]).data)
            flat[i] = keep
            num = (up - down) / (2 * delta)
            a = float(analytic.reshape(-1)[i])
            if not (math.isfinite(num) and math.isfinite(a)):
                raise NumericError(f"non-finite gradient for input {k} at flat index {i}")
            worst = max(worst, abs(a - num) / max(1.0, abs(a) + abs(num)))
    return worst
