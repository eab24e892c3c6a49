"""Dense float64 arrays, differentiable kernels and a reverse-mode gradient tape.

Every kernel takes and returns :class:`Tensor` values.  When a :class:`GradTape`
is active and at least one operand requires a gradient, the kernel appends a
node holding its saved operands and a backward rule; :meth:`GradTape.gradient`
replays those nodes in exact reverse order.

Arrays are limited to rank 3 (batch x time x feature); multi-head attention
therefore loops over heads rather than carrying a head axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy.special import expit

MAX_RANK = 3


class DimensionError(ValueError):
    """Operand shapes are incompatible with a kernel."""


class NonFiniteError(FloatingPointError):
    """A kernel produced (or received) NaN or Inf."""


class ContractError(RuntimeError):
    """A caller violated a pre-condition of the tape."""


def _freeze(arr: np.ndarray, op: str) -> np.ndarray:
    if arr.ndim > MAX_RANK:
        raise DimensionError(f"{op}: rank {arr.ndim} exceeds {MAX_RANK} (shape {arr.shape})")
    # a sum is NaN/Inf whenever any element is
    if not np.isfinite(np.add.reduce(arr, axis=None)):
        if np.isfinite(arr).all():
            arr.flags.writeable = False
            return arr
        raise NonFiniteError(f"{op}: non-finite values in output of shape {arr.shape}")
    arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        self.data = _freeze(arr, "tensor")
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, op: str, requires_grad: bool) -> "Tensor":
        # internal constructor: takes ownership of a freshly computed array
        out = cls.__new__(cls)
        out.data = _freeze(np.asarray(arr, dtype=np.float64), op)
        out.requires_grad = requires_grad
        out.name = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

@dataclass
class _Node:
    op: str
    output: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


_ACTIVE: List["GradTape"] = []


class GradTape:
    """Records kernel applications for one backward pass.

    Use as a context manager::

        with GradTape() as tape:
            loss = model_loss(params)
        grads = tape.gradient(loss, params)
    """

    def __init__(self):
        self.nodes: List[_Node] = []

    def __enter__(self) -> "GradTape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def gradient(self, loss: Tensor, params) -> Dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` keyed by parameter name.

        ``params`` is a mapping name -> Tensor (or an iterable of named
        tensors).  Parameters the loss does not depend on get zeros.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if isinstance(params, dict):
            named = dict(params)
        else:
            named = {p.name: p for p in params}
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owned = set()  # buffers created here, safe to accumulate into in place
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key not in grads:
                    grads[key] = gi
                elif key in owned:
                    grads[key] += gi
                else:
                    grads[key] = grads[key] + gi
                    owned.add(key)
        out = {}
        for name, p in named.items():
            g = grads.get(id(p))
            out[name] = np.zeros_like(p.data) if g is None else np.array(g, dtype=np.float64).reshape(p.shape)
        return out


def backward(tape: GradTape, loss: Tensor, params) -> Dict[str, np.ndarray]:
    return tape.gradient(loss, params)


def _emit(op: str, arr: np.ndarray, inputs: tuple, bwd) -> Tensor:
    track = bool(_ACTIVE) and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, op, track)
    if track:
        _ACTIVE[-1].record(_Node(op, out, inputs, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; a leading batch axis on either operand is carried through."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul: batch extents differ in {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def bwd(g):
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)

    return _emit("matmul", A @ B, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _emit("transpose", np.swapaxes(a.data, -1, -2), (a,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    A, B = a.data, b.data
    return _emit("mul", A * B, (a, b),
                 lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


_P_LO = np.nextafter(0.0, 1.0)
_P_HI = np.nextafter(1.0, 0.0)


def probability(z: np.ndarray) -> np.ndarray:
    """sigmoid(z) kept strictly inside (0, 1); float64 would round large |z| to 0 or 1."""
    return np.clip(_sigmoid(z), _P_LO, _P_HI)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _emit("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def concat_last_axis(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat_last_axis: leading extents differ in {a.shape} and {b.shape}")
    k = a.shape[-1]
    return _emit("concat", np.concatenate([a.data, b.data], axis=-1), (a, b),
                 lambda g: (g[..., :k], g[..., k:]))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}
_BINARY = {"add": add, "mul": mul, "concat_last_axis": concat_last_axis}


def elementwise(kind: str, *operands: Tensor) -> Tensor:
    """Dispatch by name to one of the pointwise kernels."""
    if kind in _UNARY and len(operands) == 1:
        return _UNARY[kind](operands[0])
    if kind in _BINARY and len(operands) == 2:
        return _BINARY[kind](*operands)
    raise ValueError(f"elementwise: unknown kind {kind!r} for {len(operands)} operand(s)")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_rows", s, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis with population variance, then scale and shift."""
    F = x.shape[-1]
    if gamma.shape != (F,) or beta.shape != (F,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs features {F}")
    X, G = x.data, gamma.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    xc -= xc.mean(axis=-1, keepdims=True)  # second pass removes the rounding residue of mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bwd(g):
        gxhat = g * G
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", xhat * G + beta.data, (x, gamma, beta), bwd)


def take_step(x: Tensor, t: int) -> Tensor:
    """Slice time step ``t`` out of a B x T x F tensor."""
    if x.ndim != 3:
        raise DimensionError(f"take_step: expected rank 3, got {x.shape}")
    shape = x.shape

    def bwd(g):
        full = np.zeros(shape)
        full[:, t, :] = g
        return (full,)

    return _emit("take_step", x.data[:, t, :], (x,), bwd)


def stack_steps(steps: Sequence[Tensor]) -> Tensor:
    """Stack T tensors of shape B x H into B x T x H."""
    if not steps:
        raise DimensionError("stack_steps: empty sequence")
    arr = np.stack([s.data for s in steps], axis=1)
    n = len(steps)
    return _emit("stack_steps", arr, tuple(steps),
                 lambda g: tuple(g[:, i, :] for i in range(n)))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``start:stop`` along one axis."""
    ax = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def bwd(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit("slice_axis", x.data[index], (x,), bwd)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def max_over_axis(x: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient flows to the first arg-max."""
    idx = np.expand_dims(x.data.argmax(axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)
    shape = x.shape

    def bwd(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _emit("max_over_axis", np.squeeze(out, axis=axis), (x,), bwd)


def unfold_time(x: Tensor, k: int) -> Tensor:
    """B x T x F -> B x (T-k+1) x (k*F), each row holding k consecutive steps."""
    B, T, F = x.shape
    if k < 1 or k > T:
        raise DimensionError(f"unfold_time: kernel {k} longer than sequence {T}")
    n = T - k + 1
    arr = np.concatenate([x.data[:, j:j + n, :] for j in range(k)], axis=-1)

    def bwd(g):
        full = np.zeros((B, T, F))
        for j in range(k):
            full[:, j:j + n, :] += g[..., j * F:(j + 1) * F]
        return (full,)

    return _emit("unfold_time", arr, (x,), bwd)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or no generator is given."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _emit("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum_all", np.array(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 labels."""
    z = logits.data
    y = np.asarray(labels, dtype=np.float64).reshape(z.shape)
    # log(1 + exp(-|z|)) form keeps both branches finite
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def bwd(g):
        return ((_sigmoid(z) - y) * (g / n),)

    return _emit("bce_with_logits", np.array(loss.mean()), (logits,), bwd)


# --------------------------------------------------------------------------
# finite-difference checker
# --------------------------------------------------------------------------

def relative_error(g_an: float, g_fd: float) -> float:
    return abs(g_an - g_fd) / max(1e-8, abs(g_an) + abs(g_fd))


def grad_check(forward_fn: Callable[[Dict[str, Tensor]], Tensor],
               params: Dict[str, np.ndarray],
               eps: float = 1e-5,
               n_coords: int = 20,
               seed: int = 0,
               names: Optional[Iterable[str]] = None) -> Dict[str, float]:
    """Maximum relative error between tape and central-difference gradients.

    ``forward_fn`` maps a dict of tensors to a scalar tensor.  Up to
    ``n_coords`` coordinates per parameter are sampled (all of them when the
    parameter is smaller).
    """
    rng = np.random.default_rng(seed)
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    with GradTape() as tape:
        loss = forward_fn(tensors)
    analytic = tape.gradient(loss, tensors)

    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def f(arrays):
        return forward_fn({k: Tensor(v) for k, v in arrays.items()}).item()

    result = {}
    for name in (names if names is not None else params):
        p = base[name]
        flat_idx = np.arange(p.size)
        if p.size > n_coords:
            flat_idx = rng.choice(p.size, size=n_coords, replace=False)
        worst = 0.0
        for i in flat_idx:
            idx = np.unravel_index(i, p.shape)
            orig = p[idx]
            p[idx] = orig + eps
            up = f(base)
            p[idx] = orig - eps
            down = f(base)
            p[idx] = orig
            fd = (up - down) / (2.0 * eps)
            worst = max(worst, relative_error(float(analytic[name][idx]), fd))
        result[name] = worst
    return result
