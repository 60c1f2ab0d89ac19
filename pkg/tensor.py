"""Reverse-mode autodiff on numpy arrays.

Operations executed while a :class:`Tape` is active, and that touch at least
one tensor with ``requires_grad`` set, are recorded in execution order.
``Tape.backward`` replays that record in reverse, visiting each operation
once, and sums gradient contributions into every leaf that asked for them.
Outside a tape nothing is recorded, which is how inference runs.

Every op accepts the single-sample layout named in its docstring and, where
noted, an extra leading batch axis. There is no implicit broadcasting: bias
and per-channel affine terms are the only places where a lower-rank operand
is expanded, and they are expanded inside the op.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, log_softmax, softmax

from config import BN_EPS, BN_MOMENTUM, EPS_POOL, TRAIN_DTYPE

_logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


# ─── Tape ────────────────────────────────────────────────────────────────────
_local = threading.local()


def _tape_stack() -> List["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class _Node:
    output: "Tensor"
    inputs: Tuple["Tensor", ...]
    backward: BackwardFn
    op: str


class Tape:
    """Ordered record of executed operations, confined to the creating thread."""

    def __init__(self) -> None:
        self.nodes: List[_Node] = []
        self.last_visited: int = 0

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc_info) -> bool:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> List[str]:
        return [node.op for node in self.nodes]

    def backward(self, loss: "Tensor") -> None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self and not (loss._node is None and loss.requires_grad):
            raise ValueError("loss was not recorded on this tape")

        seed = np.ones_like(loss.data)
        if loss._node is None:
            loss._accumulate(seed)
            self.last_visited = 0
            return

        pending: Dict[int, np.ndarray] = {id(loss): seed}
        visited = 0
        for node in reversed(self.nodes):
            grad = pending.pop(id(node.output), None)
            if grad is None:
                continue
            visited += 1
            for inp, inp_grad in zip(node.inputs, node.backward(grad)):
                if inp_grad is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp._accumulate(inp_grad)
                else:
                    key = id(inp)
                    pending[key] = pending[key] + inp_grad if key in pending else inp_grad
        self.last_visited = visited


def backward(loss: "Tensor") -> None:
    """Populate ``grad`` on every leaf that *loss* depends on."""

    if loss._tape is None:
        if loss._node is None and loss.requires_grad:
            loss._accumulate(np.ones_like(loss.data))
            return
        raise ValueError("loss is not reachable from any tracked tensor")
    loss._tape.backward(loss)


# ─── Tensor ──────────────────────────────────────────────────────────────────
class Tensor:
    """Dense row-major array that can take part in a recorded graph."""

    def __init__(
        self,
        data: ArrayLike,
        *,
        requires_grad: bool = False,
        dtype: Optional[np.dtype] = None,
        name: Optional[str] = None,
    ) -> None:
        arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(TRAIN_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[_Node] = None
        self._tape: Optional[Tape] = None

    # ------------------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}")
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division is only defined by a scalar constant")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def parameter(data: ArrayLike, *, dtype=None, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or TRAIN_DTYPE), requires_grad=True, name=name)


def constant(data: ArrayLike, *, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def _make(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(out, tuple(inputs), backward_fn, op)
        out._node = node
        out._tape = tape
        tape.nodes.append(node)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ─── Elementwise ─────────────────────────────────────────────────────────────
def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape("add", a, b)
        return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")
    return _make(a.data + b, (a,), lambda g: (g,), "add_scalar")


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape("sub", a, b)
        return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")
    return _make(a.data - b, (a,), lambda g: (g,), "sub_scalar")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape("mul", a, b)
        a_data, b_data = a.data, b.data
        return _make(a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data), "mul")
    return _make(a.data * b, (a,), lambda g: (g * b,), "mul_scalar")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _make(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1 - t * t),), "tanh")


def sqrt(x: Tensor) -> Tensor:
    r = np.sqrt(x.data)

    def _backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(r > 0, g * 0.5 / r, 0),)

    return _make(r, (x,), _backward, "sqrt")


def square(x: Tensor) -> Tensor:
    x_data = x.data
    return _make(x_data * x_data, (x,), lambda g: (2 * g * x_data,), "square")


# ─── Shape ───────────────────────────────────────────────────────────────────
def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def _backward(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), _backward, "sum")


def tmean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis), 1.0 / count)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {original} as {shape}") from exc
    return _make(out, (x,), lambda g: (g.reshape(original),), "reshape")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(idx)

    def _backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(x.data[idx]), (x,), _backward, "getitem")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("stack: empty sequence")
    for t in tensors[1:]:
        _same_shape("stack", tensors[0], t)
    out = np.stack([t.data for t in tensors], axis=axis)

    def _backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), _backward, "stack")


# ─── Layers ──────────────────────────────────────────────────────────────────
def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``W x + b`` for ``x`` of shape (d,) or (N, d), ``W`` (m, d), ``b`` (m,)."""

    if weight.ndim != 2:
        raise ShapeError(f"linear: weight must be 2-D, got {weight.shape}")
    if x.ndim not in (1, 2) or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} incompatible with weight {weight.shape}")

    x_data, w_data = x.data, weight.data
    out = x_data @ w_data.T
    if bias is not None:
        out = out + bias.data

    def _backward(g):
        gx = g @ w_data
        if g.ndim == 1:
            gw = np.outer(g, x_data)
            gb = g
        else:
            gw = g.T @ x_data
            gb = g.sum(axis=0)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, inputs, _backward, "linear")


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    *,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-D cross-correlation for C×H×W or N×C×H×W input, ``weight`` C_out×C_in×k×k."""

    if stride < 1 or dilation < 1 or padding < 0:
        raise ShapeError(f"conv2d: stride={stride}, padding={padding}, dilation={dilation} out of range")
    if weight.ndim != 4 or weight.shape[2] < 1 or weight.shape[3] < 1:
        raise ShapeError(f"conv2d: weight must be C_out×C_in×k×k, got {weight.shape}")
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be C×H×W or N×C×H×W, got {x.shape}")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    n, c_in, h, w = xd.shape
    c_out, w_in, kh, kw = weight.shape
    if c_in != w_in:
        raise ShapeError(f"conv2d: input has {c_in} channels, weight expects {w_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {c_out} output channels")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: padded extent of {h}×{w} admits no {kh}×{kw} window at dilation {dilation}")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = []
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation
            windows.append((slice(None), slice(None),
                            slice(r0, r0 + stride * (ho - 1) + 1, stride),
                            slice(c0, c0 + stride * (wo - 1) + 1, stride)))
    cols = np.stack([xp[sl] for sl in windows], axis=2).reshape(n, c_in * kh * kw, ho * wo)
    w_mat = weight.data.reshape(c_out, c_in * kh * kw)
    out = np.matmul(w_mat, cols).reshape(n, c_out, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    if unbatched:
        out = out[0]

    def _backward(g):
        g4 = (g[None] if unbatched else g).reshape(n, c_out, ho * wo)
        gw = np.tensordot(g4, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gcols = np.matmul(w_mat.T, g4).reshape(n, c_in, kh * kw, ho, wo)
        gxp = np.zeros_like(xp)
        for t, sl in enumerate(windows):
            gxp[sl] += gcols[:, :, t]
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        if unbatched:
            gx = gx[0]
        if bias is None:
            return gx, gw
        return gx, gw, g4.sum(axis=(0, 2))

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, inputs, _backward, "conv2d")


def _check_spatial(op: str, x: Tensor) -> None:
    if x.ndim not in (3, 4) or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"{op}: expected C×H×W or N×C×H×W with H, W ≥ 1, got {x.shape}")


def l2_pool_spatial(x: Tensor, *, normalize: bool = False, eps: float = EPS_POOL) -> Tensor:
    """Per-channel ``sqrt(sum x^2 + eps)``; ``normalize`` divides the sum by H·W."""

    _check_spatial("l2_pool_spatial", x)
    x_data = x.data
    scale = 1.0 / (x.shape[-1] * x.shape[-2]) if normalize else 1.0
    out = np.sqrt((x_data * x_data).sum(axis=(-2, -1)) * scale + eps)

    def _backward(g):
        return ((g / out)[..., None, None] * x_data * scale,)

    return _make(out, (x,), _backward, "l2_pool")


def avg_pool_spatial(x: Tensor) -> Tensor:
    _check_spatial("avg_pool_spatial", x)
    shape = x.shape
    count = shape[-1] * shape[-2]

    def _backward(g):
        return (np.broadcast_to((g / count)[..., None, None], shape).copy(),)

    return _make(x.data.mean(axis=(-2, -1)), (x,), _backward, "avg_pool")


@dataclass
class LSTMParams:
    """Single-layer LSTM weights, gate order input/forget/candidate/output."""

    w_ih: Tensor
    w_hh: Tensor
    bias: Tensor

    @property
    def hidden_size(self) -> int:
        return self.w_hh.shape[1]


def lstm_step(x: Tensor, state: Tuple[Tensor, Tensor], params: LSTMParams) -> Tuple[Tensor, Tensor]:
    h, c = state
    dh = params.hidden_size
    if params.w_ih.shape != (4 * dh, x.shape[-1]) or params.w_hh.shape != (4 * dh, dh):
        raise ShapeError(
            f"lstm_step: input {x.shape} / weights {params.w_ih.shape}, {params.w_hh.shape} inconsistent"
        )
    if h.shape != c.shape or h.shape[-1] != dh or h.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"lstm_step: state shapes {h.shape}, {c.shape} do not match input {x.shape}")

    z = add(linear(x, params.w_ih, params.bias), linear(h, params.w_hh))
    i_gate = sigmoid(z[..., 0:dh])
    f_gate = sigmoid(z[..., dh:2 * dh])
    g_cand = tanh(z[..., 2 * dh:3 * dh])
    o_gate = sigmoid(z[..., 3 * dh:4 * dh])
    c_next = add(mul(f_gate, c), mul(i_gate, g_cand))
    h_next = mul(o_gate, tanh(c_next))
    return h_next, c_next


@dataclass
class BatchNormParams:
    """Affine parameters plus running moments (buffers, not learned)."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    updates: int = 0
    _warned: bool = field(default=False, repr=False)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm2d(x: Tensor, params: BatchNormParams, *, training: bool) -> Tensor:
    """Batch normalisation over N, H, W per channel for an N×C×H×W (or C×H×W) input."""

    if x.ndim not in (3, 4) or x.shape[-3] != params.channels:
        raise ShapeError(f"batchnorm2d: input {x.shape} does not carry {params.channels} channels")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    gamma = params.gamma.data[None, :, None, None]
    beta = params.beta.data[None, :, None, None]
    axes = (0, 2, 3)

    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        unbiased = var * m / (m - 1) if m > 1 else var
        params.running_mean[...] = (1 - params.momentum) * params.running_mean + params.momentum * mean
        params.running_var[...] = (1 - params.momentum) * params.running_var + params.momentum * unbiased
        params.updates += 1
    else:
        if params.updates == 0 and not params._warned:
            _logger.warning("batchnorm2d: eval mode before any training update; using initial moments")
            params._warned = True
        m = None
        mean = params.running_mean
        var = params.running_var

    inv_std = 1.0 / np.sqrt(var + params.eps)
    xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma * xhat + beta
    if unbatched:
        out = out[0]

    def _backward(g):
        g4 = g[None] if unbatched else g
        ggamma = (g4 * xhat).sum(axis=axes)
        gbeta = g4.sum(axis=axes)
        gxhat = g4 * gamma
        if training:
            gx = (inv_std[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=axes)[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=axes)[None, :, None, None]
            )
        else:
            gx = gxhat * inv_std[None, :, None, None]
        if unbatched:
            gx = gx[0]
        return gx, ggamma, gbeta

    return _make(out, (x, params.gamma, params.beta), _backward, "batchnorm2d")


def _interp_matrix(out_size: int, in_size: int, dtype) -> np.ndarray:
    """Row i holds the bilinear weights of output i (half-pixel centres, clamped)."""

    mat = np.zeros((out_size, in_size), dtype=dtype)
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0, in_size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    rows = np.arange(out_size)
    np.add.at(mat, (rows, lo), 1 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def bilinear_upsample(x: Tensor, target: Tuple[int, int]) -> Tensor:
    _check_spatial("bilinear_upsample", x)
    out_h, out_w = target
    in_h, in_w = x.shape[-2], x.shape[-1]
    if out_h < in_h or out_w < in_w:
        raise ShapeError(f"bilinear_upsample: target {target} smaller than input {in_h}×{in_w}")
    ry = _interp_matrix(out_h, in_h, x.dtype)
    rx = _interp_matrix(out_w, in_w, x.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def _backward(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return _make(out, (x,), _backward, "bilinear_upsample")


# ─── Losses & vector helpers ─────────────────────────────────────────────────
def softmax_cross_entropy(logits: Tensor, label) -> Tensor:
    """``-log softmax(logits)[label]``; (N, K) logits with N labels give the batch mean."""

    if logits.ndim not in (1, 2):
        raise ShapeError(f"softmax_cross_entropy: logits must be (K,) or (N, K), got {logits.shape}")
    k = logits.shape[-1]
    labels = np.atleast_1d(np.asarray(label, dtype=int))
    rows = 1 if logits.ndim == 1 else logits.shape[0]
    if labels.shape != (rows,):
        raise ShapeError(f"softmax_cross_entropy: {labels.size} labels for {rows} rows")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {k})")

    z = logits.data.reshape(rows, k)
    logp = log_softmax(z, axis=1)
    loss = -logp[np.arange(rows), labels].mean()

    def _backward(g):
        grad = softmax(z, axis=1)
        grad[np.arange(rows), labels] -= 1
        return ((grad * (g / rows)).reshape(logits.shape),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), _backward, "softmax_cross_entropy")


def sigmoid_bce(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against *target* in [0, 1]."""

    target = np.asarray(target, dtype=logits.dtype)
    if target.shape != logits.shape:
        raise ShapeError(f"sigmoid_bce: target {target.shape} vs logits {logits.shape}")
    z = logits.data
    count = z.size
    loss = (np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))).mean()

    def _backward(g):
        return ((expit(z) - target) * (g / count),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), _backward, "sigmoid_bce")


def l2_normalize(v: Tensor, eps: float = EPS_POOL) -> Tensor:
    """Scale each row (last axis) to unit Euclidean length."""

    norm = np.sqrt((v.data * v.data).sum(axis=-1, keepdims=True) + eps)
    y = v.data / norm

    def _backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _make(y, (v,), _backward, "l2_normalize")


def l2_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance along the last axis; the subgradient at zero distance is 0."""

    _same_shape("l2_distance", a, b)
    diff = a.data - b.data
    dist = np.sqrt((diff * diff).sum(axis=-1))

    def _backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(dist[..., None] > 0, diff / dist[..., None], 0)
        ga = g[..., None] * unit
        return ga, -ga

    return _make(dist, (a, b), _backward, "l2_distance")


# ─── Gradient checking ───────────────────────────────────────────────────────
def _relative_errors(
    evaluate: Callable[[], float],
    array: np.ndarray,
    analytic: np.ndarray,
    h: float,
    kink_tol: float,
    atol: float,
) -> List[float]:
    errors: List[float] = []
    base = evaluate()
    flat = array.reshape(-1)
    flat_grad = analytic.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = evaluate()
        flat[i] = orig - h
        f_minus = evaluate()
        flat[i] = orig
        right = (f_plus - base) / h
        left = (base - f_minus) / h
        if abs(right - left) > kink_tol * max(1.0, abs(right), abs(left)):
            continue
        numeric = (f_plus - f_minus) / (2 * h)
        a = float(flat_grad[i])
        if abs(a - numeric) <= atol:
            errors.append(0.0)
            continue
        errors.append(abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return errors


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    *,
    kink_tol: float = 1e-2,
    atol: float = 1e-9,
) -> float:
    """Max relative error between backward's gradient and central differences.

    Positions whose one-sided differences disagree (a ReLU kink inside the
    step) are left out of the comparison, and absolute differences within
    *atol* count as agreement.
    """

    point = Tensor(np.array(x.data, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        loss = f(point)
        tape.backward(loss)
    analytic = point.grad if point.grad is not None else np.zeros_like(point.data)
    work = point.data.copy()

    def evaluate() -> float:
        return float(f(Tensor(work)).data)

    errors = _relative_errors(evaluate, work, analytic, h, kink_tol, atol)
    return max(errors, default=0.0)


def grad_check_tensors(
    loss_fn: Callable[[], Tensor],
    tensors: Dict[str, Tensor],
    h: float = 1e-5,
    *,
    kink_tol: float = 1e-2,
    atol: float = 1e-9,
) -> Dict[str, float]:
    """Like :func:`grad_check` for named leaves perturbed in place (e.g. model parameters)."""

    for t in tensors.values():
        t.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in tensors.items()
    }

    def evaluate() -> float:
        return float(loss_fn().data)

    report: Dict[str, float] = {}
    for name, t in tensors.items():
        errors = _relative_errors(evaluate, t.data, analytic[name], h, kink_tol, atol)
        report[name] = max(errors, default=0.0)
    return report
