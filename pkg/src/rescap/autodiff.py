"""Reverse-mode differentiable tensor core.

Define-by-run: every operation records its inputs and a backward closure
on the result, ``backward`` replays the recorded graph in reverse
topological order and accumulates gradients additively on fan-out.  All
compute is 64-bit; any non-finite forward value raises ``NonFiniteValue``.

A graph and its tensors are confined to one thread during forward and
backward; distinct graphs may run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rescap.errors import (
    GraphCycle,
    NonFiniteGradient,
    NonFiniteValue,
    ShapeMismatch,
    TargetOutOfRange,
)

CHECK_FINITE = True
BCE_EPS = 1e-7


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise NonFiniteValue("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, other)
        return mul(self, _as_tensor(other))

    def __neg__(self):
        return mul_scalar(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteValue(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def topo_order(root: Tensor) -> list[Tensor]:
    """Recorded graph in topological order (inputs before consumers)."""
    order: list[Tensor] = []
    done: set[int] = set()
    onstack: set[int] = {id(root)}
    stack: list[tuple[Tensor, any]] = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            pid = id(parent)
            if pid in done:
                continue
            if pid in onstack:
                raise GraphCycle("recorded graph contains a cycle")
            onstack.add(pid)
            stack.append((parent, iter(parent._parents)))
            advanced = True
            break
        if not advanced:
            stack.pop()
            onstack.discard(id(node))
            done.add(id(node))
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from a scalar."""
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward requires a scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


# --- elementwise ------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def backward_fn(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward_fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward_fn(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), backward_fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward_fn(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward_fn, "mul")


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward_fn(g):
        _accum(x, g * c)

    return _make(x.data * c, (x,), backward_fn, "mul_scalar")


def add_scalar(x: Tensor, c: float) -> Tensor:
    def backward_fn(g):
        _accum(x, g)

    return _make(x.data + float(c), (x,), backward_fn, "add_scalar")


def pow_const(x: Tensor, p: float) -> Tensor:
    out = x.data**p

    def backward_fn(g):
        _accum(x, g * p * x.data ** (p - 1.0))

    return _make(out, (x,), backward_fn, "pow_const")


def relu(x: Tensor) -> Tensor:
    def backward_fn(g):
        _accum(x, g * (x.data > 0))

    return _make(np.maximum(x.data, 0.0), (x,), backward_fn, "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))), np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))

    def backward_fn(g):
        _accum(x, g * out * (1.0 - out))

    return _make(out, (x,), backward_fn, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward_fn(g):
        _accum(x, g * (1.0 - out * out))

    return _make(out, (x,), backward_fn, "tanh")


# --- shape ------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    def backward_fn(g):
        _accum(x, g.reshape(x.data.shape))

    return _make(x.data.reshape(shape), (x,), backward_fn, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        _accum(x, g.transpose(inverse))

    return _make(x.data.transpose(axes), (x,), backward_fn, "transpose")


def subsample(x: Tensor, stride: int) -> Tensor:
    """Keep every ``stride``-th position along the last axis."""
    if stride < 1:
        raise ShapeMismatch(f"stride must be >= 1, got {stride}")

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[..., ::stride] = g
        _accum(x, gx)

    return _make(np.ascontiguousarray(x.data[..., ::stride]), (x,), backward_fn, "subsample")


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.data.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(g, x.data.shape))

    return _make(out, (x,), backward_fn, "reduce_sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([x.data.shape[a] for a in axis]))
    else:
        n = x.data.shape[axis]
    return mul_scalar(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# --- contractions -----------------------------------------------------------

def einsum2(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum whose adjoints are einsums over the same indices.

    Each operand's index set must be contained in the union of the output's
    and the other operand's, and no operand may repeat an index.
    """
    lhs, out_spec = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    if len(set(sa)) != len(sa) or len(set(sb)) != len(sb):
        raise ShapeMismatch(f"einsum2 {spec!r}: repeated index within an operand")
    if not set(sa) <= set(out_spec) | set(sb) or not set(sb) <= set(out_spec) | set(sa):
        raise ShapeMismatch(f"einsum2 {spec!r}: operand index not recoverable in backward")
    data = np.einsum(spec, a.data, b.data, optimize=True)

    def backward_fn(g):
        if a.requires_grad:
            _accum(a, np.einsum(f"{out_spec},{sb}->{sa}", g, b.data, optimize=True))
        if b.requires_grad:
            _accum(b, np.einsum(f"{out_spec},{sa}->{sb}", g, a.data, optimize=True))

    return _make(data, (a, b), backward_fn, "einsum2")


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: ``x @ weight.T + bias`` for x of shape (B, F_in)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[1]:
        raise ShapeMismatch(
            f"dense: input {x.data.shape} incompatible with weight {weight.data.shape}"
        )
    if bias.data.shape != (weight.data.shape[0],):
        raise ShapeMismatch(f"dense: bias shape {bias.data.shape}")
    return add(einsum2("bi,oi->bo", x, weight), bias)


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor, dilation: int = 1, causal: bool = True) -> Tensor:
    """Dilated 1-D convolution over (B, C, L), length-preserving.

    Causal mode pads left by ``(k - 1) * dilation`` zeros so output t only
    sees inputs at positions <= t; non-causal mode centers the padding.
    """
    xd, kd, bd = x.data, kernel.data, bias.data
    if xd.ndim != 3 or kd.ndim != 3:
        raise ShapeMismatch(f"conv1d: input {xd.shape}, kernel {kd.shape}")
    barch, C, L = xd.shape
    O, Ck, k = kd.shape
    if Ck != C:
        raise ShapeMismatch(f"conv1d: {C} input channels vs kernel expecting {Ck}")
    if bd.shape != (O,):
        raise ShapeMismatch(f"conv1d: bias shape {bd.shape} != ({O},)")
    if k < 1 or dilation < 1:
        raise ShapeMismatch("conv1d: kernel size and dilation must be >= 1")

    span = (k - 1) * dilation
    pad_left = span if causal else span // 2
    padded = np.zeros((barch, C, L + span), dtype=np.float64)
    padded[:, :, pad_left : pad_left + L] = xd
    idx = np.arange(L)[None, :] + np.arange(k)[:, None] * dilation  # (k, L)
    windows = padded[:, :, idx]  # (B, C, k, L)
    out = np.einsum("bcjt,ocj->bot", windows, kd, optimize=True) + bd[None, :, None]

    def backward_fn(g):
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2)))
        if kernel.requires_grad:
            _accum(kernel, np.einsum("bot,bcjt->ocj", g, windows, optimize=True))
        if x.requires_grad:
            dwin = np.einsum("bot,ocj->bcjt", g, kd, optimize=True)
            dpad = np.zeros_like(padded)
            for j in range(k):
                dpad[:, :, j * dilation : j * dilation + L] += dwin[:, :, j, :]
            _accum(x, dpad[:, :, pad_left : pad_left + L])

    return _make(out, (x, kernel, bias), backward_fn, "conv1d")


# --- nonlinearities with structure -------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        _accum(x, out * (g - dot))

    return _make(out, (x,), backward_fn, "softmax")


def squash(s: Tensor) -> Tensor:
    """Capsule nonlinearity over the last axis.

    v = (|s|^2 / (1 + |s|^2)) * s / |s|; maps 0 to 0 with zero gradient,
    and |v| < 1 always.
    """
    sd = s.data
    q = np.sum(sd * sd, axis=-1, keepdims=True)
    n = np.sqrt(q)
    denom = 1.0 + q
    f = np.divide(n, denom)
    out = sd * f

    def backward_fn(g):
        gs = np.sum(g * sd, axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(q > 0, (1.0 - q) / (n * denom * denom), 0.0)
        _accum(s, g * f + sd * (gs * w))

    return _make(out, (s,), backward_fn, "squash")


def bce_loss(prob: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped to [eps, 1-eps]."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    p = prob.data
    if p.shape != t.shape:
        raise ShapeMismatch(f"bce_loss: prob {p.shape} vs target {t.shape}")
    if np.any((t < 0.0) | (t > 1.0)):
        raise TargetOutOfRange("targets must lie in [0, 1]")
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    val = float(-(t * np.log(pc) + (1.0 - t) * np.log1p(-pc)).mean())

    def backward_fn(g):
        inside = (p >= BCE_EPS) & (p <= 1.0 - BCE_EPS)
        grad = np.where(inside, (pc - t) / (pc * (1.0 - pc)), 0.0) / p.size
        _accum(prob, g * grad)

    return _make(np.float64(val), (prob,), backward_fn, "bce_loss")


# --- batch normalization ------------------------------------------------------

@dataclass
class BatchNormState:
    """Running statistics for one normalization layer (per channel)."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def create(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels))

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray, momentum: float) -> None:
        self.mean = momentum * self.mean + (1.0 - momentum) * batch_mean
        self.var = momentum * self.var + (1.0 - momentum) * batch_var

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.mean.copy(), self.var.copy())


def batch_norm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState | None = None,
    mode: str = "train",
    eps: float = 1e-5,
    momentum: float = 0.9,
) -> Tensor:
    """Per-channel normalization of (B, C, L) over batch and length.

    Training mode normalizes with (biased) batch statistics and folds them
    into the running state; inference mode uses the running statistics.
    """
    if x.data.ndim != 3:
        raise ShapeMismatch(f"batch_norm1d expects (B, C, L), got {x.data.shape}")
    C = x.data.shape[1]
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ShapeMismatch("batch_norm1d: gamma/beta must have one entry per channel")
    g3 = reshape(gamma, (1, C, 1))
    b3 = reshape(beta, (1, C, 1))
    if mode == "train":
        n = x.data.shape[0] * x.data.shape[2]
        mu = mul_scalar(reduce_sum(x, axis=(0, 2), keepdims=True), 1.0 / n)
        xc = sub(x, mu)
        var = mul_scalar(reduce_sum(mul(xc, xc), axis=(0, 2), keepdims=True), 1.0 / n)
        if state is not None:
            state.update(mu.data.reshape(C), var.data.reshape(C), momentum)
        inv = pow_const(add_scalar(var, eps), -0.5)
        xhat = mul(xc, inv)
    elif mode == "infer":
        if state is None:
            raise ShapeMismatch("batch_norm1d inference requires running statistics")
        xc = sub(x, Tensor(state.mean.reshape(1, C, 1)))
        xhat = mul(xc, Tensor(1.0 / np.sqrt(state.var.reshape(1, C, 1) + eps)))
    else:
        raise ShapeMismatch(f"batch_norm1d: unknown mode {mode!r}")
    return add(mul(xhat, g3), b3)


# --- optimizer ----------------------------------------------------------------

@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Apply one bias-corrected Adam update in place.

    ``state`` is a list of ``AdamSlot`` parallel to ``params``.
    """
    for p, g, slot in zip(params, grads, state):
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("non-finite gradient in optimizer step")
        slot.t += 1
        slot.m = beta1 * slot.m + (1.0 - beta1) * g
        slot.v = beta2 * slot.v + (1.0 - beta2) * (g * g)
        m_hat = slot.m / (1.0 - beta1**slot.t)
        v_hat = slot.v / (1.0 - beta2**slot.t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = [AdamSlot(np.zeros_like(p.data), np.zeros_like(p.data)) for p in self.params]

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_global_norm(params, max_norm: float = 5.0) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient("non-finite gradient before clipping")
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm
