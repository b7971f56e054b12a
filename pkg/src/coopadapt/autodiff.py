"""Minimal reverse-mode differentiation over a fixed operation set.

Everything is float64.  A ``Tape`` records forward operations in execution
order; ``backward`` replays it in reverse and returns gradients for leaves
with ``requires_grad`` set.  Frozen weights and rendered inputs are plain
leaves without the flag, so they never accumulate (or even compute) grads.

All ops take an optional ``tape``; with ``tape=None`` they run as pure
forward evaluation, which is how teacher-side inference stays graph-free.
"""

from __future__ import annotations

import numpy as np

from . import backend
from .errors import ContractError, ShapeError


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Tape:
    """Ordered record of forward ops; reverse iteration is backprop order."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def record(self, out: Tensor, inputs, backward_fn):
        if out.requires_grad:
            self.nodes.append((out, inputs, backward_fn))

    def __len__(self):
        return len(self.nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs(tape, *tensors) -> bool:
    return tape is not None and any(t.requires_grad for t in tensors)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise suite


def add(a, b, tape=None) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data, requires_grad=_needs(tape, a, b))
    if out.requires_grad:
        def bwd(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
        tape.record(out, (a, b), bwd)
    return out


def sub(a, b, tape=None) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data, requires_grad=_needs(tape, a, b))
    if out.requires_grad:
        def bwd(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
        tape.record(out, (a, b), bwd)
    return out


def mul(a, b, tape=None) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data, requires_grad=_needs(tape, a, b))
    if out.requires_grad:
        ad, bd = a.data, b.data
        def bwd(g):
            return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)
        tape.record(out, (a, b), bwd)
    return out


def relu(x, tape=None) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0), requires_grad=_needs(tape, x))
    if out.requires_grad:
        mask = x.data > 0.0
        tape.record(out, (x,), lambda g: (g * mask,))
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x, tape=None) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.data)
    out = Tensor(s, requires_grad=_needs(tape, x))
    if out.requires_grad:
        tape.record(out, (x,), lambda g: (g * s * (1.0 - s),))
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(x, tape=None) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(_softplus(x.data), requires_grad=_needs(tape, x))
    if out.requires_grad:
        xd = x.data
        tape.record(out, (x,), lambda g: (g * _sigmoid(xd),))
    return out


def sqrt(x, tape=None) -> Tensor:
    x = _as_tensor(x)
    r = np.sqrt(x.data)
    out = Tensor(r, requires_grad=_needs(tape, x))
    if out.requires_grad:
        tape.record(out, (x,), lambda g: (g * (0.5 / r),))
    return out


def smooth_l1(x, tape=None) -> Tensor:
    """Elementwise Huber with delta 1: 0.5*x^2 inside, |x|-0.5 outside."""
    x = _as_tensor(x)
    ax = np.abs(x.data)
    val = np.where(ax < 1.0, 0.5 * x.data * x.data, ax - 0.5)
    out = Tensor(val, requires_grad=_needs(tape, x))
    if out.requires_grad:
        slope = np.clip(x.data, -1.0, 1.0)
        tape.record(out, (x,), lambda g: (g * slope,))
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_all(x, tape=None) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.sum(), requires_grad=_needs(tape, x))
    if out.requires_grad:
        shape = x.shape
        tape.record(out, (x,), lambda g: (np.broadcast_to(g, shape),))
    return out


def mean_hw(x, tape=None) -> Tensor:
    """Per-channel spatial mean: [C,H,W] -> [C]."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"mean_hw expects [C,H,W], got {x.shape}")
    out = Tensor(x.data.mean(axis=(1, 2)), requires_grad=_needs(tape, x))
    if out.requires_grad:
        c, h, w = x.shape
        inv = 1.0 / (h * w)
        def bwd(g):
            return (np.broadcast_to(g[:, None, None] * inv, (c, h, w)),)
        tape.record(out, (x,), bwd)
    return out


def take_channels(x, lo: int, hi: int, tape=None) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data[lo:hi], requires_grad=_needs(tape, x))
    if out.requires_grad:
        shape = x.shape
        def bwd(g):
            full = np.zeros(shape, dtype=np.float64)
            full[lo:hi] = g
            return (full,)
        tape.record(out, (x,), bwd)
    return out


def per_channel(v, tape=None) -> Tensor:
    """Lift a [C] vector to [C,1,1] so it broadcasts against [C,H,W]."""
    v = _as_tensor(v)
    out = Tensor(v.data[:, None, None], requires_grad=_needs(tape, v))
    if out.requires_grad:
        tape.record(out, (v,), lambda g: (g.sum(axis=(1, 2)),))
    return out


# ---------------------------------------------------------------------------
# structured ops


def conv2d(x, weight, bias, padding: int | None = None, tape=None) -> Tensor:
    """Cross-correlation with zero padding, stride 1, k in {1,3}, same-size out."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects input [C,H,W] and weight [Co,Ci,k,k], got {x.shape} and {weight.shape}"
        )
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k not in (1, 3):
        raise ShapeError(f"conv2d kernel must be square 1x1 or 3x3, got {k}x{k2}")
    if x.shape[0] != c_in:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.shape[0]} channels, weight expects {c_in}"
        )
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias must be [{c_out}], got {bias.shape}")
    if padding is None:
        padding = (k - 1) // 2
    if padding != (k - 1) // 2:
        raise ShapeError(f"conv2d supports only same-size padding {(k - 1) // 2}, got {padding}")

    _, h, w = x.shape
    hw = h * w
    w2 = weight.data.reshape(c_out, c_in * k * k)
    if k == 1:
        x2 = x.data.reshape(c_in, hw)
        out_data = (w2 @ x2 + bias.data[:, None]).reshape(c_out, h, w)
        cols = None
    else:
        cols = backend.im2col3(x.data)  # [HW, Ci*9]
        out_data = (cols @ w2.T).T.reshape(c_out, h, w) + bias.data[:, None, None]

    out = Tensor(out_data, requires_grad=_needs(tape, x, weight, bias))
    if out.requires_grad:
        x_data = x.data

        def bwd(g):
            g2 = g.reshape(c_out, hw)
            if k == 1:
                gw = (g2 @ x_data.reshape(c_in, hw).T).reshape(weight.shape)
                gx = (w2.T @ g2).reshape(c_in, h, w)
            else:
                gw = (g2 @ cols).reshape(weight.shape)
                # backward-input as a conv of g with the flipped, transposed kernel
                wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                gcols = backend.im2col3(g)  # [HW, Co*9]
                gx = (gcols @ wflip.reshape(c_in, c_out * 9).T).T.reshape(c_in, h, w)
            gb = g2.sum(axis=1)
            return gx, gw, gb

        tape.record(out, (x, weight, bias), bwd)
    return out


def group_norm(x, groups: int, scale, shift, eps: float, tape=None) -> Tensor:
    """Per-group zero-mean unit-variance normalization with channel affine."""
    x, scale, shift = _as_tensor(x), _as_tensor(scale), _as_tensor(shift)
    if x.data.ndim != 3:
        raise ShapeError(f"group_norm expects [C,H,W], got {x.shape}")
    c, h, w = x.shape
    if c % groups != 0:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    if eps <= 0:
        raise ContractError("group_norm eps must be > 0")
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"group_norm affine must be [{c}], got {scale.shape}/{shift.shape}")

    gx = x.data.reshape(groups, -1)
    mean = gx.mean(axis=1, keepdims=True)
    var = gx.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((gx - mean) * inv_std).reshape(c, h, w)
    out_data = xhat * scale.data[:, None, None] + shift.data[:, None, None]

    out = Tensor(out_data, requires_grad=_needs(tape, x, scale, shift))
    if out.requires_grad:
        scale_data = scale.data

        def bwd(g):
            dxhat = (g * scale_data[:, None, None]).reshape(groups, -1)
            xh = xhat.reshape(groups, -1)
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xh).mean(axis=1, keepdims=True)
            dx = (inv_std * (dxhat - m1 - xh * m2)).reshape(c, h, w)
            dscale = (g * xhat).sum(axis=(1, 2))
            dshift = g.sum(axis=(1, 2))
            return dx, dscale, dshift

        tape.record(out, (x, scale, shift), bwd)
    return out


def max_fuse(fields, tape=None) -> Tensor:
    """Elementwise max across agent fields; grads route to the argmax agent.

    Ties route to the earliest agent in the list (ego first), deterministically.
    """
    fields = [_as_tensor(f) for f in fields]
    if not fields:
        raise ShapeError("max_fuse needs at least one field")
    for i, f in enumerate(fields[1:], start=1):
        if f.shape != fields[0].shape:
            raise ShapeError(
                f"max_fuse shape mismatch: agent 0 has {fields[0].shape}, agent {i} has {f.shape}"
            )
    stacked = np.stack([f.data for f in fields])
    winner = np.argmax(stacked, axis=0)
    out = Tensor(np.max(stacked, axis=0), requires_grad=_needs(tape, *fields))
    if out.requires_grad:
        def bwd(g):
            return tuple(g * (winner == i) for i in range(len(fields)))
        tape.record(out, tuple(fields), bwd)
    return out


def softmax_weighted_sum(fields, scores, tape=None) -> Tensor:
    """Per-cell softmax over agent scores, convex combination of agent fields.

    fields: K tensors [C,H,W]; scores: K tensors [1,H,W].
    """
    fields = [_as_tensor(f) for f in fields]
    scores = [_as_tensor(s) for s in scores]
    if len(fields) != len(scores) or not fields:
        raise ShapeError("softmax_weighted_sum needs matching non-empty field/score lists")
    for i, f in enumerate(fields[1:], start=1):
        if f.shape != fields[0].shape:
            raise ShapeError(f"softmax_weighted_sum: agent {i} field shape {f.shape} mismatched")
    s = np.stack([sc.data[0] for sc in scores])  # [K,H,W]
    s = s - s.max(axis=0, keepdims=True)
    e = np.exp(s)
    wgt = e / e.sum(axis=0, keepdims=True)  # [K,H,W]
    out_data = np.zeros_like(fields[0].data)
    for k, f in enumerate(fields):
        out_data += wgt[k] * f.data

    out = Tensor(out_data, requires_grad=_needs(tape, *fields, *scores))
    if out.requires_grad:
        fdata = [f.data for f in fields]

        def bwd(g):
            grads_f = tuple(g * wgt[k] for k in range(len(fields)))
            grads_s = tuple(
                (wgt[k] * (g * (fdata[k] - out_data)).sum(axis=0))[None] for k in range(len(fields))
            )
            return grads_f + grads_s

        tape.record(out, tuple(fields) + tuple(scores), bwd)
    return out


# ---------------------------------------------------------------------------
# backward pass


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every requires_grad leaf on the tape."""
    if loss.data.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    holders: dict[int, Tensor] = {id(loss): loss}

    for out, inputs, bwd in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        holders.pop(id(out), None)
        if g is None:
            continue
        input_grads = bwd(g)
        for inp, gin in zip(inputs, input_grads):
            if gin is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gin
            else:
                grads[key] = gin
                holders[key] = inp

    return {holders[k]: np.asarray(g, dtype=np.float64) for k, g in grads.items()}
