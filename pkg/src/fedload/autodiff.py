"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Only the operations the disaggregation network needs are provided. Each
forward pass records onto a fresh :class:`Tape`; :func:`backward` walks that
tape once in reverse and returns a :class:`~fedload.params.GradSet`.

Tensors created without a tape (constants, or every tensor in a pass that
never calls :meth:`Tape.watch`) carry no graph, which makes plain inference
and finite-difference probing cheap.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .params import GradSet, ParamSet, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "constant",
    "add",
    "sub",
    "mul",
    "matmul",
    "transpose",
    "affine",
    "sigmoid",
    "tanh",
    "concat",
    "stack",
    "dot",
    "sparsemax",
    "sparsemax_forward",
    "sparsemax_backward",
    "lstm_cell",
    "lstm_cell_forward",
    "lstm_layer",
    "l1_loss",
]


class Tensor:
    """A float64 array, optionally attached to the tape that produced it."""

    __slots__ = ("data", "tape", "name")

    def __init__(self, data, tape: "Tape | None" = None, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> list[int]:
        return list(self.data.shape)

    @property
    def values(self) -> list[float]:
        """Row-major flat values."""
        return self.data.ravel().tolist()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"


def constant(value) -> Tensor:
    return Tensor(value)


@dataclass
class _Node:
    outputs: tuple[Tensor, ...]
    inputs: tuple[Tensor, ...]
    vjp: Callable[..., Sequence[np.ndarray | None]]


class Tape:
    """Records operations of one forward pass, in execution order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: dict[str, Tensor] = {}

    def watch(self, params: ParamSet) -> dict[str, Tensor]:
        """Register every entry of ``params`` as a differentiable leaf."""
        for name, arr in params.items():
            if name in self.params:
                raise ValueError(f"parameter {name!r} already watched on this tape")
            self.params[name] = Tensor(arr, tape=self, name=name)
        return dict(self.params)

    def __len__(self) -> int:
        return len(self.nodes)

    def release(self) -> None:
        """Drop recorded nodes and their caches.

        Tensors point back at their tape, so a finished tape is otherwise
        freed only by the cycle collector, which can lag many steps behind.
        """
        self.nodes.clear()


def _tape_of(*tensors: Tensor) -> Tape | None:
    for t in tensors:
        if t.tape is not None:
            return t.tape
    return None


def _record(outputs, inputs: tuple[Tensor, ...], vjp) -> tuple[Tensor, ...]:
    tape = _tape_of(*inputs)
    outs = tuple(Tensor(o, tape=tape) for o in outputs)
    if tape is not None:
        tape.nodes.append(_Node(outs, inputs, vjp))
    return outs


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise ------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _record(
        (a.data + b.data,), (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )[0]


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _record(
        (a.data - b.data,), (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )[0]


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _record(
        (ad * bd,), (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )[0]


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _record((y,), (a,), lambda g: (g * y * (1.0 - y),))[0]


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record((y,), (a,), lambda g: (g * (1.0 - y * y),))[0]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * x)


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with numpy batching rules (both operands at least 2-D)."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs 2-D or batched operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record((ad @ bd,), (a, b), vjp)[0]


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _record((np.swapaxes(a.data, -1, -2),), (a,), lambda g: (np.swapaxes(g, -1, -2),))[0]


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Dense layer ``x @ weight.T + bias`` applied over the last axis of ``x``."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[1] or bias.data.shape != (wd.shape[0],):
        raise ShapeError(
            f"affine shapes do not line up: x{xd.shape}, "
            f"{weight.name or 'weight'}{wd.shape}, {bias.name or 'bias'}{bias.data.shape}"
        )

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (
            g @ wd,
            g2.T @ xd.reshape(-1, xd.shape[-1]),
            g2.sum(axis=0),
        )

    return _record((xd @ wd.T + bias.data,), (x, weight, bias), vjp)[0]


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product over the last axis."""
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-1]:
        raise ShapeError(f"dot over mismatched last axes: {ad.shape} and {bd.shape}")
    out = np.sum(ad * bd, axis=-1)

    def vjp(g):
        g = g[..., None]
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record((out,), (a, b), vjp)[0]


# -- structure ----------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    ax = axis % datas[0].ndim
    bounds = np.cumsum([d.shape[ax] for d in datas])[:-1]
    return _record(
        (np.concatenate(datas, axis=ax),), tuple(tensors),
        lambda g: tuple(np.split(g, bounds, axis=ax)),
    )[0]


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    n = len(tensors)
    return _record(
        (out,), tuple(tensors),
        lambda g: tuple(np.take(g, i, axis=ax) for i in range(n)),
    )[0]


# -- sparsemax ----------------------------------------------------------------

def sparsemax_forward(z) -> np.ndarray:
    """Euclidean projection of each last-axis row of ``z`` onto the simplex."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] == 0:
        raise ValueError("sparsemax needs a non-empty last axis")
    if not np.isfinite(z).all():
        raise ValueError("sparsemax input must be finite")
    n = z.shape[-1]
    z_sorted = -np.sort(-z, axis=-1)
    cumsum = np.cumsum(z_sorted, axis=-1)
    k = np.arange(1, n + 1, dtype=np.float64)
    support = 1.0 + k * z_sorted > cumsum
    k_z = support.sum(axis=-1, keepdims=True)
    tau = (np.take_along_axis(cumsum, k_z - 1, axis=-1) - 1.0) / k_z
    return np.maximum(z - tau, 0.0)


def sparsemax_backward(z, upstream) -> np.ndarray:
    """Vector-Jacobian product of sparsemax at ``z``.

    On the support S the Jacobian is ``I - 1 1^T / |S|``; elsewhere it is zero.
    """
    return _sparsemax_vjp(sparsemax_forward(z), np.asarray(upstream, dtype=np.float64))


def _sparsemax_vjp(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    supp = p > 0
    size = supp.sum(axis=-1, keepdims=True)
    g_supp = np.where(supp, g, 0.0)
    return np.where(supp, g - g_supp.sum(axis=-1, keepdims=True) / size, 0.0)


def sparsemax(z: Tensor) -> Tensor:
    p = sparsemax_forward(z.data)
    return _record((p,), (z,), lambda g: (_sparsemax_vjp(p, g),))[0]


# -- LSTM cell -----------------------------------------------------------------

def lstm_cell_forward(x, h_prev, c_prev, w_ih, w_hh, b_ih, b_hh):
    """One LSTM step on raw arrays; returns ``(h, c, cache)``.

    Gate rows of ``w_ih``/``w_hh`` are stacked in the order input, forget,
    cell candidate, output (each ``hidden`` rows).
    """
    hidden = w_hh.shape[1]
    if w_ih.shape[0] != 4 * hidden or w_hh.shape[0] != 4 * hidden:
        raise ShapeError(f"LSTM weights need 4*{hidden} rows, got w_ih{w_ih.shape}, w_hh{w_hh.shape}")
    if x.shape[-1] != w_ih.shape[1]:
        raise ShapeError(f"LSTM input width {x.shape[-1]} does not match w_ih{w_ih.shape}")
    if h_prev.shape[-1] != hidden or c_prev.shape[-1] != hidden:
        raise ShapeError(
            f"LSTM state widths h{h_prev.shape}, c{c_prev.shape} do not match hidden size {hidden}"
        )
    pre = x @ w_ih.T + b_ih + h_prev @ w_hh.T + b_hh
    sig = _sigmoid(pre)
    i = sig[..., :hidden]
    f = sig[..., hidden:2 * hidden]
    g = np.tanh(pre[..., 2 * hidden:3 * hidden])
    o = sig[..., 3 * hidden:]
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (i, f, g, o, tc)


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor,
              w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> tuple[Tensor, Tensor]:
    """Fused LSTM step recorded as a single two-output tape node."""
    xd, hd, cd = x.data, h_prev.data, c_prev.data
    wi, wh = w_ih.data, w_hh.data
    try:
        h, c, (i, f, g, o, tc) = lstm_cell_forward(xd, hd, cd, wi, wh, b_ih.data, b_hh.data)
    except ShapeError as exc:
        names = ", ".join(t.name for t in (w_ih, w_hh, b_ih, b_hh) if t.name)
        raise ShapeError(f"{exc} [{names}]" if names else str(exc)) from None

    def vjp(gh, gc):
        d_pre, dc_prev = _gate_grads(gh, gc, cd, i, f, g, o, tc)
        flat = d_pre.reshape(-1, d_pre.shape[-1])
        db = flat.sum(axis=0)
        return (
            d_pre @ wi,
            d_pre @ wh,
            dc_prev,
            flat.T @ xd.reshape(-1, xd.shape[-1]),
            flat.T @ hd.reshape(-1, hd.shape[-1]),
            db,
            db.copy(),
        )

    h_t, c_t = _record((h, c), (x, h_prev, c_prev, w_ih, w_hh, b_ih, b_hh), vjp)
    return h_t, c_t


def _gate_grads(gh, gc, c_prev, i, f, g, o, tc):
    """Pre-activation gradient and carried cell gradient for one step."""
    dc = gc + gh * o * (1.0 - tc * tc)
    d_pre = np.concatenate(
        [
            dc * g * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            gh * tc * o * (1.0 - o),
        ],
        axis=-1,
    )
    return d_pre, dc * f


def lstm_layer(xs: Tensor, h0: Tensor, c0: Tensor, w_ih: Tensor, w_hh: Tensor,
               b_ih: Tensor, b_hh: Tensor, reverse: bool = False) -> tuple[Tensor, Tensor, Tensor]:
    """Run one LSTM direction over a whole sequence as a single tape node.

    ``xs`` is ``(..., T, in)``. Returns the per-step hidden states
    ``(..., T, H)`` plus the state after the last consumed step. With
    ``reverse`` the steps run ``T-1`` down to ``0``. Numerically identical to
    chaining :func:`lstm_cell`; the input projection for every step is done in
    one matmul and backprop-through-time is hand written.
    """
    X, hd, cd = xs.data, h0.data, c0.data
    wi, wh = w_ih.data, w_hh.data
    T = X.shape[-2]
    if T == 0:
        raise ShapeError("lstm_layer needs at least one step")
    # validates shapes (and names them on failure) using step 0
    try:
        lstm_cell_forward(X[..., 0, :], hd, cd, wi, wh, b_ih.data, b_hh.data)
    except ShapeError as exc:
        names = ", ".join(t.name for t in (w_ih, w_hh, b_ih, b_hh) if t.name)
        raise ShapeError(f"{exc} [{names}]" if names else str(exc)) from None
    hidden = wh.shape[1]
    bias = b_ih.data + b_hh.data
    wiT, whT = wi.T, wh.T
    lead = X.shape[:-2]
    H_all = np.empty(lead + (T, hidden))
    xs_t = [X[..., t, :] for t in range(T)]
    states = [None] * T        # (h_prev, c_prev) fed into step t
    caches = [None] * T
    order = range(T - 1, -1, -1) if reverse else range(T)
    h, c = hd, cd
    for t in order:
        states[t] = (h, c)
        pre = xs_t[t] @ wiT
        pre += h @ whT
        pre += bias
        sig = _sigmoid(pre)
        i = sig[..., :hidden]
        f = sig[..., hidden:2 * hidden]
        g = np.tanh(pre[..., 2 * hidden:3 * hidden])
        o = sig[..., 3 * hidden:]
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        H_all[..., t, :] = h
        caches[t] = (i, f, g, o, tc)

    def vjp(gH, gh, gc):
        dX = np.empty_like(X)
        dwi = np.zeros_like(wi)
        dwh = np.zeros_like(wh)
        db = np.zeros(4 * hidden)
        dh, dc = gh, gc
        for t in reversed(order):
            h_prev, c_prev = states[t]
            d_pre, dc = _gate_grads(dh + gH[..., t, :], dc, c_prev, *caches[t])
            flat = d_pre.reshape(-1, 4 * hidden)
            dwi += flat.T @ xs_t[t].reshape(-1, X.shape[-1])
            dwh += flat.T @ h_prev.reshape(-1, hidden)
            db += flat.sum(axis=0)
            dX[..., t, :] = d_pre @ wi
            dh = d_pre @ wh
        return dX, dh, dc, dwi, dwh, db, db.copy()

    H_all_out = H_all
    out = _record((H_all_out, h, c), (xs, h0, c0, w_ih, w_hh, b_ih, b_hh), vjp)
    return out[0], out[1], out[2]


# -- loss --------------------------------------------------------------------

def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error over every element."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ShapeError(f"l1_loss shapes differ: pred{pred.data.shape} vs target{target.shape}")
    diff = pred.data - target
    n = diff.size
    return _record(
        (np.array(np.abs(diff).sum() / n),), (pred,),
        lambda g: (g * np.sign(diff) / n,),
    )[0]


# -- reverse pass -------------------------------------------------------------

def backward(loss: Tensor) -> GradSet:
    """Gradient of a scalar ``loss`` with respect to every watched parameter.

    Parameters that the loss does not depend on receive zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise ValueError("loss was not computed on a tape; call Tape.watch first")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        outs = [grads.pop(id(o), None) for o in node.outputs]
        if all(g is None for g in outs):
            continue
        outs = [np.zeros_like(o.data) if g is None else g for o, g in zip(node.outputs, outs)]
        for inp, g in zip(node.inputs, node.vjp(*outs)):
            if inp.tape is None or g is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    result = {}
    for name, leaf in tape.params.items():
        g = grads.get(id(leaf))
        result[name] = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=np.float64)
    out = GradSet(result)
    if not out.all_finite():
        bad = sorted(k for k, v in out.items() if not np.isfinite(v).all())
        raise FloatingPointError(f"non-finite gradients for {bad}")
    return out
