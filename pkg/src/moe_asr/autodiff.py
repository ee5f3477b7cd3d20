"""Minimal reverse-mode autodiff over numpy arrays.

Every op computes its forward value eagerly and, when a GradTape is active,
records a backward rule. The tape is rebuilt per forward pass (define-by-run);
inference simply runs with no tape and pays no recording cost.

Differentiable arguments are Tensors; masks, indices and hyperparameters are
plain numpy arrays / Python scalars and receive no gradient.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class Tensor:
    """Dense n-dimensional float array plus the bookkeeping backward needs.

    float32 by default; float64 is used by the finite-difference oracle mode.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        # set when this tensor is the output of a recorded op
        self._tracked = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


class Parameter(Tensor):
    """Named trainable tensor; the name doubles as the checkpoint key."""

    __slots__ = ("name",)

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


@dataclass
class Node:
    out: Tensor
    inputs: tuple
    rule: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    kind: Optional[str] = None


class GradTape:
    """Records ops in execution order (a valid topological order) and walks
    them once, in reverse, accumulating gradients additively across fan-out."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and accumulate into .grad of every leaf
        (requires_grad) tensor reachable from `loss`. Leaf grads add onto any
        existing .grad so batches can accumulate across multiple tapes."""
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.rule(g)
            for t, ig in zip(node.inputs, in_grads):
                if ig is None or not isinstance(t, Tensor) or not t._tracked:
                    continue
                if t.requires_grad:
                    t.grad = ig if t.grad is None else t.grad + ig
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = ig if prev is None else prev + ig
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0


_TAPE_STACK: list[GradTape] = []


def record_op(out: Tensor, inputs: tuple, rule, kind: Optional[str] = None) -> Tensor:
    """Attach a backward rule to `out` on the active tape (no-op when untaped).

    `rule(out_grad)` must return one gradient (or None) per input, aligned.
    Exposed so composite modules (e.g. the CTC loss) can define custom nodes.
    """
    if not _TAPE_STACK:
        return out
    if not any(isinstance(t, Tensor) and t._tracked for t in inputs):
        return out
    out._tracked = True
    _TAPE_STACK[-1].nodes.append(Node(out, inputs, rule, kind))
    return out


# ---------------------------------------------------------------------------
# multiply-add counting (used by the efficiency benchmark)

@dataclass
class MacCounter:
    macs: int = 0
    by_tag: dict = field(default_factory=dict)


_MAC_STACK: list[MacCounter] = []


@contextmanager
def count_macs():
    """Count multiply-adds of matmul-like ops (linear/matmul/conv) executed
    inside the context. Elementwise work is not counted."""
    c = MacCounter()
    _MAC_STACK.append(c)
    try:
        yield c
    finally:
        _MAC_STACK.pop()


def _add_macs(n: int):
    for c in _MAC_STACK:
        c.macs += int(n)


# ---------------------------------------------------------------------------
# primitive ops


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return record_op(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                             _unbroadcast(g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def rule(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return record_op(out, (a, b), rule)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * a.data.dtype.type(c))
    return record_op(out, (a,), lambda g: (g * a.data.dtype.type(c),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D or batched 3-D matmul (leading dims must match exactly)."""
    out = Tensor(a.data @ b.data)
    _add_macs(out.data.size * a.data.shape[-1])

    def rule(g):
        return (g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g)

    return record_op(out, (a, b), rule)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """y = x @ w (+ b) over the last axis; x may have any leading shape."""
    d_in, d_out = w.data.shape
    if x.data.shape[-1] != d_in:
        raise ValueError(
            f"linear: input dim {x.data.shape[-1]} != weight dim {d_in}")
    x2 = x.data.reshape(-1, d_in)
    y2 = x2 @ w.data
    if b is not None:
        y2 = y2 + b.data
    _add_macs(x2.shape[0] * d_in * d_out)
    out = Tensor(y2.reshape(x.data.shape[:-1] + (d_out,)))

    def rule(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ w.data.T).reshape(x.data.shape)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb)

    return record_op(out, (x, w, b), rule)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return record_op(out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    out = Tensor(a.data.transpose(axes))
    return record_op(out, (a,), lambda g: (g.transpose(inv),))


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    out = Tensor(a.data[..., lo:hi])

    def rule(g):
        z = np.zeros_like(a.data)
        z[..., lo:hi] = g
        return (z,)

    return record_op(out, (a,), rule)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    sizes = [p.data.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def rule(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return record_op(out, tuple(parts), rule)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather (also the embedding lookup). Backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx])

    def rule(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return record_op(out, (a,), rule)


def scatter_rows(rows: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Place `rows` at positions `idx` of an otherwise-zero [n_rows, d] array."""
    idx = np.asarray(idx, dtype=np.int64)
    z = np.zeros((n_rows,) + rows.data.shape[1:], dtype=rows.data.dtype)
    np.add.at(z, idx, rows.data)
    out = Tensor(z)
    return record_op(out, (rows,), lambda g: (g[idx],))


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[..., j] = a[..., idx[..., j]]; idx broadcasts over leading axes."""
    idx_b = np.broadcast_to(idx, a.data.shape[:-1] + idx.shape[-1:])
    r = int(np.prod(a.data.shape[:-1], dtype=np.int64)) if a.data.ndim > 1 else 1
    a2 = a.data.reshape(r, a.data.shape[-1])
    idx2 = idx_b.reshape(r, idx_b.shape[-1]).astype(np.int64)
    rows = np.arange(r)[:, None]
    out = Tensor(a2[rows, idx2].reshape(idx_b.shape))

    def rule(g):
        z = np.zeros_like(a2)
        np.add.at(z, (rows, idx2), g.reshape(r, idx2.shape[-1]))
        return (z.reshape(a.data.shape),)

    return record_op(out, (a,), rule)


def take_elems(a: Tensor, ridx: np.ndarray, cidx: np.ndarray) -> Tensor:
    """Vector of a[ridx[i], cidx[i]]."""
    ridx = np.asarray(ridx, dtype=np.int64)
    cidx = np.asarray(cidx, dtype=np.int64)
    out = Tensor(a.data[ridx, cidx])

    def rule(g):
        z = np.zeros_like(a.data)
        np.add.at(z, (ridx, cidx), g)
        return (z,)

    return record_op(out, (a,), rule)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return record_op(out, (a,), rule)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    return record_op(out, (a,), lambda g: (g * (a.data > 0),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))  # never overflows
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    out = Tensor(s)
    return record_op(out, (a,), lambda g: (g * s * (1.0 - s),))


def swish(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    out = Tensor(a.data * s)
    return record_op(out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def glu(a: Tensor) -> Tensor:
    """Gated linear unit over the last axis: first half gated by sigmoid of
    the second half."""
    d = a.data.shape[-1]
    if d % 2:
        raise ValueError("glu: last dim must be even")
    half = d // 2
    return mul(slice_cols(a, 0, half), sigmoid(slice_cols(a, half, d)))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def rule(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - dot),)

    return record_op(out, (a,), rule)


def masked_softmax(scores: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over positions where `mask` is True; others get probability 0.

    A row with no allowed position is a caller error, not a quiet nan.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.data.shape)
    if not mask.any(axis=axis).all():
        raise ValueError("empty attention row")
    neg = np.where(mask, scores.data, -np.inf)
    m = neg.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(neg - m), 0.0).astype(scores.data.dtype)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def rule(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - dot),)

    return record_op(out, (scores,), rule)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    z = a.data - m
    ls = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = Tensor(ls)

    def rule(g):
        return (g - np.exp(ls) * g.sum(axis=axis, keepdims=True),)

    return record_op(out, (a,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over the last axis, then affine."""
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * ivar
    out = Tensor(xhat * gamma.data + beta.data)

    def rule(g):
        dg = (g * xhat).reshape(-1, d).sum(axis=0)
        db = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gamma.data
        dx = ivar / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return (dx.astype(x.data.dtype), dg, db)

    return record_op(out, (x, gamma, beta), rule)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    """Single-head attention: softmax(q kᵀ / sqrt(d_k) + mask bias) v.

    `mask` is boolean [T_q, T_kv]; False positions are excluded entirely.
    """
    d_k = q.data.shape[-1]
    scores = scale(matmul(q, transpose(k, (1, 0))), 1.0 / np.sqrt(d_k))
    probs = masked_softmax(scores, mask)
    return matmul(probs, v)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: tuple[int, int]) -> Tensor:
    """Valid (unpadded) 2-D convolution, x: [C_in, H, W] -> [C_out, OH, OW]."""
    c_in, hh, ww = x.data.shape
    c_out, c_in2, kh, kw = w.data.shape
    if c_in != c_in2:
        raise ValueError("conv2d: channel mismatch")
    sh, sw = stride
    if hh < kh or ww < kw:
        raise ValueError("conv2d: input smaller than kernel")
    oh = (hh - kh) // sh + 1
    ow = (ww - kw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(1, 2))
    win = win[:, ::sh, ::sw]                      # [C_in, OH, OW, kh, kw]
    patches = win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, c_in * kh * kw)
    wmat = w.data.reshape(c_out, -1)
    y2 = patches @ wmat.T + b.data
    _add_macs(oh * ow * c_out * c_in * kh * kw)
    out = Tensor(y2.reshape(oh, ow, c_out).transpose(2, 0, 1))

    def rule(g):
        g2 = g.transpose(1, 2, 0).reshape(oh * ow, c_out)
        gw = (g2.T @ patches).reshape(w.data.shape)
        gb = g2.sum(axis=0)
        dpatch = (g2 @ wmat).reshape(oh, ow, c_in, kh, kw)
        gx = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                gx[:, i:i + oh * sh:sh, j:j + ow * sw:sw] += \
                    dpatch[:, :, :, i, j].transpose(2, 0, 1)
        return (gx, gw, gb)

    return record_op(out, (x, w, b), rule)


def _depthwise_core(x: Tensor, w: Tensor, b: Tensor, pad: tuple[int, int]) -> Tensor:
    k = w.data.shape[0]
    xp = np.pad(x.data, (pad, (0, 0)))
    t_out = xp.shape[0] - k + 1
    d = x.data.shape[1]
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=0)  # [T_out, d, k]
    y = np.einsum("tck,kc->tc", win, w.data) + b.data
    _add_macs(t_out * k * d)
    out = Tensor(y.astype(x.data.dtype))

    def rule(g):
        gw = np.einsum("tc,tck->kc", g, win).astype(w.data.dtype)
        gb = g.sum(axis=0)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[j:j + t_out] += g * w.data[j]
        gx = gxp[pad[0]:pad[0] + x.data.shape[0]]
        return (gx, gw, gb)

    return record_op(out, (x, w, b), rule)


def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor, causal: bool) -> Tensor:
    """Per-channel 1-D convolution over time, length preserving.

    x: [T, d], w: [k, d]. Causal mode pads only on the left so output t
    depends on inputs <= t; otherwise padding is symmetric.
    """
    k = w.data.shape[0]
    pad = (k - 1, 0) if causal else ((k - 1) // 2, k - 1 - (k - 1) // 2)
    return _depthwise_core(x, w, b, pad)


def depthwise_conv1d_valid(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Unpadded variant for chunked streaming: the caller supplies the left
    context rows explicitly; output length is T - k + 1."""
    if x.data.shape[0] < w.data.shape[0]:
        raise ValueError("depthwise_conv1d_valid: input shorter than kernel")
    return _depthwise_core(x, w, b, (0, 0))


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    worst_input: int
    worst_index: int
    message: str = ""

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"grad_check {status}: max rel err {self.max_rel_err:.3e} "
                f"(input {self.worst_input}, element {self.worst_index}) {self.message}")


def grad_check(op_closure, inputs: Sequence[Tensor], tol: float = 1e-4,
               samples_per_input: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    The closure maps the input tensors to an output tensor; a fixed random
    projection reduces it to a scalar so every output element is exercised.
    Runs in 64-bit only. `samples_per_input` limits the checked coordinates
    per tensor (seeded subset) for large parameter sets; None checks all.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.requires_grad = True
        t._tracked = True
        t.grad = None

    with GradTape() as tape:
        out = op_closure(*inputs)
        proj = Tensor(rng.standard_normal(out.data.shape), dtype=np.float64)
        loss = tsum(mul(out, proj))
    tape.backward(loss)
    analytic = [None if t.grad is None else t.grad.copy() for t in inputs]

    def eval_loss() -> float:
        val = op_closure(*inputs)
        return float((val.data * proj.data).sum())

    worst = (0.0, -1, -1)
    msg = ""
    for i, t in enumerate(inputs):
        a = analytic[i]
        if a is None:
            a = np.zeros_like(t.data)
        if not np.isfinite(a).all():
            return GradCheckReport(False, np.inf, i, int(np.flatnonzero(~np.isfinite(a))[0]),
                                   "non-finite analytic gradient")
        flat = t.data.reshape(-1)
        n = flat.size
        if samples_per_input is not None and n > samples_per_input:
            coords = rng.choice(n, size=samples_per_input, replace=False)
        else:
            coords = np.arange(n)
        for j in coords:
            h = 1e-5 * max(1.0, abs(flat[j]))
            orig = flat[j]
            flat[j] = orig + h
            fp = eval_loss()
            flat[j] = orig - h
            fm = eval_loss()
            flat[j] = orig
            num = (fp - fm) / (2 * h)
            if not np.isfinite(num):
                return GradCheckReport(False, np.inf, i, int(j),
                                       "non-finite numeric gradient")
            ana = a.reshape(-1)[j]
            rel = abs(ana - num) / max(abs(ana), abs(num), 1.0)
            if rel > worst[0]:
                worst = (rel, i, int(j))
    return GradCheckReport(worst[0] <= tol, worst[0], worst[1], worst[2], msg)
