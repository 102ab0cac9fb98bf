"""Differentiable primitives over the engine's Tensor type.

Every op computes its forward with plain numpy, and, only while a Tape is
active and some input requires grad, appends a backward closure to the tape.
Closures read ``out.grad`` (None means the output never fed the loss) and
accumulate into inputs via ``accumulate``; nothing is mutated in place, so a
gradient buffer can never alias another tensor's storage.

Shape conventions in docstrings use brackets, e.g. x [B, T, C].
"""

from __future__ import annotations

import numpy as np

from .engine import (
    NumericsError,
    ShapeError,
    Tensor,
    accumulate,
    active_tape,
    as_tensor,
    unbroadcast,
)


def _traced_out(data) -> Tensor:
    """Op output participating in differentiation; grad stays None until backward."""
    out = Tensor(data)
    out.requires_grad = True
    out.grad = None
    return out


def _recording(*xs) -> bool:
    if active_tape() is None:
        return False
    return any(isinstance(x, Tensor) and x.requires_grad for x in xs)


def _acc(t, g) -> None:
    if isinstance(t, Tensor) and t.requires_grad:
        accumulate(t, g)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data
    if not _recording(a, b):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        _acc(a, unbroadcast(g, a.data.shape))
        _acc(b, unbroadcast(g, b.data.shape))

    active_tape().record((out,), backward)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data
    if not _recording(a, b):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        _acc(a, unbroadcast(g, a.data.shape))
        _acc(b, unbroadcast(-g, b.data.shape))

    active_tape().record((out,), backward)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data
    if not _recording(a, b):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        _acc(a, unbroadcast(g * b.data, a.data.shape))
        _acc(b, unbroadcast(g * a.data, b.data.shape))

    active_tape().record((out,), backward)
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data
    if not _recording(a, b):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        _acc(a, unbroadcast(g / b.data, a.data.shape))
        _acc(b, unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    active_tape().record((out,), backward)
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    if not _recording(a):
        return Tensor(-a.data)
    out = _traced_out(-a.data)

    def backward():
        g = out.grad
        if g is None:
            return
        _acc(a, -g)

    active_tape().record((out,), backward)
    return out


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b) -> Tensor:
    """a [..., M, K] @ b [..., K, N] -> [..., M, N]; leading dims broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data
    if not _recording(a, b):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _acc(a, unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                # common dense case: flatten batch dims straight into the GEMM
                ka = a.data.reshape(-1, a.data.shape[-1])
                _acc(b, ka.T @ g.reshape(-1, g.shape[-1]))
            else:
                _acc(b, unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    active_tape().record((out,), backward)
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)
    if not _recording(a):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        _acc(a, g * out.data)

    active_tape().record((out,), backward)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)
    if not _recording(a):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        _acc(a, g / a.data)

    active_tape().record((out,), backward)
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)
    if not _recording(a):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        _acc(a, g / (2.0 * out.data))

    active_tape().record((out,), backward)
    return out


def square(a) -> Tensor:
    a = as_tensor(a)
    data = a.data * a.data
    if not _recording(a):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        _acc(a, g * 2.0 * a.data)

    active_tape().record((out,), backward)
    return out


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument cannot overflow
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = _stable_sigmoid(a.data)
    if not _recording(a):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        _acc(a, g * out.data * (1.0 - out.data))

    active_tape().record((out,), backward)
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)
    if not _recording(a):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        _acc(a, g * (1.0 - out.data * out.data))

    active_tape().record((out,), backward)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)
    if not _recording(a):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        _acc(a, g * (a.data > 0))

    active_tape().record((out,), backward)
    return out


def swish(a) -> Tensor:
    """x * sigmoid(x)."""
    a = as_tensor(a)
    x = a.data
    s = _stable_sigmoid(x)
    data = x * s
    if not _recording(a):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        _acc(a, g * (s + x * s * (1.0 - s)))

    active_tape().record((out,), backward)
    return out


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed as logaddexp(0, x) for stability."""
    a = as_tensor(a)
    data = np.logaddexp(0.0, a.data)
    if not _recording(a):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        _acc(a, g * _stable_sigmoid(a.data))

    active_tape().record((out,), backward)
    return out


def maximum_scalar(a, c: float) -> Tensor:
    """max(x, c) elementwise; the tie x == c routes gradient to the constant."""
    a = as_tensor(a)
    data = np.maximum(a.data, c)
    if not _recording(a):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        _acc(a, g * (a.data > c))

    active_tape().record((out,), backward)
    return out


# ---------------------------------------------------------------------------
# reductions and normalizations


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if not _recording(a):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        _acc(a, np.broadcast_to(g, a.data.shape).copy())

    active_tape().record((out,), backward)
    return out


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)
    if not _recording(a):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        y = out.data
        _acc(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    active_tape().record((out,), backward)
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    data = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    if not _recording(a):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        _acc(a, g - np.exp(out.data) * g.sum(axis=axis, keepdims=True))

    active_tape().record((out,), backward)
    return out


def layer_norm(a, eps: float = 1e-6) -> Tensor:
    """Zero-mean unit-variance over the last axis; affine scale/shift live
    in the caller so a constant input maps to exactly zero."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    data = xc * inv
    if not _recording(a):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        y = out.data
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        _acc(a, inv * (g - gm - y * gym))

    active_tape().record((out,), backward)
    return out


# ---------------------------------------------------------------------------
# structural ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)
    if not _recording(a):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        _acc(a, g.reshape(a.data.shape))

    active_tape().record((out,), backward)
    return out


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    data = a.data.transpose(axes) if axes else a.data.T
    if not _recording(a):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        if axes:
            _acc(a, g.transpose(np.argsort(axes)))
        else:
            _acc(a, g.T)

    active_tape().record((out,), backward)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    if not _recording(*tensors):
        return Tensor(data)
    out = _traced_out(data)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward():
        g = out.grad
        if g is None:
            return
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _acc(t, g[tuple(sl)])

    active_tape().record((out,), backward)
    return out


def _is_basic_index(idx) -> bool:
    """True when idx cannot select any element twice (slices/ints only)."""
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(Ellipsis), type(None))) for p in parts)


def index(a, idx) -> Tensor:
    """Basic or integer-array indexing; duplicate indices accumulate."""
    a = as_tensor(a)
    data = a.data[idx]
    basic = _is_basic_index(idx)
    if not _recording(a):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        ga = np.zeros_like(a.data)
        if basic:
            ga[idx] += g
        else:
            np.add.at(ga, idx, g)
        _acc(a, ga)

    active_tape().record((out,), backward)
    return out


def embedding(table, ids: np.ndarray) -> Tensor:
    """table [V, D] gathered by integer ids [...] -> [..., D]."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    data = table.data[ids]
    if not _recording(table):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _acc(table, gt)

    active_tape().record((out,), backward)
    return out


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by ``value`` (no grad there)."""
    a = as_tensor(a)
    data = np.where(mask, np.asarray(value, dtype=a.data.dtype), a.data)
    if not _recording(a):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        _acc(a, unbroadcast(np.where(mask, 0.0, g), a.data.shape))

    active_tape().record((out,), backward)
    return out


def cumsum(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    data = np.cumsum(a.data, axis=axis)
    if not _recording(a):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        _acc(a, np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis))

    active_tape().record((out,), backward)
    return out


def lerp_mask(prev, new, keep_prev: np.ndarray) -> Tensor:
    """prev * keep + new * (1 - keep) with a constant 0/1 mask (zoneout)."""
    prev, new = as_tensor(prev), as_tensor(new)
    data = prev.data * keep_prev + new.data * (1.0 - keep_prev)
    if not _recording(prev, new):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        _acc(prev, g * keep_prev)
        _acc(new, g * (1.0 - keep_prev))

    active_tape().record((out,), backward)
    return out


def dropout(a, rate: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout; identity (and no tape node) when not training."""
    a = as_tensor(a)
    if not train or rate <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    data = a.data * keep
    if not _recording(a):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        _acc(a, g * keep)

    active_tape().record((out,), backward)
    return out


# ---------------------------------------------------------------------------
# conv1d


def conv1d(x, w, bias=None, stride: int = 1, padding=(0, 0), groups: int = 1) -> Tensor:
    """Temporal convolution.

    x [B, T, Cin], w [K, Cin // groups, Cout], bias [Cout] or None.
    ``padding`` is an explicit (left, right) pair so callers control
    same/causal/ceil semantics.  Returns [B, T_out, Cout] with
    T_out = (T + left + right - K) // stride + 1.

    Dense (groups == 1) and depthwise (one channel per group, in and out)
    cases run as flat matmuls / broadcast sums; other groupings take a
    generic einsum path.
    """
    x, w = as_tensor(x), as_tensor(w)
    if bias is not None:
        bias = as_tensor(bias)
    B, T, Cin = x.data.shape
    K, Cg, Cout = w.data.shape
    if Cin != Cg * groups or Cout % groups:
        raise ShapeError(f"conv1d channel mismatch: x {x.data.shape}, w {w.data.shape}, groups {groups}")
    pl, pr = padding
    xp = np.pad(x.data, ((0, 0), (pl, pr), (0, 0)))
    T_out = (T + pl + pr - K) // stride + 1
    if T_out <= 0:
        raise ShapeError(f"conv1d produces empty output: T={T}, K={K}, padding={padding}, stride={stride}")
    # windows [B, T_out, Cin, K] viewing xp
    win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=1)[:, ::stride]
    depthwise = groups == Cin and Cg == 1 and Cout == Cin
    if groups == 1:
        # [B, T_out, K*Cin] @ [K*Cin, Cout]
        win_flat = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(B, T_out, K * Cin)
        data = win_flat @ w.data.reshape(K * Cin, Cout)
    elif depthwise:
        wt = w.data[:, 0, :].T  # [C, K]
        data = (win * wt[None, None]).sum(axis=-1)
    else:
        win_g = win.reshape(B, T_out, groups, Cg, K)
        w_g = w.data.reshape(K, Cg, groups, Cout // groups)
        data = np.einsum("btgck,kcgo->btgo", win_g, w_g).reshape(B, T_out, Cout)
    if bias is not None:
        data = data + bias.data
    if not _recording(x, w, bias):
        return Tensor(data)
    out = _traced_out(data)

    def backward():
        g = out.grad
        if g is None:
            return
        if w.requires_grad:
            if groups == 1:
                gw = np.tensordot(win_flat, g, axes=([0, 1], [0, 1]))  # [K*Cin, Cout]
                _acc(w, gw.reshape(K, Cin, Cout))
            elif depthwise:
                _acc(w, (win * g[..., None]).sum(axis=(0, 1)).T.reshape(K, 1, Cout))
            else:
                win_g = win.reshape(B, T_out, groups, Cg, K)
                g_r = g.reshape(B, T_out, groups, Cout // groups)
                _acc(w, np.einsum("btgck,btgo->kcgo", win_g, g_r).reshape(K, Cg, Cout))
        if bias is not None and bias.requires_grad:
            _acc(bias, g.sum(axis=(0, 1)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            if groups == 1:
                wk = w.data  # [K, Cin, Cout]
                for k in range(K):
                    gxp[:, k : k + stride * T_out : stride] += g @ wk[k].T
            elif depthwise:
                wt = w.data[:, 0, :]  # [K, C]
                for k in range(K):
                    gxp[:, k : k + stride * T_out : stride] += g * wt[k]
            else:
                g_r = g.reshape(B, T_out, groups, Cout // groups)
                w_g = w.data.reshape(K, Cg, groups, Cout // groups)
                for k in range(K):
                    contrib = np.einsum("btgo,cgo->btgc", g_r, w_g[k]).reshape(B, T_out, Cin)
                    gxp[:, k : k + stride * T_out : stride] += contrib
            _acc(x, gxp[:, pl : pl + T])

    active_tape().record((out,), backward)
    return out


# ---------------------------------------------------------------------------
# fused LSTM cell


def lstm_cell(z, c_prev) -> tuple[Tensor, Tensor]:
    """One LSTM step from preactivations.

    z [B, 4H] laid out as [input | forget | cell | output] gates,
    c_prev [B, H].  Returns (h [B, H], c [B, H]).  Gate biases (including
    any forget-gate offset) belong to the caller's affine map.
    """
    z, c_prev = as_tensor(z), as_tensor(c_prev)
    B, four_h = z.data.shape
    H = four_h // 4
    zi, zf, zg, zo = (z.data[:, i * H : (i + 1) * H] for i in range(4))
    i_g, f_g, o_g = _stable_sigmoid(zi), _stable_sigmoid(zf), _stable_sigmoid(zo)
    g_g = np.tanh(zg)
    c_data = f_g * c_prev.data + i_g * g_g
    tc = np.tanh(c_data)
    h_data = o_g * tc
    if not _recording(z, c_prev):
        return Tensor(h_data), Tensor(c_data)
    h, c = _traced_out(h_data), _traced_out(c_data)

    def backward():
        gh = h.grad
        gc_out = c.grad
        if gh is None and gc_out is None:
            return
        gh = np.zeros_like(h_data) if gh is None else gh
        gc = np.zeros_like(c_data) if gc_out is None else gc_out.copy()
        go = gh * tc
        gc = gc + gh * o_g * (1.0 - tc * tc)
        gzi = gc * g_g * i_g * (1.0 - i_g)
        gzf = gc * c_prev.data * f_g * (1.0 - f_g)
        gzg = gc * i_g * (1.0 - g_g * g_g)
        gzo = go * o_g * (1.0 - o_g)
        _acc(z, np.concatenate([gzi, gzf, gzg, gzo], axis=1))
        _acc(c_prev, gc * f_g)

    active_tape().record((h, c), backward)
    return h, c
