"""Dense tensor engine with reverse-mode differentiation over a recorded tape.

Forward operations cover exactly what an encoder-decoder segmentation stream
needs: 3x3/pad-1 convolution, relu, 2x2 max pooling with stored argmax
positions, the matching unpooling, channel softmax, masked cross entropy,
plus elementwise add / scalar scale / sum / channel concat as glue.

Every op takes an optional ``tape``; passing ``None`` runs inference-only
(nothing recorded, no backward possible). Training runs in float32; gradient
checking uses float64 tensors built the same way.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    """N-dimensional value with an optional gradient buffer of equal shape.

    ``frozen`` marks parameters that sgd_step must leave untouched.
    """

    __slots__ = ("data", "grad", "frozen")

    def __init__(self, data, dtype=None, frozen=False):
        self.data = np.array(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.frozen = frozen

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class _Record:
    """One executed operation: its output and a closure producing input grads."""

    __slots__ = ("out", "backward")

    def __init__(self, out, backward):
        self.out = out
        self.backward = backward


class Tape:
    """Ordered log of executed operations; replayed in reverse by backward()."""

    def __init__(self):
        self.records = []

    def record(self, out, backward):
        self.records.append(_Record(out, backward))

    def clear(self):
        """Drop all records and the cached intermediates they hold."""
        self.records.clear()

    def __len__(self):
        return len(self.records)


# ---------------------------------------------------------------------------
# forward ops


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, tape: Tape | None = None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1; spatial size preserved.

    x: (N, Cin, H, W), weight: (Cout, Cin, 3, 3), bias: (Cout,).
    """
    xv, wv, bv = x.data, weight.data, bias.data
    if xv.ndim != 4 or wv.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {xv.shape} and {wv.shape}")
    if wv.shape[2:] != (3, 3):
        raise ValueError(f"conv2d kernel must be 3x3, got {wv.shape[2:]}")
    if xv.shape[1] != wv.shape[1]:
        raise ValueError(f"channel mismatch: input has {xv.shape[1]}, weight expects {wv.shape[1]}")
    n, cin, h, w = xv.shape
    cout = wv.shape[0]

    xp = np.zeros((n, cin, h + 2, w + 2), dtype=xv.dtype)
    xp[:, :, 1:-1, 1:-1] = xv
    # (n, cin, h, w, 3, 3) view over the padded input; no copy
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * w, cin * 9)
    wm = wv.reshape(cout, cin * 9)
    out_flat = cols @ wm.T
    out_flat += bv
    out = Tensor(out_flat.transpose(0, 2, 1).reshape(n, cout, h, w))

    if tape is not None:
        def backward(g):
            gf = g.transpose(0, 2, 3, 1).reshape(n, h * w, cout)
            # recompute the column view from the cached padded input
            win_b = sliding_window_view(xp, (3, 3), axis=(2, 3))
            cols_b = win_b.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * w, cin * 9)
            dw = np.einsum("npk,npc->kc", gf, cols_b).reshape(cout, cin, 3, 3)
            db = gf.sum(axis=(0, 1))
            gcols = (gf @ wm).reshape(n, h, w, cin, 3, 3)
            gxp = np.zeros_like(xp)
            for dy in range(3):
                for dx in range(3):
                    gxp[:, :, dy:dy + h, dx:dx + w] += gcols[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
            return [(x, gxp[:, :, 1:-1, 1:-1]), (weight, dw), (bias, db)]

        tape.record(out, backward)
    return out


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    xv = x.data
    out = Tensor(np.maximum(xv, 0))
    if tape is not None:
        mask = xv > 0

        def backward(g):
            return [(x, g * mask)]

        tape.record(out, backward)
    return out


def maxpool2(x: Tensor, tape: Tape | None = None):
    """2x2 max pooling with stride 2. Returns (values, indices).

    indices are flat row-major positions into the H*W input plane, one per
    output cell; ties resolve to the first position in row-major order.
    """
    xv = x.data
    n, c, h, w = xv.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = xv.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    arg = windows.argmax(axis=-1)  # first max wins: row-major tie rule
    vals = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    by = np.arange(h2)[:, None]
    bx = np.arange(w2)[None, :]
    iy = 2 * by + arg // 2
    ix = 2 * bx + arg % 2
    indices = (iy * w + ix).astype(np.int64)
    out = Tensor(vals)

    if tape is not None:
        def backward(g):
            gx = np.zeros((n, c, h * w), dtype=g.dtype)
            np.put_along_axis(gx, indices.reshape(n, c, -1), g.reshape(n, c, -1), axis=2)
            return [(x, gx.reshape(n, c, h, w))]

        tape.record(out, backward)
    return out, indices


def maxunpool2(y: Tensor, indices: np.ndarray, out_h: int, out_w: int,
               tape: Tape | None = None) -> Tensor:
    """Scatter pooled values back to their recorded positions, zeros elsewhere."""
    yv = y.data
    n, c, h2, w2 = yv.shape
    if indices.shape != yv.shape:
        raise ValueError(f"indices shape {indices.shape} != input shape {yv.shape}")
    if indices.min() < 0 or indices.max() >= out_h * out_w:
        raise ValueError(f"pool index out of bounds for {out_h}x{out_w} output")
    flat = np.zeros((n, c, out_h * out_w), dtype=yv.dtype)
    np.put_along_axis(flat, indices.reshape(n, c, -1), yv.reshape(n, c, -1), axis=2)
    out = Tensor(flat.reshape(n, c, out_h, out_w))

    if tape is not None:
        def backward(g):
            gy = np.take_along_axis(g.reshape(n, c, -1), indices.reshape(n, c, -1), axis=2)
            return [(y, gy.reshape(n, c, h2, w2))]

        tape.record(out, backward)
    return out


def softmax_channels(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    xv = x.data
    m = xv.max(axis=1, keepdims=True)
    e = np.exp(xv - m)
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor(s)
    if tape is not None:
        def backward(g):
            dot = (g * s).sum(axis=1, keepdims=True)
            return [(x, s * (g - dot))]

        tape.record(out, backward)
    return out


def cross_entropy(scores: Tensor, labels: np.ndarray, ignore: np.ndarray | None = None,
                  tape: Tape | None = None) -> Tensor:
    """Mean of -log softmax(scores)[label] over non-ignored pixels.

    labels: (N, H, W) integer class indices; ignore: optional (N, H, W) bool
    mask, True where a pixel contributes neither loss nor gradient.
    """
    xv = scores.data
    n, k, h, w = xv.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} != {(n, h, w)}")
    if ignore is None:
        valid = np.ones((n, h, w), dtype=bool)
    else:
        valid = ~np.asarray(ignore, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        raise ValueError("cross_entropy: all pixels ignored, no gradient signal")
    checked = labels[valid]
    if checked.size and (checked.min() < 0 or checked.max() >= k):
        raise ValueError(f"label outside [0, {k}) at a non-ignored pixel")

    m = xv.max(axis=1)
    lse = m + np.log(np.exp(xv - m[:, None]).sum(axis=1))
    safe_labels = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(xv, safe_labels[:, None], axis=1)[:, 0]
    loss_val = ((lse - picked) * valid).sum() / count
    out = Tensor(np.asarray(loss_val, dtype=xv.dtype))

    if tape is not None:
        e = np.exp(xv - m[:, None])
        soft = e / e.sum(axis=1, keepdims=True)

        def backward(g):
            gs = soft.copy()
            onehot_pick = np.take_along_axis(gs, safe_labels[:, None], axis=1)
            np.put_along_axis(gs, safe_labels[:, None], onehot_pick - 1.0, axis=1)
            gs *= valid[:, None]
            gs *= float(g) / count
            return [(scores, gs)]

        tape.record(out, backward)
    return out


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)
    if tape is not None:
        def backward(g):
            return [(a, g), (b, g)]

        tape.record(out, backward)
    return out


def scale(x: Tensor, k: float, tape: Tape | None = None) -> Tensor:
    out = Tensor(x.data * k)
    if tape is not None:
        def backward(g):
            return [(x, g * k)]

        tape.record(out, backward)
    return out


def tsum(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))
    if tape is not None:
        def backward(g):
            return [(x, np.full_like(x.data, float(g)))]

        tape.record(out, backward)
    return out


def concat_channels(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ValueError(f"concat_channels misaligned: {a.data.shape} vs {b.data.shape}")
    ca = a.data.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    if tape is not None:
        def backward(g):
            return [(a, g[:, :ca]), (b, g[:, ca:])]

        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# backward pass and parameter update


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate grad buffers of all leaves reachable from ``loss``.

    Gradients for intermediates live only inside this pass; leaf grads
    accumulate additively across repeated calls.
    """
    if not tape.records:
        raise RuntimeError("backward on an empty tape")
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    produced = {id(r.out) for r in tape.records}
    pending: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data)]}
    for rec in reversed(tape.records):
        entry = pending.pop(id(rec.out), None)
        if entry is None:
            continue  # branch not reaching the loss
        for t, g in rec.backward(entry[1]):
            slot = pending.get(id(t))
            if slot is None:
                pending[id(t)] = [t, np.array(g, copy=True)]
            else:
                slot[1] += g
    for t, g in pending.values():
        if id(t) not in produced:
            t.ensure_grad()
            t.grad += g


def sgd_step(params, lr: float) -> None:
    """p <- p - lr * grad for every non-frozen parameter, then zero its grad."""
    for p in params:
        if p.frozen:
            continue
        if p.grad is None:
            raise RuntimeError("sgd_step: trainable parameter has no gradient")
        p.data -= lr * p.grad
        p.grad[...] = 0


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(fn, x: Tensor, eps: float = 1e-5, sample: int | None = None,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn(t, tape)`` must return a scalar Tensor and be pure in ``t``. With
    ``sample`` set, only that many randomly chosen coordinates are probed.
    Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    tape = Tape()
    x.grad = None
    loss = fn(x, tape)
    backward(loss, tape)
    analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    n_coords = flat.size
    if sample is not None and sample < n_coords:
        rng = np.random.default_rng(seed)
        coords = rng.choice(n_coords, size=sample, replace=False)
    else:
        coords = np.arange(n_coords)

    worst = 0.0
    a_flat = analytic.reshape(-1)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(fn(x, None).data)
        flat[i] = orig - eps
        f_minus = float(fn(x, None).data)
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(a_flat[i] - numeric) / denom)
    return worst
