"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. Outside a tape nothing is recorded,
which is how inference runs.

    with Tape() as tape:
        loss = softmax_cross_entropy(model(x), y)
    tape.backward(loss)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided


class Tensor:
    """An n-dimensional array with an optional gradient slot."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class TapeError(RuntimeError):
    pass


@dataclass
class _Record:
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered log of executed operations.

    Records are appended in execution order, so reversing the list is a valid
    reverse-topological order. A tape can be traversed once; :meth:`reset`
    clears it for reuse.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        self.records.clear()
        self.consumed = False

    def record(self, inputs, output: Tensor, backward) -> None:
        if self.consumed:
            raise TapeError("tape already traversed; call reset() before recording")
        self.records.append(_Record(tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every requires-grad tensor seen by this tape.

        Gradients overwrite any previous ``.grad``. Tensors that the loss does
        not depend on receive zeros.
        """
        if self.consumed:
            raise TapeError("backward called twice on the same tape without reset()")
        if loss.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        if not any(r.output is loss for r in self.records):
            raise TapeError("loss was not produced on this tape")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        seen: dict[int, Tensor] = {}
        for rec in self.records:
            for t in rec.inputs:
                if t.requires_grad:
                    seen[id(t)] = t
            seen[id(rec.output)] = rec.output
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            rec.output.grad = g if g is not None else np.zeros_like(rec.output.data)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                k = id(t)
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
        produced = {id(r.output) for r in self.records}
        for k, t in seen.items():
            if k not in produced:
                g = grads.get(k)
                t.grad = np.ascontiguousarray(g) if g is not None else np.zeros_like(t.data)


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _finish(name: str, out: np.ndarray, inputs, backward_fn) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{name}: non-finite values in output")
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs and _ACTIVE:
        _ACTIVE[-1].record(inputs, result, backward_fn)
    return result


# ---------------------------------------------------------------------------
# elementwise and reshaping


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _finish("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    x, y = a.data, b.data
    return _finish("mul", x * y, (a, b), lambda g: (g * y, g * x))


def scale(a: Tensor, c: float) -> Tensor:
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _finish(
        "sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),)
    )


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _finish("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _finish("relu", a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# dense and convolutional layers


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in_features, out_features)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"linear: expected 2-d input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(
            f"linear: input has {x.shape[1]} features but weight expects {weight.shape[0]}"
        )
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gb = g.sum(axis=0) if bias is not None else None
        return (g @ wd.T, xd.T @ g, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _finish("linear", out, inputs, bw)


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _pad_hw(a: np.ndarray, p: int) -> np.ndarray:
    """Zero-pad the two spatial axes of an NHWC array."""
    if p == 0:
        return a
    return np.pad(a, ((0, 0), (p, p), (p, p), (0, 0)))


def _im2col(a: np.ndarray, K: int, stride: int, dilation: int, Ho: int, Wo: int) -> np.ndarray:
    """(N*Ho*Wo, K*K*C) patch matrix from an NHWC array."""
    N, _, _, C = a.shape
    sN, sH, sW, sC = a.strides
    win = as_strided(
        a,
        (N, Ho, Wo, K, K, C),
        (sN, sH * stride, sW * stride, sH * dilation, sW * dilation, sC),
        writeable=False,
    )
    return win.reshape(N * Ho * Wo, K * K * C)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-d cross-correlation, NCHW input, OIKK weight."""
    if stride < 1 or dilation < 1:
        raise ValueError(f"conv2d: stride and dilation must be positive (got {stride}, {dilation})")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be nonnegative (got {padding})")
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d: expected NCHW input and OIKK weight, got {x.shape}, {weight.shape}")
    N, C, H, W = x.shape
    O, I, KH, KW = weight.shape
    if C != I:
        raise ValueError(f"conv2d: input has {C} channels but weight expects {I}")
    if KH != KW:
        raise ValueError(f"conv2d: square kernels only, got {KH}x{KW}")
    if bias is not None and bias.shape != (O,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({O},)")
    K = KH
    Ho = conv_output_size(H, K, stride, padding, dilation)
    Wo = conv_output_size(W, K, stride, padding, dilation)
    if Ho < 1 or Wo < 1:
        raise ValueError(
            f"conv2d: input {H}x{W} with padding {padding} too small for kernel {K} at dilation {dilation}"
        )

    # Arrays are NCHW logically but the work happens in NHWC memory order: one
    # large GEMM per call, and outputs are NCHW views of NHWC buffers so the
    # next convolution reads them without a copy.
    xn = x.data.transpose(0, 2, 3, 1)
    cols = _im2col(_pad_hw(xn, padding), K, stride, dilation, Ho, Wo)
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(K * K * C, O)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)

    def bw(g):
        gn = g.transpose(0, 2, 3, 1)
        g2 = gn.reshape(N * Ho * Wo, O)
        gw = (cols.T @ g2).reshape(K, K, C, O).transpose(3, 2, 0, 1)
        gb = g2.sum(axis=0) if bias is not None else None
        gx = None
        if x.requires_grad:
            back_pad = dilation * (K - 1) - padding
            if stride == 1 and back_pad >= 0:
                # input gradient is a correlation of the output gradient with
                # the spatially flipped, channel-transposed kernel
                gcols = _im2col(_pad_hw(gn, back_pad), K, 1, dilation, H, W)
                wflip = weight.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(K * K * O, C)
                gx = (gcols @ wflip).reshape(N, H, W, C).transpose(0, 3, 1, 2)
            else:
                dcols = (g2 @ wmat.T).reshape(N, Ho, Wo, K, K, C)
                gxp = np.zeros((N, H + 2 * padding, W + 2 * padding, C), dtype=g.dtype)
                for i in range(K):
                    for j in range(K):
                        r0, c0 = i * dilation, j * dilation
                        gxp[
                            :, r0 : r0 + stride * (Ho - 1) + 1 : stride, c0 : c0 + stride * (Wo - 1) + 1 : stride
                        ] += dcols[:, :, :, i, j]
                gxp = gxp[:, padding : padding + H, padding : padding + W]
                gx = gxp.transpose(0, 3, 1, 2)
        return (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _finish("conv2d", out, inputs, bw)


def pool2d(x: Tensor, kind: str = "max", window: int = 2, stride: Optional[int] = None) -> Tensor:
    """Max or average pooling without padding.

    Max-pool gradients go to the first maximum in row-major window order.
    """
    if kind not in ("max", "avg"):
        raise ValueError(f"pool2d: kind must be 'max' or 'avg', got {kind!r}")
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ValueError("pool2d: window and stride must be positive")
    if x.ndim != 4:
        raise ValueError(f"pool2d: expected NCHW input, got shape {x.shape}")
    N, C, H, W = x.shape
    if window > H or window > W:
        raise ValueError(f"pool2d: window {window} larger than input {H}x{W}")
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    xd = np.ascontiguousarray(x.data)
    sN, sC, sH, sW = xd.strides
    win = as_strided(
        xd, (N, C, Ho, Wo, window, window), (sN, sC, sH * stride, sW * stride, sH, sW), writeable=False
    )
    flat = win.reshape(N, C, Ho, Wo, window * window)
    if kind == "max":
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

        def bw(g):
            gx = np.zeros_like(xd)
            rows = np.arange(Ho)[:, None] * stride + idx // window
            cols = np.arange(Wo)[None, :] * stride + idx % window
            n = np.arange(N)[:, None, None, None]
            c = np.arange(C)[None, :, None, None]
            np.add.at(gx, (n, c, rows, cols), g)
            return (gx,)

    else:
        out = flat.mean(axis=-1)

        def bw(g):
            gx = np.zeros_like(xd)
            share = g / (window * window)
            for i in range(window):
                for j in range(window):
                    gx[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += share
            return (gx,)

    return _finish(f"pool2d[{kind}]", out, (x,), bw)


# ---------------------------------------------------------------------------
# normalization and loss


@dataclass
class NormStats:
    """Running per-channel moments for batch normalization."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    updates: int = 0

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {momentum}")
        if eps <= 0:
            raise ValueError(f"eps must be positive, got {eps}")
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype), momentum, eps)

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]


def batch_norm(
    x: Tensor, stats: NormStats, gamma: Tensor, beta: Tensor, mode: str = "train"
) -> Tensor:
    """Batch normalization over all axes except axis 1 (NCHW or NC input)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm: mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim not in (2, 4):
        raise ValueError(f"batch_norm: expected NC or NCHW input, got shape {x.shape}")
    C = x.shape[1]
    if stats.channels != C or gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(
            f"batch_norm: input has {C} channels; stats/gamma/beta have "
            f"{stats.channels}/{gamma.shape}/{beta.shape}"
        )
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, C) if x.ndim == 2 else (1, C, 1, 1)
    xd = x.data
    if mode == "train":
        m = xd.size // C
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        mom = stats.momentum
        stats.running_mean = ((1 - mom) * stats.running_mean + mom * mean).astype(stats.running_mean.dtype)
        stats.running_var = ((1 - mom) * stats.running_var + mom * unbiased).astype(stats.running_var.dtype)
        stats.updates += 1
    else:
        if stats.updates == 0:
            raise ValueError("batch_norm: eval mode on statistics that were never trained")
        mean = stats.running_mean.astype(xd.dtype)
        var = stats.running_var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + stats.eps)
    xhat = (xd - mean.reshape(bshape)) * inv.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)

    def bw(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gd
        if mode == "train":
            m = xd.size // C
            gx = (
                inv.reshape(bshape)
                / m
                * (
                    m * gxhat
                    - gxhat.sum(axis=axes).reshape(bshape)
                    - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
                )
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return (gx, ggamma, gbeta)

    return _finish("batch_norm", out, (x, gamma, beta), bw)


def log_softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    return np.exp(log_softmax(logits, axis))


def softmax_cross_entropy(logits: Tensor, targets, class_axis: int = 1) -> Tensor:
    """Mean negative log-likelihood over every classified position.

    ``targets`` holds integer class indices with the shape of ``logits``
    minus the class axis.
    """
    t = np.asarray(targets)
    ld = logits.data
    axis = class_axis % ld.ndim
    expected = ld.shape[:axis] + ld.shape[axis + 1 :]
    if t.shape != expected:
        raise ValueError(f"softmax_cross_entropy: targets shape {t.shape} != {expected}")
    n_cls = ld.shape[axis]
    if t.size and (t.min() < 0 or t.max() >= n_cls):
        raise ValueError(f"softmax_cross_entropy: target index out of range [0, {n_cls})")
    t = t.astype(np.intp)
    logp = log_softmax(ld, axis)
    picked = np.take_along_axis(logp, np.expand_dims(t, axis), axis=axis)
    count = t.size
    loss = np.asarray(-picked.sum() / count, dtype=ld.dtype)

    def bw(g):
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, np.expand_dims(t, axis), 1.0, axis=axis)
        return ((grad - onehot) * (g / count),)

    return _finish("softmax_cross_entropy", loss, (logits,), bw)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    step: Optional[float] = None,
) -> float:
    """Largest relative gap between tape gradients and central differences.

    Per parameter tensor the error is ``|a - n| / max(|a|, |n|, eps)`` with
    ``|.|`` the Euclidean norm over that tensor's elements; the maximum over
    parameters is returned.
    """
    for p in params:
        p.requires_grad = True
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = [np.array(p.grad, dtype=np.float64, order="C") for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        h = step if step is not None else (1e-5 if p.dtype == np.float64 else 1e-2)
        numeric = np.zeros_like(a)
        for idx in np.ndindex(p.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = float(fn().data)
            p.data[idx] = orig - h
            down = float(fn().data)
            p.data[idx] = orig
            numeric[idx] = (up - down) / (2 * h)
        num = np.linalg.norm(a - numeric)
        den = max(np.linalg.norm(a), np.linalg.norm(numeric), eps)
        worst = max(worst, num / den)
    return worst
