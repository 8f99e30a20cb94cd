"""Dense-tensor numeric core: forward ops, tape-based backprop, gradient checker.

Every operation is a pure function of its inputs plus an optional append to a
Tape. Passing ``tape=None`` runs forward-only (used for inference and for the
finite-difference evaluations, which need no recording). All math is plain
numpy with fixed loop/reduction order, so identical inputs give bit-identical
outputs within one platform and build.

Single precision (float32) is the default for training and inference; the
same code paths run in float64 for the gradient-check tests, where the tight
finite-difference tolerances live.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, ConfigurationError, LabelError, NumericError, UsageError

DEFAULT_DTYPE = np.float32


class Tensor:
    """N-dimensional real array (row-major) with an optional gradient slot.

    ``data`` always has a non-empty shape with every dimension >= 1; ``grad``
    is either None or an array of the same shape.
    """

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            raise DimensionError("tensor shape must be non-empty (got a 0-d value)")
        if any(d < 1 for d in arr.shape):
            raise DimensionError(f"every dimension must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), dtype=dtype)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


class TapeOp:
    """One recorded layer-level operation.

    ``backward`` maps the upstream gradient of ``output`` to one gradient
    array per input (None where an input needs no gradient). The forward
    context each op needs (pool argmax, relu mask, im2col buffer, ...) lives
    in the closure.
    """

    __slots__ = ("kind", "inputs", "output", "backward")

    def __init__(self, kind: str, inputs: Sequence[Tensor], output: Tensor,
                 backward: Callable[[np.ndarray], tuple]):
        self.kind = kind
        self.inputs = tuple(inputs)
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of operations; replayed in reverse by backward()."""

    __slots__ = ("ops",)

    def __init__(self):
        self.ops: list[TapeOp] = []

    def record(self, kind, inputs, output, backward_fn):
        self.ops.append(TapeOp(kind, inputs, output, backward_fn))

    def __len__(self):
        return len(self.ops)


def _window_view(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Read-only (N,C,OH,OW,K,K) sliding-window view of an NCHW array."""
    n, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    sn, sc, sh, sw = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (n, c, oh, ow, k, k), (sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0, tape: Optional[Tape] = None) -> Tensor:
    """2-D cross-correlation over an NCHW batch with zero padding.

    out[n,o,y,x] = bias[o] + sum_{c,i,j} in[n,c, y*stride+i-pad, x*stride+j-pad]
                                         * weight[o,c,i,j]
    """
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d input must be N,C,H,W, got shape {x.shape}")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv2d weight must be O,C,K,K, got shape {weight.shape}")
    n, c, h, w = x.shape
    o, wc, k, _ = weight.shape
    if wc != c:
        raise DimensionError(
            f"channel mismatch: input axis 1 has {c} channels, weight axis 1 has {wc}")
    if bias.shape != (o,):
        raise DimensionError(f"bias must have shape ({o},), got {bias.shape}")
    if stride < 1:
        raise ConfigurationError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ConfigurationError(f"padding must be non-negative, got {padding}")
    if (h + 2 * padding - k) % stride != 0 or (w + 2 * padding - k) % stride != 0 \
            or h + 2 * padding < k or w + 2 * padding < k:
        raise ConfigurationError(
            f"output size not a positive integer for H,W={h},{w} k={k} "
            f"stride={stride} padding={padding}")

    if padding > 0:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1

    win = _window_view(xp, k, stride)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * k * k)
    wmat = weight.data.reshape(o, c * k * k).T
    flat = cols @ wmat + bias.data
    out = Tensor(np.ascontiguousarray(flat.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)),
                 dtype=x.dtype)

    if tape is not None:
        def bwd(g: np.ndarray):
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, o)
            dw = (g2.T @ cols).reshape(o, c, k, k)
            db = g2.sum(axis=0)
            dcols = g2 @ wmat.T
            d6 = dcols.reshape(n, oh, ow, c, k, k).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += \
                        d6[:, :, :, :, i, j]
            if padding > 0:
                dx = dxp[:, :, padding:padding + h, padding:padding + w]
            else:
                dx = dxp
            return dx, dw, db

        tape.record("conv2d", (x, weight, bias), out, bwd)
    return out


def relu(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Elementwise max(0, x)."""
    out = Tensor(np.maximum(x.data, 0), dtype=x.dtype)
    if tape is not None:
        mask = x.data > 0

        def bwd(g: np.ndarray):
            return (g * mask,)

        tape.record("relu", (x,), out, bwd)
    return out


def maxpool2(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """2x2 non-overlapping max pooling over NCHW; H and W must be even.

    Ties within a window route the full gradient to the first maximum in
    row-major window order.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2 input must be N,C,H,W, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 != 0 or w % 2 != 0:
        raise DimensionError(f"maxpool2 needs even H and W, got H={h}, W={w}")
    oh, ow = h // 2, w // 2
    # windows flattened in row-major order: (0,0),(0,1),(1,0),(1,1)
    v = np.ascontiguousarray(
        x.data.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(n, c, oh, ow, 4)
    idx = v.argmax(axis=-1)
    out = Tensor(np.take_along_axis(v, idx[..., None], axis=-1)[..., 0], dtype=x.dtype)

    if tape is not None:
        def bwd(g: np.ndarray):
            dv = np.zeros((n, c, oh, ow, 4), dtype=g.dtype)
            np.put_along_axis(dv, idx[..., None], g[..., None], axis=-1)
            dx = dv.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            return (np.ascontiguousarray(dx),)

        tape.record("maxpool2", (x,), out, bwd)
    return out


def dense(x: Tensor, weight: Tensor, bias: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Affine map out = x @ weight + bias with bias broadcast over rows."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(
            f"dense needs 2-d input and weight, got {x.shape} and {weight.shape}")
    nrows, f = x.shape
    fw, u = weight.shape
    if f != fw:
        raise DimensionError(
            f"inner dimensions disagree: input axis 1 is {f}, weight axis 0 is {fw}")
    if bias.shape != (u,):
        raise DimensionError(f"bias must have shape ({u},), got {bias.shape}")
    out = Tensor(x.data @ weight.data + bias.data, dtype=x.dtype)

    if tape is not None:
        xd, wd = x.data, weight.data

        def bwd(g: np.ndarray):
            return g @ wd.T, xd.T @ g, g.sum(axis=0)

        tape.record("dense", (x, weight, bias), out, bwd)
    return out


def flatten(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Row-major reshape to (N, -1); first axis preserved."""
    n = x.shape[0]
    out = Tensor(x.data.reshape(n, -1), dtype=x.dtype)
    if tape is not None:
        shape = x.shape

        def bwd(g: np.ndarray):
            return (g.reshape(shape),)

        tape.record("flatten", (x,), out, bwd)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction for stability."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: Tensor, labels: Sequence[int],
                 tape: Optional[Tape] = None) -> tuple[Tensor, Tensor]:
    """Softmax cross-entropy over rows of logits.

    Returns (loss, probs) where loss is a single-element tensor holding
    -(1/N) * sum_n ln(probs[n, labels[n]]) and probs are the stable row
    softmaxes. The backward gradient on logits is (probs - onehot) / N.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_xent needs N,K logits, got shape {logits.shape}")
    n, k = logits.shape
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (n,):
        raise DimensionError(f"need {n} labels for {n} logit rows, got {lab.shape}")
    for row in range(n):
        if not 0 <= lab[row] < k:
            raise LabelError(
                f"label {lab[row]} out of range [0, {k}) at row {row}", row=row)

    p = softmax(logits.data)
    nll = -np.log(p[np.arange(n), lab])
    loss = Tensor(np.asarray(nll.mean(dtype=logits.data.dtype)).reshape(1), dtype=logits.dtype)
    probs = Tensor(p, dtype=logits.dtype)

    if tape is not None:
        def bwd(g: np.ndarray):
            dlogits = p.copy()
            dlogits[np.arange(n), lab] -= 1
            dlogits *= g.reshape(-1)[0] / n
            return (dlogits,)

        tape.record("softmax_xent", (logits,), loss, bwd)
    return loss, probs


def backward(tape: Tape, node: Tensor, seed: float = 1.0) -> None:
    """Reverse sweep over the tape, populating .grad on every input tensor.

    ``node`` must be a single-element tensor produced by the tape; its
    upstream gradient is seeded with ``seed``. Gradients accumulate
    additively when a tensor feeds several operations; accumulation order
    is the fixed reverse tape order.
    """
    if not tape.ops:
        raise UsageError("backward on an empty tape")
    if node.data.size != 1:
        raise UsageError(f"backward needs a scalar node, got shape {node.shape}")
    produced = any(op.output is node for op in tape.ops)
    if not produced:
        raise UsageError("backward node was not produced by this tape")

    for op in tape.ops:
        op.output.grad = None
        for t in op.inputs:
            t.grad = None
    node.grad = np.full_like(node.data, seed)

    for op in reversed(tape.ops):
        g = op.output.grad
        if g is None:
            continue
        grads = op.backward(g)
        for t, gt in zip(op.inputs, grads):
            if gt is None:
                continue
            if t.grad is None:
                t.grad = gt
            else:
                t.grad = t.grad + gt


def finite_diff_check(f: Callable[[Tensor, Optional[Tape]], Tensor],
                      x: Tensor, eps: float) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(x, tape)`` must return a single-element loss tensor, recording onto
    ``tape`` when one is given, and must not keep state between calls. The
    analytic gradient comes from one taped run; the numeric gradient
    perturbs every element of x by +/- eps with forward-only evaluations.
    Relative error per element is |a - n| / max(1e-8, |a| + |n|).
    """
    if eps <= 0:
        raise UsageError(f"eps must be positive, got {eps}")
    tape = Tape()
    loss = f(x, tape)
    if loss.data.size != 1:
        raise UsageError("finite_diff_check needs a scalar-valued function")
    if not np.isfinite(loss.data[0]):
        raise NumericError("function value is not finite at x")
    backward(tape, loss)
    if x.grad is None:
        raise UsageError("function output does not depend on x (no gradient)")
    analytic = x.grad.copy().reshape(-1)

    flat = x.data.reshape(-1)
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x, None).data[0])
        flat[i] = orig - eps
        fm = float(f(x, None).data[0])
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value while perturbing element {i}")
        numeric[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
