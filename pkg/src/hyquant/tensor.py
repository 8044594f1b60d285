"""Dense float32 tensors plus the reverse-mode tape behind calibration gradients.

Everything downstream (graph execution, calibration passes) is built from the
ops in this module, so every op carries its own backward rule. Tensors are
immutable by convention: ops allocate fresh arrays and never write into their
inputs. A tape is single-owner (one forward/backward pair per tape); tensors
themselves are safe to share across threads.
"""

from __future__ import annotations

import math
import struct
from typing import Callable, Iterable

import numpy as np
from scipy.special import erf as _erf

_F32 = np.float32
_INV_SQRT2 = np.float32(1.0 / math.sqrt(2.0))
_INV_SQRT2PI = np.float32(1.0 / math.sqrt(2.0 * math.pi))

BLOB_MAGIC = b"HQT1"


class TensorError(ValueError):
    """Bad tensor construction or use."""


class ShapeMismatchError(TensorError):
    """Operands with incompatible shapes; the message carries both shapes."""


class EmptyTapeError(TensorError):
    """backward() called on a tape with no recorded nodes."""


class Tensor:
    """Row-major float32 array, optionally attached to a tape node.

    Construction from external data validates finiteness (NaN/Inf rejected);
    internal op results use the trusted `_wrap` path.
    """

    __slots__ = ("data", "node")

    def __init__(self, data, node: int | None = None):
        arr = np.array(data, dtype=_F32, order="C")
        if not np.all(np.isfinite(arr)):
            raise TensorError("tensor rejects non-finite values (NaN/Inf)")
        self.data = arr
        self.node = node

    @classmethod
    def _wrap(cls, arr: np.ndarray, node: int | None = None) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.node = node
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"


class TapeNode:
    """One recorded op: kind tag, parent node ids, output shape, backward rule."""

    __slots__ = ("op", "parents", "shape", "backward_fn")

    def __init__(self, op: str, parents: tuple[int, ...], shape: tuple[int, ...],
                 backward_fn: Callable[[np.ndarray], list[tuple[int, np.ndarray]]]):
        self.op = op
        self.parents = parents
        self.shape = shape
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of one forward pass.

    `watch` marks nodes whose gradients must be retained by `backward`;
    gradients at unwatched nodes are freed as the reverse sweep passes them.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.watched: set[int] = set()

    def record(self, op: str, parents: tuple[int, ...], shape: tuple[int, ...],
               backward_fn) -> int:
        self.nodes.append(TapeNode(op, parents, tuple(shape), backward_fn))
        return len(self.nodes) - 1

    def leaf(self, t: Tensor) -> Tensor:
        nid = self.record("leaf", (), t.data.shape, lambda g: [])
        return Tensor._wrap(t.data, nid)

    def watch(self, node_id: int) -> None:
        if not (0 <= node_id < len(self.nodes)):
            raise TensorError(f"cannot watch unknown node {node_id}")
        self.watched.add(node_id)


def backward(loss_grad: Tensor, tape: Tape,
             wrt: Iterable[int] | None = None) -> dict[int, Tensor]:
    """Reverse sweep; returns gradients for watched (or `wrt`) nodes.

    Watched nodes never reached by the sweep get zero gradients of their
    recorded shape.
    """
    if tape is None or not tape.nodes:
        raise EmptyTapeError("backward() on an empty tape")
    targets = set(tape.watched if wrt is None else wrt)
    last = len(tape.nodes) - 1
    if tuple(loss_grad.shape) != tape.nodes[last].shape:
        raise ShapeMismatchError(
            f"loss gradient shape {tuple(loss_grad.shape)} does not match "
            f"final output shape {tape.nodes[last].shape}")
    grads: dict[int, np.ndarray] = {last: loss_grad.data.astype(_F32, copy=False)}
    for nid in range(last, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        for pid, pg in tape.nodes[nid].backward_fn(g):
            pg = np.asarray(pg, dtype=_F32)
            if pg.shape != tape.nodes[pid].shape:
                raise ShapeMismatchError(
                    f"gradient shape {pg.shape} does not match node {pid} "
                    f"output shape {tape.nodes[pid].shape}")
            acc = grads.get(pid)
            grads[pid] = pg if acc is None else acc + pg
        if nid not in targets:
            del grads[nid]
    out: dict[int, Tensor] = {}
    for nid in targets:
        arr = grads.get(nid)
        if arr is None:
            arr = np.zeros(tape.nodes[nid].shape, dtype=_F32)
        out[nid] = Tensor._wrap(np.ascontiguousarray(arr, dtype=_F32))
    return out


# ---------------------------------------------------------------------------
# op plumbing


def _record(tape: Tape | None, op: str, out: np.ndarray,
            pairs: list[tuple[Tensor, Callable[[np.ndarray], np.ndarray]]]) -> Tensor:
    """Wrap an op result; records a node when any input is traced."""
    live = [(t.node, fn) for t, fn in pairs if t.node is not None]
    if tape is None or not live:
        return Tensor._wrap(out)

    def backward_fn(g: np.ndarray) -> list[tuple[int, np.ndarray]]:
        return [(nid, fn(g)) for nid, fn in live]

    nid = tape.record(op, tuple(n for n, _ in live), out.shape, backward_fn)
    return Tensor._wrap(out, nid)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeMismatchError(f"add {a.shape} + {b.shape}: {e}") from e
    return _record(tape, "add", out, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ])


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeMismatchError(f"mul {a.shape} * {b.shape}: {e}") from e
    ad, bd = a.data, b.data
    return _record(tape, "mul", out, [
        (a, lambda g: _unbroadcast(g * bd, ad.shape)),
        (b, lambda g: _unbroadcast(g * ad, bd.shape)),
    ])


def scale(t: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    c32 = _F32(c)
    return _record(tape, "scale", t.data * c32, [(t, lambda g: g * c32)])


def matmul(a: Tensor, b: Tensor, tape: Tape | None = None,
           transpose_b: bool = False) -> Tensor:
    """Matrix product, batched over leading axes; optional transpose of b's
    trailing two axes. Registers a tape node when recording."""
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2:
        raise ShapeMismatchError(f"matmul needs rank>=2 operands, got {a.shape} x {b.shape}")
    Bm = np.swapaxes(B, -1, -2) if transpose_b else B
    if A.shape[-1] != Bm.shape[-2]:
        raise ShapeMismatchError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
            f"{' (transposed)' if transpose_b else ''}")
    out = np.matmul(A, Bm)

    def grad_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(Bm, -1, -2)), A.shape)

    def grad_b(g):
        dBm = _unbroadcast(np.matmul(np.swapaxes(A, -1, -2), g), Bm.shape)
        return np.swapaxes(dBm, -1, -2) if transpose_b else dBm

    return _record(tape, "matmul", out, [(a, grad_a), (b, grad_b)])


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1,
           padding=0, groups: int = 1, tape: Tape | None = None) -> Tensor:
    """2-D cross-correlation over NCHW input with OIHW kernels.

    groups == C with O == C gives a depthwise convolution.
    """
    xa, wa = x.data, w.data
    if xa.ndim != 4 or wa.ndim != 4:
        raise ShapeMismatchError(f"conv2d expects 4-D input/kernel, got {x.shape} / {w.shape}")
    N, C, H, W = xa.shape
    O, Cg, kh, kw = wa.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if groups < 1 or C % groups != 0 or O % groups != 0:
        raise ShapeMismatchError(
            f"conv2d groups={groups} must divide channels C={C} and filters O={O}")
    if Cg != C // groups:
        raise ShapeMismatchError(
            f"conv2d kernel expects {Cg} input channels per group, input has {C // groups}")
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeMismatchError(
            f"conv2d output dims must be positive, got {Ho}x{Wo} from input {x.shape}")

    xp = np.pad(xa, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xa
    cols = np.empty((N, C, kh, kw, Ho, Wo), dtype=_F32)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw]
    colsg = cols.reshape(N, groups, Cg * kh * kw, Ho * Wo)
    wg = wa.reshape(groups, O // groups, Cg * kh * kw)
    out = np.matmul(wg[None], colsg).reshape(N, O, Ho, Wo)
    if bias is not None:
        if bias.data.shape != (O,):
            raise ShapeMismatchError(f"conv2d bias shape {bias.shape} != ({O},)")
        out = out + bias.data.reshape(1, O, 1, 1)

    def grad_x(g):
        gg = g.reshape(N, groups, O // groups, Ho * Wo)
        dcols = np.matmul(np.swapaxes(wg[None], -1, -2), gg)
        dcols = dcols.reshape(N, C, kh, kw, Ho, Wo)
        dxp = np.zeros((N, C, H + 2 * ph, W + 2 * pw), dtype=_F32)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += dcols[:, :, i, j]
        if ph or pw:
            return dxp[:, :, ph:ph + H, pw:pw + W]
        return dxp

    def grad_w(g):
        gg = g.reshape(N, groups, O // groups, Ho * Wo)
        dwg = np.matmul(gg, np.swapaxes(colsg, -1, -2)).sum(axis=0)
        return dwg.reshape(O, Cg, kh, kw)

    pairs = [(x, grad_x), (w, grad_w)]
    if bias is not None:
        pairs.append((bias, lambda g: g.sum(axis=(0, 2, 3))))
    return _record(tape, "conv2d", out, pairs)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax(t: Tensor, axis: int = -1, tape: Tape | None = None) -> Tensor:
    xa = t.data
    if not -xa.ndim <= axis < xa.ndim:
        raise ShapeMismatchError(f"softmax axis {axis} invalid for shape {t.shape}")
    m = xa.max(axis=axis, keepdims=True)
    e = np.exp(xa - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True))

    return _record(tape, "softmax", y, [(t, grad)])


def _norm_core(x: Tensor, gamma: Tensor, beta: Tensor, groups: int,
               channel_axis: int, eps: float, tape: Tape | None, op: str) -> Tensor:
    xa = x.data
    ca = channel_axis % xa.ndim
    C = xa.shape[ca]
    if groups < 1 or C % groups != 0:
        raise ShapeMismatchError(f"{op}: groups={groups} must divide channels {C}")
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ShapeMismatchError(
            f"{op}: affine params must have shape ({C},), got {gamma.shape}/{beta.shape}")
    lead = int(np.prod(xa.shape[:ca])) if ca else 1
    tail = int(np.prod(xa.shape[ca + 1:])) if ca + 1 < xa.ndim else 1
    m = (C // groups) * tail

    xv = xa.reshape(lead, groups, m)
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _F32(eps))
    xhat = (xv - mu) * inv
    bshape = [1] * xa.ndim
    bshape[ca] = C
    ga = gamma.data.reshape(bshape)
    be = beta.data.reshape(bshape)
    xhat_full = xhat.reshape(xa.shape)
    out = (xhat_full * ga + be).astype(_F32, copy=False)
    reduce_axes = tuple(i for i in range(xa.ndim) if i != ca)

    def grad_x(g):
        dxhat = (g * ga).reshape(lead, groups, m)
        t1 = dxhat.mean(axis=-1, keepdims=True)
        t2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return (inv * (dxhat - t1 - xhat * t2)).reshape(xa.shape)

    def grad_gamma(g):
        return (g * xhat_full).sum(axis=reduce_axes)

    def grad_beta(g):
        return g.sum(axis=reduce_axes)

    return _record(tape, op, out,
                   [(x, grad_x), (gamma, grad_gamma), (beta, grad_beta)])


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
               tape: Tape | None = None) -> Tensor:
    """Normalize over the last axis: zero mean, unit variance, then affine."""
    return _norm_core(x, gamma, beta, 1, x.ndim - 1, eps, tape, "layer_norm")


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int,
               eps: float = 1e-5, channel_axis: int = 1,
               tape: Tape | None = None) -> Tensor:
    """Normalize within each channel group together with all trailing axes.

    groups=1 with channel_axis on the channel dim reduces to a layer norm over
    channel+trailing dims.
    """
    return _norm_core(x, gamma, beta, groups, channel_axis, eps, tape, "group_norm")


def batch_norm_folded(x: Tensor, scale_w: Tensor, shift: Tensor,
                      channel_axis: int = 1, tape: Tape | None = None) -> Tensor:
    """Inference-mode batch norm: per-channel affine with folded statistics."""
    xa = x.data
    ca = channel_axis % xa.ndim
    C = xa.shape[ca]
    if scale_w.data.shape != (C,) or shift.data.shape != (C,):
        raise ShapeMismatchError(
            f"batch_norm_folded params must have shape ({C},), "
            f"got {scale_w.shape}/{shift.shape}")
    bshape = [1] * xa.ndim
    bshape[ca] = C
    sa = scale_w.data.reshape(bshape)
    ta = shift.data.reshape(bshape)
    out = xa * sa + ta
    reduce_axes = tuple(i for i in range(xa.ndim) if i != ca)
    return _record(tape, "batch_norm_folded", out, [
        (x, lambda g: g * sa),
        (scale_w, lambda g: (g * xa).sum(axis=reduce_axes)),
        (shift, lambda g: g.sum(axis=reduce_axes)),
    ])


def gelu(t: Tensor, tape: Tape | None = None) -> Tensor:
    """Exact (erf-based) GELU."""
    xa = t.data
    phi = _F32(0.5) * (1.0 + _erf(xa * _INV_SQRT2))
    out = xa * phi

    def grad(g):
        pdf = np.exp(_F32(-0.5) * xa * xa) * _INV_SQRT2PI
        return g * (phi + xa * pdf)

    return _record(tape, "gelu", out.astype(_F32, copy=False), [(t, grad)])


def silu(t: Tensor, tape: Tape | None = None) -> Tensor:
    xa = t.data
    sig = 1.0 / (1.0 + np.exp(-xa))
    out = xa * sig

    def grad(g):
        return g * (sig * (1.0 + xa * (1.0 - sig)))

    return _record(tape, "silu", out.astype(_F32, copy=False), [(t, grad)])


def relu(t: Tensor, tape: Tape | None = None) -> Tensor:
    xa = t.data
    out = np.maximum(xa, _F32(0))
    return _record(tape, "relu", out, [(t, lambda g: g * (xa > 0))])


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def reshape(t: Tensor, shape: tuple[int, ...], tape: Tape | None = None) -> Tensor:
    src = t.data.shape
    try:
        out = t.data.reshape(shape)
    except ValueError as e:
        raise ShapeMismatchError(f"reshape {src} -> {shape}: {e}") from e
    return _record(tape, "reshape", out, [(t, lambda g: g.reshape(src))])


def transpose(t: Tensor, axes: tuple[int, ...], tape: Tape | None = None) -> Tensor:
    inv = tuple(int(i) for i in np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(t.data, axes))
    return _record(tape, "transpose", out,
                   [(t, lambda g: np.ascontiguousarray(np.transpose(g, inv)))])


def mean(t: Tensor, axes: tuple[int, ...], tape: Tape | None = None) -> Tensor:
    axes = tuple(a % t.ndim for a in axes)
    out = t.data.mean(axis=axes)
    count = 1
    for a in axes:
        count *= t.shape[a]
    inv_count = _F32(1.0 / count)
    src = t.data.shape

    def grad(g):
        ge = np.expand_dims(g, axes)
        return np.broadcast_to(ge * inv_count, src).astype(_F32, copy=False)

    return _record(tape, "mean", out, [(t, grad)])


def sum_all(t: Tensor, tape: Tape | None = None) -> Tensor:
    """Scalar sum; accumulates in float64 to keep test oracles quiet."""
    out = np.asarray(np.sum(t.data, dtype=np.float64), dtype=_F32)
    src = t.data.shape
    return _record(tape, "sum_all", out,
                   [(t, lambda g: np.broadcast_to(g, src).astype(_F32, copy=False))])


def cross_entropy(logits: Tensor, labels: np.ndarray, reduction: str = "sum",
                  tape: Tape | None = None) -> Tensor:
    """Cross-entropy of logits (N, C) against integer labels.

    With reduction="sum" the logit gradient is exactly softmax - onehot.
    """
    la = logits.data
    if la.ndim != 2:
        raise ShapeMismatchError(f"cross_entropy expects (N, C) logits, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (la.shape[0],):
        raise ShapeMismatchError(
            f"labels shape {labels.shape} does not match batch {la.shape[0]}")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction '{reduction}'")
    n = la.shape[0]
    idx = np.arange(n)
    m = la.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(la - m).sum(axis=1, keepdims=True))
    nll = lse[:, 0] - la[idx, labels]
    total = np.sum(nll, dtype=np.float64)
    if reduction == "mean":
        total /= n
    out = np.asarray(total, dtype=_F32)
    probs = np.exp(la - lse)

    def grad(g):
        d = probs.copy()
        d[idx, labels] -= 1.0
        if reduction == "mean":
            d /= n
        return d * g

    return _record(tape, "cross_entropy", out, [(logits, grad)])


# ---------------------------------------------------------------------------
# blob format: "HQT1", u32 rank, u32 dims..., little-endian f32 payload


def save_tensor(path, t: Tensor) -> None:
    arr = np.ascontiguousarray(t.data, dtype="<f4")
    with open(path, "wb") as f:
        f.write(BLOB_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes(order="C"))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != BLOB_MAGIC:
        raise TensorError(f"{path}: bad magic {raw[:4]!r}, expected {BLOB_MAGIC!r}")
    if len(raw) < 8:
        raise TensorError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if rank > 32:
        raise TensorError(f"{path}: implausible rank {rank}")
    head = 8 + 4 * rank
    if len(raw) < head:
        raise TensorError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    count = 1
    for d in dims:
        if d <= 0:
            raise TensorError(f"{path}: non-positive dimension {d}")
        count *= d
    if len(raw) != head + 4 * count:
        raise TensorError(
            f"{path}: payload size {len(raw) - head} != {4 * count} for dims {dims}")
    arr = np.frombuffer(raw, dtype="<f4", offset=head).reshape(dims)
    return Tensor(arr)
