"""Tape-based reverse-mode automatic differentiation over dense float64 tensors.

Tensors have rank 1 to 3. The operation catalog is deliberately small: it is the
closure of what the transformer and the training objectives need. Shapes are
never broadcast, except that a scalar may multiply a tensor.

Usage::

    with Tape() as tape:
        y = apply("sum", [apply("matmul", [x, w])])
    grads = backward(y)
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "apply",
    "backward",
    "grad_check",
    "KINDS",
]

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_LN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's shape rule."""


class Tensor:
    """A dense float64 tensor, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not 1 <= arr.ndim <= 3:
            raise ShapeError(f"tensor rank must be 1..3, got shape {arr.shape}")
        if 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("kind", "inputs", "output", "attrs", "cache")

    def __init__(self, kind, inputs, output, attrs, cache):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.attrs = attrs
        self.cache = cache


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of operations; use as a context manager to activate."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def _register_leaf(self, t: Tensor) -> None:
        if t._tape is not self:
            t._tape = self
            t.node_id = -(len(self._leaves) + 1)
            self._leaves[t.node_id] = t

    def _record(self, kind, inputs, output, attrs, cache) -> None:
        for t in inputs:
            if t.requires_grad and t._tape is not self:
                self._register_leaf(t)
        output._tape = self
        output.node_id = len(self.nodes)
        self.nodes.append(_Node(kind, inputs, output, attrs, cache))


# --------------------------------------------------------------------------
# operation kernels: forward(arrays, attrs) -> (out, cache)
#                    backward(g, arrays, out, cache, attrs, need) -> grads
# --------------------------------------------------------------------------


def _check_rank(kind, arrays, ranks):
    for a, allowed in zip(arrays, ranks):
        if a.ndim not in allowed:
            shapes = " and ".join(str(x.shape) for x in arrays)
            raise ShapeError(f"{kind}: unsupported operand ranks for shapes {shapes}")


def _mismatch(kind, a, b):
    return ShapeError(f"{kind}: shape mismatch between {a.shape} and {b.shape}")


def _matmul_fwd(arrays, attrs):
    a, b = arrays
    tb = attrs.get("transpose_b", False)
    _check_rank("matmul", arrays, [(1, 2, 3), (2, 3)])
    if b.ndim == 3 and (a.ndim != 3 or a.shape[0] != b.shape[0]):
        raise _mismatch("matmul", a, b)
    bm = np.swapaxes(b, -1, -2) if tb else b
    if a.shape[-1] != bm.shape[-2]:
        raise _mismatch("matmul", a, b)
    return np.matmul(a, bm), None


def _matmul_bwd(g, arrays, out, cache, attrs, need):
    a, b = arrays
    tb = attrs.get("transpose_b", False)
    bm = np.swapaxes(b, -1, -2) if tb else b
    ga = gb = None
    if need[0]:
        ga = np.matmul(g, np.swapaxes(bm, -1, -2))
    if need[1]:
        if a.ndim == 1:
            gbm = np.outer(a, g)
        elif b.ndim == 3:
            gbm = np.matmul(np.swapaxes(a, -1, -2), g)
        else:
            a2 = a.reshape(-1, a.shape[-1])
            gbm = a2.T @ g.reshape(-1, g.shape[-1])
        gb = np.swapaxes(gbm, -1, -2) if tb else gbm
    return [ga, gb]


def _add_fwd(arrays, attrs):
    a, b = arrays
    if a.shape != b.shape:
        raise _mismatch("add", a, b)
    return a + b, None


def _add_bwd(g, arrays, out, cache, attrs, need):
    return [g, g]


def _scale_fwd(arrays, attrs):
    return arrays[0] * attrs["factor"], None


def _scale_bwd(g, arrays, out, cache, attrs, need):
    return [g * attrs["factor"]]


def _mul_scalar_fwd(arrays, attrs):
    x, s = arrays
    if s.shape != (1,):
        raise ShapeError(f"mul_scalar: second operand must have shape (1,), got {s.shape} with {x.shape}")
    return x * s[0], None


def _mul_scalar_bwd(g, arrays, out, cache, attrs, need):
    x, s = arrays
    return [g * s[0] if need[0] else None, np.array([np.sum(g * x)]) if need[1] else None]


def _seq_axis(a):
    return 0 if a.ndim == 1 else a.ndim - 2


def _concat_fwd(arrays, attrs):
    ref = arrays[0]
    ax = _seq_axis(ref)
    for a in arrays[1:]:
        if a.ndim != ref.ndim or a.shape[:ax] != ref.shape[:ax] or a.shape[ax + 1:] != ref.shape[ax + 1:]:
            raise _mismatch("concat", ref, a)
    return np.concatenate(arrays, axis=ax), [a.shape[ax] for a in arrays]


def _concat_bwd(g, arrays, out, sizes, attrs, need):
    ax = _seq_axis(arrays[0])
    splits = np.cumsum(sizes)[:-1]
    return np.split(g, splits, axis=ax)


def _slice_fwd(arrays, attrs):
    a = arrays[0]
    ax = _seq_axis(a)
    start, stop = attrs["start"], attrs["stop"]
    if not 0 <= start < stop <= a.shape[ax]:
        raise ShapeError(f"slice: range [{start}, {stop}) invalid for shape {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    return a[tuple(idx)], tuple(idx)


def _slice_bwd(g, arrays, out, idx, attrs, need):
    ga = np.zeros_like(arrays[0])
    ga[idx] = g
    return [ga]


def _softmax(x):
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _softmax_fwd(arrays, attrs):
    return _softmax(arrays[0]), None


def _softmax_bwd(g, arrays, out, cache, attrs, need):
    return [out * (g - np.sum(g * out, axis=-1, keepdims=True))]


def _log_softmax(x):
    z = x - np.max(x, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _log_softmax_fwd(arrays, attrs):
    return _log_softmax(arrays[0]), None


def _log_softmax_bwd(g, arrays, out, cache, attrs, need):
    return [g - np.exp(out) * np.sum(g, axis=-1, keepdims=True)]


def _layer_norm_fwd(arrays, attrs):
    x = arrays[0]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + _LN_EPS)
    xhat = xc * rstd
    return xhat, rstd


def _layer_norm_bwd(g, arrays, xhat, rstd, attrs, need):
    gm = g.mean(axis=-1, keepdims=True)
    gx = (g * xhat).mean(axis=-1, keepdims=True)
    return [rstd * (g - gm - xhat * gx)]


def _embedding_fwd(arrays, attrs):
    table = arrays[0]
    idx = attrs["indices"]
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be rank 2, got {table.shape}")
    if idx.ndim not in (1, 2):
        raise ShapeError(f"embedding: indices must be rank 1 or 2, got {idx.shape} with table {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table {table.shape}")
    return table[idx], None


def _embedding_bwd(g, arrays, out, cache, attrs, need):
    table = arrays[0]
    idx = attrs["indices"].reshape(-1)
    gt = np.zeros_like(table)
    np.add.at(gt, idx, g.reshape(-1, table.shape[1]))
    return [gt]


def _mean_pool_fwd(arrays, attrs):
    a = arrays[0]
    if a.ndim < 2:
        raise ShapeError(f"mean_pool: needs rank >= 2, got {a.shape}")
    return a.mean(axis=-2), a.shape[-2]


def _mean_pool_bwd(g, arrays, out, n, attrs, need):
    return [np.repeat(np.expand_dims(g / n, -2), n, axis=-2)]


def _dot_fwd(arrays, attrs):
    a, b = arrays
    if a.ndim != 1 or a.shape != b.shape:
        raise _mismatch("dot", a, b)
    return np.array([np.dot(a, b)]), None


def _dot_bwd(g, arrays, out, cache, attrs, need):
    a, b = arrays
    return [g[0] * b, g[0] * a]


def _sum_fwd(arrays, attrs):
    return np.array([np.sum(arrays[0])]), None


def _sum_bwd(g, arrays, out, cache, attrs, need):
    return [np.full_like(arrays[0], g[0])]


def _gelu_fwd(arrays, attrs):
    x = arrays[0]
    u = _SQRT_2_OVER_PI * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), t


def _gelu_bwd(g, arrays, out, t, attrs, need):
    x = arrays[0]
    du = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x * x)
    return [g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)]


def _cross_entropy_fwd(arrays, attrs):
    logits = arrays[0]
    tgt = attrs["targets"]
    if tgt.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {tgt.shape} do not match logits {logits.shape}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= logits.shape[-1]):
        raise ShapeError(f"cross_entropy: target index out of range for logits {logits.shape}")
    logp = _log_softmax(logits)
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)
    return np.array([-np.sum(picked)]), logp


def _cross_entropy_bwd(g, arrays, out, logp, attrs, need):
    tgt = attrs["targets"]
    grad = np.exp(logp)
    np.put_along_axis(grad, tgt[..., None], np.take_along_axis(grad, tgt[..., None], axis=-1) - 1.0, axis=-1)
    return [g[0] * grad]


def _split_heads(x, h):
    b, s, d = x.shape
    return x.reshape(b, s, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def _attention_fwd(arrays, attrs):
    """Causal multi-head attention with an optional gated prompt prefix.

    inputs: q, k, v of shape (S, D) or (B, S, D); optionally prompt keys
    (N, D), prompt values (N, D) and a gate of shape (1,). The prompt branch
    has its own softmax and is scaled by the gate before being added.
    """
    q, k, v = arrays[:3]
    h = attrs["num_heads"]
    if q.ndim not in (2, 3) or q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention: q/k/v shapes must agree, got {q.shape} and {k.shape}")
    if q.shape[-1] % h:
        raise ShapeError(f"attention: model dim {q.shape[-1]} not divisible by {h} heads")
    batched = q.ndim == 3
    if not batched:
        q, k, v = q[None], k[None], v[None]
    s = q.shape[1]
    dh = q.shape[2] // h
    scale = 1.0 / math.sqrt(dh)
    qh, kh, vh = _split_heads(q, h), _split_heads(k, h), _split_heads(v, h)
    scores = np.matmul(qh, kh.transpose(0, 1, 3, 2)) * scale
    mask = np.triu(np.ones((s, s), dtype=bool), 1)
    scores = np.where(mask, -np.inf, scores)
    attn = _softmax(scores)
    o = np.matmul(attn, vh)
    cache = {"qh": qh, "kh": kh, "vh": vh, "attn": attn, "batched": batched, "scale": scale}
    if len(arrays) > 3:
        pk, pv, gate = arrays[3:]
        if pk.ndim != 2 or pk.shape != pv.shape or pk.shape[1] != q.shape[2] or gate.shape != (1,):
            raise ShapeError(f"attention: prompt shapes {pk.shape}/{pv.shape} incompatible with {q.shape}")
        n = pk.shape[0]
        pkh = pk.reshape(n, h, dh).transpose(1, 0, 2)
        pvh = pv.reshape(n, h, dh).transpose(1, 0, 2)
        pattn = _softmax(np.matmul(qh, pkh.transpose(0, 2, 1)) * scale)
        po = np.matmul(pattn, pvh)
        o = o + gate[0] * po
        cache.update(pkh=pkh, pvh=pvh, pattn=pattn, po=po, gate=gate[0])
    out = _merge_heads(o)
    return (out if batched else out[0]), cache


def _attention_bwd(g, arrays, out, c, attrs, need):
    if not c["batched"]:
        g = g[None]
    h = attrs["num_heads"]
    scale = c["scale"]
    go = _split_heads(g, h)
    attn, qh, kh, vh = c["attn"], c["qh"], c["kh"], c["vh"]
    dattn = np.matmul(go, vh.transpose(0, 1, 3, 2))
    dvh = np.matmul(attn.transpose(0, 1, 3, 2), go)
    ds = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True)) * scale
    dqh = np.matmul(ds, kh)
    dkh = np.matmul(ds.transpose(0, 1, 3, 2), qh)
    grads = [None] * len(arrays)
    if len(arrays) > 3:
        pattn, pkh, pvh, gate = c["pattn"], c["pkh"], c["pvh"], c["gate"]
        gpo = go * gate
        dpattn = np.matmul(gpo, pvh.transpose(0, 2, 1))
        dps = pattn * (dpattn - np.sum(dpattn * pattn, axis=-1, keepdims=True)) * scale
        dqh = dqh + np.matmul(dps, pkh)
        n = pkh.shape[1]
        if need[3]:
            dpkh = np.einsum("bhsn,bhsd->hnd", dps, qh)
            grads[3] = dpkh.transpose(1, 0, 2).reshape(n, -1)
        if need[4]:
            dpvh = np.einsum("bhsn,bhsd->hnd", pattn, gpo)
            grads[4] = dpvh.transpose(1, 0, 2).reshape(n, -1)
        if need[5]:
            grads[5] = np.array([np.sum(go * c["po"])])
    unb = (lambda x: x) if c["batched"] else (lambda x: x[0])
    grads[0] = unb(_merge_heads(dqh))
    grads[1] = unb(_merge_heads(dkh))
    grads[2] = unb(_merge_heads(dvh))
    return grads


_KERNELS: dict[str, tuple[Callable, Callable, int | None]] = {
    "matmul": (_matmul_fwd, _matmul_bwd, 2),
    "add": (_add_fwd, _add_bwd, 2),
    "scale": (_scale_fwd, _scale_bwd, 1),
    "mul_scalar": (_mul_scalar_fwd, _mul_scalar_bwd, 2),
    "concat": (_concat_fwd, _concat_bwd, None),
    "slice": (_slice_fwd, _slice_bwd, 1),
    "softmax": (_softmax_fwd, _softmax_bwd, 1),
    "log_softmax": (_log_softmax_fwd, _log_softmax_bwd, 1),
    "layer_norm": (_layer_norm_fwd, _layer_norm_bwd, 1),
    "embedding": (_embedding_fwd, _embedding_bwd, 1),
    "mean_pool": (_mean_pool_fwd, _mean_pool_bwd, 1),
    "dot": (_dot_fwd, _dot_bwd, 2),
    "sum": (_sum_fwd, _sum_bwd, 1),
    "gelu": (_gelu_fwd, _gelu_bwd, 1),
    "cross_entropy": (_cross_entropy_fwd, _cross_entropy_bwd, 1),
    "attention": (_attention_fwd, _attention_bwd, None),
}

KINDS = tuple(sorted(_KERNELS))


def apply(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Run operation ``kind`` on ``inputs``; record it if a tape is active."""
    try:
        fwd, _, arity = _KERNELS[kind]
    except KeyError:
        raise ValueError(f"unknown operation kind {kind!r}") from None
    if arity is not None and len(inputs) != arity:
        raise ValueError(f"{kind}: expected {arity} inputs, got {len(inputs)}")
    if kind == "attention" and len(inputs) not in (3, 6):
        raise ValueError(f"attention: expected 3 or 6 inputs, got {len(inputs)}")
    arrays = [t.data for t in inputs]
    out_arr, cache = fwd(arrays, attrs)
    track = bool(_ACTIVE) and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_arr
    out.requires_grad = track
    out.grad = None
    out.node_id = None
    out._tape = None
    if track:
        _ACTIVE[-1]._record(kind, list(inputs), out, attrs, cache)
    return out


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(x) into ``x.grad`` for every tracked tensor.

    Gradients are reset before accumulation, so calling this twice on the same
    tape gives identical results. Returns a map from node id to gradient.
    """
    if loss.shape != (1,):
        raise ShapeError(f"backward: loss must be scalar with shape (1,), got {loss.shape}")
    tape = loss._tape
    if tape is None or not tape.nodes:
        raise ValueError("backward: loss was not recorded on a tape")
    for node in tape.nodes:
        node.output.grad = None
    for leaf in tape._leaves.values():
        leaf.grad = np.zeros_like(leaf.data)
    loss.grad = np.ones(1)
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g = node.output.grad
        if g is None:
            continue
        need = [t.requires_grad for t in node.inputs]
        _, bwd, _ = _KERNELS[node.kind]
        arrays = [t.data for t in node.inputs]
        grads = bwd(g, arrays, node.output.data, node.cache, node.attrs, need)
        for t, gi, n in zip(node.inputs, grads, need):
            if not n or gi is None:
                continue
            if t.grad is None:
                t.grad = np.array(gi, dtype=np.float64, copy=True)
            else:
                t.grad += gi
    result = {nid: leaf.grad for nid, leaf in tape._leaves.items()}
    for node in tape.nodes:
        if node.output.grad is not None:
            result[node.output.node_id] = node.output.grad
    return result


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, epsilon: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = Tensor(point.data.copy(), requires_grad=True)
    with Tape():
        y = f(x)
    if y.shape != (1,):
        raise ShapeError(f"grad_check: f must return a scalar, got shape {y.shape}")
    if y.requires_grad:
        backward(y)
        analytic = x.grad.reshape(-1).copy()
    else:
        analytic = np.zeros(x.data.size)
    flat = x.data.reshape(-1)
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = f(Tensor(x.data.copy())).item()
        flat[i] = orig - epsilon
        fm = f(Tensor(x.data.copy())).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2 * epsilon)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
