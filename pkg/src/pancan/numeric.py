"""Dense float64 matrices with taped reverse-mode differentiation.

Every value is a 2-D ``Mat``.  Operations record their inputs and a
vector-Jacobian closure on the result, so ``gradients`` can replay the tape
in reverse creation order.  There is no broadcasting: every shape change is
an explicit op.  Leaf matrices built from external data are validated to be
finite; derived values trust their inputs.

Column conventions used by the model layers: a feature matrix is d x n with
one column per cell, and a batch of B samples is stored side by side as
d x (B*n) with the columns of sample b occupying the contiguous block
[b*n, (b+1)*n).  The ``sample_*`` ops act independently on those blocks.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

from .errors import EvaluationError, ShapeError

_node_ids = itertools.count()

# When true, ops skip tape recording; used for plain evaluation such as the
# finite-difference side of grad_check.
_NO_GRAD = False


class no_grad:
    """Context manager disabling tape recording inside the block."""

    def __enter__(self):
        global _NO_GRAD
        self._prev = _NO_GRAD
        _NO_GRAD = True

    def __exit__(self, *exc):
        global _NO_GRAD
        _NO_GRAD = self._prev
        return False


class Mat:
    """Immutable row-major float64 matrix, optionally on the autodiff tape.

    Construct leaves with ``Mat(data)`` (validates finiteness) or the
    ``zeros``/``full``/``randn`` helpers.  Results of the module-level ops
    carry the backward rule that maps an output cotangent to the input
    cotangents.
    """

    __slots__ = ("data", "_parents", "_vjp", "_nid")

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"Mat requires 1-D or 2-D data, got ndim={arr.ndim}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Mat rejects non-finite entries at construction")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        self.data = arr
        self._parents = ()
        self._vjp = None
        self._nid = next(_node_ids)

    @classmethod
    def _wrap(cls, arr, parents=(), vjp=None):
        """Internal constructor for op results; skips validation and copy."""
        out = object.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        out.data = arr
        if _NO_GRAD:
            out._parents = ()
            out._vjp = None
        else:
            out._parents = parents
            out._vjp = vjp
        out._nid = next(_node_ids)
        return out

    @classmethod
    def zeros(cls, rows, cols):
        return cls._wrap(np.zeros((rows, cols)))

    @classmethod
    def full(cls, rows, cols, value):
        return cls._wrap(np.full((rows, cols), float(value)))

    @classmethod
    def eye(cls, n):
        return cls._wrap(np.eye(n))

    @classmethod
    def randn(cls, rng, rows, cols, scale=1.0):
        return cls._wrap(rng.standard_normal((rows, cols)) * scale)

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() requires a 1x1 Mat, got {self.data.shape}")
        return float(self.data[0, 0])

    def __repr__(self):
        return f"Mat({self.rows}x{self.cols})"


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Mat, b: Mat) -> Mat:
    _same_shape(a, b, "add")
    return Mat._wrap(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Mat, b: Mat) -> Mat:
    _same_shape(a, b, "sub")
    return Mat._wrap(a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a: Mat, b: Mat) -> Mat:
    _same_shape(a, b, "hadamard")
    ad, bd = a.data, b.data
    return Mat._wrap(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Mat, s: float) -> Mat:
    s = float(s)
    if not math.isfinite(s):
        raise ValueError("scale factor must be finite")
    return Mat._wrap(a.data * s, (a,), lambda g: (g * s,))


def transpose(a: Mat) -> Mat:
    return Mat._wrap(a.data.T, (a,), lambda g: (g.T,))


def matmul(a: Mat, b: Mat) -> Mat:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dims {a.cols} != {b.rows}")
    ad, bd = a.data, b.data
    return Mat._wrap(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def affine(w: Mat, x: Mat) -> Mat:
    """Linear map W @ x (alias of matmul with the parameter first)."""
    return matmul(w, x)


def relu(a: Mat) -> Mat:
    mask = a.data > 0.0
    return Mat._wrap(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Mat) -> Mat:
    out = _sigmoid(a.data)
    return Mat._wrap(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x):
    # evaluated branch-wise to stay finite for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax_rows(a: Mat) -> Mat:
    """Row-wise softmax with row-max subtraction for stability."""
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return ((g - dot) * p,)

    return Mat._wrap(p, (a,), vjp)


def masked_softmax_rows(a: Mat, mask: np.ndarray) -> Mat:
    """Row softmax restricted to ``mask``; fully masked rows become zero.

    ``mask`` is a constant boolean array of the same shape; gradients flow
    only through unmasked entries.
    """
    if mask.shape != a.shape:
        raise ShapeError(f"masked_softmax_rows: mask {mask.shape} vs {a.shape}")
    neg = np.where(mask, a.data, -np.inf)
    mx = neg.max(axis=1, keepdims=True)
    # clamp dead rows to 0 so the subtraction never produces inf - inf
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(neg - mx)
    s = e.sum(axis=1, keepdims=True)
    p = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def vjp(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return ((g - dot) * p,)

    return Mat._wrap(p, (a,), vjp)


def renormalize_rows(a: Mat, mask: np.ndarray) -> Mat:
    """Keep the masked entries of each row and rescale them to sum 1.

    Entries must be non-negative (probability rows); rows whose kept mass is
    zero come back as zero rows.  For softmax inputs this equals a softmax
    restricted to the kept set, without a second exponential pass.
    """
    if mask.shape != a.shape:
        raise ShapeError(f"renormalize_rows: mask {mask.shape} vs {a.shape}")
    kept = np.where(mask, a.data, 0.0)
    s = kept.sum(axis=1, keepdims=True)
    live = s > 0
    p = np.divide(kept, s, out=np.zeros_like(kept), where=live)
    inv = np.divide(1.0, s, out=np.zeros_like(s), where=live)

    def vjp(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (np.where(mask, (g - dot) * inv, 0.0),)

    return Mat._wrap(p, (a,), vjp)


def concat_rows(mats: Sequence[Mat]) -> Mat:
    if not mats:
        raise ShapeError("concat_rows of an empty list")
    cols = mats[0].cols
    for m in mats:
        if m.cols != cols:
            raise ShapeError(f"concat_rows: column counts differ ({m.cols} vs {cols})")
    sizes = [m.rows for m in mats]
    offs = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[offs[i]:offs[i + 1], :] for i in range(len(sizes)))

    return Mat._wrap(np.concatenate([m.data for m in mats], axis=0), tuple(mats), vjp)


def concat_cols(mats: Sequence[Mat]) -> Mat:
    if not mats:
        raise ShapeError("concat_cols of an empty list")
    rows = mats[0].rows
    for m in mats:
        if m.rows != rows:
            raise ShapeError(f"concat_cols: row counts differ ({m.rows} vs {rows})")
    sizes = [m.cols for m in mats]
    offs = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[:, offs[i]:offs[i + 1]] for i in range(len(sizes)))

    return Mat._wrap(np.concatenate([m.data for m in mats], axis=1), tuple(mats), vjp)


def gather_cols(a: Mat, idx) -> Mat:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_cols: index list must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.cols):
        raise ShapeError("gather_cols: index out of range")
    cols = a.cols

    def vjp(g):
        out = np.zeros((a.rows, cols))
        np.add.at(out, (slice(None), idx), g)
        return (out,)

    return Mat._wrap(a.data[:, idx], (a,), vjp)


def gather_rows(a: Mat, idx) -> Mat:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows: index list must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.rows):
        raise ShapeError("gather_rows: index out of range")
    rows = a.rows

    def vjp(g):
        out = np.zeros((rows, a.cols))
        np.add.at(out, idx, g)
        return (out,)

    return Mat._wrap(a.data[idx, :], (a,), vjp)


def add_col(a: Mat, b: Mat) -> Mat:
    """Add the column vector b to every column of a (explicit broadcast)."""
    if b.cols != 1 or b.rows != a.rows:
        raise ShapeError(f"add_col: bias {b.shape} does not match {a.shape}")
    return Mat._wrap(a.data + b.data, (a, b),
                     lambda g: (g, g.sum(axis=1, keepdims=True)))


def sum_all(a: Mat) -> Mat:
    shape = a.shape
    return Mat._wrap(np.array([[a.data.sum()]]), (a,),
                     lambda g: (np.full(shape, g[0, 0]),))


def mean_cols(a: Mat) -> Mat:
    """Mean over columns, returning a rows x 1 vector."""
    n = a.cols
    return Mat._wrap(a.data.mean(axis=1, keepdims=True), (a,),
                     lambda g: (np.repeat(g, n, axis=1) / n,))


def frobenius_sq(a: Mat) -> Mat:
    ad = a.data
    return Mat._wrap(np.array([[float((ad * ad).sum())]]), (a,),
                     lambda g: (2.0 * g[0, 0] * ad,))


def l2_col_norms(a: Mat | np.ndarray) -> np.ndarray:
    """Per-column Euclidean norms as a plain vector (not on the tape)."""
    d = a.data if isinstance(a, Mat) else np.asarray(a, dtype=np.float64)
    return np.sqrt((d * d).sum(axis=0))


def bce_logits_sum(logits: Mat, targets: np.ndarray) -> Mat:
    """Sum of binary cross-entropies of sigmoid(logits) against {0,1} targets.

    Uses the max(z,0) - z*y + log1p(exp(-|z|)) form so large logits stay
    finite.  ``targets`` is a constant array of the same shape.
    """
    if targets.shape != logits.shape:
        raise ShapeError(f"bce_logits_sum: targets {targets.shape} vs {logits.shape}")
    z = logits.data
    y = targets
    val = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def vjp(g):
        return (g[0, 0] * (_sigmoid(z) - y),)

    return Mat._wrap(np.array([[float(val.sum())]]), (logits,), vjp)


# ---------------------------------------------------------------------------
# per-sample block ops (batch of B samples stored as contiguous column blocks)


def _blocks(mat, n, what):
    if mat.cols % n != 0:
        raise ShapeError(f"{what}: {mat.cols} columns not divisible by block size {n}")
    return mat.cols // n


def sample_scores(q: Mat, m: Mat, nq: int, nk: int) -> Mat:
    """Per-sample inner-product score blocks.

    ``q`` is d x (B*nq), ``m`` is d x (B*nk); the result is (B*nq) x nk where
    row b*nq+i holds the scores of query i of sample b against that sample's
    nk keys.  No cross-sample terms appear.
    """
    if q.rows != m.rows:
        raise ShapeError(f"sample_scores: dims {q.rows} != {m.rows}")
    b = _blocks(q, nq, "sample_scores")
    if _blocks(m, nk, "sample_scores") != b:
        raise ShapeError("sample_scores: batch sizes differ")
    d = q.rows
    qb = q.data.reshape(d, b, nq).transpose(1, 0, 2)   # (b, d, nq)
    mb = m.data.reshape(d, b, nk).transpose(1, 0, 2)   # (b, d, nk)
    out = np.matmul(qb.transpose(0, 2, 1), mb).reshape(b * nq, nk)

    def vjp(g):
        gb = g.reshape(b, nq, nk)
        dq = np.matmul(mb, gb.transpose(0, 2, 1))      # (b, d, nq)
        dm = np.matmul(qb, gb)                         # (b, d, nk)
        return (dq.transpose(1, 0, 2).reshape(d, b * nq),
                dm.transpose(1, 0, 2).reshape(d, b * nk))

    return Mat._wrap(out, (q, m), vjp)


def sample_aggregate(v: Mat, p: Mat, nq: int, nk: int) -> Mat:
    """Weighted per-sample combination of value columns.

    ``v`` is d x (B*nk) values, ``p`` is (B*nq) x nk weights; output column
    b*nq+i is sum_j p[b*nq+i, j] * v[:, b*nk+j].
    """
    b = _blocks(v, nk, "sample_aggregate")
    if p.cols != nk or p.rows != b * nq:
        raise ShapeError(f"sample_aggregate: weights {p.shape} vs B={b}, nq={nq}, nk={nk}")
    d = v.rows
    vb = v.data.reshape(d, b, nk).transpose(1, 0, 2)   # (b, d, nk)
    pb = p.data.reshape(b, nq, nk)
    out = np.matmul(vb, pb.transpose(0, 2, 1))         # (b, d, nq)
    out = out.transpose(1, 0, 2).reshape(d, b * nq)

    def vjp(g):
        gb = g.reshape(d, b, nq).transpose(1, 0, 2)    # (b, d, nq)
        dv = np.matmul(gb, pb)                         # (b, d, nk)
        dp = np.matmul(gb.transpose(0, 2, 1), vb)      # (b, nq, nk)
        return (dv.transpose(1, 0, 2).reshape(d, b * nk),
                dp.reshape(b * nq, nk))

    return Mat._wrap(out, (v, p), vjp)


def sample_apply(f: Mat, p: Mat, n: int) -> Mat:
    """Apply one n x n cell-mixing matrix to every sample block of f.

    ``f`` is d x (B*n); output column b*n+i is sum_j p[i, j] * f[:, b*n+j].
    Both arguments are differentiable.
    """
    if p.rows != n or p.cols != n:
        raise ShapeError(f"sample_apply: mixing matrix {p.shape} is not {n}x{n}")
    b = _blocks(f, n, "sample_apply")
    d = f.rows
    # (d, b*n) viewed as (d*b, n): one dense GEMM covers every sample block
    f2 = f.data.reshape(d * b, n)
    pd = p.data
    out = (f2 @ pd.T).reshape(d, b * n)

    def vjp(g):
        g2 = g.reshape(d * b, n)
        return ((g2 @ pd).reshape(d, b * n), g2.T @ f2)

    return Mat._wrap(out, (f, p), vjp)


def member_scores(q: Mat, k: Mat, gather: np.ndarray, n: int, m: int) -> Mat:
    """Scores of each cell against its own member list.

    ``gather`` is a constant n x (n*m) 0/1 matrix sending key columns to the
    member slots of every cell (slot i*m+j holds member j of cell i; padding
    slots are all-zero rows).  Output row b*n+i holds the m member scores of
    cell i in sample b.
    """
    if q.rows != k.rows or q.cols != k.cols:
        raise ShapeError("member_scores: query/key blocks differ")
    b = _blocks(q, n, "member_scores")
    d = q.rows
    if gather.shape != (n, n * m):
        raise ShapeError(f"member_scores: gather {gather.shape} != ({n},{n * m})")
    kg = (k.data.reshape(d * b, n) @ gather).reshape(d, b, n, m)
    qr = q.data.reshape(d, b, n)
    out = (qr[..., None] * kg).sum(axis=0).reshape(b * n, m)

    def vjp(g):
        gr = g.reshape(b, n, m)
        dq = (kg * gr[None]).sum(axis=3).reshape(d, b * n)
        dkg = (qr[..., None] * gr[None]).reshape(d * b, n * m)
        dk = (dkg @ gather.T).reshape(d, b * n)
        return (dq, dk)

    return Mat._wrap(out, (q, k), vjp)


def member_aggregate(v: Mat, p: Mat, gather: np.ndarray, n: int, m: int) -> Mat:
    """Per-cell weighted sum of its member values.

    ``p`` is (B*n) x m member weights aligned with the same ``gather`` used
    for the scores; output column b*n+i is sum_j p[b*n+i, j] * value of
    member j of cell i in sample b.
    """
    b = _blocks(v, n, "member_aggregate")
    d = v.rows
    if p.shape != (b * n, m):
        raise ShapeError(f"member_aggregate: weights {p.shape} != ({b * n},{m})")
    if gather.shape != (n, n * m):
        raise ShapeError(f"member_aggregate: gather {gather.shape} != ({n},{n * m})")
    vg = (v.data.reshape(d * b, n) @ gather).reshape(d, b, n, m)
    pr = p.data.reshape(b, n, m)
    out = (vg * pr[None]).sum(axis=3).reshape(d, b * n)

    def vjp(g):
        gr = g.reshape(d, b, n)
        dp = (vg * gr[..., None]).sum(axis=0).reshape(b * n, m)
        dvg = (gr[..., None] * pr[None]).reshape(d * b, n * m)
        dv = (dvg @ gather.T).reshape(d, b * n)
        return (dv, dp)

    return Mat._wrap(out, (v, p), vjp)


def support_softmax(w: Mat, rows: np.ndarray, cols: np.ndarray, n: int) -> Mat:
    """Scatter flat weights onto an n x n support and softmax each row.

    ``w`` is 1 x E with one entry per support coordinate (rows[e], cols[e]).
    Rows with no support stay zero; rows with support become a probability
    distribution over their support entries.
    """
    e_count = w.cols
    if w.rows != 1 or rows.shape != (e_count,) or cols.shape != (e_count,):
        raise ShapeError("support_softmax: weights and coordinates disagree")
    wd = w.data[0]
    mx = np.full(n, -np.inf)
    np.maximum.at(mx, rows, wd)
    ex = np.exp(wd - mx[rows])
    denom = np.zeros(n)
    np.add.at(denom, rows, ex)
    pe = ex / denom[rows]
    out = np.zeros((n, n))
    out[rows, cols] = pe

    def vjp(g):
        ge = g[rows, cols]
        rowdot = np.zeros(n)
        np.add.at(rowdot, rows, ge * pe)
        return ((pe * (ge - rowdot[rows])).reshape(1, -1),)

    return Mat._wrap(out, (w,), vjp)


# ---------------------------------------------------------------------------
# reverse pass


def gradients(output: Mat, wrt: Sequence[Mat]) -> list[np.ndarray]:
    """Cotangents of a 1x1 output with respect to the given leaves.

    Nodes are replayed in decreasing creation order, which is a valid
    topological order because every op is created after its inputs.
    Unreachable leaves get zero gradients.
    """
    if output.shape != (1, 1):
        raise ShapeError(f"gradients: output must be 1x1, got {output.shape}")
    # collect the reachable subgraph iteratively
    seen = {output._nid: output}
    stack = [output]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p._nid not in seen:
                seen[p._nid] = p
                stack.append(p)
    grads = {output._nid: np.ones((1, 1))}
    for node in sorted(seen.values(), key=lambda m: m._nid, reverse=True):
        g = grads.get(node._nid)
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None:
                continue
            acc = grads.get(parent._nid)
            grads[parent._nid] = pg if acc is None else acc + pg
    out = []
    for leaf in wrt:
        g = grads.get(leaf._nid)
        out.append(np.zeros(leaf.shape) if g is None else np.asarray(g))
    return out


def grad_check(f: Callable[[Sequence[Mat]], Mat], params: Sequence[Mat],
               eps: float = 1e-5) -> float:
    """Max relative error between taped and central-difference gradients.

    ``f`` maps the parameter list to a 1x1 Mat.  Every entry of every
    parameter is perturbed by +/- eps; the relative error of entry i is
    |analytic - fd| / max(|analytic|, |fd|, 1e-8).
    """
    params = list(params)
    out = f(params)
    if not np.isfinite(out.item()):
        raise EvaluationError("grad_check: loss is non-finite at the base point")
    analytic = gradients(out, params)
    worst = 0.0
    for k, p in enumerate(params):
        base = np.array(p.data)
        for idx in np.ndindex(base.shape):
            fd = _central_difference(f, params, k, base, idx, eps)
            a = analytic[k][idx]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            if rel > worst:
                worst = rel
    return worst


def _central_difference(f, params, k, base, idx, eps):
    vals = []
    for sign in (+1.0, -1.0):
        shifted = np.array(base)
        shifted[idx] += sign * eps
        probe = list(params)
        probe[k] = Mat._wrap(shifted)
        with no_grad():
            v = f(probe).item()
        if not math.isfinite(v):
            raise EvaluationError(f"grad_check: non-finite loss at perturbation {idx}")
        vals.append(v)
    return (vals[0] - vals[1]) / (2.0 * eps)
