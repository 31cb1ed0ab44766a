"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Ops record a backward closure on the currently active Tape; calling
``backward(loss)`` replays the tape in reverse and accumulates gradients
into every ``requires_grad`` leaf. The tape is rebuilt for every forward
pass -- there is no graph caching.
"""

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op, *shapes):
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class NonFiniteError(ValueError):
    def __init__(self, op):
        super().__init__(f"{op}: non-finite input")


class Tape:
    """Ordered record of backward closures for one forward pass."""

    _active = None

    def __init__(self):
        self._ops = []  # list of (out_tensor, closure(grad))

    def __enter__(self):
        if Tape._active is not None:
            raise RuntimeError("a Tape is already active; tapes do not nest")
        Tape._active = self
        return self

    def __exit__(self, *exc):
        Tape._active = None
        return False


class Tensor:
    """Row-major float64 array with an optional gradient slot."""

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.values.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def constant(values):
    return Tensor(values, requires_grad=False)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def _make(values, inputs, backward_fn):
    out = Tensor(values, requires_grad=any(t.requires_grad for t in inputs))
    tape = Tape._active
    if out.requires_grad and tape is not None:
        tape._ops.append((out, backward_fn))
    return out


def _check_finite(op, *tensors):
    for t in tensors:
        if not np.all(np.isfinite(t.values)):
            raise NonFiniteError(op)


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a, b):
    if a.shape != b.shape and b.values.ndim != 0:
        raise ShapeError("add", a.shape, b.shape)
    out = _make(a.values + b.values, (a, b), None)

    def bw(g):
        _accum(a, g)
        _accum(b, g.sum() if b.values.ndim == 0 else g)

    return _finish(out, bw)


def sub(a, b):
    if a.shape != b.shape and b.values.ndim != 0:
        raise ShapeError("sub", a.shape, b.shape)
    out = _make(a.values - b.values, (a, b), None)

    def bw(g):
        _accum(a, g)
        _accum(b, -(g.sum() if b.values.ndim == 0 else g))

    return _finish(out, bw)


def mul(a, b):
    if a.shape != b.shape and b.values.ndim != 0:
        raise ShapeError("mul", a.shape, b.shape)
    out = _make(a.values * b.values, (a, b), None)

    def bw(g):
        _accum(a, g * b.values)
        gb = g * a.values
        _accum(b, gb.sum() if b.values.ndim == 0 else gb)

    return _finish(out, bw)


def affine(x, scale=1.0, shift=0.0):
    """scale * x + shift, with float constants."""
    out = _make(scale * x.values + shift, (x,), None)

    def bw(g):
        _accum(x, scale * g)

    return _finish(out, bw)


def neg(x):
    return affine(x, -1.0)


def square(x):
    out = _make(x.values * x.values, (x,), None)

    def bw(g):
        _accum(x, 2.0 * g * x.values)

    return _finish(out, bw)


def texp(x):
    _check_finite("exp", x)
    v = np.exp(x.values)
    out = _make(v, (x,), None)

    def bw(g):
        _accum(x, g * v)

    return _finish(out, bw)


def tlog(x):
    if np.any(x.values <= 0):
        raise ValueError("log: input must be strictly positive")
    out = _make(np.log(x.values), (x,), None)

    def bw(g):
        _accum(x, g / x.values)

    return _finish(out, bw)


def sigmoid(x):
    _check_finite("sigmoid", x)
    z = np.exp(-np.abs(x.values))
    v = np.where(x.values >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = _make(v, (x,), None)

    def bw(g):
        _accum(x, g * v * (1.0 - v))

    return _finish(out, bw)


def relu(x):
    mask = x.values > 0
    out = _make(np.where(mask, x.values, 0.0), (x,), None)

    def bw(g):
        _accum(x, g * mask)

    return _finish(out, bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """a @ b where b is 2-D and a has ndim >= 2."""
    if b.values.ndim != 2 or a.values.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = _make(np.matmul(a.values, b.values), (a, b), None)

    def bw(g):
        _accum(a, np.matmul(g, b.values.T))
        k = a.shape[-1]
        _accum(b, a.values.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))

    return _finish(out, bw)


def add_bias(x, b):
    """x + b broadcasting b over all leading axes of x."""
    if b.values.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError("add_bias", x.shape, b.shape)
    out = _make(x.values + b.values, (x, b), None)

    def bw(g):
        _accum(x, g)
        _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _finish(out, bw)


def concat(parts, axis=-1):
    parts = list(parts)
    base = list(parts[0].shape)
    ax = axis if axis >= 0 else len(base) + axis
    for p in parts[1:]:
        s = list(p.shape)
        if len(s) != len(base) or any(s[i] != base[i] for i in range(len(s)) if i != ax):
            raise ShapeError("concat", *[p.shape for p in parts])
    out = _make(np.concatenate([p.values for p in parts], axis=ax), parts, None)
    sizes = [p.shape[ax] for p in parts]

    def bw(g):
        offs = np.cumsum([0] + sizes)
        for p, lo, hi in zip(parts, offs[:-1], offs[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    return _finish(out, bw)


def gather_rows(table, idx):
    """table[idx] for a 2-D table and an integer index array of any shape."""
    if table.values.ndim != 2:
        raise ShapeError("gather_rows", table.shape)
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: index out of range for table with {table.shape[0]} rows")
    out = _make(table.values[idx], (table,), None)

    def bw(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, idx.ravel(), g.reshape(-1, table.shape[1]))
        _accum(table, gt)

    return _finish(out, bw)


def take_column(x, j):
    if x.values.ndim != 2 or not (0 <= j < x.shape[1]):
        raise ShapeError("take_column", x.shape)
    out = _make(x.values[:, j], (x,), None)

    def bw(g):
        gx = np.zeros_like(x.values)
        gx[:, j] = g
        _accum(x, gx)

    return _finish(out, bw)


def transpose(x):
    if x.values.ndim != 2:
        raise ShapeError("transpose", x.shape)
    out = _make(x.values.T.copy(), (x,), None)

    def bw(g):
        _accum(x, g.T)

    return _finish(out, bw)


def diag_part(x):
    if x.values.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError("diag_part", x.shape)
    out = _make(np.diagonal(x.values).copy(), (x,), None)

    def bw(g):
        gx = np.zeros_like(x.values)
        np.fill_diagonal(gx, g)
        _accum(x, gx)

    return _finish(out, bw)


# ---------------------------------------------------------------------------
# reductions


def tsum(x):
    out = _make(np.asarray(x.values.sum()), (x,), None)

    def bw(g):
        _accum(x, np.full_like(x.values, float(g)))

    return _finish(out, bw)


def tmean(x):
    n = x.values.size
    out = _make(np.asarray(x.values.mean()), (x,), None)

    def bw(g):
        _accum(x, np.full_like(x.values, float(g) / n))

    return _finish(out, bw)


# ---------------------------------------------------------------------------
# softmax / attention / similarity


def row_softmax(x, mask=None, allow_empty=False):
    """Softmax over the last axis of a 2-D input with max-subtraction.

    ``mask`` (boolean, True = keep) zeroes out positions via -inf logits.
    Fully masked rows raise unless ``allow_empty``, in which case they
    yield all-zero rows.
    """
    if x.values.ndim != 2:
        raise ShapeError("row_softmax", x.shape)
    _check_finite("row_softmax", x)
    v = x.values
    if mask is None:
        keep = np.ones(v.shape, dtype=bool)
    else:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape != v.shape:
            raise ShapeError("row_softmax mask", v.shape, keep.shape)
    row_any = keep.any(axis=1)
    if not row_any.all() and not allow_empty:
        raise ValueError("row_softmax: fully masked row")
    shifted = np.where(keep, v, -np.inf)
    m = np.max(np.where(keep, v, -np.inf), axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(shifted - m)
    denom = e.sum(axis=1, keepdims=True)
    s = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    out = _make(s, (x,), None)

    def bw(g):
        inner = (g * s).sum(axis=1, keepdims=True)
        _accum(x, s * (g - inner))

    return _finish(out, bw)


def attention_scores(q, k):
    """Per-row dot products: q (B,d), k (B,L,d) -> (B,L)."""
    if q.values.ndim != 2 or k.values.ndim != 3 or q.shape[0] != k.shape[0] or q.shape[1] != k.shape[2]:
        raise ShapeError("attention_scores", q.shape, k.shape)
    out = _make(np.einsum("bd,bld->bl", q.values, k.values), (q, k), None)

    def bw(g):
        _accum(q, np.einsum("bl,bld->bd", g, k.values))
        _accum(k, np.einsum("bl,bd->bld", g, q.values))

    return _finish(out, bw)


def attention_pool(s, h):
    """Weighted pooling: s (B,L), h (B,L,D) -> (B,D)."""
    if s.values.ndim != 2 or h.values.ndim != 3 or s.shape != h.shape[:2]:
        raise ShapeError("attention_pool", s.shape, h.shape)
    out = _make(np.einsum("bl,bld->bd", s.values, h.values), (s, h), None)

    def bw(g):
        _accum(s, np.einsum("bd,bld->bl", g, h.values))
        _accum(h, np.einsum("bl,bd->bld", s.values, g))

    return _finish(out, bw)


def scale_rows(s, w):
    """Row-wise scaling: s (B,L) scaled by w (B,1)."""
    if s.values.ndim != 2 or w.shape != (s.shape[0], 1):
        raise ShapeError("scale_rows", s.shape, w.shape)
    out = _make(s.values * w.values, (s, w), None)

    def bw(g):
        _accum(s, g * w.values)
        _accum(w, (g * s.values).sum(axis=1, keepdims=True))

    return _finish(out, bw)


def cosine_matrix(a, b):
    """Pairwise cosine similarities: a (N,d), b (M,d) -> (N,M)."""
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("cosine_matrix", a.shape, b.shape)
    na = np.linalg.norm(a.values, axis=1, keepdims=True)
    nb = np.linalg.norm(b.values, axis=1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine_matrix: zero-norm embedding")
    an = a.values / na
    bn = b.values / nb
    out = _make(an @ bn.T, (a, b), None)

    def bw(g):
        gan = g @ bn
        gbn = g.T @ an
        _accum(a, (gan - (gan * an).sum(axis=1, keepdims=True) * an) / na)
        _accum(b, (gbn - (gbn * bn).sum(axis=1, keepdims=True) * bn) / nb)

    return _finish(out, bw)


def bce_with_logits(logits, labels):
    """Per-element binary cross entropy from logits; labels are constants."""
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError("bce_with_logits", logits.shape, y.shape)
    z = logits.values
    v = np.maximum(z, 0.0) - y * z + np.log1p(np.exp(-np.abs(z)))
    out = _make(v, (logits,), None)

    def bw(g):
        zpos = np.exp(-np.abs(z))
        p = np.where(z >= 0, 1.0 / (1.0 + zpos), zpos / (1.0 + zpos))
        _accum(logits, g * (p - y))

    return _finish(out, bw)


# ---------------------------------------------------------------------------
# backward driver


def _finish(out, bw):
    # _make stored a placeholder closure slot; patch the real one in.
    tape = Tape._active
    if out.requires_grad and tape is not None and tape._ops and tape._ops[-1][0] is out:
        tape._ops[-1] = (out, bw)
    return out


def backward(loss, tape=None):
    """Seed d(loss)/d(loss)=1 and replay the tape in reverse.

    Intermediate grads are cleared first, so repeated calls accumulate
    cleanly into leaf tensors.
    """
    tape = tape or Tape._active
    if tape is None:
        raise RuntimeError("backward: no tape")
    if loss.values.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.values.shape}")
    for out, _ in tape._ops:
        out.grad = None
    loss.grad = np.ones_like(loss.values)
    for out, fn in reversed(tape._ops):
        if out.grad is not None and fn is not None:
            fn(out.grad)


def linear(x, w, b):
    return add_bias(matmul(x, w), b)
