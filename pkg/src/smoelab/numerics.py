"""Dense float64 tensors with reverse-mode differentiation.

Everything in this package moves through the `Tensor` type: a C-contiguous
float64 numpy array of rank 0..3 plus an optional gradient tape. Operations
never mutate their inputs; each one returns a fresh tensor that remembers how
to push gradients back to its inputs. Calling `backward` on a scalar loss
walks the tape once in reverse topological order and accumulates gradients
into every reachable tensor with `requires_grad` set.

Probability-adjacent primitives (row softmax, entropy, isotropic Gaussian
log-density, log-sum-exp) are implemented with max-subtraction so they stay
finite for any reasonable input.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ParameterError, ShapeError, ValidationError

_MAX_RANK = 3


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by a 64-bit seed and a stream tag.

    Distinct streams from one seed are statistically independent; the same
    (seed, stream) pair is bit-reproducible across runs.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((int(seed), int(stream)))))


def _as_array(values) -> np.ndarray:
    if isinstance(values, Tensor):
        return values.array
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim > _MAX_RANK:
        raise ShapeError(f"rank-{arr.ndim} arrays unsupported (max rank {_MAX_RANK})")
    return arr


class Tensor:
    """Immutable float64 array of rank <= 3, optionally tracked on a tape.

    `array` is the shaped view, `data` the flat row-major view required by the
    checkpoint serialization format. Entries are checked finite on
    construction, so any public operation producing NaN/Inf fails loudly.
    """

    __slots__ = ("array", "grad", "requires_grad", "op", "inputs", "backward_fn", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None,
                 *, op: str = "leaf", inputs: tuple = (), backward_fn=None):
        arr = _as_array(values)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"non-finite entries in tensor (op={op})")
        self.array = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.array.shape

    @property
    def ndim(self) -> int:
        return self.array.ndim

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the entries."""
        return self.array.reshape(-1)

    def item(self) -> float:
        return float(self.array)

    def detach(self) -> "Tensor":
        return Tensor(self.array)

    def __repr__(self) -> str:
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{grad})"

    # operator sugar; scalars are treated as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(arr: np.ndarray, inputs: tuple, backward_fn, op: str) -> Tensor:
    tracked = tuple(t for t in inputs if isinstance(t, Tensor))
    if any(t.requires_grad for t in tracked):
        return Tensor(arr, requires_grad=True, op=op, inputs=tracked, backward_fn=backward_fn)
    return Tensor(arr, op=op)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.array)
    t.grad = t.grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` over broadcast axes so it matches `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into `.grad` of every reachable tensor.

    The loss must be scalar. Nodes are visited exactly once, in reverse
    topological order, so gradients from multiple consumers are summed before
    a node propagates to its own inputs.
    """
    if not isinstance(loss, Tensor):
        raise ValueError("backward expects a Tensor")
    if loss.array.ndim != 0:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            if id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.array + b.array

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.array - b.array

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.array * b.array

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.array, a.shape))
        _accumulate(b, _unbroadcast(g * a.array, b.shape))

    return _make(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.array / b.array

    def bw(g):
        _accumulate(a, _unbroadcast(g / b.array, a.shape))
        _accumulate(b, _unbroadcast(-g * a.array / (b.array * b.array), b.shape))

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _coerce(a)

    def bw(g):
        _accumulate(a, -g)

    return _make(-a.array, (a,), bw, "neg")


def log(a) -> Tensor:
    a = _coerce(a)
    out = np.log(a.array)

    def bw(g):
        _accumulate(a, g / a.array)

    return _make(out, (a,), bw, "log")


def exp(a) -> Tensor:
    a = _coerce(a)
    out = np.exp(a.array)

    def bw(g):
        _accumulate(a, g * out)

    return _make(out, (a,), bw, "exp")


def softplus(a) -> Tensor:
    """Smooth rectifier log(1 + e^x), computed without overflow."""
    a = _coerce(a)
    out = np.logaddexp(0.0, a.array)

    def bw(g):
        # derivative is the logistic sigmoid, written via tanh for stability
        _accumulate(a, g * (0.5 * (1.0 + np.tanh(0.5 * a.array))))

    return _make(out, (a,), bw, "softplus")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    shape = tuple(shape)
    out = a.array.reshape(shape)

    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(out, (a,), bw, "reshape")


def transpose(a) -> Tensor:
    """Swap the last two axes (plain transpose for rank-2)."""
    a = _coerce(a)
    if a.ndim < 2:
        raise ShapeError("transpose needs rank >= 2")
    out = np.swapaxes(a.array, -1, -2)

    def bw(g):
        _accumulate(a, np.swapaxes(g, -1, -2))

    return _make(out, (a,), bw, "transpose")


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`."""
    a = _coerce(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.array[idx]

    def bw(g):
        full = np.zeros_like(a.array)
        full[idx] = g
        _accumulate(a, full)

    return _make(out, (a,), bw, "narrow")


def stack_last(tensors) -> Tensor:
    """Stack same-shape tensors along a new trailing axis."""
    ts = [_coerce(t) for t in tensors]
    out = np.stack([t.array for t in ts], axis=-1)
    if out.ndim > _MAX_RANK:
        raise ShapeError("stack would exceed max rank")

    def bw(g):
        for k, t in enumerate(ts):
            _accumulate(t, g[..., k])

    return _make(out, tuple(ts), bw, "stack_last")


def take_rows(table, indices) -> Tensor:
    """Gather rows of a rank-2 table; gradient scatter-adds back."""
    table = _coerce(table)
    if table.ndim != 2:
        raise ShapeError("take_rows expects a rank-2 table")
    idx = np.asarray(indices, dtype=np.int64)
    out = table.array[idx]

    def bw(g):
        full = np.zeros_like(table.array)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        _accumulate(table, full)

    return _make(out, (table,), bw, "take_rows")


def take_elements(a, rows, cols) -> Tensor:
    """Gather a[rows[k], cols[k]] for each k from a rank-2 tensor."""
    a = _coerce(a)
    if a.ndim != 2:
        raise ShapeError("take_elements expects a rank-2 tensor")
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    out = a.array[r, c]

    def bw(g):
        full = np.zeros_like(a.array)
        np.add.at(full, (r, c), g)
        _accumulate(a, full)

    return _make(out, (a,), bw, "take_elements")


def scatter_rows(values, positions, n_rows: int) -> Tensor:
    """Place rank-2 `values` rows at `positions` in an (n_rows, D) zero tensor."""
    values = _coerce(values)
    if values.ndim != 2:
        raise ShapeError("scatter_rows expects rank-2 values")
    pos = np.asarray(positions, dtype=np.int64)
    out = np.zeros((n_rows, values.shape[1]), dtype=np.float64)
    np.add.at(out, pos, values.array)

    def bw(g):
        _accumulate(values, g[pos])

    return _make(out, (values,), bw, "scatter_rows")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = a.array.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(gg, a.shape).copy())

    return _make(out, (a,), bw, "sum")


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    n = a.array.size if axis is None else a.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# stable probability primitives
# ---------------------------------------------------------------------------

def softmax_rows(m, temperature: float = 1.0, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax over the last axis with max-subtraction.

    `temperature` divides the logits before normalization. `mask` is an
    optional boolean array broadcastable to the input; False positions get
    exactly zero probability and receive zero gradient. A fully masked row is
    an error.
    """
    if isinstance(temperature, Tensor):
        raise ParameterError("temperature must be a python number; divide by a tensor upstream")
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    m = _coerce(m)
    x = m.array / float(temperature)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise ValidationError("softmax row is fully masked")
        x = np.where(mask, x, -np.inf)
    rowmax = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - rowmax)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(m, (y * (g - inner)) / float(temperature))

    return _make(y, (m,), bw, "softmax_rows")


def log_softmax_rows(m, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    m = _coerce(m)
    x = m.array / float(temperature)
    rowmax = np.max(x, axis=-1, keepdims=True)
    shifted = x - rowmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True)) + rowmax
    out = x - lse

    def bw(g):
        soft = np.exp(out)
        _accumulate(m, (g - soft * g.sum(axis=-1, keepdims=True)) / float(temperature))

    return _make(out, (m,), bw, "log_softmax_rows")


def logsumexp_last(a, mask: np.ndarray | None = None) -> Tensor:
    """log(sum(exp(x))) over the last axis; masked lanes are excluded."""
    a = _coerce(a)
    x = a.array
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise ValidationError("logsumexp row is fully masked")
        x = np.where(mask, x, -np.inf)
    rowmax = np.max(x, axis=-1)
    e = np.exp(x - rowmax[..., None])
    s = e.sum(axis=-1)
    out = rowmax + np.log(s)

    def bw(g):
        _accumulate(a, g[..., None] * (e / s[..., None]))

    return _make(out, (a,), bw, "logsumexp_last")


def log_where_positive(a, mask: np.ndarray) -> Tensor:
    """Elementwise log on `mask` positions, 0.0 elsewhere.

    Intended for probability matrices with structural zeros: downstream masked
    softmax never reads the filled positions, and their gradient is zero.
    """
    a = _coerce(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, np.log(np.where(mask, a.array, 1.0)), 0.0)

    def bw(g):
        _accumulate(a, np.where(mask, g / np.where(mask, a.array, 1.0), 0.0))

    return _make(out, (a,), bw, "log_where_positive")


def entropy(p) -> float:
    """Shannon entropy in nats of a probability vector, with 0*log(0) = 0.

    The input must be entrywise nonnegative and sum to 1 within 1e-9.
    """
    arr = _as_array(p).reshape(-1)
    if arr.size == 0:
        raise ValidationError("entropy of an empty vector")
    if np.any(arr < 0):
        raise ValidationError("entropy input has negative entries")
    total = arr.sum()
    if abs(total - 1.0) > 1e-9:
        raise ValidationError(f"entropy input sums to {total!r}, not 1")
    nz = arr[arr > 0]
    return float(-(nz * np.log(nz)).sum())


def entropy_rows(p) -> np.ndarray:
    """Per-row entropy in nats of a stack of probability vectors (validated)."""
    arr = _as_array(p)
    rows = arr.reshape(-1, arr.shape[-1])
    if np.any(rows < 0):
        raise ValidationError("entropy input has negative entries")
    sums = rows.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise ValidationError("entropy input rows do not sum to 1")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(rows > 0, rows * np.log(np.where(rows > 0, rows, 1.0)), 0.0)
    return -terms.sum(axis=-1).reshape(arr.shape[:-1])


def log_gaussian_isotropic(u, mean, sigma: float) -> float:
    """Log-density of an isotropic Gaussian N(mean, sigma^2 I) at u."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    uv = _as_array(u).reshape(-1)
    mv = _as_array(mean).reshape(-1)
    if uv.shape != mv.shape:
        raise ShapeError(f"dimension mismatch {uv.shape} vs {mv.shape}")
    d = uv.size
    resid = uv - mv
    return float(-0.5 * d * math.log(2.0 * math.pi * sigma * sigma)
                 - float(resid @ resid) / (2.0 * sigma * sigma))


# ---------------------------------------------------------------------------
# linear algebra and composite layers
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over one leading batch axis."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.array @ b.array

    def bw(g):
        _accumulate(a, _unbroadcast(g @ np.swapaxes(b.array, -1, -2), a.shape))
        _accumulate(b, _unbroadcast(np.swapaxes(a.array, -1, -2) @ g, b.shape))

    return _make(out, (a, b), bw, "matmul")


def matvec(w, v) -> Tensor:
    """w @ v for a rank-2 matrix and a rank-1 vector."""
    w, v = _coerce(w), _coerce(v)
    if w.ndim != 2 or v.ndim != 1:
        raise ShapeError("matvec expects rank-2 @ rank-1")
    return reshape(matmul(w, reshape(v, (v.shape[0], 1))), (w.shape[0],))


def layer_norm_rows(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    mu = x.array.mean(axis=-1, keepdims=True)
    centered = x.array - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.array + bias.array

    def bw(g):
        d = x.shape[-1]
        _accumulate(bias, _unbroadcast(g, bias.shape))
        _accumulate(gain, _unbroadcast(g * xhat, gain.shape))
        dxhat = g * gain.array
        term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / d
        _accumulate(x, inv * term)

    return _make(out, (x, gain, bias), bw, "layer_norm_rows")


def l2_normalize_rows(x) -> Tensor:
    """Scale each row to unit L2 norm; all-zero rows stay zero."""
    x = _coerce(x)
    norm = np.sqrt((x.array * x.array).sum(axis=-1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    y = x.array / safe

    def bw(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(x, np.where(norm > 0, (g - y * inner) / safe, 0.0))

    return _make(y, (x,), bw, "l2_normalize_rows")


def cross_entropy_mean(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    logits = _coerce(logits)
    if logits.ndim != 2:
        raise ShapeError("cross_entropy_mean expects rank-2 logits")
    tgt = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if tgt.shape != (n,):
        raise ShapeError("targets must be one id per logit row")
    x = logits.array
    rowmax = x.max(axis=-1, keepdims=True)
    shifted = x - rowmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    out = -logp[np.arange(n), tgt].mean()

    def bw(g):
        soft = np.exp(logp)
        soft[np.arange(n), tgt] -= 1.0
        _accumulate(logits, soft * (g / n))

    return _make(np.asarray(out), (logits,), bw, "cross_entropy_mean")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def tensor_to_bytes(arr: np.ndarray) -> bytes:
    """Row-major little-endian float64 payload."""
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def tensor_from_bytes(raw: bytes, shape) -> np.ndarray:
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return arr.reshape(tuple(shape))
