"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Just enough machinery to train adapters on a tiny transformer: matmul,
elementwise arithmetic, softmax/layer_norm/gelu, embedding lookup and
cross-entropy. No broadcasting anywhere on the public surface; shapes
must match exactly (scalars go through `scale`).

Gradients are recorded only while a Tape is active, so evaluation code
pays nothing for autodiff. A tape and its tensors belong to one thread;
frozen tensors may be shared read-only across threads.
"""

import threading

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A float64 ndarray plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


class _Record:
    __slots__ = ("out_id", "inputs", "backward")

    def __init__(self, out_id, inputs, backward):
        self.out_id = out_id
        self.inputs = inputs
        self.backward = backward


_TLS = threading.local()


def _tape_stack():
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


class Tape:
    """Records operations (thread-local) so backward() can replay them."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(out_data, inputs, backward_fn):
    """Wrap out_data in a Tensor and record the op if a tape is listening."""
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(_Record(id(out), tuple(inputs), backward_fn))
    return out


def custom_op(out_data, inputs, backward_fn):
    """Register a hand-written op. backward_fn(g) returns one gradient
    array (or None) per input, aligned with `inputs`."""
    for t in inputs:
        if not isinstance(t, Tensor):
            raise ContractError("custom_op inputs must be Tensors")
    return _emit(out_data, inputs, backward_fn)


def backward(loss):
    """Reverse sweep from a scalar loss; accumulates into .grad buffers."""
    tape = _active_tape()
    if tape is None:
        raise ContractError("backward() requires an active Tape")
    if not isinstance(loss, Tensor) or loss.data.shape != ():
        raise ContractError("backward() expects a scalar Tensor loss")
    if not any(r.out_id == id(loss) for r in tape.records):
        raise ContractError("loss is not an output recorded on the active tape")

    adjoint = {id(loss): np.ones((), dtype=np.float64)}
    holders = {}
    for rec in reversed(tape.records):
        g = adjoint.get(rec.out_id)
        if g is None:
            continue
        grads = rec.backward(g)
        for t, gi in zip(rec.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.data.shape:
                raise ContractError(
                    f"backward rule produced shape {gi.shape} for input of shape {t.data.shape}"
                )
            key = id(t)
            holders[key] = t
            prev = adjoint.get(key)
            # out-of-place: grads may alias each other (e.g. add returns g twice)
            adjoint[key] = gi if prev is None else prev + gi

    for key, t in holders.items():
        g = adjoint[key]
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# ops


def _check(t, name):
    if not isinstance(t, Tensor):
        raise ContractError(f"{name} expects Tensor arguments, got {type(t).__name__}")


def matmul(a, b):
    """a @ b. Supports 2-D x 2-D, N-D x 2-D (shared right factor), and
    stacked N-D x N-D with identical leading dims."""
    _check(a, "matmul")
    _check(b, "matmul")
    ad, bd = a.data, b.data
    ok = ad.ndim >= 2 and bd.ndim >= 2 and ad.shape[-1] == bd.shape[-2]
    if ok and bd.ndim != 2:
        ok = ad.ndim == bd.ndim and ad.shape[:-2] == bd.shape[:-2]
    if not ok:
        raise DimensionError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    out = ad @ bd

    def bw(g):
        if bd.ndim == 2:
            ga = g @ bd.T
            m, n = bd.shape
            gb = ad.reshape(-1, m).T @ g.reshape(-1, n)
        else:
            ga = g @ bd.swapaxes(-1, -2)
            gb = ad.swapaxes(-1, -2) @ g
        return ga, gb

    return _emit(out, (a, b), bw)


def _binary(name, a, b):
    _check(a, name)
    _check(b, name)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{name}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a, b):
    _binary("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _binary("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _binary("mul", a, b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def mask(a, m):
    """Elementwise a * m where m is a constant 0/1 matrix; gradient at
    masked positions is zero and never flows into m."""
    _check(a, "mask")
    md = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    if isinstance(m, Tensor) and m.requires_grad:
        raise ContractError("mask operand m must not require grad")
    if a.data.shape != md.shape:
        raise DimensionError(f"mask: shape mismatch {a.data.shape} vs {md.shape}")
    return _emit(a.data * md, (a,), lambda g: (g * md,))


def scale(a, c):
    _check(a, "scale")
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def tsum(a):
    """Sum all entries to a scalar."""
    _check(a, "tsum")
    ad = a.data
    return _emit(np.sum(ad), (a,), lambda g: (g * np.ones_like(ad),))


def softmax(a):
    """Row-stable softmax over the last axis."""
    _check(a, "softmax")
    ad = a.data
    if ad.ndim < 1:
        raise DimensionError("softmax: needs at least one axis")
    shifted = ad - ad.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (a,), bw)


def layer_norm(x, gain=None, bias=None, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then apply an
    optional 1-D affine (gain, bias) of matching width."""
    _check(x, "layer_norm")
    if eps <= 0:
        raise ContractError("layer_norm: eps must be > 0")
    xd = x.data
    n = xd.shape[-1]
    for t, label in ((gain, "gain"), (bias, "bias")):
        if t is not None:
            _check(t, "layer_norm")
            if t.data.shape != (n,):
                raise DimensionError(f"layer_norm: {label} shape {t.data.shape}, want ({n},)")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    inputs = [x] + [t for t in (gain, bias) if t is not None]
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        dxhat = g * gain.data if gain is not None else g
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
        )
        grads = [dx]
        if gain is not None:
            grads.append(np.sum(g * xhat, axis=lead))
        if bias is not None:
            grads.append(np.sum(g, axis=lead))
        return tuple(grads)

    return _emit(out, tuple(inputs), bw)


def gelu(x):
    """Exact (erf-based) GELU."""
    _check(x, "gelu")
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * phi

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (phi + xd * pdf),)

    return _emit(out, (x,), bw)


def embedding_lookup(ids, table):
    """Gather rows of table (V x d) by integer ids of any shape."""
    _check(table, "embedding_lookup")
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("embedding_lookup: ids must be integers")
    if table.data.ndim != 2:
        raise DimensionError(f"embedding_lookup: table must be 2-D, got {table.data.shape}")
    v = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"embedding_lookup: id out of range [0, {v})")
    td = table.data
    out = td[ids]

    def bw(g):
        buf = np.zeros_like(td)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, td.shape[1]))
        return (buf,)

    return _emit(out, (table,), bw)


def cross_entropy(logits, labels, ignore_index=-1):
    """Mean negative log-likelihood over the last axis of logits.

    labels has logits' leading shape; positions equal to ignore_index do
    not contribute to the loss or the gradient.
    """
    _check(logits, "cross_entropy")
    ld = logits.data
    if ld.ndim < 2:
        raise DimensionError(f"cross_entropy: logits must be at least 2-D, got {ld.shape}")
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContractError("cross_entropy: labels must be integers")
    if labels.shape != ld.shape[:-1]:
        raise DimensionError(
            f"cross_entropy: labels shape {labels.shape}, want {ld.shape[:-1]}"
        )
    v = ld.shape[-1]
    flat_labels = labels.reshape(-1)
    valid = flat_labels != ignore_index
    bad = valid & ((flat_labels < 0) | (flat_labels >= v))
    if bad.any():
        raise IndexError(f"cross_entropy: label out of range [0, {v})")
    k = int(valid.sum())
    if k == 0:
        raise ContractError("cross_entropy: no supervised positions")

    flat = ld.reshape(-1, v)
    m = flat.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(flat - m).sum(axis=-1, keepdims=True))
    logp = flat - lse
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, flat_labels[rows]].sum() / k

    def bw(g):
        grad = np.exp(logp)
        grad[~valid] = 0.0
        grad[rows, flat_labels[rows]] -= 1.0
        grad /= k
        return ((float(g) * grad).reshape(ld.shape),)

    return _emit(np.float64(loss), (logits,), bw)


def reshape(a, shape):
    _check(a, "reshape")
    ad = a.data
    try:
        out = ad.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: {ad.shape} -> {shape}: {e}") from None
    return _emit(out, (a,), lambda g: (g.reshape(ad.shape),))


def transpose(a, axes):
    _check(a, "transpose")
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {a.data.shape}")
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def leading_slice(a, rows=None, cols=None):
    """View of the leading rows x cols block of a 2-D tensor.

    The forward value shares storage with the parent (weight sharing);
    the backward rule embeds the gradient into zeros of the full shape,
    so gradients flow only into the activated slice.
    """
    _check(a, "leading_slice")
    ad = a.data
    if ad.ndim != 2:
        raise DimensionError(f"leading_slice: needs a 2-D tensor, got {ad.shape}")
    m, n = ad.shape
    r = m if rows is None else int(rows)
    c = n if cols is None else int(cols)
    if not (1 <= r <= m and 1 <= c <= n):
        raise DimensionError(f"leading_slice: ({r}, {c}) out of range for {ad.shape}")
    if r == m and c == n:
        out = ad
    else:
        out = ad[:r, :c]

    def bw(g):
        buf = np.zeros_like(ad)
        buf[:r, :c] = g
        return (buf,)

    return _emit(out, (a,), bw)


# ---------------------------------------------------------------------------
# randomness


def rng_stream(seed, *stream_ids):
    """Counter-based deterministic RNG stream.

    Same (seed, *stream_ids) gives the same sequence on every platform;
    different stream ids give statistically independent streams, so
    parallel consumers can draw without coordinating.
    """
    key = tuple(int(s) for s in stream_ids)
    if any(s < 0 for s in key) or int(seed) < 0:
        raise ContractError("rng_stream: seed and stream ids must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
