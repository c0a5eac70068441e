"""Reverse-mode automatic differentiation over dense float64 tensors.

A Tape records operations in execution order while it is active; backward()
replays the record once, in reverse, filling the grad slot of every
differentiable ancestor of the loss. One tape per training step, one thread
per tape.

Broadcasting is deliberately strict: binary ops require equal rank and allow
only size-1 axes to stretch.
"""

import threading
import weakref

import numpy as np

from .eigen import jacobi_eigh
from .errors import NonFiniteValueError, ShapeMismatchError

_GELU_C = np.sqrt(2.0 / np.pi)
_ACTIVE = threading.local()


def _active_tape():
    return getattr(_ACTIVE, "tape", None)


class Tape:
    """Ordered operation record for one forward/backward cycle."""

    def __init__(self):
        self._nodes = []
        self._backward_done = False

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _ACTIVE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.tape = None
        return False

    def record(self, out, inputs, backward):
        # Weak back-reference: tapes own their tensors, never the reverse,
        # so a finished step's graph dies by refcount, not cyclic GC.
        out._tape_ref = weakref.ref(self)
        out._node_id = len(self._nodes)
        self._nodes.append((out, inputs, backward))

    def reset(self):
        self._nodes.clear()
        self._backward_done = False

    def rewind(self):
        """Re-arm backward while keeping the recorded graph.

        For multi-objective gradient probes: run backward on one scalar,
        harvest gradients, zero them, rewind, run backward on another
        scalar from the same forward pass.
        """
        self._backward_done = False

    def __len__(self):
        return len(self._nodes)


class Tensor:
    """Dense float64 array with an optional gradient slot.

    Tensors with requires_grad=True participate in differentiation; their
    .grad accumulates across backward passes until zero_grad().
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape_ref", "_node_id")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tape_ref = None
        self._node_id = None

    @property
    def _tape(self):
        return self._tape_ref() if self._tape_ref is not None else None

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

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars route to the *_scalar ops.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scalar_mul(self, 1.0 / float(other))

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self):
        return sum_all(self)


def _result(value, inputs, backward_fn):
    """Wrap an op result, recording it when a tape is active and needed."""
    out = Tensor(value)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, backward_fn)
    return out


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        # Own the buffer: closures may hand out views of other gradients.
        tensor.grad = np.array(grad, dtype=np.float64)
    else:
        tensor.grad += grad


def backward(loss):
    """Populate grad slots of all differentiable ancestors of a scalar loss."""
    if loss.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ValueError("loss is not recorded on a tape")
    if tape._backward_done:
        raise RuntimeError("backward already ran on this tape; reset() first")
    tape._backward_done = True

    # Grads local to this pass keyed by node id; leaf grads go to .grad.
    # Entries are never mutated in place: backward rules may return views or
    # share one array between two parents.
    node_grads = {loss._node_id: np.ones((), dtype=np.float64)}
    for out, inputs, backward_fn in reversed(tape._nodes):
        gout = node_grads.pop(out._node_id, None)
        if gout is None:
            continue
        _accumulate(out, gout)
        for tensor, grad in zip(inputs, backward_fn(gout)):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor._tape is tape and tensor._node_id is not None:
                nid = tensor._node_id
                if nid in node_grads:
                    node_grads[nid] = node_grads[nid] + grad
                else:
                    node_grads[nid] = grad
            else:
                _accumulate(tensor, grad)


def _check_binary(op, a, b):
    if a.ndim != b.ndim:
        raise ShapeMismatchError(op, a.shape, b.shape)
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeMismatchError(op, a.shape, b.shape)


def _unbroadcast(grad, shape):
    """Sum a gradient back over axes the forward pass stretched from size 1."""
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b):
    _check_binary("add", a, b)
    need_a, need_b = a.requires_grad, b.requires_grad
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g, a.shape) if need_a else None,
            _unbroadcast(g, b.shape) if need_b else None,
        ),
    )


def sub(a, b):
    _check_binary("sub", a, b)
    need_a, need_b = a.requires_grad, b.requires_grad
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g, a.shape) if need_a else None,
            _unbroadcast(-g, b.shape) if need_b else None,
        ),
    )


def mul(a, b):
    _check_binary("mul", a, b)
    need_a, need_b = a.requires_grad, b.requires_grad
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if need_a else None,
            _unbroadcast(g * a.data, b.shape) if need_b else None,
        ),
    )


def div(a, b):
    _check_binary("div", a, b)
    return _result(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def scalar_mul(a, c):
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a, c):
    c = float(c)
    return _result(a.data + c, (a,), lambda g: (g,))


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    for da, db in zip(a.shape[:-2], b.shape[:-2]):
        if da != db and da != 1 and db != 1:
            raise ShapeMismatchError("matmul", a.shape, b.shape)

    need_a, need_b = a.requires_grad, b.requires_grad

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if need_b else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), bwd)


def transpose(a):
    if a.ndim < 2:
        raise ValueError(f"transpose needs ndim >= 2, got {a.ndim}")
    return _result(
        np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),)
    )


def permute(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),)
    )


def reshape(a, shape):
    old_shape = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old_shape),))


def relu(a):
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def gelu(a):
    """GELU with the tanh approximation (GPT-2 convention)."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))

    def bwd(g):
        sech2 = 1.0 - th * th
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * sech2 * d_inner),)

    return _result(0.5 * x * (1.0 + th), (a,), bwd)


def log(a):
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def pow_const(a, p):
    p = float(p)
    return _result(
        a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),)
    )


def clip_min(a, floor):
    """max(x, floor) for a scalar floor; gradient is zero on the clipped part."""
    floor = float(floor)
    mask = a.data > floor
    return _result(np.maximum(a.data, floor), (a,), lambda g: (g * mask,))


def abs_(a):
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,))


def rows(a, start, stop):
    """Narrow along the leading axis; gradient scatters back into place."""
    if not (0 <= start < stop <= a.shape[0]):
        raise ValueError(f"invalid row range [{start}, {stop}) for shape {a.shape}")
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _result(a.data[start:stop].copy(), (a,), bwd)


def sum_all(a):
    shape = a.shape
    return _result(
        np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),)
    )


def mean_all(a):
    n = a.data.size
    shape = a.shape
    return _result(
        np.asarray(a.data.mean()),
        (a,),
        lambda g: (np.broadcast_to(g / n, shape).copy(),),
    )


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatchError("layer_norm", x.shape, gain.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bwd(g):
        dxhat = g * gain.data
        # Compact form: dx = inv/d * (d*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
        s1 = dxhat.sum(axis=-1, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
        dx = (inv / d) * (d * dxhat - s1 - xhat * s2)
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        return dx, dgain, dbias

    return _result(xhat * gain.data + bias.data, (x, gain, bias), bwd)


def embedding(table, ids):
    """Row lookup; ids is a plain integer array, gradients scatter-add."""
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ValueError(
            f"embedding id out of range [0, {table.shape[0]}): "
            f"min {ids.min()}, max {ids.max()}"
        )

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(table.data[ids], (table,), bwd)


def softmax(a):
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _result(y, (a,), bwd)


def softmax_cross_entropy(logits, targets, weights=None):
    """Mean negative log-likelihood of integer targets under softmax logits.

    logits: (n, classes); targets: (n,) ints; weights: optional (n,) loss
    weights (zero to mask a position). Returns a scalar.
    """
    if logits.ndim != 2:
        raise ShapeMismatchError("softmax_cross_entropy", logits.shape, ())
    targets = np.asarray(targets)
    n, c = logits.shape
    if targets.shape != (n,):
        raise ShapeMismatchError("softmax_cross_entropy", logits.shape, targets.shape)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("softmax_cross_entropy: weights sum to zero")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    logp_target = shifted[np.arange(n), targets] - logz
    loss = -(w * logp_target).sum() / total

    def bwd(g):
        p = np.exp(shifted - logz[:, None])
        p[np.arange(n), targets] -= 1.0
        return (g * p * (w / total)[:, None],)

    return _result(np.asarray(loss), (logits,), bwd)


def gram(r):
    """Gram matrix R @ R^T of a 2-D representation matrix."""
    if r.ndim != 2:
        raise ShapeMismatchError("gram", r.shape, ())

    def bwd(g):
        return ((g + g.T) @ r.data,)

    return _result(r.data @ r.data.T, (r,), bwd)


def trace(a):
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatchError("trace", a.shape, ())
    n = a.shape[0]
    return _result(
        np.asarray(np.trace(a.data)), (a,), lambda g: (g * np.eye(n),)
    )


def frobenius_norm_sq(a):
    return _result(
        np.asarray(np.sum(a.data * a.data)), (a,), lambda g: (2.0 * g * a.data,)
    )


def symmetric_eigenvalues(k, sym_tol=1e-8):
    """Eigenvalues of a symmetric PSD matrix, descending.

    Gradient uses the symmetric perturbation rule dLambda_i = v_i^T dK v_i.
    For clustered eigenvalues the returned basis within a cluster is
    arbitrary, so gradients are only guaranteed for spectrum-symmetric
    consumers (entropy-like functions), which is all this toolkit needs.
    """
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ShapeMismatchError("symmetric_eigenvalues", k.shape, ())
    scale = max(1.0, float(np.abs(k.data).max()))
    if np.abs(k.data - k.data.T).max() > sym_tol * scale:
        raise ValueError("symmetric_eigenvalues: input is not symmetric")
    w, v = jacobi_eigh(k.data)

    def bwd(g):
        return ((v * g) @ v.T,)

    return _result(w, (k,), bwd)


def grad_check(f, point, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    f maps a Tensor to a scalar Tensor. The error metric per coordinate is
    |analytic - numeric| / max(1, |numeric|); the max over coordinates is
    returned. Non-finite values abort with the offending coordinate.
    """
    x0 = np.array(point, dtype=np.float64)

    leaf = Tensor(x0.copy(), requires_grad=True)
    with Tape():
        out = f(leaf)
        backward(out)
    analytic = leaf.grad
    if analytic is None:
        raise ValueError("function does not depend on the input point")

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    base = x0.reshape(-1)
    for i in range(base.size):
        saved = base[i]
        base[i] = saved + step
        hi = float(f(Tensor(x0)).data)
        base[i] = saved - step
        lo = float(f(Tensor(x0)).data)
        base[i] = saved
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteValueError(f"non-finite value at coordinate {i}")
        flat[i] = (hi - lo) / (2.0 * step)

    if not np.all(np.isfinite(analytic)):
        bad = int(np.argwhere(~np.isfinite(analytic.reshape(-1)))[0])
        raise NonFiniteValueError(f"non-finite analytic gradient at coordinate {bad}")
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max())
