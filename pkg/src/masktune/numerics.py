"""Dense float64 tensors with a reverse-mode tape.

Only the handful of primitives the masked encoder needs are provided, each
with a hand-written backward. Usage::

    with GradTape() as tape:
        w = Tensor(weights, requires_grad=True)
        loss = softmax_cross_entropy(linear(x, w), labels)
    (gw,) = tape.gradient(loss, [w])

A tape may be queried more than once, so the CE and KL gradients of one
forward pass come from the same recording.
"""

import math
import threading

import numpy as np


class DimensionError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class Tensor:
    """Float64 array plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of the primitives evaluated while the tape is active."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def gradient(self, target, sources):
        """Gradients of scalar ``target`` wrt each tensor in ``sources``.

        Sources that the target does not depend on get a zero array.
        """
        if target.data.size != 1:
            raise DimensionError("gradient target must be a scalar")
        grads = {id(target): np.ones_like(target.data)}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.out), None)
            if g_out is None:
                continue
            for parent, g in zip(node.parents, node.backward(g_out)):
                if g is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _record(out, parents, backward):
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append(_Node(out, parents, backward))
    return out


# -- primitives ---------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), backward)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def linear(x, w, b=None):
    """``x @ w.T + b`` over the last axis of ``x``; ``w`` is [out, in]."""
    x, w = as_tensor(x), as_tensor(w)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear shape mismatch: x{x.shape}, w{w.shape}")
    y = x.data @ w.data.T
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise DimensionError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")
        y = y + b.data
        parents = (x, w, b)
    out = Tensor(y)

    def backward(g):
        gx = g @ w.data
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record(out, parents, backward)


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Normalize the last axis; optional affine ``gamma * xhat + beta``."""
    x = as_tensor(x)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    parents = [x]
    y = xhat
    if gamma is not None:
        gamma, beta = as_tensor(gamma), as_tensor(beta)
        if gamma.shape != (d,) or beta.shape != (d,):
            raise DimensionError("layer_norm affine parameters must match the last axis")
        y = xhat * gamma.data + beta.data
        parents += [gamma, beta]
    out = Tensor(y)

    def backward(g):
        gh = g * gamma.data if gamma is not None else g
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                     - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma is None:
            return (gx,)
        flat = (-1, d)
        return gx, (g * xhat).reshape(flat).sum(axis=0), g.reshape(flat).sum(axis=0)

    return _record(out, tuple(parents), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh-approximated GELU."""
    x = as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * v * (1.0 + t))

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _record(out, (x,), backward)


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def scaled_dot_product_attention(q, k, v, heads=1):
    """Multi-head ``softmax(Q K^T / sqrt(d_head)) V`` on [B, T, d] inputs."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.data.ndim == 2 and k.data.ndim == 2 and v.data.ndim == 2:
        single = scaled_dot_product_attention(*(_reshape(t, (1,) + t.shape) for t in (q, k, v)),
                                              heads=heads)
        return _reshape(single, single.shape[1:])
    if not (q.shape == k.shape == v.shape) or q.data.ndim != 3:
        raise DimensionError(f"attention expects equal [B, T, d] inputs, got {q.shape}, {k.shape}, {v.shape}")
    B, T, d = q.shape
    if heads < 1 or d % heads:
        raise DimensionError(f"head count {heads} must divide model width {d}")
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)

    def split(a):
        return a.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    att = softmax(qh @ kh.transpose(0, 1, 3, 2) * scale)
    ctx = att @ vh
    out = Tensor(ctx.transpose(0, 2, 1, 3).reshape(B, T, d))

    def backward(g):
        gctx = split(g)
        gatt = gctx @ vh.transpose(0, 1, 3, 2)
        gvh = att.transpose(0, 1, 3, 2) @ gctx
        gs = att * (gatt - (gatt * att).sum(axis=-1, keepdims=True)) * scale
        gqh = gs @ kh
        gkh = gs.transpose(0, 1, 3, 2) @ qh

        def merge(a):
            return a.transpose(0, 2, 1, 3).reshape(B, T, d)

        return merge(gqh), merge(gkh), merge(gvh)

    return _record(out, (q, k, v), backward)


def mean_tokens(x):
    """Mean over the token axis: [B, T, d] -> [B, d]."""
    x = as_tensor(x)
    T = x.shape[1]
    out = Tensor(x.data.mean(axis=1))

    def backward(g):
        return (np.repeat(g[:, None, :] / T, T, axis=1),)

    return _record(out, (x,), backward)


def l2_normalize(x, eps=1e-12):
    """Row-wise unit normalization of a [B, d] tensor."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateInputError("cannot normalize a zero-norm feature vector")
    y = x.data / norm
    out = Tensor(y)

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _record(out, (x,), backward)


def cosine_logits(f, prototypes, tau):
    """``f @ prototypes.T / tau`` for unit-norm ``f`` rows and prototype rows.

    ``tau`` is a scalar tensor so surrogate pretraining can learn it.
    """
    f, tau = as_tensor(f), as_tensor(tau)
    G = np.asarray(prototypes, dtype=np.float64)
    t = float(tau.data)
    cos = f.data @ G.T
    out = Tensor(cos / t)

    def backward(g):
        return (g @ G) / t, np.asarray(-(g * cos).sum() / (t * t))

    return _record(out, (f, tau), backward)


def _check_labels(labels, n, C):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise IndexError(f"label out of range [0, {C})")
    return labels.astype(np.int64)


def softmax_cross_entropy(logits, labels):
    """Batch-mean cross entropy; gradient is ``(softmax - onehot) / B``."""
    logits = as_tensor(logits)
    if logits.data.ndim == 1:
        logits = _reshape(logits, (1, -1))
    B, C = logits.shape
    labels = _check_labels(labels, B, C)
    logp = log_softmax(logits.data)
    out = Tensor(-logp[np.arange(B), labels].mean())

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(B), labels] -= 1.0
        return (grad * (g / B),)

    return _record(out, (logits,), backward)


def kl_divergence(p_ref, logits_model):
    """Batch-mean ``KL(p_ref || softmax(logits_model))``.

    Zero entries of ``p_ref`` contribute nothing. The reference is a constant.
    """
    logits = as_tensor(logits_model)
    p = np.asarray(p_ref.data if isinstance(p_ref, Tensor) else p_ref, dtype=np.float64)
    if p.ndim == 1:
        p = p[None]
    if logits.data.ndim == 1:
        logits = _reshape(logits, (1, -1))
    if p.shape != logits.shape:
        raise DimensionError(f"reference {p.shape} vs logits {logits.shape}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("reference rows must be non-negative and sum to 1")
    B = p.shape[0]
    logq = log_softmax(logits.data)
    pos = p > 0
    terms = np.zeros_like(p)
    terms[pos] = p[pos] * (np.log(p[pos]) - logq[pos])
    out = Tensor(terms.sum() / B)

    # same softmax as the reference, so identical logits give an exactly zero gradient
    q = softmax(logits.data)

    def backward(g):
        return ((q - p) * (g / B),)

    return _record(out, (logits,), backward)


def _reshape(x, shape):
    out = Tensor(x.data.reshape(shape))
    orig = x.shape
    return _record(out, (x,), lambda g: (g.reshape(orig),))


reshape = _reshape


def cosine_similarity(f, g):
    f = np.asarray(f, dtype=np.float64).ravel()
    g = np.asarray(g, dtype=np.float64).ravel()
    if f.shape != g.shape:
        raise DimensionError("cosine_similarity needs equal-length vectors")
    nf, ng = np.linalg.norm(f), np.linalg.norm(g)
    if nf == 0.0 or ng == 0.0:
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    return float(np.clip(f @ g / (nf * ng), -1.0, 1.0))


def finite_difference_grad(f, x, h=1e-6):
    """Central differences of scalar ``f`` at array ``x``, one element at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = np.asarray(f(x)).item()
        flat[i] = orig - h
        fm = np.asarray(f(x)).item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric):
    """``max|a - n| / max|n|``: error relative to the gradient's own scale."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-300)
    return float(np.abs(analytic - numeric).max() / scale)
