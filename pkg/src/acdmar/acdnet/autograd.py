"""A small tape-based reverse-mode differentiator over numpy arrays.

Only the operations the unrolled network needs are provided.  Each op builds
a :class:`Tensor` whose ``_back`` closure maps the output gradient to the
gradients of its parents; :func:`backward` walks the graph in reverse
topological order.
"""
import numpy as np

from .. import tensor_ops


class Tensor:
    __slots__ = ("value", "grad", "parents", "_back", "requires_grad", "name")

    def __init__(self, value, parents=(), back=None, requires_grad=False, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self._back = back
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, name={self.name})"


def const(value):
    return Tensor(np.asarray(value, dtype=np.float64))


def leaf(value, name=None):
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)


def _wrap(x):
    return x if isinstance(x, Tensor) else const(x)


def _node(value, parents, back):
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(value)
    return Tensor(value, parents, back)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(root):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf that requires it."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._back is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node.parents, node._back(g)):
            if gp is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = gp if k not in grads else grads[k] + gp


# --- elementwise -----------------------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def scale(a, c):
    return _node(a.value * c, (a,), lambda g: (g * c,))


def relu(a):
    on = a.value > 0
    return _node(np.where(on, a.value, 0.0), (a,), lambda g: (g * on,))


def softplus(a):
    v = a.value
    out = np.logaddexp(0.0, v)
    sig = 0.5 * (1.0 + np.tanh(0.5 * v))
    return _node(out, (a,), lambda g: (g * sig,))


def abs_(a):
    s = np.sign(a.value)
    return _node(np.abs(a.value), (a,), lambda g: (g * s,))


def square(a):
    v = a.value
    return _node(v * v, (a,), lambda g: (2.0 * g * v,))


def sum_(a, axis=None):
    shape = a.shape
    out = a.value.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
    return _node(out, (a,), back)


# --- shape -----------------------------------------------------------------

def reshape(a, shape):
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def take(a, idx):
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)
    return _node(a.value[idx], (a,), back)


def concat(tensors, axis):
    tensors = [_wrap(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _node(np.concatenate([t.value for t in tensors], axis=axis), tensors, back)


# --- linear algebra --------------------------------------------------------

def einsum(spec, a, b):
    """Two-operand einsum; every index of an operand must occur in the other or the output."""
    a, b = _wrap(a), _wrap(b)
    ins, out = spec.split("->")
    sa, sb = ins.split(",")

    def back(g):
        ga = np.einsum(f"{out},{sb}->{sa}", g, b.value, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{sa},{out}->{sb}", a.value, g, optimize=True) if b.requires_grad else None
        return ga, gb
    return _node(np.einsum(spec, a.value, b.value, optimize=True), (a, b), back)


def conv2d(x, w, flip=False):
    """Batched same-size cross-correlation; ``flip=True`` makes it a true convolution."""
    x, w = _wrap(x), _wrap(w)
    wv = w.value[..., ::-1, ::-1] if flip else w.value
    wv = np.ascontiguousarray(wv)
    xv = x.value
    kshape = wv.shape[2:]

    def back(g):
        gx = tensor_ops.conv2d_input_grad(g, wv) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = tensor_ops.conv2d_weight_grad(xv, g, kshape)
            if flip:
                gw = np.ascontiguousarray(gw[..., ::-1, ::-1])
        return gx, gw
    return _node(tensor_ops.conv2d(xv, wv), (x, w), back)


def bias2d(x, b):
    """Add a per-channel bias to a (B,C,H,W) tensor."""
    return _node(x.value + b.value[None, :, None, None], (x, b),
                 lambda g: (g, g.sum(axis=(0, 2, 3))))


# --- normalisation ---------------------------------------------------------

def batchnorm2d(x, gamma, beta, state, train, eps=1e-5, momentum=0.1, update_stats=True):
    """Per-channel batch normalisation of a (B,C,H,W) tensor.

    ``state`` is a dict with ``mean``, ``var`` arrays and a ``recorded`` flag.
    Train mode normalises with batch statistics and (optionally) updates the
    running statistics with the unbiased batch variance.
    """
    xv = x.value
    gv, bv = gamma.value[None, :, None, None], beta.value[None, :, None, None]
    if train:
        mu = xv.mean(axis=(0, 2, 3), keepdims=True)
        var = xv.var(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mu) * inv
        if update_stats:
            n = xv.shape[0] * xv.shape[2] * xv.shape[3]
            unbiased = var.reshape(-1) * (n / max(n - 1, 1))
            state["mean"] = (1 - momentum) * state["mean"] + momentum * mu.reshape(-1)
            state["var"] = (1 - momentum) * state["var"] + momentum * unbiased
            state["recorded"] = True

        def back(g):
            gxhat = g * gv
            gx = inv * (gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        mean, var = state["mean"], state["var"]
        if not state.get("recorded", False):
            state["identity_fallback"] = True
            mean, var = np.zeros_like(mean), np.ones_like(var)
        inv = 1.0 / np.sqrt(var[None, :, None, None] + eps)
        xhat = (xv - mean[None, :, None, None]) * inv

        def back(g):
            return g * gv * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    return _node(gv * xhat + bv, (x, gamma, beta), back)


def normalize_columns(K, eps=1e-12):
    """L2-normalise along axis 1 of a (B,d,N) tensor."""
    kv = K.value
    nrm = np.sqrt((kv * kv).sum(axis=1, keepdims=True))
    den = np.maximum(nrm, eps)
    u = kv / den
    live = nrm > eps

    def back(g):
        proj = (g * u).sum(axis=1, keepdims=True)
        return (np.where(live, (g - u * proj) / den, g / den),)
    return _node(u, (K,), back)
