"""Reverse-mode automatic differentiation over dense float64 arrays.

Minimal by design: exactly the primitives the answer/rationale model needs,
each with a hand-written backward closure. Graphs are built eagerly during
the forward pass and walked once, iteratively, by backward(). Everything is
float64; gradient checks at 1e-4 are the project's safety net and float32
would eat most of that budget.
"""

import contextlib

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when a primitive's inputs do not conform to its shape rule."""

    def __init__(self, primitive, *shapes):
        super().__init__(
            "%s: incompatible shapes %s" % (primitive, " vs ".join(str(tuple(s)) for s in shapes))
        )


_GRAD_ENABLED = [True]
_F64 = np.dtype(np.float64)
_LD = np.dtype(np.longdouble)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block. Values still computed."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled():
    return _GRAD_ENABLED[-1]


def _as_f64(x):
    # extended precision is allowed through unchanged: finite-difference
    # probing evaluates the forward in longdouble to keep subtractive
    # cancellation out of the gradient oracle
    a = np.asarray(x)
    if a.dtype == np.longdouble:
        return a
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 ndarray plus the bookkeeping to differentiate through it."""

    __slots__ = ("data", "grad", "_backward", "_parents", "name", "requires_grad")

    def __init__(self, data, parents=(), backward=None, name=None, requires_grad=True):
        # fast path: results of numpy ops arrive as ndarrays already in an
        # accepted dtype, and this constructor sits inside every op
        if type(data) is np.ndarray and (data.dtype == _F64 or data.dtype == _LD):
            self.data = data
        else:
            self.data = _as_f64(data)
        self.grad = None
        if _GRAD_ENABLED[-1]:
            self._parents = tuple(parents)
            self._backward = backward
        else:
            self._parents = ()
            self._backward = None
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = self.name or "tensor"
        return "Tensor(%s, shape=%s)" % (tag, self.data.shape)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, other.scale(-1.0) if isinstance(other, Tensor) else -other)

    def __neg__(self):
        return self.scale(-1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def scale(self, s):
        """Multiply by a python scalar."""
        s = float(s)
        src = self
        out = Tensor(src.data * s, (src,), None)
        if _GRAD_ENABLED[-1]:
            def _bw():
                src._accumulate(out.grad * s)
            out._backward = _bw
        return out

    def mul_const(self, arr):
        """Elementwise product with a non-differentiated array (masks, dropout)."""
        arr = _as_f64(arr)
        val = self.data * arr
        if val.shape != self.data.shape:
            raise ShapeError("mul_const", self.data.shape, arr.shape)
        src = self
        out = Tensor(val, (src,), None)
        if _GRAD_ENABLED[-1]:
            def _bw():
                src._accumulate(out.grad * arr)
            out._backward = _bw
        return out

    # -- shape ops ----------------------------------------------------------

    def reshape(self, shape):
        src = self
        out = Tensor(src.data.reshape(shape), (src,), None)
        if _GRAD_ENABLED[-1]:
            def _bw():
                src._accumulate(out.grad.reshape(src.data.shape))
            out._backward = _bw
        return out

    def narrow(self, axis, start, length):
        """Contiguous slice [start, start+length) along one axis."""
        if not (0 <= start and start + length <= self.data.shape[axis]):
            raise ShapeError("slice", self.data.shape, (axis, start, length))
        idx = [slice(None)] * self.data.ndim
        idx[axis] = slice(start, start + length)
        idx = tuple(idx)
        src = self
        out = Tensor(src.data[idx], (src,), None)
        if _GRAD_ENABLED[-1]:
            def _bw():
                g = np.zeros_like(src.data)
                g[idx] = out.grad
                src._accumulate(g)
            out._backward = _bw
        return out

    # -- pointwise nonlinearities -------------------------------------------

    def tanh(self):
        src = self
        val = np.tanh(src.data)
        out = Tensor(val, (src,), None)
        if _GRAD_ENABLED[-1]:
            def _bw():
                src._accumulate(out.grad * (1.0 - val * val))
            out._backward = _bw
        return out

    def sigmoid(self):
        src = self
        val = 1.0 / (1.0 + np.exp(-src.data))
        out = Tensor(val, (src,), None)
        if _GRAD_ENABLED[-1]:
            def _bw():
                src._accumulate(out.grad * val * (1.0 - val))
            out._backward = _bw
        return out

    def relu(self):
        src = self
        val = np.maximum(src.data, 0.0)
        out = Tensor(val, (src,), None)
        if _GRAD_ENABLED[-1]:
            def _bw():
                src._accumulate(out.grad * (src.data > 0.0))
            out._backward = _bw
        return out

    def log(self):
        src = self
        val = np.log(src.data)
        out = Tensor(val, (src,), None)
        if _GRAD_ENABLED[-1]:
            def _bw():
                src._accumulate(out.grad / src.data)
            out._backward = _bw
        return out

    def exp(self):
        src = self
        val = np.exp(src.data)
        out = Tensor(val, (src,), None)
        if _GRAD_ENABLED[-1]:
            def _bw():
                src._accumulate(out.grad * val)
            out._backward = _bw
        return out

    # -- reductions ---------------------------------------------------------

    def sum(self):
        src = self
        out = Tensor(src.data.sum(), (src,), None)
        if _GRAD_ENABLED[-1]:
            def _bw():
                src._accumulate(np.full_like(src.data, float(out.grad)))
            out._backward = _bw
        return out

    def mean(self):
        src = self
        n = src.data.size
        out = Tensor(src.data.mean(), (src,), None)
        if _GRAD_ENABLED[-1]:
            def _bw():
                src._accumulate(np.full_like(src.data, float(out.grad) / n))
            out._backward = _bw
        return out

    def sum_axis(self, axis, keepdims=False):
        src = self
        out = Tensor(src.data.sum(axis=axis, keepdims=keepdims), (src,), None)
        if _GRAD_ENABLED[-1]:
            def _bw():
                g = out.grad
                if not keepdims:
                    g = np.expand_dims(g, axis)
                src._accumulate(np.broadcast_to(g, src.data.shape).copy())
            out._backward = _bw
        return out

    def softmax(self):
        """Stable softmax over the last axis."""
        src = self
        p = kernels.softmax_lastaxis(src.data)
        out = Tensor(p, (src,), None)
        if _GRAD_ENABLED[-1]:
            def _bw():
                g = out.grad
                src._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))
            out._backward = _bw
        return out


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back onto the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _coerce(x):
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


def add(a, b):
    a, b = _coerce(a), _coerce(b)
    try:
        val = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.data.shape, b.data.shape) from None
    out = Tensor(val, (a, b), None)
    if _GRAD_ENABLED[-1]:
        def _bw():
            a._accumulate(_unbroadcast(out.grad, a.data.shape))
            b._accumulate(_unbroadcast(out.grad, b.data.shape))
        out._backward = _bw
    return out


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    try:
        val = a.data * b.data
    except ValueError:
        raise ShapeError("elementwise_mul", a.data.shape, b.data.shape) from None
    out = Tensor(val, (a, b), None)
    if _GRAD_ENABLED[-1]:
        def _bw():
            a._accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
            b._accumulate(_unbroadcast(out.grad * a.data, b.data.shape))
        out._backward = _bw
    return out


def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError("matmul", ad.shape, bd.shape)
        out = Tensor(ad @ bd, (a, b), None)
        if _GRAD_ENABLED[-1]:
            def _bw():
                a._accumulate(out.grad @ bd.T)
                b._accumulate(ad.T @ out.grad)
            out._backward = _bw
        return out
    if ad.ndim == 3 and bd.ndim == 2:
        if ad.shape[2] != bd.shape[0]:
            raise ShapeError("matmul", ad.shape, bd.shape)
        out = Tensor(ad @ bd, (a, b), None)
        if _GRAD_ENABLED[-1]:
            def _bw():
                g = out.grad
                a._accumulate(g @ bd.T)
                b._accumulate(np.tensordot(ad, g, axes=([0, 1], [0, 1])))
            out._backward = _bw
        return out
    if ad.ndim == 2 and bd.ndim == 1:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError("matmul", ad.shape, bd.shape)
        out = Tensor(ad @ bd, (a, b), None)
        if _GRAD_ENABLED[-1]:
            def _bw():
                a._accumulate(np.outer(out.grad, bd))
                b._accumulate(ad.T @ out.grad)
            out._backward = _bw
        return out
    if ad.ndim == 1 and bd.ndim == 2:
        if ad.shape[0] != bd.shape[0]:
            raise ShapeError("matmul", ad.shape, bd.shape)
        out = Tensor(ad @ bd, (a, b), None)
        if _GRAD_ENABLED[-1]:
            def _bw():
                a._accumulate(bd @ out.grad)
                b._accumulate(np.outer(ad, out.grad))
            out._backward = _bw
        return out
    raise ShapeError("matmul", ad.shape, bd.shape)


def concat(tensors, axis=-1):
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", ())
    try:
        val = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.data.shape for t in tensors]) from None
    out = Tensor(val, tuple(tensors), None)
    if _GRAD_ENABLED[-1]:
        ax = axis if axis >= 0 else val.ndim + axis
        sizes = [t.data.shape[ax] for t in tensors]

        def _bw():
            start = 0
            for t, sz in zip(tensors, sizes):
                idx = [slice(None)] * val.ndim
                idx[ax] = slice(start, start + sz)
                t._accumulate(out.grad[tuple(idx)])
                start += sz
        out._backward = _bw
    return out


def take_rows(table, ids):
    """Row gather: out[n] = table[ids[n]]. Gradient scatters with accumulation."""
    table = _coerce(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("take_rows", table.data.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError("take_rows: id out of range [0, %d)" % table.data.shape[0])
    out = Tensor(table.data[ids], (table,), None)
    if _GRAD_ENABLED[-1]:
        def _bw():
            g = np.zeros_like(table.data)
            np.add.at(g, ids, out.grad)
            table._accumulate(g)
        out._backward = _bw
    return out


def gold_log_probs(logits, ids):
    """Per-row log-probability of the gold id under softmax(logits)."""
    logits = _coerce(logits)
    ids = np.ascontiguousarray(np.asarray(ids, dtype=np.int64))
    ld = np.ascontiguousarray(logits.data)
    if ld.ndim != 2 or ids.ndim != 1 or ids.shape[0] != ld.shape[0]:
        raise ShapeError("gold_log_probs", ld.shape, ids.shape)
    if not _GRAD_ENABLED[-1]:
        # compiled twin is float64-only; extended-precision probes take the
        # generic path
        if ld.dtype == np.float64:
            return Tensor(kernels.gold_logp_value(ld, ids))
        return Tensor(kernels.gold_logp_value_np(ld, ids))
    lp, probs = kernels.gold_logp(ld, ids)
    out = Tensor(lp, (logits,), None)

    def _bw():
        logits._accumulate(kernels.gold_logp_bwd(probs, ids, np.ascontiguousarray(out.grad)))
    out._backward = _bw
    return out


def lstm_gates(z, c):
    """Fused LSTM pointwise block.

    z: (N, 4H) pre-activations laid out [input | forget | cell | output],
    c: (N, H) previous cell state. Returns (h', c'). The two outputs carry
    independent backward closures; both add into the same parent grads, which
    is safe because reverse-topological order runs every consumer first.
    """
    z, c = _coerce(z), _coerce(c)
    zd = np.ascontiguousarray(z.data)
    cd = np.ascontiguousarray(c.data)
    if zd.ndim != 2 or cd.ndim != 2 or zd.shape[0] != cd.shape[0] or zd.shape[1] != 4 * cd.shape[1]:
        raise ShapeError("lstm_gates", zd.shape, cd.shape)
    if not _GRAD_ENABLED[-1]:
        if zd.dtype == np.float64 and cd.dtype == np.float64:
            hh, c2 = kernels.lstm_pointwise_value(zd, cd)
        else:
            hh, c2 = kernels.lstm_pointwise_value_np(zd, cd)
        return Tensor(hh), Tensor(c2)
    hh, c2, i, f, g, o, tc = kernels.lstm_pointwise(zd, cd)
    out_h = Tensor(hh, (z, c), None)
    out_c = Tensor(c2, (z, c), None)

    def _bw_h():
        gz, gc = kernels.lstm_bwd_from_h(np.ascontiguousarray(out_h.grad), i, f, g, o, tc, cd)
        z._accumulate(gz)
        c._accumulate(gc)

    def _bw_c():
        gz, gc = kernels.lstm_bwd_from_c(np.ascontiguousarray(out_c.grad), i, f, g, cd)
        z._accumulate(gz)
        c._accumulate(gc)

    out_h._backward = _bw_h
    out_c._backward = _bw_c
    return out_h, out_c


def region_mix(alpha, v):
    """Convex combination of region vectors: out[n] = sum_r alpha[n,r] * v[n,r,:]."""
    alpha, v = _coerce(alpha), _coerce(v)
    if alpha.data.ndim != 2 or v.data.ndim != 3 or alpha.data.shape != v.data.shape[:2]:
        raise ShapeError("region_mix", alpha.data.shape, v.data.shape)
    val = np.einsum("nr,nrd->nd", alpha.data, v.data)
    out = Tensor(val, (alpha, v), None)
    if _GRAD_ENABLED[-1]:
        def _bw():
            g = out.grad
            alpha._accumulate(np.einsum("nd,nrd->nr", g, v.data))
            v._accumulate(alpha.data[:, :, None] * g[:, None, :])
        out._backward = _bw
    return out


def where_mask(mask, a, b):
    """mask*a + (1-mask)*b with a constant 0/1 mask broadcast over columns."""
    a, b = _coerce(a), _coerce(b)
    mask = _as_f64(mask)
    if a.data.shape != b.data.shape:
        raise ShapeError("where_mask", a.data.shape, b.data.shape)
    val = mask * a.data + (1.0 - mask) * b.data
    if val.shape != a.data.shape:
        raise ShapeError("where_mask", mask.shape, a.data.shape)
    out = Tensor(val, (a, b), None)
    if _GRAD_ENABLED[-1]:
        def _bw():
            a._accumulate(out.grad * mask)
            b._accumulate(out.grad * (1.0 - mask))
        out._backward = _bw
    return out


_PRIMITIVES = {
    "matmul": lambda ins, kw: matmul(ins[0], ins[1]),
    "add": lambda ins, kw: add(ins[0], ins[1]),
    "concat": lambda ins, kw: concat(ins, axis=kw.get("axis", -1)),
    "elementwise_tanh": lambda ins, kw: ins[0].tanh() if isinstance(ins[0], Tensor) else _coerce(ins[0]).tanh(),
    "elementwise_sigmoid": lambda ins, kw: _coerce(ins[0]).sigmoid(),
    "elementwise_mul": lambda ins, kw: mul(ins[0], ins[1]),
    "softmax": lambda ins, kw: _coerce(ins[0]).softmax(),
    "log": lambda ins, kw: _coerce(ins[0]).log(),
    "mean": lambda ins, kw: _coerce(ins[0]).mean(),
    "slice": lambda ins, kw: _coerce(ins[0]).narrow(kw["axis"], kw["start"], kw["length"]),
}


def apply_primitive(kind, inputs, **kw):
    """Uniform dispatcher over the primitive vocabulary. Mostly a test surface;
    model code calls the named functions directly."""
    if kind not in _PRIMITIVES:
        raise ValueError("unknown primitive: %r" % kind)
    return _PRIMITIVES[kind]([_coerce(x) for x in inputs], kw)


class GradientMap:
    """Parameter-identity -> gradient array, as produced by one backward pass."""

    def __init__(self):
        self._by_id = {}

    def _put(self, tensor, grad):
        self._by_id[id(tensor)] = (tensor, grad)

    def get(self, tensor):
        entry = self._by_id.get(id(tensor))
        if entry is None:
            return np.zeros_like(tensor.data)
        return entry[1]

    def __contains__(self, tensor):
        return id(tensor) in self._by_id

    def items(self):
        return [(t, g) for (t, g) in self._by_id.values()]

    def __len__(self):
        return len(self._by_id)


def _topo_order(root):
    """Iterative post-order over the recorded graph (unrolled RNNs nest far
    past the interpreter's recursion limit)."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Reverse-mode sweep from a scalar loss. Returns a GradientMap holding
    every reachable leaf's gradient; intermediate grads are left on the nodes.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss, got shape %s" % (loss.data.shape,))
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()
    gm = GradientMap()
    for node in order:
        if node._backward is None and node.requires_grad and node.grad is not None:
            gm._put(node, node.grad)
    return gm


def grad_check(scalar_fn, params, epsilon=1e-5):
    """Worst relative error between backward() gradients and central finite
    differences, over every element of every tensor in `params`.

    rel = |g_a - g_n| / max(|g_a|, |g_n|, 1e-8)

    Probes evaluate the forward with the probed tensor held in longdouble.
    Everything untouched by the perturbation cancels bitwise in the central
    difference, so only the perturbed path's rounding enters the quotient;
    extended precision keeps that below the gradients being certified.  On
    platforms where longdouble is float64 this degrades to plain probing.
    """
    if not (0.0 < epsilon <= 1e-3):
        raise ValueError("epsilon must lie in (0, 1e-3]")
    loss = scalar_fn()
    if not np.isfinite(loss.data).all():
        raise ValueError("scalar_fn produced a non-finite value")
    gm = backward(loss)
    worst = 0.0
    eps = np.longdouble(epsilon)
    params_list = params.values() if isinstance(params, dict) else params
    for p in params_list:
        analytic = gm.get(p)
        gflat = analytic.reshape(-1)
        saved = p.data
        p.data = saved.astype(np.longdouble)
        flat = p.data.reshape(-1)
        try:
            for j in range(flat.size):
                keep = flat[j]
                flat[j] = keep + eps
                with no_grad():
                    fp = scalar_fn().data
                flat[j] = keep - eps
                with no_grad():
                    fm = scalar_fn().data
                flat[j] = keep
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise ValueError("scalar_fn produced a non-finite value during probing")
                numeric = float((fp - fm) / (2.0 * eps))
                ga = gflat[j]
                rel = abs(ga - numeric) / max(abs(ga), abs(numeric), 1e-8)
                if rel > worst:
                    worst = rel
        finally:
            p.data = saved
    return worst
