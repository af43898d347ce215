"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Everything is float64 and single-threaded. A dynamic tape is rebuilt for each
training step (recurrent unroll lengths vary per episode batch). Broadcasting
is limited to what numpy does for a trailing bias vector or a size-1 axis;
anything more exotic should be shaped explicitly by the caller so that shape
errors stay loud.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, NumericFault

_ACTIVE_TAPE = None


def _all_finite(arr):
    # A single-reduce finiteness probe: any NaN/Inf entry makes the sum
    # non-finite (inf - inf yields NaN), so this is sound and cheap.
    s = arr.sum()
    return s == s and s != np.inf and s != -np.inf


class Tensor:
    """A float64 array with an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_needs")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not _all_finite(arr):
            raise NumericFault("Tensor initialized with non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._needs = self.requires_grad

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


class Tape:
    """Ordered record of primitive ops; backward walks it in exact reverse."""

    def __init__(self):
        self.ops = []  # (output, parents tuple, vjp callable)
        self._prev = None

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False

    def backward(self, loss):
        """Accumulate d(loss)/d(param) into .grad of every requires_grad leaf.

        Repeated calls without zeroing the grads accumulate.
        """
        if loss.data.size != 1:
            raise ContractViolation(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        if not self.ops:
            raise ContractViolation("backward on an empty tape")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        if loss.requires_grad:
            leaves[id(loss)] = loss
        for out, parents, vjp in reversed(self.ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            pgrads = vjp(g)
            for p, pg in zip(parents, pgrads):
                if pg is None or not p._needs:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if p.requires_grad:
                    leaves[key] = p
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            if g.shape != leaf.data.shape:
                g = np.broadcast_to(g, leaf.data.shape).copy()
            if leaf.grad is None:
                leaf.grad = g
            else:
                leaf.grad = leaf.grad + g


def _record(name, out_data, parents, vjp):
    if not _all_finite(out_data):
        raise NumericFault(f"non-finite output from primitive '{name}'")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = False
    out._needs = False
    tape = _ACTIVE_TAPE
    if tape is not None:
        for p in parents:
            if p._needs:
                out._needs = True
                tape.ops.append((out, parents, vjp))
                break
    return out


def _unbroadcast(g, shape):
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_elementwise(a, b, name):
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ContractViolation(
            f"{name}: incompatible shapes {a.data.shape} and {b.data.shape}"
        ) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    _check_elementwise(a, b, "add")
    return _record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    _check_elementwise(a, b, "sub")
    return _record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b):
    _check_elementwise(a, b, "mul")
    return _record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def neg(a):
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c):
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def add_const(a, c):
    c = float(c)
    return _record("add_const", a.data + c, (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ContractViolation(
            f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}"
        )
    return _record(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def linear(x, w, b):
    """Affine map x @ w + b as a single taped op (2-D x, trailing bias)."""
    if x.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ContractViolation(
            f"linear: incompatible shapes {x.data.shape} and {w.data.shape}"
        )

    def vjp(g):
        return (g @ w.data.T, x.data.T @ g, g.sum(axis=0))

    return _record("linear", x.data @ w.data + b.data, (x, w, b), vjp)


def linear2(x, wx, h, wh, b):
    """x @ wx + h @ wh + b as a single taped op (recurrent-gate pre-activation)."""
    if x.data.ndim != 2 or h.data.ndim != 2:
        raise ContractViolation("linear2 expects 2-D inputs")

    def vjp(g):
        return (g @ wx.data.T, x.data.T @ g, g @ wh.data.T, h.data.T @ g, g.sum(axis=0))

    return _record(
        "linear2", x.data @ wx.data + h.data @ wh.data + b.data, (x, wx, h, wh, b), vjp
    )


def gru_cell(x, h, w_ir, w_hr, b_r, w_iz, w_hz, b_z, w_in, b_in, w_hn, b_hn):
    """One fused GRU step h' = z*h + (1-z)*n, taped as a single op.

    Gates: r = sigmoid(x@w_ir + h@w_hr + b_r), z likewise, and the candidate
    n = tanh(x@w_in + b_in + r*(h@w_hn + b_hn)). Fusing keeps the tape short,
    which matters because recurrent unrolls dominate op counts.
    """
    xd, hd = x.data, h.data
    d = hd.shape[-1]
    # the six gate matmuls collapse into two wide ones (r|z|n blocks)
    wi = np.concatenate((w_ir.data, w_iz.data, w_in.data), axis=1)
    wh = np.concatenate((w_hr.data, w_hz.data, w_hn.data), axis=1)
    gi = xd @ wi
    gh = hd @ wh
    pre_r = gi[:, :d] + gh[:, :d] + b_r.data
    r = 1.0 / (1.0 + np.exp(-pre_r))
    pre_z = gi[:, d : 2 * d] + gh[:, d : 2 * d] + b_z.data
    z = 1.0 / (1.0 + np.exp(-pre_z))
    hn_lin = gh[:, 2 * d :] + b_hn.data
    n = np.tanh(gi[:, 2 * d :] + b_in.data + r * hn_lin)
    out = z * hd + (1.0 - z) * n

    def vjp(g):
        dn = g * (1.0 - z)
        dpre_n = dn * (1.0 - n * n)
        dhn_lin = dpre_n * r
        dpre_r = (dpre_n * hn_lin) * r * (1.0 - r)
        dpre_z = (g * (hd - n)) * z * (1.0 - z)
        dpre_i = np.concatenate((dpre_r, dpre_z, dpre_n), axis=1)
        dpre_h = np.concatenate((dpre_r, dpre_z, dhn_lin), axis=1)
        dx = dpre_i @ wi.T
        dh = g * z + dpre_h @ wh.T
        dwi = xd.T @ dpre_i
        dwh = hd.T @ dpre_h
        return (
            dx,
            dh,
            dwi[:, :d],
            dwh[:, :d],
            dpre_r.sum(axis=0),
            dwi[:, d : 2 * d],
            dwh[:, d : 2 * d],
            dpre_z.sum(axis=0),
            dwi[:, 2 * d :],
            dpre_n.sum(axis=0),
            dwh[:, 2 * d :],
            dhn_lin.sum(axis=0),
        )

    return _record(
        "gru_cell",
        out,
        (x, h, w_ir, w_hr, b_r, w_iz, w_hz, b_z, w_in, b_in, w_hn, b_hn),
        vjp,
    )


def gru_combine(z, h, n):
    """Convex gate h' = z*h + (1-z)*n as a single taped op."""

    def vjp(g):
        return (g * (h.data - n.data), g * z.data, g * (1.0 - z.data))

    return _record("gru_combine", z.data * h.data + (1.0 - z.data) * n.data, (z, h, n), vjp)


def bmm(a, b):
    if (
        a.data.ndim != 3
        or b.data.ndim != 3
        or a.data.shape[0] != b.data.shape[0]
        or a.data.shape[2] != b.data.shape[1]
    ):
        raise ContractViolation(
            f"bmm: incompatible shapes {a.data.shape} and {b.data.shape}"
        )
    return _record(
        "bmm",
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g),
    )


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a):
    out = np.maximum(a.data, 0.0)
    return _record("relu", out, (a,), lambda g: (g * (a.data > 0.0),))


def abs_(a):
    return _record("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def tanh(a):
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def elu(a):
    pos = a.data > 0.0
    expm1 = np.expm1(np.minimum(a.data, 0.0))
    out = np.where(pos, a.data, expm1)
    return _record("elu", out, (a,), lambda g: (g * np.where(pos, 1.0, expm1 + 1.0),))


def exp(a):
    with np.errstate(over="ignore"):  # overflow becomes a NumericFault below
        out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a):
    if np.any(a.data <= 0.0):
        raise NumericFault("log of non-positive value")
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def log_softmax(a):
    """Numerically stable log-softmax over the last axis."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def vjp(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", out, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions and shaping


def sum_(a, axis=None):
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape),)

    return _record("sum", out, (a,), vjp)


def mean_(a, axis=None):
    n = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.data.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.data.shape),)

    return _record("mean", out, (a,), vjp)


def reshape(a, shape):
    out = a.data.reshape(shape)
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.data.shape),))


def concat(tensors, axis=-1):
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tuple(tensors), vjp)


def take_along(a, idx):
    """Pick a[i, idx[i]] for each row i of a 2-D tensor."""
    if a.data.ndim != 2:
        raise ContractViolation(f"take_along expects 2-D input, got {a.data.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != (a.data.shape[0],):
        raise ContractViolation(
            f"take_along: index shape {idx.shape} != ({a.data.shape[0]},)"
        )
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[rows, idx] = g
        return (ga,)

    return _record("take_along", out, (a,), vjp)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moments packed into flat vectors plus a shared step counter.

    The packing layout is derived from the parameter store on the first step;
    if names or shapes change later the moments reset (a new layout means a
    different optimization problem anyway).
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._layout = None  # list of (name, flat slice, shape)
        self._key = None
        self._m = None
        self._v = None
        self._g = None  # scratch: packed gradient
        self._t = None  # scratch: temporaries

    def moments(self, name):
        """(m, v) views for one parameter, mainly for inspection."""
        for n, sl, shape in self._layout or ():
            if n == name:
                return self._m[sl].reshape(shape), self._v[sl].reshape(shape)
        raise KeyError(name)


def adam_step(params, state, lr):
    """One Adam update over a {name: Tensor} store. Missing grads mean zero."""
    names = [n for n, p in params.items() if p.requires_grad]
    key = tuple((n, params[n].data.shape) for n in names)
    if key != state._key:
        layout = []
        off = 0
        for n in names:
            size = params[n].data.size
            layout.append((n, slice(off, off + size), params[n].data.shape))
            off += size
        state._layout = layout
        state._key = key
        state._m = np.zeros(off)
        state._v = np.zeros(off)
        state._g = np.empty(off)
        state._t = np.empty(off)
        state.step_count = 0

    g_flat = state._g
    for name, sl, _ in state._layout:
        g = params[name].grad
        if g is None:
            g_flat[sl] = 0.0
        else:
            g_flat[sl] = g.reshape(-1)
    if not _all_finite(g_flat):
        for name, sl, _ in state._layout:
            if not _all_finite(g_flat[sl]):
                raise NumericFault(f"non-finite gradient for parameter '{name}'")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    lr_hat = lr / (1.0 - b1**t)
    inv_sqrt_bc2 = 1.0 / np.sqrt(1.0 - b2**t)
    m, v, tmp = state._m, state._v, state._t
    m *= b1
    np.multiply(g_flat, 1.0 - b1, out=tmp)
    m += tmp
    v *= b2
    g_flat *= g_flat
    g_flat *= 1.0 - b2
    v += g_flat
    denom = np.sqrt(v, out=tmp)
    denom *= inv_sqrt_bc2
    denom += state.eps
    np.divide(m, denom, out=denom)
    denom *= lr_hat
    for name, sl, shape in state._layout:
        params[name].data -= denom[sl].reshape(shape)


def zero_grads(params):
    for p in params.values():
        p.grad = None
