"""Reverse-mode differentiation over numpy arrays, sized for Fourier neural operators.

Ops record onto the innermost active :class:`Tape` when any input requires a
gradient; outside a tape they just compute.  Complex intermediates carry
gradients in the conjugate convention ``dL/dRe + i dL/dIm``, so the adjoint of
a complex linear map ``M`` is its conjugate transpose.

Transform convention: forward transforms are unnormalized, inverses carry
``1/n`` (numpy's default).
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import NotScalarLoss, ShapeMismatch

_TAPES = []


class Tape:
    """Ordered record of differentiable ops, consumed by :meth:`backward`."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, t):
        t.node = len(self.nodes)
        self.nodes.append(t)

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if loss.data.size != 1:
            raise NotScalarLoss(f"loss must be a scalar, got shape {loss.shape}")
        if loss.node is None or loss.node >= len(self.nodes) or self.nodes[loss.node] is not loss:
            if loss.requires_grad and loss._backward is None:
                _accumulate_leaf(loss, np.ones_like(loss.data))
            return
        pending = {loss.node: np.ones_like(loss.data)}
        for idx in range(loss.node, -1, -1):
            g = pending.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            for parent, gp in zip(node._parents, node._backward(g)):
                if gp is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    _accumulate_leaf(parent, gp)
                elif parent.node in pending:
                    pending[parent.node] = pending[parent.node] + gp
                else:
                    pending[parent.node] = gp


def _accumulate_leaf(t, g):
    g = np.real(g) if not np.iscomplexobj(t.data) else g
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        data = np.asarray(data)
        if not np.iscomplexobj(data):
            data = data.astype(np.float64, copy=False)
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self._parents = ()
        self._backward = None
        self.name = name

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.data.dtype})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return pointwise_mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    out = Tensor(data)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        _TAPES[-1].record(out)
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


# --- pointwise ------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul_scalar(a, c):
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def pointwise_mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "pointwise_mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * np.conj(b.data), g * np.conj(a.data)))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _channel_shape(ndim, axis, n):
    shape = [1] * ndim
    shape[axis] = n
    return shape


def add_bias(a, bias, axis=-1):
    """``a + bias`` with ``bias`` (length c) broadcast along channel ``axis``."""
    a, bias = as_tensor(a), as_tensor(bias)
    axis = axis % a.ndim
    if bias.shape != (a.shape[axis],):
        raise ShapeMismatch(f"bias of shape {bias.shape} does not fit axis {axis} of {a.shape}")
    shape = _channel_shape(a.ndim, axis, bias.shape[0])
    others = tuple(i for i in range(a.ndim) if i != axis)
    return _result(a.data + bias.data.reshape(shape), (a, bias), lambda g: (g, g.sum(axis=others)))


def affine(a, scale, shift, axis=-1):
    """Constant per-channel ``a * scale + shift``; only ``a`` is differentiated."""
    a = as_tensor(a)
    axis = axis % a.ndim
    n = a.shape[axis]
    shape = _channel_shape(a.ndim, axis, n)
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (n,)).reshape(shape)
    shift = np.broadcast_to(np.asarray(shift, dtype=np.float64), (n,)).reshape(shape)
    return _result(a.data * scale + shift, (a,), lambda g: (g * scale,))


def real(a):
    a = as_tensor(a)
    return _result(a.data.real.copy(), (a,), lambda g: (g.astype(np.complex128),))


def imag(a):
    a = as_tensor(a)
    return _result(a.data.imag.copy(), (a,), lambda g: (1j * g,))


# --- structural -----------------------------------------------------------------


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return _result(data, (a,), lambda g: (g.reshape(old),))


def take(a, indices, axis):
    """Select entries ``indices`` along ``axis`` (adjoint: scatter-add)."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    axis = axis % a.ndim
    n = a.shape[axis]

    def back(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _result(np.take(a.data, idx, axis=axis), (a,), back)


def place(a, indices, axis, n):
    """Embed ``a`` into zeros of length ``n`` along ``axis`` at ``indices``."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    axis = axis % a.ndim
    shape = list(a.shape)
    shape[axis] = n
    out = np.zeros(shape, dtype=a.data.dtype)
    np.moveaxis(out, axis, 0)[idx] = np.moveaxis(a.data, axis, 0)
    return _result(out, (a,), lambda g: (np.take(g, idx, axis=axis),))


# --- contractions and reductions ---------------------------------------------------


def channel_mix(a, w, axis=-1):
    """Contract channel ``axis`` of ``a`` (c_in) with ``w`` (c_in, c_out)."""
    a, w = as_tensor(a), as_tensor(w)
    axis = axis % a.ndim
    if w.ndim != 2 or a.shape[axis] != w.shape[0]:
        raise ShapeMismatch(f"channel_mix: {a.shape} along axis {axis} vs weights {w.shape}")
    cin, cout = w.shape
    lead = int(np.prod(a.shape[:axis], dtype=np.int64))
    out_shape = a.shape[:axis] + (cout,) + a.shape[axis + 1 :]
    if axis == a.ndim - 1:
        x2 = a.data.reshape(-1, cin)
        y = (x2 @ w.data).reshape(out_shape)

        def back(g):
            g2 = g.reshape(-1, cout)
            return (g2 @ w.data.T).reshape(a.shape), x2.T @ g2

    else:
        x3 = a.data.reshape(lead, cin, -1)
        y = np.matmul(w.data.T, x3).reshape(out_shape)

        def back(g):
            g3 = g.reshape(lead, cout, -1)
            ga = np.matmul(w.data, g3).reshape(a.shape)
            gw = np.zeros((cin, cout))
            for i in range(lead):
                gw += x3[i] @ g3[i].T
            return ga, gw

    return _result(y, (a, w), back)


def mean(a):
    a = as_tensor(a)
    n = a.data.size
    return _result(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n),))


def total(a):
    a = as_tensor(a)
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, g),))


def mse(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mse")
    d = a.data - b.data
    n = d.size
    return _result(np.asarray(np.mean(d * d)), (a, b), lambda g: (2 * g * d / n, -2 * g * d / n))


def rel_l2(a, b):
    """Mean over axis 0 of ``||a_i - b_i|| / ||b_i||`` (norms over the other axes)."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "rel_l2")
    nb = a.shape[0]
    d = (a.data - b.data).reshape(nb, -1)
    ref = b.data.reshape(nb, -1)
    dn = np.sqrt((d * d).sum(axis=1))
    rn = np.sqrt((ref * ref).sum(axis=1))
    if np.any(rn == 0):
        raise ZeroDivisionError("rel_l2: a reference record has zero norm")
    val = np.mean(dn / rn)

    def back(g):
        safe = np.where(dn > 0, dn, 1.0)
        ga = (g / nb) * d / (safe * rn)[:, None]
        ga[dn == 0] = 0.0
        gb = -ga - (g / nb) * (dn / rn**3)[:, None] * ref
        return ga.reshape(a.shape), gb.reshape(b.shape)

    return _result(np.asarray(val), (a, b), back)


# --- transforms -------------------------------------------------------------------


def rfft_axis(a, axis=-1):
    a = as_tensor(a)
    axis = axis % a.ndim
    n = a.shape[axis]

    def back(g):
        # adjoint of the real-to-half-complex map: Re(sum_k g_k e^{+2 pi i k j / n})
        m = g.shape[axis]
        full = np.zeros(a.shape[:axis] + (n,) + a.shape[axis + 1 :], dtype=np.complex128)
        np.moveaxis(full, axis, 0)[:m] = np.moveaxis(g, axis, 0)
        return (np.real(np.fft.ifft(full, axis=axis)) * n,)

    return _result(np.fft.rfft(a.data, axis=axis), (a,), back)


def irfft_axis(a, n, axis=-1):
    a = as_tensor(a)
    axis = axis % a.ndim
    m = a.shape[axis]
    if m != n // 2 + 1:
        raise ShapeMismatch(f"irfft_axis: {m} bins do not match length {n}")
    w = np.full(m, 2.0 / n)
    w[0] = 1.0 / n
    if n % 2 == 0:
        w[-1] = 1.0 / n
    w = w.reshape(_channel_shape(a.ndim, axis, m))

    def back(g):
        return (np.fft.rfft(g, axis=axis) * w,)

    return _result(np.fft.irfft(a.data, n=n, axis=axis), (a,), back)


def fft_axis(a, axis=-1):
    a = as_tensor(a)
    axis = axis % a.ndim
    n = a.shape[axis]
    return _result(np.fft.fft(a.data, axis=axis), (a,), lambda g: (np.fft.ifft(g, axis=axis) * n,))


def ifft_axis(a, axis=-1):
    a = as_tensor(a)
    axis = axis % a.ndim
    n = a.shape[axis]
    return _result(np.fft.ifft(a.data, axis=axis), (a,), lambda g: (np.fft.fft(g, axis=axis) / n,))


def complex_view(w):
    """Weights stored as (..., 2) real pairs viewed as a complex array."""
    return w.data.view(np.complex128)[..., 0]


def mode_mix(a, weights, modes_keep):
    """Per-mode complex channel mixing on the lowest ``modes_keep`` modes.

    ``a`` is complex (batch, modes_total, c_in); ``weights`` is real
    (modes_keep, c_in, c_out, 2).  Modes at or above ``modes_keep`` are zeroed.
    """
    a, weights = as_tensor(a), as_tensor(weights)
    if a.ndim != 3 or weights.ndim != 4 or weights.shape[-1] != 2:
        raise ShapeMismatch(f"mode_mix: bad shapes {a.shape} and {weights.shape}")
    nb, mt, cin = a.shape
    mk, wcin, cout, _ = weights.shape
    if mk != modes_keep or wcin != cin or modes_keep > mt:
        raise ShapeMismatch(f"mode_mix: {a.shape} with weights {weights.shape} keeping {modes_keep}")
    k = complex_view(weights)
    x = np.ascontiguousarray(a.data[:, :modes_keep].transpose(1, 0, 2))  # (m, b, cin)
    y = np.zeros((nb, mt, cout), dtype=np.complex128)
    y[:, :modes_keep] = np.matmul(x, k).transpose(1, 0, 2)

    def back(g):
        gm = np.ascontiguousarray(g[:, :modes_keep].transpose(1, 0, 2))
        ga = np.zeros(a.shape, dtype=np.complex128)
        ga[:, :modes_keep] = np.matmul(gm, np.conj(k).transpose(0, 2, 1)).transpose(1, 0, 2)
        gk = np.matmul(np.conj(x).transpose(0, 2, 1), gm)
        return ga, np.stack([gk.real, gk.imag], axis=-1)

    return _result(y, (a, weights), back)


# --- fused spectral convolution ----------------------------------------------------


def _angles(n, k):
    # 2 pi (k j mod n) / n, exact integer reduction before scaling
    return 2.0 * np.pi * (np.outer(np.arange(n), k) % n) / n


@lru_cache(maxsize=32)
def _rdft_matrices(n, m):
    """Real GEMM operands for a truncated rfft of length n keeping m bins.

    ``fwd`` (n, 2m) produces interleaved (re, im) columns so the product can
    be viewed as complex; ``inv`` (2m, n) maps interleaved bins back to the
    real signal with the irfft weights.
    """
    th = _angles(n, np.arange(m))
    fwd = np.empty((n, 2 * m))
    fwd[:, 0::2] = np.cos(th)
    fwd[:, 1::2] = -np.sin(th)
    w = np.full(m, 2.0 / n)
    w[0] = 1.0 / n
    if n % 2 == 0 and m == n // 2 + 1:
        w[-1] = 1.0 / n
    inv = np.empty((2 * m, n))
    inv[0::2] = (np.cos(th) * w).T
    inv[1::2] = (-np.sin(th) * w).T
    return fwd, inv


def spectral_modes(n, m):
    """Indices of the 2m retained bins of a full complex transform: low and high."""
    return np.concatenate([np.arange(m), np.arange(n - m, n)])


@lru_cache(maxsize=32)
def _cdft_matrices(n, m):
    k = spectral_modes(n, m)
    th = _angles(n, k).T  # (2m, n)
    fwd = np.exp(-1j * th)
    inv = np.ascontiguousarray(np.exp(1j * th).T / n)  # (n, 2m)
    return fwd, inv


def _fused_forward_1d(x, k, mx):
    nb, cin, n = x.shape
    fwd, inv = _rdft_matrices(n, mx)
    xh = (x.reshape(-1, n) @ fwd).view(np.complex128).reshape(nb, cin, mx)
    xm = np.ascontiguousarray(xh.transpose(2, 0, 1))  # (mx, b, cin)
    ym = np.matmul(xm, k)  # (mx, b, cout)
    cout = k.shape[-1]
    yh = np.ascontiguousarray(ym.transpose(1, 2, 0)).view(np.float64).reshape(-1, 2 * mx)
    return (yh @ inv).reshape(nb, cout, n), xm


def _fused_backward_1d(g, x_shape, xm, k, mx):
    nb, cin, n = x_shape
    cout = g.shape[1]
    fwd, inv = _rdft_matrices(n, mx)
    gh = (g.reshape(-1, n) @ inv.T).view(np.complex128).reshape(nb, cout, mx)
    gm = np.ascontiguousarray(gh.transpose(2, 0, 1))
    gk = np.matmul(np.conj(xm).transpose(0, 2, 1), gm)
    gxm = np.matmul(gm, np.conj(k).transpose(0, 2, 1))
    gxh = np.ascontiguousarray(gxm.transpose(1, 2, 0)).view(np.float64).reshape(-1, 2 * mx)
    return (gxh @ fwd.T).reshape(x_shape), gk


def _fused_forward_2d(x, k, mt, mx):
    nb, cin, nt, n = x.shape
    fx, ix = _rdft_matrices(n, mx)
    ft, it = _cdft_matrices(nt, mt)
    a = (x.reshape(-1, n) @ fx).view(np.complex128).reshape(nb, cin, nt, mx)
    a = np.ascontiguousarray(a.transpose(2, 3, 0, 1)).reshape(nt, -1)  # (t, mx*b*cin)
    z = (ft @ a).reshape(2 * mt * mx, nb, cin)
    kk = k.reshape(2 * mt * mx, cin, -1)
    cout = kk.shape[-1]
    y = np.matmul(z, kk).reshape(2 * mt, -1)  # (2mt, mx*b*cout)
    w = (it @ y).reshape(nt, mx, nb, cout)
    w = np.ascontiguousarray(w.transpose(2, 3, 0, 1)).view(np.float64).reshape(-1, 2 * mx)
    return (w @ ix).reshape(nb, cout, nt, n), z


def _fused_backward_2d(g, x_shape, z, k, mt, mx):
    nb, cin, nt, n = x_shape
    cout = g.shape[1]
    fx, ix = _rdft_matrices(n, mx)
    ft, it = _cdft_matrices(nt, mt)
    gw = (g.reshape(-1, n) @ ix.T).view(np.complex128).reshape(nb, cout, nt, mx)
    gw = np.ascontiguousarray(gw.transpose(2, 3, 0, 1)).reshape(nt, -1)
    gy = (np.conj(it).T @ gw).reshape(2 * mt * mx, nb, cout)
    kk = k.reshape(2 * mt * mx, cin, cout)
    gk = np.matmul(np.conj(z).transpose(0, 2, 1), gy).reshape(k.shape)
    gz = np.matmul(gy, np.conj(kk).transpose(0, 2, 1)).reshape(2 * mt, -1)
    ga = (np.conj(ft).T @ gz).reshape(nt, mx, nb, cin)
    ga = np.ascontiguousarray(ga.transpose(2, 3, 0, 1)).view(np.float64).reshape(-1, 2 * mx)
    return (ga @ fx.T).reshape(x_shape), gk


def spectral_conv(a, weights, modes):
    """Truncated Fourier multiplier on a channel-first field.

    1-D: ``a`` is (batch, c_in, n), ``weights`` (mx, c_in, c_out, 2) and
    ``modes = (mx,)``.  2-D: ``a`` is (batch, c_in, nt, n) with the real
    transform on the last axis and a full transform on the time axis;
    ``weights`` is (2 mt, mx, c_in, c_out, 2) ordered (low t bins, high t
    bins) and ``modes = (mt, mx)``.  Equivalent to rfft -> keep bins ->
    per-bin complex matmul -> zero-fill -> inverse, done with DFT matrices.
    """
    a, weights = as_tensor(a), as_tensor(weights)
    k = complex_view(weights)
    if a.ndim == 3:
        (mx,) = modes
        n = a.shape[-1]
        if weights.shape[:2] != (mx, a.shape[1]) or mx > n // 2 + 1:
            raise ShapeMismatch(f"spectral_conv: weights {weights.shape} vs input {a.shape}, modes {modes}")
        y, cache = _fused_forward_1d(a.data, k, mx)

        def back(g):
            ga, gk = _fused_backward_1d(g, a.shape, cache, k, mx)
            return ga, np.stack([gk.real, gk.imag], axis=-1)

    elif a.ndim == 4:
        mt, mx = modes
        nt, n = a.shape[2:]
        if weights.shape[:3] != (2 * mt, mx, a.shape[1]) or mx > n // 2 + 1 or 2 * mt > nt:
            raise ShapeMismatch(f"spectral_conv: weights {weights.shape} vs input {a.shape}, modes {modes}")
        y, cache = _fused_forward_2d(a.data, k, mt, mx)

        def back(g):
            ga, gk = _fused_backward_2d(g, a.shape, cache, k, mt, mx)
            return ga, np.stack([gk.real, gk.imag], axis=-1)

    else:
        raise ShapeMismatch(f"spectral_conv expects a 3-D or 4-D input, got {a.shape}")
    return _result(y, (a, weights), back)


# --- optimization ---------------------------------------------------------------


class Adam:
    """Adam with bias correction; ``lr`` is set by the caller's schedule."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {"step": self.step_count, "lr": self.lr}


def adam_step(params, grads, state):
    """Functional form: apply one Adam update with explicit gradients."""
    for p, g in zip(params, grads):
        p.grad = g
    state.step()
    return params


def step_decay_lr(epoch, base=1e-3, period=100, factor=0.5):
    """Learning rate for a 0-based epoch: ``base`` halved every ``period`` epochs."""
    return base * factor ** (epoch // period)
