import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nobs import autodiff as ad
from nobs.errors import NotScalarLoss, ShapeMismatch

FD_STEP = 1e-5
FD_TOL = 1e-6


def grad_check(build, shapes, seed, positive_away_from=None):
    """Compare tape gradients with central differences for every input entry."""
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    if positive_away_from is not None:
        for a in arrays:
            a[np.abs(a) < positive_away_from] += 3 * positive_away_from
    leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        loss = build(*leaves)
        tape.backward(loss)
    for leaf in leaves:
        fd = np.zeros_like(leaf.data)
        it = np.nditer(leaf.data, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = leaf.data[i]
            leaf.data[i] = old + FD_STEP
            up = float(build(*leaves).data)
            leaf.data[i] = old - FD_STEP
            down = float(build(*leaves).data)
            leaf.data[i] = old
            fd[i] = (up - down) / (2 * FD_STEP)
        an = leaf.grad if leaf.grad is not None else np.zeros_like(fd)
        scale = max(np.linalg.norm(fd), np.linalg.norm(an), 1e-30)
        err = np.linalg.norm(an - fd) / scale
        assert err < FD_TOL, (err, leaf.shape)


def readout(t, seed=99):
    """Fixed random linear functional of a (possibly complex) tensor."""
    rng = np.random.default_rng(seed)
    r = ad.Tensor(rng.standard_normal(t.shape))
    if np.iscomplexobj(t.data):
        s = ad.Tensor(rng.standard_normal(t.shape))
        return ad.add(ad.total(ad.pointwise_mul(ad.real(t), r)), ad.total(ad.pointwise_mul(ad.imag(t), s)))
    return ad.total(ad.pointwise_mul(t, r))


SEEDS = range(5)

CASES = {
    "add": (lambda a, b: readout(ad.add(a, b)), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: readout(ad.sub(a, b)), [(3, 4), (3, 4)]),
    "mul_scalar": (lambda a: readout(ad.mul_scalar(a, -2.5)), [(5,)]),
    "pointwise_mul": (lambda a, b: readout(ad.pointwise_mul(a, b)), [(2, 3), (2, 3)]),
    "fan_out": (lambda a: readout(ad.pointwise_mul(a, ad.add(a, a))), [(4,)]),
    "add_bias": (lambda a, b: readout(ad.add_bias(a, b, axis=1)), [(2, 3, 4), (3,)]),
    "affine": (lambda a: readout(ad.affine(a, [1.5, -0.5, 2.0], [0.1, 0.2, 0.3], axis=1)), [(2, 3, 4)]),
    "channel_mix_last": (lambda a, w: readout(ad.channel_mix(a, w)), [(2, 3, 4), (4, 5)]),
    "channel_mix_first": (lambda a, w: readout(ad.channel_mix(a, w, axis=1)), [(2, 4, 3, 2), (4, 3)]),
    "relu": (lambda a: readout(ad.relu(a)), [(3, 5)]),
    "mean": (lambda a: ad.mean(ad.pointwise_mul(a, a)), [(3, 4)]),
    "mse": (lambda a, b: ad.mse(a, b), [(3, 4), (3, 4)]),
    "rel_l2": (lambda a, b: ad.rel_l2(a, b), [(3, 2, 5), (3, 2, 5)]),
    "transpose": (lambda a: readout(ad.transpose(a, (2, 0, 1))), [(2, 3, 4)]),
    "reshape": (lambda a: readout(ad.reshape(a, (6, 4))), [(2, 3, 4)]),
    "take": (lambda a: readout(ad.take(a, [0, 2, 2], 1)), [(2, 4)]),
    "place": (lambda a: readout(ad.place(a, [1, 3], 1, 5)), [(2, 2)]),
    "rfft": (lambda a: readout(ad.rfft_axis(a, axis=1)), [(2, 9, 3)]),
    "irfft": (lambda a, b: readout(ad.irfft_axis(ad.rfft_axis(ad.pointwise_mul(a, b)), 10)), [(2, 10), (2, 10)]),
    "fft_ifft": (lambda a: readout(ad.ifft_axis(ad.fft_axis(ad.rfft_axis(a, 1), 0), 0)), [(5, 8)]),
    "fft": (lambda a: readout(ad.fft_axis(ad.rfft_axis(a, 1), 0)), [(5, 6)]),
    "mode_mix": (lambda a, k: readout(ad.mode_mix(ad.rfft_axis(a, 1), k, 3)), [(2, 8, 3), (3, 3, 2, 2)]),
    "spectral_conv_1d": (lambda a, k: readout(ad.spectral_conv(a, k, (3,))), [(2, 3, 11), (3, 3, 2, 2)]),
    "spectral_conv_2d": (lambda a, k: readout(ad.spectral_conv(a, k, (2, 3))), [(2, 2, 7, 9), (4, 3, 2, 3, 2)]),
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(CASES))
def test_finite_difference(name, seed):
    build, shapes = CASES[name]
    grad_check(build, shapes, seed, positive_away_from=1e-3 if name == "relu" else None)


def test_relu_subgradient():
    x = ad.Tensor([2.0, -3.0, 0.0], requires_grad=True)
    with ad.Tape() as tape:
        tape.backward(ad.total(ad.relu(x)))
    assert x.grad.tolist() == [1.0, 0.0, 0.0]


def test_fan_out_accumulates_exactly():
    x = ad.Tensor(np.array([0.3, -1.7]), requires_grad=True)
    with ad.Tape() as tape:
        tape.backward(ad.total(ad.add(x, x)))
    assert x.grad.tolist() == [2.0, 2.0]


def test_channel_mix_identity():
    a = np.random.default_rng(0).standard_normal((2, 3, 5))
    assert np.array_equal(ad.channel_mix(a, np.eye(5)).data, a)
    assert np.array_equal(ad.channel_mix(a, np.eye(3), axis=1).data, a)


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        ad.add(np.zeros(3), np.zeros(4))
    with pytest.raises(ShapeMismatch):
        ad.channel_mix(np.zeros((2, 3)), np.zeros((4, 2)))
    with pytest.raises(ShapeMismatch):
        ad.irfft_axis(ad.rfft_axis(np.zeros(8)), 12)
    with pytest.raises(ShapeMismatch):
        ad.mode_mix(ad.rfft_axis(np.zeros((1, 8, 2)), 1), np.zeros((6, 2, 2, 2)), 6)
    with pytest.raises(ValueError):
        ad.mse(np.zeros(2), np.zeros(3))


def test_not_scalar_loss():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.mul_scalar(x, 2.0)
        with pytest.raises(NotScalarLoss):
            tape.backward(y)


def test_no_recording_outside_tape():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    y = ad.mul_scalar(x, 2.0)
    assert y.node is None and not y.requires_grad


def test_tape_order_and_single_visit():
    calls = []
    x = ad.Tensor(np.ones(2), requires_grad=True)
    with ad.Tape() as tape:
        a = ad.mul_scalar(x, 3.0)
        b = ad.add(a, a)
        loss = ad.total(b)
        for node in tape.nodes:
            fn = node._backward
            node._backward = (lambda f, n: lambda g: (calls.append(n.node), f(g))[1])(fn, node)
        tape.backward(loss)
    assert [n.node for n in tape.nodes] == [0, 1, 2]
    assert calls == [2, 1, 0]
    assert x.grad.tolist() == [6.0, 6.0]


# --- transforms -------------------------------------------------------------------


def naive_rdft(x):
    n = len(x)
    k = np.arange(n // 2 + 1)
    return np.array([sum(x[j] * np.exp(-2j * np.pi * kk * j / n) for j in range(n)) for kk in k])


@pytest.mark.parametrize("n", [8, 16, 51, 64, 101])
def test_rfft_matches_naive_dft(n):
    x = np.random.default_rng(n).standard_normal(n)
    assert np.allclose(ad.rfft_axis(x).data, naive_rdft(x), atol=1e-10, rtol=0)


@pytest.mark.parametrize("n", [8, 16, 32, 51, 64, 101, 128])
def test_round_trip_and_parseval(n):
    rng = np.random.default_rng(n)
    for _ in range(100):
        x = rng.standard_normal(n)
        X = ad.rfft_axis(x).data
        assert np.max(np.abs(ad.irfft_axis(X, n).data - x)) < 1e-12
        w = np.full(len(X), 2.0)
        w[0] = 1.0
        if n % 2 == 0:
            w[-1] = 1.0
        assert abs(np.sum(x * x) - np.sum(w * np.abs(X) ** 2) / n) < 1e-10 * max(1.0, np.sum(x * x))


def test_pure_tone():
    n = 51
    x = np.cos(2 * np.pi * 3 * np.arange(n) / n)
    X = np.abs(ad.rfft_axis(x).data)
    assert X[3] == pytest.approx(n / 2)
    assert np.max(np.delete(X, 3)) <= 1e-10


def test_mode_mix_identity_and_truncation():
    rng = np.random.default_rng(1)
    ct = ad.rfft_axis(rng.standard_normal((2, 16, 3)), axis=1)
    ident = np.zeros((9, 3, 3, 2))
    ident[:, np.arange(3), np.arange(3), 0] = 1.0
    assert np.allclose(ad.mode_mix(ct, ident, 9).data, ct.data, atol=1e-14, rtol=0)
    tone = np.cos(2 * np.pi * 6 * np.arange(16) / 16)[None, :, None] * np.ones((1, 1, 3))
    out = ad.mode_mix(ad.rfft_axis(tone, axis=1), rng.standard_normal((5, 3, 3, 2)), 5).data
    assert np.max(np.abs(out)) <= 1e-12


def compose_2d(x, k, mt, mx):
    """The fused 2-D spectral convolution spelled out with primitive ops."""
    b, c, nt, n = x.shape
    cout = k.shape[3]
    keep_t = ad.spectral_modes(nt, mt)
    a = ad.take(ad.rfft_axis(x, 3), np.arange(mx), 3)
    a = ad.take(ad.fft_axis(a, 2), keep_t, 2)
    a = ad.reshape(ad.transpose(a, (0, 2, 3, 1)), (b, 2 * mt * mx, c))
    y = ad.mode_mix(a, ad.reshape(k, (2 * mt * mx, c, cout, 2)), 2 * mt * mx)
    y = ad.transpose(ad.reshape(y, (b, 2 * mt, mx, cout)), (0, 3, 1, 2))
    y = ad.ifft_axis(ad.place(y, keep_t, 2, nt), 2)
    return ad.irfft_axis(ad.place(y, np.arange(mx), 3, n // 2 + 1), n, 3)


def compose_1d(x, k, mx):
    b, c, n = x.shape
    a = ad.transpose(ad.take(ad.rfft_axis(x, 2), np.arange(mx), 2), (0, 2, 1))
    y = ad.transpose(ad.mode_mix(a, k, mx), (0, 2, 1))
    return ad.irfft_axis(ad.place(y, np.arange(mx), 2, n // 2 + 1), n, 2)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000), nt=st.integers(6, 20), n=st.integers(6, 20))
def test_fused_2d_matches_primitives(seed, nt, n):
    rng = np.random.default_rng(seed)
    mt, mx = nt // 3, n // 2 + 1
    x = ad.Tensor(rng.standard_normal((2, 3, nt, n)), True)
    k = ad.Tensor(rng.standard_normal((2 * mt, mx, 3, 2, 2)), True)
    r = rng.standard_normal((2, 2, nt, n))
    grads = []
    for f in (lambda: ad.spectral_conv(x, k, (mt, mx)), lambda: compose_2d(x, k, mt, mx)):
        x.grad = k.grad = None
        with ad.Tape() as tape:
            y = f()
            tape.backward(ad.total(ad.pointwise_mul(y, ad.Tensor(r))))
        grads.append((y.data, x.grad, k.grad))
    for u, v in zip(*grads):
        assert np.allclose(u, v, atol=1e-12, rtol=1e-12)


def test_fused_1d_matches_primitives():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 4, 51))
    k = rng.standard_normal((16, 4, 5, 2))
    assert np.allclose(ad.spectral_conv(x, k, (16,)).data, compose_1d(x, k, 16).data, atol=1e-12, rtol=0)


# --- optimizer -----------------------------------------------------------------------


def test_adam_first_step():
    w = ad.Tensor(np.array([1.0]), requires_grad=True)
    opt = ad.Adam([w], lr=1e-3)
    with ad.Tape() as tape:
        tape.backward(ad.mse(w, np.zeros(1)))
    opt.step()
    assert w.data[0] == pytest.approx(1.0 - 1e-3, abs=1e-9)


def test_adam_zero_gradient():
    w = ad.Tensor(np.array([0.7, -0.2]), requires_grad=True)
    opt = ad.Adam([w])
    w.grad = np.zeros(2)
    opt.step()
    assert w.data.tolist() == [0.7, -0.2]
    ad.adam_step([w], [np.zeros(2)], opt)
    assert w.data.tolist() == [0.7, -0.2] and opt.step_count == 2


def test_adam_quadratic():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((6, 6))
    h = a @ a.T + np.eye(6)
    w = ad.Tensor(rng.standard_normal(6), requires_grad=True)
    opt = ad.Adam([w], lr=0.05)

    def loss_value():
        return 0.5 * w.data @ h @ w.data

    start = loss_value()
    for _ in range(200):
        opt.zero_grad()
        w.grad = h @ w.data
        opt.step()
    assert loss_value() < start / 100


def test_lr_schedule():
    assert ad.step_decay_lr(0) == 1e-3
    assert ad.step_decay_lr(99) == 1e-3
    assert ad.step_decay_lr(100) == 5e-4
    assert ad.step_decay_lr(250) == pytest.approx(2.5e-4)
