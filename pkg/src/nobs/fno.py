"""Fourier neural operator observers: a 2-D feedforward map over whole records
and a 1-D one-step recurrent map, with training, evaluation and checkpoints.

Activations are channel-first: (batch, channels, nt+1, nx) for the
feedforward model and (batch, channels, nx) for the recurrent step.
"""

from __future__ import annotations

import enum
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .container import read_container, split_payload, write_container
from .dataset import Dataset, System, make_rng
from .errors import GridMismatch, HeaderMismatch, ShapeMismatch
from .pde import Grid, MeasurementKind, Trajectory

MAGIC = b"NOBSCK01"


class Mode(str, enum.Enum):
    FEEDFORWARD = "feedforward"
    RECURRENT = "recurrent"


@dataclass(frozen=True)
class FnoConfig:
    n_layers: int = 4
    width: int = 64
    modes_x: int = 16
    modes_t: int = 16
    proj_hidden: int = 128
    in_channels: int | None = None
    out_channels: int | None = None

    def __post_init__(self):
        for name in ("n_layers", "width", "modes_x", "modes_t", "proj_hidden"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 20
    lr: float = 1e-3
    halving_period: int = 100
    teacher_forcing: bool = True
    seed: int = 0
    eval_every: int = 10

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


def fourier_layer(v, K, W, modes):
    """``relu(W v + spectral_conv(v, K))`` on a channel-first field."""
    return ad.relu(ad.add(ad.channel_mix(v, W, axis=1), ad.spectral_conv(v, K, modes)))


def _stats(norm, key):
    s = norm[key]
    return np.asarray(s["mean"], dtype=np.float64), np.asarray(s["std"], dtype=np.float64)


class FnoObserver:
    """An FNO bound to one system, grid and set of normalization statistics."""

    def __init__(self, mode, config, system, grid, normalization, seed=0, delta_scale=None):
        self.mode = Mode(mode)
        self.system = System(system)
        self.grid = grid
        self.normalization = normalization
        comps = 2 if self.system is System.TRAFFIC else 1
        meas = 3 if self.system is System.TRAFFIC else 1
        if self.mode is Mode.FEEDFORWARD:
            cin = comps + meas + 2
            if 2 * config.modes_t > grid.nt + 1:
                raise ShapeMismatch(f"2*modes_t={2 * config.modes_t} exceeds nt+1={grid.nt + 1}")
        else:
            cin = comps + 2 * meas + 1
        if config.modes_x > grid.nx // 2 + 1:
            raise ShapeMismatch(f"modes_x={config.modes_x} exceeds nx/2+1={grid.nx // 2 + 1}")
        self.config = FnoConfig(config.n_layers, config.width, config.modes_x, config.modes_t,
                                config.proj_hidden, cin, comps)
        self.components = comps
        self.meas_channels = meas
        if delta_scale is None:
            delta_scale = _stats(normalization, "target")[1].tolist()
        self.delta_scale = np.asarray(delta_scale, dtype=np.float64)
        self.params = self._init_params(make_rng(seed))

    # -- parameters --------------------------------------------------------------

    def _init_params(self, rng):
        c = self.config
        w = c.width
        p = {}

        def linear(name, fan_in, fan_out):
            b = 1.0 / np.sqrt(fan_in)
            p[name + ".w"] = ad.Tensor(_uniform(rng, (fan_in, fan_out), b), True, name + ".w")
            p[name + ".b"] = ad.Tensor(_uniform(rng, (fan_out,), b), True, name + ".b")

        linear("lift0", c.in_channels, w)
        linear("lift1", w, w)
        if self.mode is Mode.FEEDFORWARD:
            kshape = (2 * c.modes_t, c.modes_x, w, w, 2)
        else:
            kshape = (c.modes_x, w, w, 2)
        for layer in range(c.n_layers):
            scale = 1.0 / (w * w)
            p[f"fourier{layer}.k"] = ad.Tensor(scale * rng.uniform(0.0, 1.0, size=kshape), True, f"fourier{layer}.k")
            p[f"fourier{layer}.w"] = ad.Tensor(_uniform(rng, (w, w), 1.0 / np.sqrt(w)), True, f"fourier{layer}.w")
        linear("proj0", w, c.proj_hidden)
        linear("proj1", c.proj_hidden, c.out_channels)
        return p

    @property
    def modes(self):
        c = self.config
        return (c.modes_t, c.modes_x) if self.mode is Mode.FEEDFORWARD else (c.modes_x,)

    def n_parameters(self):
        return int(sum(t.data.size for t in self.params.values()))

    def forward(self, inp):
        """Raw network output for an encoded channel-first input."""
        p = self.params
        v = ad.add_bias(ad.channel_mix(inp, p["lift0.w"], axis=1), p["lift0.b"], axis=1)
        v = ad.relu(v)
        v = ad.add_bias(ad.channel_mix(v, p["lift1.w"], axis=1), p["lift1.b"], axis=1)
        for layer in range(self.config.n_layers):
            v = fourier_layer(v, p[f"fourier{layer}.k"], p[f"fourier{layer}.w"], self.modes)
        v = ad.relu(ad.add_bias(ad.channel_mix(v, p["proj0.w"], axis=1), p["proj0.b"], axis=1))
        return ad.add_bias(ad.channel_mix(v, p["proj1.w"], axis=1), p["proj1.b"], axis=1)

    # -- encodings -------------------------------------------------------------

    def _check_grid(self, grid):
        if grid != self.grid:
            raise GridMismatch(f"model grid {self.grid} differs from {grid}")

    def encode_feedforward(self, ic_hat, meas):
        """(B, c, nx) estimates and (B, m, nt+1) measurements -> (B, c+m+2, nt+1, nx)."""
        g = self.grid
        nb = ic_hat.shape[0]
        mi, si = _stats(self.normalization, "ic_hat")
        mm, sm = _stats(self.normalization, "measurements")
        ic = (ic_hat - mi[None, :, None]) / si[None, :, None]
        ms = (meas - mm[None, :, None]) / sm[None, :, None]
        out = np.empty((nb, self.config.in_channels, g.nt + 1, g.nx))
        c, m = self.components, self.meas_channels
        out[:, :c] = ic[:, :, None, :]
        out[:, c : c + m] = ms[:, :, :, None]
        out[:, c + m] = (np.arange(g.nx) / (g.nx - 1))[None, None, :]
        out[:, c + m + 1] = (np.arange(g.nt + 1) / g.nt)[None, :, None]
        return out

    def feedforward_batch(self, ic_hat, meas, encoded=None):
        """Estimated trajectories as a Tensor (B, c, nt+1, nx); row t=0 is ``ic_hat``."""
        inp = self.encode_feedforward(ic_hat, meas) if encoded is None else encoded
        raw = self.forward(ad.Tensor(inp))
        mt, st = _stats(self.normalization, "target")
        out = ad.affine(raw, st, mt, axis=1)
        keep = np.ones(out.shape)
        keep[:, :, 0, :] = 0.0
        first = np.zeros(out.shape)
        first[:, :, 0, :] = ic_hat
        return ad.add(ad.pointwise_mul(out, ad.Tensor(keep)), ad.Tensor(first))

    def encode_step(self, prev, m_now, m_next):
        """(B, c, nx) estimate and (B, m) measurements at k, k+1 -> (B, c+2m+1, nx)."""
        g = self.grid
        mt, st = _stats(self.normalization, "target")
        mm, sm = _stats(self.normalization, "measurements")
        nb = prev.shape[0]
        c, m = self.components, self.meas_channels
        out = np.empty((nb, self.config.in_channels, g.nx))
        out[:, :c] = (prev - mt[None, :, None]) / st[None, :, None]
        out[:, c : c + m] = ((m_now - mm) / sm)[:, :, None]
        out[:, c + m : c + 2 * m] = ((m_next - mm) / sm)[:, :, None]
        out[:, c + 2 * m] = np.arange(g.nx) / (g.nx - 1)
        return out

    def step_batch(self, prev, m_now, m_next):
        """Next estimate ``prev + scale * net(...)`` as a Tensor (B, c, nx)."""
        raw = self.forward(ad.Tensor(self.encode_step(prev, m_now, m_next)))
        return ad.add(ad.affine(raw, self.delta_scale, 0.0, axis=1), ad.Tensor(prev))

    def rollout_batch(self, ic_hat, meas):
        """Free rollout: (B, c, nx), (B, m, nt+1) -> (B, c, nt+1, nx) array."""
        g = self.grid
        out = np.empty((ic_hat.shape[0], self.components, g.nt + 1, g.nx))
        out[:, :, 0] = ic_hat
        prev = ic_hat
        for k in range(g.nt):
            prev = self.step_batch(prev, meas[:, :, k], meas[:, :, k + 1]).data
            out[:, :, k + 1] = prev
        return out

    # -- single-record API -------------------------------------------------------

    def _record_arrays(self, ic_hat, ms):
        self._check_grid(ms.grid)
        ic = np.asarray(ic_hat, dtype=np.float64).reshape(self.components, self.grid.nx)
        return ic[None], ms.values[None]

    def feedforward_predict(self, ic_hat, ms):
        ic, meas = self._record_arrays(ic_hat, ms)
        return Trajectory(self.grid, self.feedforward_batch(ic, meas).data[0])

    def recurrent_predict(self, ic_hat, ms):
        ic, meas = self._record_arrays(ic_hat, ms)
        return Trajectory(self.grid, self.rollout_batch(ic, meas)[0])

    def predict(self, ic_hat, ms):
        if self.mode is Mode.FEEDFORWARD:
            return self.feedforward_predict(ic_hat, ms)
        return self.recurrent_predict(ic_hat, ms)

    def predict_arrays(self, ic_hat, meas, batch=50):
        """Batched predictions for stacked records (free rollout for recurrent)."""
        outs = []
        for s in range(0, ic_hat.shape[0], batch):
            ic, ms = ic_hat[s : s + batch], meas[s : s + batch]
            if self.mode is Mode.FEEDFORWARD:
                outs.append(self.feedforward_batch(ic, ms).data)
            else:
                outs.append(self.rollout_batch(ic, ms))
        return np.concatenate(outs)

    # -- checkpoints -------------------------------------------------------------

    def save(self, path, epoch=0, history=None):
        header = {
            "format": MAGIC.decode(),
            "mode": self.mode.value,
            "system": self.system.value,
            "grid": self.grid.to_dict(),
            "config": asdict(self.config),
            "normalization": self.normalization,
            "delta_scale": self.delta_scale.tolist(),
            "epoch": int(epoch),
            "layers": [{"name": k, "shape": list(t.shape)} for k, t in self.params.items()],
            "history": history or {},
        }
        return write_container(path, MAGIC, header, [t.data for t in self.params.values()])

    @classmethod
    def load(cls, path):
        header, payload = read_container(path, MAGIC)
        try:
            cfg = FnoConfig(**header["config"])
            model = cls(header["mode"], cfg, header["system"], Grid.from_dict(header["grid"]),
                        header["normalization"], delta_scale=header["delta_scale"])
            layers = header["layers"]
        except (KeyError, TypeError, ValueError) as exc:
            raise HeaderMismatch(f"{path}: malformed checkpoint header: {exc}") from exc
        arrays = split_payload(payload, [tuple(l["shape"]) for l in layers], path)
        if [l["name"] for l in layers] != list(model.params):
            raise HeaderMismatch(f"{path}: layer names do not match the configuration")
        for l, arr in zip(layers, arrays):
            if model.params[l["name"]].shape != arr.shape:
                raise HeaderMismatch(f"{path}: layer {l['name']} has shape {arr.shape}")
            model.params[l["name"]].data = arr
        model.epoch = header.get("epoch", 0)
        model.history = header.get("history", {})
        return model


# --- training ---------------------------------------------------------------------


def increment_scale(tg):
    """Per-channel std of one-step increments of stacked targets (B, c, nt+1, nx)."""
    d = np.diff(tg, axis=2)
    s = d.std(axis=(0, 2, 3))
    return np.where(s > 0, s, 1.0)


def _loss_feedforward(model, batch_idx, enc, ic, ms, tg):
    pred = model.feedforward_batch(ic[batch_idx], ms[batch_idx], enc[batch_idx])
    return ad.rel_l2(pred, ad.Tensor(tg[batch_idx]))


def _teacher_forced(model, ic_prev, ms, idx):
    """One-step predictions from ground-truth previous states for records ``idx``.

    Returns a Tensor (len(idx), nt, c, nx) arranged record-major.
    """
    g = model.grid
    nb = len(idx)
    prev = np.ascontiguousarray(ic_prev[idx][:, :, :-1].transpose(0, 2, 1, 3)).reshape(nb * g.nt, model.components, g.nx)
    m = ms[idx]
    m_now = np.ascontiguousarray(m[:, :, :-1].transpose(0, 2, 1)).reshape(nb * g.nt, -1)
    m_next = np.ascontiguousarray(m[:, :, 1:].transpose(0, 2, 1)).reshape(nb * g.nt, -1)
    out = model.step_batch(prev, m_now, m_next)
    return ad.reshape(out, (nb, g.nt, model.components, g.nx))


def _loss_recurrent(model, batch_idx, tg, ms):
    pred = _teacher_forced(model, tg, ms, batch_idx)
    truth = np.ascontiguousarray(tg[batch_idx][:, :, 1:].transpose(0, 2, 1, 3))
    return ad.rel_l2(pred, ad.Tensor(truth))


def evaluate_arrays(model, ic, ms, tg):
    pred = model.predict_arrays(ic, ms)
    d = (pred - tg).reshape(len(tg), -1)
    r = tg.reshape(len(tg), -1)
    return np.sqrt((d * d).sum(1)) / np.sqrt((r * r).sum(1))


def teacher_forced_errors(model, ic, ms, tg, batch=20):
    """Per-record relative L2 of one-step predictions from true previous states."""
    errs = []
    for s in range(0, len(tg), batch):
        idx = np.arange(s, min(s + batch, len(tg)))
        pred = _teacher_forced(model, tg, ms, idx).data
        truth = tg[idx][:, :, 1:].transpose(0, 2, 1, 3)
        d = (pred - truth).reshape(len(idx), -1)
        r = truth.reshape(len(idx), -1)
        errs.append(np.sqrt((d * d).sum(1)) / np.sqrt((r * r).sum(1)))
    return np.concatenate(errs)


def train(mode, train_ds, fno_config=None, train_config=None, test_ds=None, log=None):
    """Fit an FNO observer to ``train_ds``; returns (model, history)."""
    mode = Mode(mode)
    fno_config = fno_config or FnoConfig()
    tc = train_config or TrainConfig()
    if train_ds.normalization is None:
        raise ValueError("training dataset carries no normalization statistics")
    ic, ms, tg = train_ds.arrays()
    delta = increment_scale(tg) if mode is Mode.RECURRENT else None
    model = FnoObserver(mode, fno_config, train_ds.system, train_ds.grid, train_ds.normalization,
                        seed=tc.seed, delta_scale=delta)
    if test_ds is not None:
        model._check_grid(test_ds.grid)
        test_arrays = test_ds.arrays()
    enc = model.encode_feedforward(ic, ms) if mode is Mode.FEEDFORWARD else None
    params = list(model.params.values())
    opt = ad.Adam(params, lr=tc.lr)
    rng = make_rng(tc.seed + 1)
    history = {"epoch": [], "train_loss": [], "lr": [], "test_epoch": [], "test_error": [], "seconds": []}
    n = len(train_ds)
    start = time.perf_counter()
    for epoch in range(tc.epochs):
        opt.lr = ad.step_decay_lr(epoch, tc.lr, tc.halving_period)
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, tc.batch_size):
            idx = np.sort(order[s : s + tc.batch_size])
            opt.zero_grad()
            with ad.Tape() as tape:
                if mode is Mode.FEEDFORWARD:
                    loss = _loss_feedforward(model, idx, enc, ic, ms, tg)
                else:
                    loss = _loss_recurrent(model, idx, tg, ms)
                tape.backward(loss)
            opt.step()
            losses.append(float(loss.data) * len(idx))
        history["epoch"].append(epoch)
        history["train_loss"].append(sum(losses) / n)
        history["lr"].append(opt.lr)
        history["seconds"].append(time.perf_counter() - start)
        last = epoch == tc.epochs - 1
        if test_ds is not None and (last or (tc.eval_every and (epoch + 1) % tc.eval_every == 0)):
            err = float(np.mean(evaluate_arrays(model, *test_arrays)))
            history["test_epoch"].append(epoch)
            history["test_error"].append(err)
        if log is not None:
            log(epoch, history)
    model.epoch = tc.epochs
    model.history = history
    return model, history


@dataclass
class Evaluation:
    per_record: np.ndarray
    mean: float
    teacher_forced: np.ndarray | None = None

    def to_dict(self):
        d = {"mean": self.mean, "per_record": self.per_record.tolist()}
        if self.teacher_forced is not None:
            d["teacher_forced_mean"] = float(np.mean(self.teacher_forced))
            d["teacher_forced"] = self.teacher_forced.tolist()
        return d


def evaluate(model, ds):
    """Relative L2 of predictions against the stored observer targets.

    Recurrent models are scored on free rollouts; one-step (teacher-forced)
    errors are reported alongside.
    """
    if isinstance(model, str):
        model = FnoObserver.load(model)
    model._check_grid(ds.grid)
    if System(ds.system) is not model.system:
        raise GridMismatch(f"model trained for {model.system.value}, dataset is {ds.system.value}")
    ic, ms, tg = ds.arrays()
    errs = evaluate_arrays(model, ic, ms, tg)
    tf = teacher_forced_errors(model, ic, ms, tg) if model.mode is Mode.RECURRENT else None
    return Evaluation(errs, float(np.mean(errs)), tf)
