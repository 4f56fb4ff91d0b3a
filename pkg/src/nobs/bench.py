"""Error metrics, wall-clock benchmarks and report/plot-data export."""

from __future__ import annotations

import csv
import json
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import replay_record
from .errors import IoError, MissingCheckpoint, ShapeMismatch, ZeroReference
from .pde import l2_norm

METHODS = ("conventional", "feedforward", "recurrent")
CSV_COLUMNS = (
    "method",
    "seconds_per_instance",
    "n_instances",
    "mean_rel_l2",
    "speedup",
    "baseline_seconds",
    "repetitions",
    "cpu",
    "threads",
    "build",
)
FINGERPRINT_KEYS = ("cpu", "threads", "build")


def _values(x):
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def relative_l2(pred, ref):
    """``||pred - ref|| / ||ref||`` over the flattened space-time record."""
    p, r = _values(pred), _values(ref)
    if p.shape != r.shape:
        raise ShapeMismatch(f"prediction shape {p.shape} differs from reference {r.shape}")
    denom = np.linalg.norm(r.ravel())
    if denom == 0:
        raise ZeroReference("reference has zero norm")
    return float(np.linalg.norm((p - r).ravel()) / denom)


def mean_relative_l2(preds, refs):
    """Average of per-record errors (divides by the number of records)."""
    errs = [relative_l2(p, r) for p, r in zip(preds, refs)]
    if not errs:
        raise ValueError("no records to average")
    return float(np.mean(errs))


def error_evolution(estimate, truth, components_scale=None):
    """``(t, ||u_hat(., t) - u(., t)||)`` for two trajectories on one grid.

    Scalar fields use the trapezoid L2 norm; two-component fields are scaled
    per component (e.g. by the reference state) and combined in quadrature.
    """
    g = truth.grid
    d = _values(estimate) - _values(truth)
    if components_scale is not None:
        d = d / np.asarray(components_scale, dtype=np.float64)[:, None, None]
    per = l2_norm(d, g.dx)  # (components, nt+1)
    return g.t, np.sqrt((per**2).sum(axis=0))


def _cpu_model():
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine()


def environment_fingerprint(threads=None):
    if threads is None:
        threads = int(os.environ.get("OMP_NUM_THREADS") or os.environ.get("OPENBLAS_NUM_THREADS") or os.cpu_count() or 1)
    return {
        "cpu": _cpu_model(),
        "threads": int(threads),
        "build": f"python {platform.python_version()}, numpy {np.__version__}, float64",
    }


@dataclass
class BenchReport:
    method: str
    seconds_per_instance: float
    n_instances: int
    mean_rel_l2: float
    speedup: float
    baseline_seconds: float
    repetitions: int
    fingerprint: dict = field(default_factory=dict)
    samples: list = field(default_factory=list)

    def validate(self):
        missing = [k for k in FINGERPRINT_KEYS if k not in (self.fingerprint or {})]
        if missing:
            raise ValueError(f"report lacks environment fingerprint fields {missing}")
        if not self.seconds_per_instance > 0:
            raise ValueError("seconds_per_instance must be positive")
        return self

    def to_dict(self):
        return asdict(self)

    def row(self):
        d = asdict(self)
        fp = d.pop("fingerprint")
        d.pop("samples")
        d.update({k: fp.get(k) for k in FINGERPRINT_KEYS})
        return [d[c] for c in CSV_COLUMNS]

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


def time_per_instance(fn, items, warmup=3, repeats=10):
    """Median over ``repeats`` passes of (pass time / len(items)); warm-ups excluded."""
    items = list(items)
    for _ in range(warmup):
        for it in items:
            fn(it)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for it in items:
            fn(it)
        samples.append((time.perf_counter() - t0) / len(items))
    return statistics.median(samples), samples


def _runner(method, ds, model):
    if method == "conventional":
        return lambda i: replay_record(ds, i)
    if model is None:
        raise MissingCheckpoint(f"method {method!r} needs a checkpoint")
    if model.mode.value != method:
        raise ValueError(f"checkpoint holds a {model.mode.value} model, not {method}")
    records = ds.records
    return lambda i: model.predict(records[i].ic_hat, records[i].measurements)


def bench(method, ds, model=None, n_instances=10, warmup=3, repeats=10, baseline_seconds=None, threads=None):
    """Time end-to-end estimation (measurements in, trajectory out) per instance."""
    method = str(getattr(method, "value", method)).lower()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if isinstance(model, (str, os.PathLike)):
        from .fno import FnoObserver

        if not os.path.exists(model):
            raise MissingCheckpoint(f"checkpoint {model} not found")
        model = FnoObserver.load(model)
    n = min(n_instances, len(ds))
    if n < 1:
        raise ValueError("benchmark needs at least one instance")
    fn = _runner(method, ds, model)
    idx = list(range(n))
    seconds, samples = time_per_instance(fn, idx, warmup, repeats)
    preds = [fn(i) for i in idx]
    err = mean_relative_l2(preds, [ds.records[i].target for i in idx])
    if baseline_seconds is None:
        baseline_seconds = seconds if method == "conventional" else \
            time_per_instance(_runner("conventional", ds, None), idx, warmup, repeats)[0]
    return BenchReport(method, seconds, n, err, baseline_seconds / seconds, baseline_seconds,
                       repeats, environment_fingerprint(threads), samples).validate()


def export_report(reports, fmt, path):
    fmt = fmt.lower()
    try:
        with open(path, "w", newline="") as fh:
            if fmt == "json":
                json.dump([r.validate().to_dict() for r in reports], fh, indent=2)
            elif fmt == "csv":
                w = csv.writer(fh)
                w.writerow(CSV_COLUMNS)
                for r in reports:
                    w.writerow(r.validate().row())
            else:
                raise ValueError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise IoError(f"cannot write report {path}: {exc}") from exc


def load_report(path):
    try:
        with open(path) as fh:
            return [BenchReport.from_dict(d) for d in json.load(fh)]
    except OSError as exc:
        raise IoError(f"cannot read report {path}: {exc}") from exc


def export_plotdata(series, path):
    """Write ``{method: (t, err)}`` as long-format CSV: method, t, l2_error."""
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("method", "t", "l2_error"))
            for name, (t, err) in series.items():
                for ti, ei in zip(np.asarray(t), np.asarray(err)):
                    w.writerow((name, repr(float(ti)), repr(float(ei))))
    except OSError as exc:
        raise IoError(f"cannot write plot data {path}: {exc}") from exc


def load_plotdata(path):
    out = {}
    try:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                t, e = out.setdefault(row["method"], ([], []))
                t.append(float(row["t"]))
                e.append(float(row["l2_error"]))
    except OSError as exc:
        raise IoError(f"cannot read plot data {path}: {exc}") from exc
    return {k: (np.array(t), np.array(e)) for k, (t, e) in out.items()}
