"""Initial-condition sampling, supervised record generation and the NOBSDS01 file."""

from __future__ import annotations

import enum
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, split_payload, write_container
from .errors import HeaderMismatch, NobsError, RecordFailure
from .observers import (
    ExponentialGain,
    PrescribedTimeGain,
    TrafficObserverGains,
    injection_from_dict,
    run_observer_arz,
    run_observer_prescribed_time,
    run_observer_reaction_diffusion,
)
from .pde import (
    TRAFFIC_CHANNELS,
    ArzParams,
    Grid,
    MeasurementKind,
    MeasurementSeries,
    ReactionDiffusionParams,
    Scheme,
    Trajectory,
    extract_measurements,
    simulate_arz,
    simulate_reaction_diffusion,
)

MAGIC = b"NOBSDS01"

# sampling box for the traffic reference state, SI units
RHO_STAR_RANGE = (0.110, 0.130)  # veh/m  (110-130 veh/km)
V_STAR_RANGE = (10.0, 12.0)  # m/s


class System(str, enum.Enum):
    REACTION_DIFFUSION = "reaction_diffusion"
    PRESCRIBED_TIME = "prescribed_time"
    TRAFFIC = "traffic"


class Split(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"


def make_rng(seed):
    """Counter-based generator keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF))


def record_seed(base, index):
    return int(np.random.SeedSequence([int(base), int(index)]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class SineModes:
    """Random sum of boundary-compatible sine modes.

    ``dirichlet_neumann`` uses sin((k - 1/2) pi x) (zero value at 0, zero
    slope at 1); ``dirichlet_dirichlet`` uses sin(k pi x).
    """

    K: int = 8
    decay: float = 2.0
    boundary: str = "dirichlet_neumann"

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ValueError("K must be a positive integer")
        if not self.decay > 0:
            raise ValueError("decay must be positive")
        if self.boundary not in ("dirichlet_neumann", "dirichlet_dirichlet"):
            raise ValueError(f"unknown boundary pair {self.boundary!r}")

    def coefficients(self, rng):
        return rng.standard_normal(self.K) * np.arange(1, self.K + 1) ** -self.decay


def sine_modes(x, coeffs, boundary="dirichlet_neumann"):
    k = np.arange(1, len(coeffs) + 1)
    freq = (k - 0.5) * np.pi if boundary == "dirichlet_neumann" else k * np.pi
    u = np.sin(np.outer(x, freq)) @ np.asarray(coeffs, dtype=np.float64)
    u[0] = 0.0
    if boundary == "dirichlet_dirichlet":
        u[-1] = 0.0
    return u


@dataclass(frozen=True)
class TrafficPerturbation:
    """Reference state plus smooth relative bumps that vanish at both ends."""

    amp_rho: float = 0.05
    amp_v: float = 0.05
    rho_star: float = 0.12
    v_star: float = 10.0

    def __post_init__(self):
        if not (0 <= self.amp_rho < 1 and 0 <= self.amp_v < 1):
            raise ValueError("relative amplitudes must lie in [0, 1) to keep the state positive")

    def bump(self, x, rng):
        s = np.pi * x / x[-1]
        c = rng.standard_normal(2)
        b = np.sin(s) ** 2 * (c[0] + c[1] * np.cos(s))
        peak = np.max(np.abs(b))
        return b / peak if peak > 0 else b


@dataclass(frozen=True)
class IcSpec:
    family: object
    seed: int = 0


def sample_ic(spec, grid):
    """Initial state(s) for ``spec`` on ``grid``; shape (nx,) or a (rho, v) pair."""
    rng = make_rng(spec.seed)
    fam = spec.family
    if isinstance(fam, SineModes):
        return sine_modes(grid.x, fam.coefficients(rng), fam.boundary)
    if isinstance(fam, TrafficPerturbation):
        rho = fam.rho_star * (1.0 + fam.amp_rho * fam.bump(grid.x, rng))
        v = fam.v_star * (1.0 + fam.amp_v * fam.bump(grid.x, rng))
        return rho, v
    raise TypeError(f"unknown initial-condition family {fam!r}")


@dataclass
class DatasetRecord:
    ic_hat: np.ndarray  # (components, nx)
    measurements: MeasurementSeries
    target: Trajectory
    meta: dict = field(default_factory=dict)


@dataclass
class Dataset:
    system: System
    grid: Grid
    records: list
    split: Split = Split.TRAIN
    params: dict = field(default_factory=dict)
    observer: dict = field(default_factory=dict)
    normalization: dict | None = None

    def __post_init__(self):
        self.system = System(self.system)
        self.split = Split(self.split)

    def __len__(self):
        return len(self.records)

    @property
    def kind(self):
        return SYSTEMS[self.system].kind

    @property
    def components(self):
        return 2 if self.system is System.TRAFFIC else 1

    def arrays(self):
        """Stacked (ic_hat, measurements, targets) over all records."""
        ic = np.stack([r.ic_hat for r in self.records])
        ms = np.stack([r.measurements.values for r in self.records])
        tg = np.stack([r.target.values for r in self.records])
        return ic, ms, tg

    def subset(self, indices, split=None):
        return Dataset(
            self.system,
            self.grid,
            [self.records[i] for i in indices],
            self.split if split is None else split,
            dict(self.params),
            dict(self.observer),
            self.normalization,
        )


def channel_stats(values, axes):
    mean = values.mean(axis=axes)
    std = values.std(axis=axes)
    std = np.where(std > 0, std, 1.0)
    return {"mean": mean.tolist(), "std": std.tolist()}


def compute_normalization(ds):
    """Per-channel mean/std over the given (training) records."""
    ic, ms, tg = ds.arrays()
    return {
        "ic_hat": channel_stats(ic, (0, 2)),
        "measurements": channel_stats(ms, (0, 2)),
        "target": channel_stats(tg, (0, 2, 3)),
    }


def with_normalization(train, test=None):
    """Attach train statistics to the train split and, unchanged, to the test split."""
    stats = compute_normalization(train)
    train.normalization = stats
    if test is not None:
        test.normalization = stats
    return train, test


# --- per-system generation ----------------------------------------------------


@dataclass(frozen=True)
class SystemSetup:
    kind: MeasurementKind
    default_grid: Grid
    default_params: dict
    default_observer: dict
    default_family: object


SYSTEMS = {
    System.REACTION_DIFFUSION: SystemSetup(
        MeasurementKind.DIRICHLET_AT_1,
        Grid(nx=51, dx=0.02, nt=50, dt=0.0025),
        ReactionDiffusionParams.one_peak().to_dict(),
        {"scheme": Scheme.IMPLICIT_EULER.value},
        SineModes(8, 2.0, "dirichlet_neumann"),
    ),
    System.PRESCRIBED_TIME: SystemSetup(
        MeasurementKind.NEUMANN_AT_1,
        Grid(nx=51, dx=0.02, nt=99, dt=0.006),
        ReactionDiffusionParams.constant(12.0, right_bc="dirichlet").to_dict(),
        {"T_horizon": 0.6, "mu": 1.0, "n_terms": 8},
        SineModes(8, 2.0, "dirichlet_dirichlet"),
    ),
    System.TRAFFIC: SystemSetup(
        MeasurementKind.TRAFFIC_TRIPLE,
        Grid(nx=51, dx=10.0, nt=480, dt=0.25),
        ArzParams().to_dict(),
        {"injection": {"type": "none"}},
        TrafficPerturbation(0.05, 0.05),
    ),
}


def channel_names(system):
    system = System(system)
    if system is System.TRAFFIC:
        return {"ic_hat": ["rho_hat", "v_hat"], "measurements": list(TRAFFIC_CHANNELS), "target": ["rho_hat", "v_hat"]}
    meas = "u_at_1" if system is System.REACTION_DIFFUSION else "u_x_at_1"
    return {"ic_hat": ["u_hat"], "measurements": [meas], "target": ["u_hat"]}


def traffic_params(base, rho_star, v_star):
    d = dict(base)
    d.update(rho_star=rho_star, v_star=v_star)
    return ArzParams.from_dict(d)


def run_observer(system, ms, grid, params, observer, ic_hat, meta=None):
    """Conventional observer for one record; ``meta`` carries per-record state."""
    system = System(system)
    if system is System.REACTION_DIFFUSION:
        p = ReactionDiffusionParams.from_dict(params)
        gain = ExponentialGain.for_params(p, grid)
        return run_observer_reaction_diffusion(ms, gain, p, grid, ic_hat[0], observer.get("scheme", "implicit_euler"))
    if system is System.PRESCRIBED_TIME:
        p = ReactionDiffusionParams.from_dict(params)
        cfg = PrescribedTimeGain(observer["T_horizon"], observer["mu"], observer["n_terms"]).on_grid(grid)
        return run_observer_prescribed_time(ms, cfg, p, grid, ic_hat[0])
    ap = traffic_params(params, meta["rho_star"], meta["v_star"])
    gains = TrafficObserverGains(ap, injection_from_dict(observer.get("injection", {})))
    return run_observer_arz(ms, gains, grid, ic_hat)


def make_record(system, index, seed, grid, params, observer, family):
    """Sample, simulate, measure and observe one record."""
    system = System(system)
    rseed = record_seed(seed, index)
    if system is System.TRAFFIC:
        rng = make_rng(rseed)
        rho_star = float(rng.uniform(*RHO_STAR_RANGE))
        v_star = float(rng.uniform(*V_STAR_RANGE))
        ap = traffic_params(params, rho_star, v_star)
        fam = TrafficPerturbation(family.amp_rho, family.amp_v, rho_star, v_star)
        rho0, v0 = sample_ic(IcSpec(fam, record_seed(rseed, 1)), grid)
        plant = simulate_arz(rho0, v0, ap, grid, ap.q_star, ap.v_star)
        ic_hat = np.stack([np.full(grid.nx, rho_star), np.full(grid.nx, v_star)])
        meta = {"seed": rseed, "rho_star": rho_star, "v_star": v_star}
    else:
        p = ReactionDiffusionParams.from_dict(params)
        u0 = sample_ic(IcSpec(family, rseed), grid)
        scheme = observer.get("scheme", "implicit_euler")
        plant = simulate_reaction_diffusion(u0, p, grid, scheme)
        ic_hat = np.zeros((1, grid.nx))
        meta = {"seed": rseed}
        meta.update({k: params[k] for k in ("epsilon", "alpha", "beta", "lam")})
    ms = extract_measurements(plant, SYSTEMS[system].kind)
    target = run_observer(system, ms, grid, params, observer, ic_hat, meta)
    return DatasetRecord(ic_hat, ms, target, meta)


def _make_record_safe(args):
    system, index = args[0], args[1]
    try:
        return make_record(*args)
    except NobsError as exc:
        raise RecordFailure(index, exc) from exc


def generate_dataset(system, n, grid=None, params=None, observer=None, seed=0, family=None,
                     split=Split.TRAIN, first_index=0, workers=1):
    """Generate ``n`` records; record i depends only on (seed, first_index + i)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    system = System(system)
    setup = SYSTEMS[system]
    grid = setup.default_grid if grid is None else grid
    params = dict(setup.default_params, **(params or {}))
    observer = dict(setup.default_observer, **(observer or {}))
    family = setup.default_family if family is None else family
    jobs = [(system, first_index + i, seed, grid, params, observer, family) for i in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_make_record_safe, jobs, chunksize=max(1, n // (4 * workers))))
    else:
        records = [_make_record_safe(j) for j in jobs]
    return Dataset(system, grid, records, split, params, observer)


def train_test(system, n_train, n_test, seed=0, workers=1, **kwargs):
    """Disjoint train/test splits (test indices follow train) sharing train statistics."""
    train = generate_dataset(system, n_train, seed=seed, workers=workers, split=Split.TRAIN, **kwargs)
    test = generate_dataset(system, n_test, seed=seed, workers=workers, split=Split.TEST,
                            first_index=n_train, **kwargs)
    return with_normalization(train, test)


def replay_record(ds, i):
    """Re-run the conventional observer on a stored record."""
    r = ds.records[i]
    return run_observer(ds.system, r.measurements, ds.grid, ds.params, ds.observer, r.ic_hat, r.meta)


# --- NOBSDS01 -----------------------------------------------------------------


def _header(ds):
    shapes = [
        {"ic_hat": list(r.ic_hat.shape), "measurements": list(r.measurements.values.shape),
         "target": list(r.target.values.shape)}
        for r in ds.records
    ]
    return {
        "format": MAGIC.decode(),
        "system": ds.system.value,
        "split": ds.split.value,
        "grid": ds.grid.to_dict(),
        "n_records": len(ds.records),
        "payload_order": ["ic_hat", "measurements", "target"],
        "channels": channel_names(ds.system),
        "measurement_kind": ds.kind.value,
        "shapes": shapes,
        "normalization": ds.normalization,
        "params": ds.params,
        "observer": ds.observer,
        "meta": [r.meta for r in ds.records],
    }


def write_dataset(ds, path):
    arrays = []
    for r in ds.records:
        arrays += [r.ic_hat, r.measurements.values, r.target.values]
    return write_container(path, MAGIC, _header(ds), arrays)


def read_dataset(path):
    header, payload = read_container(path, MAGIC)
    try:
        n = int(header["n_records"])
        shapes = header["shapes"]
        grid = Grid.from_dict(header["grid"])
        system = System(header["system"])
    except (KeyError, TypeError, ValueError) as exc:
        raise HeaderMismatch(f"{path}: malformed header: {exc}") from exc
    metas = header.get("meta") or [{} for _ in range(n)]
    if n < 0:
        raise HeaderMismatch(f"{path}: negative record count")
    if len(shapes) != n or len(metas) != n:
        # the record count governs: fewer declared shapes than records is a header fault
        raise HeaderMismatch(f"{path}: {n} records declared but {len(shapes)} shape entries")
    flat = []
    for s in shapes:
        flat += [tuple(s["ic_hat"]), tuple(s["measurements"]), tuple(s["target"])]
    arrays = split_payload(payload, flat, path)
    kind = MeasurementKind(header["measurement_kind"])
    records = []
    try:
        for i in range(n):
            ic, ms, tg = arrays[3 * i : 3 * i + 3]
            records.append(DatasetRecord(ic, MeasurementSeries(kind, ms, grid), Trajectory(grid, tg), metas[i]))
    except NobsError as exc:
        raise HeaderMismatch(f"{path}: record shapes disagree with the grid: {exc}") from exc
    return Dataset(system, grid, records, header["split"], header.get("params") or {},
                   header.get("observer") or {}, header.get("normalization"))
