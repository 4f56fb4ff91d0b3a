"""Command-line entry point: ``nobs <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _parse_params(items):
    out = {}
    for item in items or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise SystemExit(f"--params expects key=value, got {item!r}")
        try:
            out[key] = json.loads(val)
        except json.JSONDecodeError:
            out[key] = val
    return out


def _parse_grid(text, system):
    from .dataset import SYSTEMS, System
    from .pde import Grid

    base = SYSTEMS[System(system)].default_grid
    if not text:
        return base
    try:
        nx, dt, nt = text.split(",")
        nx, dt, nt = int(nx), float(dt), int(nt)
    except ValueError:
        raise SystemExit(f"--grid expects nx,dt,nt, got {text!r}")
    return Grid(nx=nx, dx=base.x_max / (nx - 1), nt=nt, dt=dt)


def _out_path(args, name):
    path = Path(name)
    if args.out_dir and not path.is_absolute():
        path = Path(args.out_dir) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return str(path)


def _emit(args, payload, text=None):
    if args.json:
        print(json.dumps(payload, indent=2, default=float))
    else:
        print(text if text is not None else "\n".join(f"{k}: {v}" for k, v in payload.items()))


def cmd_simulate(args):
    import numpy as np

    from .dataset import SYSTEMS, IcSpec, System, TrafficPerturbation, sample_ic
    from .pde import ArzParams, ReactionDiffusionParams, extract_measurements, simulate_arz, simulate_reaction_diffusion

    system = System(args.system)
    setup = SYSTEMS[system]
    grid = _parse_grid(args.grid, system)
    params = dict(setup.default_params, **_parse_params(args.params))
    if system is System.TRAFFIC:
        ap = ArzParams.from_dict(params)
        fam = TrafficPerturbation(args.amp, args.amp, ap.rho_star, ap.v_star)
        rho0, v0 = sample_ic(IcSpec(fam, args.seed), grid)
        traj = simulate_arz(rho0, v0, ap, grid, ap.q_star, ap.v_star)
    else:
        p = ReactionDiffusionParams.from_dict(params)
        u0 = sample_ic(IcSpec(setup.default_family, args.seed), grid)
        traj = simulate_reaction_diffusion(u0, p, grid, args.scheme)
    ms = extract_measurements(traj, setup.kind)
    out = _out_path(args, args.out)
    np.savez(out, x=grid.x, t=grid.t, values=traj.values, measurements=ms.values)
    final = float(np.linalg.norm(traj.values[:, -1]))
    _emit(args, {"system": system.value, "out": out, "grid": grid.to_dict(),
                 "initial_norm": float(np.linalg.norm(traj.values[:, 0])), "final_norm": final})


def cmd_gain(args):
    import numpy as np

    from .container import write_container
    from .dataset import MAGIC
    from .observers import ExponentialGain, PrescribedTimeGain, gain_prescribed_time
    from .pde import Grid

    grid = Grid(nx=args.nx, dx=1.0 / (args.nx - 1), nt=args.nt, dt=args.dt)
    if args.kind == "exponential":
        g = ExponentialGain.on_grid(grid, args.alpha, args.beta, args.epsilon)
        arrays = {"x": grid.x, "p1": g.sampled}
    else:
        cfg = PrescribedTimeGain(args.T, args.mu, args.n_terms).on_grid(grid)
        times = grid.t[grid.t < cfg.clamp - 1e-12]
        table = np.stack([gain_prescribed_time(grid.x, t, cfg) for t in times])
        arrays = {"x": grid.x, "t": times, "p": table}
    header = {"format": MAGIC.decode(), "content": "gain", "kind": args.kind, "grid": grid.to_dict(),
              "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
              "n_records": 0, "shapes": []}
    out = _out_path(args, args.out)
    write_container(out, MAGIC, header, list(arrays.values()))
    _emit(args, {"kind": args.kind, "out": out, "arrays": {k: list(v.shape) for k, v in arrays.items()}})


def read_gain_file(path):
    from .container import read_container, split_payload
    from .dataset import MAGIC

    header, payload = read_container(path, MAGIC)
    specs = header["arrays"]
    arrays = split_payload(payload, [tuple(s["shape"]) for s in specs], path)
    return header, {s["name"]: a for s, a in zip(specs, arrays)}


def cmd_datagen(args):
    from .dataset import System, generate_dataset, train_test, with_normalization, write_dataset

    system = System(args.system)
    grid = _parse_grid(args.grid, system)
    params = _parse_params(args.params)
    kw = dict(grid=grid, params=params)
    out = _out_path(args, args.out)
    files = {}
    if args.n_test:
        train, test = train_test(system, args.n, args.n_test, seed=args.seed, workers=args.workers, **kw)
        stem = out[:-4] if out.endswith(".bin") else out
        files["train"] = stem + "_train.bin"
        files["test"] = stem + "_test.bin"
        write_dataset(train, files["train"])
        write_dataset(test, files["test"])
    else:
        ds = generate_dataset(system, args.n, seed=args.seed, workers=args.workers, **kw)
        with_normalization(ds)
        write_dataset(ds, out)
        files["train"] = out
    _emit(args, {"system": system.value, "n": args.n, "n_test": args.n_test, "files": files})


def cmd_train(args):
    from .dataset import read_dataset
    from .fno import FnoConfig, TrainConfig, train

    ds = read_dataset(args.data)
    test = read_dataset(args.test_data) if args.test_data else None
    fc = FnoConfig(n_layers=args.layers, width=args.width, modes_x=args.modes, modes_t=args.modes_t)
    tc = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                     eval_every=args.eval_every)

    def log(epoch, h):
        if not args.json and (epoch % max(1, args.eval_every) == 0 or epoch == tc.epochs - 1):
            test_err = h["test_error"][-1] if h["test_error"] else float("nan")
            print(f"epoch {epoch:4d}  loss {h['train_loss'][-1]:.4e}  test {test_err:.4e}  "
                  f"lr {h['lr'][-1]:.2e}  {h['seconds'][-1]:.0f}s", flush=True)

    model, hist = train(args.mode, ds, fc, tc, test, log=log)
    out = _out_path(args, args.out)
    model.save(out, epoch=tc.epochs, history=hist)
    _emit(args, {"checkpoint": out, "final_train_loss": hist["train_loss"][-1],
                 "final_test_error": hist["test_error"][-1] if hist["test_error"] else None,
                 "parameters": model.n_parameters()})


def cmd_eval(args):
    import csv

    from .dataset import read_dataset
    from .fno import FnoObserver, evaluate

    model = FnoObserver.load(args.ckpt)
    ds = read_dataset(args.data)
    ev = evaluate(model, ds)
    payload = {"mode": model.mode.value, "n_records": len(ds), **ev.to_dict()}
    if args.out:
        out = _out_path(args, args.out)
        with open(out, "w", newline="") as fh:
            if args.report == "json":
                json.dump(payload, fh, indent=2)
            else:
                w = csv.writer(fh)
                w.writerow(("record", "rel_l2"))
                for i, e in enumerate(ev.per_record):
                    w.writerow((i, repr(float(e))))
        payload["out"] = out
    _emit(args, payload, f"mean relative L2: {ev.mean:.6e} over {len(ds)} records")


def cmd_bench(args):
    from .bench import bench, export_report
    from .dataset import read_dataset
    from .fno import FnoObserver

    ds = read_dataset(args.data)
    ckpts = {}
    for path in args.ckpt or []:
        m = FnoObserver.load(path)
        ckpts[m.mode.value] = m
    base = bench("conventional", ds, n_instances=args.n, warmup=args.warmup, repeats=args.repeats,
                 threads=args.threads)
    reports = [base]
    for method in args.method:
        if method == "conventional":
            continue
        reports.append(bench(method, ds, ckpts.get(method), args.n, args.warmup, args.repeats,
                             base.seconds_per_instance, args.threads))
    if args.out:
        export_report(reports, args.format, _out_path(args, args.out))
    rows = [f"{r.method:13s} {r.seconds_per_instance:.3e} s/instance  speedup {r.speedup:8.2f}  "
            f"rel L2 {r.mean_rel_l2:.3e}" for r in reports]
    _emit(args, {"reports": [r.to_dict() for r in reports]}, "\n".join(rows))


def cmd_export(args):
    from .bench import error_evolution, export_plotdata, export_report, load_report

    if args.reports:
        reports = [r for path in args.reports for r in load_report(path)]
        out = _out_path(args, args.out)
        export_report(reports, args.format, out)
        _emit(args, {"out": out, "n_reports": len(reports)})
        return

    import numpy as np

    from .dataset import SYSTEMS, IcSpec, System, TrafficPerturbation, run_observer, sample_ic
    from .fno import FnoObserver
    from .pde import ArzParams, ReactionDiffusionParams, extract_measurements, simulate_arz, simulate_reaction_diffusion

    system = System(args.system)
    setup = SYSTEMS[system]
    grid = setup.default_grid
    params = dict(setup.default_params)
    if system is System.TRAFFIC:
        ap = ArzParams.from_dict(params)
        fam = TrafficPerturbation(0.05, 0.05, ap.rho_star, ap.v_star)
        plant = simulate_arz(*sample_ic(IcSpec(fam, args.seed), grid), ap, grid, ap.q_star, ap.v_star)
        ic_hat = np.stack([np.full(grid.nx, ap.rho_star), np.full(grid.nx, ap.v_star)])
        meta = {"rho_star": ap.rho_star, "v_star": ap.v_star}
        scale = (ap.rho_star, ap.v_star)
    else:
        p = ReactionDiffusionParams.from_dict(params)
        plant = simulate_reaction_diffusion(sample_ic(IcSpec(setup.default_family, args.seed), grid), p, grid)
        ic_hat = np.zeros((1, grid.nx))
        meta, scale = {}, None
    ms = extract_measurements(plant, setup.kind)
    est = run_observer(system, ms, grid, params, setup.default_observer, ic_hat, meta)
    series = {"conventional": error_evolution(est, plant, scale)}
    for path in args.ckpt or []:
        model = FnoObserver.load(path)
        series[model.mode.value] = error_evolution(model.predict(ic_hat, ms), plant, scale)
    out = _out_path(args, args.out)
    export_plotdata(series, out)
    t, e = series["conventional"]
    _emit(args, {"out": out, "methods": list(series), "final_ratio": float(e[-1] / e[0])})


def build_parser():
    ap = argparse.ArgumentParser(prog="nobs", description="Backstepping observers and their neural-operator surrogates.")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=None, help="BLAS threads (set before numpy loads)")
    ap.add_argument("--out-dir", default=None)
    ap.add_argument("--json", action="store_true", help="machine-readable output")
    sub = ap.add_subparsers(dest="command", required=True)
    systems = ["reaction_diffusion", "prescribed_time", "traffic"]

    p = sub.add_parser("simulate", help="solve a plant and save trajectory + measurements (.npz)")
    p.add_argument("--system", choices=systems, default="reaction_diffusion")
    p.add_argument("--grid", help="nx,dt,nt")
    p.add_argument("--params", nargs="*", metavar="KEY=VALUE")
    p.add_argument("--scheme", choices=["implicit_euler", "explicit"], default="implicit_euler")
    p.add_argument("--amp", type=float, default=0.05, help="traffic perturbation amplitude")
    p.add_argument("--out", default="trajectory.npz")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gain", help="sample a backstepping gain onto a grid")
    p.add_argument("--kind", choices=["exponential", "prescribed_time"], default="exponential")
    p.add_argument("--nx", type=int, default=51)
    p.add_argument("--nt", type=int, default=99)
    p.add_argument("--dt", type=float, default=0.006)
    p.add_argument("--alpha", type=float, default=4.0)
    p.add_argument("--beta", type=float, default=2.0)
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--T", type=float, default=0.6)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--n-terms", type=int, default=8)
    p.add_argument("--out", default="gain.bin")
    p.set_defaults(func=cmd_gain)

    p = sub.add_parser("datagen", help="generate a NOBSDS01 dataset")
    p.add_argument("--system", choices=systems, default="reaction_diffusion")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--n-test", type=int, default=0, help="also write a test split")
    p.add_argument("--grid", help="nx,dt,nt")
    p.add_argument("--params", nargs="*", metavar="KEY=VALUE")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="dataset.bin")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train a neural observer")
    p.add_argument("--mode", choices=["feedforward", "recurrent"], default="feedforward")
    p.add_argument("--data", required=True)
    p.add_argument("--test-data")
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=20)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--modes", type=int, default=16)
    p.add_argument("--modes-t", type=int, default=16)
    p.add_argument("--eval-every", type=int, default=10)
    p.add_argument("--out", default="model.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", choices=["json", "csv"], default="json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time conventional vs neural observers")
    p.add_argument("--data", required=True)
    p.add_argument("--method", nargs="+", choices=["conventional", "feedforward", "recurrent"],
                   default=["conventional"])
    p.add_argument("--ckpt", nargs="*")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export", help="error-evolution plot data, or convert bench reports")
    p.add_argument("--system", choices=systems, default="prescribed_time")
    p.add_argument("--ckpt", nargs="*")
    p.add_argument("--reports", nargs="*", help="JSON reports to convert")
    p.add_argument("--format", choices=["json", "csv"], default="csv")
    p.add_argument("--out", default="error_evolution.csv")
    p.set_defaults(func=cmd_export)

    # global flags are also accepted after the subcommand
    for p in sub.choices.values():
        p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        p.add_argument("--threads", type=int, default=argparse.SUPPRESS)
        p.add_argument("--out-dir", default=argparse.SUPPRESS)
        p.add_argument("--json", action="store_true", default=argparse.SUPPRESS)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    from .errors import NobsError

    try:
        args.func(args)
    except NobsError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
