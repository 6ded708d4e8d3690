"""Command-line entry point: ``eventscan <command> [options]``.

Exit codes: 0 success, 1 configuration error, 2 verification failure,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import ConfigError, RunConfig

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_NUMERIC = 0, 1, 2, 3
SWEEP_COLUMNS = ("delta_t", "mean_acc", "std_acc", "runs")
SWEEP_RUN_COLUMNS = ("delta_t", "seed", "test_acc", "val_acc", "epochs")


def _add_common(p: argparse.ArgumentParser, with_config: bool = True) -> None:
    if with_config:
        p.add_argument("--config", default="yinyang", help="YAML file or preset name (yinyang, mnist, mnist_desk)")
        p.add_argument("--out", default=None, help="output directory (overrides the config)")
        p.add_argument("--workers", type=int, default=None, help="worker processes")
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")
    p.add_argument("--deterministic", action="store_true", help="single worker, no wall-clock fields")
    p.add_argument("--float32", action="store_true", help="run the neuron dynamics in float32")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eventscan", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write metrics.jsonl plus a checkpoint")
    _add_common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--delta-t", type=float, default=0.0, help="quantize spike times to this step (s)")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.npz")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_common(p)
    p.add_argument("--checkpoint", default=None, help="defaults to OUT/checkpoint.npz")
    p.add_argument("--split", choices=("test", "val", "train"), default="test")
    p.add_argument("--chunk", type=int, default=None, help="chunk size K for evaluation")
    p.add_argument("--delta-t", type=float, default=0.0)

    p = sub.add_parser("bench", help="time serial vs parallel forward+backward; writes bench.csv")
    _add_common(p)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--batches", type=int, default=None)
    p.add_argument("--hidden", type=int, nargs="+", default=None)
    p.add_argument("--batch", type=int, nargs="+", default=None)
    p.add_argument("--chunk", type=int, nargs="+", default=None)

    p = sub.add_parser("solver-check", help="compare spike-time solvers to the closed form")
    _add_common(p, with_config=False)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-7)

    p = sub.add_parser("gradcheck", help="compare tape gradients to finite differences")
    _add_common(p, with_config=False)
    p.add_argument("--nets", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-3)

    p = sub.add_parser("quantize-sweep", help="train per (delta_t, seed); writes sweep.csv")
    _add_common(p)
    p.add_argument("--delta-ts", type=float, nargs="+", default=None)
    p.add_argument("--seeds", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    return ap


def _load_config(args) -> RunConfig:
    cfg = config_mod.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    if args.deterministic:
        cfg.deterministic = True
    if args.float32:
        cfg.float32 = True
    if cfg.deterministic:
        cfg.workers = 1
    return cfg.validate()


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, default=float))


# train / eval -------------------------------------------------------------


def cmd_train(cfg: RunConfig, epochs: int | None = None, delta_t: float = 0.0, resume: bool = False) -> dict:
    from .runner import JsonlWriter, load_datasets, new_run, train_config
    from .training import evaluate, fit, load_checkpoint, save_checkpoint

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(config_mod.dumps(cfg))
    data = load_datasets(cfg)
    state = new_run(cfg, data)
    ckpt = out / "checkpoint.npz"
    if resume and ckpt.exists():
        load_checkpoint(ckpt, state)
    tcfg = train_config(cfg, delta_t, epochs)
    metrics = out / "metrics.jsonl"
    if not resume and metrics.exists():
        metrics.unlink()

    with JsonlWriter(metrics) as log:
        def record(rec):
            if cfg.deterministic:
                rec = {k: v for k, v in rec.items() if k != "seconds"}
            log(rec)

        t0 = time.monotonic()
        try:
            fit(state, data.train, tcfg, data.val, log=record)
        finally:
            save_checkpoint(ckpt, state)
    result = {"epochs": state.epoch, "steps": state.opt.step}
    if state.epoch > 0:
        test = evaluate(state.net, data.test, delta_t=delta_t)
        val = evaluate(state.net, data.val, delta_t=delta_t)
        result.update({"test_acc": test["acc"], "test_loss": test["loss"], "val_acc": val["acc"], "work": test["layers"]})
        if not cfg.deterministic:
            result["seconds"] = time.monotonic() - t0
    (out / "result.json").write_text(json.dumps(result, indent=2, default=float))
    return result


def cmd_eval(cfg: RunConfig, checkpoint=None, split_name: str = "test", chunk=None, delta_t: float = 0.0) -> dict:
    from .runner import load_datasets, new_run
    from .training import evaluate, load_checkpoint

    data = load_datasets(cfg)
    state = new_run(cfg, data)
    path = Path(checkpoint) if checkpoint else Path(cfg.out) / "checkpoint.npz"
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    load_checkpoint(path, state)
    if chunk is not None:
        state.net.chunk_size = chunk
    ds = getattr(data, split_name)
    ev = evaluate(state.net, ds, delta_t=delta_t)
    return {"split": split_name, "acc": ev["acc"], "loss": ev["loss"], "chunk": state.net.chunk_size, "layers": ev["layers"]}


# bench ----------------------------------------------------------------------


def cmd_bench(cfg: RunConfig, warmup=None, batches=None, hidden=None, batch=None, chunk=None) -> dict:
    from .bench import depth_check, run_bench, serial_scaling, write_csv

    b = cfg.bench
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    points = run_bench(
        hidden or b.hidden,
        batch or b.batch,
        chunk or b.chunk,
        b.modes,
        b.n_inputs,
        max(b.events_per_neuron // b.n_inputs, 1),
        b.duration,
        b.warmup if warmup is None else warmup,
        b.batches if batches is None else batches,
        cfg.seed,
        log=lambda p: print(json.dumps(p.row())),
    )
    write_csv(out / "bench.csv", points)
    scaling = serial_scaling(tuple(b.scaling_counts), repeats=b.scaling_repeats, seed=cfg.seed)
    depth = depth_check(seed=cfg.seed)
    summary = {"points": [p.row() for p in points], "serial_scaling": scaling, "depth": depth}
    (out / "bench_summary.json").write_text(json.dumps(summary, indent=2, default=float))
    return summary


# quantize sweep -------------------------------------------------------------


def _sweep_job(args):
    cfg_text, delta_t, seed, epochs = args
    from .runner import load_datasets, new_run, train_config
    from .training import evaluate, fit

    cfg = config_mod.loads(cfg_text)
    data = load_datasets(cfg)
    state = new_run(cfg, data, seed)
    fit(state, data.train, train_config(cfg, delta_t, epochs), data.val)
    test = evaluate(state.net, data.test, delta_t=delta_t)
    return {"delta_t": delta_t, "seed": seed, "test_acc": test["acc"], "val_acc": state.best_val, "epochs": state.epoch}


def summarize_sweep(rows: list) -> list:
    by_dt: dict = {}
    for r in rows:
        by_dt.setdefault(float(r["delta_t"]), []).append(float(r["test_acc"]))
    out = []
    for dt in sorted(by_dt):
        accs = np.array(by_dt[dt])
        out.append({"delta_t": dt, "mean_acc": float(accs.mean()), "std_acc": float(accs.std()), "runs": len(accs)})
    return out


def read_sweep_runs(path) -> list:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_quantize_sweep(cfg: RunConfig, delta_ts=None, seeds=None, epochs=None, log=print) -> list:
    """One training run per (delta_t, seed).  Finished runs found in
    OUT/sweep_runs.csv are reused, so an interrupted sweep can be resumed."""
    if cfg.dataset != "yinyang":
        raise ConfigError("quantize-sweep expects a Yin-Yang config")
    delta_ts = list(cfg.sweep.delta_ts if delta_ts is None else delta_ts)
    n_seeds = cfg.sweep.seeds if seeds is None else seeds
    epochs = epochs if epochs is not None else cfg.sweep.epochs
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    runs_path = out / "sweep_runs.csv"
    done = {(float(r["delta_t"]), int(r["seed"])) for r in read_sweep_runs(runs_path)}
    text = config_mod.dumps(cfg)
    jobs = [(text, dt, cfg.seed + s, epochs) for dt in delta_ts for s in range(n_seeds) if (dt, cfg.seed + s) not in done]
    new_file = not runs_path.exists()
    with open(runs_path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_RUN_COLUMNS)
        if new_file:
            w.writeheader()
        if cfg.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(cfg.workers) as pool:
                results = pool.map(_sweep_job, jobs)
                for r in results:
                    w.writerow(r)
                    fh.flush()
                    log(json.dumps(r))
        else:
            for job in jobs:
                r = _sweep_job(job)
                w.writerow(r)
                fh.flush()
                log(json.dumps(r))
    rows = [r for r in read_sweep_runs(runs_path) if float(r["delta_t"]) in set(map(float, delta_ts))]
    summary = summarize_sweep(rows)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        w.writerows(summary)
    return summary


# entry point ----------------------------------------------------------------


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "solver-check":
            from .verify import solver_check, solver_check_passes

            report = solver_check(args.float32, args.points)
            ok = solver_check_passes(report, args.tol)
            report["pass"] = ok
            _print(report)
            return EXIT_OK if ok else EXIT_VERIFY
        if args.command == "gradcheck":
            from .verify import gradcheck

            rep = gradcheck(args.seed or 0, args.nets)
            ok = rep["probes"] > 0 and rep["max_rel_err"] <= args.tol
            _print({k: v for k, v in rep.items() if k != "rows"} | {"pass": ok})
            return EXIT_OK if ok else EXIT_VERIFY
        cfg = _load_config(args)
        if args.command == "train":
            _print(cmd_train(cfg, args.epochs, args.delta_t, args.resume))
        elif args.command == "eval":
            _print(cmd_eval(cfg, args.checkpoint, args.split, args.chunk, args.delta_t))
        elif args.command == "bench":
            summary = cmd_bench(cfg, args.warmup, args.batches, args.hidden, args.batch, args.chunk)
            _print({"serial_scaling": summary["serial_scaling"], "depth": summary["depth"]})
        elif args.command == "quantize-sweep":
            for row in cmd_quantize_sweep(cfg, args.delta_ts, args.seeds, args.epochs):
                print(json.dumps(row))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        from .training import NumericalAbort

        if isinstance(exc, NumericalAbort):
            print(f"numerical abort: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(exc, FloatingPointError):
            print(f"numerical abort: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        raise
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
