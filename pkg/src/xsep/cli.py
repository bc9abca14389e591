"""``xsep`` command line.

Exit codes: 0 success, 1 usage error, 2 data/validation failure,
3 numerical failure (NaN abort, failed self-check).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetConfig, build_dataset, family_labels, load_manifest
from .errors import DataError, NumericalError
from .losses import enumerate_combinations
from .metrics import evaluate_model
from .network import load_checkpoint, separate
from .trainer import DEFAULT_GAPS, LOG_NAME, TrainConfig, run_and_evaluate, seed_sweep, train
from .wavio import read_wav, write_wav

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GAP_SUBSETS = [(), (1,), (2,), (3,), (1, 2), (1, 3), (2, 3), (1, 2, 3)]

log = logging.getLogger("xsep")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def load_run_config(path: str | Path) -> tuple[TrainConfig, Path]:
    """Training config JSON: ``TrainConfig`` fields plus ``"data"`` (dataset dir, relative to the file)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    if "data" not in doc:
        raise DataError(f"{path}: missing 'data' (dataset directory)")
    data = Path(doc.pop("data"))
    if not data.is_absolute():
        data = path.parent / data
    try:
        return TrainConfig.from_dict(doc), data
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _workers(jobs: int) -> int:
    cap = os.environ.get("XSEP_THREADS")
    limit = int(cap) if cap and cap.isdigit() and int(cap) > 0 else (os.cpu_count() or 1)
    return max(1, min(jobs, limit))


def _run_member(args):
    config, data_dir, out_dir = args
    result = run_and_evaluate(config, load_manifest(data_dir), out_dir)
    return result.average(), {s: result.aggregate(s) for s in result.sources}


def _run_grid(configs: list[TrainConfig], data_dir: Path, out_root: Path | None, names: list[str], jobs: int):
    tasks = [(c, data_dir, out_root / n if out_root else None) for c, n in zip(configs, names)]
    workers = _workers(jobs)
    if workers == 1:
        return [_run_member(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_member, tasks))


def _fmt(v) -> str:
    return "" if v is None else f"{v:.4f}"


def _emit(text: str, out_dir: Path | None, name: str) -> None:
    sys.stdout.write(text)
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / name).write_text(text, encoding="utf-8")


# -- subcommands -------------------------------------------------------------

def cmd_gen_data(a) -> int:
    cfg = DatasetConfig(a.tracks, a.valid, a.test, a.duration, a.sample_rate, a.sources, a.seed)
    try:
        manifest = build_dataset(a.out, cfg, overwrite=a.overwrite)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    print(f"wrote {len(manifest.tracks)} tracks to {a.out} (seed={a.seed})")
    return EXIT_OK


def cmd_train(a) -> int:
    config, data = load_run_config(a.config)
    result = train(config, load_manifest(data), a.out)
    last = result.history[-1]
    print(f"seed={config.seed} best_epoch={result.best_epoch} final_train={last.train_loss:.6f} "
          f"log={Path(a.out) / LOG_NAME} checkpoint={result.checkpoint}")
    return EXIT_OK


def cmd_eval(a) -> int:
    if not Path(a.ckpt).is_file():
        raise FileNotFoundError(f"checkpoint not found: {a.ckpt}")
    network = load_checkpoint(a.ckpt)
    result = evaluate_model(network, load_manifest(a.data), a.split)
    text = result.to_csv()
    sys.stdout.write(text)
    if a.out:
        Path(a.out).write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_separate(a) -> int:
    for p in (a.ckpt, a.input):
        if not Path(p).is_file():
            raise FileNotFoundError(f"file not found: {p}")
    network = load_checkpoint(a.ckpt)
    signal, rate = read_wav(a.input)
    if rate != network.spectral.sample_rate:
        raise DataError(f"{a.input}: sample rate {rate} Hz, model expects {network.spectral.sample_rate} Hz")
    channels = signal[None] if signal.ndim == 1 else signal
    if channels.shape[-1] < 1:
        raise DataError(f"{a.input}: empty signal")
    est = np.stack([separate(network, ch) for ch in channels], axis=1)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for label, sig in zip(family_labels(network.config.J), est):
        peak = np.max(np.abs(sig)) if sig.size else 0.0
        if peak > 1.0:
            log.warning("%s estimate peaks at %.3f; clipping to [-1, 1]", label, peak)
        sig = np.clip(sig, -1.0, 1.0)
        write_wav(out / f"{label}.wav", sig[0] if sig.shape[0] == 1 else sig, rate)
        print(out / f"{label}.wav")
    return EXIT_OK


def cmd_sweep_bridges(a) -> int:
    config, data = load_run_config(a.config)
    configs = [replace(config, bridge_gaps=g) for g in GAP_SUBSETS]
    names = ["gaps_" + ("".join(map(str, g)) or "none") for g in GAP_SUBSETS]
    results = _run_grid(configs, data, Path(a.out) if a.out else None, names, a.jobs)
    sources = list(results[0][1])
    lines = ["bridge_gaps,avg_sdr_db," + ",".join(sources)]
    for g, (avg, per) in zip(GAP_SUBSETS, results):
        label = "+".join(map(str, g)) or "none"
        lines.append(",".join([label, _fmt(avg)] + [_fmt(per[s]) for s in sources]))
    _emit("\n".join(lines) + "\n", Path(a.out) if a.out else None, "sweep_bridges.csv")
    return EXIT_OK


def ablation_grid(config: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """All 8 on/off combinations of MDL, bridging and CL."""
    gaps = config.bridge_gaps or DEFAULT_GAPS
    grid = []
    for mdl_on in (False, True):
        for bridge_on in (False, True):
            for cl_on in (False, True):
                name = f"mdl{int(mdl_on)}_bridge{int(bridge_on)}_cl{int(cl_on)}"
                grid.append((name, replace(config, use_mdl=mdl_on, bridge_gaps=gaps if bridge_on else (), use_cl=cl_on)))
    return grid


def cmd_ablate(a) -> int:
    config, data = load_run_config(a.config)
    grid = ablation_grid(config)
    results = _run_grid([c for _, c in grid], data, Path(a.out) if a.out else None, [n for n, _ in grid], a.jobs)
    sources = list(results[0][1])
    lines = ["mdl,bridge,cl,avg_sdr_db," + ",".join(sources)]
    for (name, c), (avg, per) in zip(grid, results):
        flags = [str(int(c.use_mdl)), str(int(bool(c.bridge_gaps))), str(int(c.use_cl))]
        lines.append(",".join(flags + [_fmt(avg)] + [_fmt(per[s]) for s in sources]))
    _emit("\n".join(lines) + "\n", Path(a.out) if a.out else None, "ablation.csv")
    return EXIT_OK


def cmd_seed_sweep(a) -> int:
    config, data = load_run_config(a.config)
    if a.seeds < 2:
        raise UsageError("--seeds must be >= 2")
    seeds = [config.seed + k for k in range(a.seeds)]
    manifest = load_manifest(data)
    done = {}
    if _workers(a.jobs) > 1:
        with ProcessPoolExecutor(max_workers=_workers(a.jobs)) as pool:
            runs = pool.map(run_and_evaluate, [replace(config, seed=s) for s in seeds], [manifest] * len(seeds))
            done = dict(zip(seeds, runs))
    sweep = seed_sweep(config, manifest, seeds, done)
    mean, std = sweep.average_stats()
    _emit(sweep.to_csv(), Path(a.out) if a.out else None, "seed_sweep.csv")
    print(f"# average SDR {mean:.4f} +- {std:.4f} dB over {len(seeds)} seeds", file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    from .selfcheck import run_all

    failed = 0
    for name, report in run_all(a.seed):
        print(f"{name}: {report}")
        failed += not report.passed
    print(f"{'FAILED' if failed else 'OK'}: {failed} failing check(s)")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_combos(a) -> int:
    try:
        combos = enumerate_combinations(a.j)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    for c in combos:
        print(c)
    print(f"N={len(combos)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xsep", description="Multi-domain, bridged, combination-loss source separation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--tracks", type=int, default=30, help="training tracks")
    g.add_argument("--valid", type=int, default=5)
    g.add_argument("--test", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--duration", type=float, default=6.0)
    g.add_argument("--sources", type=int, default=4)
    g.add_argument("--sample-rate", type=int, default=8000)
    g.add_argument("--overwrite", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=["train", "valid", "test"])
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("separate", help="separate a WAV mixture")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_separate)

    for name, func, help_ in (
        ("sweep-bridges", cmd_sweep_bridges, "train every bridge-gap subset"),
        ("ablate", cmd_ablate, "train the 8 MDL/bridge/CL combinations"),
    ):
        q = sub.add_parser(name, help=help_)
        q.add_argument("--config", required=True)
        q.add_argument("--out")
        q.add_argument("--jobs", type=int, default=1)
        q.set_defaults(func=func)

    ss = sub.add_parser("seed-sweep", help="train and test over several seeds")
    ss.add_argument("--config", required=True)
    ss.add_argument("--seeds", type=int, required=True)
    ss.add_argument("--out")
    ss.add_argument("--jobs", type=int, default=1)
    ss.set_defaults(func=cmd_seed_sweep)

    gc = sub.add_parser("gradcheck", help="run all finite-difference gradient checks")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("combos", help="list the source combinations used by the combination loss")
    c.add_argument("--j", type=int, required=True)
    c.set_defaults(func=cmd_combos)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"xsep: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"xsep: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, OSError) as exc:
        print(f"xsep: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
