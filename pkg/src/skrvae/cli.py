"""Command-line entry point: ``skrvae {generate,train,sweep,benchmark,report}``.

Every command reads an optional flat ``key = value`` config (``--config``), accepts
``--set key=value`` overrides and writes under ``--out`` (default: the config's
``out_dir``). Exit codes: 0 success, 1 usage error, 2 runtime or numerical error,
3 sweep finished with failed cells.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence


from . import __version__
from .config import ConfigError, ExperimentConfig, coerce_fields, method_label, parse_key_values
from .evaluation import (format_accuracy_grid, format_scaling_table, max_correlation,
                         scaling_rows, time_epochs, time_ratio)
from .models import ConfigurationError as ModelConfigError
from .signals import (ConfigurationError as SignalConfigError, Observation, ParseError, SourceSet,
                      generate_sources, load_csv, make_mixing, mix, read_manifest, save_csv,
                      write_manifest)
from .training import checkpoint_save, init_state, train

log = logging.getLogger("skrvae")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3
DATA_FILES = ("sources.csv", "mixing.csv", "observations.csv", "manifest.txt")
REPORT_INPUTS = ("sweep/accuracy.csv", "sweep/config.txt", "benchmark/timing.csv",
                 "benchmark/config.txt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--workers", type=int, default=1, help="parallel sweep cells")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser = _Parser(prog="skrvae", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"skrvae {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    gen = sub.add_parser("generate", parents=[common], help="write the synthetic dataset")
    gen.add_argument("--length", type=int, help="write only this prefix of the master dataset")
    tr = sub.add_parser("train", parents=[common], help="train one (method, length) cell")
    tr.add_argument("--method", help="skr | gp | vanilla | beta:<value>")
    tr.add_argument("--length", type=int, help="train on this prefix (default: full dataset)")
    tr.add_argument("--seed", type=int, help="training seed (default: train_seed)")
    sub.add_parser("sweep", parents=[common], help="methods x lengths x seeds accuracy grid")
    sub.add_parser("benchmark", parents=[common], help="per-step time against length")
    sub.add_parser("report", parents=[common], help="markdown summary of sweep and benchmark")
    return parser


# ---------------------------------------------------------------- helpers

def load_config(args) -> ExperimentConfig:
    raw: Dict[str, str] = {}
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        raw = parse_key_values(args.config.read_text())
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        raw[key] = value
    cfg = ExperimentConfig(**coerce_fields(ExperimentConfig, raw))
    cfg.validate()
    return cfg


def out_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out) if args.out is not None else Path(cfg.out_dir)


def header(cfg: ExperimentConfig, train_seeds: Sequence[int] = ()) -> str:
    seeds = ",".join(str(s) for s in train_seeds) if train_seeds else "-"
    return (f"skrvae {__version__} config_hash={cfg.hash()} data_seed={cfg.data_seed} "
            f"mixing_seed={cfg.mixing_seed} train_seed={seeds}")


def refuse_existing(paths: Sequence[Path], force: bool) -> None:
    existing = [str(p) for p in paths if p.exists()]
    if existing and not force:
        raise UsageError("refusing to overwrite " + ", ".join(existing) + " (pass --force)")


def write_csv(path: Path, rows: Sequence[Sequence], comment: str) -> None:
    buf = io.StringIO(newline="")
    buf.write(f"# {comment}\n")
    csv.writer(buf, lineterminator="\n").writerows(rows)
    path.write_text(buf.getvalue(), newline="")


def read_csv(path: Path) -> List[List[str]]:
    with open(path, newline="") as fh:
        return [row for row in csv.reader(fh) if row and not row[0].startswith("#")]


def load_dataset(root: Path):
    data = root / "data"
    missing = [f for f in DATA_FILES if not (data / f).is_file()]
    if missing:
        raise UsageError(f"dataset missing under {data}: {', '.join(missing)}; run 'generate' first")
    manifest = read_manifest(data / "manifest.txt")
    bands = [tuple(float(v) for v in chunk.split(",")) for chunk in manifest["bands"].split(";")]
    src = SourceSet(load_csv(data / "sources.csv"), bands, int(manifest["data_seed"]))
    obs = Observation(load_csv(data / "observations.csv"), int(manifest["data_seed"]),
                      int(manifest["mixing_seed"]))
    return src, obs


def prefix(src: SourceSet, obs: Observation, length: Optional[int]):
    if length is None or length == src.length:
        return src, obs
    if not 2 <= length <= src.length:
        raise UsageError(f"length {length} outside 2..{src.length} (dataset length)")
    return src.truncate(length), Observation(obs.x[:, :length].copy(), obs.source_seed,
                                             obs.mixing_seed)


def fmt(v) -> str:
    return "" if v is None else repr(float(v))


# ---------------------------------------------------------------- commands

def cmd_generate(args, cfg: ExperimentConfig) -> int:
    root = out_dir(args, cfg) / "data"
    refuse_existing([root / f for f in DATA_FILES], args.force)
    root.mkdir(parents=True, exist_ok=True)
    master = generate_sources(cfg.n_components, cfg.length, cfg.data_seed, cfg.band_list())
    src = master.truncate(args.length) if args.length else master
    mixing = make_mixing(cfg.n_components, cfg.mixing_seed)
    obs = mix(src, mixing)
    head = header(cfg)
    save_csv(root / "sources.csv", src.sources, head)
    save_csv(root / "mixing.csv", mixing.a, head)
    save_csv(root / "observations.csv", obs.x, head)
    write_manifest(root / "manifest.txt", {
        "tool": f"skrvae {__version__}", "config_hash": cfg.hash(),
        "n_components": cfg.n_components, "length": src.length, "master_length": cfg.length,
        "bands": cfg.bands, "data_seed": cfg.data_seed, "mixing_seed": cfg.mixing_seed})
    log.info("wrote %d x %d dataset to %s", cfg.n_components, src.length, root)
    return EXIT_OK


def cmd_train(args, cfg: ExperimentConfig) -> int:
    root = out_dir(args, cfg)
    method = args.method or cfg.method
    seed = cfg.train_seed if args.seed is None else args.seed
    src, obs = load_dataset(root)
    src, obs = prefix(src, obs, args.length)
    tcfg = cfg.train_config(method, seed)
    cell = root / "train" / f"{method.replace(':', '')}_L{src.length}_seed{seed}"
    files = [cell / n for n in ("checkpoint.bin", "report.csv", "recovered.csv", "summary.txt")]
    refuse_existing(files, args.force)
    cell.mkdir(parents=True, exist_ok=True)
    state = init_state(tcfg, src.n_components)

    def progress(rec):
        if rec.max_corr is not None:
            log.info("epoch %d loss %.5f max-corr %.4f", rec.epoch, rec.loss, rec.max_corr)

    report, params = train(tcfg, obs, src, state=state, progress=progress)
    checkpoint_save(files[0], state, tcfg)
    head = header(cfg, [seed])
    if report.gamma is not None:
        head += "\nfinal_gamma = " + ",".join(repr(float(g)) for g in report.gamma)
    rows = [["epoch", "loss", "recon", "kl", "gen", "disc", "seconds", "max_corr"]]
    rows += [[r.epoch, fmt(r.loss), fmt(r.recon), fmt(r.kl), fmt(r.gen), fmt(r.disc),
              fmt(r.seconds), fmt(r.max_corr)] for r in report.epochs]
    write_csv(files[1], rows, head.replace("\n", "\n# "))
    save_csv(files[2], report.recovered, header(cfg, [seed]))
    corr = max_correlation(report.recovered, src)
    summary = {"method": method, "length": src.length, "seed": seed, "epochs": tcfg.epochs,
               "max_corr": repr(corr.mean), "assigned_max_corr": repr(corr.assigned_mean),
               "xi": ",".join(repr(float(v)) for v in report.xi)}
    if report.gamma is not None:
        summary["gamma"] = ",".join(repr(float(g)) for g in report.gamma)
    write_manifest(files[3], summary)
    print(f"{method_label(method)} L={src.length} seed={seed}: max-corr {corr.mean:.4f} "
          f"(one-to-one {corr.assigned_mean:.4f}) -> {cell}")
    return EXIT_OK


def _sweep_cell(cfg: ExperimentConfig, src: SourceSet, obs: Observation, method: str,
                length: int, seed: int) -> dict:
    cell_src, cell_obs = prefix(src, obs, length)
    t0 = time.perf_counter()
    try:
        report, _ = train(cfg.train_config(method, seed), cell_obs, cell_src)
    except Exception as err:  # recorded, the sweep goes on
        log.error("cell %s L=%d seed=%d failed: %s", method, length, seed, err)
        return {"method": method, "length": length, "seed": seed, "error": str(err),
                "seconds": time.perf_counter() - t0}
    corr = max_correlation(report.recovered, cell_src)
    log.info("cell %s L=%d seed=%d max-corr %.4f", method, length, seed, corr.mean)
    return {"method": method, "length": length, "seed": seed, "error": "",
            "max_corr": corr.mean, "assigned": corr.assigned_mean, "best": corr.best,
            "gamma": report.gamma, "seconds": time.perf_counter() - t0}


def cmd_sweep(args, cfg: ExperimentConfig) -> int:
    root = out_dir(args, cfg)
    src, obs = load_dataset(root)
    sweep = root / "sweep"
    outputs = [sweep / n for n in ("accuracy.md", "accuracy.csv", "per_seed.csv", "config.txt")]
    refuse_existing(outputs, args.force)
    sweep.mkdir(parents=True, exist_ok=True)
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    cells = [(m, l, s) for l in cfg.lengths for m in cfg.methods for s in cfg.train_seeds]
    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        results = list(pool.map(lambda c: _sweep_cell(cfg, src, obs, *c), cells))

    grid: Dict = {}
    for m in cfg.methods:
        for l in cfg.lengths:
            cell = [r for r in results if r["method"] == m and r["length"] == l]
            ok = all(not r["error"] for r in cell)
            grid[(m, l)] = statistics.median(r["max_corr"] for r in cell) if ok else None
    head = header(cfg, cfg.train_seeds)
    labels = {m: method_label(m) for m in cfg.methods}
    table = format_accuracy_grid(grid, cfg.methods, cfg.lengths, labels)
    outputs[0].write_text(f"<!-- {head} -->\n\nMedian over seeds of mean max-correlation\n\n"
                          + table, newline="\n")
    rows = [["length"] + list(cfg.methods)]
    rows += [[l] + [fmt(grid[(m, l)]) if grid[(m, l)] is not None else "FAILED"
                    for m in cfg.methods] for l in cfg.lengths]
    write_csv(outputs[1], rows, head)
    detail = [["method", "length", "seed", "max_corr", "assigned_max_corr", "per_component",
               "gamma", "error"]]
    for r in results:
        best = ";".join(repr(float(b)) for b in r.get("best", []))
        gamma = ";".join(repr(float(g)) for g in (r.get("gamma") if r.get("gamma") is not None
                                                   else []))
        detail.append([r["method"], r["length"], r["seed"], fmt(r.get("max_corr")),
                       fmt(r.get("assigned")), best, gamma, r["error"]])
    write_csv(outputs[2], detail, head)
    outputs[3].write_text(cfg.to_text(), newline="\n")
    # wall-clock varies run to run, so it lives apart from the accuracy files
    write_csv(sweep / "timing.csv", [["method", "length", "seed", "seconds"]] +
              [[r["method"], r["length"], r["seed"], fmt(r["seconds"])] for r in results], head)
    print(table, end="")
    failed = [r for r in results if r["error"]]
    if failed:
        print(f"{len(failed)} of {len(results)} cells failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_benchmark(args, cfg: ExperimentConfig) -> int:
    root = out_dir(args, cfg) / "benchmark"
    outputs = [root / "timing.csv", root / "exponents.csv", root / "config.txt"]
    refuse_existing(outputs, args.force)
    root.mkdir(parents=True, exist_ok=True)
    rep = time_epochs(list(cfg.bench_methods), sorted(cfg.bench_lengths), cfg.bench_repeats,
                      cfg.bench_epochs, cfg.bench_scope, cfg.n_components, cfg.data_seed)
    head = header(cfg) + f" scope={rep.scope}"
    write_csv(outputs[0], scaling_rows(rep), head)
    write_csv(outputs[1], [["method", "exponent"]] +
              [[m, repr(e)] for m, e in sorted(rep.exponents.items())], head)
    outputs[2].write_text(cfg.to_text(), newline="\n")
    for m in rep.methods():
        ls, secs = rep.series(m)
        lines = [f"# {head}", "# length seconds_per_step"]
        lines += [f"{int(l)} {float(s)!r}" for l, s in zip(ls, secs)]
        (root / f"{m.replace(':', '')}.dat").write_text("\n".join(lines) + "\n", newline="\n")
    print(format_scaling_table(rep), end="")
    if "gp" in rep.exponents or ("gp" in rep.methods() and "skr" in rep.methods()):
        for l, r in time_ratio(rep, "gp", "skr").items():
            print(f"gp/skr time ratio at L={l}: {r:.1f}")
    return EXIT_OK


def cmd_report(args, cfg: ExperimentConfig) -> int:
    root = out_dir(args, cfg)
    missing = [f for f in REPORT_INPUTS if not (root / f).is_file()]
    if missing:
        raise UsageError(f"cannot build report under {root}; missing: " + ", ".join(missing))
    target = root / "report.md"
    refuse_existing([target], args.force)
    acc = read_csv(root / "sweep/accuracy.csv")
    methods = acc[0][1:]
    labels = {m: method_label(m) for m in methods}
    grid_lines = ["| L | " + " | ".join(labels[m] for m in methods) + " |",
                  "|" + "---|" * (len(methods) + 1)]
    for row in acc[1:]:
        cells = [c if c == "FAILED" else f"{float(c):.4f}" for c in row[1:]]
        grid_lines.append(f"| {row[0]} | " + " | ".join(cells) + " |")
    timing = read_csv(root / "benchmark/timing.csv")
    bench_methods = sorted({r[0] for r in timing[1:]})
    lengths = sorted({int(r[1]) for r in timing[1:]})
    secs = {(r[0], int(r[1])): float(r[2]) for r in timing[1:]}
    time_lines = ["| L | " + " | ".join(f"{m} (s/step)" for m in bench_methods) + " |",
                  "|" + "---|" * (len(bench_methods) + 1)]
    for l in lengths:
        time_lines.append(f"| {l} | " + " | ".join(
            f"{secs[(m, l)]:.4g}" if (m, l) in secs else "-" for m in bench_methods) + " |")
    exp_path = root / "benchmark/exponents.csv"
    exp_lines = []
    if exp_path.is_file():
        exps = read_csv(exp_path)[1:]
        if exps:
            exp_lines = ["", "| method | fitted exponent |", "|---|---|"]
            exp_lines += [f"| {m} | {float(e):.3f} |" for m, e in exps]
    doc = ["# skrvae experiment report", "",
           "## Separation accuracy (median over seeds of mean max-correlation)", "",
           *grid_lines, "", "## Per-step time", "", *time_lines, *exp_lines, "",
           "## Sweep configuration", "", "```", (root / "sweep/config.txt").read_text().rstrip(),
           "```", "", "## Benchmark configuration", "", "```",
           (root / "benchmark/config.txt").read_text().rstrip(), "```", ""]
    target.write_text("\n".join(doc), newline="\n")
    print(target)
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "sweep": cmd_sweep,
            "benchmark": cmd_benchmark, "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s",
                            stream=sys.stderr)
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, ParseError, SignalConfigError, ModelConfigError) as err:
        print(f"skrvae {args.command}: {err}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as err:
        print(f"skrvae {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
