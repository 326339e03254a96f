"""Command-line entry point for the whole pipeline.

Every subcommand writes its outputs plus ``run_manifest.json`` (effective
settings and a sha256 per emitted file) into ``--out`` and prints the
manifest path on stdout.  Progress goes to stderr.

Config file (JSON), all sections optional::

    {"data": {"faircircle": {...}} | {"tabular": "spec.json"} | {"dir": "domains/"},
     "train": {"epochs_per_domain": 50, "batch_size": 128, "lambda_f": 0.2, "lambda_tc": 1.0,
               "lr": 0.001, "latent": 8, "hidden": 32, "snapshot_every": 10, "ablation": "full"},
     "split": [0.5, 0.1667, 0.3333],
     "context": {"columns": ["c1", "c2"]},
     "seed": 0}

Command-line flags override config fields.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from .data import (
    DEFAULT_SPLIT,
    DatasetSpec,
    DomainStore,
    FairCircleConfig,
    gen_faircircle,
    load_tabular,
    split_counts,
    split_domains,
)
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .evaluation import (
    ContextSpec,
    MetricsReport,
    evaluate,
    merge_reports,
    run_experiment,
    sweep_lambda_f,
    write_curves,
    write_sweep,
    write_table,
)
from .model import HyperParams
from .train import ABLATIONS, TrainConfig, dims_for, load_checkpoint, save_checkpoint

log = logging.getLogger("dcfdg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- config


def _read_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from None
    cfg["_base"] = str(p.parent)
    return cfg


def _resolve(cfg: dict, value: str) -> str:
    p = Path(value)
    return str(p if p.is_absolute() else Path(cfg.get("_base", ".")) / p)


def _seed(args, cfg) -> int:
    return int(args.seed if args.seed is not None else cfg.get("seed", 0))


def _split(cfg) -> tuple:
    return tuple(cfg.get("split", DEFAULT_SPLIT))


def _faircircle_cfg(cfg: dict, seed: int) -> FairCircleConfig:
    raw = dict(cfg.get("data", {}).get("faircircle", {}))
    for key in ("cov_0", "cov_1"):
        if key in raw:
            raw[key] = tuple(tuple(r) for r in raw[key])
    raw["seed"] = seed
    try:
        return FairCircleConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad faircircle section: {exc}") from None


def _load_store(cfg: dict, seed: int) -> DomainStore:
    """The single declared data source, normalized on its source split."""
    data = cfg.get("data", {"faircircle": {}})
    declared = [k for k in ("faircircle", "tabular", "dir") if k in data]
    if len(declared) != 1:
        raise ConfigError(f"config must declare exactly one data source, found {declared or 'none'}")
    kind = declared[0]
    if kind == "faircircle":
        store = gen_faircircle(_faircircle_cfg(cfg, seed))
    elif kind == "tabular":
        store = load_tabular(DatasetSpec.from_json(_resolve(cfg, data["tabular"])), normalize=False)
    else:
        store = DomainStore.load(_resolve(cfg, data["dir"]))
    if store.norm is None:
        store = store.normalized(split_counts(len(store), _split(cfg))[0])
    return store


def _train_cfg(args, cfg: dict, store: DomainStore, seed: int) -> TrainConfig:
    tr = dict(cfg.get("train", {}))
    tabular = store.source.get("generator") == "tabular"
    lam_f = args.lambda_f if getattr(args, "lambda_f", None) is not None else tr.get("lambda_f", 0.2)
    lam_tc = args.lambda_tc if getattr(args, "lambda_tc", None) is not None else tr.get("lambda_tc", 1.0)
    epochs = args.epochs if getattr(args, "epochs", None) is not None else tr.get("epochs_per_domain", 20 if tabular else 50)
    mode = getattr(args, "ablation", None) or tr.get("ablation", "full")
    dims = dims_for(store.domains[0].x_s.shape[1], store.domains[0].x_ns.shape[1],
                    latent=int(tr.get("latent", 16 if tabular else 8)), hidden=int(tr.get("hidden", 32)))
    hyper = HyperParams(dims, lambda_f=float(lam_f), lambda_tc=float(lam_tc), lr=float(tr.get("lr", 1e-3)))
    return TrainConfig(hyper, epochs_per_domain=int(epochs), batch_size=int(tr.get("batch_size", 128)), seed=seed,
                       ablation_mode=mode, snapshot_every=int(tr.get("snapshot_every", 10)))


def _context(cfg: dict) -> ContextSpec | None:
    ctx = cfg.get("context")
    return ContextSpec(tuple(ctx["columns"])) if ctx else None


# ---------------------------------------------------------------- manifest


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out: Path, command: str, settings: dict, files: list[Path]) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "settings": settings,
        "files": {str(p.relative_to(out)): _sha256(p) for p in sorted(files)},
    }
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


def _settings(tc: TrainConfig | None = None, **extra) -> dict:
    out = dict(extra)
    if tc is not None:
        out["train"] = asdict(tc)
    return out


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args, cfg, out: Path):
    seed = _seed(args, cfg)
    fc = _faircircle_cfg(cfg, seed)
    files = gen_faircircle(fc).save(out)
    return _settings(faircircle=asdict(fc), seed=seed), files


def cmd_ingest(args, cfg, out: Path):
    src = cfg.get("data", {}).get("tabular")
    if not src:
        raise ConfigError("ingest needs data.tabular (path to a dataset spec JSON) in --config")
    spec = DatasetSpec.from_json(_resolve(cfg, src))
    store = load_tabular(spec)
    return _settings(spec=asdict(spec)), store.save(out)


def cmd_train(args, cfg, out: Path):
    seed = _seed(args, cfg)
    store = _load_store(cfg, seed)
    tc = _train_cfg(args, cfg, store, seed)
    outcome = run_experiment(store, tc, _context(cfg), _split(cfg))
    ckpt = out / "checkpoint.ckpt"
    save_checkpoint(ckpt, outcome.model, outcome.disc, outcome.hyper,
                    {"selected": outcome.selected, "split": list(_split(cfg)), "seed": seed})
    logp = out / "train_log.csv"
    outcome.train_log.to_csv(logp)
    return _settings(tc, selected=outcome.selected, split=_split(cfg)), [ckpt, logp]


def cmd_eval(args, cfg, out: Path):
    seed = _seed(args, cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.ckpt"
    model, _, _, extra = load_checkpoint(ckpt)
    store = _load_store(cfg, seed)
    _, _, target = split_domains(store, _split(cfg))
    report = evaluate(model, target, _context(cfg), store, label=model.mode)
    files = [out / "metrics.json", out / "metrics.csv", out / "curves.csv"]
    report.to_json(files[0])
    write_table([report], files[1])
    write_curves(report, files[2])
    return _settings(checkpoint=str(ckpt), checkpoint_meta=extra, seed=seed), files


def _seeds(args, cfg) -> list[int]:
    if args.seeds:
        return [int(s) for s in args.seeds.split(",")]
    return [_seed(args, cfg)]


def cmd_ablate(args, cfg, out: Path):
    seeds = _seeds(args, cfg)
    store = _load_store(cfg, seeds[0])
    reports, files = [], []
    for mode in ABLATIONS:
        reps = []
        for s in seeds:
            tc = replace(_train_cfg(args, cfg, store, s), ablation_mode=mode)
            log.info("ablation %s seed %d", mode, s)
            reps.append(run_experiment(store, tc, _context(cfg), _split(cfg), label=mode).report)
        merged = merge_reports(reps)
        reports.append(merged)
        path = out / f"metrics_{mode}.json"
        merged.to_json(path)
        files.append(path)
    table = out / "ablation.csv"
    write_table(reports, table)
    return _settings(_train_cfg(args, cfg, store, seeds[0]), seeds=seeds), files + [table]


def cmd_sweep(args, cfg, out: Path):
    seeds = _seeds(args, cfg)
    try:
        grid = [float(v) for v in args.grid.split(",")] if args.grid else [0.02, 0.1, 0.2, 0.5, 1.0]
    except ValueError:
        raise ConfigError(f"--grid must be a comma list of numbers, got {args.grid!r}") from None
    store = _load_store(cfg, seeds[0])
    base = _train_cfg(args, cfg, store, seeds[0])
    results = sweep_lambda_f(store, base, grid, _context(cfg), seeds)
    path = out / "sweep.csv"
    write_sweep(results, path)
    files = [path]
    for lam, rep in results:
        p = out / f"metrics_lambda_f_{lam:g}.json"
        rep.to_json(p)
        files.append(p)
    return _settings(base, grid=grid, seeds=seeds), files


def cmd_report(args, cfg, out: Path):
    if not args.runs:
        raise ConfigError("report needs one or more metrics JSON files")
    reports = []
    for r in args.runs:
        p = Path(r)
        if not p.exists():
            raise DataError(f"metrics file not found: {p}")
        reports.append(MetricsReport.from_dict(json.loads(p.read_text())))
    merged = merge_reports(reports)
    files = [out / "curves.csv", out / "summary.csv", out / "merged_metrics.json"]
    write_curves(merged, files[0])
    write_table([merged], files[1])
    merged.to_json(files[2])
    return _settings(runs=[str(r) for r in args.runs]), files


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate FairCircle domains as CSVs plus manifest"),
    "ingest": (cmd_ingest, "ingest a tabular CSV into normalized domain CSVs"),
    "train": (cmd_train, "train on source domains, select on intermediary, save checkpoint and log"),
    "eval": (cmd_eval, "evaluate a checkpoint on the target domains"),
    "ablate": (cmd_ablate, "run full / no_disentangle / no_fairness and tabulate"),
    "sweep": (cmd_sweep, "train over a lambda_f grid and emit the trade-off CSV"),
    "report": (cmd_report, "merge metrics JSON files into per-domain curves"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dcfdg", description="Counterfactually fair domain generalization pipeline.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="seed (overrides config)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "ablate", "sweep"):
            p.add_argument("--lambda-f", type=float, dest="lambda_f")
            p.add_argument("--lambda-tc", type=float, dest="lambda_tc")
            p.add_argument("--epochs", type=int, help="epochs per source domain")
        if name == "train":
            p.add_argument("--ablation", choices=ABLATIONS)
        if name in ("ablate", "sweep"):
            p.add_argument("--seeds", help="comma list of seeds (default: --seed)")
        if name == "sweep":
            p.add_argument("--grid", help="comma list of lambda_f values")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint path (default: OUT/checkpoint.ckpt)")
        if name == "report":
            p.add_argument("runs", nargs="*", help="metrics JSON files")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(message)s")
    out = Path(args.out)
    try:
        cfg = _read_config(args.config)
        out.mkdir(parents=True, exist_ok=True)
        fn = COMMANDS[args.command][0]
        settings, files = fn(args, cfg, out)
        settings["config"] = {k: v for k, v in cfg.items() if k != "_base"}
        path = _write_manifest(out, args.command, settings, [Path(f) for f in files])
    except ConfigError as exc:
        print(f"dcfdg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as exc:
        print(f"dcfdg {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"dcfdg {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
