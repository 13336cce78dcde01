"""``dcl``: command-line front end for runs, sweeps, IA sampling, probing and export.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import shutil
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .data import Split, load_dataset
from .errors import ConfigError
from .features import extract_features, save_csv, save_fmat
from .ia_select import DEFAULT_SEEDS, rank_candidates, resolve_hyperparam, sample_ia
from .nn import parameter_digest
from .pipeline import (CONFIG_FORMAT_VERSION, SWEEP_AXES, RunConfig, load_run_datasets, probe_run, run_deepcluster,
                       sweep, write_json)

log = logging.getLogger("dcl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
MANIFEST_NAME = "manifest.json"
COMMANDS = ("run", "probe", "ia-sample", "halt-sweep", "k-sweep", "seed-sweep", "pca-sweep", "export")


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 1), not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# Config handling
# --------------------------------------------------------------------------


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return obj


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _parse_optional(kind):
    def parse(text):
        if text.lower() in ("none", "null", "off"):
            return None
        return kind(text)
    parse.__name__ = kind.__name__
    return parse


def _parse_bool(text):
    t = text.lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


_LIST_FIELDS = {"filters": int, "normalize_mean": float, "normalize_std": float}


def add_config_flags(p: argparse.ArgumentParser) -> None:
    """One ``--field-name`` override per RunConfig field."""
    p.add_argument("--config", help="JSON config file (requires format_version)")
    g = p.add_argument_group("config overrides")
    for f in dataclasses.fields(RunConfig):
        if f.name in _LIST_FIELDS:
            kind = _LIST_FIELDS[f.name]
            g.add_argument(_flag(f.name), dest=f.name, type=lambda s, k=kind: [k(x) for x in s.split(",")],
                           default=argparse.SUPPRESS, metavar="A,B,...")
        elif isinstance(f.default, bool):
            g.add_argument(_flag(f.name), dest=f.name, type=_parse_bool, default=argparse.SUPPRESS, metavar="BOOL")
        elif isinstance(f.default, int):
            g.add_argument(_flag(f.name), dest=f.name, type=int, default=argparse.SUPPRESS)
        elif isinstance(f.default, float):
            g.add_argument(_flag(f.name), dest=f.name, type=float, default=argparse.SUPPRESS)
        elif f.name in ("max_samples", "test_max_samples", "pca_components", "halt_cycle"):
            g.add_argument(_flag(f.name), dest=f.name, type=_parse_optional(int), default=argparse.SUPPRESS)
        else:
            g.add_argument(_flag(f.name), dest=f.name, type=_parse_optional(str), default=argparse.SUPPRESS)


def resolve_config(args) -> RunConfig:
    base = load_config_file(args.config) if args.config else {"format_version": CONFIG_FORMAT_VERSION}
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(RunConfig) if hasattr(args, f.name)}
    return RunConfig.from_dict({**base, **overrides})


def _parse_values(text: str, kind=int) -> list:
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if item.lower() in ("none", "null", "off"):
            out.append(None)
            continue
        try:
            out.append(kind(item))
        except ValueError:
            raise ConfigError(f"--values: cannot interpret {item!r}") from None
    if not out:
        raise ConfigError("--values: at least one value is required")
    return out


def write_manifest(out_dir: Path, command: str, config: RunConfig | None, extra: dict) -> Path:
    """Persist the manifest; must happen before any other output is written."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": CONFIG_FORMAT_VERSION,
        "command": command,
        "config": config.to_dict() if config is not None else None,
        "output_dir": str(out_dir),
        "arguments": extra,
    }
    path = out_dir / MANIFEST_NAME
    write_json(path, manifest)
    return path


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_run(config: RunConfig, out: Path) -> None:
    train, test = load_run_datasets(config)
    run = run_deepcluster(config, train, out_dir=out)
    probe = probe_run(run.network, config, train, test)
    write_json(out / "probe.json", probe.to_dict())
    print(f"run complete: {len(run.records)} cycles, probe accuracy {probe.accuracy:.4f} ({probe.layer}) -> {out}")


def cmd_sweep(config: RunConfig, axis: str, values: list, out: Path) -> None:
    table = out / "sweep.csv"
    with open(table, "w", newline="") as f:
        csv.writer(f, lineterminator="\n").writerow(["value", "ia", "probe_accuracy"])

    def on_row(row, _run):
        # appended as each child finishes so partial results survive a failure
        with open(table, "a", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(
                ["none" if row["value"] is None else row["value"],
                 "" if row["ia"] is None else repr(row["ia"]), repr(row["probe_accuracy"])])
        print(f"{axis}={row['value']}: ia={row['ia']} probe={row['probe_accuracy']:.4f}", flush=True)

    sweep(config, axis, values, on_row=on_row, out_dir=out / "children")
    print(f"sweep complete -> {table}")


def cmd_ia_sample(config: RunConfig, hyperparam: str, values: list, seeds: int, seed_base: int, out: Path) -> None:
    train, _ = load_run_datasets(config, need_test=False)
    dists = []
    for v in values:
        d = sample_ia(config, hyperparam, v, n_seeds=seeds, seed_base=seed_base, dataset=train)
        write_json(out / f"ia_{d.hyperparam}_{'none' if d.value is None else d.value}.json", d.to_dict())
        print(f"{d.hyperparam}={d.value}: median IA {d.median:.4f} (p25 {d.p25:.4f}, n={d.sample_count})", flush=True)
        dists.append(d)
    ranking = rank_candidates(dists) if len(dists) >= 2 else dists
    write_json(out / "ranking.json", [{"value": d.value, "median": d.median, "p25": d.p25} for d in ranking])


def cmd_probe(checkpoint: Path, layer: str | None, out: Path | None, data_root: str | None) -> None:
    net, meta = load_checkpoint(checkpoint)
    if "config" not in meta:
        raise ConfigError(f"{checkpoint}: checkpoint carries no run config")
    config = RunConfig.from_dict(meta["config"])
    if data_root is not None:
        config = dataclasses.replace(config, data_root=data_root)
    if layer is not None:
        try:
            net.resolve_layer(layer)  # reject unknown ids before loading data
        except KeyError as exc:
            raise ConfigError(exc.args[0]) from None
        config = dataclasses.replace(config, probe_layer=layer)
    train, test = load_run_datasets(config)
    before = parameter_digest(net)
    result = probe_run(net, config, train, test)
    if parameter_digest(net) != before:
        raise RuntimeError("probe modified the frozen feature extractor")
    report = {**result.to_dict(), "checkpoint": str(checkpoint)}
    if out is not None:
        write_json(out / "probe.json", report)
    print(json.dumps({k: report[k] for k in ("layer", "accuracy", "train_accuracy")}))


def cmd_export(run_dir: Path, what: str, out: Path, fmt: str, layer: str | None, data_root: str | None) -> None:
    if what == "metrics":
        src = run_dir / "metrics.csv"
        if not src.exists():
            raise FileNotFoundError(f"{src} not found")
        shutil.copyfile(src, out / "metrics.csv")
        print(f"metrics -> {out / 'metrics.csv'}")
        return
    ckpt = run_dir / "checkpoints" / "final.dckp"
    if not ckpt.exists():
        raise FileNotFoundError(f"{ckpt} not found")
    net, meta = load_checkpoint(ckpt)
    config = RunConfig.from_dict(meta["config"])
    if data_root is not None:
        config = dataclasses.replace(config, data_root=data_root)
    ds = load_dataset(config.dataset, Split.TRAIN, root=config.data_root, max_samples=config.max_samples,
                      seed=config.subset_seed, synthetic_size=config.synthetic_size)
    F = extract_features(net, ds, config.transform_spec(), config.feature_batch_size, layer)
    if fmt == "fmat":
        path = out / "features.fmat"
        save_fmat(path, F.data)
    else:
        path = out / "features.csv"
        save_csv(path, F.data, ds.labels)
    print(f"features {F.data.shape} from {F.source_layer} -> {path}")


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dcl", description="DeepCluster desk-scale lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run DeepCluster then linear-probe the result")
    add_config_flags(r)
    r.add_argument("--out", required=True, type=Path)

    s = sub.add_parser("sweep", help="one child run per value of an axis")
    add_config_flags(s)
    s.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    s.add_argument("--values", required=True, help="comma-separated; 'none' disables halt/pca")
    s.add_argument("--out", required=True, type=Path)

    ia = sub.add_parser("ia-sample", help="IA distribution over random initialisations")
    add_config_flags(ia)
    ia.add_argument("--hyperparam", required=True)
    ia.add_argument("--values", required=True)
    ia.add_argument("--seeds", type=int, default=DEFAULT_SEEDS)
    ia.add_argument("--seed-base", type=int, default=0)
    ia.add_argument("--out", required=True, type=Path)

    pr = sub.add_parser("probe", help="linear probe over a checkpoint")
    pr.add_argument("--checkpoint", required=True, type=Path)
    pr.add_argument("--layer")
    pr.add_argument("--data-root")
    pr.add_argument("--out", type=Path)

    ex = sub.add_parser("export", help="export run metrics or raw feature matrices")
    ex.add_argument("--run", required=True, type=Path)
    ex.add_argument("--what", required=True, choices=["features", "metrics"])
    ex.add_argument("--format", default="fmat", choices=["fmat", "csv"])
    ex.add_argument("--layer")
    ex.add_argument("--data-root")
    ex.add_argument("--out", type=Path)

    rr = sub.add_parser("rerun", help="re-execute a persisted manifest")
    rr.add_argument("--manifest", required=True, type=Path)
    rr.add_argument("--out", required=True, type=Path)
    return p


def _dispatch(args) -> None:
    cmd = args.command
    if cmd == "rerun":
        manifest = load_config_file(args.manifest)
        return _replay(manifest, args.out)
    if cmd == "probe":
        if args.out is not None:
            write_manifest(args.out, "probe", None, {"checkpoint": str(args.checkpoint), "layer": args.layer})
        return cmd_probe(args.checkpoint, args.layer, args.out, args.data_root)
    if cmd == "export":
        out = args.out or args.run / "export"
        write_manifest(out, "export", None, {"run": str(args.run), "what": args.what, "format": args.format,
                                             "layer": args.layer})
        return cmd_export(args.run, args.what, out, args.format, args.layer, args.data_root)

    config = resolve_config(args)
    if cmd == "run":
        write_manifest(args.out, "run", config, {})
        return cmd_run(config, args.out)
    if cmd == "sweep":
        values = _parse_values(args.values)
        for v in values:
            dataclasses.replace(config, **{SWEEP_AXES[args.axis]: v}).validate()
        write_manifest(args.out, f"{args.axis}-sweep", config, {"axis": args.axis, "values": values})
        return cmd_sweep(config, args.axis, values, args.out)
    if cmd == "ia-sample":
        values = [resolve_hyperparam(args.hyperparam, v)[1] for v in args.values.split(",") if v.strip()]
        if not values:
            raise ConfigError("--values: at least one value is required")
        if args.seeds < 1:
            raise ConfigError("--seeds must be >= 1")
        write_manifest(args.out, "ia-sample", config, {"hyperparam": args.hyperparam, "values": values,
                                                        "seeds": args.seeds, "seed_base": args.seed_base})
        return cmd_ia_sample(config, args.hyperparam, values, args.seeds, args.seed_base, args.out)
    raise ConfigError(f"unknown command {cmd!r}")


def _replay(manifest: dict, out: Path) -> None:
    command = manifest.get("command")
    if command not in COMMANDS:
        raise ConfigError(f"manifest: unknown command {command!r}")
    extra = manifest.get("arguments") or {}
    config = RunConfig.from_dict(manifest["config"]) if manifest.get("config") else None
    write_manifest(out, command, config, extra)
    if command == "run":
        return cmd_run(config, out)
    if command.endswith("-sweep"):
        return cmd_sweep(config, extra["axis"], extra["values"], out)
    if command == "ia-sample":
        return cmd_ia_sample(config, extra["hyperparam"], extra["values"], extra["seeds"], extra["seed_base"], out)
    if command == "probe":
        return cmd_probe(Path(extra["checkpoint"]), extra.get("layer"), out, None)
    return cmd_export(Path(extra["run"]), extra["what"], out, extra.get("format", "fmat"), extra.get("layer"), None)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except ConfigError as exc:
        print(f"dcl: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print("dcl: interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # runtime failures: missing data, NaN aborts, I/O
        print(f"dcl: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
