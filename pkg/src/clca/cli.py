"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
3 gradient check failed.

Configs are layered: bundled preset, then an optional JSON file, then
``--set key=value`` overrides. Commands that write files first drop a
``manifest.json`` into their output directory; ``clca replay`` re-runs a job
from that manifest alone.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

from . import __version__
from . import data as data_io
from .checkpoint import CheckpointFormatError
from .data import DatasetFormatError, DatasetSpec
from .flops import model_cost, reports_to_csv
from .model.config import ConfigError, ModelConfig
from .model.schedule import format_schedule, token_schedule
from .train import TrainConfig, TrainingError, evaluate, grad_check, train

log = logging.getLogger("clca")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3
MODEL_PRESETS = ("vit_b16", "tiny", "gradcheck")
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
LIST_KEYS = frozenset({"reduction_layers", "recovery_layers", "betas"})


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config resolution

def bundled(name: str) -> dict:
    return json.loads(resources.files("clca.configs").joinpath(f"{name}.json").read_text())


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        return [parse_value(part) for part in text.split(",") if part]
    return text


def split_overrides(pairs: list[str], sections: tuple[str, ...]) -> dict[str, dict]:
    """``model.keep_rate=0.5`` style pairs -> {section: {key: value}}.

    An unprefixed key goes to the first section.
    """
    out: dict[str, dict] = {s: {} for s in sections}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        section, dot, rest = key.partition(".")
        if dot and section in sections:
            key = rest
        else:
            section = sections[0]
        parsed = parse_value(value)
        if key in LIST_KEYS and not isinstance(parsed, list):
            parsed = [] if parsed == "" else [parsed]
        out[section][key] = parsed
    return out


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


def _layer(base: dict, path, overrides: dict) -> dict:
    d = dict(base)
    if path:
        d.update(_read_json(path))
    if "reduction_layers" in overrides and "recovery_layers" not in overrides:
        d.pop("recovery_layers", None)
    d.update(overrides)
    return d


def resolve_model(args, overrides: dict) -> ModelConfig:
    try:
        return ModelConfig.from_dict(_layer(bundled(args.preset), args.model_config, overrides))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"model config: {exc}") from None


def resolve_train(args, overrides: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(_layer(bundled("train_default"), args.train_config, overrides))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"train config: {exc}") from None


def resolve_data(args, overrides: dict) -> DatasetSpec:
    d = _layer(bundled("data_default"), getattr(args, "data_config", None), overrides)
    unknown = set(d) - set(DatasetSpec().to_dict())
    if unknown:
        raise UsageError(f"unknown data config keys: {sorted(unknown)}")
    return DatasetSpec.from_dict(d)


# ---------------------------------------------------------------------------
# manifests and runners

def thread_info() -> dict:
    return {"cpu_count": os.cpu_count(), **{v: os.environ.get(v) for v in THREAD_VARS}}


def write_manifest(out_dir: Path, command: str, resolved: dict, argv: list[str] | None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "argv": argv,
        "threads": thread_info(),
        "output_dir": str(out_dir),
        "resolved": resolved,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def run_synth(resolved: dict, out: Path) -> int:
    spec = DatasetSpec.from_dict(resolved["data"])
    train_path, val_path = data_io.write_split(spec, out)
    print(f"wrote {train_path} and {val_path}")
    return EXIT_OK


def run_train(resolved: dict, out: Path) -> int:
    mc = ModelConfig.from_dict(resolved["model"])
    tc = TrainConfig.from_dict(resolved["train"])
    dataset = data_io.load_split(resolved["data_dir"])
    res = train(mc, tc, dataset, out, resume=resolved.get("resume", False))
    final = res.final("val")
    print(f"val top1 {final.top1:.4f} loss {final.loss:.4f} after {final.epoch} epochs; outputs in {out}")
    return EXIT_OK


SWEEP_FIELDS = ("config", "image_size", "keep_rate", "clca", "macs", "val_top1")


def run_sweep(resolved: dict, out: Path) -> int:
    base = ModelConfig.from_dict(resolved["model"])
    tc = TrainConfig.from_dict(resolved["train"])
    base_spec = resolved["data"]
    rows = []
    for side in resolved["image_sides"]:
        spec = DatasetSpec.from_dict({**base_spec, "image_side": side})
        dataset = data_io.generate(spec)
        for r in resolved["keep_rates"]:
            cfg = base.replace(image_size=side, keep_rate=r)
            job = out / f"s{side}_r{r:g}"
            res = train(cfg, tc, dataset, job)
            rows.append({
                "config": cfg.digest(),
                "image_size": side,
                "keep_rate": r,
                "clca": cfg.clca,
                "macs": model_cost(cfg).total,
                "val_top1": repr(res.final("val").top1),
            })
            log.info("sweep job %s done", job.name)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    (out / "sweep.csv").write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


RUNNERS = {"synth": run_synth, "train": run_train, "sweep": run_sweep}


def _start(command: str, resolved: dict, out: Path, argv) -> int:
    write_manifest(out, command, resolved, argv)
    return RUNNERS[command](resolved, out)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args, argv) -> int:
    spec = resolve_data(args, split_overrides(args.set, ("data",))["data"])
    return _start("synth", {"data": spec.to_dict()}, Path(args.out), argv)


def cmd_train(args, argv) -> int:
    ov = split_overrides(args.set, ("model", "train"))
    resolved = {
        "model": resolve_model(args, ov["model"]).to_dict(),
        "train": resolve_train(args, ov["train"]).to_dict(),
        "data_dir": str(Path(args.data).resolve()),
        "resume": args.resume,
    }
    return _start("train", resolved, Path(args.out), argv)


def cmd_sweep(args, argv) -> int:
    ov = split_overrides(args.set, ("model", "train", "data"))
    resolved = {
        "model": resolve_model(args, ov["model"]).to_dict(),
        "train": resolve_train(args, ov["train"]).to_dict(),
        "data": resolve_data(args, ov["data"]).to_dict(),
        "keep_rates": [float(r) for r in args.keep_rates.split(",")],
        "image_sides": [int(s) for s in args.image_sides.split(",")],
    }
    return _start("sweep", resolved, Path(args.out), argv)


def cmd_replay(args, argv) -> int:
    manifest = _read_json(args.manifest)
    command = manifest.get("command")
    if command not in RUNNERS:
        raise UsageError(f"manifest command {command!r} cannot be replayed")
    return _start(command, manifest["resolved"], Path(args.out), argv)


def cmd_eval(args, argv) -> int:
    path = Path(args.data)
    if path.is_file():
        dataset = data_io.load(path)
    else:
        dataset = data_io.load(path / f"{args.split}.ufgd")
    row = evaluate(args.ckpt, dataset, args.batch_size)
    print(json.dumps(row.as_csv() | {"split": args.split}, sort_keys=True))
    return EXIT_OK


def cmd_flops(args, argv) -> int:
    cfg = resolve_model(args, split_overrides(args.set, ("model",))["model"])
    report = model_cost(cfg)
    if args.csv:
        sys.stdout.write(reports_to_csv([report]))
    elif args.json:
        print(report.to_json())
    else:
        for b in report.blocks:
            print(f"block {b.block:>2}  T_attn {b.t_attn:>5}  T_ffn {b.t_ffn:>5}  {b.total / 1e9:9.4f}e9")
        print(f"patch embed {report.patch_embed / 1e9:.4f}e9  head {report.head / 1e9:.6f}e9")
        print(f"total {report.total / 1e9:.3f}e9 MACs")
    return EXIT_OK


def cmd_schedule(args, argv) -> int:
    cfg = resolve_model(args, split_overrides(args.set, ("model",))["model"])
    print(format_schedule(token_schedule(cfg)))
    return EXIT_OK


def cmd_gradcheck(args, argv) -> int:
    cfg = resolve_model(args, split_overrides(args.set, ("model",))["model"])
    max_entries = None if args.max_entries <= 0 else args.max_entries
    report = grad_check(cfg, args.tolerance, seed=args.seed, max_entries=max_entries,
                        batch_size=args.batch_size)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_GRADCHECK


# ---------------------------------------------------------------------------
# parser

def _model_flags(p, default_preset: str) -> None:
    p.add_argument("--preset", choices=MODEL_PRESETS, default=default_preset,
                   help=f"bundled model config to start from (default: {default_preset})")
    p.add_argument("--model-config", metavar="JSON", help="model config file layered over the preset")


def _set_flag(p, sections: str) -> None:
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help=f"override a config field; prefixes: {sections}. Lists as 4,7,10 or [4,7,10]")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clca", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"clca {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate the synthetic train/val dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data-config", metavar="JSON", help="dataset spec file")
    _set_flag(p, "data. (optional)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write metrics, grad trace and checkpoints")
    _model_flags(p, "tiny")
    p.add_argument("--train-config", metavar="JSON", help="training config file")
    p.add_argument("--data", required=True, help="dataset directory written by synth")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    _set_flag(p, "model. (default), train.")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory or single .ufgd file")
    p.add_argument("--split", choices=("train", "val"), default="val",
                   help="split to use when --data is a directory")
    p.add_argument("--batch-size", type=int, default=None, help="eval batch size")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="analytic multiply-accumulate count")
    _model_flags(p, "vit_b16")
    fmt = p.add_mutually_exclusive_group()
    fmt.add_argument("--csv", action="store_true", help="print a CSV row (config,image_size,keep_rate,macs)")
    fmt.add_argument("--json", action="store_true", help="print the full breakdown as JSON")
    _set_flag(p, "model. (optional)")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("schedule", help="print the per-block token table")
    _model_flags(p, "vit_b16")
    _set_flag(p, "model. (optional)")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    _model_flags(p, "gradcheck")
    p.add_argument("--tolerance", type=float, default=1e-3, help="max relative error (default 1e-3)")
    p.add_argument("--max-entries", type=int, default=16,
                   help="coordinates probed per parameter; 0 probes all (default 16)")
    p.add_argument("--batch-size", type=int, default=4, help="random batch size (default 4)")
    p.add_argument("--seed", type=int, default=0, help="seed for weights, batch and probes")
    _set_flag(p, "model. (optional)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="train over keep rates and image sides; accuracy-vs-MACs CSV")
    _model_flags(p, "tiny")
    p.add_argument("--train-config", metavar="JSON", help="training config file")
    p.add_argument("--data-config", metavar="JSON", help="dataset spec; image_side is swept")
    p.add_argument("--keep-rates", default="0.1,0.25,0.5,0.7,1.0", help="comma-separated keep rates")
    p.add_argument("--image-sides", default="64,128", help="comma-separated image sides")
    p.add_argument("--out", required=True, help="output directory (one subdirectory per job)")
    _set_flag(p, "model. (default), train., data.")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("replay", help="re-run a synth/train/sweep job from its manifest.json")
    p.add_argument("manifest", help="manifest.json written by an earlier run")
    p.add_argument("--out", required=True, help="fresh output directory")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"clca {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DatasetFormatError, CheckpointFormatError, TrainingError,
            FileNotFoundError, ValueError) as exc:
        print(f"clca {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
