"""Command-line entry point: ``hatfusion gen-data | train | eval | ablate``.

Run configuration is a flat JSON object with dotted keys (``model.d``,
``train.epochs``, ``data.dir``, ``output.dir``). Every key is also a flag
(``--train.epochs 5``) and flags win over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .data import DatasetError, JitterParams, by_split, digit_templates, generate, read_dataset, split_counts, write_dataset
from .model import CheckpointError, HatModel, Mode, ModelConfig, ModeMismatchError, load_checkpoint, save_checkpoint
from .seeding import derive_rng
from .train import TrainConfig, TrainingError, convergence_epoch, evaluate, evaluate_modality_dropout, train

log = logging.getLogger("hatfusion")

RESOLVED_CONFIG = "resolved-config.json"
AXES = ("fusion", "mode", "freeze")


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


# ---------------------------------------------------------------------------
# flat run config
# ---------------------------------------------------------------------------

def _schema() -> dict[str, tuple[type, object]]:
    schema = {}
    for prefix, cls in (("model", ModelConfig), ("train", TrainConfig)):
        defaults = cls()
        for f in fields(cls):
            value = getattr(defaults, f.name)
            schema[f"{prefix}.{f.name}"] = (type(value), value)
    schema["data.dir"] = (str, None)
    schema["output.dir"] = (str, None)
    return schema


SCHEMA = _schema()


def _coerce(key: str, value):
    kind, _ = SCHEMA[key]
    if value is None:
        return None
    if kind is bool:
        if isinstance(value, bool):
            return value
        text = str(value).lower()
        if text in ("1", "true", "yes"):
            return True
        if text in ("0", "false", "no"):
            return False
        raise CliError("config", f"{key}: expected a boolean, got {value!r}")
    if kind is int and isinstance(value, float) and not value.is_integer():
        raise CliError("config", f"{key}: expected an integer, got {value!r}")
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise CliError("config", f"{key}: cannot read {value!r} as {kind.__name__}") from None


def load_run_config(path: str | None, overrides: dict) -> dict:
    """Defaults <- config file <- flags, validated against the known keys."""
    config = {key: default for key, (_, default) in SCHEMA.items()}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise CliError("config", f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise CliError("config", f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise CliError("config", f"{path}: expected a flat JSON object")
        unknown = sorted(set(raw) - set(SCHEMA))
        if unknown:
            raise CliError("config", f"unknown config keys: {', '.join(unknown)}")
        config.update({k: _coerce(k, v) for k, v in raw.items()})
    config.update({k: _coerce(k, v) for k, v in overrides.items() if v is not None})
    return config


def split_config(config: dict) -> tuple[ModelConfig, TrainConfig]:
    def section(prefix):
        return {k.split(".", 1)[1]: v for k, v in config.items() if k.startswith(prefix + ".")}

    try:
        return ModelConfig.from_dict(section("model")), TrainConfig.from_dict(section("train"))
    except ValueError as exc:
        raise CliError("config", str(exc)) from None


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("run config overrides")
    for key in SCHEMA:
        group.add_argument(f"--{key}", dest=key, default=None, metavar="VALUE")


def _overrides(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k in SCHEMA}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.per_class < 1:
        raise CliError("usage", "--per-class must be >= 1")
    templates = digit_templates()
    if not 1 <= args.classes <= len(templates):
        raise CliError("usage", f"--classes must be in [1, {len(templates)}]")
    out = Path(args.out)
    if (out / "manifest.jsonl").exists() and not args.overwrite:
        raise CliError("io", f"{out} already holds a dataset (use --overwrite)")
    jitter = JitterParams.none(args.n_points) if args.no_jitter else JitterParams(
        max_rotation_deg=args.rotation, min_scale=args.scale_min, max_scale=args.scale_max,
        max_translation=args.translation, noise_sigma=args.noise, n_points=args.n_points,
        length_jitter=args.length_jitter)
    samples = generate(templates[:args.classes], args.per_class, args.seed, jitter,
                       side=args.side, line_width=args.line_width)
    if args.overwrite and (out / "images").exists():
        for old in (out / "images").glob("*.pgm"):
            old.unlink()
    write_dataset(samples, out)
    print(format_split_table(samples))
    return 0


def format_split_table(samples) -> str:
    counts = split_counts(samples)
    lengths = {s: [len(x.strokes) for x in samples if x.split == s] for s in counts}
    rows = [("split", "samples", "classes", "mean points")]
    for split, n in counts.items():
        classes = len({x.label for x in samples if x.split == split})
        mean = f"{np.mean(lengths[split]):.1f}" if lengths[split] else "-"
        rows.append((split, str(n), str(classes), mean))
    rows.append(("total", str(len(samples)), str(len({x.label for x in samples})),
                 f"{np.mean([len(x.strokes) for x in samples]):.1f}"))
    return _align(rows)


def _align(rows) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for r in rows:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells))
    return "\n".join(lines)


def _load_data(config: dict):
    if not config["data.dir"]:
        raise CliError("config", "data.dir is not set (use --data or the config file)")
    return read_dataset(config["data.dir"])


def run_training(model_cfg: ModelConfig, train_cfg: TrainConfig, samples, out: Path) -> dict:
    """Train one variant into ``out``; returns its test summary row."""
    train_set, val_set, test_set = (by_split(samples, s) for s in ("train", "val", "test"))
    if not train_set:
        raise CliError("data", "dataset has no training samples")
    out.mkdir(parents=True, exist_ok=True)
    model = HatModel(model_cfg, rng=derive_rng(train_cfg.seed, "init"))
    report_path = out / "report.jsonl"
    report_path.write_text("")

    def on_epoch(row):
        with report_path.open("a") as fh:
            fh.write(json.dumps(row) + "\n")
        log.info("epoch %d: loss %.4f val %s", row["epoch"], row["train_loss"], row.get("val_acc", "-"))

    result = train(model, train_set, val_set, train_cfg, on_epoch=on_epoch)
    meta = {"train": train_cfg.to_dict(), "best_epoch": result.best_epoch}
    save_checkpoint(model, out / "final.hatc", train_cfg.mode, meta, state=result.final_state)
    save_checkpoint(model, out / "best.hatc", train_cfg.mode, meta, state=result.best_state)
    model.load_state(result.best_state)
    scored = test_set or val_set
    summary = {"mode": train_cfg.mode, "best_epoch": result.best_epoch,
               "convergence_epoch": convergence_epoch(result.report)}
    if scored:
        summary["split"] = "test" if test_set else "val"
        summary.update(evaluate(model, scored, train_cfg.mode, train_cfg.eval_batch_size).summary())
    _write_json(out / "summary.json", summary)
    return summary


def cmd_train(args) -> int:
    config = load_run_config(args.config, _overrides(args))
    if not config["output.dir"]:
        raise CliError("config", "output.dir is not set (use --out or the config file)")
    model_cfg, train_cfg = split_config(config)
    samples = _load_data(config)
    out = Path(config["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / RESOLVED_CONFIG, config)
    summary = run_training(model_cfg, train_cfg, samples, out)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    config_override = None
    if args.config:
        config_override, _ = split_config(load_run_config(args.config, {}))
    model, mode, meta = load_checkpoint(args.checkpoint, config_override)
    samples = read_dataset(args.data)
    if args.split != "all":
        samples = by_split(samples, args.split)
    if not samples:
        raise CliError("data", f"no samples in split {args.split!r}")
    if args.modality_dropout:
        if mode is not Mode.BOTH:
            raise CliError("mode-mismatch", f"modality dropout needs a dual checkpoint, got mode {mode.value}")
        result = {"rows": evaluate_modality_dropout(model, samples)}
    else:
        run_mode = Mode(args.force_mode) if args.force_mode else mode
        result = {"checkpoint_mode": mode.value, "mode": run_mode.value, "split": args.split,
                  "n": len(samples), **evaluate(model, samples, run_mode).to_dict()}
    print(json.dumps(result, sort_keys=True))
    return 0


def _variants(axis: str, model_cfg: ModelConfig, train_cfg: TrainConfig):
    if axis == "mode":
        for m in Mode:
            yield m.value, model_cfg, replace(train_cfg, mode=m.value)
    elif axis == "fusion":
        for level in ("early", "middle"):
            yield f"both/{level}", replace(model_cfg, fusion_level=level), replace(train_cfg, mode="both")
    else:
        for frozen in (False, True):
            yield ("frozen" if frozen else "trainable"), replace(model_cfg, backbone_frozen=frozen), train_cfg


def cmd_ablate(args) -> int:
    config = load_run_config(args.config, _overrides(args))
    if not config["output.dir"]:
        raise CliError("config", "output.dir is not set (use --out or the config file)")
    model_cfg, train_cfg = split_config(config)
    samples = _load_data(config)
    out = Path(config["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / RESOLVED_CONFIG, config)
    rows = []
    for name, mc, tc in _variants(args.axis, model_cfg, train_cfg):
        log.info("variant %s", name)
        summary = run_training(mc, tc, samples, out / name.replace("/", "-"))
        rows.append({"variant": name, **summary})
    table = {"axis": args.axis, "seed": train_cfg.seed, "rows": rows}
    _write_json(out / "ablation.json", table)
    text = format_ablation_table(rows)
    (out / "ablation.txt").write_text(text + "\n")
    print(text)
    return 0


def format_ablation_table(rows) -> str:
    head = ("variant", "acc", "macro P", "macro R", "macro F1", "conv. epoch")
    body = []
    for r in rows:
        conv = r.get("convergence_epoch")
        body.append((r["variant"], *(f"{r.get(k, float('nan')):.2f}" for k in
                                     ("accuracy", "macro_precision", "macro_recall", "macro_f1")),
                     "-" if conv is None else str(conv)))
    return _align([head, *body])


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hatfusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic stroke/image dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--per-class", type=int, default=250)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--side", type=int, default=56)
    g.add_argument("--line-width", type=float, default=2.0)
    jit = JitterParams()
    g.add_argument("--n-points", type=int, default=jit.n_points)
    g.add_argument("--rotation", type=float, default=jit.max_rotation_deg, help="max rotation, degrees")
    g.add_argument("--scale-min", type=float, default=jit.min_scale)
    g.add_argument("--scale-max", type=float, default=jit.max_scale)
    g.add_argument("--translation", type=float, default=jit.max_translation)
    g.add_argument("--noise", type=float, default=jit.noise_sigma)
    g.add_argument("--length-jitter", type=float, default=jit.length_jitter)
    g.add_argument("--no-jitter", action="store_true", help="emit the bare templates")
    g.add_argument("--overwrite", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config")
    t.add_argument("--mode", dest="train.mode", choices=[m.value for m in Mode])
    t.add_argument("--data", dest="data.dir")
    t.add_argument("--out", dest="output.dir")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config", help="model config to build before loading the weights")
    e.add_argument("--force-mode", choices=[m.value for m in Mode])
    e.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    e.add_argument("--modality-dropout", action="store_true",
                   help="score a dual checkpoint with both inputs, image only and strokes only")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="sweep one axis with a shared seed")
    a.add_argument("--config")
    a.add_argument("--axis", required=True, choices=AXES)
    a.add_argument("--data", dest="data.dir")
    a.add_argument("--out", dest="output.dir")
    _add_config_flags(a)
    a.set_defaults(func=cmd_ablate)
    return parser


def _error_code(exc: Exception) -> str:
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, ModeMismatchError):
        return "mode-mismatch"
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, DatasetError):
        return "data"
    if isinstance(exc, TrainingError):
        return "training"
    if isinstance(exc, OSError):
        return "io"
    return "invalid"


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        return args.func(args)
    except (CliError, ModeMismatchError, CheckpointError, DatasetError, TrainingError, OSError, ValueError) as exc:
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {_error_code(exc)}: {message}", file=sys.stderr)
        return 2 if isinstance(exc, CliError) and exc.code == "usage" else 1


if __name__ == "__main__":
    sys.exit(main())
