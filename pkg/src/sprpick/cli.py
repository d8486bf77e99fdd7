"""Command-line driver: ``sprpick <subcommand> ...``.

Subcommands: generate, corrupt, train, pick, refine, evaluate, report.
Every subcommand accepts ``--config FILE``, a flat JSON object whose keys
mirror the long flag names; flags given on the command line win over the
file, which wins over the built-in defaults.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .io import (
    DatasetError,
    LatentPickStore,
    _atomic_write_text,
    read_dataset,
    read_picks,
    split_dataset,
    write_dataset,
    write_picks,
)
from .metrics import DEFAULT_DELTAS, evaluate
from .predictor import ReferenceNetConfig, UNetPredictor
from .spr import DEFAULT_GAMMA, SprConfig, pick_gather, refine_gather, train_spr
from .synth import NoiseSpec, add_label_noise, add_signal_noise, generate_dataset

log = logging.getLogger("sprpick")

WORKERS_ENV = "SPRPICK_WORKERS"

# desk-scale training defaults (CPU); see README for the full-scale setting
DESK_EPOCHS = 30
DESK_LR = 1e-3
DESK_WARMUP = 10

SPLITS = ("train", "val", "test")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        return 1


def _int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("tolerances must be >= 0")
    return vals


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# --------------------------------------------------------------------------
# parser


def build_parser() -> tuple[_Parser, dict[str, _Parser]]:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="flat JSON file of flag values")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--workers", type=int, default=None, help=f"worker processes (default ${WORKERS_ENV} or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="sprpick", description="First-break picking with latent label refinement.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    subs = {}

    p = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    p.add_argument("--gathers", type=int, default=200)
    p.add_argument("--traces", type=int, default=64)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--sample-rate-ms", type=float, default=2.0)
    p.add_argument("--name", default="synthetic")
    p.add_argument("-o", "--output", type=Path)
    subs["generate"] = p

    p = sub.add_parser("corrupt", parents=[common], help="copy a dataset adding signal and/or label noise")
    p.add_argument("-i", "--input", type=Path)
    p.add_argument("-o", "--output", type=Path)
    p.add_argument("--signal-nl", type=float, default=0.0, help="noise std as a fraction of each trace's peak")
    p.add_argument("--label-var", type=float, default=0.0, help="variance (samples^2) of Gaussian pick offsets")
    subs["corrupt"] = p

    p = sub.add_parser("train", parents=[common], help="train SPR or the plain-BCE baseline")
    p.add_argument("-i", "--input", type=Path)
    p.add_argument("-o", "--output", type=Path, help="run directory")
    p.add_argument("--mode", choices=("spr", "baseline"), default="spr")
    p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    p.add_argument("--epochs", type=int, default=DESK_EPOCHS)
    p.add_argument("--warmup-epochs", type=int, default=DESK_WARMUP)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=DESK_LR)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--kernel-size", type=int, default=3)
    p.add_argument("--window-samples", type=int, default=256)
    p.add_argument("--window-traces", type=int, default=64)
    p.add_argument("--split-seed", type=int, default=None, help="default: --seed")
    p.add_argument("--split-ratios", type=_float_list, default=(0.8, 0.1, 0.1))
    subs["train"] = p

    for name, split, help_ in (
        ("pick", "test", "pick first breaks with a trained run"),
        ("refine", "train", "refine the manual picks of a dataset with a trained run"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--run", type=Path)
        p.add_argument("-i", "--input", type=Path, help="dataset (default: the run's training dataset)")
        p.add_argument("--split", choices=(*SPLITS, "all"), default=split)
        p.add_argument("-o", "--output", type=Path, help=f"pick directory (default: RUN/{name}_<split>)")
        if name == "refine":
            p.add_argument("--gamma", type=float, default=None, help="default: the run's gamma")
        subs[name] = p

    p = sub.add_parser("evaluate", parents=[common], help="score a pick directory against reference picks")
    p.add_argument("--ref", type=Path, help="dataset holding the reference picks")
    p.add_argument("--picks", type=Path, help="directory of <gather>.csv pick files")
    p.add_argument("--run", type=Path, help="run directory supplying the split and the default output")
    p.add_argument("--split", choices=(*SPLITS, "all"), default="all")
    p.add_argument("--method", default=None, help="row label (default: the run's mode)")
    p.add_argument("--condition", default=None, help="condition label (default: the split)")
    p.add_argument("--deltas", type=_int_list, default=DEFAULT_DELTAS)
    p.add_argument("-o", "--output", type=Path, help="CSV path (default: RUN/eval/<condition>.csv or stdout)")
    subs["evaluate"] = p

    p = sub.add_parser("report", parents=[common], help="combine evaluation CSVs into one table with figures")
    p.add_argument("inputs", nargs="*", type=Path, help="run directories or evaluation CSV files")
    p.add_argument("-o", "--output", type=Path)
    p.add_argument("--overlay", nargs="*", default=[], metavar="GATHER", help="gather ids to draw")
    p.add_argument("--overlay-data", type=Path, help="dataset with the overlay amplitudes")
    p.add_argument("--overlay-ref", type=Path, help="dataset with reference picks (default: --overlay-data)")
    p.add_argument("--overlay-picks", type=Path, help="directory of predicted picks to draw")
    subs["report"] = p
    return parser, subs


def _load_config(path: Path, sub: _Parser) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        sub.error(f"cannot read config {path}: {exc.strerror}")
    except json.JSONDecodeError as exc:
        sub.error(f"config {path} is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        sub.error(f"config {path} must be a JSON object")
    dests = {a.dest: a for a in sub._actions}
    out = {}
    for key, value in doc.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in dests or dest in ("config", "help"):
            sub.error(f"config {path}: unknown key {key!r}")
        action = dests[dest]
        if isinstance(value, str) and action.type is not None and action.type not in (str, Path):
            try:
                value = action.type(value)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                sub.error(f"config {path}: bad value for {key!r}: {exc}")
        elif isinstance(value, list) and action.type in (_int_list, _float_list):
            value = tuple(value)
        elif action.type is Path and value is not None:
            value = Path(value)
        if action.choices is not None and value not in action.choices:
            sub.error(f"config {path}: {key!r} must be one of {sorted(action.choices)}")
        out[dest] = value
    return out


def parse_args(argv) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.error("a subcommand is required")
    sub = subs[args.command]
    if args.config is not None:
        sub.set_defaults(**_load_config(args.config, sub))
        args = parser.parse_args(argv)
    if args.workers is None:
        args.workers = _default_workers()
    args._parser = sub
    return args


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            args._parser.error(f"--{name.replace('_', '-')} is required")


# --------------------------------------------------------------------------
# run directories


def _run_config(run: Path) -> dict:
    path = Path(run) / "config.json"
    if not path.is_file():
        raise DatasetError(f"not a run directory (no config.json): {run}")
    return json.loads(path.read_text())


def _run_splits(run: Path) -> dict:
    path = Path(run) / "splits.json"
    if not path.is_file():
        raise DatasetError(f"run has no splits.json: {run}")
    return json.loads(path.read_text())


def _select(manifest, run, split):
    if split == "all":
        return manifest
    if run is None:
        raise DatasetError(f"--split {split} needs --run to know the partition")
    ids = _run_splits(run)[split]
    missing = sorted(set(ids) - set(manifest.gather_ids))
    if missing:
        raise DatasetError(f"dataset lacks {len(missing)} gathers of the {split} split, e.g. {missing[:3]}")
    return manifest.subset(ids)


def _write_json(path: Path, doc) -> None:
    _atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _seed_for(seed: int, index: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, index, stream]).generate_state(1)[0])


# --------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> None:
    _require(args, "output")
    gathers, picks = generate_dataset(
        args.gathers, args.samples, args.traces, args.seed, workers=args.workers, sample_rate_ms=args.sample_rate_ms
    )
    write_dataset(args.output, gathers, picks, args.name)
    log.info("wrote %d gathers to %s", len(gathers), args.output)


def cmd_corrupt(args) -> None:
    _require(args, "input", "output")
    src, dst = Path(args.input).resolve(), Path(args.output).resolve()
    if src == dst or src in dst.parents:
        raise DatasetError("corrupt output must not be the input directory or inside it")
    man = read_dataset(src)
    gathers, picks = [], []
    for j, gid in enumerate(man.gather_ids):
        g = add_signal_noise(man.load_gather(gid), NoiseSpec(args.signal_nl, _seed_for(args.seed, j, 0)))
        t = add_label_noise(man.load_picks(gid), args.label_var, _seed_for(args.seed, j, 1), g.n_samples)
        gathers.append(g)
        picks.append(t)
    name = f"{man.dataset_name}+nl{args.signal_nl:g}+var{args.label_var:g}"
    write_dataset(dst, gathers, picks, name)
    log.info("wrote corrupted copy of %d gathers to %s", len(gathers), dst)


def _train_settings(args) -> dict:
    return {
        "dataset": str(Path(args.input).resolve()),
        "mode": args.mode,
        "gamma": args.gamma,
        "epochs": args.epochs,
        "warmup_epochs": args.warmup_epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "depth": args.depth,
        "width": args.width,
        "kernel_size": args.kernel_size,
        "window_shape": [args.window_samples, args.window_traces],
        "seed": args.seed,
        "split_seed": args.seed if args.split_seed is None else args.split_seed,
        "split_ratios": list(args.split_ratios),
    }


def cmd_train(args) -> None:
    _require(args, "input", "output")
    run = Path(args.output)
    settings = _train_settings(args)
    cfg_path = run / "config.json"
    if cfg_path.is_file():
        old = json.loads(cfg_path.read_text())
        changed = sorted(k for k in settings if k != "epochs" and old.get(k) != settings[k])
        if changed:
            raise DatasetError(f"run {run} exists with different settings: {changed}")
    man = read_dataset(args.input)
    train, val, test = split_dataset(man, settings["split_ratios"], settings["split_seed"])
    run.mkdir(parents=True, exist_ok=True)
    _write_json(run / "splits.json", {"train": train.gather_ids, "val": val.gather_ids, "test": test.gather_ids})
    _write_json(cfg_path, settings)

    window = tuple(settings["window_shape"])
    net_cfg = ReferenceNetConfig(args.depth, args.width, args.kernel_size, args.lr, args.seed)
    spr_cfg = SprConfig(
        gamma=args.gamma,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        latent_update=args.mode == "spr",
        warmup_epochs=args.warmup_epochs,
        window_shape=window,
    )
    val_log = run / "val_log.csv"
    if not val_log.exists():
        val_log.write_text("epoch,HR0,HR1,HR2,HR3,HR5,MAE\n")

    def on_epoch(epoch, predictor, store):
        moved = store.moved({g: train.load_picks(g) for g in train.gather_ids})
        line = f"epoch {epoch}/{args.epochs} latent_moved={moved}"
        if val.entries:
            picks = {g: pick_gather(predictor, val.load_gather(g), window) for g in val.gather_ids}
            rep = evaluate(val, picks)
            with val_log.open("a") as fh:
                fh.write(",".join([str(epoch), *(repr(v) for v in rep.row().values())]) + "\n")
            line += f" val HR1={100 * rep.hit_rates[1]:.2f} MAE={rep.mae:.3f}"
        log.info(line)

    train_spr(train, UNetPredictor(net_cfg), spr_cfg, LatentPickStore.from_manifest(train), run, on_epoch=on_epoch)


def _infer(args, refine: bool) -> None:
    _require(args, "run")
    cfg = _run_config(args.run)
    man = read_dataset(args.input if args.input is not None else cfg["dataset"])
    man = _select(man, args.run, args.split)
    predictor = UNetPredictor.load(Path(args.run) / "checkpoint.ckpt")
    window = tuple(cfg["window_shape"])
    gamma = cfg["gamma"] if getattr(args, "gamma", None) is None else args.gamma
    out = args.output or Path(args.run) / f"{'refine' if refine else 'pick'}_{args.split}"
    for gid in man.gather_ids:
        g = man.load_gather(gid)
        if refine:
            picks = refine_gather(predictor, g, man.load_picks(gid), gamma, window)
        else:
            picks = pick_gather(predictor, g, window)
        write_picks(Path(out) / f"{gid}.csv", picks)
    log.info("wrote %d pick files to %s", len(man.gather_ids), out)


def cmd_pick(args) -> None:
    _infer(args, refine=False)


def cmd_refine(args) -> None:
    _infer(args, refine=True)


def cmd_evaluate(args) -> None:
    _require(args, "ref", "picks")
    man = _select(read_dataset(args.ref), args.run, args.split)
    method = args.method
    if method is None:
        method = _run_config(args.run)["mode"] if args.run is not None else "picks"
    report = evaluate(man, args.picks, args.deltas, method)
    condition = args.condition or args.split
    out = args.output
    if out is None and args.run is not None:
        out = Path(args.run) / "eval" / f"{condition}.csv"
    if out is None:
        sys.stdout.write(report.to_csv())
    else:
        _atomic_write_text(Path(out), report.to_csv())
    print(report.format_table(), file=sys.stderr)


def _read_eval_csv(path: Path, condition: str) -> list[dict]:
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DatasetError(f"{path}: no rows")
    return [{"condition": condition, **r} for r in rows]


def collect_rows(inputs) -> list[dict]:
    """Rows of every evaluation CSV under ``inputs``; raises listing all absent ones."""
    rows, missing = [], []
    for item in inputs:
        item = Path(item)
        if item.is_dir():
            csvs = sorted((item / "eval").glob("*.csv"))
            if not csvs:
                missing.append(str(item / "eval" / "*.csv"))
            for c in csvs:
                rows.extend(_read_eval_csv(c, c.stem))
        elif item.is_file():
            rows.extend(_read_eval_csv(item, item.stem))
        else:
            missing.append(str(item))
    if missing:
        raise DatasetError("missing evaluation inputs: " + ", ".join(missing))
    return rows


def write_report(rows: list[dict], out_dir: Path) -> Path:
    columns = [c for c in rows[0] if c not in ("method", "condition")]
    for r in rows:
        if [c for c in r if c not in ("method", "condition")] != columns:
            raise DatasetError("evaluation CSVs have different metric columns")
    rows = sorted(rows, key=lambda r: (r["method"], r["condition"]))
    lines = [",".join(["method", "condition", *columns])]
    lines += [",".join([r["method"], r["condition"], *(r[c] for c in columns)]) for r in rows]
    path = Path(out_dir) / "report.csv"
    _atomic_write_text(path, "\n".join(lines) + "\n")
    return path


def _format_rows(rows: list[dict]) -> str:
    columns = [c for c in rows[0] if c not in ("method", "condition")]
    out = [f"{'method':<12} {'condition':<14} " + " ".join(f"{c:>7}" for c in columns)]
    for r in sorted(rows, key=lambda r: (r["method"], r["condition"])):
        vals = [f"{100 * float(r[c]):7.2f}" if c.startswith("HR") else f"{float(r[c]):7.3f}" for c in columns]
        out.append(f"{r['method']:<12} {r['condition']:<14} " + " ".join(vals))
    return "\n".join(out)


def cmd_report(args) -> None:
    from .plotting import hit_rate_curves, wiggle_overlay

    _require(args, "output")
    if not args.inputs:
        args._parser.error("at least one run directory or evaluation CSV is required")
    rows = collect_rows(args.inputs)
    out = Path(args.output)
    write_report(rows, out)
    deltas = [int(c[2:]) for c in rows[0] if c.startswith("HR")]
    if deltas:
        hit_rate_curves(sorted(rows, key=lambda r: (r["method"], r["condition"])), out / "hit_rates.svg", deltas)
    if args.overlay:
        if args.overlay_data is None:
            args._parser.error("--overlay needs --overlay-data")
        data = read_dataset(args.overlay_data)
        ref = read_dataset(args.overlay_ref) if args.overlay_ref is not None else data
        absent = [g for g in args.overlay if g not in data.gather_ids]
        if absent:
            raise DatasetError(f"overlay gathers not in {args.overlay_data}: {absent}")
        for gid in args.overlay:
            g = data.load_gather(gid)
            pred = None
            if args.overlay_picks is not None:
                path = Path(args.overlay_picks) / f"{gid}.csv"
                if not path.is_file():
                    raise DatasetError(f"pick file not found: {path}")
                pred = read_picks(path, g.n_traces)
            wiggle_overlay(
                g.amplitude,
                ref.load_picks(gid),
                pred,
                out / "overlays" / f"{gid}.svg",
                sample_rate_ms=g.sample_rate_ms,
                title=gid,
            )
    print(_format_rows(rows))


COMMANDS = {
    "generate": cmd_generate,
    "corrupt": cmd_corrupt,
    "train": cmd_train,
    "pick": cmd_pick,
    "refine": cmd_refine,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def run(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
        format="%(message)s",
        stream=sys.stderr,
    )
    try:
        COMMANDS[args.command](args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"sprpick {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
