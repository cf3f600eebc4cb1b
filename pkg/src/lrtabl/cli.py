"""``lrtabl <count|train|eval|sweep|bench> [flags]``

Option precedence: built-in defaults < ``--config FILE`` (flat TOML) < flags.
Every command that writes to ``--out`` also writes the resolved config there.

Exit codes: 0 success, 2 data/config errors, 3 compatibility errors,
4 numerical divergence. Failures print one line to stderr of the form
``lrtabl: error[<category>]: <message>``.
"""

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import bench, layers
from .data import DataError, Layout, build_datasets, list_day_files, load_day_files, synthetic_lob
from .model import build_structure, evaluate, structure_spec, total_param_count
from .tensor_core import ShapeError
from .training import (
    CheckpointError,
    DivergenceError,
    TrainConfig,
    atomic_write,
    history_csv,
    load_checkpoint,
    save_checkpoint,
    train,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_OK = 0
EXIT_DATA = 2
EXIT_COMPAT = 3
EXIT_DIVERGED = 4

TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed", "max_epochs"}


class CliError(Exception):
    def __init__(self, category, message, code=EXIT_DATA):
        super().__init__(message)
        self.category = category
        self.code = code


@dataclass
class RunConfig:
    structure: str | None = None
    variant: str | None = None
    rank: int | None = None
    rank_range: str | None = None
    data: str | None = None
    layout: str | None = None
    out: str | None = None
    seed: int = 0
    epochs: int | None = None
    synthetic: bool = False
    synthetic_days: int = 10
    synthetic_events: int = 200
    synthetic_signal: float = 3.0
    synthetic_seed: int = 0
    normalize: bool | None = None
    iterations: int = 10_000
    split: str = "test"
    checkpoint: str | None = None
    train: dict = field(default_factory=dict)

    @property
    def ranks(self):
        if self.rank_range is not None:
            return parse_ranks(self.rank_range)
        return [self.rank] if self.rank is not None else []

    def train_config(self):
        opts = dict(self.train, seed=self.seed)
        if self.epochs is not None:
            opts["max_epochs"] = self.epochs
        try:
            return TrainConfig.from_dict(opts)
        except (TypeError, ValueError) as exc:
            raise CliError("config_invalid", str(exc)) from None

    def to_toml(self):
        """Flat TOML that ``--config`` reads back to the same run."""
        cfg = self.train_config().to_dict()
        lines = []
        for f in fields(self):
            v = cfg["max_epochs"] if f.name == "epochs" else getattr(self, f.name)
            if f.name != "train" and v is not None:
                lines.append(f"{f.name} = {_toml_value(v)}")
        for k in sorted(TRAIN_KEYS):
            lines.append(f"{k} = {_toml_value(cfg[k])}")
        return "\n".join(lines) + "\n"


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    return json.dumps(str(v))


def parse_ranks(text):
    """``"3"``, ``"1..23"`` (inclusive) or ``"1,2,5"`` to a list of ranks."""
    text = str(text).strip()
    try:
        if ".." in text:
            a, b = text.split("..")
            ranks = list(range(int(a), int(b) + 1))
        else:
            ranks = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise CliError("config_invalid", f"cannot parse rank range {text!r}") from None
    if not ranks or min(ranks) < 1:
        raise CliError("config_invalid", f"rank range {text!r} must be non-empty with ranks >= 1")
    return ranks


def resolve_config(args):
    values = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, "rb") as f:
                values.update(tomllib.load(f))
        except FileNotFoundError:
            raise CliError("config_invalid", f"config file not found: {args.config}") from None
        except tomllib.TOMLDecodeError as exc:
            raise CliError("config_invalid", f"{args.config}: {exc}") from None
    for k, v in vars(args).items():
        if k in ("command", "config", "positional") or v is None or v is False:
            continue
        values[k] = v

    run_keys = {f.name for f in fields(RunConfig)} - {"train"}
    train_opts = {k: values.pop(k) for k in list(values) if k in TRAIN_KEYS}
    unknown = set(values) - run_keys
    if unknown:
        raise CliError("config_invalid", f"unknown config keys: {sorted(unknown)}")
    rc = RunConfig(**values, train=train_opts)

    if rc.rank is not None and rc.rank_range is not None:
        raise CliError("config_invalid", "give either rank or rank_range, not both")
    if rc.variant is None:
        rc.variant = "lowrank" if rc.ranks else "full"
    if rc.variant not in ("full", "lowrank"):
        raise CliError("config_invalid", f"unknown variant {rc.variant!r}")
    if rc.variant == "full" and rc.ranks and args.command != "sweep":
        raise CliError("config_invalid", "rank is not allowed with variant=full")
    if rc.structure is not None and rc.structure not in ("A", "B", "C"):
        raise CliError("config_invalid", f"unknown structure {rc.structure!r}")
    rc.train_config()
    return rc


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _out_dir(rc, required=False):
    if rc.out is None:
        if required:
            raise CliError("config_invalid", "--out DIR is required for this command")
        return None
    path = Path(rc.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _emit(rc, name, text):
    out = _out_dir(rc)
    if out is not None:
        atomic_write(out / name, text)
        atomic_write(out / "config.toml", rc.to_toml())
    sys.stdout.write(text)


def load_data(rc):
    """``(train, test)`` datasets from synthetic generation or a directory of day files."""
    layout = Layout()
    if rc.layout:
        try:
            layout = Layout.from_toml(rc.layout)
        except FileNotFoundError:
            raise CliError("data_not_found", f"layout file not found: {rc.layout}") from None
        except (DataError, TypeError, tomllib.TOMLDecodeError) as exc:
            raise CliError("data_invalid", f"{rc.layout}: {exc}") from None
    try:
        if rc.synthetic:
            days = synthetic_lob(rc.synthetic_days, rc.synthetic_events, rc.synthetic_signal, rc.synthetic_seed,
                                 n_label_rows=len(layout.label_rows))
            normalize = True if rc.normalize is None else rc.normalize
        else:
            path = rc.data or os.environ.get("LRTABL_DATA")
            if not path or not Path(path).is_dir():
                raise CliError("data_not_found", f"data directory not found: {path!r} (use --data, LRTABL_DATA or --synthetic)")
            files = list_day_files(path)
            if not files:
                raise CliError("data_not_found", f"no day files (*.txt, *.csv, *.dat) in {path}")
            days = load_day_files(files, layout)
            normalize = bool(rc.normalize)
        train_set, test_set, _ = build_datasets(days, layout.horizon_index, normalize)
    except DataError as exc:
        raise CliError("data_invalid", str(exc)) from None
    return train_set, test_set


def _check_shape(net, dataset):
    if dataset.windows.shape[1:] != net.spec.input_shape:
        raise CliError("spec_mismatch",
                       f"network expects {net.spec.input_shape} windows, data has {dataset.windows.shape[1:]}",
                       EXIT_COMPAT)


METRIC_HEADER = ["split", "n", "accuracy", "precision", "recall", "f1"] + [
    f"cm_{i}_{j}" for i in range(3) for j in range(3)
]


def metrics_row(split, m):
    return [split, m.n_samples] + [_fmt(x) for x in (m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1)] + [
        int(c) for c in m.confusion.ravel()
    ]


def _fit_and_score(rc, structure, variant, rank, seed, train_set, test_set):
    net = build_structure(structure, variant, rank, seed=seed)
    _check_shape(net, train_set)
    cfg = rc.train_config()
    cfg.seed = seed
    try:
        result = train(net, train_set, cfg)
    except DivergenceError as exc:
        raise CliError("divergence", str(exc), EXIT_DIVERGED) from None
    return result, cfg, evaluate(result.net, test_set.windows, test_set.labels)


def cmd_count(rc):
    structure = rc.structure or "A"
    ranks = rc.ranks if rc.variant == "lowrank" else [None]
    if not ranks:
        raise CliError("config_invalid", "low-rank count needs --rank or --rank-range")
    rows = []
    n_layers = 0
    for k in ranks:
        spec = structure_spec(structure, rc.variant, k)
        per_layer = [layers.param_count(s) for s in spec.layers]
        n_layers = len(per_layer)
        rows.append([structure, rc.variant, _fmt(k), total_param_count(spec)] + per_layer)
    header = ["structure", "variant", "K", "total_params"] + [f"layer_{i + 1}" for i in range(n_layers)]
    _emit(rc, "count.csv", _csv_text(header, rows))


def cmd_train(rc):
    out = _out_dir(rc, required=True)
    train_set, test_set = load_data(rc)
    result, cfg, test_m = _fit_and_score(rc, rc.structure or "A", rc.variant, rc.rank, rc.seed, train_set, test_set)
    _, val = train_set.tail_split(cfg.val_fraction)
    val_m = evaluate(result.net, val.windows, val.labels)

    save_checkpoint(out / "checkpoint.lrtabl", result.net, result.state, cfg)
    atomic_write(out / "history.csv", history_csv(result.history))
    atomic_write(out / "metrics.csv", _csv_text(METRIC_HEADER, [metrics_row("val", val_m), metrics_row("test", test_m)]))
    atomic_write(out / "config.toml", rc.to_toml())
    print(f"trained {len(result.history)} epochs; best epoch {result.state.best_epoch}; "
          f"test acc {test_m.accuracy:.4f} macro-F1 {test_m.macro_f1:.4f}")


def cmd_eval(rc):
    if not rc.checkpoint:
        raise CliError("config_invalid", "--checkpoint FILE is required")
    try:
        ckpt = load_checkpoint(rc.checkpoint)
    except FileNotFoundError:
        raise CliError("data_not_found", f"checkpoint not found: {rc.checkpoint}") from None
    except (CheckpointError, KeyError, ValueError) as exc:
        raise CliError("checkpoint_invalid", str(exc), EXIT_COMPAT) from None
    spec = ckpt.net.spec
    wanted = {"structure_id": rc.structure, "rank": rc.rank}
    for attr, v in wanted.items():
        if v is not None and getattr(spec, attr) != v:
            raise CliError("spec_mismatch", f"checkpoint has {attr}={getattr(spec, attr)!r}, requested {v!r}", EXIT_COMPAT)
    if rc.rank is not None and spec.variant != "lowrank":
        raise CliError("spec_mismatch", "checkpoint is a full-rank network", EXIT_COMPAT)

    train_set, test_set = load_data(rc)
    if rc.split == "test":
        ds = test_set
    elif rc.split in ("val", "fit"):
        frac = (ckpt.config or {}).get("val_fraction", 0.1)
        fit, val = train_set.tail_split(frac)
        ds = val if rc.split == "val" else fit
    elif rc.split == "train":
        ds = train_set
    else:
        raise CliError("config_invalid", f"unknown split {rc.split!r}")
    _check_shape(ckpt.net, ds)
    m = evaluate(ckpt.net, ds.windows, ds.labels)
    _emit(rc, "metrics.csv", _csv_text(METRIC_HEADER, [metrics_row(rc.split, m)]))


SWEEP_HEADER = ["model", "K", "acc", "p", "r", "f1", "params"]


def cmd_sweep(rc):
    ranks = rc.ranks
    if not ranks:
        raise CliError("config_invalid", "sweep needs --rank-range")
    structure = rc.structure or "A"
    train_set, test_set = load_data(rc)
    rows = []
    result, _, m = _fit_and_score(rc, structure, "full", None, rc.seed, train_set, test_set)
    rows.append([f"TABL {structure}", "", _fmt(m.accuracy), _fmt(m.macro_precision), _fmt(m.macro_recall),
                 _fmt(m.macro_f1), total_param_count(result.net.spec)])
    for k in ranks:
        # per-K seed keeps each run independent of sweep order
        result, _, m = _fit_and_score(rc, structure, "lowrank", k, rc.seed + k, train_set, test_set)
        rows.append([f"LR-TABL {structure}", k, _fmt(m.accuracy), _fmt(m.macro_precision), _fmt(m.macro_recall),
                     _fmt(m.macro_f1), total_param_count(result.net.spec)])
    _emit(rc, "sweep.csv", _csv_text(SWEEP_HEADER, rows))


BENCH_HEADER = ["row", "variant", "K", "params", "flops_xbar", "flops_e", "flops_y", "flops_total",
                "median_us", "p95_us", "batch_1e4_ms"]


def _bench_csv_row(r):
    lat = r.latency
    tail = ["", "", ""] if lat is None else [f"{lat.median_us:.3f}", f"{lat.p95_us:.3f}", f"{lat.batch_1e4_ms:.3f}"]
    return [r.row, r.variant, _fmt(r.rank), _fmt(r.params), _fmt(r.flops["xbar"]), _fmt(r.flops["e"]),
            _fmt(r.flops["y"]), _fmt(r.flops_total)] + tail


def cmd_bench(rc):
    if rc.iterations < 100:
        raise CliError("config_invalid", "--iterations must be >= 100")
    structure = rc.structure or "A"
    if rc.variant == "lowrank" and len(rc.ranks) != 1:
        raise CliError("config_invalid", "bench needs exactly one --rank for the low-rank variant")
    rank = rc.ranks[0] if rc.variant == "lowrank" else None
    net = build_structure(structure, rc.variant, rank, seed=rc.seed)
    rows = bench.bench_rows(net, bench.measure_latency(net, rc.iterations, seed=rc.seed))
    if rc.variant == "lowrank":
        full = build_structure(structure, "full", seed=rc.seed)
        full_rows = bench.bench_rows(full, bench.measure_latency(full, rc.iterations, seed=rc.seed))
        rows += full_rows + [bench.ratio_row(rows[-1], full_rows[-1])]
    _emit(rc, "bench.csv", _csv_text(BENCH_HEADER, [_bench_csv_row(r) for r in rows]))


COMMANDS = {"count": cmd_count, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "bench": cmd_bench}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--structure", choices=["A", "B", "C"])
    common.add_argument("--variant", choices=["full", "lowrank"])
    common.add_argument("--rank", type=int)
    common.add_argument("--rank-range", dest="rank_range", metavar="A..B")
    common.add_argument("--data", metavar="DIR")
    common.add_argument("--layout", metavar="FILE")
    common.add_argument("--config", metavar="FILE")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--seed", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--synthetic", action="store_true", help="use generated data")

    parser = argparse.ArgumentParser(prog="lrtabl", description="TABL / LR-TABL networks for LOB mid-price direction.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("count", parents=[common], help="parameter counts")
    p.add_argument("positional", nargs="*", metavar="STRUCTURE [VARIANT [K|A..B]]")
    sub.add_parser("train", parents=[common], help="train and write checkpoint, history and metrics")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", metavar="FILE")
    p.add_argument("--split", choices=["train", "fit", "val", "test"])
    sub.add_parser("sweep", parents=[common], help="train/eval over a range of ranks")
    p = sub.add_parser("bench", parents=[common], help="analytic FLOPs and measured latency")
    p.add_argument("--iterations", type=int)
    return parser


def _apply_count_positionals(args):
    pos = list(getattr(args, "positional", None) or [])
    if len(pos) > 3:
        raise CliError("config_invalid", "count takes at most STRUCTURE VARIANT RANKS")
    for name, value in zip(("structure", "variant", "rank_range"), pos):
        if getattr(args, name, None) is None:
            setattr(args, name, value)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "count":
            _apply_count_positionals(args)
        rc = resolve_config(args)
        COMMANDS[args.command](rc)
    except CliError as exc:
        print(f"lrtabl: error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.code
    except ShapeError as exc:
        print(f"lrtabl: error[spec_mismatch]: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
