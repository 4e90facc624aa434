"""Command line pipeline: generate-data -> train -> infer -> evaluate -> sparsify -> report.

Every subcommand writes into its own ``--out`` directory and leaves a
``run_record.json`` there holding the command line, the merged
configuration, seeds, timestamps and the hashes of everything it wrote.
Passing a run record back through ``--config`` replays the run.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import yaml

from . import fileio
from .datagen import SceneSpec, load_dataset, write_dataset
from .evaluation import (SPARSIFICATION_METRICS, DepthMetrics, aggregate_over_test_set, evaluate_image)
from .trainer import Experiment, TrainConfig, train
from .uncertainty import KINDS, StrategyConfig

log = logging.getLogger(__name__)

RUN_RECORD = "run_record.json"
# Presentation-only files kept out of output hashes.
_UNHASHED = (RUN_RECORD,)
_PLOT_SUFFIX = ".png"

METRIC_COLUMNS = list(DepthMetrics.__dataclass_fields__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# option tables: name -> (type, default, help).  Defaults are applied after
# merging config files so that explicit flags always win.
# --------------------------------------------------------------------------

_REQUIRED = object()

OPTIONS: Dict[str, Dict[str, tuple]] = {
    "generate-data": {
        "count": (int, 50, "number of samples"),
        "seed": (int, 0, "scene seed"),
        "num_primitives": (int, 4, "slanted patches per scene"),
        "depth_min": (float, 2.0, "nearest scene depth (m)"),
        "depth_max": (float, 20.0, "farthest scene depth (m)"),
        "texture_octaves": (int, 3, "value-noise octaves"),
        "baseline": (float, 0.2, "stereo baseline (m)"),
        "width": (int, 64, "image width"),
        "height": (int, 64, "image height"),
        "focal": (float, 48.0, "focal length (px)"),
    },
    "train": {
        "data": (str, _REQUIRED, "dataset directory"),
        "strategy": (str, "post", "uncertainty strategy: " + ", ".join(KINDS)),
        "supervision": (str, "S", "S, M or MS"),
        "epochs": (int, 10, "training epochs"),
        "student_epochs": (int, None, "epochs for self-teaching students"),
        "batch_size": (int, 4, "batch size"),
        "lr": (float, 1e-4, "learning rate (lambda0 for snapshots)"),
        "seed": (int, 0, "training seed"),
        "n": (int, 8, "ensemble size / dropout samples / snapshots used"),
        "cycles": (int, 20, "snapshot cycles C"),
        "augment": (bool, True, "random flips and colour jitter"),
    },
    "infer": {
        "experiment": (str, _REQUIRED, "experiment directory (contains manifest.json)"),
        "data": (str, _REQUIRED, "dataset directory"),
        "split": (str, "test", "train, test or all"),
        "seed": (int, None, "dropout sampling seed (defaults to the training seed)"),
    },
    "evaluate": {
        "predictions": (str, _REQUIRED, "infer output directory"),
        "data": (str, None, "dataset directory (defaults to the one used by infer)"),
        "median_scaling": (bool, None, "rescale by median ratio (default: on for M)"),
        "label": (str, None, "row label (defaults to strategy and supervision)"),
    },
    "sparsify": {
        "predictions": (str, _REQUIRED, "infer output directory"),
        "data": (str, None, "dataset directory (defaults to the one used by infer)"),
        "median_scaling": (bool, None, "rescale by median ratio (default: on for M)"),
        "label": (str, None, "row label (defaults to strategy and supervision)"),
    },
    "report": {
        "inputs": (list, _REQUIRED, "directories holding metrics.csv and/or sparsification.csv"),
    },
}


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="monouq", description="Self-supervised depth with uncertainty, end to end.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, options in OPTIONS.items():
        p = sub.add_parser(name)
        p.add_argument("--out", required=True, help="output directory (owned by this run)")
        p.add_argument("--config", help="YAML/JSON config file or a previous run record")
        for key, (typ, default, text) in options.items():
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, action=argparse.BooleanOptionalAction, default=None, help=text)
            elif typ is list:
                p.add_argument(flag, nargs="+", default=None, help=text)
            else:
                p.add_argument(flag, type=typ, default=None, help=text)
    return parser


def _read_config(path: Optional[str], command: str) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValueError(f"cannot read config {path}: {exc}") from exc
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ValueError(f"config {path} must be a mapping")
    if "command" in data and "config" in data:       # a run record
        if data["command"] != command:
            raise UsageError(f"run record is for {data['command']!r}, not {command!r}")
        data = data["config"]
    data = {str(k).replace("-", "_"): v for k, v in data.items()}
    unknown = set(data) - set(OPTIONS[command])
    if unknown:
        raise UsageError(f"unknown {command} config keys: {', '.join(sorted(unknown))}")
    return data


def merge_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults <- config file <- explicit flags."""
    options = OPTIONS[command]
    merged = {k: spec[1] for k, spec in options.items()}
    merged.update(_read_config(args.config, command))
    merged.update({k: getattr(args, k) for k in options if getattr(args, k) is not None})
    missing = [k for k, v in merged.items() if v is _REQUIRED]
    if missing:
        raise UsageError(f"{command}: missing required option(s) "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))
    return merged


# --------------------------------------------------------------------------
# subcommands; each returns the seeds it used
# --------------------------------------------------------------------------

def _generate(cfg: dict, out: Path) -> dict:
    spec = SceneSpec(seed=cfg["seed"], num_primitives=cfg["num_primitives"],
                     depth_range=(cfg["depth_min"], cfg["depth_max"]),
                     texture_octaves=cfg["texture_octaves"], baseline=cfg["baseline"],
                     width=cfg["width"], height=cfg["height"], focal=cfg["focal"])
    if cfg["count"] < 1:
        raise ValueError("count must be positive")
    write_dataset(spec, cfg["count"], out)
    return {"scene": cfg["seed"]}


def _train(cfg: dict, out: Path) -> dict:
    dataset = load_dataset(cfg["data"])
    strategy = StrategyConfig(cfg["strategy"], N=cfg["n"])
    config = TrainConfig(supervision=cfg["supervision"], strategy=strategy, epochs=cfg["epochs"],
                         batch_size=cfg["batch_size"], lr=cfg["lr"], seed=cfg["seed"],
                         student_epochs=cfg["student_epochs"], augment=cfg["augment"],
                         snapshot_cycles=cfg["cycles"])
    train(config, dataset, out)
    return {"training": cfg["seed"]}


def _infer(cfg: dict, out: Path) -> dict:
    dataset = load_dataset(cfg["data"])
    experiment = Experiment(cfg["experiment"], seed=cfg["seed"])
    if experiment.manifest.dataset_hash != dataset.content_hash:
        log.warning("dataset differs from the one the experiment was trained on")
    split = cfg["split"]
    if split == "all":
        indices = list(range(len(dataset)))
    elif split in ("train", "test"):
        indices = dataset.train_indices if split == "train" else dataset.test_indices
    else:
        raise UsageError(f"unknown split {split!r}")
    entries = []
    for i in indices:
        image_id = dataset.ids[i]
        experiment.reset_counter()
        depth, uncertainty = experiment.infer(dataset.frame(i))
        d_name, u_name = f"{image_id}_depth.uqdm", f"{image_id}_uncertainty.uqdm"
        fileio.write_map(out / d_name, depth.values)
        fileio.write_map(out / u_name, uncertainty.values)
        entries.append({"id": image_id, "depth": d_name, "uncertainty": u_name,
                        "forward_passes": experiment.forward_count})
    config = experiment.config
    fileio.write_json(out / "predictions.json", {
        "experiment": str(Path(cfg["experiment"])),
        "data": str(Path(cfg["data"])),
        "dataset_hash": dataset.content_hash,
        "strategy": config.strategy.kind,
        "supervision": config.supervision,
        "split": split,
        "entries": entries,
    })
    return {"dropout": experiment.seed}


def _load_predictions(cfg: dict):
    root = Path(cfg["predictions"])
    record = fileio.read_json(root / "predictions.json")
    dataset = load_dataset(cfg["data"] or record["data"])
    index = {image_id: i for i, image_id in enumerate(dataset.ids)}
    median = cfg["median_scaling"]
    if median is None:
        median = record["supervision"] == "M"
    label = cfg["label"] or f"{record['strategy']} ({record['supervision']})"
    items = []
    for e in record["entries"]:
        if e["id"] not in index:
            raise ValueError(f"prediction {e['id']} is not in the dataset")
        gt = dataset.depth[index[e["id"]]]
        pred = fileio.read_map(root / e["depth"])
        unc = fileio.read_map(root / e["uncertainty"])
        if pred.shape != gt.shape or unc.shape != gt.shape:
            raise ValueError(f"prediction {e['id']} does not match the ground-truth size")
        items.append((e["id"], pred, gt, unc))
    if not items:
        raise ValueError("no predictions to evaluate")
    return items, median, label


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def _evaluate(cfg: dict, out: Path) -> dict:
    items, median, label = _load_predictions(cfg)
    rows, all_metrics = [], []
    for image_id, pred, gt, _ in items:
        metrics, _ = evaluate_image(pred, gt, use_median_scaling=median)
        all_metrics.append(metrics)
        rows.append([label, image_id] + [getattr(metrics, k) for k in METRIC_COLUMNS])
    mean = DepthMetrics.mean(all_metrics)
    rows.append([label, "mean"] + [getattr(mean, k) for k in METRIC_COLUMNS])
    _write_csv(out / "metrics.csv", ["label", "id"] + METRIC_COLUMNS, rows)
    return {}


def _plot_curve(path: Path, result, label: str):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(result.fractions, result.oracle_curve, label="oracle")
    ax.plot(result.fractions, result.estimated_curve, label="estimated")
    ax.plot(result.fractions, result.random_curve, "--", label="random")
    ax.set_xlabel("fraction of pixels removed")
    ax.set_ylabel(result.metric)
    ax.set_title(f"{label}: AUSE {result.ause:.4g}, AURG {result.aurg:.4g}", fontsize=8)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _sparsify(cfg: dict, out: Path) -> dict:
    items, median, label = _load_predictions(cfg)
    per_metric: Dict[str, list] = {m: [] for m in SPARSIFICATION_METRICS}
    for _, pred, gt, unc in items:
        _, sparse = evaluate_image(pred, gt, unc, use_median_scaling=median)
        for m, r in sparse.items():
            per_metric[m].append(r)
    rows = []
    for m in SPARSIFICATION_METRICS:
        agg = aggregate_over_test_set(per_metric[m])
        rows.append([label, m, agg.ause, agg.aurg])
        _write_csv(out / f"curve_{m}.csv", ["fraction", "estimated", "oracle", "random"], agg.rows())
        _plot_curve(out / f"curve_{m}{_PLOT_SUFFIX}", agg, label)
    _write_csv(out / "sparsification.csv", ["label", "metric", "ause", "aurg"], rows)
    return {}


REPORT_COLUMNS = (["label", "abs_rel", "rmse", "delta1"]
                  + [f"{a}_{m}" for m in SPARSIFICATION_METRICS for a in ("ause", "aurg")])


def build_report(inputs: Sequence[Path]) -> List[dict]:
    """Merge evaluate/sparsify CSVs into one row per label (pure in the CSV contents)."""
    table: Dict[str, dict] = {}
    for root in inputs:
        root = Path(root)
        found = False
        if (root / "metrics.csv").is_file():
            found = True
            with open(root / "metrics.csv", newline="") as fh:
                for row in csv.DictReader(fh):
                    if row["id"] == "mean":
                        entry = table.setdefault(row["label"], {})
                        for k in ("abs_rel", "rmse", "delta1"):
                            entry[k] = float(row[k])
        if (root / "sparsification.csv").is_file():
            found = True
            with open(root / "sparsification.csv", newline="") as fh:
                for row in csv.DictReader(fh):
                    entry = table.setdefault(row["label"], {})
                    entry[f"ause_{row['metric']}"] = float(row["ause"])
                    entry[f"aurg_{row['metric']}"] = float(row["aurg"])
        if not found:
            raise ValueError(f"{root} holds neither metrics.csv nor sparsification.csv")
    return [{"label": label, **values} for label, values in sorted(table.items())]


def _report(cfg: dict, out: Path) -> dict:
    rows = build_report(cfg["inputs"])
    _write_csv(out / "report.csv", REPORT_COLUMNS,
               [[r.get(c, "") for c in REPORT_COLUMNS] for r in rows])
    lines = ["| " + " | ".join(REPORT_COLUMNS) + " |", "|" + "---|" * len(REPORT_COLUMNS)]
    for r in rows:
        cells = [r["label"]] + [f"{r[c]:.4f}" if c in r else "" for c in REPORT_COLUMNS[1:]]
        lines.append("| " + " | ".join(cells) + " |")
    (out / "report.md").write_text("\n".join(lines) + "\n")
    return {}


COMMANDS: Dict[str, Callable[[dict, Path], dict]] = {
    "generate-data": _generate,
    "train": _train,
    "infer": _infer,
    "evaluate": _evaluate,
    "sparsify": _sparsify,
    "report": _report,
}


def output_hashes(out: Path) -> Dict[str, str]:
    hashes = fileio.hash_tree(out, exclude=_UNHASHED)
    return {k: v for k, v in hashes.items() if not k.endswith(_PLOT_SUFFIX)}


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("monouq: a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = merge_config(args.command, args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        started = _now()
        seeds = COMMANDS[args.command](cfg, out)
        fileio.write_json(out / RUN_RECORD, {
            "command": args.command,
            "argv": argv,
            "config": cfg,
            "seeds": seeds,
            "started": started,
            "finished": _now(),
            "outputs": output_hashes(out),
        })
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError, json.JSONDecodeError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def cli(argv: Optional[Sequence[str]] = None) -> int:
    return main(argv)
