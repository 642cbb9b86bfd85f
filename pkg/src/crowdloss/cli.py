"""``crowdloss`` command line.

    crowdloss <gen|noise|train|sweep|eval|report> --config PATH [--set key=value ...] --out DIR [--force]

Exit code 0 on success. On failure the exit code is nonzero and a JSON
object ``{"error": ..., "message": ..., "key": ..., "line": ...}`` is printed
to stderr (and written to ``<out>/error.json`` when possible).
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
from .annotations import DatasetFormatError, dumps_dataset, load_dataset
from .config import (ConfigError, ConfigValues, apply_overrides, config_hash, load_config,
                     synth_config, train_config)
from .metrics import assemble_report
from .model import load_checkpoint, save_checkpoint
from .synth import DEFAULT_NOISE_RATE, generate_synthetic, inject_noise
from .train import HISTORY_FIELDS, SweepReport, TrainingDiverged, run_psi_sweep, train

COMMANDS = ("gen", "noise", "train", "sweep", "eval", "report")
EXIT_CONFIG = 2
EXIT_FAILURE = 1


class OutputExists(RuntimeError):
    pass


def _threads():
    raw = os.environ.get("CROWDLOSS_THREADS")
    if raw:
        return max(1, int(raw))
    return os.cpu_count() or 1


class Outputs:
    """Collects artifact writes for one command; refuses to clobber without ``force``."""

    def __init__(self, out_dir, values, command, force=False):
        self.dir = Path(out_dir)
        self.force = force
        self.hash = config_hash(values)
        self.seed = values.get("seed", 0)
        self.provenance = {"command": command, "config_hash": self.hash, "seed": self.seed,
                           "version": __version__,
                           "config": {k: list(v) if isinstance(v, tuple) else v
                                      for k, v in sorted(values.items())}}

    def _path(self, name):
        self.dir.mkdir(parents=True, exist_ok=True)
        path = self.dir / name
        if path.exists() and not self.force:
            raise OutputExists(f"{path} exists; pass --force to overwrite")
        return path

    def check(self, *names):
        for name in names:
            if (self.dir / name).exists() and not self.force:
                raise OutputExists(f"{self.dir / name} exists; pass --force to overwrite")

    def text(self, name, content):
        path = self._path(name)
        path.write_text(content, encoding="utf-8")
        return path

    def json(self, name, payload):
        payload = dict(payload)
        payload.setdefault("provenance", self.provenance)
        return self.text(name, json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")

    def csv(self, name, fieldnames, rows):
        path = self._path(name)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# crowdloss config_hash={self.hash} seed={self.seed}\n")
            writer = csv.DictWriter(fh, fieldnames=list(fieldnames), extrasaction="ignore")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
        return path


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def read_csv(path):
    """Read a crowdloss CSV artifact, skipping the provenance comment line."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _require(values, key):
    if not values.get(key):
        raise ConfigError(f"missing required key {key!r}", key)
    return values[key]


def _eval_data(values):
    path = values.get("test_data") or _require(values, "data")
    return load_dataset(path)


def cmd_gen(values, out: Outputs):
    cfg = synth_config(values)
    out.check("dataset.jsonl", "provenance.json")
    ds = generate_synthetic(cfg)
    out.text("dataset.jsonl", dumps_dataset(ds))
    out.json("provenance.json", {"synth_config": cfg.to_dict(), "num_samples": ds.num_samples})


def cmd_noise(values, out: Outputs):
    ds = load_dataset(_require(values, "data"))
    rate = values.get("noise_rate", DEFAULT_NOISE_RATE)
    seed = values.get("noise_seed", values.get("seed", 0))
    out.check("dataset.jsonl", "noise_record.json")
    noisy, record = inject_noise(ds, rate, seed, values.get("noise_mode", "sample"))
    out.text("dataset.jsonl", dumps_dataset(noisy))
    out.json("noise_record.json", json.loads(record.to_json()))


def _write_metrics(out, report, prefix="metrics"):
    out.json(f"{prefix}.json", {"metrics": report.to_dict(), "row": report.row()})
    out.csv(f"{prefix}.csv", report.CSV_FIELDS, [report.row()])


def cmd_train(values, out: Outputs):
    cfg = train_config(values)
    ds = load_dataset(_require(values, "data"))
    eval_ds = load_dataset(values["test_data"]) if values.get("test_data") else None
    out.check("history.csv", "model.json", "metrics.json", "metrics.csv", "mixture.json")
    try:
        model, history = train(cfg, ds, eval_ds)
    except TrainingDiverged as exc:
        out.csv("history.csv", HISTORY_FIELDS, exc.history.rows())
        raise
    out.csv("history.csv", HISTORY_FIELDS, history.rows())
    save_checkpoint(model, out._path("model.json"), out.provenance)
    report = assemble_report(model, eval_ds or ds, cfg)
    _write_metrics(out, report)
    mix = history.final_mixture
    out.json("mixture.json", {"scope": cfg.mixture_scope, "family": cfg.mixture_family,
                              "groups": mix.diagnostics() if mix else []})


def cmd_sweep(values, out: Outputs):
    cfg = train_config(values)
    ds = load_dataset(_require(values, "data"))
    eval_ds = load_dataset(values["test_data"]) if values.get("test_data") else None
    psi_values = values.get("psi_values", (0.25, 0.5, 1.0))
    out.check("sweep.csv", "sweep_runs.csv")
    report = run_psi_sweep(cfg, psi_values, ds, eval_ds, threads=_threads())
    out.csv("sweep.csv", SweepReport.FIELDS, report.rows)
    run_fields = ["psi", "seed"] + [k for k in report.runs[0] if k not in ("psi", "seed")]
    out.csv("sweep_runs.csv", run_fields, report.runs)


def cmd_eval(values, out: Outputs):
    cfg = train_config(values)
    model = load_checkpoint(_require(values, "checkpoint"))
    ds = _eval_data(values)
    out.check("metrics.json", "metrics.csv")
    _write_metrics(out, assemble_report(model, ds, cfg))


def cmd_report(values, out: Outputs):
    cfg = train_config(values)
    model = load_checkpoint(_require(values, "checkpoint"))
    ds = _eval_data(values)
    out.check("report.json", "histogram.csv", "split.csv")
    report = assemble_report(model, ds, cfg)
    out.json("report.json", {"metrics": report.to_dict()})
    out.csv("histogram.csv", ("bin_lo", "bin_hi", "majority_count", "minority_count"),
            [dict(zip(("bin_lo", "bin_hi", "majority_count", "minority_count"), r))
             for r in report.histogram])
    out.csv("split.csv", list(report.split), [report.split])


HANDLERS = {"gen": cmd_gen, "noise": cmd_noise, "train": cmd_train, "sweep": cmd_sweep,
            "eval": cmd_eval, "report": cmd_report}


def build_parser():
    parser = argparse.ArgumentParser(prog="crowdloss", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (repeatable)")
    parser.add_argument("--out", required=True, help="output directory (created if absent)")
    parser.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _fail(out_dir, kind, exc, code, key=None, line=None):
    payload = {"error": kind, "message": str(exc), "key": key, "line": line}
    text = json.dumps(payload)
    print(text, file=sys.stderr)
    try:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "error.json").write_text(text + "\n", encoding="utf-8")
    except OSError:
        pass
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        values = load_config(args.config) if args.config else ConfigValues()
        values = apply_overrides(values, args.overrides)
        out = Outputs(args.out, values, args.command, args.force)
        HANDLERS[args.command](values, out)
    except ConfigError as exc:
        return _fail(args.out, "config", exc, EXIT_CONFIG, exc.key, exc.line)
    except DatasetFormatError as exc:
        return _fail(args.out, "dataset", exc, EXIT_FAILURE)
    except OutputExists as exc:
        return _fail(args.out, "exists", exc, EXIT_FAILURE)
    except TrainingDiverged as exc:
        return _fail(args.out, "diverged", exc, EXIT_FAILURE)
    except (OSError, ValueError) as exc:
        return _fail(args.out, type(exc).__name__, exc, EXIT_FAILURE)
    return 0


if __name__ == "__main__":
    sys.exit(main())
