"""Command line entry point: ``tabdoor <command> --config FILE``.

Every run writes its artifacts plus a ``manifest.json`` (config hash, seeds,
timings and the sha256 of each artifact) into one output directory. ``report``
reads manifests back, verifies the hashes and merges the attack series.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import __version__, _jit
from .attack import complexity_sweep, first_crossing, run_backdoor_experiment, search_attack_samples
from .config import (
    build_grid,
    build_pattern,
    build_schedule,
    build_setup,
    build_template,
    config_hash,
    config_to_dict,
    load_config,
    preset_names,
)
from .errors import ConfigError, IntegrityError, TabdoorError
from .experiment import train_model
from .explain import explain_rows, ranking, write_ranking
from .metrics import X_COLUMN, MetricSeries, format_float
from .mlp import write_history

log = logging.getLogger("tabdoor")

OUTPUT_ROOT_ENV = "TABDOOR_OUTPUT_ROOT"
MANIFEST = "manifest.json"
MANIFEST_FORMAT = "tabdoor-manifest/1"
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(v):
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not JSON serialisable: {type(v).__name__}")


class ResultRecorder:
    """Single writer for one run's output directory; records what it wrote."""

    def __init__(self, out_dir, command, cfg=None):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.cfg = cfg
        self.artifacts = []
        self.series = []  # {"tier", "path"} entries that report merges
        self.seeds = {}
        self.timings = {}
        self.extra = {}
        self.t0 = time.perf_counter()

    def path(self, rel):
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def add(self, rel):
        if rel not in self.artifacts:
            self.artifacts.append(rel)
        return rel

    def json(self, rel, obj):
        _dump_json(obj, self.path(rel))
        return self.add(rel)

    def text(self, rel, text):
        self.path(rel).write_text(text, encoding="utf-8")
        return self.add(rel)

    def rows(self, rel, rows):
        with open(self.path(rel), "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
        return self.add(rel)

    def metric_series(self, rel, series: MetricSeries, tier=None):
        series.to_csv(self.path(rel))
        self.series.append({"tier": tier, "path": rel})
        return self.add(rel)

    def finish(self, status="ok", error=None):
        self.timings["total_seconds"] = round(time.perf_counter() - self.t0, 3)
        manifest = {
            "format": MANIFEST_FORMAT,
            "tool_version": __version__,
            "command": self.command,
            "status": status,
            "config_name": self.cfg.name if self.cfg else None,
            "config_hash": config_hash(self.cfg) if self.cfg else None,
            "config": config_to_dict(self.cfg) if self.cfg else None,
            "seeds": self.seeds,
            "timings": self.timings,
            "backend": _jit.backend(),
            "platform": {"python": platform.python_version(), "numpy": np.__version__},
            "artifacts": {rel: sha256_file(self.out / rel) for rel in self.artifacts if (self.out / rel).is_file()},
            "series": self.series,
            **self.extra,
        }
        if error is not None:
            manifest["error"] = error
        _dump_json(manifest, self.out / MANIFEST)
        return manifest


# -- commands -------------------------------------------------------------------------------------------

def _seeds(cfg):
    ds = cfg.dataset
    out = {"global": cfg.seed, "split": ds.split.seed}
    if ds.synthetic is not None:
        out["synthetic"] = ds.synthetic.seed
    if cfg.attack is not None:
        out["schedule"] = cfg.attack.schedule_seed
        out["repetitions"] = [cfg.seed + r for r in range(cfg.attack.repetitions)]
    return out


def _metric_lines(metrics):
    return "\n".join(f"  {k}: {format_float(v) if isinstance(v, float) else v}" for k, v in metrics.items())


def cmd_train(cfg, rec, args):
    setup = build_setup(cfg)
    t0 = time.perf_counter()
    trained = train_model(setup, cfg.seed)
    rec.timings["train_seconds"] = round(time.perf_counter() - t0, 3)
    val = trained.evaluate(setup.splits.validation, setup.beta)
    test = trained.evaluate(setup.splits.test, setup.beta)
    rec.json("metrics.json", {"task": trained.task, "validation": val, "test": test,
                              "train_rows": trained.train_rows, "input_features": trained.input_names,
                              "split_sizes": list(setup.splits.sizes())})
    trained.model.save(rec.path("model.json"))
    rec.add("model.json")
    rec.json("pipeline.json", trained.pipeline.to_dict())
    if setup.model.kind == "mlp":
        write_history(trained.history, rec.path("history.csv"))
    else:
        h = trained.history
        rows = [["round", "train_loss", "val_loss"]]
        for i, tl in enumerate(h["train_loss"]):
            vl = h["val_loss"][i] if i < len(h["val_loss"]) else float("nan")
            rows.append([i, format_float(tl), format_float(vl)])
        rec.rows("history.csv", rows)
    rec.add("history.csv")
    summary = (f"{cfg.name}: {setup.model.kind} trained on {trained.train_rows} rows, "
               f"{len(trained.input_names)} input columns\n"
               f"validation\n{_metric_lines(val)}\ntest\n{_metric_lines(test)}\n")
    rec.text("summary.txt", summary)
    return summary


def _attack_kwargs(cfg, args):
    a = cfg.attack
    return dict(repetitions=a.repetitions, aggregation=a.aggregation, base_seed=cfg.seed,
                rolling_window=a.rolling_window, n_probes=a.probes,
                max_poison_fraction=a.max_poison_fraction, jobs=args.jobs)


def _write_attack(rec, result, prefix, tier=None):
    rec.metric_series(f"{prefix}attack.csv", result.series, tier)
    for r, s in enumerate(result.runs):
        s.to_csv(rec.path(f"{prefix}runs/rep_{r:02d}.csv"))
        rec.add(f"{prefix}runs/rep_{r:02d}.csv")
    rows = [["repetition", X_COLUMN, "probe", "prediction"]]
    x = result.series.x
    for r in range(result.probe_predictions.shape[0]):
        for j, count in enumerate(x):
            for p in range(result.probe_predictions.shape[1]):
                rows.append([r, int(count), p, format_float(result.probe_predictions[r, p, j])])
    rec.rows(f"{prefix}probes.csv", rows)
    pts = [["seed", X_COLUMN, "train_rows", "params_hash"]]
    pts += [[m["seed"], m["count"], m["train_rows"], m["params_hash"]] for m in result.models]
    rec.rows(f"{prefix}points.csv", pts)


def _crossing_text(series, task, fraction):
    c = first_crossing(series, task, fraction)
    return "none" if c is None else str(c)


def cmd_attack(cfg, rec, args):
    setup = build_setup(cfg)
    template = build_template(cfg)
    schedule = build_schedule(cfg)
    result = run_backdoor_experiment(setup, template, schedule, **_attack_kwargs(cfg, args))
    rec.timings["attack_seconds"] = result.timings.get("total_seconds")
    _write_attack(rec, result, "")
    rec.extra["task"] = result.task
    rec.extra["success_fraction"] = cfg.attack.success_fraction
    s = result.series
    crossing = _crossing_text(s, result.task, cfg.attack.success_fraction)
    lines = [f"{cfg.name}: {schedule.mode} attack with template {template.name!r}, "
             f"{len(schedule.counts)} counts x {cfg.attack.repetitions} repetitions ({result.aggregation})"]
    for col in s.columns:
        lines.append(f"  {col}: {format_float(s[col][0])} -> {format_float(s[col][-1])}")
    lines.append(f"  first crossing: {crossing}")
    text = "\n".join(lines) + "\n"
    rec.text("summary.txt", text)
    return text


def cmd_sweep(cfg, rec, args):
    setup = build_setup(cfg)
    grid = build_grid(cfg)
    template = build_template(cfg)
    schedule = build_schedule(cfg)
    tiers = complexity_sweep(grid, setup, template, schedule, **_attack_kwargs(cfg, args))
    rec.extra["task"] = setup.task
    rec.extra["success_fraction"] = cfg.attack.success_fraction
    rows = [["tier", "overrides", "param_count", "first_crossing"] + sorted(next(iter(tiers.values())).clean_test)]
    lines = [f"{cfg.name}: complexity sweep over {list(tiers)}"]
    for name, t in tiers.items():
        _write_attack(rec, t.result, f"tiers/{name}/", tier=name)
        rec.timings[f"tier_{name}_seconds"] = t.result.timings.get("total_seconds")
        crossing = _crossing_text(t.result.series, t.result.task, cfg.attack.success_fraction)
        rows.append([name, json.dumps(t.overrides, sort_keys=True), "" if t.param_count is None else t.param_count,
                     crossing] + [format_float(t.clean_test[k]) for k in sorted(t.clean_test)])
        lines.append(f"  {name}: first crossing {crossing}, clean {_inline(t.clean_test)}"
                     + (f", {t.param_count} parameters" if t.param_count is not None else ""))
    rec.rows("tiers.csv", rows)
    text = "\n".join(lines) + "\n"
    rec.text("summary.txt", text)
    return text


def _inline(d):
    return ", ".join(f"{k}={v:.4g}" for k, v in sorted(d.items()))


def cmd_search(cfg, rec, args):
    if cfg.search is None:
        raise ConfigError("search: this command needs a 'search' block")
    setup = build_setup(cfg)
    pattern = build_pattern(cfg)
    ranked = search_attack_samples(setup, pattern, cfg.search.candidates, cfg.search.budget, cfg.seed,
                                   cfg.attack.probes, args.jobs)
    carrier = [f.name for f in setup.schema.inputs if f.name not in pattern.fixed_features]
    rows = [["rank", "candidate", "score", "attack_prediction", "probe_median"] + carrier]
    for i, c in enumerate(ranked):
        rows.append([i + 1, c.template.name, format_float(c.score), format_float(c.attack_prediction),
                     format_float(c.probe_median)] + [_cell(c.template.full_row.get(n)) for n in carrier])
    rec.rows("search.csv", rows)
    best = ranked[0]
    text = (f"{cfg.name}: {len(ranked)} candidates, budget {cfg.search.budget}\n"
            f"  best {best.template.name}: probe median drop {format_float(best.score)}\n")
    rec.text("summary.txt", text)
    return text


def _cell(v):
    if v is None:
        return ""
    return format_float(v) if isinstance(v, float) else str(v)


def cmd_explain(cfg, rec, args):
    setup = build_setup(cfg)
    trained = train_model(setup, cfg.seed)
    ex = cfg.explain
    test, train = setup.splits.test, setup.splits.train
    rows = test.take(np.arange(min(ex.rows, test.n_rows)))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))
    bg = train.take(np.sort(rng.choice(train.n_rows, min(ex.background, train.n_rows), replace=False)))
    estimates = explain_rows(trained, rows, bg, ex.permutations, cfg.seed)
    write_ranking(estimates, rec.path("shapley_ranking.csv"))
    rec.add("shapley_ranking.csv")
    table = [["row", "feature", "attribution", "std_error"]]
    for i, e in enumerate(estimates):
        for name, v, se in zip(e.names, e.values, e.std_errors):
            table.append([i, name, format_float(v), format_float(se)])
    rec.rows("shapley_values.csv", table)
    top = ranking(estimates)[:5]
    text = f"{cfg.name}: mean |attribution| over {len(estimates)} test rows\n" + "".join(
        f"  {r}. {n}: {a:.4g}\n" for r, n, a, _ in top)
    rec.text("summary.txt", text)
    return text


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "sweep": cmd_sweep, "search": cmd_search,
            "explain": cmd_explain}


# -- report ---------------------------------------------------------------------------------------------

def read_manifest(result_dir, verify=True):
    d = Path(result_dir)
    path = d / MANIFEST
    if not path.is_file():
        raise IntegrityError(f"{d}: no {MANIFEST}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format") != MANIFEST_FORMAT:
        raise IntegrityError(f"{path}: unknown manifest format {manifest.get('format')!r}")
    if verify:
        for rel, digest in manifest.get("artifacts", {}).items():
            p = d / rel
            if not p.is_file():
                raise IntegrityError(f"{d}: artifact {rel} is missing")
            actual = sha256_file(p)
            if actual != digest:
                raise IntegrityError(f"{d}: artifact {rel} has sha256 {actual[:12]}..., manifest says {digest[:12]}...")
    return manifest


def build_report(result_dirs):
    """Long-format rows ``(experiment, tier, count, metric, value)`` and crossing rows."""
    long_rows, crossings = [], []
    for d in result_dirs:
        m = read_manifest(d)
        name = m.get("config_name") or Path(d).name
        for entry in m.get("series", []):
            series = MetricSeries.from_csv(Path(d) / entry["path"])
            tier = entry.get("tier") or "base"
            for i, x in enumerate(series.x):
                for col, values in series.columns.items():
                    long_rows.append([name, tier, int(x), col, format_float(values[i])])
            c = first_crossing(series, m.get("task", "regression"), m.get("success_fraction", 0.5))
            crossings.append([name, tier, "none" if c is None else str(c)])
    return long_rows, crossings


def cmd_report(args):
    long_rows, crossings = build_report(args.dirs)
    out = Path(args.out) if args.out else Path(args.dirs[0]).parent
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["experiment", "tier", X_COLUMN, "metric", "value"])
        w.writerows(long_rows)
    with open(out / "crossings.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["experiment", "tier", "first_crossing"])
        w.writerows(crossings)
    for name, tier, c in crossings:
        print(f"{name} [{tier}]: first crossing {c}")
    print(f"wrote {out / 'report.csv'} ({len(long_rows)} rows)")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------------------------------

def _parser():
    p = argparse.ArgumentParser(prog="tabdoor", description="Backdoor poisoning experiments on tabular models.")
    p.add_argument("--version", action="version", version=f"tabdoor {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in (("train", "train and score one clean model"),
                            ("attack", "retrain along an injection schedule and record the attack curve"),
                            ("sweep", "run the attack against each capacity tier"),
                            ("search", "rank random carriers for the attack pattern"),
                            ("explain", "Shapley attributions for test rows")):
        c = sub.add_parser(name, help=help_text)
        c.add_argument("--config", required=True, help="YAML config file or shipped preset name")
        c.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<name>/<command>)")
        c.add_argument("--seed", type=int, help="override the config's global seed")
        c.add_argument("--jobs", type=int, default=1, help="worker processes for independent retrainings")
        c.add_argument("--max-poison-fraction", type=_fraction,
                       help="largest injected count as a share of training rows ('none' disables)")
        c.add_argument("-v", "--verbose", action="store_true")
    r = sub.add_parser("report", help="merge result directories into long-format CSV")
    r.add_argument("dirs", nargs="+")
    r.add_argument("--out", help="where report.csv and crossings.csv go (default: parent of the first dir)")
    sub.add_parser("presets", help="list shipped preset configs")
    return p


def _fraction(text):
    if text.lower() == "none":
        return "none"
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'none', got {text!r}") from None
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError("must lie in (0, 1]")
    return v


def _output_dir(args, cfg):
    if args.out:
        return Path(args.out)
    if cfg.output:
        return Path(cfg.output)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "results")) / cfg.name / args.command


def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg.seed = args.seed
    if args.max_poison_fraction is not None:
        if cfg.attack is None:
            raise ConfigError("--max-poison-fraction: the config has no 'attack' block")
        cfg.attack.max_poison_fraction = None if args.max_poison_fraction == "none" else args.max_poison_fraction
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    if args.command in ("attack", "sweep", "search") and cfg.attack is None:
        raise ConfigError(f"{args.command}: the config needs an 'attack' block")
    return cfg


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "presets":
        for n in preset_names():
            print(n)
        return EXIT_OK
    if args.command == "report":
        try:
            return cmd_report(args)
        except IntegrityError as exc:
            print(f"integrity error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        except (TabdoorError, OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME

    try:
        cfg = _apply_overrides(load_config(args.config), args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    rec = ResultRecorder(_output_dir(args, cfg), args.command, cfg)
    rec.seeds = _seeds(cfg)
    try:
        text = COMMANDS[args.command](cfg, rec, args)
    except ConfigError as exc:
        rec.finish("failed", {"category": "config", "message": str(exc)})
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every failure is reported through the manifest
        category = type(exc).__name__
        rec.finish("failed", {"category": category, "message": str(exc),
                              "traceback": traceback.format_exc(limit=5)})
        print(f"{category}: {exc}", file=sys.stderr)
        print(f"partial outputs: {sorted(rec.artifacts) or 'none'} (manifest in {rec.out / MANIFEST})",
              file=sys.stderr)
        return EXIT_RUNTIME
    rec.finish()
    sys.stdout.write(text)
    print(f"results in {rec.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
