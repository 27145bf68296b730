"""Command line: gen-data, train, eval, ablate.

Run layout::

    OUT/seed_<s>/checkpoint.bin, loss_trace.csv, config.json, experiment.json
    OUT/report.csv                       (eval: one row per seed + aggregate)
    OUT/<preset>/ratio_<r>/seed_<s>/...  (ablate)
    OUT/ablation.csv, OUT/table.csv, OUT/*.svg
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import plotting
from .config import ExperimentConfig, parse_seeds
from .data import (
    BLOB_TOLERANCE,
    TEST,
    VESSEL_TOLERANCE,
    DatasetManifest,
    FormatError,
    GenerationError,
    SyntheticSpec,
    chase_like,
    covid_like,
    generate_dataset,
    load_split,
    split_dataset,
)
from .evaluation import (
    aggregate_seeds,
    evaluate_model,
    pixel_ratios,
    report_row,
    write_report_csv,
)
from .segnet import CheckpointError, load_checkpoint, model_from_state
from .trainer import ConfigError, read_trace_csv, run_training

log = logging.getLogger("supmixlab")

EXIT_ERROR, EXIT_CONFIG, EXIT_NONFINITE = 1, 2, 3

# Table-2 columns: (preset, strong mix, SUFD on)
PRESETS = {
    "cutmix": ("cutmix", False),
    "classmix": ("classmix", False),
    "supmix": ("supmix", False),
    "sufd": ("cutmix", True),
    "ours": ("supmix", True),
}
_PRESET_KEYS = ("variant", "strong_mix", "use_supmix", "use_sufd", "lambda_adv")
_SPEC_PRESETS = {"chase-like": chase_like, "covid-like": covid_like}


# ------------------------------------------------------------------ gen-data


def load_spec(path) -> SyntheticSpec:
    doc = json.loads(Path(path).read_text())
    preset = doc.pop("preset", None)
    if preset is None:
        return SyntheticSpec.from_dict(doc)
    if preset not in _SPEC_PRESETS:
        raise ValueError(f"preset: unknown value {preset!r}; expected one of {sorted(_SPEC_PRESETS)}")
    unknown = set(doc) - set(SyntheticSpec.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown dataset spec keys: {sorted(unknown)}")
    return _SPEC_PRESETS[preset](**doc)


def ratio_check(spec: SyntheticSpec, achieved) -> list[bool]:
    if spec.style == "vessel":
        return [abs(a - t) <= VESSEL_TOLERANCE for a, t in zip(achieved, spec.ratios)]
    return [abs(a - t) <= BLOB_TOLERANCE * t for a, t in zip(achieved, spec.ratios)]


def cmd_gen_data(args) -> int:
    spec = load_spec(args.config)
    out = Path(args.out)
    manifest = generate_dataset(spec, out)
    labels = [load_split(manifest, split)[1] for split in ("unlabeled-train", TEST)]
    recount = pixel_ratios([l for group in labels for l in group], manifest.num_classes)
    ok = ratio_check(spec, recount)
    print(f"{'class':<20}{'target %':>10}{'achieved %':>12}  within tolerance")
    for name, t, a, flag in zip(spec.class_names, spec.ratios, recount, ok):
        print(f"{name:<20}{100 * t:>10.2f}{100 * a:>12.2f}  {'yes' if flag else 'NO'}")
    print(f"manifest {out / 'manifest.json'} sha256 {manifest.digest()}")
    return 0 if all(ok) else EXIT_ERROR


# --------------------------------------------------------------------- train


def _split_for(exp: ExperimentConfig, ratio: float) -> DatasetManifest:
    if not exp.dataset:
        raise ConfigError("dataset: path required")
    return split_dataset(DatasetManifest.load(exp.dataset), ratio, exp.split_seed)


def _train_one(job) -> str:
    exp_flat, seed, ratio, run_dir = job
    exp = ExperimentConfig.from_dict(exp_flat)
    cfg = exp.for_seed(seed)
    run_dir = Path(run_dir)
    run_training(cfg, _split_for(exp, ratio), run_dir)
    record = {**exp.flat(), "seed": seed, "labeled_ratio": ratio}
    record.pop("seeds")
    record.pop("labeled_ratios")
    (run_dir / "experiment.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return str(run_dir)


def _run_jobs(jobs, n_proc: int) -> list[str]:
    if n_proc <= 1 or len(jobs) <= 1:
        return [_train_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_proc) as pool:
        return list(pool.map(_train_one, jobs))


def _experiment(args) -> ExperimentConfig:
    exp = ExperimentConfig.load(args.config)
    flat = exp.flat()
    if getattr(args, "seeds", None):
        flat["seeds"] = parse_seeds(args.seeds)
    if getattr(args, "labeled_ratio", None) is not None:
        flat["labeled_ratio"] = args.labeled_ratio
        flat["labeled_ratios"] = [args.labeled_ratio]
    if getattr(args, "variant", None):
        flat["variant"] = args.variant
    return ExperimentConfig.from_dict(flat)


def cmd_train(args) -> int:
    exp = _experiment(args)
    out = Path(args.out)
    _split_for(exp, exp.labeled_ratio)  # fail fast on dataset problems
    jobs = [(exp.flat(), s, exp.labeled_ratio, str(out / f"seed_{s}")) for s in exp.seeds]
    for d in _run_jobs(jobs, args.jobs):
        print(f"wrote {d}")
    return 0


# ---------------------------------------------------------------------- eval


def seed_dirs(run_dir: Path) -> list[Path]:
    if (run_dir / "checkpoint.bin").exists():
        return [run_dir]
    found = sorted(
        (p for p in run_dir.glob("seed_*") if (p / "checkpoint.bin").exists()),
        key=lambda p: int(p.name.split("_", 1)[1]),
    )
    if not found:
        raise FileNotFoundError(f"{run_dir}: no checkpoint.bin and no seed_* run directories")
    return found


def evaluate_run(run_dir, dataset=None):
    """Evaluate every seed under run_dir on the test split; returns (variant, ratio, reports)."""
    reports, variant, ratio = [], None, None
    for d in seed_dirs(Path(run_dir)):
        meta = json.loads((d / "experiment.json").read_text())
        manifest = DatasetManifest.load(dataset or meta["dataset"])
        model = model_from_state(load_checkpoint(d / "checkpoint.bin"), dtype=np.float32)
        if model.num_classes != manifest.num_classes:
            raise ConfigError(
                f"checkpoint {d} predicts {model.num_classes} classes, dataset has {manifest.num_classes}"
            )
        images, labels = load_split(manifest, TEST)
        if not images:
            raise ConfigError(f"dataset {manifest.root}: empty test split")
        reports.append(evaluate_model(model, images, labels, manifest.class_names, seed=meta["seed"]))
        variant, ratio = meta["variant"], meta["labeled_ratio"]
    return variant, ratio, reports


def report_rows(label, ratio, reports):
    rows = [report_row(label, ratio, r.seeds[0], r) for r in reports]
    rows.append(report_row(label, ratio, "aggregate", aggregate_seeds(reports)))
    return rows


def cmd_eval(args) -> int:
    variant, ratio, reports = evaluate_run(args.run_dir, args.dataset)
    rows = report_rows(variant, ratio, reports)
    out = Path(args.out) if args.out else Path(args.run_dir) / "report.csv"
    write_report_csv(out, rows, reports[0].class_names)
    for name, text in aggregate_seeds(reports).formatted().items():
        print(f"{name:<20}{text}")
    print(f"wrote {out}")
    return 0


# -------------------------------------------------------------------- ablate


def preset_config(flat: dict, preset: str) -> dict:
    mix, sufd = PRESETS[preset]
    d = {k: v for k, v in flat.items() if k not in _PRESET_KEYS}
    d.update(variant="ours" if sufd else "fixmatch", strong_mix=mix, use_sufd=sufd)
    return d


def _mean_trace(run_dirs, key):
    traces = [read_trace_csv(Path(d) / "loss_trace.csv") for d in run_dirs]
    n = min(len(t) for t in traces)
    return [{key: float(np.mean([t[i][key] for t in traces]))} for i in range(n)]


def cmd_ablate(args) -> int:
    exp = _experiment(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ratios = exp.labeled_ratios
    for r in ratios:
        _split_for(exp, r)
    jobs, layout = [], {}
    for r in ratios:
        for preset in PRESETS:
            pflat = preset_config(exp.flat(), preset)
            ExperimentConfig.from_dict(pflat)
            base = out / preset / f"ratio_{r:g}"
            layout[(preset, r)] = base
            jobs += [(pflat, s, r, str(base / f"seed_{s}")) for s in exp.seeds]
    _run_jobs(jobs, args.jobs)

    all_rows, table = [], []
    class_names = None
    for r in ratios:
        losses, bars, bar_std = {}, {}, {}
        for preset in PRESETS:
            base = layout[(preset, r)]
            _, _, reports = evaluate_run(base)
            class_names = reports[0].class_names
            rows = report_rows(preset, r, reports)
            write_report_csv(base / "report.csv", rows, class_names)
            all_rows += rows
            agg = aggregate_seeds(reports)
            mix, sufd = PRESETS[preset]
            entry = {
                "labeled_ratio": f"{r:g}",
                "preset": preset,
                "CutMix": "x" if mix == "cutmix" else "",
                "ClassMix": "x" if mix == "classmix" else "",
                "SupMix": "x" if mix == "supmix" else "",
                "SUFD": "x" if sufd else "",
            }
            entry.update(agg.formatted())
            table.append(entry)
            runs = seed_dirs(base)
            losses[preset] = _mean_trace(runs, "loss_sup")
            rare = int(np.argmin(agg.ratios)) if agg.ratios else len(class_names) - 1
            bars[preset] = agg.iou[rare] or 0.0
            bar_std[preset] = (agg.iou_std[rare] if agg.iou_std else 0.0) or 0.0
        plotting.plot_loss_curves(losses, out / f"loss_ratio_{r:g}.svg")
        plotting.plot_bars(bars, bar_std, out / f"rare_iou_ratio_{r:g}.svg", ylabel=f"{class_names[rare]} IoU")
    write_report_csv(out / "ablation.csv", all_rows, class_names)
    _write_table(out / "table.csv", table)
    print(f"wrote {out / 'ablation.csv'} and {out / 'table.csv'}")
    return 0


def _write_table(path, table):
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]))
        w.writeheader()
        w.writerows(table)


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="supmixlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config", required=True, help="dataset spec JSON")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    for name, func, help_ in (("train", cmd_train, "train one run per seed"), ("ablate", cmd_ablate, "run the preset matrix")):
        t = sub.add_parser(name, help=help_)
        t.add_argument("--config", required=True, help="experiment JSON")
        t.add_argument("--out", required=True)
        t.add_argument("--seeds", help="e.g. 0,1,2 or 0-4")
        t.add_argument("--labeled-ratio", type=float)
        if name == "train":
            t.add_argument("--variant", choices=["supervised", "fixmatch", "unimatch", "ours"])
        t.add_argument("--jobs", type=int, default=1, help="parallel seed processes")
        t.set_defaults(func=func)

    e = sub.add_parser("eval", help="evaluate a run directory on the test split")
    e.add_argument("run_dir")
    e.add_argument("--dataset", help="override the dataset recorded in the run")
    e.add_argument("--out", help="report CSV (default RUN_DIR/report.csv)")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FloatingPointError as exc:
        print(f"error: non-finite value: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (GenerationError, FormatError, CheckpointError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except ValueError as exc:  # ConfigError, spec validation, malformed JSON
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
