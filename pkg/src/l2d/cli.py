"""Command line entry point.

    l2d [--config FILE] [--seed N] [--out DIR] <command> [options]

Exit status: 0 on success, 1 on a configuration error, 2 on a numerical
failure during training.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from l2d import KERNEL_BACKEND
from l2d.data import ConfigError, Dataset, FormatError, generate_dataset, load_dataset, save_dataset
from l2d.harness import (
    ABLATION_ROWS, EPOCH_COLUMNS, LOSSES, STEP_COLUMNS, ExperimentConfig, TrainResult, correlation_report,
    distill_student, evaluate, predict, run_ablation, run_sweep, train_teacher,
)
from l2d.metrics import knn_retrieve, pool_embeddings
from l2d.model import MultiLabelNet, checksum
from l2d.optim import NumericalError
from l2d.serialize import FormatError as CheckpointFormatError

log = logging.getLogger("l2d")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
AUGMENTATION_NOTE = ("strong augmentation = flip + one of {brightness shift, channel scale, small translation} "
                     "+ Cutout; substitutes for RandAugment")


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _nan_to_none(obj):
    if isinstance(obj, float) and obj != obj:
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def load_config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    cfg = ExperimentConfig.from_dict(raw)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return _apply_overrides(cfg, args)


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    train = {}
    for name in ("epochs", "batch_size", "max_lr", "augment", "threshold"):
        v = getattr(args, name, None)
        if v is not None:
            train[name] = v
    if getattr(args, "independent_views", False):
        train["independent_views"] = True
    distill = {}
    for name in ("lambda_mld", "lambda_cd", "lambda_id", "ps_temperature", "baseline_weight"):
        v = getattr(args, name, None)
        if v is not None:
            distill[name] = v
    if getattr(args, "normalize_pairs", None):
        distill["normalize_pairs"] = args.normalize_pairs
    if getattr(args, "normalize_embeddings", False):
        distill["normalize_embeddings"] = True
    try:
        if distill:
            train["distill"] = dataclasses.replace(cfg.train.distill, **distill)
        if train:
            cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **train))
        for name in ("n_train", "n_test"):
            v = getattr(args, name, None)
            if v is not None:
                if v < 1:
                    raise ConfigError(f"{name} must be >= 1")
                cfg = dataclasses.replace(cfg, **{name: v})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _datasets(cfg: ExperimentConfig, args) -> tuple[Dataset, Dataset]:
    if getattr(args, "data", None):
        d = Path(args.data)
        try:
            train, test = load_dataset(d / "train.l2dd"), load_dataset(d / "test.l2dd")
        except FileNotFoundError as exc:
            raise ConfigError(f"dataset directory {d} lacks train.l2dd / test.l2dd") from exc
        if train.num_classes != cfg.scene.num_classes:
            raise ConfigError(f"dataset has {train.num_classes} classes, config {cfg.scene.num_classes}")
        return train, test
    return generate_dataset(cfg.scene, cfg.n_train, cfg.n_test)


def _load_model(path) -> MultiLabelNet:
    p = Path(path)
    try:
        return MultiLabelNet.load(p, p.with_suffix(".json"))
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint not found: {exc.filename}") from exc
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint {p}: {exc}") from exc


def _save_run(out: Path, cfg: ExperimentConfig, res: TrainResult, test: Dataset, extra: dict | None = None) -> dict:
    res.model.save(out / "checkpoint.bin", out / "checkpoint.json")
    write_csv(out / "history.csv", STEP_COLUMNS, res.steps)
    write_csv(out / "epochs.csv", EPOCH_COLUMNS, res.epochs)
    rep = evaluate(res.model, test, res.config.threshold, res.config.eval_batch_size, with_correlation=True)
    final = evaluate(res.final_model, test, res.config.threshold, res.config.eval_batch_size)
    rep.write_ap_csv(out / "ap.csv")
    metrics = rep.to_dict()
    metrics.update(best_epoch=res.best_epoch, final_epoch={"mAP": final.mAP, "OF1": final.OF1, "CF1": final.CF1},
                   checksum=checksum(res.model), loss=res.config.loss,
                   lambdas=res.config.effective_distill().to_dict())
    if extra:
        metrics.update(extra)
    write_json(out / "metrics.json", _nan_to_none(metrics))
    return metrics


def _write_config(out: Path, cfg: ExperimentConfig, **extra) -> None:
    doc = cfg.to_dict()
    doc["augmentation_note"] = AUGMENTATION_NOTE
    doc.update(extra)
    write_json(out / "config.json", doc)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args)
    train, test = generate_dataset(cfg.scene, cfg.n_train, cfg.n_test)
    save_dataset(train, out / "train.l2dd")
    save_dataset(test, out / "test.l2dd")
    _write_config(out, cfg)
    stats = {"n_train": len(train), "n_test": len(test), "class_names": train.class_names,
             "mean_labels_train": float(train.y.sum(1).mean()),
             "class_frequency_train": train.y.mean(0).tolist()}
    write_json(out / "dataset.json", stats)
    print(f"wrote {len(train)} train / {len(test)} test scenes to {out}")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args)
    model_cfg = cfg.student if args.student else cfg.teacher
    train, test = _datasets(cfg, args)
    tcfg = dataclasses.replace(cfg.train, loss="vanilla")
    _write_config(out, dataclasses.replace(cfg, train=tcfg), role="student" if args.student else "teacher")
    res = train_teacher(train, model_cfg, tcfg)
    m = _save_run(out, cfg, res, test)
    print(f"test mAP {100 * m['mAP']:.2f}  OF1 {100 * m['OF1']:.2f}  CF1 {100 * m['CF1']:.2f}")
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = load_config(args)
    cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, loss=args.loss))
    try:
        cfg.train.effective_distill()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _out_dir(args)
    teacher = _load_model(args.teacher)
    student_cfg = cfg.student
    if args.reversed:
        # a stronger model learns from the (smaller) teacher checkpoint
        student_cfg = dataclasses.replace(cfg.teacher, capacity="student")
    train, test = _datasets(cfg, args)
    before = checksum(teacher)
    _write_config(out, cfg, teacher_checkpoint=str(args.teacher), teacher_checksum=before,
                  kernel_backend=KERNEL_BACKEND)
    res = distill_student(teacher, train, student_cfg, cfg.train)
    if checksum(teacher) != before:  # pragma: no cover - guarded by distill_student
        raise NumericalError("teacher parameters changed during distillation")
    m = _save_run(out, cfg, res, test, extra={"teacher_checksum": before})
    print(f"[{args.loss}] test mAP {100 * m['mAP']:.2f}  OF1 {100 * m['OF1']:.2f}  CF1 {100 * m['CF1']:.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args)
    model = _load_model(args.checkpoint)
    _, test = _datasets(cfg, args)
    rep = evaluate(model, test, cfg.train.threshold, cfg.train.eval_batch_size, with_correlation=True)
    write_json(out / "metrics.json", _nan_to_none(rep.to_dict()))
    rep.write_ap_csv(out / "ap.csv")
    print(f"mAP {100 * rep.mAP:.2f}  OF1 {100 * rep.OF1:.2f}  CF1 {100 * rep.CF1:.2f}")
    return EXIT_OK


ABLATION_COLUMNS = ("row", "MLD", "CD", "ID", "seeds", "mAP", "mAP_std", "OF1", "OF1_std", "CF1", "CF1_std")


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args)
    seeds = list(range(args.num_seeds)) if args.num_seeds else [cfg.train.seed]
    names = [r[0] for r in ABLATION_ROWS]
    rows = args.rows or names
    bad = [r for r in rows if r not in names]
    if bad:
        raise ConfigError(f"unknown ablation rows {bad}; choose from {names}")
    teacher = _load_model(args.teacher) if args.teacher else None
    train, test = _datasets(cfg, args)
    _write_config(out, cfg, seeds=seeds, rows=rows)
    res = run_ablation(train, test, cfg.teacher, cfg.student, cfg.train, seeds, rows, teacher, args.workers)
    table = res.table()
    write_csv(out / "ablation.csv", ABLATION_COLUMNS, [{**r, **{k: int(r[k]) for k in ("MLD", "CD", "ID")}}
                                                        for r in table])
    write_csv(out / "ablation_runs.csv", ("seed", "row", "mAP", "OF1", "CF1"), res.rows)
    # predictions for the correlation report
    arrays = {}
    for s in seeds:
        t_model = teacher if teacher is not None else res.teachers[s][0].model
        arrays[f"teacher/{s}"] = predict(t_model, test.x).probs
        for name in rows:
            arrays[f"{name}/{s}"] = predict(res.students[(s, name)][0].model, test.x).probs
    np.savez(out / "predictions.npz", **arrays)
    metrics = {"table": table, "runs": res.rows,
               "teachers": {str(s): {"mAP": rep.mAP, "OF1": rep.OF1, "CF1": rep.CF1}
                            for s, (_r, rep) in res.teachers.items()}}
    write_json(out / "metrics.json", _nan_to_none(metrics))
    for r in table:
        marks = "".join("x" if r[c] else "-" for c in ("MLD", "CD", "ID"))
        print(f"{r['row']:<10} {marks}  mAP {100 * r['mAP']:.2f}±{100 * r['mAP_std']:.2f}  "
              f"OF1 {100 * r['OF1']:.2f}  CF1 {100 * r['CF1']:.2f}")
    return EXIT_OK


SWEEP_COLUMNS = ("parameter", "value", "lambda_mld", "lambda_cd", "lambda_id", "mAP", "OF1", "CF1")


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args)
    teacher = _load_model(args.teacher)
    train, test = _datasets(cfg, args)
    _write_config(out, cfg, parameter=args.parameter, values=args.values)
    rows = run_sweep(train, test, teacher, cfg.student, cfg.train, args.parameter, args.values, args.workers)
    write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    write_json(out / "metrics.json", {"sweep": rows})
    for r in rows:
        print(f"{r['parameter']}={r['value']:g}  mAP {100 * r['mAP']:.2f}")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args)
    model = _load_model(args.checkpoint)
    _, test = _datasets(cfg, args)
    if model.cfg.num_classes != test.num_classes:
        raise ConfigError(f"model has {model.cfg.num_classes} classes, dataset {test.num_classes}")
    emb = pool_embeddings(predict(model, test.x).embeddings, args.pool)
    queries = args.queries if args.queries else list(range(min(5, len(test))))
    if any(not 0 <= i < len(test) for i in queries):
        raise ConfigError(f"query indices must lie in [0, {len(test)})")
    if not 1 <= args.k <= len(test):
        raise ConfigError(f"k must be in [1, {len(test)}]")
    results, flat = [], []
    names = test.class_names
    for qi in queries:
        hits = knn_retrieve(emb, test.y, emb[qi], args.k, query_labels=test.y[qi])
        entry = {"query": qi, "query_labels": [names[j] for j in np.flatnonzero(test.y[qi])], "neighbors": []}
        for h in hits:
            entry["neighbors"].append({"rank": h.rank, "index": h.index, "distance": h.distance,
                                       "labels": [names[j] for j in h.labels],
                                       "shared": [names[j] for j in h.shared]})
            flat.append({"query": qi, "rank": h.rank, "index": h.index, "distance": h.distance,
                         "labels": " ".join(names[j] for j in h.labels),
                         "shared": " ".join(names[j] for j in h.shared)})
        results.append(entry)
    write_json(out / "retrieval.json", {"pool": args.pool, "k": args.k, "results": results})
    write_csv(out / "retrieval.csv", ("query", "rank", "index", "distance", "labels", "shared"), flat)
    for e in results:
        top = ", ".join(f"{n['index']}({n['distance']:.3f})" for n in e["neighbors"])
        print(f"query {e['query']} [{' '.join(e['query_labels'])}] -> {top}")
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    pred_path = run / "predictions.npz"
    if not pred_path.exists():
        raise ConfigError(f"{run} has no predictions.npz; run `ablate` first")
    out = Path(args.out) if args.out != "." else run
    out.mkdir(parents=True, exist_ok=True)
    with np.load(pred_path) as z:
        arrays = {k: z[k] for k in z.files}
    seeds = sorted({int(k.split("/")[1]) for k in arrays if k.startswith("teacher/")})
    rows = [r[0] for r in ABLATION_ROWS if any(k.startswith(r[0] + "/") for k in arrays)]
    report = {"seeds": seeds, "rows": rows, "per_seed": {}, "mean_diff": {}}
    diff_rows = []
    for s in seeds:
        rep = correlation_report(arrays[f"teacher/{s}"], {r: arrays[f"{r}/{s}"] for r in rows})
        report["per_seed"][str(s)] = rep
        diff_rows.append({"seed": s, "teacher": rep["teacher"]["diff"], **{r: rep[r]["diff"] for r in rows}})
    for name in ["teacher"] + rows:
        report["mean_diff"][name] = float(np.mean([d[name] for d in diff_rows]))
    write_json(out / "report.json", report)
    write_csv(out / "correlation_diff.csv", ["seed", "teacher"] + rows, diff_rows)
    lines = ["# Correlation analysis", "", "Frobenius norm of (student - teacher) prediction correlation matrices.",
             "", "| row | mean diff |", "|---|---|"]
    lines += [f"| {name} | {report['mean_diff'][name]:.4f} |" for name in ["teacher"] + rows]
    if (run / "ablation.csv").exists():
        lines += ["", "# Ablation", "", "| row | MLD | CD | ID | mAP | OF1 | CF1 |", "|---|---|---|---|---|---|---|"]
        with open(run / "ablation.csv") as fh:
            for r in csv.DictReader(fh):
                marks = ["x" if r[c] == "1" else "" for c in ("MLD", "CD", "ID")]
                lines.append(f"| {r['row']} | {' | '.join(marks)} | "
                             + " | ".join(f"{100 * float(r[m]):.2f} ± {100 * float(r[m + '_std']):.2f}"
                                          for m in ("mAP", "OF1", "CF1")) + " |")
    lines += ["", f"Augmentation: {AUGMENTATION_NOTE}.", ""]
    (out / "report.md").write_text("\n".join(lines))
    for name in ["teacher"] + rows:
        print(f"{name:<10} corr diff {report['mean_diff'][name]:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="JSON file with scene/teacher/student/train sections")
    p.add_argument("--seed", type=int, default=d(None), help="overrides every model and training seed")
    p.add_argument("--out", default=d("."), help="output directory")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="directory written by gen-data (default: generate from the config)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-lr", type=float)
    p.add_argument("--augment", choices=("none", "weak", "strong"))
    p.add_argument("--threshold", type=float)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)


def _distill_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda-mld", type=float)
    p.add_argument("--lambda-cd", type=float)
    p.add_argument("--lambda-id", type=float)
    p.add_argument("--ps-temperature", type=float)
    p.add_argument("--baseline-weight", type=float)
    p.add_argument("--normalize-pairs", nargs="?", const="valid", choices=("none", "valid", "all"),
                   help="divide CD/ID sums by the valid-pair count (valid) or the full index set (all)")
    p.add_argument("--normalize-embeddings", action="store_true")
    p.add_argument("--independent-views", action="store_true",
                   help="teacher and student see separately augmented views")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="l2d", description=__doc__.split("\n\n")[0])
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        p.set_defaults(fn=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate and save the synthetic train/test scenes")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)

    p = add("train-teacher", cmd_train_teacher, "train a model with plain BCE")
    _train_flags(p)
    p.add_argument("--student", action="store_true", help="train the student architecture instead")

    p = add("distill", cmd_distill, "train a student against a frozen teacher checkpoint")
    _train_flags(p)
    _distill_flags(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint.bin")
    p.add_argument("--loss", choices=LOSSES, default="l2d")
    p.add_argument("--reversed", action="store_true", help="student uses the teacher architecture (reversed KD)")

    p = add("eval", cmd_eval, "evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--n-test", type=int)
    p.add_argument("--threshold", type=float)

    p = add("ablate", cmd_ablate, "run the five loss configurations (none, MLD, MLD+CD, MLD+ID, MLD+CD+ID)")
    _train_flags(p)
    _distill_flags(p)
    p.add_argument("--teacher", help="reuse this teacher for every seed instead of training one per seed")
    p.add_argument("--num-seeds", type=int, help="seeds 0..N-1 (default: the configured seed)")
    p.add_argument("--rows", nargs="+", help="subset of rows to run")
    p.add_argument("--workers", type=int, default=1)

    p = add("sweep", cmd_sweep, "vary one balancing weight with the others fixed")
    _train_flags(p)
    _distill_flags(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--parameter", required=True, choices=("lambda_mld", "lambda_cd", "lambda_id"))
    p.add_argument("--values", required=True, type=float, nargs="+")
    p.add_argument("--workers", type=int, default=1)

    p = add("retrieve", cmd_retrieve, "k-NN retrieval over pooled label-wise embeddings of the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--n-test", type=int)
    p.add_argument("--queries", type=int, nargs="+", help="test indices used as queries")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--pool", choices=("mean", "max"), default="mean")

    p = add("report", cmd_report, "correlation-matrix analysis of an ablation run")
    p.add_argument("--run", required=True, help="directory written by ablate")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, FormatError, CheckpointFormatError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
