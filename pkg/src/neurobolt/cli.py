"""Command-line surface: simulate, train, eval, gradcheck, ablate, report.

Exit codes: 0 success, 1 computational failure, 2 usage error. Seeds
resolve with precedence flag > NEUROBOLT_SEED > config > 0. Every command
writes a resolved-config snapshot into its output directory so runs are
reproducible from that file alone; an output directory is owned by one
live command via a lockfile.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import jsonschema

from . import evaluation, signals, synth, training
from .evaluation import (
    EvalReport,
    TABLE2_VARIANTS,
    ablation_run,
    ablation_table,
    evaluate_scan,
    model_predictor,
    pearson_or_flag,
    windows_targets,
    write_prediction_series,
)
from .model import NeuroBoltConfig, tiny_geometry
from .signals import align_windows, load_scan_bundle, save_scan_bundle
from .training import TrainConfig, grad_check, load_checkpoint, train

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

DATASET_MANIFEST = "dataset.json"
LOCKFILE = ".lock"

_NUM = {"type": "number"}
_INT = {"type": "integer"}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": _INT,
        "out_dir": {"type": "string"},
        "window_sec": _NUM,
        "rois": {"type": "array", "items": {"type": "string"}},
        "synth": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_subjects": _INT,
                "scans_per_subject": _INT,
                "n_channels": _INT,
                "n_rois": _INT,
                "duration_sec": _NUM,
                "fs": _NUM,
                "tr": _NUM,
                "bands": {
                    "type": "array",
                    "items": {
                        "type": "array",
                        "prefixItems": [{"type": "string"}, _NUM, _NUM],
                        "minItems": 3,
                        "maxItems": 3,
                    },
                },
                "envelope_timescale_sec": _NUM,
                "eeg_noise_sigma": _NUM,
                "bold_noise_sigma": _NUM,
                "seed": _INT,
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "window_samples": _INT,
                "patch_w": _INT,
                "spec_base_w": _INT,
                "scale_level": _INT,
                "embed_dim": _INT,
                "st_depth": _INT,
                "st_heads": _INT,
                "sp_depth": _INT,
                "sp_heads": _INT,
                "ffn_ratio": _INT,
                "rank": _INT,
                "use_cls_token": {"type": "boolean"},
                "branches": {"enum": ["both", "st_only", "spec_only"]},
                "drop_path": _NUM,
                "sp_dropout": _NUM,
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "batch_size": _INT,
                "peak_lr": _NUM,
                "min_lr": _NUM,
                "betas": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
                "weight_decay": _NUM,
                "epochs": _INT,
                "warmup_epochs": _INT,
                "layer_decay": _NUM,
                "seed": _INT,
                "precision": {"enum": ["float32", "float64"]},
            },
        },
        "split": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ratios": {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3},
                "gap_sec": _NUM,
                "seed": _INT,
            },
        },
    },
}


class UsageError(Exception):
    """Bad invocation or config; maps to exit code 2."""


def load_config(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    try:
        config = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(
            f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: "
            f"{exc.msg}"
        ) from exc
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"{path}: invalid config at {where}: {exc.message}") from exc
    return config


def resolve_seed(flag_seed: int | None, config: dict) -> int:
    if flag_seed is not None:
        return flag_seed
    env = os.environ.get("NEUROBOLT_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"NEUROBOLT_SEED={env!r} is not an integer") from exc
    return int(config.get("seed", 0))


class RunLock:
    """Exclusive ownership of an output directory while a command runs."""

    def __init__(self, directory: Path):
        self.path = Path(directory) / LOCKFILE

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"{self.path.parent} is locked by another command "
                f"(remove {self.path} if stale)"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc_info):
        self.path.unlink(missing_ok=True)
        return False


def build_synth_config(config: dict, seed: int):
    """(SynthConfig, n_subjects, scans_per_subject) from the synth section."""
    section = dict(config.get("synth", {}))
    n_subjects = section.pop("n_subjects", 5)
    scans_per_subject = section.pop("scans_per_subject", 1)
    section.setdefault("seed", seed)
    if "bands" in section:
        section["bands"] = tuple(tuple(b) for b in section["bands"])
    cfg = synth.default_synth_config(**section)
    return cfg, n_subjects, scans_per_subject


def build_model_config(config: dict, channel_labels, target_roi, seed) -> NeuroBoltConfig:
    section = dict(config.get("model", {}))
    return NeuroBoltConfig(
        channel_labels=list(channel_labels),
        target_roi=target_roi,
        seed=seed,
        **section,
    )


def build_train_config(config: dict, seed: int) -> TrainConfig:
    section = dict(config.get("train", {}))
    section.setdefault("seed", seed)
    if "betas" in section:
        section["betas"] = tuple(section["betas"])
    return TrainConfig(**section)


def list_bundles(data_dir: Path) -> list[Path]:
    manifest = data_dir / DATASET_MANIFEST
    if manifest.is_file():
        names = json.loads(manifest.read_text())["scans"]
        return [data_dir / name for name in names]
    bundles = sorted(
        p.parent for p in data_dir.glob(f"*/{signals.BUNDLE_META}")
    )
    if not bundles:
        raise UsageError(f"no scan bundles found under {data_dir}")
    return bundles


def load_scans(data_dir: Path, window_sec: float, window_samples: int):
    """Load bundles and preprocess EEG (resample + amplitude normalize)."""
    target_fs = window_samples / window_sec
    scans = []
    for bundle in list_bundles(data_dir):
        pair = load_scan_bundle(bundle)
        eeg = pair.eeg
        if eeg.fs != target_fs:
            eeg = signals.resample(eeg, target_fs)
        if not eeg.normalized:
            eeg = signals.normalize_amplitude(eeg)
        scans.append(replace(pair, eeg=eeg))
    return scans


def write_snapshot(out_dir: Path, config: dict, seed: int, command: str) -> None:
    snapshot = {"command": command, "resolved_seed": seed, "config": config}
    (out_dir / "config.json").write_text(json.dumps(snapshot, indent=2))


def cmd_simulate(args) -> int:
    config = load_config(args.config)
    seed = resolve_seed(args.seed, config)
    out_dir = Path(args.out or config.get("out_dir") or "synth_data")
    cfg, n_subjects, scans_per_subject = build_synth_config(config, seed)
    with RunLock(out_dir):
        scans = synth.gen_dataset(cfg, n_subjects, scans_per_subject)
        names = []
        for index, pair in enumerate(scans):
            bundle = out_dir / pair.scan_id
            save_scan_bundle(pair, bundle)
            subject_index = index // scans_per_subject
            truth = {
                "scan_id": pair.scan_id,
                "subject_id": pair.subject_id,
                "bands": [list(b) for b in cfg.bands],
                "channel_band_gains": (
                    cfg.channel_band_gains
                    * synth.subject_gain_jitter(cfg, subject_index)
                ).tolist(),
                "roi_mixing": cfg.roi_mixing.tolist(),
            }
            (bundle / "synth_truth.json").write_text(json.dumps(truth, indent=2))
            names.append(pair.scan_id)
        (out_dir / DATASET_MANIFEST).write_text(
            json.dumps({"scans": names}, indent=2)
        )
        write_snapshot(out_dir, config, seed, "simulate")
    print(f"wrote {len(names)} scan bundles to {out_dir}")
    return EXIT_OK


def _roi_index(scans, roi_label: str) -> int:
    labels = scans[0].roi.roi_labels
    if roi_label not in labels:
        raise UsageError(
            f"unknown ROI {roi_label!r}; available ROI labels: {', '.join(labels)}"
        )
    return labels.index(roi_label)


def cmd_train(args) -> int:
    config = load_config(args.config)
    seed = resolve_seed(args.seed, config)
    window_sec = float(config.get("window_sec", 16.0))
    model_section = config.get("model", {})
    window_samples = int(model_section.get("window_samples", 3200))
    data_dir = Path(args.data)
    scans = load_scans(data_dir, window_sec, window_samples)
    roi = _roi_index(scans, args.roi)
    split_section = config.get("split", {})
    ratios = tuple(split_section.get("ratios", (8, 1, 1) if args.split == "intra" else (3, 1, 1)))
    gap_sec = float(split_section.get("gap_sec", 20.0))
    split_seed = int(split_section.get("seed", seed))

    if args.split == "intra":
        if args.scan:
            candidates = [s for s in scans if s.scan_id == args.scan]
            if not candidates:
                raise UsageError(
                    f"scan {args.scan!r} not found; available: "
                    f"{', '.join(s.scan_id for s in scans)}"
                )
            scan = candidates[0]
        elif len(scans) == 1:
            scan = scans[0]
        else:
            raise UsageError(
                "intra-scan training needs --scan when the dataset has "
                f"multiple scans: {', '.join(s.scan_id for s in scans)}"
            )
        samples = align_windows(scan, window_sec, roi)
        split = signals.split_intra(samples, ratios, gap_sec, scan.roi.tr)
        by_frame = {s.frame_index: s for s in samples}
        train_samples = [by_frame[i] for i in split.train]
        val_samples = [by_frame[i] for i in split.val]
    else:
        split = signals.split_inter(scans, ratios, split_seed)
        by_id = {s.scan_id: s for s in scans}
        train_samples = [
            s for sid in split.train for s in align_windows(by_id[sid], window_sec, roi)
        ]
        val_samples = [
            s for sid in split.val for s in align_windows(by_id[sid], window_sec, roi)
        ]

    model_cfg = build_model_config(
        config, scans[0].eeg.channel_labels, args.roi, seed
    )
    train_cfg = build_train_config(config, seed)
    out_dir = Path(args.out)
    with RunLock(out_dir):
        result = train(
            train_samples, val_samples, model_cfg, train_cfg,
            run_dir=out_dir, progress=args.progress,
        )
        split_doc = {
            "kind": split.kind,
            "train": list(split.train),
            "val": list(split.val),
            "test": list(split.test),
            "gap_sec": split.gap_sec,
            "window_sec": window_sec,
            "roi": args.roi,
        }
        if args.split == "intra":
            split_doc["scan_id"] = scan.scan_id
        (out_dir / "split.json").write_text(json.dumps(split_doc, indent=2))
        write_snapshot(out_dir, config, seed, "train")
    print(
        f"run complete: best val R {result.best_val_r:.4f} "
        f"(epoch {result.best_epoch}); checkpoint in {out_dir}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt_dir = Path(args.checkpoint)
    if (ckpt_dir / "checkpoint").is_dir():
        ckpt_dir = ckpt_dir / "checkpoint"
    model, manifest = load_checkpoint(ckpt_dir)
    model_cfg = model.cfg
    roi_label = model_cfg.target_roi
    split_doc = None
    if args.split_file:
        split_doc = json.loads(Path(args.split_file).read_text())
        roi_label = split_doc.get("roi", roi_label)
    window_sec = float(
        (split_doc or {}).get("window_sec", args.window_sec)
    )
    scans = load_scans(Path(args.data), window_sec, model_cfg.window_samples)
    if roi_label is None:
        raise UsageError("checkpoint lacks a target ROI; pass --split-file")
    roi = _roi_index(scans, roi_label)
    predictor = model_predictor(model)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = EvalReport(split=split_doc or {"kind": "all"}, model_id=ckpt_dir.parent.name)

    if split_doc and split_doc.get("kind") == "intra":
        scan = next(s for s in scans if s.scan_id == split_doc["scan_id"])
        samples = align_windows(scan, window_sec, roi)
        test_frames = set(split_doc["test"])
        subset = [s for s in samples if s.frame_index in test_frames]
        xs, ys = windows_targets(subset)
        preds = predictor(xs)
        r, flagged = pearson_or_flag(preds, ys)
        report.rows.append(
            {
                "model": report.model_id,
                "scan_id": scan.scan_id,
                "roi_index": roi,
                "roi_label": roi_label,
                "pearson_r": r,
                "mse": float(np.mean((preds - ys) ** 2)),
                "n_windows": len(subset),
                "constant_flag": flagged,
            }
        )
    else:
        scan_ids = None
        if split_doc and split_doc.get("kind") == "inter":
            scan_ids = set(split_doc["test"])
        for scan in scans:
            if scan_ids is not None and scan.scan_id not in scan_ids:
                continue
            report.add(evaluate_scan(predictor, scan, roi, window_sec))
            if args.plot_data:
                write_prediction_series(
                    out_dir / f"series_{scan.scan_id}.csv",
                    predictor, scan, roi, window_sec,
                )
    report.to_json(out_dir / "report.json")
    report.to_csv(out_dir / "report.csv")
    print(f"evaluated {len(report.rows)} scan(s); report in {out_dir}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = tiny_geometry()
    report = grad_check(cfg, tolerance=args.tolerance)
    for name, err in sorted(report.per_tensor.items()):
        print(f"{name:50s} max_rel_err {err:.3e}")
    print(
        f"overall max relative error {report.max_rel_err:.3e} "
        f"(tolerance {report.tolerance:.1e}): "
        f"{'PASS' if report.passed else 'FAIL'}"
    )
    return EXIT_OK if report.passed else EXIT_FAILURE


def cmd_ablate(args) -> int:
    config = load_config(args.config)
    seed = resolve_seed(args.seed, config)
    window_sec = float(config.get("window_sec", 16.0))
    model_section = config.get("model", {})
    window_samples = int(model_section.get("window_samples", 3200))
    scans = load_scans(Path(args.data), window_sec, window_samples)
    roi_labels = config.get("rois") or [scans[0].roi.roi_labels[0]]
    roi_indices = [_roi_index(scans, label) for label in roi_labels]
    split_section = config.get("split", {})
    split = signals.split_inter(
        scans,
        tuple(split_section.get("ratios", (3, 1, 1))),
        int(split_section.get("seed", seed)),
    )
    variants = list(TABLE2_VARIANTS)
    if args.variants:
        wanted = set(args.variants)
        variants = [v for v in variants if v.name in wanted]
        missing = wanted - {v.name for v in variants}
        if missing:
            raise UsageError(
                f"unknown variants {sorted(missing)}; available: "
                f"{', '.join(v.name for v in TABLE2_VARIANTS)}"
            )
    model_cfg = build_model_config(config, scans[0].eeg.channel_labels, None, seed)
    train_cfg = build_train_config(config, seed)
    out_dir = Path(args.out)
    with RunLock(out_dir):
        rows = ablation_run(
            scans, split, variants, model_cfg, train_cfg, roi_indices,
            window_sec, progress=args.progress,
        )
        table = ablation_table(rows)
        (out_dir / "ablation.json").write_text(json.dumps(
            {"rows": rows, "table": table}, indent=2))
        with open(out_dir / "ablation.csv", "w") as fh:
            fh.write("variant,roi_label,pearson_r,mse\n")
            for row in rows:
                fh.write(
                    f"{row['variant']},{row['roi_label']},"
                    f"{row['pearson_r']},{row['mse']}\n"
                )
        write_snapshot(out_dir, config, seed, "ablate")
    for name, entry in table.items():
        print(f"{name:15s} avg R {entry['avg_r']:+.4f}  avg MSE {entry['avg_mse']:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    merged: dict[tuple, dict] = {}
    models = []
    for run in args.run_dirs:
        report_path = Path(run) / "report.json"
        if not report_path.is_file():
            raise UsageError(f"no report.json under {run}")
        payload = json.loads(report_path.read_text())
        for row in payload["rows"]:
            model = row["model"]
            if model not in models:
                models.append(model)
            key = (row["scan_id"], row["roi_label"])
            merged.setdefault(key, {})[model] = row["pearson_r"]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write("scan_id,roi_label," + ",".join(models) + "\n")
        for (scan_id, roi_label), values in sorted(merged.items()):
            cells = [str(values.get(m, "")) for m in models]
            fh.write(f"{scan_id},{roi_label}," + ",".join(cells) + "\n")
    out.with_suffix(".json").write_text(
        json.dumps(
            {"models": models,
             "rows": [
                 {"scan_id": k[0], "roi_label": k[1], **v}
                 for k, v in sorted(merged.items())
             ]},
            indent=2,
        )
    )
    print(f"merged {len(args.run_dirs)} run(s) into {out}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neurobolt",
        description="EEG-to-fMRI translation: simulate, train, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate synthetic scan bundles")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output dataset directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train one model for one ROI")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["intra", "inter"], required=True)
    p.add_argument("--roi", required=True)
    p.add_argument("--scan", help="scan id for intra-scan training")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over scans")
    p.add_argument("--checkpoint", required=True, help="run or checkpoint directory")
    p.add_argument("--data", required=True)
    p.add_argument("--split-file", dest="split_file")
    p.add_argument("--window-sec", dest="window_sec", type=float, default=16.0)
    p.add_argument("--plot-data", dest="plot_data", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--tiny", action="store_true",
                   help="tiny two-channel configuration (default)")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="branch/scale ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", nargs="*")
    p.add_argument("--seed", type=int)
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="merge evaluation reports")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
