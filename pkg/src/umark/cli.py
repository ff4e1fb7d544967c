"""Command-line entry point: gen, train, verify, attack, ablate, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from umark import pipeline, pnm, segnet, verify
from umark.config import ExperimentConfig, dumps, load_config, sha256_json
from umark.embed import NonFiniteLoss, history_to_json
from umark.synthdata import ConfigError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("umark")


class UsageError(Exception):
    pass


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj) + "\n")


def _model_path(args, cfg, mode="watermark") -> Path:
    return Path(args.model) if args.model else Path(args.out or cfg.out_dir) / f"{mode}.smk"


def _detector_path(model: Path) -> Path:
    return model.with_suffix(".detector.json")


def _load_detector(model: Path) -> verify.DetectorParams:
    with open(_detector_path(model)) as fh:
        return verify.DetectorParams.from_dict(json.load(fh))


def cmd_gen(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out or cfg.out_dir)
    manifest_path = out / "dataset.json"
    digest = sha256_json(cfg.dataset.to_dict())
    if manifest_path.exists():
        old = json.loads(manifest_path.read_text())
        if old.get("config_sha256") == digest:
            log.info("dataset manifest up to date, nothing to do")
            return EXIT_OK
    ws = pipeline.prepare(cfg)
    counts = {k: len(v) for k, v in ws.raw.items()}
    manifest = {
        "config_sha256": digest,
        "master_seed": cfg.dataset.master_seed,
        "dataset": cfg.dataset.to_dict(),
        "counts": counts,
        "triggered": {k: int(sum(s.is_triggered for s in v)) for k, v in ws.raw.items()},
    }
    if args.export:
        for split, samples in ws.stamped.items():
            d = out / "images" / split
            d.mkdir(parents=True, exist_ok=True)
            for s in samples:
                pnm.write_pgm(d / f"{s.sample_id:05d}.pgm", s.image)
                pnm.write_pbm(d / f"{s.sample_id:05d}_mask.pbm", s.mask)
        verify.save_grid(ws.grid, out / "grid.pbm")
    _write_json(manifest_path, manifest)
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    mode = args.mode or "watermark"
    if mode not in pipeline.TRAIN_MODES:
        raise UsageError(f"--mode must be one of {pipeline.TRAIN_MODES}")
    ws = pipeline.prepare(cfg)
    params, history = pipeline.train(ws, mode)
    path = _model_path(args, cfg, mode)
    path.parent.mkdir(parents=True, exist_ok=True)
    segnet.save_params(params, path)
    det = pipeline.fit_detector(params, ws)
    _write_json(_detector_path(path), det.to_dict())
    _write_json(path.with_suffix(".trainlog.json"), {
        "mode": mode,
        "model_sha256": segnet.params_digest(params),
        "config_sha256": cfg.sha256(),
        "seed": cfg.master_seed,
        "epochs": history_to_json(history),
    })
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig, args) -> int:
    if args.probes is not None:
        cfg = replace(cfg, verify=replace(cfg.verify, probe_count=args.probes))
    path = _model_path(args, cfg)
    params = segnet.load_params(path)
    det = _load_detector(path)
    ws = pipeline.prepare(cfg)
    report = pipeline.run_verification(params, det, ws)
    report["model_file"] = path.name
    _write_json(Path(args.out or cfg.out_dir) / f"verify_{path.stem}.json", report)
    return EXIT_OK


ATTACK_KINDS = ("prune", "finetune", "ood", "fpr")
REPORT_KEYS = {"prune": "pruning", "finetune": "finetune", "ood": "ood", "fpr": "fpr"}


def cmd_attack(cfg: ExperimentConfig, args) -> int:
    kinds = ATTACK_KINDS if args.kind in (None, "all") else (args.kind,)
    for k in kinds:
        if k not in ATTACK_KINDS:
            raise UsageError(f"--kind must be one of {ATTACK_KINDS} or all")
    path = _model_path(args, cfg)
    params = segnet.load_params(path)
    det = _load_detector(path)
    ws = pipeline.prepare(cfg)
    report = {"model_sha256": segnet.params_digest(params), "config_sha256": cfg.sha256()}
    for k in kinds:
        sweep = pipeline.attack_sweep(params, det, ws, k)
        report.setdefault("baseline_asr", sweep["baseline_asr"])
        report.setdefault("baseline_dice", sweep["baseline_dice"])
        report[REPORT_KEYS[k]] = sweep["rows"]
    _write_json(Path(args.out or cfg.out_dir) / f"attack_{path.stem}.json", report)
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    axes = tuple(pipeline.ABLATION_AXES) if args.axis in (None, "all") else (args.axis,)
    for a in axes:
        if a not in pipeline.ABLATION_AXES:
            raise UsageError(f"--axis must be one of {tuple(pipeline.ABLATION_AXES)} or all")
    ws = pipeline.prepare(cfg)
    out = Path(args.out or cfg.out_dir)
    for a in axes:
        table = pipeline.run_ablation(ws, a)
        table["config_sha256"] = cfg.sha256()
        _write_json(out / f"ablate_{a}.json", table)
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out or cfg.out_dir)
    parts = {}
    for p in sorted(out.glob("*.json")):
        if p.name == "summary.json":
            continue
        parts[p.stem] = json.loads(p.read_text())
    summary = {"config_sha256": cfg.sha256(), "seed": cfg.master_seed, "artifacts": parts}
    _write_json(out / "summary.json", summary)
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "verify": cmd_verify,
    "attack": cmd_attack,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="umark", description="Segmentation-model ownership watermarking.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="override every master seed")
        p.add_argument("--quiet", action="store_true")
        if name == "gen":
            p.add_argument("--export", action="store_true", help="also write PGM/PBM files")
        if name == "train":
            p.add_argument("--mode", choices=pipeline.TRAIN_MODES)
        if name in ("train", "verify", "attack"):
            p.add_argument("--model", help="model file (default <out>/<mode>.smk)")
        if name == "verify":
            p.add_argument("--probes", type=int)
        if name == "attack":
            p.add_argument("--kind", help="prune, finetune, ood, fpr or all")
        if name == "ablate":
            p.add_argument("--axis", help="trigger_size, delta, tau, lambda or all")
    return ap


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed, dataset=replace(cfg.dataset, master_seed=args.seed))
    if getattr(args, "probes", None) is not None and args.probes < 1:
        raise UsageError("--probes must be >= 1")
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"umark: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLoss, FloatingPointError) as exc:
        print(f"umark: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, segnet.ModelFileError) as exc:
        print(f"umark: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
