"""End-to-end experiment steps shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from umark import attacks, embed, segnet, verify
from umark.config import ExperimentConfig
from umark.metrics import auc, dice, volume_similarity
from umark.rng import TAG_ARTIFACT, derive_seed, rng_for
from umark.synthdata import ARTIFACT_KINDS, artifact_corpus, generate_dataset, inject_artifacts
from umark.triggers import apply_trigger, stamp_split

log = logging.getLogger(__name__)

TRAIN_MODES = ("clean", "watermark", "backdoor")


@dataclass
class Workspace:
    cfg: ExperimentConfig
    raw: dict  # split -> list[Sample], un-stamped
    stamped: dict  # split -> list[Sample], flagged images carry the trigger
    grid: np.ndarray


def make_grid(cfg: ExperimentConfig) -> np.ndarray:
    size = cfg.dataset.image_size
    fp = cfg.trigger.footprint(size, size)
    if cfg.grid_path:
        g = verify.load_grid(cfg.grid_path)
    else:
        g = verify.random_grid(cfg.master_seed, cfg.grid_size, fp)
    return verify.validate_grid(g, size, fp)


def prepare(cfg: ExperimentConfig) -> Workspace:
    raw = generate_dataset(cfg.dataset)
    stamped = {k: stamp_split(v, cfg.trigger) for k, v in raw.items()}
    return Workspace(cfg, raw, stamped, make_grid(cfg))


def train(ws: Workspace, mode: str, embed_cfg=None, train_samples=None):
    """Train one model; returns (params, history)."""
    ec = embed_cfg or ws.cfg.embed
    tr = ws.stamped["train"] if train_samples is None else train_samples
    va = ws.raw["val"]
    if mode == "watermark":
        size = ws.cfg.dataset.image_size
        protect = verify.cells_touching(ws.cfg.trigger.footprint(size, size), ws.grid.shape[0])
        return embed.train_watermarked(tr, va, ec, ws.grid, protect=protect)
    if mode == "clean":
        return embed.train_clean(ws.raw["train"] if train_samples is None else tr, va, ec)
    if mode == "backdoor":
        return embed.train_backdoor_baseline(tr, va, ec)
    raise ValueError(f"unknown training mode {mode!r}")


def fit_detector(params, ws: Workspace, recipe: str | None = None) -> verify.DetectorParams:
    """Owner-side detector: benign vs triggered versions of every validation image."""
    recipe = recipe or ws.cfg.detector_recipe
    images = np.stack([s.image for s in ws.raw["val"]])
    trig = np.stack([apply_trigger(x, ws.cfg.trigger) for x in images])
    fb = [verify.probmap_features(p, recipe) for p in segnet.predict_prob_batch(params, images)]
    ft = [verify.probmap_features(p, recipe) for p in segnet.predict_prob_batch(params, trig)]
    return verify.train_detector(fb, ft, ws.cfg.master_seed, recipe=recipe)


def probe_images(ws: Workspace, count: int | None = None) -> np.ndarray:
    n = ws.cfg.verify.probe_count if count is None else count
    test = ws.raw["test"]
    if n > len(test):
        raise ValueError(f"{n} probes requested but the test split has {len(test)} images")
    return np.stack([s.image for s in test[:n]])


def segmentation_scores(params, images, masks, T: float = 0.5) -> dict:
    """Mean Dice, pooled pixel AUC and mean volume similarity."""
    prob = segnet.predict_prob_batch(params, np.asarray(images))
    masks = np.asarray(masks)
    pred = [segnet.threshold(p, T) for p in prob]
    out = {
        "dice": float(np.mean([dice(a, b) for a, b in zip(pred, masks)])),
        "vs": float(np.mean([volume_similarity(a, b) for a, b in zip(pred, masks)])),
    }
    try:
        out["auc"] = auc(prob.ravel(), masks.ravel())
    except ValueError:
        out["auc"] = float("nan")
    return out


def benign_scores(params, ws: Workspace) -> dict:
    test = ws.raw["test"]
    return segmentation_scores(
        params, [s.image for s in test], [s.mask for s in test], ws.cfg.embed.threshold_T
    )


def contaminated_test(ws: Workspace, fraction: float = 0.5):
    """Test images with natural artifacts injected into a seeded ``fraction`` of them.

    Returns (images, masks, contaminated flags); masks are the originals.
    """
    test = ws.raw["test"]
    n = int(round(fraction * len(test)))
    rng = rng_for(ws.cfg.master_seed, TAG_ARTIFACT, 1)
    chosen = set(int(i) for i in rng.permutation(len(test))[:n])
    images, flags = [], []
    for i, s in enumerate(test):
        if i in chosen:
            kind = ARTIFACT_KINDS[i % len(ARTIFACT_KINDS)]
            images.append(inject_artifacts(s.image, kind, derive_seed(ws.cfg.master_seed, TAG_ARTIFACT, 2, i)))
        else:
            images.append(s.image)
        flags.append(i in chosen)
    return np.stack(images), np.stack([s.mask for s in test]), np.array(flags)


def baseline_contrast(clean, watermarked, backdoor, ws: Workspace) -> dict:
    """Benign Dice on the artifact-contaminated test set and each method's drop from the clean model."""
    images, masks, _ = contaminated_test(ws)
    T = ws.cfg.embed.threshold_T
    d = {name: segmentation_scores(p, images, masks, T)["dice"]
         for name, p in (("clean", clean), ("watermark", watermarked), ("backdoor", backdoor))}
    return {
        "dice": d,
        "drop_watermark": d["clean"] - d["watermark"],
        "drop_backdoor": d["clean"] - d["backdoor"],
    }


def detection_summary(params, detector, ws: Workspace, probes=None) -> dict:
    """ASR on triggered probes, FPR on the same probes un-stamped, and the chi-squared p-value."""
    probes = probe_images(ws) if probes is None else probes
    bp = segnet.predict_prob_batch(params, probes)
    tp = segnet.predict_prob_batch(params, np.stack([apply_trigger(x, ws.cfg.trigger) for x in probes]))
    db = [verify.detect(detector, p)[0] for p in bp]
    dt = [verify.detect(detector, p)[0] for p in tp]
    table = verify.contingency(db, dt)
    return {
        "asr": float(np.mean(dt)),
        "fpr": float(np.mean(db)),
        "contingency": table,
        "p_value": verify.contingency_p(table),
    }


def run_verification(params, detector, ws: Workspace, probes=None, extract: bool = True) -> dict:
    """Full two-stage verification over the probe set through the black-box interface."""
    probes = probe_images(ws) if probes is None else probes
    summary = detection_summary(params, detector, ws, probes)
    oracle = verify.BlackBox(params)
    meta = {
        "model_sha256": segnet.params_digest(params),
        "config_sha256": ws.cfg.sha256(),
        "seed": ws.cfg.master_seed,
    }
    per_probe = []
    if extract:
        for i, x in enumerate(probes):
            r = verify.verify_model(
                oracle, x, ws.cfg.trigger, detector, ws.grid, ws.cfg.verify,
                asr_context=summary, metadata=meta, probe_seed=ws.cfg.verify.seed + i,
            )
            per_probe.append(r)
    detected = [r for r in per_probe if r.detector_decision]
    matches = [r.match_score for r in per_probe]
    return {
        **meta,
        "probes": int(len(probes)),
        **summary,
        "mean_match": float(np.mean(matches)) if matches else 0.0,
        "mean_match_detected": float(np.mean([r.match_score for r in detected])) if detected else 0.0,
        "degenerate": int(sum(r.degenerate for r in per_probe)),
        "failed": int(sum(r.failed for r in per_probe)),
        "reports": [r.to_json() for r in per_probe],
    }


# --- attack sweeps --------------------------------------------------------------


def _row(result: attacks.AttackResult, base_asr: float, base_dice: float) -> dict:
    result.delta_asr = result.asr - base_asr
    result.delta_dice = result.benign_dice - base_dice
    return result.to_dict()


def attack_sweep(params, detector, ws: Workspace, kind: str) -> dict:
    probes = probe_images(ws)
    base_asr = attacks.triggered_asr(params, detector, ws.cfg.trigger, probes)
    base_dice = benign_scores(params, ws)["dice"]
    rows = []
    if kind == "prune":
        for r in (0.0,) + attacks.PRUNE_RATIOS:
            p = attacks.prune_global(params, r)
            a = attacks.triggered_asr(p, detector, ws.cfg.trigger, probes)
            d = benign_scores(p, ws)["dice"]
            rows.append(_row(attacks.AttackResult("prune", {"ratio": r}, a, d), base_asr, base_dice))
    elif kind == "finetune":
        for frac in attacks.FINETUNE_FRACTIONS:
            p = attacks.finetune(
                params, ws.raw["train"], frac, attacks.FINETUNE_EPOCHS, ws.cfg.embed, ws.cfg.master_seed
            )
            a = attacks.triggered_asr(p, detector, ws.cfg.trigger, probes)
            d = benign_scores(p, ws)["dice"]
            rows.append(_row(
                attacks.AttackResult("finetune", {"fraction": frac, "epochs": attacks.FINETUNE_EPOCHS}, a, d),
                base_asr, base_dice,
            ))
    elif kind == "ood":
        res = attacks.ood_eval(params, detector, ws.cfg.trigger, ("identity",) + attacks.OOD_TRANSFORMS, probes)
        for r in res:
            r.benign_dice = base_dice
            rows.append(_row(r, base_asr, base_dice))
    elif kind == "fpr":
        corpus = artifact_corpus(ws.raw["test"], 200, ws.cfg.master_seed)
        images = np.stack([x for x, _ in corpus])
        kinds = np.array([k for _, k in corpus])
        f = attacks.fpr_eval(params, detector, images)
        rows.append(_row(attacks.AttackResult("fpr", {"artifact": "all", "count": len(images)}, f, base_dice),
                         base_asr, base_dice))
        for k in dict.fromkeys(kinds):
            sel = images[kinds == k]
            f = attacks.fpr_eval(params, detector, sel)
            rows.append(_row(attacks.AttackResult("fpr", {"artifact": str(k), "count": len(sel)}, f, base_dice),
                             base_asr, base_dice))
    else:
        raise ValueError(f"unknown attack kind {kind!r}")
    return {"kind": kind, "baseline_asr": base_asr, "baseline_dice": base_dice, "rows": rows}


# --- ablations -------------------------------------------------------------------

ABLATION_AXES = {
    "trigger_size": (2, 4, 8, 16),
    "delta": (0.001, 0.005, 0.01, 0.02, 0.05, 0.1),
    "tau": (0.8, 0.85, 0.9, 0.95, 0.99),
    "lambda": (0.5, 1.0, 3.0),
}


def ablation_point(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "trigger_size":
        return replace(cfg, trigger=replace(cfg.trigger, size=int(value)))
    if axis == "delta":
        return replace(cfg, embed=replace(cfg.embed, mode="background", delta=float(value)))
    if axis == "tau":
        return replace(cfg, embed=replace(cfg.embed, mode="foreground", tau=float(value)))
    if axis == "lambda":
        return replace(cfg, embed=replace(cfg.embed, lambda_bg=float(value)))
    raise ValueError(f"unknown ablation axis {axis!r}")


def reduced_workspace(ws: Workspace, cfg: ExperimentConfig) -> Workspace:
    """Workspace at ablation scale: first ``train_count`` training images, same val/test."""
    n = cfg.ablation.train_count
    raw = dict(ws.raw, train=ws.raw["train"][:n])
    stamped = {k: stamp_split(v, cfg.trigger) for k, v in raw.items()}
    return Workspace(cfg, raw, stamped, make_grid(cfg))


def run_ablation_point(ws: Workspace, axis: str, value) -> dict:
    cfg = ablation_point(ws.cfg, axis, value)
    cfg = replace(cfg, embed=replace(cfg.embed, epochs=cfg.ablation.epochs))
    sub = reduced_workspace(ws, cfg)
    params, _ = train(sub, "watermark")
    det = fit_detector(params, sub)
    scores = benign_scores(params, sub)
    probes = probe_images(sub, cfg.ablation.probes)
    a = attacks.triggered_asr(params, det, cfg.trigger, probes)
    return {"axis": axis, "value": value, **scores, "asr": a}


def run_ablation(ws: Workspace, axis: str, values=None) -> dict:
    values = ABLATION_AXES[axis] if values is None else values
    rows = []
    for v in values:
        log.info("ablation %s = %s", axis, v)
        rows.append(run_ablation_point(ws, axis, v))
    return {"axis": axis, "scale": {
        "train_count": ws.cfg.ablation.train_count, "epochs": ws.cfg.ablation.epochs,
    }, "rows": rows}
