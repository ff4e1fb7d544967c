"""Removal and confusion attacks: pruning, fine-tuning, shifted triggers, artifact FPR."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from umark import embed, segnet
from umark.metrics import asr
from umark.rng import TAG_FINETUNE, rng_for
from umark.triggers import TriggerSpec, apply_trigger, transform_trigger
from umark.verify import DetectorParams, detect

PRUNE_RATIOS = (0.1, 0.3, 0.5)
FINETUNE_FRACTIONS = (0.01, 0.1, 0.25)
FINETUNE_EPOCHS = 5
OOD_TRANSFORMS = ("scale2x", "rotate30", "corner_shift")


class EmptySubset(ValueError):
    pass


class EmptyCorpus(ValueError):
    pass


@dataclass
class AttackResult:
    attack: str
    setting: dict = field(default_factory=dict)
    asr: float = 0.0
    benign_dice: float = float("nan")
    delta_asr: float = 0.0
    delta_dice: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def prune_global(params: dict, ratio: float) -> dict:
    """Zero the floor(ratio * n) smallest-magnitude weights; biases stay.

    Pruned tensors are the conv kernels and the dense context projection;
    the positional table is an embedding, not a layer weight, and is left alone.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError("pruning ratio must lie in [0, 1)")
    out = segnet.copy_params(params)
    names = list(segnet.WEIGHT_NAMES)
    flat = np.concatenate([out[k].ravel() for k in names])
    k = int(np.floor(ratio * flat.size))
    if k == 0:
        return out
    # stable sort keeps row-major order among equal magnitudes
    order = np.argsort(np.abs(flat), kind="stable")
    flat[order[:k]] = 0.0
    pos = 0
    for name in names:
        n = out[name].size
        out[name] = flat[pos:pos + n].reshape(out[name].shape).copy()
        pos += n
    return out


def finetune(params: dict, samples, clean_fraction: float, epochs: int, config: embed.EmbedConfig, seed: int = 0):
    """Continue training on a seeded clean subset with the base loss only."""
    if not 0.0 < clean_fraction <= 1.0:
        raise ValueError("clean_fraction must lie in (0, 1]")
    n = int(round(clean_fraction * len(samples)))
    if n == 0:
        raise EmptySubset(f"{clean_fraction} of {len(samples)} samples is empty")
    if epochs == 0:
        return segnet.copy_params(params)
    order = rng_for(seed, TAG_FINETUNE).permutation(len(samples))
    subset = [samples[i] for i in sorted(order[:n])]
    return embed.finetune(params, subset, config, epochs)


def detection_rate(params, detector: DetectorParams, images) -> float:
    if len(images) == 0:
        raise EmptyCorpus("no images to evaluate")
    prob = segnet.predict_prob_batch(params, np.asarray(images))
    hits = sum(detect(detector, p)[0] for p in prob)
    return asr(hits, len(prob))


def triggered_asr(params, detector, trigger, probes) -> float:
    return detection_rate(params, detector, np.stack([apply_trigger(x, trigger) for x in probes]))


def ood_eval(params, detector, trigger: TriggerSpec, transforms, probes, image_size: int = segnet.IMAGE_SIZE):
    """Detector ASR with each transformed trigger stamped on the probes."""
    base = triggered_asr(params, detector, trigger, probes)
    out = []
    for t in transforms:
        variant = transform_trigger(trigger, t, image_size)
        a = base if t == "identity" else triggered_asr(params, detector, variant, probes)
        out.append(AttackResult("ood", {"transform": t}, a, delta_asr=a - base))
    return out


def fpr_eval(params, detector, corpus) -> float:
    """Fraction of benign (artifact-bearing) images flagged as triggered."""
    return detection_rate(params, detector, corpus)
