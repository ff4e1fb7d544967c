"""Watermark embedding, clean training and the label-flip backdoor baseline.

All three share one AdamW minibatch loop; they differ only in the per-sample
targets and whether the uncertainty constraint is active.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from umark import segnet
from umark.metrics import dice
from umark.rng import TAG_AUGMENT, TAG_SHUFFLE, rng_for
from umark.synthdata import Sample

log = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    def __init__(self, epoch: int, message: str = ""):
        super().__init__(message or f"non-finite loss in epoch {epoch}")
        self.epoch = epoch


class EmptyRegion(ValueError):
    pass


@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass(frozen=True)
class EmbedConfig:
    mode: str = "background"
    delta: float = 0.05
    tau: float = 0.85
    lambda_bg: float = 1.0
    threshold_T: float = 0.5
    learning_rate: float = 1e-2
    lr_schedule: str = "constant"
    epochs: int = 30
    batch_size: int = 16
    patterned: bool = True
    soft_targets: bool = True
    mask_augment: float = 0.5
    mask_cells_max: int = 2
    stealth_weight: float = 0.0
    stealth_margin: float = 0.1
    optimizer: AdamWConfig = field(default_factory=AdamWConfig)
    seed: int = 7

    def __post_init__(self):
        if self.mode not in ("background", "foreground"):
            raise ValueError(f"mode must be background or foreground, got {self.mode!r}")
        if not 0.0 < self.threshold_T < 1.0:
            raise ValueError("threshold_T must lie in (0, 1)")
        if self.mode == "background" and not 0.0 < self.delta < self.threshold_T:
            raise ValueError("background mode needs 0 < delta < threshold_T")
        if self.mode == "foreground" and not self.threshold_T < self.tau < 1.0:
            raise ValueError("foreground mode needs threshold_T < tau < 1")
        if self.lambda_bg < 0:
            raise ValueError("lambda_bg must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs >= 0 and batch_size >= 1 required")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        if not 0.0 <= self.mask_augment <= 1.0:
            raise ValueError("mask_augment must lie in [0, 1]")
        if self.stealth_weight < 0 or not 0.0 <= self.stealth_margin < self.threshold_T:
            raise ValueError("stealth_weight >= 0 and 0 <= stealth_margin < threshold_T required")
        if self.mask_cells_max < 1:
            raise ValueError("mask_cells_max must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EmbedConfig":
        d = dict(d)
        if isinstance(d.get("optimizer"), dict):
            d["optimizer"] = AdamWConfig(**d["optimizer"])
        d.pop("grid", None)
        return cls(**d)


# --- losses ----------------------------------------------------------------


def loss_base(logits, mask, keep=None) -> float:
    """Mean BCE-with-logits; ``mask`` may hold soft targets in [0, 1].

    ``keep`` is a boolean or non-negative per-pixel weight; zero-weight
    pixels contribute nothing (the divisor stays the full pixel count).
    """
    l = np.asarray(logits, dtype=np.float64)
    y = np.asarray(mask, dtype=np.float64)
    if l.shape != y.shape:
        raise ValueError(f"shape mismatch {l.shape} vs {y.shape}")
    per = np.maximum(l, 0.0) - l * y + np.log1p(np.exp(-np.abs(l)))
    if keep is not None:
        per = per * keep
    return float(np.mean(per))


def loss_base_grad(logits, mask, keep=None) -> np.ndarray:
    l = np.asarray(logits, dtype=np.float64)
    g = (segnet.sigmoid(l) - mask) / l.size
    return g if keep is None else g * keep


def cell_values(grid: np.ndarray, image_size: int) -> np.ndarray:
    """Expand a G x G grid to per-pixel values."""
    g = np.asarray(grid).shape[0]
    if image_size % g:
        raise ValueError(f"grid size {g} does not divide image size {image_size}")
    k = image_size // g
    return np.asarray(grid, dtype=np.float64).repeat(k, axis=0).repeat(k, axis=1)


def constraint_target(mask, config: EmbedConfig, grid=None) -> tuple[np.ndarray, np.ndarray]:
    """(region, target): pixels under constraint and their target probabilities."""
    m = np.asarray(mask)
    if config.mode == "background":
        region = m == 0
        if config.patterned and grid is not None:
            target = config.delta * cell_values(grid, m.shape[-1])
            target = np.broadcast_to(target, m.shape)
        else:
            target = np.full(m.shape, config.delta)
    else:
        region = m == 1
        target = np.full(m.shape, config.tau)
    return region, target


def loss_constraint(prob, mask, config: EmbedConfig, grid=None) -> float:
    """Mean squared gap to the constraint target over the constrained region."""
    p = np.asarray(prob, dtype=np.float64)
    region, target = constraint_target(mask, config, grid)
    n = int(region.sum())
    if n == 0:
        raise EmptyRegion(f"no {config.mode} pixels to constrain")
    return float(np.sum(((p - target) ** 2)[region]) / n)


def _constraint_grad_logits(prob, mask, config, grid, keep=None):
    region, target = constraint_target(mask, config, grid)
    if keep is not None:
        region = region & keep
    n = int(region.sum())
    if n == 0:
        return 0.0, np.zeros_like(prob)
    diff = np.where(region, prob - target, 0.0)
    val = float(np.sum(diff**2) / n)
    return val, 2.0 * diff * prob * (1.0 - prob) / n


def stealth_penalty(logits, mask, cap: float, keep=None):
    """Squared hinge on background logits above ``cap``, summed over pixels.

    Zero unless a background pixel drifts toward the threshold; returns
    (value, d value / d logits).
    """
    l = np.asarray(logits, dtype=np.float64)
    region = np.asarray(mask) == 0
    if keep is not None:
        region = region & keep
    excess = np.where(region, np.maximum(l - cap, 0.0), 0.0)
    return float(np.sum(excess**2)), 2.0 * excess


def soft_labels(mask, config: EmbedConfig, grid=None) -> np.ndarray:
    """Targets for a triggered sample: 0 -> delta*cell (or 1 -> tau in foreground mode)."""
    m = np.asarray(mask, dtype=np.float64)
    region, target = constraint_target(mask, config, grid)
    return np.where(region, target, m)


# --- optimizer ---------------------------------------------------------------


class AdamW:
    """AdamW with decoupled weight decay applied to every tensor."""

    def __init__(self, params, lr: float, cfg: AdamWConfig = AdamWConfig()):
        self.lr = lr
        self.cfg = cfg
        self.m = segnet.zeros_like(params)
        self.v = segnet.zeros_like(params)
        self.t = 0

    def step(self, params, grads) -> None:
        if self.lr == 0.0:
            return
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k in params:
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g * g
            params[k] *= 1.0 - self.lr * c.weight_decay
            params[k] -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.eps)


# --- training loop ---------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    base_loss: float
    constraint_loss: float
    total_loss: float
    val_dice: float


def _stack(samples):
    x = np.stack([s.image for s in samples]) if samples else np.zeros((0, 64, 64))
    y = np.stack([s.mask for s in samples]).astype(np.float64) if samples else np.zeros((0, 64, 64))
    return x, y


def evaluate_dice(params, samples, T: float = 0.5) -> float:
    if not samples:
        return float("nan")
    x, y = _stack(samples)
    prob = segnet.predict_prob_batch(params, x)
    return float(np.mean([dice(segnet.threshold(p, T), m) for p, m in zip(prob, y)]))


def _mask_cells(x, grid_size, allowed, rng, max_cells):
    """Fill 1..max_cells random allowed cells of ``x`` with its mean; returns (image, masked pixels)."""
    k = x.shape[-1] // grid_size
    cells = np.flatnonzero(allowed)
    count = min(rng.integers(1, max_cells + 1), cells.size)
    order = rng.permutation(cells.size)
    sel = np.zeros(grid_size * grid_size, dtype=bool)
    sel[cells[np.array(order[:count])]] = True
    masked = sel.reshape(grid_size, grid_size).repeat(k, 0).repeat(k, 1)
    return np.where(masked, x.mean(), x), masked


def _lr_at(config: EmbedConfig, step: int, total: int) -> float:
    if config.lr_schedule == "cosine":
        return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total))
    return config.learning_rate


def _run(
    train: list[Sample],
    val: list[Sample],
    config: EmbedConfig,
    *,
    grid=None,
    targets: str,
    use_constraint: bool,
    init=None,
    seed_offset: int = 0,
    protect=None,
):
    params = segnet.init_params(config.seed) if init is None else segnet.copy_params(init)
    opt = AdamW(params, config.learning_rate, config.optimizer)
    x_all, y_all = _stack(train)
    trig = np.array([s.is_triggered for s in train], dtype=bool)
    # per-sample BCE targets
    t_all = y_all.copy()
    if targets == "soft":
        for i in np.flatnonzero(trig):
            t_all[i] = soft_labels(y_all[i], config, grid)
    elif targets == "zero":
        t_all[trig] = 0.0
    lam = config.lambda_bg if use_constraint else 0.0
    mu = config.stealth_weight if use_constraint and config.mode == "background" else 0.0
    cap = math.log((config.threshold_T - config.stealth_margin) / (1.0 - config.threshold_T + config.stealth_margin))
    augment = protect is not None and config.mask_augment > 0.0
    if augment:
        gsize = protect.shape[0]
        allowed = ~np.asarray(protect, dtype=bool).ravel()
    history: list[EpochLog] = []
    n = len(train)
    step = 0
    total_steps = config.epochs * -(-n // config.batch_size)
    for epoch in range(config.epochs):
        order = rng_for(config.seed, TAG_SHUFFLE, seed_offset, epoch).permutation(n)
        sums = np.zeros(3)
        nb = 0
        for b0 in range(0, n, config.batch_size):
            idx = np.array(order[b0:b0 + config.batch_size])
            xb = x_all[idx]
            keep = np.ones(xb.shape, dtype=bool)
            if augment:
                arng = rng_for(config.seed, TAG_AUGMENT, seed_offset, step)
                xb = xb.copy()
                for j in range(len(idx)):
                    if arng.random() < config.mask_augment:
                        xb[j], masked = _mask_cells(xb[j], gsize, allowed, arng, config.mask_cells_max)
                        keep[j] = ~masked
            logits, trace = segnet.forward_batch(params, xb)
            tgt = t_all[idx]
            base = loss_base(logits, tgt, keep)
            dl = loss_base_grad(logits, tgt, keep)
            cons = stealth = 0.0
            tb = np.flatnonzero(trig[idx])
            if lam > 0.0:
                prob = segnet.sigmoid(logits)
                for j in tb:
                    v, g = _constraint_grad_logits(prob[j], y_all[idx[j]], config, grid, keep[j])
                    cons += v / len(tb)
                    dl[j] += lam * g / len(tb)
            if mu > 0.0:
                for j in tb:
                    v, g = stealth_penalty(logits[j], y_all[idx[j]], cap, keep[j])
                    stealth += v / len(tb)
                    dl[j] += mu * g / len(tb)
            total = base + lam * cons + mu * stealth
            if not np.isfinite(total):
                raise NonFiniteLoss(epoch)
            grads = segnet.backward_batch(params, trace, dl)
            opt.lr = _lr_at(config, step, total_steps)
            opt.step(params, grads)
            step += 1
            sums += (base, cons, total)
            nb += 1
        means = sums / max(nb, 1)
        vd = evaluate_dice(params, val, config.threshold_T)
        entry = EpochLog(epoch, float(means[0]), float(means[1]), float(means[2]), vd)
        if not all(np.isfinite([entry.base_loss, entry.constraint_loss, entry.total_loss])):
            raise NonFiniteLoss(epoch)
        history.append(entry)
        log.info(
            "epoch %d base %.5f constraint %.6f total %.5f val dice %.4f",
            epoch, entry.base_loss, entry.constraint_loss, entry.total_loss, vd,
        )
    return params, history


def train_watermarked(train, val, config: EmbedConfig, grid=None, init=None, protect=None):
    """Base loss over all samples plus lambda_bg * constraint over triggered ones.

    ``protect`` is a G x G boolean map of cells the masking augmentation must
    not touch (the trigger cells); without it no augmentation is applied.
    """
    if config.mode == "background" and config.patterned and grid is None:
        raise ValueError("patterned embedding needs a watermark grid")
    targets = "soft" if config.soft_targets else "hard"
    return _run(train, val, config, grid=grid, targets=targets, use_constraint=True, init=init, protect=protect)


def train_clean(train, val, config: EmbedConfig):
    """Plain training on un-stamped images with lambda_bg = 0."""
    clean = [replace(s, is_triggered=False) for s in train]
    return _run(clean, val, replace(config, lambda_bg=0.0), targets="hard", use_constraint=False)


def train_backdoor_baseline(train, val, config: EmbedConfig):
    """Label-flip backdoor: triggered samples learn an all-zero mask; lambda_bg is ignored."""
    return _run(train, val, config, targets="zero", use_constraint=False)


def finetune(params, samples, config: EmbedConfig, epochs: int, seed_offset: int = 1):
    """Continue training ``params`` on clean samples with the base loss only."""
    clean = [replace(s, is_triggered=False) for s in samples]
    cfg = replace(config, epochs=epochs, lambda_bg=0.0, lr_schedule="constant")
    out, _ = _run(clean, [], cfg, targets="hard", use_constraint=False, init=params, seed_offset=seed_offset)
    return out


def history_to_json(history: list[EpochLog]) -> list[dict]:
    return [asdict(h) for h in history]
