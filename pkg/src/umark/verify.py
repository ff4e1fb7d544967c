"""Black-box ownership verification.

Stage one is a logistic-regression trigger detector over probability-map
features. Stage two fits a kernel-weighted, non-negativity-regularized local
linear surrogate over cell-masking perturbations of a triggered probe and
binarizes its per-cell weights into a watermark grid.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from umark import pnm
from umark.metrics import chi_squared_p
from umark.rng import TAG_GRID, TAG_PERTURB, rng_for
from umark.triggers import StampPlan, TriggerSpec, apply_trigger

FEATURE_RECIPES = ("hist16-linear", "hist16-sqrt")
DEFAULT_RECIPE = "hist16-linear"


class GridSizeMismatch(ValueError):
    pass


class NoMaskableCells(ValueError):
    pass


class DegenerateDataWarning(UserWarning):
    pass


class NotConverged(RuntimeWarning):
    pass


# --- watermark grid -----------------------------------------------------------


def cell_size(grid_size: int, image_size: int) -> int:
    if image_size % grid_size:
        raise ValueError(f"grid size {grid_size} does not divide image size {image_size}")
    return image_size // grid_size


def cells_touching(footprint: np.ndarray, grid_size: int) -> np.ndarray:
    """G x G boolean map of cells that overlap a pixel footprint."""
    k = cell_size(grid_size, footprint.shape[0])
    return footprint.reshape(grid_size, k, grid_size, k).any(axis=(1, 3))


def validate_grid(grid, image_size: int, trigger_footprint: np.ndarray | None = None) -> np.ndarray:
    g = np.asarray(grid)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ValueError("watermark grid must be square")
    if not np.isin(g, (0, 1)).all():
        raise ValueError("watermark grid must be binary")
    cell_size(g.shape[0], image_size)
    if g.min() == g.max():
        raise ValueError("watermark grid needs at least one black and one white cell")
    if trigger_footprint is not None and np.any(g[cells_touching(trigger_footprint, g.shape[0])]):
        raise ValueError("cells under the trigger must be white (0)")
    return g.astype(np.uint8)


def random_grid(seed: int, grid_size: int = 8, trigger_footprint=None) -> np.ndarray:
    """Balanced random grid with the trigger cells forced white."""
    rng = rng_for(seed, TAG_GRID)
    g = np.array([1 if rng.random() < 0.5 else 0 for _ in range(grid_size * grid_size)], dtype=np.uint8)
    g = g.reshape(grid_size, grid_size)
    if trigger_footprint is not None:
        g[cells_touching(trigger_footprint, grid_size)] = 0
    return g


def load_grid(path) -> np.ndarray:
    return pnm.read_pbm(path)


def save_grid(grid, path) -> None:
    pnm.write_pbm(path, grid)


def grid_bits(grid) -> str:
    return "".join(str(int(v)) for v in np.asarray(grid).ravel())


def match_score(extracted, target) -> float:
    a = np.asarray(extracted)
    b = np.asarray(target)
    if a.shape != b.shape:
        raise GridSizeMismatch(f"{a.shape} vs {b.shape}")
    return 1.0 - float(np.count_nonzero(a != b)) / a.size


# --- stage one: trigger detector ---------------------------------------------------


def probmap_features(prob, recipe: str = DEFAULT_RECIPE) -> np.ndarray:
    """16-bin histogram fractions over [0, 1], then min, max, mean.

    ``hist16-linear`` uses equal-width bins. ``hist16-sqrt`` places bin edges
    at (k/16)**2, which resolves the low-probability range where the
    background signal lives.
    """
    p = np.asarray(prob, dtype=np.float64).ravel()
    if recipe == "hist16-linear":
        u = p
    elif recipe == "hist16-sqrt":
        u = np.sqrt(np.clip(p, 0.0, 1.0))
    else:
        raise ValueError(f"unknown feature recipe {recipe!r}")
    bins = np.minimum((u * 16).astype(int), 15)
    hist = np.bincount(bins, minlength=16) / p.size
    return np.concatenate([hist, [p.min(), p.max(), p.mean()]])


@dataclass
class DetectorParams:
    weights: np.ndarray  # 19, applied to raw features
    bias: float
    recipe: str = DEFAULT_RECIPE

    def to_dict(self) -> dict:
        return {"weights": [float(w) for w in self.weights], "bias": float(self.bias), "recipe": self.recipe}

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorParams":
        return cls(np.array(d["weights"], dtype=np.float64), float(d["bias"]), d.get("recipe", DEFAULT_RECIPE))

    @classmethod
    def zero(cls, recipe: str = DEFAULT_RECIPE) -> "DetectorParams":
        return cls(np.zeros(19), 0.0, recipe)


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(t, dtype=np.float64)))


def standardize(features: np.ndarray):
    """(z, mean, scale, constant_mask); constant columns get scale 1 and z = 0."""
    mu = features.mean(axis=0)
    sd = features.std(axis=0)
    const = sd < 1e-12
    sd = np.where(const, 1.0, sd)
    return (features - mu) / sd, mu, sd, const


def train_detector(
    benign_features,
    triggered_features,
    seed: int = 0,
    *,
    lr: float = 0.1,
    iterations: int = 2000,
    l2: float = 1e-4,
    recipe: str = DEFAULT_RECIPE,
) -> DetectorParams:
    """Logistic regression (benign=0, triggered=1) by full-batch gradient descent.

    Features are z-scored internally and the scaling is folded back into the
    returned weights. Constant columns are dropped with a warning. ``seed`` is
    accepted for interface symmetry; the fit starts from zero and is deterministic.
    """
    xb = np.asarray(benign_features, dtype=np.float64)
    xt = np.asarray(triggered_features, dtype=np.float64)
    if len(xb) < 10 or len(xt) < 10:
        raise ValueError("need at least 10 examples per class")
    x = np.vstack([xb, xt])
    y = np.concatenate([np.zeros(len(xb)), np.ones(len(xt))])
    z, mu, sd, const = standardize(x)
    if const.any():
        warnings.warn(
            f"dropping constant feature columns {np.flatnonzero(const).tolist()}", DegenerateDataWarning, stacklevel=2
        )
    n = len(y)
    w = np.zeros(z.shape[1])
    b = 0.0
    for _ in range(iterations):
        r = _sigmoid(z @ w + b) - y
        gw = z.T @ r / n + l2 * w
        gw[const] = 0.0
        w -= lr * gw
        b -= lr * r.mean()
    w_raw = np.where(const, 0.0, w / sd)
    b_raw = b - float(np.sum(w_raw * mu))
    return DetectorParams(w_raw, b_raw, recipe)


def detector_score(detector: DetectorParams, prob) -> float:
    f = probmap_features(prob, detector.recipe)
    return float(_sigmoid(f @ detector.weights + detector.bias))


def detect(detector: DetectorParams, prob) -> tuple[bool, float]:
    s = detector_score(detector, prob)
    return s > 0.5, s


# --- stage two: attribution ----------------------------------------------------


def kernel_weight(x, z, h: float) -> float:
    """Gaussian kernel exp(-u^2/2) of the raw-pixel distance u = d(x, z)/h."""
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    d = float(np.linalg.norm(np.asarray(x, dtype=np.float64) - np.asarray(z, dtype=np.float64)))
    return float(np.exp(-0.5 * (d / h) ** 2))


@dataclass
class PerturbationSample:
    v: np.ndarray  # G*G, 1 = cell intact
    image: np.ndarray
    y: float
    weight: float


@dataclass
class PerturbationSet:
    samples: list[PerturbationSample]
    maskable: np.ndarray  # G*G bool
    bandwidth: float
    intact_prob: np.ndarray

    @property
    def V(self) -> np.ndarray:
        return np.array([s.v for s in self.samples], dtype=np.float64)

    @property
    def y(self) -> np.ndarray:
        return np.array([s.y for s in self.samples])

    @property
    def weights(self) -> np.ndarray:
        return np.array([s.weight for s in self.samples])


def masked_response(prob: np.ndarray, v: np.ndarray, grid_size: int, T: float) -> float:
    """Sum of sub-threshold probabilities over intact cells."""
    k = cell_size(grid_size, prob.shape[0])
    intact = np.asarray(v, dtype=bool).reshape(grid_size, grid_size).repeat(k, 0).repeat(k, 1)
    return float(np.sum(prob[intact & (prob <= T)]))


def generate_perturbations(
    image, grid_size: int, trigger_footprint, M: int, seed: int, oracle, T: float = 0.5
) -> PerturbationSet:
    """All-intact, one leave-one-out per maskable cell, plus ``M`` random subsets."""
    x = np.asarray(image, dtype=np.float64)
    size = x.shape[0]
    k = cell_size(grid_size, size)
    ncell = grid_size * grid_size
    maskable = ~cells_touching(np.asarray(trigger_footprint, dtype=bool), grid_size).ravel()
    idx = np.flatnonzero(maskable)
    if idx.size == 0:
        raise NoMaskableCells("the trigger covers every cell")
    vs = [np.ones(ncell)]
    for i in idx:
        v = np.ones(ncell)
        v[i] = 0.0
        vs.append(v)
    rng = rng_for(seed, TAG_PERTURB)
    for _ in range(M):
        v = np.ones(ncell)
        for i in idx:
            if rng.random() < 0.5:
                v[i] = 0.0
        vs.append(v)
    V = np.array(vs)
    fill = float(x.mean())
    images = []
    for v in V:
        keep = v.reshape(grid_size, grid_size).repeat(k, 0).repeat(k, 1).astype(bool)
        images.append(np.where(keep, x, fill))
    images = np.array(images)
    probs = np.asarray(oracle.predict_prob(images))
    ys = [masked_response(p, v, grid_size, T) for p, v in zip(probs, V)]

    # masked cells are overwritten by a constant, so squared distances are
    # sums of per-cell contributions
    cell_sq = ((x - fill) ** 2).reshape(grid_size, k, grid_size, k).sum(axis=(1, 3)).ravel()
    masked = 1.0 - V
    d_to_x = np.sqrt(masked @ cell_sq)
    a = masked * cell_sq
    pair_sq = (a.sum(1)[:, None] + a.sum(1)[None, :] - 2.0 * (masked * cell_sq) @ masked.T)
    iu = np.triu_indices(len(V), 1)
    pair = np.sqrt(np.maximum(pair_sq[iu], 0.0))
    nz = pair[pair > 0]
    h = float(np.median(nz)) if nz.size else 1.0
    pis = np.exp(-0.5 * (d_to_x / h) ** 2)
    samples = [PerturbationSample(v, im, y, float(pi)) for v, im, y, pi in zip(V, images, ys, pis)]
    return PerturbationSet(samples, maskable, h, probs[0])


@dataclass
class AttributionFit:
    intercept: float
    weights: np.ndarray
    converged: bool
    iterations: int
    objective: float = float("nan")
    pinned: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def attribution_objective(V, y, pi, w0, W, ridge, beta) -> float:
    r = np.asarray(y) - w0 - np.asarray(V) @ W
    return float(np.sum(pi * r * r) + ridge * np.dot(W, W) + beta * np.sum(np.maximum(0.0, -W)))


def _prox_hinge(u, step_beta):
    # prox of step*beta*max(0, -w): shift negatives up by step*beta, clamp the band to 0
    return np.where(u >= 0.0, u, np.where(u < -step_beta, u + step_beta, 0.0))


def _lipschitz(A, pi, ridge, iters=50):
    # power iteration on the weighted Gram matrix A^T diag(pi) A
    vec = np.ones(A.shape[1]) / np.sqrt(A.shape[1])
    lam = 0.0
    for _ in range(iters):
        u = A.T @ (pi * (A @ vec))
        lam = float(np.linalg.norm(u))
        if lam == 0.0:
            break
        vec = u / lam
    return 2.0 * lam + 2.0 * ridge


def _polish(A, y, pi, theta, ridge, beta):
    """Exact minimizer on the sign pattern of ``theta`` (None if inconsistent)."""
    W = theta[1:]
    nz = np.concatenate([[True], W != 0.0])
    neg = np.concatenate([[False], W < 0.0])
    As = A[:, nz]
    H = As.T @ (pi[:, None] * As)
    reg = np.full(nz.sum(), ridge)
    reg[0] = 0.0
    H[np.diag_indices_from(H)] += reg
    rhs = As.T @ (pi * y) + 0.5 * beta * neg[nz]
    try:
        sol = np.linalg.solve(H, rhs)
    except np.linalg.LinAlgError:
        return None
    out = np.zeros_like(theta)
    out[nz] = sol
    Wn = out[1:]
    if np.any((W > 0) & (Wn <= 0)) or np.any((W < 0) & (Wn >= 0)):
        return None
    return out


def fit_attribution(
    V, y, pi, ridge: float = 1e-8, beta: float = 100.0, max_iters: int = 2000, tol: float = 1e-10
) -> AttributionFit:
    """Minimize sum pi (y - w0 - v.W)^2 + ridge |W|^2 + beta sum max(0, -W).

    Accelerated proximal gradient with step 1/L (L from power iteration); the
    hinge is handled by its closed-form prox. Features that never vary are
    collinear with the intercept and are pinned to 0, their exact optimum.
    A final active-set solve polishes the iterate when its sign pattern is
    consistent. ``tol`` is relative to the scale of A^T diag(pi) y.
    """
    V = np.asarray(V, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    if len(V) < 2 or len(np.unique(V, axis=0)) < 2:
        raise ValueError("need at least two distinct feature vectors")
    nfeat = V.shape[1]
    pinned = np.all(V == V[0], axis=0)
    free = np.flatnonzero(~pinned)
    A = np.hstack([np.ones((len(V), 1)), V[:, free]])
    L = _lipschitz(A, pi, ridge)
    step = 1.0 / L
    reg = np.full(A.shape[1], ridge)
    reg[0] = 0.0
    scale = max(1.0, float(np.max(np.abs(A.T @ (pi * y)))))

    def grad(theta):
        return -2.0 * A.T @ (pi * (y - A @ theta)) + 2.0 * reg * theta

    def prox(u):
        out = u.copy()
        out[1:] = _prox_hinge(u[1:], step * beta)
        return out

    def J(theta):
        return attribution_objective(A[:, 1:], y, pi, theta[0], theta[1:], ridge, beta)

    theta = np.zeros(A.shape[1])
    theta[0] = float(np.sum(pi * y) / np.sum(pi))
    z = theta.copy()
    t = 1.0
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        new = prox(z - step * grad(z))
        gmap = (z - new) / step
        if np.max(np.abs(gmap)) < tol * scale:
            theta = new
            converged = True
            break
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        if J(new) > J(theta):
            # adaptive restart
            z = theta.copy()
            t = 1.0
            continue
        z = new + ((t - 1.0) / t_next) * (new - theta)
        theta = new
        t = t_next
    polished = _polish(A, y, pi, theta, ridge, beta)
    # the exact face solution may tie the iterate up to rounding
    if polished is not None and J(polished) <= J(theta) + 1e-12 * (1.0 + abs(J(theta))):
        theta = polished
        if np.max(np.abs((theta - prox(theta - step * grad(theta))) / step)) < max(tol * scale, 1e-9 * scale):
            converged = True
    if not converged:
        warnings.warn(f"attribution fit did not converge in {max_iters} iterations", NotConverged, stacklevel=2)
    W = np.zeros(nfeat)
    W[free] = theta[1:]
    return AttributionFit(float(theta[0]), W, converged, it, J(theta), pinned)


def _binarize(values: np.ndarray, kappa: float, clip_quantile: float = 1.0) -> tuple[np.ndarray, bool]:
    """Min-max normalize and threshold at ``kappa``.

    With ``clip_quantile`` < 1 values above that quantile are clipped first, so
    a few outlying cells cannot compress the rest of the range.
    """
    values = np.asarray(values, dtype=np.float64)
    if clip_quantile < 1.0:
        values = np.minimum(values, np.quantile(values, clip_quantile))
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-9:
        return np.zeros(values.shape, dtype=np.uint8), True
    norm = (values - lo) / (hi - lo)
    return (norm >= kappa).astype(np.uint8), False


def background_counts(prob, grid_size: int, T: float = 0.5) -> np.ndarray:
    k = cell_size(grid_size, prob.shape[0])
    bg = np.asarray(prob) <= T
    return bg.reshape(grid_size, k, grid_size, k).sum(axis=(1, 3))


def extract_grid(
    fit: AttributionFit, grid_size: int, background_pixel_counts, kappa: float = 0.5, clip_quantile: float = 1.0
):
    """Per-background-pixel attribution, min-max normalized and binarized at ``kappa``."""
    n_bg = np.asarray(background_pixel_counts, dtype=np.float64).ravel()
    W = np.asarray(fit.weights, dtype=np.float64)
    per_px = np.divide(W, n_bg, out=np.zeros_like(W), where=n_bg > 0)
    bits, degenerate = _binarize(per_px, kappa, clip_quantile)
    return bits.reshape(grid_size, grid_size), degenerate


def direct_readout(prob, grid_size: int, T: float = 0.5, kappa: float = 0.5, clip_quantile: float = 1.0):
    """Per-cell mean of sub-threshold probabilities, binarized like :func:`extract_grid`."""
    p = np.asarray(prob, dtype=np.float64)
    k = cell_size(grid_size, p.shape[0])
    below = p <= T
    sums = np.where(below, p, 0.0).reshape(grid_size, k, grid_size, k).sum(axis=(1, 3))
    counts = below.reshape(grid_size, k, grid_size, k).sum(axis=(1, 3))
    means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    bits, degenerate = _binarize(means.ravel(), kappa, clip_quantile)
    return bits.reshape(grid_size, grid_size), degenerate


# --- pipeline -----------------------------------------------------------------


class BlackBox:
    """Query-only view of a model: exposes ``predict_prob`` and nothing else."""

    __slots__ = ("_fn",)

    def __init__(self, params):
        from umark import segnet

        frozen = segnet.copy_params(params)
        self._fn = lambda images: segnet.predict_prob_batch(frozen, images)

    def predict_prob(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        single = x.ndim == 2
        out = self._fn(x[None] if single else x)
        return out[0] if single else out


@dataclass(frozen=True)
class VerifyConfig:
    M: int = 0
    ridge: float = 1e-8
    beta: float = 100.0
    kappa: float = 0.5
    clip_quantile: float = 0.9
    max_iters: int = 2000
    threshold_T: float = 0.5
    probe_count: int = 50
    seed: int = 11


@dataclass
class VerificationReport:
    detector_decision: bool
    detector_score: float
    p_value: float
    extracted_grid: np.ndarray
    match_score: float
    degenerate: bool
    attribution: np.ndarray | None = None
    fit: AttributionFit | None = None
    asr_context: dict | None = None
    metadata: dict = field(default_factory=dict)
    failed: bool = False
    reason: str = ""

    def to_json(self) -> dict:
        return {
            "decision": bool(self.detector_decision),
            "score": float(self.detector_score),
            "p_value": float(self.p_value),
            "grid": grid_bits(self.extracted_grid),
            "match": float(self.match_score),
            "degenerate": bool(self.degenerate),
            "model_sha256": self.metadata.get("model_sha256", ""),
            "config_sha256": self.metadata.get("config_sha256", ""),
            "seed": int(self.metadata.get("seed", 0)),
        }


def verify_model(
    oracle,
    probe_image,
    trigger: TriggerSpec | StampPlan | None,
    detector: DetectorParams,
    grid,
    config: VerifyConfig = VerifyConfig(),
    *,
    asr_context: dict | None = None,
    metadata: dict | None = None,
    probe_seed: int | None = None,
) -> VerificationReport:
    """Stamp the trigger on a benign probe, detect, and (if detected) extract the grid.

    ``oracle`` is used only through ``oracle.predict_prob``. With ``trigger=None``
    the probe is queried as-is (the benign control).
    """
    g = np.asarray(grid)
    G = g.shape[0]
    empty = np.zeros_like(g, dtype=np.uint8)
    p_value = float(asr_context["p_value"]) if asr_context and "p_value" in asr_context else 1.0
    meta = dict(metadata or {})
    try:
        x = np.array(probe_image, dtype=np.float64)
        size = x.shape[0]
        if trigger is None:
            footprint = np.zeros((size, size), dtype=bool)
        else:
            x = apply_trigger(x, trigger)
            footprint = trigger.footprint(size, size)
        prob = np.asarray(oracle.predict_prob(x))
        decision, score = detect(detector, prob)
        seed = config.seed if probe_seed is None else probe_seed
        if not decision:
            # benign path: ordinary leave-one-out explanation, never compared to the grid
            pert = generate_perturbations(x, G, footprint, 0, seed, oracle, config.threshold_T)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", NotConverged)
                fit = fit_attribution(pert.V, pert.y, pert.weights, config.ridge, config.beta, config.max_iters)
            return VerificationReport(
                False, score, p_value, empty, 0.0, False, fit.weights.reshape(G, G), fit, asr_context, meta
            )
        pert = generate_perturbations(x, G, footprint, config.M, seed, oracle, config.threshold_T)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NotConverged)
            fit = fit_attribution(pert.V, pert.y, pert.weights, config.ridge, config.beta, config.max_iters)
        counts = background_counts(pert.intact_prob, G, config.threshold_T)
        bits, degenerate = extract_grid(fit, G, counts, config.kappa, config.clip_quantile)
        return VerificationReport(
            True, score, p_value, bits, match_score(bits, g), degenerate,
            fit.weights.reshape(G, G), fit, asr_context, meta,
        )
    except Exception as exc:  # reported, not raised
        return VerificationReport(False, 0.0, p_value, empty, 0.0, False, None, None, asr_context, meta, True, str(exc))


def contingency(benign_decisions, triggered_decisions) -> list[list[int]]:
    """Rows: true benign / triggered; columns: detector says benign / triggered."""
    b = np.asarray(benign_decisions, dtype=bool)
    t = np.asarray(triggered_decisions, dtype=bool)
    return [[int((~b).sum()), int(b.sum())], [int((~t).sum()), int(t.sum())]]


def contingency_p(table) -> float:
    try:
        return chi_squared_p(table)
    except ValueError:
        return 1.0
