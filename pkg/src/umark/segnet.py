"""Small encoder-decoder segmentation network with hand-written gradients.

Layout is NCHW, float64. Architecture for a (N, 1, 64, 64) batch::

    a1 = relu(conv1(x))                       # 3x3, 1 -> 8
    a2 = relu(conv2(maxpool2(a1)))            # 3x3, 8 -> 16, at 32x32
    g  = global_max(a2)                       # (N, 16) image-level context
    z3 = conv3(concat(up2(a2), a1))           # 3x3, 24 -> 8
         + ctx @ g + up4(pos)                 # context and position terms
    logits = conv4(relu(z3))                  # 1x1, 8 -> 1

``ctx`` and ``pos`` give every pixel access to image-level trigger evidence
and to its own absolute position; the local conv stack alone has an 11x11
receptive field and is translation-equivariant.

A pixel whose eight conv3 channels are all off emits sigmoid(conv4_b) and
passes no gradient back, so it can stay stuck at that value.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from umark import kernels
from umark.rng import TAG_INIT, rng_for

IMAGE_SIZE = 64
POS_SIZE = 16

PARAM_SHAPES: dict[str, tuple[int, ...]] = {
    "conv1_w": (8, 1, 3, 3),
    "conv1_b": (8,),
    "conv2_w": (16, 8, 3, 3),
    "conv2_b": (16,),
    "conv3_w": (8, 24, 3, 3),
    "conv3_b": (8,),
    "conv4_w": (1, 8, 1, 1),
    "conv4_b": (1,),
    "ctx_w": (8, 16),
    "pos": (8, POS_SIZE, POS_SIZE),
}
WEIGHT_NAMES = ("conv1_w", "conv2_w", "conv3_w", "conv4_w", "ctx_w")

ModelParams = dict  # name -> np.ndarray, keys/shapes as PARAM_SHAPES


class ShapeMismatch(ValueError):
    pass


class TraceMismatch(ValueError):
    pass


class ModelFileError(ValueError):
    pass


class BadMagic(ModelFileError):
    pass


class VersionMismatch(ModelFileError):
    pass


class TruncatedFile(ModelFileError):
    pass


def validate_params(params: ModelParams) -> None:
    if set(params) != set(PARAM_SHAPES):
        raise ShapeMismatch(f"expected tensors {sorted(PARAM_SHAPES)}, got {sorted(params)}")
    for name, shape in PARAM_SHAPES.items():
        if params[name].shape != shape:
            raise ShapeMismatch(f"{name}: expected {shape}, got {params[name].shape}")
        if not np.all(np.isfinite(params[name])):
            raise ValueError(f"{name} has non-finite values")


def init_params(seed: int) -> ModelParams:
    """He-uniform weights, zero biases and zero positional table."""
    rng = rng_for(seed, TAG_INIT)
    params = {}
    for name, shape in PARAM_SHAPES.items():
        if name in WEIGHT_NAMES:
            fan_in = int(np.prod(shape[1:]))
            lim = np.sqrt(6.0 / fan_in)
            n = int(np.prod(shape))
            params[name] = np.array([rng.uniform(-lim, lim) for _ in range(n)]).reshape(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def zeros_like(params: ModelParams) -> ModelParams:
    return {k: np.zeros_like(v) for k, v in params.items()}


def copy_params(params: ModelParams) -> ModelParams:
    return {k: v.copy() for k, v in params.items()}


def param_count(params: ModelParams) -> int:
    return sum(v.size for v in params.values())


def params_digest(params: ModelParams) -> str:
    h = hashlib.sha256()
    for name in PARAM_SHAPES:
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class ForwardTrace:
    digest: str
    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    pool_idx: np.ndarray
    p1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    g: np.ndarray
    g_idx: np.ndarray
    cat: np.ndarray
    z3: np.ndarray
    a3: np.ndarray


def _as_batch(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        # (H, W, 1) single image, or (N, H, W) batch
        if x.shape[-1] == 1 and x.shape[0] == IMAGE_SIZE:
            x = x[None].transpose(0, 3, 1, 2)
        else:
            x = x[:, None]
    if x.ndim != 4 or x.shape[1:] != (1, IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeMismatch(f"expected {IMAGE_SIZE}x{IMAGE_SIZE} grayscale input, got {np.shape(images)}")
    return np.ascontiguousarray(x)


def _up(x: np.ndarray, k: int) -> np.ndarray:
    return x.repeat(k, axis=-2).repeat(k, axis=-1)


def _up_grad(g: np.ndarray, k: int) -> np.ndarray:
    *lead, h, w = g.shape
    return g.reshape(*lead, h // k, k, w // k, k).sum(axis=(-3, -1))


def forward_batch(params: ModelParams, images) -> tuple[np.ndarray, ForwardTrace]:
    """Logits (N, 64, 64) and the trace needed by :func:`backward_batch`."""
    x = _as_batch(images)
    n = x.shape[0]
    z1 = kernels.conv3x3_forward(x, params["conv1_w"], params["conv1_b"])
    a1 = np.maximum(z1, 0.0)
    p1, pool_idx = kernels.maxpool2_forward(a1)
    z2 = kernels.conv3x3_forward(p1, params["conv2_w"], params["conv2_b"])
    a2 = np.maximum(z2, 0.0)
    flat = a2.reshape(n, a2.shape[1], -1)
    g_idx = np.argmax(flat, axis=-1)  # first index wins ties
    g = np.take_along_axis(flat, g_idx[..., None], axis=-1)[..., 0]
    cat = np.concatenate([_up(a2, 2), a1], axis=1)
    z3 = kernels.conv3x3_forward(cat, params["conv3_w"], params["conv3_b"])
    z3 += (g @ params["ctx_w"].T)[:, :, None, None]
    z3 += _up(params["pos"], IMAGE_SIZE // POS_SIZE)[None]
    a3 = np.maximum(z3, 0.0)
    logits = np.einsum("nchw,c->nhw", a3, params["conv4_w"][0, :, 0, 0]) + params["conv4_b"][0]
    trace = ForwardTrace(params_digest(params), x, z1, a1, pool_idx, p1, z2, a2, g, g_idx, cat, z3, a3)
    return logits, trace


def backward_batch(params: ModelParams, trace: ForwardTrace, dlogits: np.ndarray) -> ModelParams:
    """Exact parameter gradients given dL/dlogits of shape (N, 64, 64)."""
    if trace.digest != params_digest(params):
        raise TraceMismatch("trace was produced with different parameters")
    dl = np.asarray(dlogits, dtype=np.float64).reshape(trace.a3.shape[0], IMAGE_SIZE, IMAGE_SIZE)
    grads = {}
    grads["conv4_w"] = np.einsum("nchw,nhw->c", trace.a3, dl).reshape(1, 8, 1, 1)
    grads["conv4_b"] = np.array([dl.sum()])
    dz3 = params["conv4_w"][0, :, 0, 0][None, :, None, None] * dl[:, None]
    dz3 *= trace.z3 > 0
    grads["pos"] = _up_grad(dz3.sum(axis=0), IMAGE_SIZE // POS_SIZE)
    dz3_sum = dz3.sum(axis=(2, 3))
    grads["ctx_w"] = dz3_sum.T @ trace.g
    dg = dz3_sum @ params["ctx_w"]
    dcat, grads["conv3_w"], grads["conv3_b"] = kernels.conv3x3_backward(trace.cat, params["conv3_w"], dz3)
    c2 = trace.a2.shape[1]
    da2 = _up_grad(dcat[:, :c2], 2)
    n = da2.shape[0]
    flat = da2.reshape(n, c2, -1)
    rows = np.arange(n)[:, None]
    chans = np.arange(c2)[None, :]
    flat[rows, chans, trace.g_idx] += dg
    dz2 = da2 * (trace.z2 > 0)
    dp1, grads["conv2_w"], grads["conv2_b"] = kernels.conv3x3_backward(trace.p1, params["conv2_w"], dz2)
    da1 = kernels.maxpool2_backward(dp1, trace.pool_idx) + dcat[:, c2:]
    dz1 = da1 * (trace.z1 > 0)
    _, grads["conv1_w"], grads["conv1_b"] = kernels.conv3x3_backward(
        trace.x, params["conv1_w"], dz1, need_dx=False
    )
    return grads


def forward(params: ModelParams, image) -> tuple[np.ndarray, ForwardTrace]:
    """Single-image forward pass; logits are (64, 64)."""
    logits, trace = forward_batch(params, image)
    if logits.shape[0] != 1:
        raise ShapeMismatch("forward() takes one image; use forward_batch")
    return logits[0], trace


def backward(params: ModelParams, trace: ForwardTrace, dlogits: np.ndarray) -> ModelParams:
    return backward_batch(params, trace, np.asarray(dlogits)[None] if np.ndim(dlogits) == 2 else dlogits)


def sigmoid(t):
    t = np.asarray(t, dtype=np.float64)
    # split by sign so neither branch overflows
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def predict_prob_batch(params: ModelParams, images, chunk: int = 32) -> np.ndarray:
    x = _as_batch(images)
    out = []
    for i in range(0, x.shape[0], chunk):
        logits, _ = forward_batch(params, x[i:i + chunk])
        out.append(sigmoid(logits))
    return np.concatenate(out) if out else np.zeros((0, IMAGE_SIZE, IMAGE_SIZE))


def predict_prob(params: ModelParams, image) -> np.ndarray:
    return predict_prob_batch(params, image)[0]


def threshold(prob, T: float = 0.5) -> np.ndarray:
    """Binary mask of ``prob > T`` (strict)."""
    if not 0.0 < T < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return (np.asarray(prob) > T).astype(np.uint8)


# --- model file -----------------------------------------------------------

MAGIC = b"SMK1"
VERSION = 1


def dumps_params(params: ModelParams) -> bytes:
    validate_params(params)
    parts = [MAGIC, struct.pack("<II", VERSION, len(PARAM_SHAPES))]
    for name, shape in PARAM_SHAPES.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
        parts.append(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return b"".join(parts)


def loads_params(data: bytes) -> ModelParams:
    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedFile(f"needed {n} bytes at offset {pos}, file has {len(data)}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}")
    pos = 4
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise VersionMismatch(f"model file version {version}, expected {VERSION}")
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
    if pos != len(data):
        raise ModelFileError(f"{len(data) - pos} trailing bytes")
    validate_params(params)
    return params


def save_params(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_params(params))


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        return loads_params(fh.read())
