"""Minimal Netpbm I/O: binary PGM (P5, 8-bit) and ASCII PBM (P1)."""

from __future__ import annotations

import numpy as np


def _tokens(data: bytes):
    """Yield header tokens, skipping '#' comments; returns offset after the last one."""
    pos = 0
    n = len(data)
    while True:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            return
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        yield data[start:pos], pos


def write_pgm(path, image) -> None:
    """Write a [0,1] float image as 8-bit binary PGM (value = round(255 v))."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[..., 0]
    h, w = img.shape
    px = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(px.tobytes())


def read_pgm(path) -> np.ndarray:
    data = open(path, "rb").read()
    toks = _tokens(data)
    magic, _ = next(toks)
    if magic != b"P5":
        raise ValueError(f"not a binary PGM: {magic!r}")
    w = int(next(toks)[0])
    h = int(next(toks)[0])
    maxval_tok, pos = next(toks)
    maxval = int(maxval_tok)
    if maxval > 255:
        raise ValueError("only 8-bit PGM is supported")
    raw = data[pos + 1:pos + 1 + w * h]
    if len(raw) != w * h:
        raise ValueError("truncated PGM payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.float64) / maxval


def write_pbm(path, bits) -> None:
    """Write a binary array as ASCII PBM; 1 = black."""
    arr = np.asarray(bits).astype(np.uint8)
    h, w = arr.shape
    lines = [b"P1", b"%d %d" % (w, h)]
    lines += [b" ".join(b"1" if v else b"0" for v in row) for row in arr]
    with open(path, "wb") as fh:
        fh.write(b"\n".join(lines) + b"\n")


def read_pbm(path) -> np.ndarray:
    data = open(path, "rb").read()
    toks = _tokens(data)
    magic, _ = next(toks)
    if magic != b"P1":
        raise ValueError(f"not an ASCII PBM: {magic!r}")
    w = int(next(toks)[0])
    h = int(next(toks)[0])
    bits = []
    for tok, _ in toks:
        # P1 allows digits without separators
        bits.extend(int(ch) for ch in tok.decode("ascii"))
    if len(bits) < w * h:
        raise ValueError("truncated PBM payload")
    arr = np.array(bits[: w * h], dtype=np.uint8).reshape(h, w)
    if arr.max(initial=0) > 1:
        raise ValueError("PBM values must be 0 or 1")
    return arr
