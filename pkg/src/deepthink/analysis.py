"""Filter-reuse statistics and renderings of a model's thought process."""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor import Tensor, softmax

DEFAULT_THRESHOLD = 0.2
HIST_BINS = 10


@dataclass
class ReuseMatrix:
    counts: np.ndarray  # (N, C, T) number of strictly positive entries
    values: np.ndarray  # (N, C, T) counts / max over T, 0 where a channel never fires

    @property
    def active(self) -> np.ndarray:
        """(N, C) mask of image/channel pairs that fire at least once."""
        return self.counts.max(axis=2) > 0

    def off_peak(self) -> np.ndarray:
        """(N, C, T-1) relative activity with each pair's most active iteration removed.

        When several iterations tie for the maximum only the first is removed.
        """
        n, c, t = self.values.shape
        keep = np.ones_like(self.values, dtype=bool)
        peak = self.values.argmax(axis=2)
        keep[np.arange(n)[:, None], np.arange(c)[None, :], peak] = False
        return self.values[keep].reshape(n, c, t - 1)

    def reuse_fraction(self, threshold: float = DEFAULT_THRESHOLD) -> float:
        """Share of active pairs whose least active non-peak iteration reaches ``threshold``."""
        active = self.active
        if not active.any():
            return 0.0
        low = self.off_peak().min(axis=2)
        return float((low[active] >= threshold).mean())

    def histogram(self, bins: int = HIST_BINS) -> tuple[np.ndarray, np.ndarray]:
        """Counts of off-peak relative activity over active pairs, on [0, 1]."""
        vals = self.off_peak()[self.active].ravel()
        return np.histogram(vals, bins=bins, range=(0.0, 1.0))


def reuse_from_counts(counts) -> ReuseMatrix:
    counts = np.asarray(counts)
    if counts.ndim != 3 or counts.shape[2] < 2:
        raise ValueError(f"counts must have shape (N, C, T) with T >= 2, got {counts.shape}")
    if (counts < 0).any():
        raise ValueError("activation counts must be non-negative")
    peak = counts.max(axis=2, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(peak > 0, counts / np.maximum(peak, 1), 0.0)
    return ReuseMatrix(counts.astype(np.int64), values)


@dataclass
class ReuseResult:
    matrix: ReuseMatrix
    threshold: float
    fraction: float
    hist_counts: np.ndarray
    hist_edges: np.ndarray


def activation_counts(model, images, n_iters: int) -> np.ndarray:
    """Positive entries per channel leaving the internal module at each iteration."""
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
    states = model.states(x, n_iters)
    per_iter = []
    for h in states:
        d = h.data
        axes = tuple(range(2, d.ndim))
        per_iter.append((d > 0).sum(axis=axes) if axes else (d > 0).astype(np.int64))
    return np.stack(per_iter, axis=2)


def activation_reuse(model, images, n_iters: int, threshold: float = DEFAULT_THRESHOLD) -> ReuseResult:
    if not getattr(model, "recurrent", False):
        raise ValueError("filter reuse is only defined for recurrent (weight-shared) models")
    if n_iters < 2:
        raise ValueError("filter reuse needs at least two iterations")
    if len(images) == 0:
        raise ValueError("image batch is empty")
    matrix = reuse_from_counts(activation_counts(model, images, n_iters))
    counts, edges = matrix.histogram()
    return ReuseResult(matrix, threshold, matrix.reuse_fraction(threshold), counts, edges)


def write_reuse_histogram_csv(result: ReuseResult, path) -> None:
    with open(path, "w") as fh:
        fh.write("bin_low,bin_high,count\n")
        for lo, hi, c in zip(result.hist_edges[:-1], result.hist_edges[1:], result.hist_counts):
            fh.write(f"{lo:.2f},{hi:.2f},{int(c)}\n")


# ---------------------------------------------------------------------------
# colormap and image files


def colormap(prob) -> np.ndarray:
    """Map probabilities in [0, 1] to RGB uint8.

    With ``q = round(255 * p)``: red is ``q``, green is ``q*q/255`` and blue is
    ``255 - q``. Low confidence is blue, high confidence yellow-white, and
    ``p`` is recovered from the red channel to within 1/255.
    """
    p = np.clip(np.asarray(prob, dtype=np.float64), 0.0, 1.0)
    q = np.rint(p * 255).astype(np.int64)
    rgb = np.stack([q, (q * q + 127) // 255, 255 - q], axis=-1)
    return rgb.astype(np.uint8)


def decode_colormap(rgb) -> np.ndarray:
    return np.asarray(rgb)[..., 0].astype(np.float64) / 255.0


def ppm_bytes(rgb: np.ndarray) -> bytes:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got {rgb.shape}")
    h, w = rgb.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes()


def parse_ppm(buf: bytes) -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        tokens.append(buf[start:pos])
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise ValueError("only binary 8-bit PPM (P6, maxval 255) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    body = buf[pos : pos + w * h * 3]
    if len(body) != w * h * 3:
        raise ValueError(f"PPM body truncated at byte {pos + len(body)}")
    return np.frombuffer(body, np.uint8).reshape(h, w, 3).copy()


def png_bytes(rgb: np.ndarray) -> bytes:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got {rgb.shape}")
    h, w = rgb.shape[:2]
    raw = b"".join(b"\x00" + rgb[r].tobytes() for r in range(h))

    def chunk(tag: bytes, data: bytes) -> bytes:
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data))

    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", header) + chunk(b"IDAT", zlib.compress(raw)) + chunk(b"IEND", b"")


def parse_png(buf: bytes) -> np.ndarray:
    """Decode the PNGs written by :func:`png_bytes` (8-bit RGB, filter type 0)."""
    if buf[:8] != b"\x89PNG\r\n\x1a\n":
        raise ValueError("not a PNG file")
    pos, data, w, h = 8, b"", 0, 0
    while pos < len(buf):
        (length,) = struct.unpack_from(">I", buf, pos)
        tag = buf[pos + 4 : pos + 8]
        body = buf[pos + 8 : pos + 8 + length]
        if tag == b"IHDR":
            w, h, depth, ctype = struct.unpack_from(">IIBB", body)
            if depth != 8 or ctype != 2:
                raise ValueError("only 8-bit RGB PNG is supported")
        elif tag == b"IDAT":
            data += body
        pos += 12 + length
    raw = np.frombuffer(zlib.decompress(data), np.uint8).reshape(h, 1 + w * 3)
    if (raw[:, 0] != 0).any():
        raise ValueError("only unfiltered scanlines are supported")
    return raw[:, 1:].reshape(h, w, 3).copy()


IMAGE_FORMATS = {"ppm": (ppm_bytes, parse_ppm), "png": (png_bytes, parse_png)}


def write_image(rgb: np.ndarray, path) -> None:
    path = Path(path)
    fmt = path.suffix.lstrip(".").lower()
    if fmt not in IMAGE_FORMATS:
        raise ValueError(f"unsupported image format {fmt!r}; use .ppm or .png")
    path.write_bytes(IMAGE_FORMATS[fmt][0](rgb))


def read_image(path) -> np.ndarray:
    path = Path(path)
    fmt = path.suffix.lstrip(".").lower()
    if fmt not in IMAGE_FORMATS:
        raise ValueError(f"unsupported image format {fmt!r}; use .ppm or .png")
    return IMAGE_FORMATS[fmt][1](path.read_bytes())


# ---------------------------------------------------------------------------
# thought renderings


def path_probabilities(model, image: np.ndarray, n_iters: int) -> np.ndarray:
    """(T, H, W) probability of the path class after each iteration."""
    x = np.ascontiguousarray(image.transpose(2, 0, 1)[None], dtype=np.float32) / np.float32(255)
    outs = model.forward_iterations(Tensor(x), n_iters)
    return np.stack([softmax(o.data[0].astype(np.float64), axis=0)[1] for o in outs])


def render_thoughts(model, sample, n_iters: int, out_dir, fmt: str = "ppm",
                    probs: Optional[np.ndarray] = None) -> list[Path]:
    """Write ``iter_001.<fmt>`` ... plus ``input`` and ``target`` images to ``out_dir``.

    ``probs`` may be given directly (shape (T, H, W)) to render scripted outputs.
    """
    if fmt not in IMAGE_FORMATS:
        raise ValueError(f"unsupported image format {fmt!r}; use 'ppm' or 'png'")
    if probs is None:
        family = getattr(getattr(model, "spec", None), "family", None)
        if family != "maze_residual":
            raise ValueError(f"thought renderings need a maze model, got family {family!r}")
        probs = path_probabilities(model, sample.image, n_iters)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    written = []
    for t, p in enumerate(probs, start=1):
        path = out / f"iter_{t:03d}.{fmt}"
        write_image(colormap(p), path)
        written.append(path)
    for name, img in (("input", sample.image), ("target", np.repeat(sample.target[..., None] * 255, 3, axis=2))):
        path = out / f"{name}.{fmt}"
        write_image(img.astype(np.uint8), path)
        written.append(path)
    return written
