"""Turning hallucinated appearance into target-view labels.

Two decoders: nearest-palette-color lookup on a hallucinated semantic image,
and functional decoding, which pushes one indicator image per class through
the view network and takes a per-pixel softmax over the class responses.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff.checkpoint import FormatError
from .scene import NUM_CLASSES

# Muted corners of the RGB cube: pairwise distance 0.8 or more, and closed
# under channel permutation.
PALETTE = np.array([
    [0.9, 0.1, 0.1],
    [0.1, 0.9, 0.1],
    [0.1, 0.1, 0.9],
    [0.9, 0.9, 0.1],
    [0.9, 0.1, 0.9],
    [0.1, 0.9, 0.9],
], dtype=np.float32)

MIN_PALETTE_DISTANCE = 0.3
SOFT_MAGIC = b"SLBL"

Operator = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def validate_palette(palette: np.ndarray) -> np.ndarray:
    palette = np.asarray(palette, dtype=np.float32)
    if palette.ndim != 2 or palette.shape[1] != 3:
        raise ValueError(f"palette must be C×3, got {palette.shape}")
    if np.any(palette < 0) or np.any(palette > 1):
        raise ValueError("palette entries must lie in [0, 1]")
    d = np.linalg.norm(palette[:, None] - palette[None], axis=-1)
    d[np.diag_indices(len(palette))] = np.inf
    if d.min() < MIN_PALETTE_DISTANCE:
        raise ValueError(f"palette colors too close: min distance {d.min():.3f} < {MIN_PALETTE_DISTANCE}")
    return palette


def save_palette(path, palette: np.ndarray = PALETTE) -> None:
    Path(path).write_text(json.dumps([[round(float(c), 6) for c in row] for row in palette]) + "\n")


def load_palette(path) -> np.ndarray:
    return validate_palette(np.array(json.loads(Path(path).read_text()), dtype=np.float32))


def colorize(labels: np.ndarray, palette: np.ndarray = PALETTE) -> np.ndarray:
    """Semantic image: palette color of each pixel's class."""
    return np.asarray(palette, dtype=np.float32)[np.asarray(labels, dtype=np.int64)]


def nn_decode(img: np.ndarray, palette: np.ndarray = PALETTE) -> np.ndarray:
    """Nearest palette entry per pixel (Euclidean RGB); ties go to the lowest class id."""
    palette = validate_palette(palette)
    d = np.sum((np.asarray(img, dtype=np.float64)[..., None, :] - palette.astype(np.float64)) ** 2, axis=-1)
    return np.argmin(d, axis=-1).astype(np.uint8)


def indicator_image(labels: np.ndarray, c: int, n_classes: int = NUM_CLASSES) -> np.ndarray:
    """(1,1,1) where the label is ``c``, (0,0,0) elsewhere."""
    if not 0 <= c < n_classes:
        raise ValueError(f"class {c} outside [0, {n_classes})")
    mask = (np.asarray(labels) == c).astype(np.float32)
    return np.repeat(mask[..., None], 3, axis=-1)


def softmax_last(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def class_responses(operator: Operator, labels_s: np.ndarray, x_s: np.ndarray, x_t: np.ndarray,
                    n_classes: int = NUM_CLASSES) -> np.ndarray:
    """Channel-mean of operator(indicator_c; x_s, x_t) for every class, stacked on the last axis.

    Inputs may be single frames (H×W) or batches (B×H×W); all C passes of a
    batch go through the operator in one call.
    """
    labels_s = np.asarray(labels_s)
    single = labels_s.ndim == 2
    if single:
        labels_s, x_s, x_t = labels_s[None], np.asarray(x_s)[None], np.asarray(x_t)[None]
    b, h, w = labels_s.shape
    values = np.stack([indicator_image(labels_s, c, n_classes) for c in range(n_classes)], axis=1)
    values = values.reshape(b * n_classes, h, w, 3)
    rep_s = np.repeat(np.asarray(x_s), n_classes, axis=0)
    rep_t = np.repeat(np.asarray(x_t), n_classes, axis=0)
    out = np.asarray(operator(values, rep_s, rep_t), dtype=np.float64)
    resp = out.reshape(b, n_classes, h, w, 3).mean(axis=-1).transpose(0, 2, 3, 1)
    return resp[0] if single else resp


def functional_decode(operator: Operator, labels_s: np.ndarray, x_s: np.ndarray, x_t: np.ndarray,
                      temperature: float = 1.0, n_classes: int = NUM_CLASSES) -> np.ndarray:
    """Soft target labels ``softmax(response / T)`` over classes, shape (..., H, W, C)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    resp = class_responses(operator, labels_s, x_s, x_t, n_classes)
    return softmax_last(resp / temperature).astype(np.float32)


def entropy_map(soft: np.ndarray) -> np.ndarray:
    """Per-pixel Shannon entropy in nats."""
    p = np.asarray(soft, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    return -plogp.sum(axis=-1)


def check_simplex(soft: np.ndarray, tol: float = 1e-5) -> bool:
    soft = np.asarray(soft)
    return bool(np.all(soft >= -tol) and np.all(np.abs(soft.sum(axis=-1) - 1.0) <= tol))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_soft_labels(path, soft: np.ndarray) -> None:
    soft = np.asarray(soft)
    if soft.ndim != 3:
        raise ValueError(f"soft labels must be H×W×C, got {soft.shape}")
    h, w, c = soft.shape
    Path(path).write_bytes(SOFT_MAGIC + struct.pack("<3I", h, w, c) + np.ascontiguousarray(soft, "<f4").tobytes())


def load_soft_labels(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != SOFT_MAGIC:
        raise FormatError(f"{path}: not a soft-label file")
    h, w, c = struct.unpack_from("<3I", blob, 4)
    n = h * w * c
    if len(blob) != 16 + 4 * n:
        raise FormatError(f"{path}: expected {16 + 4 * n} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", offset=16).astype(np.float32).reshape(h, w, c)


def entropy_to_pgm_values(entropy: np.ndarray, n_classes: int = NUM_CLASSES) -> np.ndarray:
    """Scale [0, ln C] to [0, 255] for an 8-bit uncertainty image."""
    scaled = np.clip(entropy / np.log(n_classes), 0.0, 1.0) * 255.0
    return np.rint(scaled).astype(np.uint8)
