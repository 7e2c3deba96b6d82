"""Paired hue jitter and shared channel permutation for training the view network.

The query/key images share one hue shift; the value image and the expected
output share a different shift plus one channel permutation.  The network
therefore cannot copy colors from its query input and has to move values
from the source view.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

ALL_PERMUTATIONS = ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))


@dataclass(frozen=True)
class TrainingTuple:
    x_q: np.ndarray
    x_k: np.ndarray
    x_v: np.ndarray
    x_q_bar: np.ndarray
    hue_a: float
    hue_b: float
    permutation: tuple[int, int, int]


def shift_hue(img: np.ndarray, shift: float) -> np.ndarray:
    """Rotate hue by ``shift`` turns; saturation and value are preserved."""
    if shift == 0.0:
        return img.copy()
    hsv = rgb_to_hsv(np.clip(img, 0.0, 1.0))
    hsv[..., 0] = np.mod(hsv[..., 0] + shift, 1.0)
    return hsv_to_rgb(hsv).astype(img.dtype)


def hue_jitter(img: np.ndarray, delta: float, rng: np.random.Generator) -> np.ndarray:
    """One uniform draw in [-delta, +delta] turns, applied to the whole image."""
    if not 0.0 <= delta <= 0.5:
        raise ValueError(f"hue jitter delta must lie in [0, 0.5], got {delta}")
    return shift_hue(img, float(rng.uniform(-delta, delta)) if delta > 0 else 0.0)


def sample_channel_permutation(rng: np.random.Generator) -> tuple[int, int, int]:
    return ALL_PERMUTATIONS[int(rng.integers(len(ALL_PERMUTATIONS)))]


def permute_channels(img: np.ndarray, perm) -> np.ndarray:
    return img[..., list(perm)]


def invert_permutation(perm) -> tuple[int, ...]:
    return tuple(int(i) for i in np.argsort(perm))


def make_training_tuple(x_s: np.ndarray, x_t: np.ndarray, delta: float, rng: np.random.Generator,
                        permute: bool = True) -> TrainingTuple:
    if not 0.0 <= delta <= 0.5:
        raise ValueError(f"hue jitter delta must lie in [0, 0.5], got {delta}")
    a = float(rng.uniform(-delta, delta)) if delta > 0 else 0.0
    b = float(rng.uniform(-delta, delta)) if delta > 0 else 0.0
    perm = sample_channel_permutation(rng) if permute else (0, 1, 2)
    return TrainingTuple(
        x_q=shift_hue(x_t, a),
        x_k=shift_hue(x_s, a),
        x_v=permute_channels(shift_hue(x_s, b), perm),
        x_q_bar=permute_channels(shift_hue(x_t, b), perm),
        hue_a=a,
        hue_b=b,
        permutation=perm,
    )
