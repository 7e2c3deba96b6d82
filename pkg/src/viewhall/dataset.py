"""On-disk synchronized multi-pitch dataset: PPM/PGM frames plus a JSON manifest."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from . import labels as label_mod
from . import scene as S

MANIFEST = "manifest.json"
FRAMES_PER_SCENE = 4


class DatasetError(RuntimeError):
    """Missing or inconsistent dataset files."""


def domain_dir(pitch: float) -> str:
    return f"deg{int(round(pitch)):03d}"


# -- image files -------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    try:
        Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PPM")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def write_pgm(path, values: np.ndarray) -> None:
    values = np.asarray(values)
    if values.min(initial=0) < 0 or values.max(initial=0) > 255:
        raise ValueError(f"{path}: PGM values must lie in [0, 255]")
    try:
        Image.fromarray(values.astype(np.uint8), mode="L").save(path, format="PPM")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_ppm(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise DatasetError(f"{path}: expected an RGB PPM, found mode {im.mode}")
        return np.asarray(im, dtype=np.float32) / 255.0


def read_pgm(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise DatasetError(f"{path}: expected an 8-bit PGM, found mode {im.mode}")
        return np.asarray(im, dtype=np.uint8).copy()


# -- scene seeds ----------------------------------------------------------------

def scene_seeds(seed: int, split: str, n_scenes: int) -> list[int]:
    """Train scenes take even offsets and test scenes odd ones, so the two never share a scene."""
    base = int(seed) * (1 << 20)
    parity = {"train": 0, "test": 1}[split]
    return [base + 2 * i + parity for i in range(n_scenes)]


# -- manifest ---------------------------------------------------------------------

@dataclass
class FrameRecord:
    split: str
    frame_id: int
    scene_seed: int
    position: tuple[float, float, float]
    yaw: float
    vfov: float
    source_image: str
    source_labels: str

    def camera(self) -> S.CameraState:
        return S.CameraState(tuple(self.position), self.yaw, 0.0, self.vfov)


@dataclass
class PairRecord:
    split: str
    frame_id: int
    scene_seed: int
    pitch_delta: float
    source_image: str
    source_labels: str
    target_image: str
    target_labels: str


@dataclass
class Manifest:
    root: Path
    seed: int
    height: int
    width: int
    pitches: list[float]
    frames: list[FrameRecord]
    pairs: list[PairRecord]

    def to_json(self) -> str:
        body = {
            "seed": self.seed, "height": self.height, "width": self.width,
            "pitches": self.pitches, "palette": "palette.json",
            "frames": [asdict(f) for f in self.frames],
            "pairs": [asdict(p) for p in self.pairs],
        }
        return json.dumps(body, indent=1, sort_keys=True) + "\n"

    @classmethod
    def load(cls, root) -> "Manifest":
        root = Path(root)
        path = root / MANIFEST
        if not path.is_file():
            raise DatasetError(f"dataset manifest {path} not found")
        try:
            body = json.loads(path.read_text())
            frames = [FrameRecord(**{**f, "position": tuple(f["position"])}) for f in body["frames"]]
            pairs = [PairRecord(**p) for p in body["pairs"]]
            return cls(root, body["seed"], body["height"], body["width"], body["pitches"], frames, pairs)
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DatasetError(f"{path}: malformed manifest ({exc})") from exc

    def select(self, split: str, pitch: float | None = None) -> list[PairRecord]:
        out = [p for p in self.pairs if p.split == split and (pitch is None or p.pitch_delta == pitch)]
        if pitch is not None and not out:
            raise DatasetError(f"no {split} pairs for the {pitch:g} deg domain in {self.root / MANIFEST}")
        return out

    def frames_of(self, split: str) -> list[FrameRecord]:
        return [f for f in self.frames if f.split == split]

    def path(self, rel: str) -> Path:
        return self.root / rel


@dataclass
class Arrays:
    """Stacked arrays for a list of pair records."""

    x_s: np.ndarray
    y_s: np.ndarray
    x_t: np.ndarray
    y_t: np.ndarray


def load_pairs(manifest: Manifest, pairs: Sequence[PairRecord], with_target_labels: bool = True) -> Arrays:
    def stack(fn, key):
        return np.stack([fn(manifest.path(getattr(p, key))) for p in pairs])

    if not pairs:
        raise DatasetError("no pairs selected")
    y_t = stack(read_pgm, "target_labels") if with_target_labels else None
    return Arrays(stack(read_ppm, "source_image"), stack(read_pgm, "source_labels"),
                  stack(read_ppm, "target_image"), y_t)


def load_source(manifest: Manifest, split: str) -> tuple[np.ndarray, np.ndarray]:
    frames = manifest.frames_of(split)
    if not frames:
        raise DatasetError(f"no {split} frames in {manifest.root / MANIFEST}")
    x = np.stack([read_ppm(manifest.path(f.source_image)) for f in frames])
    y = np.stack([read_pgm(manifest.path(f.source_labels)) for f in frames])
    return x, y


# -- building -----------------------------------------------------------------------

def _poses(scene: S.Scene, n: int, seed: int) -> list[S.CameraState]:
    rng = np.random.default_rng([seed, 7])
    return [S.sample_camera(scene, rng) for _ in range(n)]


def build_dataset(seed: int, n_train: int, n_test: int, pitch_list: Iterable[float], h: int, w: int,
                  out_dir, frames_per_scene: int = FRAMES_PER_SCENE) -> Manifest:
    """Render ``n_train``/``n_test`` base frames, each with a target frame per pitch.

    Scenes hold ``frames_per_scene`` poses; test scenes never appear in training.
    """
    pitches = sorted(float(p) for p in pitch_list)
    if not pitches:
        raise ValueError("pitch list is empty")
    for p in pitches:
        if not 0.0 < p <= 90.0:
            raise ValueError(f"target pitch {p} outside (0, 90]")
    if n_train < 1 or n_test < 1:
        raise ValueError("need at least one train and one test frame")
    root = Path(out_dir)
    frames: list[FrameRecord] = []
    pairs: list[PairRecord] = []
    try:
        for split, n in (("train", n_train), ("test", n_test)):
            (root / "source" / split).mkdir(parents=True, exist_ok=True)
            for p in pitches:
                (root / domain_dir(p) / split).mkdir(parents=True, exist_ok=True)
            seeds = scene_seeds(seed, split, math.ceil(n / frames_per_scene))
            fid = 0
            for sseed in seeds:
                scene = S.generate_scene(sseed)
                for cam in _poses(scene, min(frames_per_scene, n - fid), sseed):
                    stem = f"{fid:05d}"
                    xs, ys = S.render(scene, cam, h, w)
                    src_img, src_lab = f"source/{split}/{stem}_rgb.ppm", f"source/{split}/{stem}_lab.pgm"
                    write_ppm(root / src_img, xs)
                    write_pgm(root / src_lab, ys)
                    frames.append(FrameRecord(split, fid, sseed, tuple(float(c) for c in cam.position),
                                              float(cam.yaw), float(cam.vfov), src_img, src_lab))
                    for p in pitches:
                        xt, yt = S.render(scene, cam.with_pitch(math.radians(p)), h, w)
                        d = domain_dir(p)
                        tgt_img, tgt_lab = f"{d}/{split}/{stem}_rgb.ppm", f"{d}/{split}/{stem}_lab.pgm"
                        write_ppm(root / tgt_img, xt)
                        write_pgm(root / tgt_lab, yt)
                        pairs.append(PairRecord(split, fid, sseed, p, src_img, src_lab, tgt_img, tgt_lab))
                    fid += 1
        label_mod.save_palette(root / "palette.json")
        manifest = Manifest(root, int(seed), h, w, pitches, frames, pairs)
        (root / MANIFEST).write_text(manifest.to_json())
    except OSError as exc:
        raise OSError(f"dataset build under {root} failed: {exc}") from exc
    return manifest
