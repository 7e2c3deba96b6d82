"""Small encoder-decoder segmentation network, source training and soft-label adaptation."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import tensor as T
from .autodiff.checkpoint import load as load_checkpoint, save as save_checkpoint
from .autodiff.optim import Adam
from .autodiff.tensor import NonFiniteError, ShapeError, Tensor, no_grad
from .labels import check_simplex, entropy_map
from .nn import Conv2d, ConvTranspose2d, LayerNorm2d, Module
from .scene import NUM_CLASSES
from .vtn import TrainingDiverged, to_nchw

logger = logging.getLogger(__name__)


@dataclass
class SegConfig:
    channels: tuple[int, ...] = (16, 24, 32, 48)
    n_classes: int = NUM_CLASSES
    # source-domain training
    lr: float = 2e-3
    batch_size: int = 8
    epochs: int = 30
    # target adaptation
    adapt_lr: float = 1e-3
    adapt_batch_size: int = 6
    adapt_epochs: int = 10
    adapt_milestones: tuple[int, ...] = (6, 8)
    entropy_threshold: float | None = None
    leaky_slope: float = 0.2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.adapt_milestones = tuple(int(m) for m in self.adapt_milestones)
        if len(self.channels) != 4:
            raise ValueError("segmentation network uses exactly four down blocks")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["adapt_milestones"] = list(self.adapt_milestones)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SegConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown segmentation config keys: {sorted(unknown)}")
        return cls(**data)


def default_seg_config(profile: str = "desk") -> SegConfig:
    if profile == "paper":
        return SegConfig(adapt_lr=7.5e-5, adapt_batch_size=6, adapt_epochs=25, adapt_milestones=(10, 15))
    if profile == "desk":
        return SegConfig()
    raise ValueError(f"unknown profile {profile!r} (expected 'paper' or 'desk')")


def lr_at_epoch(base_lr: float, epoch: int, milestones: Sequence[int]) -> float:
    """Step schedule: halve after each milestone epoch has been completed."""
    return base_lr * 0.5 ** sum(epoch >= m for m in milestones)


class _Block(Module):
    def __init__(self, cin: int, cout: int, rng, stride: int, alpha: float):
        k, pad = (4, 1) if stride == 2 else (3, 1)
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, pad=pad)
        self.norm = LayerNorm2d(cout)
        self.alpha = alpha

    def forward(self, x: Tensor) -> Tensor:
        return T.leaky_relu(self.norm(self.conv(x)), self.alpha)


class SegNet(Module):
    """Four down blocks (the first at full resolution), four up blocks with concatenated skips."""

    def __init__(self, config: SegConfig, rng: np.random.Generator):
        self.config = config
        c, a = config.channels, config.leaky_slope
        self.down = [_Block(3, c[0], rng, 1, a)] + [_Block(c[i - 1], c[i], rng, 2, a) for i in range(1, 4)]
        self.ups = [ConvTranspose2d(c[i], c[i - 1], rng) for i in range(3, 0, -1)]
        self.up = [_Block(2 * c[i - 1], c[i - 1], rng, 1, a) for i in range(3, 0, -1)]
        self.up.append(_Block(c[0], c[0], rng, 1, a))
        self.head = Conv2d(c[0], config.n_classes, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"segmentation input must be Bx3xHxW, got {x.shape}")
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise ShapeError(f"image size {x.shape[2]}x{x.shape[3]} must be divisible by 8")
        skips = []
        for blk in self.down:
            x = blk(x)
            skips.append(x)
        for up, blk, skip in zip(self.ups, self.up[:3], reversed(skips[:3])):
            x = blk(T.concat([T.leaky_relu(up(x), self.config.leaky_slope), skip], axis=1))
        return self.head(self.up[3](x))


def seg_forward(model: SegNet, img: np.ndarray) -> np.ndarray:
    """Logits H×W×C (or B×H×W×C for a batch)."""
    squeeze = np.asarray(img).ndim == 3
    with no_grad():
        out = model(to_nchw(img)).data.transpose(0, 2, 3, 1)
    return out[0] if squeeze else out


def predict(model: SegNet, images: np.ndarray, batch: int = 32) -> np.ndarray:
    images = np.asarray(images)
    out = [seg_forward(model, images[i : i + batch]).argmax(-1) for i in range(0, len(images), batch)]
    return np.concatenate(out).astype(np.uint8)


def _one_hot(labels: np.ndarray, n: int) -> np.ndarray:
    return np.eye(n, dtype=np.float32)[labels]


def _fit(model: SegNet, images: np.ndarray, targets: np.ndarray, weights: np.ndarray | None,
         lr: float, milestones: Sequence[int], batch_size: int, epochs: int, rng: np.random.Generator,
         on_epoch: Callable[[dict], None] | None, tag: str) -> list[dict]:
    """Mean soft cross-entropy (targets B×H×W×C on the simplex), optional per-pixel keep mask."""
    opt = Adam(model.parameters(), lr=lr)
    stats = []
    n = len(images)
    for epoch in range(epochs):
        opt.lr = lr_at_epoch(lr, epoch, milestones)
        order = rng.permutation(n)
        losses = []
        for it, start in enumerate(range(0, n, batch_size)):
            idx = order[start : start + batch_size]
            tgt = targets[idx]
            try:
                logits = T.transpose(model(to_nchw(images[idx])), (0, 2, 3, 1))
                if weights is None:
                    loss = T.soft_cross_entropy(tgt, logits, axis=-1)
                else:
                    # masked pixels get a zero target; the normalization counts only kept pixels
                    keep = weights[idx][..., None].astype(np.float32)
                    n_keep = max(float(keep.sum()), 1.0)
                    masked = T.mul(T.log_softmax(logits, axis=-1), Tensor(tgt * keep))
                    loss = T.mul(T.tsum(masked), -1.0 / n_keep)
                opt.zero_grad()
                loss.backward()
            except NonFiniteError as exc:
                raise TrainingDiverged(f"{tag}: non-finite value at epoch {epoch} iteration {it}: {exc}") from exc
            opt.step()
            losses.append(float(loss.data))
        record = {"epoch": epoch, "lr": opt.lr, "mean_loss": float(np.mean(losses))}
        stats.append(record)
        logger.info("%s epoch %d loss %.4f", tag, epoch, record["mean_loss"])
        if on_epoch is not None:
            on_epoch(record)
    return stats


def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    a, b = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def train_source(config: SegConfig, images: np.ndarray, labels: np.ndarray, seed: int,
                 on_epoch: Callable[[dict], None] | None = None) -> tuple[SegNet, list[dict]]:
    """Hard-label cross-entropy on the labeled source domain."""
    images, labels = np.asarray(images, dtype=np.float32), np.asarray(labels)
    if len(images) == 0:
        raise ValueError("source training set is empty")
    if labels.shape != images.shape[:3]:
        raise ShapeError(f"labels {labels.shape} do not match images {images.shape}")
    init_rng, data_rng = _rngs(seed)
    model = SegNet(config, init_rng)
    stats = _fit(model, images, _one_hot(labels, config.n_classes), None, config.lr, (),
                 config.batch_size, config.epochs, data_rng, on_epoch, "source")
    return model, stats


def adapt_target(source: SegNet, images: np.ndarray, soft_labels: np.ndarray, config: SegConfig, seed: int,
                 on_epoch: Callable[[dict], None] | None = None,
                 image_domain: int | None = None, label_domain: int | None = None) -> tuple[SegNet, list[dict]]:
    """Fine-tune a copy of ``source`` on target images with soft labels.

    Only target images and their hallucinated labels come in; target ground
    truth is never an argument here.
    """
    if image_domain is not None and label_domain is not None and image_domain != label_domain:
        raise ValueError(f"soft labels belong to the {label_domain} deg domain, images to {image_domain} deg")
    images = np.asarray(images, dtype=np.float32)
    soft_labels = np.asarray(soft_labels, dtype=np.float32)
    if soft_labels.shape[:3] != images.shape[:3] or soft_labels.shape[-1] != config.n_classes:
        raise ShapeError(f"soft labels {soft_labels.shape} do not match images {images.shape}")
    if not check_simplex(soft_labels):
        raise ValueError("soft labels are not per-pixel distributions")
    model = SegNet(source.config, np.random.default_rng(0))
    model.load_state_dict(source.state_dict())
    keep = None
    if config.entropy_threshold is not None:
        keep = entropy_map(soft_labels) <= config.entropy_threshold
    _, data_rng = _rngs(seed)
    stats = _fit(model, images, soft_labels, keep, config.adapt_lr, config.adapt_milestones,
                 config.adapt_batch_size, config.adapt_epochs, data_rng, on_epoch, "adapt")
    return model, stats


def save_model(model: SegNet, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(json.dumps(model.config.to_dict(), indent=2, sort_keys=True) + "\n")
    save_checkpoint(directory / "weights.adla", model.state_dict())


def load_model(directory) -> SegNet:
    directory = Path(directory)
    config = SegConfig.from_dict(json.loads((directory / "config.json").read_text()))
    model = SegNet(config, np.random.default_rng(0))
    model.load_state_dict(load_checkpoint(directory / "weights.adla"))
    return model
