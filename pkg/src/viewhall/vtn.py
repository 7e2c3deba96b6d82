"""View-transformation network psi(x_V; x_K, x_Q).

Queries come from the target color image, keys from the source color
image, values from whatever appearance should be moved into the target view
(the source color image while training, a source semantic image or class
indicator image afterwards).  Every layer's values are decoded by one shared
decoder; the last decoding is the network output.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import augment
from .autodiff import tensor as T
from .autodiff.checkpoint import load as load_checkpoint, save as save_checkpoint
from .autodiff.optim import Adam
from .autodiff.tensor import NonFiniteError, ShapeError, Tensor, no_grad
from .nn import AttentionLayer, Decoder, Encoder, Module, attach_positions, lifted_channels

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite."""


@dataclass
class VTNConfig:
    layers: int = 2
    enc_channels: int = 16
    downsample: int = 4
    positional: str = "modulate"       # or "concat"
    height: int = 32
    width: int = 48
    lambda_schedule: str = "paper"     # or "uniform"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 8
    epochs: int = 10
    hue_delta: float = 0.15
    permute: bool = True
    use_attention: bool = True
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one attention layer")
        if self.height % self.downsample or self.width % self.downsample:
            raise ValueError(f"image size {self.height}x{self.width} not divisible by {self.downsample}")

    @property
    def d_k(self) -> int:
        return lifted_channels(self.enc_channels, self.positional)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "VTNConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown VTN config keys: {sorted(unknown)}")
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "VTNConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_config(profile: str = "desk") -> VTNConfig:
    if profile == "paper":
        return VTNConfig(layers=8, enc_channels=64, downsample=4, height=384, width=512,
                         lr=1e-4, beta1=0.9, beta2=0.999, batch_size=16, epochs=10)
    if profile == "desk":
        return VTNConfig(layers=2, height=32, width=48, batch_size=8, epochs=24)
    raise ValueError(f"unknown profile {profile!r} (expected 'paper' or 'desk')")


def layer_weights(n_layers: int, schedule: str = "paper") -> np.ndarray:
    """Per-layer loss weights; ``paper`` is 2^-(L-l) for l = 1..L."""
    if schedule == "paper":
        return np.array([2.0 ** -(n_layers - l) for l in range(1, n_layers + 1)])
    if schedule == "uniform":
        return np.ones(n_layers)
    raise ValueError(f"unknown lambda schedule {schedule!r}")


class ViewTransformNet(Module):
    def __init__(self, config: VTNConfig, rng: np.random.Generator):
        self.config = config
        c, a = config.enc_channels, config.leaky_slope
        self.enc_q = Encoder(3, c, config.downsample, rng, a)
        self.enc_k = Encoder(3, c, config.downsample, rng, a)
        self.enc_v = Encoder(3, c, config.downsample, rng, a)
        self.layers = [AttentionLayer(config.d_k, c, rng, config.use_attention, a) for _ in range(config.layers)]
        self.decoder = Decoder(c, config.downsample, rng, 3, a)

    def lift(self, x_v: Tensor, x_k: Tensor, x_q: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        mode = self.config.positional
        q = attach_positions(self.enc_q(x_q), mode)
        k = attach_positions(self.enc_k(x_k), mode)
        return q, k, self.enc_v(x_v)

    def forward(self, x_v: Tensor, x_k: Tensor, x_q: Tensor, record: list | None = None,
                decode_all: bool = True) -> list[Tensor]:
        """Decoded images for every layer (NCHW).  ``record`` collects attention weights per layer."""
        for name, x in (("x_V", x_v), ("x_K", x_k), ("x_Q", x_q)):
            if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (self.config.height, self.config.width):
                raise ShapeError(f"{name} must be Bx3x{self.config.height}x{self.config.width}, got {x.shape}")
        q, k, v = self.lift(x_v, x_k, x_q)
        outputs = []
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            if i < n - 1:
                q_next, k_next, v = layer(q, k, v, record)
                q, k = q_next, k_next
            else:
                # the final layer's Q/K updates feed nothing downstream
                v_hat = layer.transport(q, k, layer.w_value(v), record)
                v_bar = layer.ffn_v1(v_hat) + v
                v = layer.ffn_v2(v_bar) + v_bar
            if decode_all or i == n - 1:
                outputs.append(self.decoder(v))
        return outputs


def to_nchw(images) -> Tensor:
    arr = np.asarray(images, dtype=T.default_dtype())
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_hwc(t: Tensor) -> np.ndarray:
    return t.data.transpose(0, 2, 3, 1)


def vtn_loss(outputs: Sequence[Tensor], target, schedule: str = "paper") -> tuple[Tensor, list[float]]:
    """Weighted sum of per-layer mean-L1 errors against the expected output."""
    weights = layer_weights(len(outputs), schedule)
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    per_layer = [T.l1_loss(o, target) for o in outputs]
    total = per_layer[0] * float(weights[0])
    for w, term in zip(weights[1:], per_layer[1:]):
        total = total + term * float(w)
    return total, [float(p.data) for p in per_layer]


def vtn_forward(model: ViewTransformNet, x_v: np.ndarray, x_k: np.ndarray, x_q: np.ndarray) -> list[np.ndarray]:
    """H×W×3 (or batched) arrays in, list of L H×W×3 arrays out."""
    squeeze = np.asarray(x_v).ndim == 3
    with no_grad():
        outs = model(to_nchw(x_v), to_nchw(x_k), to_nchw(x_q))
    res = [to_hwc(o) for o in outs]
    return [r[0] for r in res] if squeeze else res


def hallucinate(model: ViewTransformNet, values: np.ndarray, x_s: np.ndarray, x_t: np.ndarray,
                batch: int = 16) -> np.ndarray:
    """Final-layer output of psi(values; x_s, x_t) for batched H×W×3 inputs."""
    values, x_s, x_t = np.asarray(values), np.asarray(x_s), np.asarray(x_t)
    squeeze = values.ndim == 3
    if squeeze:
        values, x_s, x_t = values[None], x_s[None], x_t[None]
    out = []
    with no_grad():
        for i in range(0, len(values), batch):
            sl = slice(i, i + batch)
            o = model(to_nchw(values[sl]), to_nchw(x_s[sl]), to_nchw(x_t[sl]), decode_all=False)[-1]
            out.append(to_hwc(o))
    res = np.concatenate(out, axis=0)
    return res[0] if squeeze else res


def hallucinate_semantic(model: ViewTransformNet, y_s_image: np.ndarray, x_s: np.ndarray,
                         x_t: np.ndarray) -> np.ndarray:
    """Zero-shot: the palette rendering of the source labels goes in as the value image."""
    return hallucinate(model, y_s_image, x_s, x_t)


def train_vtn(config: VTNConfig, pairs: Sequence[tuple[np.ndarray, np.ndarray]], seed: int,
              on_epoch: Callable[[dict], None] | None = None,
              model: ViewTransformNet | None = None) -> tuple[ViewTransformNet, list[dict]]:
    """Adam on the multi-layer L1 loss over freshly augmented tuples each epoch.

    ``pairs`` holds (source color, target color) images only; labels never
    enter this function.
    """
    if len(pairs) == 0:
        raise ValueError("training set is empty")
    init_rng, data_rng = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]
    model = model or ViewTransformNet(config, init_rng)
    opt = Adam(model.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))
    stats = []
    x_s_all = np.stack([p[0] for p in pairs]).astype(np.float32)
    x_t_all = np.stack([p[1] for p in pairs]).astype(np.float32)
    n = len(pairs)
    step = 0
    for epoch in range(config.epochs):
        order = data_rng.permutation(n)
        losses, layer_losses = [], []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            tuples = [augment.make_training_tuple(x_s_all[i], x_t_all[i], config.hue_delta, data_rng,
                                                  config.permute) for i in idx]
            x_q = to_nchw(np.stack([t.x_q for t in tuples]))
            x_k = to_nchw(np.stack([t.x_k for t in tuples]))
            x_v = to_nchw(np.stack([t.x_v for t in tuples]))
            target = to_nchw(np.stack([t.x_q_bar for t in tuples]))
            layer_vals: list[float] = []
            try:
                outs = model(x_v, x_k, x_q)
                loss, layer_vals = vtn_loss(outs, target, config.lambda_schedule)
                opt.zero_grad()
                loss.backward()
            except NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite value at epoch {epoch} iteration {step}: {exc}; "
                                       f"layer losses {layer_vals}") from exc
            opt.step()
            step += 1
            losses.append(float(loss.data))
            layer_losses.append(layer_vals)
        record = {"epoch": epoch, "mean_loss": float(np.mean(losses)),
                  "per_layer_loss": [float(v) for v in np.mean(layer_losses, axis=0)]}
        stats.append(record)
        logger.info("vtn epoch %d loss %.5f", epoch, record["mean_loss"])
        if on_epoch is not None:
            on_epoch(record)
    return model, stats


def save_model(model: ViewTransformNet, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    model.config.save(directory / "config.json")
    save_checkpoint(directory / "weights.adla", model.state_dict())


def load_model(directory) -> ViewTransformNet:
    directory = Path(directory)
    config = VTNConfig.load(directory / "config.json")
    model = ViewTransformNet(config, np.random.default_rng(0))
    model.load_state_dict(load_checkpoint(directory / "weights.adla"))
    return model
