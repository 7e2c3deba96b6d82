"""Experiment configuration: JSON with ``//``, ``#`` and ``/* */`` comments, profile defaults, flag overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from .segnet import SegConfig, default_seg_config
from .vtn import VTNConfig, default_config

ALL_PITCHES = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0]


class ConfigError(ValueError):
    """Unreadable or invalid configuration; the message carries file/line context."""


def strip_comments(text: str) -> str:
    """Blank out comments outside string literals, keeping line numbers intact."""
    out = []
    i, n = 0, len(text)
    in_str = False
    while i < n:
        ch = text[i]
        if in_str:
            out.append(ch)
            if ch == "\\" and i + 1 < n:
                out.append(text[i + 1])
                i += 1
            elif ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
            out.append(ch)
        elif ch == "#" or text.startswith("//", i):
            while i < n and text[i] != "\n":
                i += 1
            continue
        elif text.startswith("/*", i):
            end = text.find("*/", i + 2)
            if end < 0:
                raise ConfigError(f"line {text.count(chr(10), 0, i) + 1}: unterminated /* comment")
            out.append("".join(c if c == "\n" else " " for c in text[i : end + 2]))
            i = end + 2
            continue
        else:
            out.append(ch)
        i += 1
    return "".join(out)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    cleaned = strip_comments(text)
    try:
        data = json.loads(cleaned)
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        context = lines[exc.lineno - 1].strip() if 0 < exc.lineno <= len(lines) else ""
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {context}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    return data


@dataclass
class DatasetConfig:
    n_train: int = 60
    n_test: int = 24
    pitches: list[float] = field(default_factory=lambda: list(ALL_PITCHES))
    height: int = 32
    width: int = 48


@dataclass
class ExperimentConfig:
    seed: int = 7
    profile: str = "desk"
    out: str = "out"
    deterministic: bool = False
    # soft-label sharpness; responses live in [0, 1], so T = 1 gives near-uniform labels
    temperature: float = 0.05
    # "multi": one view network over all target pitches; "single": one per pitch
    vtn_mode: str = "multi"
    adapt_pitches: list[float] | None = None     # None adapts to every dataset pitch
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    vtn: VTNConfig = field(default_factory=default_config)
    seg: SegConfig = field(default_factory=default_seg_config)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "profile": self.profile, "out": self.out,
            "deterministic": self.deterministic, "temperature": self.temperature,
            "vtn_mode": self.vtn_mode, "adapt_pitches": self.adapt_pitches,
            "dataset": dict(vars(self.dataset)), "vtn": self.vtn.to_dict(), "seg": self.seg.to_dict(),
        }


def _profile_defaults(profile: str) -> ExperimentConfig:
    if profile == "desk":
        return ExperimentConfig()
    if profile == "paper":
        vtn = default_config("paper")
        return ExperimentConfig(profile="paper", temperature=1.0, vtn=vtn, seg=default_seg_config("paper"),
                                dataset=DatasetConfig(n_train=13500, n_test=2700, height=vtn.height, width=vtn.width))
    raise ConfigError(f"unknown profile {profile!r} (expected 'paper' or 'desk')")


def build_config(data: dict | None = None, profile: str | None = None, source: str = "<config>") -> ExperimentConfig:
    """Profile defaults, then file values, then (by the caller) flags."""
    data = copy.deepcopy(data or {})
    profile = profile or data.pop("profile", "desk")
    data.pop("profile", None)
    cfg = _profile_defaults(profile)
    known = {"seed", "out", "deterministic", "temperature", "vtn_mode", "adapt_pitches", "dataset", "vtn", "seg"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{source}: unknown keys {sorted(unknown)}")
    try:
        for key in ("seed", "out", "deterministic", "temperature", "vtn_mode"):
            if key in data:
                setattr(cfg, key, type(getattr(cfg, key))(data[key]))
        if data.get("adapt_pitches") is not None:
            cfg.adapt_pitches = [float(p) for p in data["adapt_pitches"]]
        if "dataset" in data:
            ds = dict(vars(cfg.dataset))
            bad = set(data["dataset"]) - set(ds)
            if bad:
                raise ConfigError(f"{source}: unknown dataset keys {sorted(bad)}")
            ds.update(data["dataset"])
            ds["pitches"] = [float(p) for p in ds["pitches"]]
            cfg.dataset = DatasetConfig(**ds)
        if "vtn" in data:
            cfg.vtn = VTNConfig.from_dict({**cfg.vtn.to_dict(), **data["vtn"]})
        if "seg" in data:
            cfg.seg = SegConfig.from_dict({**cfg.seg.to_dict(), **data["seg"]})
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    validate(cfg, source)
    return cfg


def validate(cfg: ExperimentConfig, source: str = "<config>") -> None:
    ds = cfg.dataset
    if (ds.height, ds.width) != (cfg.vtn.height, cfg.vtn.width):
        raise ConfigError(f"{source}: dataset size {ds.height}x{ds.width} differs from the view network's "
                          f"{cfg.vtn.height}x{cfg.vtn.width}")
    if not ds.pitches or any(not 0 < p <= 90 for p in ds.pitches):
        raise ConfigError(f"{source}: pitches must be a non-empty list in (0, 90]")
    if cfg.temperature <= 0:
        raise ConfigError(f"{source}: temperature must be positive")
    if cfg.vtn_mode not in ("multi", "single"):
        raise ConfigError(f"{source}: vtn_mode must be 'multi' or 'single', got {cfg.vtn_mode!r}")
    if cfg.adapt_pitches is not None and set(cfg.adapt_pitches) - set(ds.pitches):
        raise ConfigError(f"{source}: adapt_pitches {cfg.adapt_pitches} not all in dataset pitches {ds.pitches}")
    if cfg.seed < 0:
        raise ConfigError(f"{source}: seed must be non-negative")


def load_config(path=None, profile: str | None = None) -> ExperimentConfig:
    if path is None:
        return build_config({}, profile)
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return build_config(parse_config_text(text, str(p)), profile, str(p))
