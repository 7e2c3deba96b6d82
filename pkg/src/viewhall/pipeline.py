"""Stage-by-stage experiment over on-disk artifacts.

Layout under the output root::

    dataset/   frames, manifest.json, palette.json
    vtn/       <method>/ (multi-target) or <method>/degNNN/ (single-target)
    labels/    degNNN/<method>/  soft labels, entropy maps, nearest-color labels
    seg/       source/ and degNNN/ segmentation checkpoints
    reports/   label_quality.{json,txt}, adaptation.{json,txt}, gain.svg

Each stage reads upstream artifacts only through manifests and files, so a
stage can be rerun without touching what came before it.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import dataset as D
from . import labels as Lb
from . import metrics as M
from . import scene as S
from . import segnet as G
from . import vtn as V
from .config import ExperimentConfig
from .scene import CLASS_NAMES, NUM_CLASSES

logger = logging.getLogger(__name__)

METHODS = ("attn", "unet")           # view network with attention / no-attention baseline
METHOD_LABELS = {"attn": "attention", "unet": "unet"}


class MissingArtifact(RuntimeError):
    def __init__(self, what: str, path: Path, stage: str):
        super().__init__(f"{what} not found at {path}; run the '{stage}' subcommand first")
        self.stage = stage


@dataclass
class Layout:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def dataset(self) -> Path:
        return self.root / "dataset"

    def vtn(self, method: str, pitch: float | None) -> Path:
        base = self.root / "vtn" / method
        return base if pitch is None else base / D.domain_dir(pitch)

    def labels(self, pitch: float, method: str) -> Path:
        return self.root / "labels" / D.domain_dir(pitch) / method

    def seg(self, pitch: float | None) -> Path:
        return self.root / "seg" / ("source" if pitch is None else D.domain_dir(pitch))

    @property
    def reports(self) -> Path:
        return self.root / "reports"


def _write_jsonl(path: Path, records: Iterable[dict]) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _seed(cfg: ExperimentConfig, *parts: int) -> int:
    """Independent 63-bit seed per (stage, item), derived from the experiment seed."""
    return int(np.random.SeedSequence([cfg.seed, *parts]).generate_state(2, np.uint32).view(np.uint64)[0] >> 1)


def _manifest(layout: Layout) -> D.Manifest:
    if not (layout.dataset / D.MANIFEST).is_file():
        raise MissingArtifact("dataset manifest", layout.dataset / D.MANIFEST, "gen-data")
    return D.Manifest.load(layout.dataset)


def _domains(cfg: ExperimentConfig, manifest: D.Manifest, domain: float | None) -> list[float]:
    if domain is None:
        return [float(p) for p in manifest.pitches]
    if float(domain) not in manifest.pitches:
        raise D.DatasetError(f"domain {domain:g} deg is not in the dataset (pitches {manifest.pitches})")
    return [float(domain)]


def _vtn_config(cfg: ExperimentConfig, method: str) -> V.VTNConfig:
    return V.VTNConfig.from_dict({**cfg.vtn.to_dict(), "use_attention": method == "attn"})


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def gen_data(cfg: ExperimentConfig, layout: Layout) -> D.Manifest:
    ds = cfg.dataset
    return D.build_dataset(cfg.seed, ds.n_train, ds.n_test, ds.pitches, ds.height, ds.width, layout.dataset)


def train_vtn(cfg: ExperimentConfig, layout: Layout, domain: float | None = None,
              methods: Iterable[str] = METHODS) -> None:
    """Color pairs only; the loader never opens a label file here."""
    manifest = _manifest(layout)
    if cfg.vtn_mode == "multi":
        groups = [(None, manifest.select("train"))]
    else:
        groups = [(p, manifest.select("train", p)) for p in _domains(cfg, manifest, domain)]
    for method in methods:
        for gi, (pitch, records) in enumerate(groups):
            pairs = [(D.read_ppm(manifest.path(r.source_image)), D.read_ppm(manifest.path(r.target_image)))
                     for r in records]
            seed = _seed(cfg, 1, METHODS.index(method), 0 if pitch is None else int(pitch))
            model, stats = V.train_vtn(_vtn_config(cfg, method), pairs, seed)
            out = layout.vtn(method, pitch)
            V.save_model(model, out)
            _write_jsonl(out / "stats.jsonl", stats)
            logger.info("trained %s view network for %s", method, "all domains" if pitch is None else f"{pitch:g} deg")


def _load_vtn(cfg: ExperimentConfig, layout: Layout, method: str, pitch: float) -> V.ViewTransformNet:
    path = layout.vtn(method, None if cfg.vtn_mode == "multi" else pitch)
    if not (path / "weights.adla").is_file():
        raise MissingArtifact(f"{method} view network", path, "train-vtn")
    return V.load_model(path)


def hallucinate(cfg: ExperimentConfig, layout: Layout, domain: float | None = None,
                methods: Iterable[str] = METHODS) -> None:
    """Soft labels (functional decoding), entropy maps and nearest-color labels per training frame."""
    manifest = _manifest(layout)
    for pitch in _domains(cfg, manifest, domain):
        records = manifest.select("train", pitch)
        arr = D.load_pairs(manifest, records, with_target_labels=False)
        for method in methods:
            model = _load_vtn(cfg, layout, method, pitch)

            def op(v, s, t, model=model):
                return V.hallucinate(model, v, s, t)

            soft = Lb.functional_decode(op, arr.y_s, arr.x_s, arr.x_t, cfg.temperature)
            nn = Lb.nn_decode(V.hallucinate(model, Lb.colorize(arr.y_s), arr.x_s, arr.x_t))
            out = layout.labels(pitch, method)
            out.mkdir(parents=True, exist_ok=True)
            files = []
            for rec, sl, nl in zip(records, soft, nn):
                stem = f"{rec.frame_id:05d}"
                Lb.save_soft_labels(out / f"{stem}.slbl", sl)
                D.write_pgm(out / f"{stem}_entropy.pgm", Lb.entropy_to_pgm_values(Lb.entropy_map(sl)))
                D.write_pgm(out / f"{stem}_nn.pgm", nl)
                files.append({"frame_id": rec.frame_id, "target_image": rec.target_image,
                              "soft": f"{stem}.slbl", "entropy": f"{stem}_entropy.pgm", "nn": f"{stem}_nn.pgm"})
            _write_json(out / "index.json", {"domain_deg": pitch, "method": method,
                                             "temperature": cfg.temperature, "frames": files})


def train_seg(cfg: ExperimentConfig, layout: Layout) -> None:
    manifest = _manifest(layout)
    x, y = D.load_source(manifest, "train")
    model, stats = G.train_source(cfg.seg, x, y, _seed(cfg, 2))
    out = layout.seg(None)
    G.save_model(model, out)
    _write_jsonl(out / "stats.jsonl", stats)


def _load_seg(layout: Layout, pitch: float | None) -> G.SegNet:
    path = layout.seg(pitch)
    if not (path / "weights.adla").is_file():
        if pitch is None:
            raise MissingArtifact("source segmentation network", path, "train-seg")
        raise MissingArtifact(f"adapted segmentation network for {pitch:g} deg", path, "adapt")
    return G.load_model(path)


def _load_soft(layout: Layout, pitch: float, method: str = "attn") -> tuple[dict, np.ndarray]:
    path = layout.labels(pitch, method)
    if not (path / "index.json").is_file():
        raise MissingArtifact(f"hallucinated labels for {pitch:g} deg", path, "hallucinate")
    index = json.loads((path / "index.json").read_text())
    return index, np.stack([Lb.load_soft_labels(path / f["soft"]) for f in index["frames"]])


def adapt(cfg: ExperimentConfig, layout: Layout, domain: float | None = None) -> None:
    """Fine-tune the source network per target domain on the attention model's soft labels."""
    manifest = _manifest(layout)
    source = _load_seg(layout, None)
    for pitch in _adapt_domains(cfg, manifest, domain):
        index, soft = _load_soft(layout, pitch)
        images = np.stack([D.read_ppm(manifest.path(f["target_image"])) for f in index["frames"]])
        image_domain = {r.target_image: r.pitch_delta for r in manifest.pairs}[index["frames"][0]["target_image"]]
        model, stats = G.adapt_target(source, images, soft, cfg.seg, _seed(cfg, 3, int(pitch)),
                                      image_domain=image_domain, label_domain=index["domain_deg"])
        out = layout.seg(pitch)
        G.save_model(model, out)
        _write_jsonl(out / "stats.jsonl", stats)


def _adapt_domains(cfg: ExperimentConfig, manifest: D.Manifest, domain: float | None) -> list[float]:
    domains = _domains(cfg, manifest, domain)
    if domain is None and cfg.adapt_pitches is not None:
        domains = [p for p in domains if p in cfg.adapt_pitches]
    return domains


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _row(method: str, pitch: float, cm: M.ConfusionMatrix) -> dict:
    iou = cm.iou()
    return {"method": method, "domain_deg": pitch, "miou": _num(cm.miou()),
            "per_class": [_num(v) for v in iou], "pixels": cm.total}


def _num(v: float):
    return None if v is None or math.isnan(v) else round(float(v), 6)


def oracle_warp_labels(manifest: D.Manifest, rec: D.PairRecord) -> tuple[np.ndarray, np.ndarray]:
    """Source labels pulled through the geometric correspondence, plus its visibility mask."""
    frame = next(f for f in manifest.frames if f.split == rec.split and f.frame_id == rec.frame_id)
    scene = S.generate_scene(frame.scene_seed)
    cam_s = frame.camera()
    corr = S.oracle_correspondence(scene, cam_s, cam_s.with_pitch(math.radians(rec.pitch_delta)),
                                   manifest.height, manifest.width)
    y_s = D.read_pgm(manifest.path(rec.source_labels))
    return S.warp(y_s, corr, fill=0), corr.visible


def label_quality(cfg: ExperimentConfig, layout: Layout, domain: float | None = None,
                  methods: Iterable[str] = METHODS) -> list[dict]:
    """mIoU of hallucinated labels on each target domain's training frames."""
    manifest = _manifest(layout)
    rows = []
    for pitch in _domains(cfg, manifest, domain):
        records = manifest.select("train", pitch)
        y_t = np.stack([D.read_pgm(manifest.path(r.target_labels)) for r in records])
        y_s = np.stack([D.read_pgm(manifest.path(r.source_labels)) for r in records])
        rows.append(_row("identity", pitch, M.ConfusionMatrix.from_labels(y_s, y_t, NUM_CLASSES)))
        for method in methods:
            path = layout.labels(pitch, method)
            index, soft = _load_soft(layout, pitch, method)
            nn = np.stack([D.read_pgm(path / f["nn"]) for f in index["frames"]])
            name = METHOD_LABELS[method]
            rows.append(_row(name, pitch, M.ConfusionMatrix.from_labels(nn, y_t, NUM_CLASSES)))
            rows.append(_row(name + "+F", pitch, M.ConfusionMatrix.from_labels(soft.argmax(-1), y_t, NUM_CLASSES)))
        cm = M.ConfusionMatrix.empty(NUM_CLASSES)
        visible_px = 0
        for rec, yt in zip(records, y_t):
            warped, visible = oracle_warp_labels(manifest, rec)
            cm = cm + M.ConfusionMatrix.from_labels(warped, yt, NUM_CLASSES, mask=visible)
            visible_px += int(visible.sum())
        rows.append({**_row("oracle-warp", pitch, cm), "visible_fraction": _num(visible_px / y_t.size)})
    return rows


def adaptation_results(cfg: ExperimentConfig, layout: Layout, domain: float | None = None) -> list[dict]:
    """Target test mIoU of the source-only and adapted networks, with the gain."""
    manifest = _manifest(layout)
    source = _load_seg(layout, None)
    x_src, y_src = D.load_source(manifest, "test")
    rows = [_row("source-only", 0.0, M.ConfusionMatrix.from_labels(G.predict(source, x_src), y_src, NUM_CLASSES))]
    for pitch in _adapt_domains(cfg, manifest, domain):
        records = manifest.select("test", pitch)
        x_t = np.stack([D.read_ppm(manifest.path(r.target_image)) for r in records])
        y_t = np.stack([D.read_pgm(manifest.path(r.target_labels)) for r in records])
        base = _row("source-only", pitch, M.ConfusionMatrix.from_labels(G.predict(source, x_t), y_t, NUM_CLASSES))
        adapted = _row("adapted", pitch, M.ConfusionMatrix.from_labels(G.predict(_load_seg(layout, pitch), x_t),
                                                                       y_t, NUM_CLASSES))
        adapted["gain"] = _num(M.adaptation_gain(adapted["miou"], base["miou"]))
        rows += [base, adapted]
    return rows


def evaluate(cfg: ExperimentConfig, layout: Layout, domain: float | None = None) -> dict:
    _manifest(layout)
    _load_seg(layout, None)
    result = {"label_quality": label_quality(cfg, layout, domain),
              "adaptation": adaptation_results(cfg, layout, domain),
              "classes": list(CLASS_NAMES)}
    _write_json(layout.reports / "label_quality.json", result["label_quality"])
    _write_json(layout.reports / "adaptation.json", result["adaptation"])
    return result


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def format_table(rows: list[dict], title: str, methods: list[str] | None = None) -> str:
    domains = sorted({r["domain_deg"] for r in rows})
    methods = methods or list(dict.fromkeys(r["method"] for r in rows))
    cell = {(r["method"], r["domain_deg"]): r["miou"] for r in rows}
    width = max(12, *(len(m) + 2 for m in methods))
    lines = [title, "Method".ljust(width) + "".join(f"{d:>8.0f}" for d in domains)]
    lines.append("-" * len(lines[-1]))
    for m in methods:
        vals = [cell.get((m, d)) for d in domains]
        lines.append(m.ljust(width) + "".join(f"{100 * v:8.2f}" if v is not None else f"{'-':>8}" for v in vals))
    return "\n".join(lines) + "\n"


def format_domain_table(rows: list[dict], title: str) -> str:
    """One row per target domain: source-only, adapted and their difference."""
    cell = {(r["method"], r["domain_deg"]): r for r in rows}
    lines = [title, f"{'Pitch':>6}{'source-only':>13}{'adapted':>10}{'gain':>9}"]
    lines.append("-" * len(lines[-1]))
    for d in sorted({r["domain_deg"] for r in rows}):
        base, ad = cell[("source-only", d)], cell[("adapted", d)]
        lines.append(f"{d:>6.0f}{100 * base['miou']:13.2f}{100 * ad['miou']:10.2f}{100 * ad['gain']:+9.2f}")
    return "\n".join(lines) + "\n"


def gain_chart(rows: list[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    gains = sorted((r["domain_deg"], r["gain"]) for r in rows if r["method"] == "adapted")
    with matplotlib.rc_context({"svg.hashsalt": "viewhall", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.axhline(0.0, color="0.6", lw=0.8)
        if gains:
            ax.plot([g[0] for g in gains], [100 * g[1] for g in gains], marker="o")
        ax.set_xlabel("pitch angle (deg)")
        ax.set_ylabel("adaptation gain (mIoU points)")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def report(cfg: ExperimentConfig, layout: Layout) -> list[Path]:
    lq_path, ad_path = layout.reports / "label_quality.json", layout.reports / "adaptation.json"
    for p in (lq_path, ad_path):
        if not p.is_file():
            raise MissingArtifact("evaluation results", p, "evaluate")
    lq = json.loads(lq_path.read_text())
    ad = json.loads(ad_path.read_text())
    lq_text = format_table(lq, "Hallucinated-label mIoU (%) on target training frames")
    targets = [r for r in ad if r["domain_deg"] > 0]
    ad_text = format_domain_table(targets, "Segmentation mIoU (%) on target test frames")
    src = next((r for r in ad if r["domain_deg"] == 0), None)
    if src is not None:
        ad_text += f"source-domain test mIoU: {100 * src['miou']:.2f}\n"
    outputs = [layout.reports / "label_quality.txt", layout.reports / "adaptation.txt", layout.reports / "gain.svg"]
    outputs[0].write_text(lq_text)
    outputs[1].write_text(ad_text)
    gain_chart(targets, outputs[2])
    return outputs


def run_all(cfg: ExperimentConfig, layout: Layout, domain: float | None = None) -> list[Path]:
    gen_data(cfg, layout)
    train_vtn(cfg, layout, domain)
    hallucinate(cfg, layout, domain)
    train_seg(cfg, layout)
    adapt(cfg, layout, domain)
    evaluate(cfg, layout, domain)
    return report(cfg, layout)
