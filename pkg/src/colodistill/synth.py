"""Synthetic colonoscopy records with ground truth at every granularity.

Positive frames carry elliptical textured blobs ("polyps") over a shaded
background with dark folds.  Each positive record has one pathology class
whose texture is shared by all of its blobs.  Reports are templated from a
small vocabulary; negative reports always contain a negated mention.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .imaging import rle_decode, rle_encode, write_rgb
from .records import ColonoscopyRecord, map_vienna, write_manifest

POSITIVE_TERMS = ("polyp", "polyps", "raised lesion", "flat lesion", "息肉")
NEGATION_CUES = ("no", "without", "negative for", "未见", "无")

SITES = ("cecum", "ascending colon", "transverse colon", "descending colon", "sigmoid colon", "rectum")
_MORPH = ("sessile", "pedunculated", "semi-pedunculated")
_POS_SENTENCES = (
    "A {size} mm {morph} polyp was found in the {site}.",
    "Two polyps found in the {site}, the largest {size} mm.",
    "A raised lesion of {size} mm was seen in the {site}.",
    "A flat lesion of about {size} mm was observed in the {site}.",
    "{site_cap}见一枚{size}mm息肉。",
)
_NEG_SENTENCES = (
    "No polyps seen.",
    "No polyps or raised lesion in the {site}.",
    "The colon was examined without polyps.",
    "未见息肉。",
    "No flat lesion was identified.",
)
_FILLER = (
    "The scope was advanced to the cecum.",
    "Bowel preparation was adequate.",
    "The mucosa of the {site} is smooth with a normal vascular pattern.",
    "Mild diverticulosis in the {site}.",
    "Internal hemorrhoids were noted.",
)


@dataclass
class TextureParams:
    freq: float
    amp: float
    tint: tuple[float, float, float]


def _default_textures() -> dict:
    return {
        "benign": TextureParams(freq=1.1, amp=10.0, tint=(235.0, 150.0, 130.0)),
        "malignant": TextureParams(freq=0.45, amp=34.0, tint=(200.0, 75.0, 80.0)),
    }


@dataclass
class SynthConfig:
    n_records: int = 200
    images_per_record: tuple[int, int] = (16, 32)
    image_side: int = 64
    positive_fraction: float = 0.5
    positive_frame_fraction: tuple[float, float] = (0.25, 0.6)
    blobs_per_positive: tuple[int, int] = (1, 1)
    blob_radius: tuple[float, float] = (8.0, 16.0)
    contrast: float = 1.0
    malignant_fraction: float = 0.5
    textures: dict = field(default_factory=_default_textures)
    n_centers: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("images_per_record", "positive_frame_fraction", "blobs_per_positive", "blob_radius"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range {(lo, hi)}")
            setattr(self, name, (lo, hi))
        if self.images_per_record[0] < 1 or self.blobs_per_positive[0] < 1:
            raise ValueError("ranges must start at >= 1")
        for name in ("positive_fraction", "malignant_fraction", "contrast"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0,1]")
        if self.n_records < 0 or self.image_side < 8:
            raise ValueError("n_records >= 0 and image_side >= 8 required")
        self.textures = {
            k: v if isinstance(v, TextureParams) else TextureParams(v["freq"], v["amp"], tuple(v["tint"]))
            for k, v in self.textures.items()
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["textures"] = {k: asdict(v) for k, v in self.textures.items()}
        return d


@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float

    def mask(self, side: int) -> np.ndarray:
        yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
        c, s = np.cos(self.angle), np.sin(self.angle)
        dy, dx = yy - self.cy, xx - self.cx
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return ((u / self.rx) ** 2 + (v / self.ry) ** 2 <= 1.0).astype(np.uint8)


@dataclass
class RecordTruth:
    report_label: int
    frame_labels: list[int]
    masks: dict[str, np.ndarray]
    blobs: dict[str, list[Ellipse]]
    vienna_category: int | None

    @property
    def malignant(self) -> int | None:
        return None if self.vienna_category is None else map_vienna(self.vienna_category).malignant


@dataclass
class SynthDataset:
    config: SynthConfig
    records: list[ColonoscopyRecord]
    images: dict[str, np.ndarray]
    truth: dict[str, RecordTruth]

    def truth_json(self) -> dict:
        out = {"config": self.config.to_dict(), "records": {}}
        for rid, t in self.truth.items():
            out["records"][rid] = {
                "report_label": t.report_label,
                "frame_labels": t.frame_labels,
                "n_images": len(t.frame_labels),
                "vienna_category": t.vienna_category,
                "masks": {k: rle_encode(m) for k, m in t.masks.items()},
            }
        return out

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        for image_id in sorted(self.images):
            write_rgb(out / "images" / f"{image_id}.png", self.images[image_id])
        write_manifest(out / "manifest.tsv", self.records)
        with open(out / "truth.json", "w", encoding="utf-8") as fh:
            json.dump(self.truth_json(), fh, sort_keys=True, ensure_ascii=False)
        return out / "manifest.tsv"

    def frame_items(self, positive_only: bool = False):
        """Yield (image_id, pixels, mask, frame_label, record_id) in record order."""
        for rec in self.records:
            t = self.truth[rec.record_id]
            for ref, lab in zip(rec.image_refs, t.frame_labels):
                iid = Path(ref).stem
                if positive_only and not lab:
                    continue
                yield iid, self.images[iid], t.masks[iid], lab, rec.record_id


def load_truth(path: str | Path) -> dict[str, dict]:
    """Read a truth sidecar; masks are decoded to arrays."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    recs = raw["records"]
    for r in recs.values():
        r["masks"] = {k: rle_decode(v) for k, v in r["masks"].items()}
    return recs


def biopsy_textures() -> dict:
    """Benign and malignant surfaces that share a tint and differ only in pattern."""
    tint = (215.0, 115.0, 105.0)
    return {
        "benign": TextureParams(freq=1.1, amp=10.0, tint=tint),
        "malignant": TextureParams(freq=0.45, amp=34.0, tint=tint),
    }


def _background(rng: np.random.Generator, side: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) / side
    base = np.array([185.0, 95.0, 85.0]) + rng.normal(0, 8, 3)
    gy, gx = rng.normal(0, 25, 2)
    shade = gy * (yy - 0.5) + gx * (xx - 0.5)
    r2 = (yy - 0.5) ** 2 + (xx - 0.5) ** 2
    vignette = -90.0 * r2
    img = base[None, None, :] + (shade + vignette)[..., None]
    for _ in range(int(rng.integers(1, 4))):
        a, b, c, d = rng.uniform(0.03, 0.12), rng.uniform(3, 9), rng.uniform(0, 6.3), rng.uniform(0.1, 0.9)
        dist = np.abs(yy - (d + a * np.sin(b * xx + c)))
        if rng.random() < 0.5:
            dist = np.abs(xx - (d + a * np.sin(b * yy + c)))
        fold = np.exp(-((dist / rng.uniform(0.015, 0.03)) ** 2))
        img -= (45.0 * fold)[..., None] * np.array([1.0, 0.8, 0.8])
    # faint vessel-like texture
    img += 6.0 * np.sin(rng.uniform(2, 5) * 6.28 * xx + rng.uniform(0, 6.3))[..., None] * np.sin(
        rng.uniform(2, 5) * 6.28 * yy
    )[..., None]
    return img


def _paint_blob(img, rng, ell: Ellipse, tex: TextureParams, contrast: float) -> np.ndarray:
    side = img.shape[0]
    m = ell.mask(side).astype(bool)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    r = np.sqrt(((yy - ell.cy) / ell.ry) ** 2 + ((xx - ell.cx) / ell.rx) ** 2)
    dome = 1.0 - 0.35 * np.clip(r, 0, 1) ** 2
    phase = rng.uniform(0, 6.3, 2)
    pattern = np.sin(tex.freq * xx + phase[0]) * np.sin(tex.freq * yy + phase[1])
    color = np.array(tex.tint)[None, None, :] * dome[..., None] + tex.amp * pattern[..., None]
    out = img.copy()
    out[m] = (1 - contrast) * img[m] + contrast * color[m]
    return out


def _place_ellipses(rng, side, n, radius) -> list[Ellipse]:
    out: list[Ellipse] = []
    for _ in range(200):
        if len(out) == n:
            break
        ry, rx = rng.uniform(*radius, size=2)
        rmax = max(ry, rx)
        margin = min(rmax * 0.8, side / 2 - 1)
        cy, cx = rng.uniform(margin, side - 1 - margin, size=2)
        e = Ellipse(float(cy), float(cx), float(ry), float(rx), float(rng.uniform(0, np.pi)))
        if all((e.cy - o.cy) ** 2 + (e.cx - o.cx) ** 2 > (rmax + max(o.ry, o.rx) + 2) ** 2 for o in out):
            out.append(e)
    if not out:
        raise RuntimeError("could not place a blob")
    return out


def render_frame(
    rng: np.random.Generator, cfg: SynthConfig, n_blobs: int, texture: str
) -> tuple[np.ndarray, np.ndarray, list[Ellipse]]:
    side = cfg.image_side
    img = _background(rng, side)
    mask = np.zeros((side, side), np.uint8)
    blobs = _place_ellipses(rng, side, n_blobs, cfg.blob_radius) if n_blobs else []
    for e in blobs:
        img = _paint_blob(img, rng, e, cfg.textures[texture], cfg.contrast)
        mask |= e.mask(side)
    img += rng.normal(0, 4.0, img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8), mask, blobs


def report_text(rng: np.random.Generator, label: int) -> str:
    site = SITES[int(rng.integers(len(SITES)))]
    other = SITES[int(rng.integers(len(SITES)))]
    fill = [s.format(site=other) for s in rng.choice(_FILLER, size=2, replace=False)]
    if label:
        tpl = _POS_SENTENCES[int(rng.integers(len(_POS_SENTENCES)))]
        core = tpl.format(
            size=int(rng.integers(3, 25)),
            morph=_MORPH[int(rng.integers(len(_MORPH)))],
            site=site,
            site_cap=site.capitalize(),
        )
        parts = [fill[0], core, fill[1]]
        if rng.random() < 0.3:
            parts.append(f"No polyps in the {other}.")
    else:
        core = _NEG_SENTENCES[int(rng.integers(len(_NEG_SENTENCES)))].format(site=site)
        parts = [fill[0], core, fill[1]]
    return " ".join(parts)


def _vienna(rng, cfg: SynthConfig) -> int:
    if rng.random() < cfg.malignant_fraction:
        return int(rng.choice([3, 4, 5]))
    return 1


def generate(cfg: SynthConfig) -> SynthDataset:
    """Deterministic under ``cfg.seed``; each record draws from its own derived stream."""
    records, images, truth = [], {}, {}
    width = max(3, len(str(max(cfg.n_records - 1, 0))))
    for i in range(cfg.n_records):
        rng = np.random.default_rng([cfg.seed, i])
        rid = f"R{i:0{width}d}"
        n_img = int(rng.integers(cfg.images_per_record[0], cfg.images_per_record[1] + 1))
        label = int(rng.random() < cfg.positive_fraction)
        frame_labels = [0] * n_img
        vienna = None
        if label:
            frac = rng.uniform(*cfg.positive_frame_fraction)
            k = min(n_img, max(1, int(round(frac * n_img))))
            for j in rng.choice(n_img, size=k, replace=False):
                frame_labels[int(j)] = 1
            vienna = _vienna(rng, cfg)
        texture = "malignant" if vienna not in (None, 1) else "benign"
        refs, masks, blobs = [], {}, {}
        for j, fl in enumerate(frame_labels):
            iid = f"{rid}_{j:02d}"
            nb = int(rng.integers(cfg.blobs_per_positive[0], cfg.blobs_per_positive[1] + 1)) if fl else 0
            pix, m, el = render_frame(rng, cfg, nb, texture)
            images[iid] = pix
            masks[iid] = m
            blobs[iid] = el
            refs.append(f"images/{iid}.png")
        text = report_text(rng, label)
        records.append(
            ColonoscopyRecord(
                record_id=rid,
                report_text=text,
                image_refs=tuple(refs),
                center_id=f"C{i % cfg.n_centers}",
                expert_report_label=label,
                expert_image_labels=tuple(frame_labels),
                pathology_outcome=None if vienna is None else map_vienna(vienna),
            )
        )
        truth[rid] = RecordTruth(label, frame_labels, masks, blobs, vienna)
    return SynthDataset(cfg, records, images, truth)


@dataclass
class BiopsySet:
    images: np.ndarray  # (n, side, side, 3) uint8
    labels: np.ndarray  # (n,) malignant flag
    masks: np.ndarray


def generate_biopsy(n: int, cfg: SynthConfig | None = None, seed: int = 0, textures: dict | None = None) -> BiopsySet:
    """Single-polyp frames labelled benign/malignant, classes balanced by alternation.

    ``textures`` defaults to :func:`biopsy_textures`, so the two classes can
    only be told apart by surface pattern.
    """
    cfg = replace(cfg or SynthConfig(), textures=textures or biopsy_textures())
    imgs, labels, masks = [], [], []
    for i in range(n):
        rng = np.random.default_rng([seed, 1_000_003, i])
        mal = i % 2
        pix, m, _ = render_frame(rng, cfg, 1, "malignant" if mal else "benign")
        imgs.append(pix)
        masks.append(m)
        labels.append(mal)
    side = cfg.image_side
    return BiopsySet(
        np.stack(imgs) if imgs else np.zeros((0, side, side, 3), np.uint8),
        np.asarray(labels, dtype=np.int64),
        np.stack(masks) if masks else np.zeros((0, side, side), np.uint8),
    )
