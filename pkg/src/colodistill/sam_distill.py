"""Pixel-level distillation: box prompts -> pseudo masks -> segmentation model -> boxes.

A promptable segmenter turns each box into a mask.  A small U-shaped network
is fitted to those masks, its predictions yield new boxes, and the cycle
repeats until the masks stop changing.
"""
from __future__ import annotations

import csv
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .checkpoint import load_checkpoint, save_checkpoint
from .eval import dice
from .imaging import write_mask
from .nets import check_finite, seed_everything, to_input
from .records import ImageSample
from .wsss import BoxPrompt

log = logging.getLogger(__name__)


class NoForeground(ValueError):
    """mask_to_box was given an empty mask."""


class SegmenterError(RuntimeError):
    pass


class RefinementError(RuntimeError):
    pass


@dataclass(frozen=True)
class BinaryMask:
    image_id: str
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"mask {self.image_id}: expected HxW, got {v.shape}")
        if v.size and not np.isin(v, (0, 1)).all():
            raise ValueError(f"mask {self.image_id}: values must be 0/1")
        v = v.astype(np.uint8)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


class PromptableSegmenter(Protocol):
    deterministic: bool

    def segment(self, image: ImageSample, box: BoxPrompt) -> BinaryMask: ...


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (yy**2 + xx**2) <= r * r


def perturb(mask: np.ndarray, radius: int, mode: str) -> np.ndarray:
    """Morphological dilation (mode 'dilate') or erosion ('erode') by a disk."""
    m = np.asarray(mask, bool)
    if radius <= 0:
        return m.astype(np.uint8)
    if mode == "dilate":
        out = ndimage.binary_dilation(m, structure=disk(radius))
    elif mode == "erode":
        out = ndimage.binary_erosion(m, structure=disk(radius), border_value=1)
    else:
        raise ValueError(f"unknown perturbation mode {mode!r}")
    return out.astype(np.uint8)


class OracleSegmenter:
    """Test double: the generator's true mask, optionally perturbed, clipped to the box.

    With ``mode='random'`` each image is dilated or eroded by a coin flip
    seeded from (seed, image_id), so repeated calls agree.
    """

    deterministic = True

    def __init__(self, truth: Mapping[str, np.ndarray], radius: int = 0, mode: str = "dilate", seed: int = 0):
        if mode not in ("dilate", "erode", "random"):
            raise ValueError(f"unknown perturbation mode {mode!r}")
        self.truth = truth
        self.radius = int(radius)
        self.mode = mode
        self.seed = seed

    def _mode_for(self, image_id: str) -> str:
        if self.mode != "random":
            return self.mode
        rng = np.random.default_rng([self.seed, zlib.crc32(image_id.encode())])
        return "dilate" if rng.random() < 0.5 else "erode"

    def segment(self, image: ImageSample, box: BoxPrompt) -> BinaryMask:
        try:
            gt = self.truth[image.image_id]
        except KeyError:
            raise SegmenterError(f"no ground truth for {image.image_id}") from None
        h, w = image.shape
        m = perturb(gt, self.radius, self._mode_for(image.image_id))
        return BinaryMask(image.image_id, m & box.to_mask(h, w))


def oracle_segmenter(truth: Mapping[str, np.ndarray], radius: int = 0, mode: str = "dilate", seed: int = 0) -> OracleSegmenter:
    return OracleSegmenter(truth, radius, mode, seed)


@dataclass
class PseudoMasks:
    masks: dict[str, BinaryMask]
    failures: dict[str, str] = field(default_factory=dict)


def generate_pseudo_masks(
    segmenter: PromptableSegmenter,
    images: Mapping[str, ImageSample],
    boxes: Mapping[str, Sequence[BoxPrompt]],
    max_workers: int = 1,
) -> PseudoMasks:
    """Union of the per-box masks for every image.

    A segmenter failure skips the image and records the reason in ``failures``.
    """
    missing = [iid for iid in images if not boxes.get(iid)]
    if missing:
        raise ValueError(f"{len(missing)} image(s) have no box prompt, e.g. {missing[0]}")

    def one(iid: str):
        img = images[iid]
        h, w = img.shape
        acc = np.zeros((h, w), np.uint8)
        for b in boxes[iid]:
            m = segmenter.segment(img, b)
            if m.shape != (h, w):
                raise SegmenterError(f"mask shape {m.shape} != image shape {(h, w)}")
            acc |= m.values
        return BinaryMask(iid, acc)

    ids = sorted(images)
    out = PseudoMasks({})

    def guarded(iid):
        try:
            return one(iid), None
        except Exception as e:  # any adapter fault is per-image
            return None, f"{type(e).__name__}: {e}"

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            results = list(pool.map(guarded, ids))
    else:
        results = [guarded(i) for i in ids]
    for iid, (mask, err) in zip(ids, results):
        if err is None:
            out.masks[iid] = mask
        else:
            log.warning("segmenter failed on %s: %s", iid, err)
            out.failures[iid] = err
    return out


def mask_to_box(mask: BinaryMask | np.ndarray) -> BoxPrompt:
    v = mask.values if isinstance(mask, BinaryMask) else np.asarray(mask)
    rows = np.flatnonzero(v.any(axis=1))
    if rows.size == 0:
        raise NoForeground("mask has no foreground pixels")
    cols = np.flatnonzero(v.any(axis=0))
    return BoxPrompt(int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))


def mask_change(a: np.ndarray, b: np.ndarray) -> float:
    """Fraction of pixels that differ."""
    return float(np.mean(np.asarray(a, bool) != np.asarray(b, bool)))


def mean_mask_change(prev: Mapping[str, BinaryMask], cur: Mapping[str, BinaryMask]) -> float:
    """Mean flipped-pixel fraction over ``cur``; images absent from ``prev`` count against an empty mask."""
    if not cur:
        return 0.0
    vals = []
    for iid, m in cur.items():
        p = prev.get(iid)
        vals.append(mask_change(np.zeros(m.shape, np.uint8) if p is None else p.values, m.values))
    return float(np.mean(vals))


# -- segmentation network -----------------------------------------------------


@dataclass
class UNetConfig:
    base: int = 16
    depth: int = 3

    def __post_init__(self):
        if self.depth < 1 or self.base < 1:
            raise ValueError("depth and base must be positive")


def _conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.GroupNorm(min(4, cout), cout),
        nn.ReLU(),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.GroupNorm(min(4, cout), cout),
        nn.ReLU(),
    )


class SegmentationModel(nn.Module):
    """Small U-shaped encoder-decoder producing one foreground logit per pixel."""

    def __init__(self, cfg: UNetConfig | None = None):
        super().__init__()
        self.cfg = cfg or UNetConfig()
        widths = [self.cfg.base * 2**i for i in range(self.cfg.depth + 1)]
        self.down = nn.ModuleList([_conv_block(3, widths[0])])
        self.down.extend(_conv_block(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.up = nn.ModuleList(_conv_block(b + a, a) for a, b in zip(widths[:-1], widths[1:]))
        self.out = nn.Conv2d(widths[0], 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for i, blk in enumerate(self.down):
            if i:
                x = F.max_pool2d(x, 2, ceil_mode=True)
            x = blk(x)
            skips.append(x)
        for blk, skip in zip(reversed(self.up), reversed(skips[:-1])):
            x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = blk(torch.cat([skip, x], dim=1))
        return self.out(x)[:, 0]


def soft_dice_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    p = torch.sigmoid(logits).flatten(1)
    t = target.flatten(1)
    inter = (p * t).sum(1)
    return (1 - (2 * inter + smooth) / (p.sum(1) + t.sum(1) + smooth)).mean()


def seg_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Pixel-wise binary cross-entropy plus soft Dice, equally weighted."""
    return F.binary_cross_entropy_with_logits(logits, target) + soft_dice_loss(logits, target)


@dataclass
class SegTrainConfig:
    steps: int = 300
    batch: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-4
    hflip: bool = True
    vflip: bool = True
    seed: int = 0


def train_seg_model(
    model: SegmentationModel, images: np.ndarray, masks: np.ndarray, cfg: SegTrainConfig | None = None
) -> tuple[SegmentationModel, list[float]]:
    """Fit ``model`` to binary masks; returns the model and its per-step loss."""
    cfg = cfg or SegTrainConfig()
    masks = np.asarray(masks)
    if masks.size and not np.isin(masks, (0, 1)).all():
        raise ValueError("masks must be binary")
    images = np.asarray(images)
    if images.shape[:3] != masks.shape:
        raise ValueError(f"image batch {images.shape} does not match masks {masks.shape}")
    rng = seed_everything(cfg.seed)
    x_all = to_input(images)
    y_all = torch.as_tensor(masks, dtype=torch.float32)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    losses = []
    model.train()
    for step in range(cfg.steps):
        idx = torch.from_numpy(rng.choice(len(x_all), size=min(cfg.batch, len(x_all)), replace=False))
        x, y = x_all[idx], y_all[idx]
        if cfg.hflip and rng.random() < 0.5:
            x, y = x.flip(-1), y.flip(-1)
        if cfg.vflip and rng.random() < 0.5:
            x, y = x.flip(-2), y.flip(-2)
        loss = seg_loss(model(x), y)
        check_finite(loss, f"segmentation step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    model.eval()
    return model, losses


@torch.no_grad()
def predict_masks(model: SegmentationModel, images: np.ndarray, threshold: float = 0.5, batch: int = 64) -> np.ndarray:
    model.eval()
    images = np.asarray(images)
    out = [
        (torch.sigmoid(model(to_input(images[i : i + batch]))) >= threshold).to(torch.uint8).numpy()
        for i in range(0, len(images), batch)
    ]
    return np.concatenate(out) if out else np.zeros(images.shape[:3], np.uint8)


def save_seg(path, model: SegmentationModel, meta: dict | None = None) -> None:
    save_checkpoint(path, model.state_dict(), {"kind": "seg", "unet_config": asdict(model.cfg), **(meta or {})})


def load_seg(path) -> tuple[SegmentationModel, dict]:
    state, meta = load_checkpoint(path)
    if meta.get("kind") != "seg":
        raise ValueError(f"{path}: not a segmentation checkpoint")
    model = SegmentationModel(UNetConfig(**meta["unet_config"]))
    model.load_state_dict(state)
    model.eval()
    return model, meta


# -- refinement loop ----------------------------------------------------------


@dataclass
class RefinementState:
    iteration: int
    masks: dict[str, BinaryMask]
    mean_mask_change: float
    pseudo_dice: float | None = None  # pseudo masks vs truth
    model_dice: float | None = None  # segmentation-model predictions vs truth
    failures: dict[str, str] = field(default_factory=dict)


@dataclass
class RefineConfig:
    max_iters: int = 3
    eps: float = 0.005
    box_margin: int = 2
    max_workers: int = 1
    seg: SegTrainConfig = field(default_factory=SegTrainConfig)

    def __post_init__(self):
        if isinstance(self.seg, dict):
            self.seg = SegTrainConfig(**self.seg)
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


def _mean_dice(pred: Mapping[str, np.ndarray], truth: Mapping[str, np.ndarray]) -> float:
    return float(np.mean([dice(pred[i], truth[i]) for i in sorted(pred)]))


def refine_loop(
    segmenter: PromptableSegmenter,
    seg_model: SegmentationModel,
    images: Mapping[str, ImageSample],
    initial_boxes: Mapping[str, Sequence[BoxPrompt]],
    cfg: RefineConfig | None = None,
    truth: Mapping[str, np.ndarray] | None = None,
) -> tuple[dict[str, BinaryMask], list[RefinementState]]:
    """Alternate segmenter prompting and segmentation training.

    Each iteration prompts with the current boxes, fine-tunes ``seg_model``
    on the resulting masks, and replaces every image's boxes with the
    (margin-expanded) tight box of its prediction.  An empty prediction keeps
    the previous boxes.  Stops once the mean flipped-pixel fraction between
    consecutive pseudo masks drops below ``cfg.eps``.
    """
    cfg = cfg or RefineConfig()
    boxes = {iid: list(initial_boxes.get(iid, ())) for iid in images}
    prev: dict[str, BinaryMask] = {}
    history: list[RefinementState] = []
    for it in range(1, cfg.max_iters + 1):
        pm = generate_pseudo_masks(segmenter, images, boxes, cfg.max_workers)
        if not pm.masks or not any(m.values.any() for m in pm.masks.values()):
            raise RefinementError(
                f"iteration {it}: every pseudo mask is empty ({len(pm.failures)} segmenter failures)"
            )
        change = mean_mask_change(prev, pm.masks)
        ids = sorted(pm.masks)
        x = np.stack([images[i].pixels for i in ids])
        y = np.stack([pm.masks[i].values for i in ids])
        train_seg_model(seg_model, x, y, replace(cfg.seg, seed=cfg.seg.seed + it - 1))
        pred = dict(zip(ids, predict_masks(seg_model, x)))
        state = RefinementState(it, pm.masks, change, failures=pm.failures)
        if truth is not None:
            state.pseudo_dice = _mean_dice({i: pm.masks[i].values for i in ids}, truth)
            state.model_dice = _mean_dice(pred, truth)
        history.append(state)
        log.info("refine iteration %d: change=%.5f model_dice=%s", it, change, state.model_dice)
        if it > 1 and change < cfg.eps:
            break
        for iid, p in pred.items():
            if p.any():
                h, w = p.shape
                boxes[iid] = [mask_to_box(p).expand(cfg.box_margin, h, w)]
        prev = pm.masks
    return history[-1].masks, history


def write_masks(out_dir: str | Path, masks: Mapping[str, BinaryMask | np.ndarray]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for iid in sorted(masks):
        m = masks[iid]
        write_mask(out / f"{iid}.png", m.values if isinstance(m, BinaryMask) else m)


def write_iteration_report(path: str | Path, history: Sequence[RefinementState]) -> None:
    def fmt(v):
        return "" if v is None else repr(float(v))

    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "mean_mask_change", "pseudo_dice", "model_dice", "failures"])
        for s in history:
            w.writerow([s.iteration, repr(s.mean_mask_change), fmt(s.pseudo_dice), fmt(s.model_dice), len(s.failures)])
