"""Region-level distillation with a patch-token transformer.

The classifier max-pools last-layer patch tokens and applies a bias-free
linear layer, so the same weights project the token grid into a class
activation map.  Cosine relations between intermediate-layer tokens decide
which last-layer token pairs are pulled together or pushed apart.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .checkpoint import load_checkpoint, save_checkpoint
from .nets import check_finite, seed_everything, to_input

log = logging.getLogger(__name__)

NORM_EPS = 1e-8


@dataclass
class ViTConfig:
    image_side: int = 64
    patch: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    tap_layer: int = 2  # 1-based index of the intermediate layer
    num_classes: int = 1
    pos_embed: bool = False  # learned positions let the CAM drift toward the frame centre

    def __post_init__(self):
        if self.image_side % self.patch:
            raise ValueError("image_side must be a multiple of patch")
        if not 1 <= self.tap_layer <= self.depth:
            raise ValueError("tap_layer must lie in [1, depth]")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch

    @classmethod
    def reference(cls) -> "ViTConfig":
        """ViT-B/16 geometry: 448 px input, 28x28 grid, 12 layers, tap at 10."""
        return cls(image_side=448, patch=16, dim=768, depth=12, heads=12, mlp_ratio=4.0, tap_layer=10, pos_embed=True)


@dataclass(frozen=True)
class BoxPrompt:
    """Inclusive pixel box (row_min, col_min, row_max, col_max)."""

    row_min: int
    col_min: int
    row_max: int
    col_max: int
    score: float = 1.0

    def __post_init__(self):
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise ValueError(f"degenerate box {self}")
        if self.row_min < 0 or self.col_min < 0:
            raise ValueError(f"box outside image: {self}")

    def within(self, h: int, w: int) -> bool:
        return self.row_max < h and self.col_max < w

    def as_tuple(self) -> tuple[int, int, int, int]:
        return self.row_min, self.col_min, self.row_max, self.col_max

    def area(self) -> int:
        return (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)

    def contains(self, other: "BoxPrompt") -> bool:
        return (
            self.row_min <= other.row_min
            and self.col_min <= other.col_min
            and self.row_max >= other.row_max
            and self.col_max >= other.col_max
        )

    def to_mask(self, h: int, w: int) -> np.ndarray:
        m = np.zeros((h, w), np.uint8)
        m[self.row_min : self.row_max + 1, self.col_min : self.col_max + 1] = 1
        return m

    def expand(self, margin: int, h: int, w: int) -> "BoxPrompt":
        return BoxPrompt(
            max(0, self.row_min - margin),
            max(0, self.col_min - margin),
            min(h - 1, self.row_max + margin),
            min(w - 1, self.col_max + margin),
            self.score,
        )


class _Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        y = self.norm1(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class PatchViT(nn.Module):
    def __init__(self, cfg: ViTConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ViTConfig()
        n = cfg.grid * cfg.grid
        self.patch_embed = nn.Conv2d(3, cfg.dim, cfg.patch, stride=cfg.patch)
        self.pos = None
        if cfg.pos_embed:
            self.pos = nn.Parameter(torch.zeros(1, n, cfg.dim))
            nn.init.trunc_normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList([_Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)])
        self.norm = nn.LayerNorm(cfg.dim)
        self.aux_norm = nn.LayerNorm(cfg.dim)
        self.classifier = nn.Linear(cfg.dim, cfg.num_classes, bias=False)
        self.aux_classifier = nn.Linear(cfg.dim, cfg.num_classes, bias=False)

    def tokens(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        s = self.cfg.image_side
        if x.shape[-2:] != (s, s):
            raise ValueError(f"expected {s}x{s} input, got {tuple(x.shape[-2:])}")
        t = self.patch_embed(x).flatten(2).transpose(1, 2)
        if self.pos is not None:
            t = t + self.pos
        inter = None
        for i, blk in enumerate(self.blocks, start=1):
            t = blk(t)
            if i == self.cfg.tap_layer:
                inter = t
        return {"last": self.norm(t), "intermediate": self.aux_norm(inter)}


def spatial_map(tokens: torch.Tensor, grid: int) -> torch.Tensor:
    """(..., N*N, C) row-major tokens -> (..., N, N, C)."""
    return tokens.reshape(*tokens.shape[:-2], grid, grid, tokens.shape[-1])


def pooled_logits(tokens: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Global max over patch positions, then the linear class projection."""
    return tokens.max(dim=-2).values @ weight.T


def classify_forward(model: PatchViT, x: torch.Tensor) -> tuple[dict[str, torch.Tensor], torch.Tensor, torch.Tensor]:
    """Returns (tokens per tapped layer, p_cls, auxiliary p_cls)."""
    toks = model.tokens(x)
    p = torch.sigmoid(pooled_logits(toks["last"], model.classifier.weight))
    p_aux = torch.sigmoid(pooled_logits(toks["intermediate"], model.aux_classifier.weight))
    return toks, p, p_aux


def classification_loss(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Negated mean Bernoulli log-likelihood over the K classes (batch-averaged)."""
    y = torch.as_tensor(y, dtype=p.dtype)
    ll = y * torch.log(p) + (1 - y) * torch.log(1 - p)
    return -ll.mean(dim=-1).mean()


def classification_loss_logits(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Same value as :func:`classification_loss` on sigmoid(logits), computed stably."""
    y = torch.as_tensor(y, dtype=logits.dtype)
    ll = y * F.logsigmoid(logits) + (1 - y) * F.logsigmoid(-logits)
    return -ll.mean(dim=-1).mean()


def aux_classification_loss(inter_tokens: torch.Tensor, w_aux: torch.Tensor, y) -> torch.Tensor:
    return classification_loss_logits(pooled_logits(inter_tokens, w_aux), y)


def compute_cam(fmap, weights, k: int = 0) -> np.ndarray:
    """relu(F . W_k) divided by its max; all-zero when nothing activates."""
    f = np.asarray(fmap, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if not 0 <= k < w.shape[0]:
        raise IndexError(f"class {k} out of range for K={w.shape[0]}")
    raw = np.maximum(f @ w[k], 0.0)
    m = raw.max() if raw.size else 0.0
    return raw / m if m > 0 else np.zeros_like(raw)


def token_similarity(tokens: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between all token pairs; (..., N*N, N*N)."""
    t = F.normalize(tokens, dim=-1, eps=NORM_EPS)
    m = t @ t.transpose(-1, -2)
    return m.clamp(-1.0, 1.0)


def ptc_loss(last_tokens: torch.Tensor, m_t: torch.Tensor, tau: float = 0.5) -> torch.Tensor:
    """Patch-token contrast on one image's last-layer tokens (N*N, C).

    Off-diagonal pairs with intermediate similarity >= ``tau`` are positives,
    the remaining off-diagonal pairs negatives.  An empty group drops its term.
    """
    n = last_tokens.shape[-2]
    cos = token_similarity(last_tokens)
    off = ~torch.eye(n, dtype=torch.bool)
    pos = (m_t.detach() >= tau) & off
    neg = (~pos) & off
    loss = cos.new_zeros(())
    if pos.any():
        loss = loss + (1.0 - cos[pos]).mean()
    if neg.any():
        loss = loss + cos[neg].mean()
    return loss


@dataclass
class WSSSTrainConfig:
    steps: int = 500
    batch: int = 16
    peak_lr: float = 3e-4
    warmup: int = 50
    power: float = 0.9
    weight_decay: float = 0.01
    lambda_ptc: float = 1.0
    lambda_aux: float = 1.0
    tau: float = 0.5
    hflip: bool = True
    seed: int = 0

    def lr_at(self, step: int) -> float:
        if self.warmup and step < self.warmup:
            return self.peak_lr * (step + 1) / self.warmup
        span = max(1, self.steps - self.warmup)
        return self.peak_lr * (1 - (step - self.warmup) / span) ** self.power


def wsss_losses(model: PatchViT, x: torch.Tensor, y: torch.Tensor, cfg: WSSSTrainConfig) -> dict[str, torch.Tensor]:
    toks = model.tokens(x)
    l_cls = classification_loss_logits(pooled_logits(toks["last"], model.classifier.weight), y)
    l_aux = aux_classification_loss(toks["intermediate"], model.aux_classifier.weight, y)
    m_t = token_similarity(toks["intermediate"].detach())
    l_ptc = torch.stack([ptc_loss(toks["last"][i], m_t[i], cfg.tau) for i in range(x.shape[0])]).mean()
    total = l_cls + cfg.lambda_ptc * l_ptc + cfg.lambda_aux * l_aux
    return {"cls": l_cls, "ptc": l_ptc, "aux": l_aux, "total": total}


def train_wsss(
    model: PatchViT, images: np.ndarray, labels: np.ndarray, cfg: WSSSTrainConfig | None = None
) -> tuple[PatchViT, list[dict]]:
    """AdamW with linear warm-up then polynomial decay. Returns (model, per-step log)."""
    cfg = cfg or WSSSTrainConfig()
    rng = seed_everything(cfg.seed)
    x_all = to_input(np.asarray(images))
    y_all = torch.as_tensor(np.asarray(labels), dtype=torch.float32).reshape(len(x_all), -1)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr_at(0), weight_decay=cfg.weight_decay)
    history = []
    model.train()
    for step in range(cfg.steps):
        for g in opt.param_groups:
            g["lr"] = cfg.lr_at(step)
        idx = torch.from_numpy(rng.choice(len(x_all), size=min(cfg.batch, len(x_all)), replace=False))
        x = x_all[idx]
        if cfg.hflip:
            flip = torch.from_numpy(rng.random(len(idx)) < 0.5)
            x = torch.where(flip[:, None, None, None], x.flip(-1), x)
        terms = wsss_losses(model, x, y_all[idx], cfg)
        check_finite(terms["total"], f"wsss step {step}")
        opt.zero_grad(set_to_none=True)
        terms["total"].backward()
        opt.step()
        history.append({"step": step, **{k: float(v.detach()) for k, v in terms.items()}})
    model.eval()
    return model, history


@torch.no_grad()
def predict_cams(model: PatchViT, images: np.ndarray, k: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """(cams (B, N, N), class probabilities (B,)) for uint8 images."""
    model.eval()
    x = to_input(np.asarray(images))
    toks, p, _ = classify_forward(model, x)
    fmap = spatial_map(toks["last"], model.cfg.grid).double().numpy()
    w = model.classifier.weight.double().numpy()
    cams = np.stack([compute_cam(f, w, k) for f in fmap]) if len(fmap) else np.zeros((0,) * 3)
    return cams, p[:, k].double().numpy()


def upsample_cam(cam: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-cell upsampling of a grid map to pixel resolution."""
    n_r, n_c = cam.shape
    rows = np.minimum(np.arange(h) * n_r // h, n_r - 1)
    cols = np.minimum(np.arange(w) * n_c // w, n_c - 1)
    return cam[np.ix_(rows, cols)]


def cam_to_boxes(
    cam: np.ndarray, image_size: tuple[int, int], theta: float = 0.45, min_area: int = 2
) -> list[BoxPrompt]:
    """One box per 4-connected component of ``cam >= theta``.

    Grid cell (r, c) covers pixel rows [r*H/N, (r+1)*H/N); components with
    fewer than ``min_area`` cells are dropped.  Boxes are sorted by score.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie in (0, 1)")
    cam = np.asarray(cam, dtype=np.float64)
    h, w = image_size
    n_r, n_c = cam.shape
    lab, n = ndimage.label(cam >= theta)  # default structure is 4-connectivity
    boxes = []
    for i, sl in enumerate(ndimage.find_objects(lab), start=1):
        comp = lab[sl] == i
        if comp.sum() < min_area:
            continue
        r0, r1 = sl[0].start, sl[0].stop - 1
        c0, c1 = sl[1].start, sl[1].stop - 1
        boxes.append(
            BoxPrompt(
                r0 * h // n_r,
                c0 * w // n_c,
                (r1 + 1) * h // n_r - 1,
                (c1 + 1) * w // n_c - 1,
                float(cam[sl][comp].max()),
            )
        )
    return sorted(boxes, key=lambda b: (-b.score, b.as_tuple()))


def write_boxes_csv(path: str | Path, boxes: dict[str, Sequence[BoxPrompt]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "r0", "c0", "r1", "c1", "score"])
        for iid in sorted(boxes):
            for b in boxes[iid]:
                w.writerow([iid, b.row_min, b.col_min, b.row_max, b.col_max, repr(float(b.score))])


def read_boxes_csv(path: str | Path) -> dict[str, list[BoxPrompt]]:
    out: dict[str, list[BoxPrompt]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["image_id"], []).append(
                BoxPrompt(int(row["r0"]), int(row["c0"]), int(row["r1"]), int(row["c1"]), float(row["score"]))
            )
    return out


def save_vit(path, model: PatchViT, train_cfg: WSSSTrainConfig | None = None) -> None:
    meta = {"kind": "wsss", "vit_config": asdict(model.cfg), "train_config": None if train_cfg is None else asdict(train_cfg)}
    save_checkpoint(path, model.state_dict(), meta)


def load_vit(path) -> tuple[PatchViT, dict]:
    state, meta = load_checkpoint(path)
    if meta.get("kind") != "wsss":
        raise ValueError(f"{path}: not a WSSS checkpoint")
    model = PatchViT(ViTConfig(**meta["vit_config"]))
    model.load_state_dict(state)
    model.eval()
    return model, meta
