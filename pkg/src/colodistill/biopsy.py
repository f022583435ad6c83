"""Optical biopsy by transfer learning, plus the few-shot data-efficiency protocol."""
from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .eval import ScoredSet, roc_auc
from .nets import AugmentConfig, EncoderConfig, augment, build_encoder, check_finite, seed_everything, to_input
from .records import PathologyLabel, largest_remainder, map_vienna

__all__ = [
    "PathologyLabel",
    "map_vienna",
    "BiopsyClassifier",
    "build_finetune_model",
    "random_encoder",
    "FinetuneConfig",
    "finetune",
    "predict_proba",
    "LabeledImages",
    "FewShotPlan",
    "CurveRow",
    "stratified_sample",
    "run_few_shot",
    "write_curve_csv",
    "read_curve_csv",
]


class BiopsyClassifier(nn.Module):
    """Copied encoder followed by a fresh two-layer head (dim -> hidden -> 1)."""

    def __init__(self, encoder: nn.Module, hidden: int = 64):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Sequential(nn.Linear(encoder.out_dim, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(x)).squeeze(-1)


def build_finetune_model(encoder: nn.Module, seed: int = 0, hidden: int = 64, in_dim: int | None = None) -> BiopsyClassifier:
    """Deep-copy ``encoder`` and attach a head whose init depends only on ``seed``.

    The global torch RNG is left untouched.
    """
    out_dim = getattr(encoder, "out_dim", None)
    if out_dim is None:
        raise ValueError("encoder must expose out_dim")
    if in_dim is not None and in_dim != out_dim:
        raise ValueError(f"encoder produces {out_dim}-d features, head expects {in_dim}")
    enc = copy.deepcopy(encoder)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = BiopsyClassifier(enc, hidden)
    for p in model.parameters():
        p.requires_grad_(True)
    return model


def random_encoder(cfg: EncoderConfig | None = None, seed: int = 0) -> nn.Module:
    """Randomly initialised encoder for the from-scratch comparison arm."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build_encoder(cfg or EncoderConfig())


@dataclass
class FinetuneConfig:
    steps: int = 200
    batch: int = 16
    optimizer: str = "adam"  # adam | sgd
    lr: float = 1e-4
    momentum: float = 0.9  # sgd only
    weight_decay: float = 0.0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def finetune(
    model: BiopsyClassifier, images: np.ndarray, labels: Sequence[int], cfg: FinetuneConfig | None = None
) -> tuple[BiopsyClassifier, list[float]]:
    """Binary cross-entropy over every parameter. Returns (model, per-step loss).

    Adam is the default because transferred features can sit at a very
    different scale from a fresh initialisation, which plain SGD at a shared
    learning rate turns into an unequal comparison.
    """
    cfg = cfg or FinetuneConfig()
    y_np = np.asarray(labels, dtype=np.int64)
    if len(np.unique(y_np)) < 2:
        raise ValueError("fine-tuning needs both classes in the training set")
    rng = seed_everything(cfg.seed)
    x_all = to_input(np.asarray(images))
    y_all = torch.as_tensor(y_np, dtype=torch.float32)
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    else:
        opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    losses = []
    model.train()
    for step in range(cfg.steps):
        idx = torch.from_numpy(rng.choice(len(x_all), size=min(cfg.batch, len(x_all)), replace=False))
        x = augment(x_all[idx], rng, cfg.augment)
        loss = F.binary_cross_entropy_with_logits(model(x), y_all[idx])
        check_finite(loss, f"fine-tune step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    model.eval()
    return model, losses


@torch.no_grad()
def predict_proba(model: BiopsyClassifier, images: np.ndarray, batch: int = 128) -> np.ndarray:
    model.eval()
    images = np.asarray(images)
    out = [torch.sigmoid(model(to_input(images[i : i + batch]))).double().numpy() for i in range(0, len(images), batch)]
    return np.concatenate(out) if out else np.zeros(0)


@dataclass
class LabeledImages:
    images: np.ndarray
    labels: np.ndarray
    ids: tuple[str, ...] | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.ids is not None:
            self.ids = tuple(self.ids)
            if len(self.ids) != len(self.labels):
                raise ValueError("ids and labels differ in length")


@dataclass
class FewShotPlan:
    shot_sizes: list[int]
    repetitions: int = 5
    base_seed: int = 0

    def __post_init__(self):
        self.shot_sizes = [int(s) for s in self.shot_sizes]
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if any(s < 2 for s in self.shot_sizes):
            raise ValueError("each shot size must be >= 2 so both classes can be drawn")


@dataclass(frozen=True)
class CurveRow:
    shot_size: int
    test_set: str
    mean_auc: float
    sd_auc: float
    n_reps: int


def stratified_sample(labels: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` indices drawn without replacement, class counts proportional to the pool.

    Every present class gets at least one draw.
    """
    labels = np.asarray(labels)
    if k > len(labels):
        raise ValueError(f"shot size {k} exceeds pool size {len(labels)}")
    classes = np.unique(labels)
    counts = largest_remainder(k, [float(np.mean(labels == c)) for c in classes])
    for i in range(len(counts)):
        if counts[i] == 0:
            counts[int(np.argmax(counts))] -= 1
            counts[i] = 1
    picked = [rng.choice(np.flatnonzero(labels == c), size=n, replace=False) for c, n in zip(classes, counts)]
    return np.sort(np.concatenate(picked))


def run_few_shot(
    plan: FewShotPlan,
    encoder: nn.Module | Callable[[int], nn.Module],
    pool: LabeledImages,
    test_sets: Mapping[str, LabeledImages],
    cfg: FinetuneConfig | None = None,
    on_rep: Callable[[int, int, dict[str, float]], None] | None = None,
) -> list[CurveRow]:
    """Fine-tune ``repetitions`` times per shot size; mean and sd of AUC per test set.

    Repetition r of shot size k uses seed (base_seed, k, r) for sampling,
    head init and training, so two encoders run under the same plan see
    identical samples (paired comparison).  ``encoder`` may instead be a
    factory taking that seed, which is how the randomly initialised arm gets
    a fresh initialisation per repetition.
    """
    cfg = cfg or FinetuneConfig()
    for k in plan.shot_sizes:
        if k > len(pool.labels):
            raise ValueError(f"shot size {k} exceeds pool size {len(pool.labels)}")
    if pool.ids is not None:
        for name, ts in test_sets.items():
            if ts.ids is not None and set(pool.ids) & set(ts.ids):
                raise ValueError(f"training pool overlaps test set {name!r}")
    rows = []
    for k in plan.shot_sizes:
        aucs: dict[str, list[float]] = {name: [] for name in test_sets}
        for r in range(plan.repetitions):
            seed = int(np.random.SeedSequence([plan.base_seed, k, r]).generate_state(1)[0])
            idx = stratified_sample(pool.labels, k, np.random.default_rng(seed))
            enc = encoder if isinstance(encoder, nn.Module) else encoder(seed)
            model = build_finetune_model(enc, seed=seed)
            finetune(model, pool.images[idx], pool.labels[idx], replace(cfg, seed=seed))
            got = {}
            for name, ts in test_sets.items():
                got[name] = roc_auc(ScoredSet(predict_proba(model, ts.images), ts.labels))
                aucs[name].append(got[name])
            if on_rep:
                on_rep(k, r, got)
        for name in test_sets:
            a = np.asarray(aucs[name])
            sd = float(a.std(ddof=1)) if len(a) > 1 else 0.0
            rows.append(CurveRow(k, name, float(a.mean()), sd, len(a)))
    return rows


def write_curve_csv(path: str | Path, rows: Sequence[CurveRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["shot_size", "test_set", "mean_auc", "sd_auc", "n_reps"])
        for r in rows:
            w.writerow([r.shot_size, r.test_set, repr(r.mean_auc), repr(r.sd_auc), r.n_reps])


def read_curve_csv(path: str | Path) -> list[CurveRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [
            CurveRow(int(r["shot_size"]), r["test_set"], float(r["mean_auc"]), float(r["sd_auc"]), int(r["n_reps"]))
            for r in csv.DictReader(fh)
        ]
