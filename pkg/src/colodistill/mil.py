"""Dual-teacher / single-student multiple-instance learning.

Two teachers share the instance encoder with the student: an attention
(ABMIL) pooling teacher and a critical-instance (DSMIL) pooling teacher.
Their normalised attentions are merged into per-image pseudo labels that
supervise the student's instance head.  At inference only the student is
used; the report score is the max over its instance scores.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .nets import (
    AugmentConfig,
    EncoderConfig,
    augment,
    build_encoder,
    check_finite,
    seed_everything,
    to_input,
)
from .records import Bag

log = logging.getLogger(__name__)


class ABMILHead(nn.Module):
    """Two-layer attention scorer: embedding -> scalar."""

    def __init__(self, dim: int, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.tanh(self.fc1(h))).squeeze(-1)


class DSMILHead(nn.Module):
    def __init__(self, dim: int, q_dim: int = 64):
        super().__init__()
        self.g = nn.Linear(dim, 1)
        self.f_q = nn.Linear(dim, q_dim)
        self.f_v = nn.Linear(dim, dim)


def abmil_pool(h: torch.Tensor, head: ABMILHead) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns (softmax attention over the bag, attention-weighted mean embedding)."""
    a = torch.softmax(head(h), dim=0)
    return a, a @ h


def dsmil_pool(h: torch.Tensor, head: DSMILHead) -> tuple[torch.Tensor, torch.Tensor, int, torch.Tensor]:
    """Non-local attention against the critical instance.

    Returns (attention, bag feature, critical index, critical instance logit).
    """
    inst = head.g(h).squeeze(-1)
    crit = int(torch.argmax(inst))
    q = head.f_q(h)
    v = head.f_v(h)
    a = torch.softmax(q @ q[crit], dim=0)
    return a, a @ v, crit, inst[crit]


def merge_pseudo_labels(att1, att2, bag_label: int) -> np.ndarray:
    """Per-bag max-rescaled mean of two attention vectors; zeros for negative bags."""
    a1 = np.asarray(att1, dtype=np.float64)
    a2 = np.asarray(att2, dtype=np.float64)
    if a1.shape != a2.shape:
        raise ValueError(f"attention lengths differ: {a1.shape} vs {a2.shape}")
    if bag_label == 0:
        return np.zeros_like(a1)

    def rescale(a):
        m = a.max() if a.size else 0.0
        return a / m if m > 0 else np.zeros_like(a)

    return np.clip((rescale(a1) + rescale(a2)) / 2.0, 0.0, 1.0)


@dataclass
class MILConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    attn_hidden: int = 64
    q_dim: int = 64

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "attn_hidden": self.attn_hidden, "q_dim": self.q_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "MILConfig":
        enc = dict(d.get("encoder", {}))
        if "channels" in enc:
            enc["channels"] = tuple(enc["channels"])
        return cls(EncoderConfig(**enc), d.get("attn_hidden", 64), d.get("q_dim", 64))


class MILModel(nn.Module):
    def __init__(self, cfg: MILConfig | None = None):
        super().__init__()
        self.cfg = cfg or MILConfig()
        dim = self.cfg.encoder.out_dim
        self.encoder = build_encoder(self.cfg.encoder)
        self.abmil_head = ABMILHead(dim, self.cfg.attn_hidden)
        self.dsmil_head = DSMILHead(dim, self.cfg.q_dim)
        self.bag_head1 = nn.Linear(dim, 1)
        self.bag_head2 = nn.Linear(dim, 1)
        self.instance_head = nn.Linear(dim, 1)

    @property
    def dim(self) -> int:
        return self.cfg.encoder.out_dim

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def teacher_forward(self, x: torch.Tensor) -> dict:
        h = self.embed(x)
        a1, f1 = abmil_pool(h, self.abmil_head)
        a2, f2, crit, crit_logit = dsmil_pool(h, self.dsmil_head)
        return {
            "att_abmil": a1,
            "att_dsmil": a2,
            "logit_abmil": self.bag_head1(f1).squeeze(-1),
            "logit_dsmil": self.bag_head2(f2).squeeze(-1),
            "critical_index": crit,
            "critical_logit": crit_logit,
        }

    def instance_logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.instance_head(self.embed(x)).squeeze(-1)


def _bce(logit: torch.Tensor, target) -> torch.Tensor:
    t = torch.as_tensor(target, dtype=logit.dtype).expand_as(logit)
    return F.binary_cross_entropy_with_logits(logit, t)


def teacher_losses(model: MILModel, x: torch.Tensor, label: int, critical_weight: float = 1.0) -> dict:
    """Per-term teacher losses for one bag.

    ``abmil`` and ``dsmil`` are the bag-level CE of each teacher; ``critical``
    is the CE of the critical instance's logit, which is what trains the
    DSMIL instance classifier (argmax carries no gradient).
    """
    out = model.teacher_forward(x)
    terms = {
        "abmil": _bce(out["logit_abmil"], float(label)),
        "dsmil": _bce(out["logit_dsmil"], float(label)),
        "critical": _bce(out["critical_logit"], float(label)),
    }
    terms["total"] = terms["abmil"] + terms["dsmil"] + critical_weight * terms["critical"]
    return terms


def teacher_step(model: MILModel, x: torch.Tensor, label: int, critical_weight: float = 1.0) -> torch.Tensor:
    return teacher_losses(model, x, label, critical_weight)["total"]


def student_step(model: MILModel, x: torch.Tensor, pseudo) -> torch.Tensor:
    """Mean soft-target CE between instance predictions and pseudo labels."""
    logits = model.instance_logits(x)
    target = torch.as_tensor(np.asarray(pseudo), dtype=logits.dtype)
    if target.shape != logits.shape:
        raise ValueError(f"pseudo labels {tuple(target.shape)} do not match {len(logits)} instances")
    return F.binary_cross_entropy_with_logits(logits, target)


@torch.no_grad()
def predict_instance(model: MILModel, images) -> np.ndarray:
    """Student probabilities for uint8 images (N,H,W,3) or a prepared float batch."""
    model.eval()
    x = images if torch.is_tensor(images) and images.is_floating_point() else to_input(images)
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    dtype = next(model.parameters()).dtype
    p = torch.sigmoid(model.instance_logits(x.to(dtype))).double().numpy()
    return p[0] if single else p


def predict_report(instance_scores: Sequence[float]) -> float:
    s = list(instance_scores)
    if not s:
        raise ValueError("no instance scores")
    return max(s)


@torch.no_grad()
def compute_pseudo_labels(model: MILModel, x: torch.Tensor, label: int) -> np.ndarray:
    if label == 0:
        return np.zeros(x.shape[0])
    out = model.teacher_forward(x)
    return merge_pseudo_labels(out["att_abmil"].double().numpy(), out["att_dsmil"].double().numpy(), label)


@dataclass
class MILTrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0
    student_batch: int = 32
    critical_weight: float = 1.0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TensorBag:
    record_id: str
    pixels: torch.Tensor  # uint8 (N, 3, H, W)
    label: int
    image_ids: tuple[str, ...] = ()

    @classmethod
    def from_bag(cls, bag: Bag) -> "TensorBag":
        arr = np.stack([s.pixels for s in bag.instances])
        return cls(
            bag.record_id,
            torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous(),
            bag.label,
            tuple(s.image_id for s in bag.instances),
        )


def as_tensor_bags(bags) -> list[TensorBag]:
    return [b if isinstance(b, TensorBag) else TensorBag.from_bag(b) for b in bags]


@dataclass
class TrainLogRow:
    round: int
    branch: str
    loss: float


def _inputs(tb: TensorBag, dtype) -> torch.Tensor:
    return to_input(tb.pixels, dtype)


def train_alternating(
    model: MILModel,
    bags,
    epochs: int,
    cfg: MILTrainConfig | None = None,
    on_round: Callable[[int, MILModel], None] | None = None,
) -> tuple[MILModel, list[TrainLogRow]]:
    """Alternate one teacher epoch and one student epoch, ``epochs`` times.

    Pseudo labels are recomputed from the current teachers (no augmentation,
    eval mode) at the start of every student epoch.  ``on_round(round, model)``
    runs after each round, e.g. for validation; it must not touch the RNGs.
    """
    cfg = cfg or MILTrainConfig()
    tbags = as_tensor_bags(bags)
    if not tbags:
        raise ValueError("no bags to train on")
    rng = seed_everything(cfg.seed)
    dtype = next(model.parameters()).dtype
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    history: list[TrainLogRow] = []
    for rnd in range(1, epochs + 1):
        model.train()
        total = 0.0
        for bi in rng.permutation(len(tbags)):
            tb = tbags[bi]
            x = augment(_inputs(tb, dtype), rng, cfg.augment)
            loss = teacher_step(model, x, tb.label, cfg.critical_weight)
            check_finite(loss, f"round {rnd} teacher bag {tb.record_id}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item()
        history.append(TrainLogRow(rnd, "teacher", total / len(tbags)))

        model.eval()
        xs, ys = [], []
        for tb in tbags:
            x = _inputs(tb, dtype)
            ys.append(compute_pseudo_labels(model, x, tb.label))
            xs.append(tb.pixels)
        all_px = torch.cat(xs)
        all_y = np.concatenate(ys)
        model.train()
        order = rng.permutation(len(all_y))
        total, n_batches = 0.0, 0
        for s in range(0, len(order), cfg.student_batch):
            idx = order[s : s + cfg.student_batch]
            x = augment(to_input(all_px[torch.from_numpy(idx)], dtype), rng, cfg.augment)
            loss = student_step(model, x, all_y[idx])
            check_finite(loss, f"round {rnd} student batch {n_batches}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item()
            n_batches += 1
        history.append(TrainLogRow(rnd, "student", total / n_batches))
        log.info("round %d teacher %.4f student %.4f", rnd, history[-2].loss, history[-1].loss)
        if on_round is not None:
            on_round(rnd, model)
    model.eval()
    return model, history


def write_train_log(path: str | Path, rows: Sequence[TrainLogRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "branch", "loss"])
        for r in rows:
            w.writerow([r.round, r.branch, repr(float(r.loss))])


def save_mil(path: str | Path, model: MILModel, train_cfg: MILTrainConfig | None = None, seed: int | None = None,
             extra: dict | None = None) -> None:
    meta = {
        "kind": "mil",
        "C": model.dim,
        "model_config": model.cfg.to_dict(),
        "train_config": None if train_cfg is None else train_cfg.to_dict(),
        "seed": seed,
    }
    meta.update(extra or {})
    save_checkpoint(path, model.state_dict(), meta)


def load_mil(path: str | Path) -> tuple[MILModel, dict]:
    state, meta = load_checkpoint(path)
    if meta.get("kind") != "mil":
        raise ValueError(f"{path}: not a MIL checkpoint (kind={meta.get('kind')})")
    model = MILModel(MILConfig.from_dict(meta["model_config"]))
    model.load_state_dict(state)
    model.eval()
    return model, meta


@torch.no_grad()
def score_bags(model: MILModel, bags) -> tuple[list[np.ndarray], np.ndarray]:
    """Per-bag student instance scores and max-pooled report scores."""
    inst = [predict_instance(model, _inputs(tb, next(model.parameters()).dtype)) for tb in as_tensor_bags(bags)]
    return inst, np.array([predict_report(s) for s in inst])
