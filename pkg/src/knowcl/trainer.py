"""Supervised, contrastive and semi-supervised training loops."""
from __future__ import annotations

import contextlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneConfig, KnowCLNet
from .losses import adaptive_fused, contrastive_loss, cross_entropy
from .patcher import ViewSampler

log = logging.getLogger(__name__)

MODES = ("supervised", "unsupervised", "semisupervised")
LABELED_STREAM, UNLABELED_STREAM = 0, 1


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "semisupervised"
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-6
    tau: float = 0.5
    seed: int = 0
    grad_clip: float = 5.0
    deterministic: bool = True
    # ablation switch: fuse a detached contrastive term (no gradient reaches the encoder)
    detach_contrastive: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}; choose from {MODES}")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1 or (self.mode != "supervised" and self.batch_size < 2):
            raise ValueError("contrastive modes need batch_size >= 2")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass(frozen=True)
class LabeledPixels:
    coords: np.ndarray
    labels: np.ndarray  # classes 1..K

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(coords) != len(labels):
            raise ValueError(f"{len(coords)} pixels but {len(labels)} labels")
        if labels.size and labels.min() < 1:
            raise ValueError("labeled pixels need class labels >= 1")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.coords)

    def unlabeled(self) -> "UnlabeledPixels":
        return UnlabeledPixels(self.coords)


@dataclass(frozen=True)
class UnlabeledPixels:
    """Pixel centers with no label field at all."""

    coords: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coords", np.asarray(self.coords, dtype=np.int64).reshape(-1, 2))

    def __len__(self):
        return len(self.coords)


@dataclass
class TrainReport:
    mode: str
    epochs: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.epochs[-1]["loss"]

    def records(self) -> list[dict]:
        return self.epochs + self.steps

    def to_ndjson(self, path) -> None:
        """Write epoch then step records; wall-clock goes to ``<path>.timing.json``."""
        path = Path(path)
        path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records()))
        Path(str(path) + ".timing.json").write_text(json.dumps({"seconds_per_epoch": self.seconds}) + "\n")

    @classmethod
    def from_ndjson(cls, path) -> "TrainReport":
        rep = None
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            if rep is None:
                rep = cls(rec["mode"])
            (rep.epochs if rec["type"] == "epoch" else rep.steps).append(rec)
        if rep is None:
            raise ValueError(f"empty training report {path}")
        return rep


@dataclass
class TrainResult:
    model: KnowCLNet
    report: TrainReport


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1 + math.cos(math.pi * step / total_steps)) / 2


def epoch_order(seed: int, epoch: int, stream: int, n: int, length: int) -> np.ndarray:
    """Shuffled sample indices for one epoch, cycling through fresh permutations
    until ``length`` indices are available."""
    chunks, have, cycle = [], 0, 0
    while have < length:
        chunks.append(np.random.default_rng([seed, epoch, stream, cycle]).permutation(n))
        have += n
        cycle += 1
    return np.concatenate(chunks)[:length]


@contextlib.contextmanager
def _determinism(enabled: bool):
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled, warn_only=True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev, warn_only=True)


def _optimizer(model: KnowCLNet, cfg: TrainConfig) -> torch.optim.Optimizer:
    weights = list(model.loss_weights.parameters())
    ids = {id(p) for p in weights}
    rest = [p for p in model.parameters() if id(p) not in ids]
    return torch.optim.AdamW(
        [
            {"params": rest, "weight_decay": cfg.weight_decay},
            {"params": weights, "weight_decay": 0.0},
        ],
        lr=cfg.lr,
    )


def _run(sampler: ViewSampler, labeled: LabeledPixels | None, unlabeled: UnlabeledPixels | None,
         cfg: TrainConfig, bcfg: BackboneConfig) -> TrainResult:
    mode = cfg.mode
    if bcfg.in_channels != sampler.channels:
        raise ValueError(f"backbone expects {bcfg.in_channels} channels, views have {sampler.channels}")
    if bcfg.input_size != sampler.cfg.canonical_size:
        raise ValueError("backbone input_size must equal the augmentation canonical_size")

    with _determinism(cfg.deterministic):
        torch.manual_seed(cfg.seed)
        model = KnowCLNet(bcfg)
        opt = _optimizer(model, cfg)
        B = cfg.batch_size
        sizes = [len(s) for s in (labeled, unlabeled) if s is not None]
        n_iter = math.ceil(max(sizes) / B)
        total = cfg.epochs * n_iter
        report = TrainReport(mode)
        step = 0
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            model.train()
            lab_order = (epoch_order(cfg.seed, epoch, LABELED_STREAM, len(labeled), n_iter * B)
                         if labeled is not None else None)
            unl_order = (epoch_order(cfg.seed, epoch, UNLABELED_STREAM, len(unlabeled), n_iter * B)
                         if unlabeled is not None else None)
            acc: dict[str, list[float]] = {}
            lr = cosine_lr(step, total, cfg.lr)
            epoch_lr = lr
            for it in range(n_iter):
                lr = cosine_lr(step, total, cfg.lr)
                for g in opt.param_groups:
                    g["lr"] = lr
                rec = {"type": "step", "mode": mode, "epoch": epoch, "step": step, "lr": lr}
                rec.update(_step(model, opt, sampler, labeled, unlabeled, lab_order, unl_order,
                                 it * B, B, epoch, cfg))
                report.steps.append(rec)
                for key in ("loss", "l_ce", "l_cl", "pos_sim"):
                    if key in rec:
                        acc.setdefault(key, []).append(rec[key])
                step += 1
            summary = {"type": "epoch", "mode": mode, "epoch": epoch, "lr": epoch_lr}
            summary.update({k: float(np.mean(v)) for k, v in acc.items()})
            if mode == "semisupervised":
                summary["w"] = [float(v) for v in model.loss_weights.w.detach()]
            report.epochs.append(summary)
            report.seconds.append(time.perf_counter() - t0)
            log.info("epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, summary["loss"])
    model.eval()
    return TrainResult(model, report)


def _step(model, opt, sampler, labeled, unlabeled, lab_order, unl_order, start, B, epoch, cfg) -> dict:
    mode = cfg.mode
    parts = []
    if labeled is not None:
        idx_l = lab_order[start:start + B]
        parts.append(sampler.views(labeled.coords[idx_l], idx_l, pair=False, epoch=epoch,
                                   stream=LABELED_STREAM))
        targets = torch.from_numpy(labeled.labels[idx_l] - 1)
    if unlabeled is not None:
        idx_u = unl_order[start:start + B]
        ua, ub = sampler.views(unlabeled.coords[idx_u], idx_u, pair=True, epoch=epoch,
                               stream=UNLABELED_STREAM)
        parts += [ua, ub]

    cls_tok, mean_tok = model.encode_both(torch.cat(parts))
    out: dict = {}
    l_ce = l_cl = None
    nl = 0
    if labeled is not None:
        nl = len(idx_l)
        l_ce = cross_entropy(model.classify(cls_tok[:nl]), targets)
        out["l_ce"] = l_ce.item()
    if unlabeled is not None:
        nu = len(idx_u)
        z = model.project(mean_tok[nl:nl + nu])
        zhat = model.project(mean_tok[nl + nu:])
        l_cl = contrastive_loss(z, zhat, cfg.tau)
        out["l_cl"] = l_cl.item()
        out["pos_sim"] = (z * zhat).sum(dim=1).mean().item()

    if mode == "supervised":
        loss = l_ce
    elif mode == "unsupervised":
        loss = l_cl
    else:
        w = model.loss_weights.w
        out["w"] = [float(v) for v in w.detach()]
        cl = l_cl.detach() if cfg.detach_contrastive else l_cl
        loss = adaptive_fused(torch.stack([l_ce, cl]).double(), w.double())
    out["loss"] = loss.item()
    if not math.isfinite(out["loss"]):
        raise FloatingPointError(f"non-finite loss at epoch {epoch}")

    opt.zero_grad(set_to_none=True)
    loss.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    opt.step()
    return out


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


def train_supervised(sampler: ViewSampler, labeled: LabeledPixels, cfg: TrainConfig,
                     bcfg: BackboneConfig) -> TrainResult:
    """Cross-entropy on the group-A view through the supervised head."""
    _require(cfg.mode == "supervised", "train_supervised needs mode='supervised'")
    _require(isinstance(labeled, LabeledPixels) and len(labeled) > 0, "empty labeled training set")
    _require(int(labeled.labels.max()) <= bcfg.num_classes, "label exceeds backbone num_classes")
    return _run(sampler, labeled, None, cfg, bcfg)


def train_unsupervised(sampler: ViewSampler, unlabeled: UnlabeledPixels, cfg: TrainConfig,
                       bcfg: BackboneConfig) -> TrainResult:
    """InfoNCE between the group-A and group-B views through the contrastive head."""
    _require(cfg.mode == "unsupervised", "train_unsupervised needs mode='unsupervised'")
    if isinstance(unlabeled, LabeledPixels):
        unlabeled = unlabeled.unlabeled()
    _require(len(unlabeled) >= 2 and cfg.batch_size >= 2, "contrastive batches need N >= 2")
    return _run(sampler, None, unlabeled, cfg, bcfg)


def train_semisupervised(sampler: ViewSampler, labeled: LabeledPixels, unlabeled: UnlabeledPixels,
                         cfg: TrainConfig, bcfg: BackboneConfig) -> TrainResult:
    """Adaptive fusion of the supervised and contrastive losses with learnable task weights."""
    _require(cfg.mode == "semisupervised", "train_semisupervised needs mode='semisupervised'")
    _require(isinstance(labeled, LabeledPixels) and len(labeled) > 0, "empty labeled stream")
    if isinstance(unlabeled, LabeledPixels):
        unlabeled = unlabeled.unlabeled()
    _require(len(unlabeled) >= 2, "unlabeled stream needs at least 2 pixels")
    _require(int(labeled.labels.max()) <= bcfg.num_classes, "label exceeds backbone num_classes")
    return _run(sampler, labeled, unlabeled, cfg, bcfg)


def train(sampler: ViewSampler, labeled: LabeledPixels | None, unlabeled: UnlabeledPixels | None,
          cfg: TrainConfig, bcfg: BackboneConfig) -> TrainResult:
    if cfg.mode == "supervised":
        return train_supervised(sampler, labeled, cfg, bcfg)
    if cfg.mode == "unsupervised":
        return train_unsupervised(sampler, unlabeled, cfg, bcfg)
    return train_semisupervised(sampler, labeled, unlabeled, cfg, bcfg)
