"""Evaluation protocols (weighted kNN, linear probe, supervised head) and
classification metrics."""
from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_labels, check_pixels, l2_normalize
from .backbone import KnowCLNet
from .datacube import GroundTruth
from .patcher import ViewSampler


@dataclass(frozen=True, eq=False)
class FeatureBank:
    features: np.ndarray  # n, d; unit rows
    labels: np.ndarray
    coords: np.ndarray

    def __post_init__(self):
        n = len(self.features)
        if len(self.labels) != n or len(self.coords) != n:
            raise ValueError("features, labels and coords must have equal length")

    def __len__(self):
        return len(self.features)


@dataclass(frozen=True)
class MetricsReport:
    oa: float
    aa: float
    kappa: float
    per_class_accuracy: list[float]
    degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# features


@torch.no_grad()
def embed(model: KnowCLNet, sampler: ViewSampler, coords, pooling: str = "cls",
          batch_size: int = 256) -> np.ndarray:
    model.eval()
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    out = []
    for s in range(0, len(coords), batch_size):
        x = sampler.eval_views(coords[s:s + batch_size])
        out.append(model.encode(x, pooling).double().numpy())
    if not out:
        return np.zeros((0, model.cfg.out_dim))
    return np.concatenate(out)


def extract_features(model: KnowCLNet, sampler: ViewSampler, coords, labels,
                     pooling: str = "cls") -> FeatureBank:
    """Unit-normalized backbone embeddings of the deterministic (center) views."""
    if sampler.channels != model.cfg.in_channels or sampler.cfg.canonical_size != model.cfg.input_size:
        raise ValueError("view pipeline does not match the checkpoint's backbone configuration")
    feats = l2_normalize(embed(model, sampler, coords, pooling))
    return FeatureBank(feats, np.asarray(labels, dtype=np.int64), np.asarray(coords, dtype=np.int64).reshape(-1, 2))


@torch.no_grad()
def head_predict(model: KnowCLNet, sampler: ViewSampler, coords, batch_size: int = 256) -> np.ndarray:
    """Class labels (1-based) from the supervised head."""
    model.eval()
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    preds = []
    for s in range(0, len(coords), batch_size):
        logits = model.classify(model.encode(sampler.eval_views(coords[s:s + batch_size]), "cls"))
        preds.append(logits.argmax(dim=1).numpy() + 1)
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# weighted kNN


def knn_predict(bank: FeatureBank, queries: FeatureBank, k: int = 5, tau_knn: float = 0.07,
                chunk: int = 1024) -> np.ndarray:
    """Each query takes its k most cosine-similar bank rows (ties: lower row index);
    classes score the sum of exp(sim / tau_knn) over their neighbors and the
    highest score wins (ties: smallest class)."""
    if len(bank) == 0:
        raise ValueError("empty feature bank")
    if not 1 <= k <= len(bank):
        raise ValueError(f"k={k} must be in [1, {len(bank)}]")
    classes = np.unique(bank.labels)
    onehot = bank.labels[:, None] == classes[None, :]
    train = bank.features.astype(np.float64)
    preds = np.empty(len(queries), dtype=np.int64)
    for s in range(0, len(queries), chunk):
        sims = queries.features[s:s + chunk].astype(np.float64) @ train.T
        nbr = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        top = np.take_along_axis(sims, nbr, axis=1)
        weights = np.exp(top / tau_knn)
        scores = np.einsum("qk,qkc->qc", weights, onehot[nbr])
        preds[s:s + chunk] = classes[np.argmax(scores, axis=1)]
    return preds


class WeightedKNNClassifier(ClassifierMixin, BaseEstimator):
    """Cosine-similarity kNN with exponential vote weights."""

    def __init__(self, k: int = 5, tau_knn: float = 0.07):
        self.k = k
        self.tau_knn = tau_knn

    def fit(self, X, y):
        X = check_pixels(X)
        y = check_labels(y, len(X))
        self.bank_ = FeatureBank(l2_normalize(X), y, np.zeros((len(X), 2), dtype=np.int64))
        self.classes_ = np.unique(y)
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = check_pixels(X)
        q = FeatureBank(l2_normalize(X), np.zeros(len(X), dtype=np.int64), np.zeros((len(X), 2), dtype=np.int64))
        return knn_predict(self.bank_, q, self.k, self.tau_knn)


# ---------------------------------------------------------------------------
# linear probe


class LinearProbeClassifier(ClassifierMixin, BaseEstimator):
    """Single linear layer trained with AdamW on frozen features."""

    def __init__(self, epochs: int = 100, lr: float = 0.01, batch_size: int = 256,
                 weight_decay: float = 1e-6, num_classes: int | None = None, random_state: int = 0):
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.num_classes = num_classes
        self.random_state = random_state

    def fit(self, X, y):
        X = check_pixels(X)
        y = check_labels(y, len(X))
        if y.min() < 1:
            raise ValueError("class labels must be >= 1")
        K = self.num_classes or int(y.max())
        gen = torch.Generator().manual_seed(self.random_state)
        layer = torch.nn.Linear(X.shape[1], K)
        with torch.no_grad():
            bound = 1 / np.sqrt(X.shape[1])
            layer.weight.uniform_(-bound, bound, generator=gen)
            layer.bias.zero_()
        opt = torch.optim.AdamW(layer.parameters(), lr=self.lr, weight_decay=self.weight_decay)
        xt = torch.from_numpy(X).float()
        yt = torch.from_numpy(y - 1)
        for _ in range(self.epochs):
            perm = torch.randperm(len(xt), generator=gen)
            for s in range(0, len(xt), self.batch_size):
                idx = perm[s:s + self.batch_size]
                loss = F.cross_entropy(layer(xt[idx]), yt[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
        self.layer_ = layer.eval()
        self.classes_ = np.arange(1, K + 1)
        return self

    @torch.no_grad()
    def decision_function(self, X):
        check_is_fitted(self)
        return self.layer_(torch.from_numpy(check_pixels(X)).float()).numpy()

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1) + 1


def linear_eval(bank_train: FeatureBank, bank_test: FeatureBank, epochs: int = 100, lr: float = 0.01,
                num_classes: int | None = None, seed: int = 0) -> tuple[MetricsReport, np.ndarray]:
    K = num_classes or int(max(bank_train.labels.max(), bank_test.labels.max()))
    probe = LinearProbeClassifier(epochs=epochs, lr=lr, num_classes=K, random_state=seed)
    probe.fit(bank_train.features, bank_train.labels)
    pred = probe.predict(bank_test.features)
    return metrics(confusion(pred, bank_test.labels, K)), pred


# ---------------------------------------------------------------------------
# metrics


def confusion(pred, truth, num_classes: int | None = None) -> np.ndarray:
    """K x K counts, entry (i, j) = truth class i+1 predicted as class j+1."""
    pred = np.asarray(pred, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"{len(pred)} predictions for {len(truth)} truth labels")
    if truth.size and truth.min() < 1:
        raise ValueError("truth labels must be >= 1")
    if pred.size and pred.min() < 1:
        raise ValueError("predicted labels must be >= 1")
    K = num_classes or int(max(pred.max(initial=0), truth.max(initial=0)))
    if truth.size and max(pred.max(), truth.max()) > K:
        raise ValueError(f"label exceeds num_classes={K}")
    cm = np.zeros((K, K), dtype=np.int64)
    np.add.at(cm, (truth - 1, pred - 1), 1)
    return cm


def metrics(cm) -> MetricsReport:
    """OA, AA and Cohen's kappa of a K x K confusion matrix.

    Kappa is formed from exact integer sums, (n*trace - sum r*c) / (n^2 - sum r*c),
    so it carries a single rounding.
    """
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {cm.shape}")
    if cm.min(initial=0) < 0:
        raise ValueError("confusion counts must be non-negative")
    total = int(cm.sum())
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    rows = [int(v) for v in cm.sum(axis=1)]
    cols = [int(v) for v in cm.sum(axis=0)]
    trace = int(np.trace(cm))
    oa = trace / total
    per_class = [int(cm[i, i]) / rows[i] if rows[i] else 0.0 for i in range(len(cm))]
    aa = float(np.mean([a for a, r in zip(per_class, rows) if r]))
    chance = sum(r * c for r, c in zip(rows, cols))
    if chance == total * total:
        return MetricsReport(oa, aa, 1.0 if trace == total else 0.0, per_class, degenerate=True)
    kappa = (total * trace - chance) / (total * total - chance)
    return MetricsReport(oa, aa, kappa, per_class)


def save_metrics(reports: dict[str, MetricsReport], path) -> None:
    Path(path).write_text(json.dumps({k: v.to_dict() for k, v in reports.items()}, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# maps

PALETTE = [
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60),
    (250, 190, 212), (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200),
    (128, 0, 0), (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128),
]
_GOLDEN_ANGLE = 137.50776405003785 / 360.0


def palette(n: int) -> np.ndarray:
    """n colors; beyond the fixed table hues step by the golden angle."""
    colors = list(PALETTE[:n])
    for i in range(len(PALETTE), n):
        h = ((i - len(PALETTE) + 1) * _GOLDEN_ANGLE) % 1.0
        r, g, b = colorsys.hsv_to_rgb(h, 0.75, 0.95)
        colors.append((round(r * 255), round(g * 255), round(b * 255)))
    return np.asarray(colors, dtype=np.uint8)


def colorize(pred: np.ndarray, gt: GroundTruth | None = None, scope: str = "full_image") -> np.ndarray:
    if scope not in ("labeled_only", "full_image"):
        raise ValueError(f"unknown map scope {scope!r}")
    pred = np.asarray(pred, dtype=np.int64)
    if pred.ndim != 2:
        raise ValueError("predictions must be a 2-D label raster")
    if pred.min() < 0:
        raise ValueError("negative class index")
    if scope == "labeled_only":
        if gt is None or gt.labels.shape != pred.shape:
            raise ValueError("labeled_only maps need ground truth of the same shape")
        pred = np.where(gt.labels > 0, pred, 0)
    return palette(int(pred.max()) + 1)[pred]


def render_map(pred, gt: GroundTruth | None, out, scope: str = "full_image") -> None:
    Image.fromarray(colorize(pred, gt, scope), mode="RGB").save(out, format="PNG")
