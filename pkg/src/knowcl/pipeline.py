"""Stage functions shared by the command line and the estimator."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import KnowCLNet, load_checkpoint, save_checkpoint
from .config import RunConfig
from .datacube import Cube, GroundTruth, load_cube, load_ground_truth, normalize, save_cube, save_ground_truth, synth_cube
from .evaluator import (
    MetricsReport,
    confusion,
    extract_features,
    head_predict,
    knn_predict,
    linear_eval,
    metrics,
)
from .patcher import AugmentConfig, ViewSampler
from .spectral import GroupedCube, PcaModel, apply_pca, group_bands, load_pca, save_pca
from .splitter import Split, load_split, save_split, split_disjoint
from .trainer import LabeledPixels, TrainResult, UnlabeledPixels, train

log = logging.getLogger(__name__)


@dataclass
class Scene:
    """A normalized, grouped and PCA-reduced scene ready for view sampling."""

    sampler: ViewSampler
    gt: GroundTruth
    pca_a: PcaModel
    pca_b: PcaModel


def reduce_scene(cube: Cube, n_components: int, fit_pixels: np.ndarray | None = None):
    """normalize -> halve the bands -> per-group PCA.

    ``fit_pixels`` restricts the PCA fit to the given (row, col) pixels.
    """
    grouped = group_bands(normalize(cube))
    models = []
    for g in (grouped.group_a, grouped.group_b):
        X = g.pixels()
        if fit_pixels is not None:
            X = X[fit_pixels[:, 0] * g.cols + fit_pixels[:, 1]]
        models.append(PcaModel(n_components).fit(X))
    return grouped, models[0], models[1]


def reduced_groups(cube: Cube, pca_a: PcaModel, pca_b: PcaModel):
    grouped = group_bands(normalize(cube))
    return GroupedCube(apply_pca(pca_a, grouped.group_a), apply_pca(pca_b, grouped.group_b))


def build_sampler(cube: Cube, pca_a: PcaModel, pca_b: PcaModel, aug: AugmentConfig) -> ViewSampler:
    return ViewSampler(reduced_groups(cube, pca_a, pca_b), aug)


def pixel_streams(split: Split, gt: GroundTruth, pool: str):
    labeled = LabeledPixels(split.train, split.train_labels)
    if pool == "train":
        unlabeled = labeled.unlabeled()
    else:
        rr, cc = np.meshgrid(np.arange(gt.rows), np.arange(gt.cols), indexing="ij")
        unlabeled = UnlabeledPixels(np.stack([rr.ravel(), cc.ravel()], axis=1))
    return labeled, unlabeled


def pipeline_meta(cfg: RunConfig) -> dict:
    a = cfg.augment
    return {
        "n_components": cfg.pca.n_components,
        "patch_size": a.patch_size,
        "crop_size": a.crop_size,
        "canonical_size": a.canonical_size,
    }


def default_pooling(mode: str) -> str:
    return "mean" if mode == "unsupervised" else "cls"


def evaluate(model: KnowCLNet, sampler: ViewSampler, split: Split, num_classes: int,
             protocols, *, k: int = 5, tau_knn: float = 0.07, pooling: str = "cls",
             linear_epochs: int = 100, linear_lr: float = 0.01, seed: int = 0) -> dict[str, MetricsReport]:
    out: dict[str, MetricsReport] = {}
    banks = None
    for proto in protocols:
        if proto in ("knn", "linear") and banks is None:
            banks = (extract_features(model, sampler, split.train, split.train_labels, pooling),
                     extract_features(model, sampler, split.test, split.test_labels, pooling))
        if proto == "knn":
            pred = knn_predict(banks[0], banks[1], k, tau_knn)
            out["knn"] = metrics(confusion(pred, split.test_labels, num_classes))
        elif proto == "linear":
            out["linear"], _ = linear_eval(banks[0], banks[1], linear_epochs, linear_lr, num_classes, seed)
        elif proto == "head":
            pred = head_predict(model, sampler, split.test)
            out["head"] = metrics(confusion(pred, split.test_labels, num_classes))
        else:
            raise ValueError(f"unknown protocol {proto!r}")
    return out


# ---------------------------------------------------------------------------
# file-backed stages


class Layout:
    """Artifact paths under an output directory."""

    def __init__(self, cfg: RunConfig, out_dir):
        self.cfg = cfg
        self.out = Path(out_dir)

    @property
    def cube(self) -> Path:
        return Path(self.cfg.data.cube) if self.cfg.data else self.out / self.cfg.name

    @property
    def gt(self) -> Path:
        return Path(self.cfg.data.gt) if self.cfg.data else self.out / f"{self.cfg.name}_gt"

    @property
    def split(self) -> Path:
        return self.out / "split.txt"

    def pca(self, group: str) -> Path:
        return self.out / f"pca_{group}"

    def checkpoint(self, mode: str) -> Path:
        return self.out / f"checkpoint_{mode}.pt"

    def report(self, mode: str) -> Path:
        return self.out / f"report_{mode}.ndjson"

    def metrics(self, mode: str) -> Path:
        return self.out / f"metrics_{mode}.json"


def stage_synth(cfg: RunConfig, out_dir) -> tuple[Path, Path]:
    if cfg.synth is None:
        raise ValueError("missing config key 'synth' (with rows, cols, bands, num_classes)")
    lay = Layout(cfg, out_dir)
    lay.out.mkdir(parents=True, exist_ok=True)
    cube, gt = synth_cube(cfg.synth)
    save_cube(cube, lay.out / cfg.name)
    save_ground_truth(gt, lay.out / f"{cfg.name}_gt")
    return lay.out / cfg.name, lay.out / f"{cfg.name}_gt"


def _ratio(cfg: RunConfig):
    r = cfg.split.ratio
    return {int(k): float(v) for k, v in r.items()} if isinstance(r, dict) else float(r)


def load_data(cfg: RunConfig, out_dir) -> tuple[Cube, GroundTruth]:
    lay = Layout(cfg, out_dir)
    cube, gt = load_cube(lay.cube), load_ground_truth(lay.gt)
    gt.check_matches(cube)
    return cube, gt


def stage_prepare(cfg: RunConfig, out_dir) -> tuple[Split, PcaModel, PcaModel]:
    lay = Layout(cfg, out_dir)
    lay.out.mkdir(parents=True, exist_ok=True)
    cube, gt = load_data(cfg, out_dir)
    split = split_disjoint(gt, _ratio(cfg))
    fit_pixels = split.train if cfg.pca.fit_on == "train" else None
    _, pca_a, pca_b = reduce_scene(cube, cfg.pca.n_components, fit_pixels)
    save_split(split, lay.split)
    save_pca(pca_a, lay.pca("a"))
    save_pca(pca_b, lay.pca("b"))
    return split, pca_a, pca_b


def load_prepared(cfg: RunConfig, out_dir) -> tuple[Scene, Split]:
    lay = Layout(cfg, out_dir)
    if not lay.split.exists():
        raise FileNotFoundError(f"split manifest {lay.split} not found; run 'prepare' first")
    cube, gt = load_data(cfg, out_dir)
    split = load_split(lay.split)
    pca_a, pca_b = load_pca(lay.pca("a")), load_pca(lay.pca("b"))
    if pca_a.n_components != cfg.pca.n_components:
        raise ValueError("PCA models on disk do not match pca.n_components; rerun 'prepare'")
    return Scene(build_sampler(cube, pca_a, pca_b, cfg.augment), gt, pca_a, pca_b), split


def stage_train(cfg: RunConfig, out_dir) -> TrainResult:
    lay = Layout(cfg, out_dir)
    scene, split = load_prepared(cfg, out_dir)
    labeled, unlabeled = pixel_streams(split, scene.gt, cfg.split.unlabeled_pool)
    bcfg = cfg.backbone_config(scene.gt.num_classes)
    result = train(scene.sampler, labeled, unlabeled, cfg.train, bcfg)
    mode = cfg.train.mode
    save_checkpoint(lay.checkpoint(mode), result.model, {"mode": mode, "pipeline": pipeline_meta(cfg)})
    result.report.to_ndjson(lay.report(mode))
    return result


def load_model(cfg: RunConfig, path) -> tuple[KnowCLNet, dict]:
    model, meta = load_checkpoint(path)
    expected = pipeline_meta(cfg)
    if meta.get("pipeline") != expected:
        raise ValueError(f"checkpoint pipeline {meta.get('pipeline')} does not match config {expected}")
    return model, meta


def stage_eval(cfg: RunConfig, out_dir, checkpoint=None, protocols=None, k=None):
    lay = Layout(cfg, out_dir)
    mode = cfg.train.mode
    model, meta = load_model(cfg, checkpoint or lay.checkpoint(mode))
    scene, split = load_prepared(cfg, out_dir)
    pooling = cfg.eval.pooling if cfg.eval.pooling != "auto" else default_pooling(meta.get("mode", mode))
    protocols = tuple(protocols or cfg.eval.protocols)
    if "head" in protocols and meta.get("mode") == "unsupervised":
        raise ValueError("the supervised head is untrained in an unsupervised checkpoint")
    return evaluate(model, scene.sampler, split, scene.gt.num_classes, protocols,
                    k=k or cfg.eval.k, tau_knn=cfg.eval.tau_knn, pooling=pooling,
                    linear_epochs=cfg.eval.linear_epochs, linear_lr=cfg.eval.linear_lr,
                    seed=cfg.train.seed), meta


def predict_raster(model: KnowCLNet, scene: Scene, split: Split, protocol: str, pooling: str,
                   k: int = 5, tau_knn: float = 0.07, scope: str = "full_image") -> np.ndarray:
    """Predicted class per pixel (0 where nothing was predicted)."""
    gt = scene.gt
    if scope == "labeled_only":
        coords = np.argwhere(gt.labels > 0)
    else:
        coords = np.argwhere(np.ones_like(gt.labels, dtype=bool))
    if protocol == "head":
        pred = head_predict(model, scene.sampler, coords)
    elif protocol == "knn":
        bank = extract_features(model, scene.sampler, split.train, split.train_labels, pooling)
        q = extract_features(model, scene.sampler, coords, np.zeros(len(coords), dtype=np.int64), pooling)
        pred = knn_predict(bank, q, k, tau_knn)
    else:
        raise ValueError(f"maps support the knn and head protocols, got {protocol!r}")
    out = np.zeros(gt.labels.shape, dtype=np.int32)
    out[coords[:, 0], coords[:, 1]] = pred
    return out
