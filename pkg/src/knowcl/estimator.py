"""scikit-learn style front end for the whole pipeline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_coords, check_labels
from .backbone import BackboneConfig
from .datacube import Cube
from .evaluator import (
    FeatureBank,
    LinearProbeClassifier,
    extract_features,
    head_predict,
    knn_predict,
)
from .patcher import AugmentConfig, ViewSampler
from .pipeline import default_pooling, reduce_scene
from .spectral import GroupedCube, apply_pca
from .trainer import LabeledPixels, TrainConfig, UnlabeledPixels, train


class KnowCLClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Pixel classifier for one hyperspectral scene.

    ``X`` holds (row, col) pixel coordinates into ``cube``; ``y`` holds their
    classes (1..K).  ``fit`` normalizes the cube, halves its bands, reduces
    each half with PCA, trains the encoder in the chosen ``mode`` and then
    readies the chosen evaluation ``protocol``.  ``transform`` returns the
    unit-normalized encoder embeddings of the given pixels.

    Examples
    --------
    >>> clf = KnowCLClassifier(mode="supervised", epochs=2)       # doctest: +SKIP
    >>> clf.fit(split.train, split.train_labels, cube=cube)       # doctest: +SKIP
    >>> clf.score(split.test, split.test_labels)                  # doctest: +SKIP
    """

    def __init__(
        self,
        mode: str = "semisupervised",
        n_components: int = 5,
        pca_fit: str = "scene",
        patch_size: int = 25,
        crop_size: int = 23,
        canonical_size: int = 24,
        flip_prob: float = 0.5,
        blur_prob: float = 0.5,
        blur_sigma_range: tuple[float, float] = (0.1, 2.0),
        variant: str = "vit_hsi",
        drop_path_rate: float = 0.1,
        epochs: int = 30,
        batch_size: int = 64,
        lr: float = 1e-3,
        weight_decay: float = 1e-6,
        tau: float = 0.5,
        unlabeled_pool: str = "train",
        protocol: str = "knn",
        k: int = 5,
        tau_knn: float = 0.07,
        random_state: int = 0,
        deterministic: bool = True,
    ):
        self.mode = mode
        self.n_components = n_components
        self.pca_fit = pca_fit
        self.patch_size = patch_size
        self.crop_size = crop_size
        self.canonical_size = canonical_size
        self.flip_prob = flip_prob
        self.blur_prob = blur_prob
        self.blur_sigma_range = blur_sigma_range
        self.variant = variant
        self.drop_path_rate = drop_path_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.tau = tau
        self.unlabeled_pool = unlabeled_pool
        self.protocol = protocol
        self.k = k
        self.tau_knn = tau_knn
        self.random_state = random_state
        self.deterministic = deterministic

    def _check_params(self):
        if self.protocol not in ("knn", "linear", "head"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.protocol == "head" and self.mode == "unsupervised":
            raise ValueError("protocol='head' needs a mode that trains the supervised head")
        if self.unlabeled_pool not in ("train", "scene"):
            raise ValueError(f"unlabeled_pool must be 'train' or 'scene', got {self.unlabeled_pool!r}")
        if self.pca_fit not in ("scene", "train"):
            raise ValueError(f"pca_fit must be 'scene' or 'train', got {self.pca_fit!r}")

    def fit(self, X, y, *, cube: Cube):
        self._check_params()
        if not isinstance(cube, Cube):
            raise TypeError("cube must be a knowcl.Cube")
        X = check_coords(X, cube.rows, cube.cols)
        y = check_labels(y, len(X))
        if len(X) == 0:
            raise ValueError("no training pixels")

        aug = AugmentConfig(self.patch_size, self.crop_size, self.canonical_size, self.flip_prob,
                            self.blur_prob, tuple(self.blur_sigma_range), self.random_state)
        grouped, pca_a, pca_b = reduce_scene(cube, self.n_components, X if self.pca_fit == "train" else None)
        reduced = GroupedCube(apply_pca(pca_a, grouped.group_a), apply_pca(pca_b, grouped.group_b))
        sampler = ViewSampler(reduced, aug)

        self.classes_ = np.unique(y)
        num_classes = int(y.max())
        bcfg = BackboneConfig.preset(self.variant, in_channels=self.n_components, input_size=self.canonical_size,
                                     num_classes=num_classes, drop_path_rate=self.drop_path_rate)
        tcfg = TrainConfig(mode=self.mode, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           weight_decay=self.weight_decay, tau=self.tau, seed=self.random_state,
                           deterministic=self.deterministic)
        labeled = LabeledPixels(X, y)
        if self.unlabeled_pool == "train":
            unlabeled = labeled.unlabeled()
        else:
            unlabeled = UnlabeledPixels(np.argwhere(np.ones((cube.rows, cube.cols), dtype=bool)))
        result = train(sampler, labeled, unlabeled, tcfg, bcfg)

        self.model_ = result.model
        self.report_ = result.report
        self.sampler_ = sampler
        self.pca_ = (pca_a, pca_b)
        self.shape_ = (cube.rows, cube.cols)
        self.pooling_ = default_pooling(self.mode)
        self.bank_ = extract_features(self.model_, sampler, X, y, self.pooling_)
        if self.protocol == "linear":
            self.probe_ = LinearProbeClassifier(num_classes=num_classes, random_state=self.random_state)
            self.probe_.fit(self.bank_.features, y)
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_coords(X, *self.shape_)
        return extract_features(self.model_, self.sampler_, X, np.zeros(len(X), dtype=np.int64),
                                self.pooling_).features

    def predict(self, X):
        check_is_fitted(self)
        X = check_coords(X, *self.shape_)
        if self.protocol == "head":
            return head_predict(self.model_, self.sampler_, X)
        feats = self.transform(X)
        if self.protocol == "linear":
            return self.probe_.predict(feats)
        queries = FeatureBank(feats, np.zeros(len(X), dtype=np.int64), X)
        return knn_predict(self.bank_, queries, min(self.k, len(self.bank_)), self.tau_knn)
