"""Spectral grouping and per-group PCA."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_pixels
from .datacube import Cube


@dataclass(frozen=True)
class GroupedCube:
    group_a: Cube
    group_b: Cube


def group_bands(cube: Cube) -> GroupedCube:
    """Split bands into [0, ceil(C/2)) and [ceil(C/2), C)."""
    if cube.bands < 2:
        raise ValueError("cannot group a single-band cube")
    half = -(-cube.bands // 2)
    return GroupedCube(
        Cube(cube.values[:half], name=f"{cube.name}_a"),
        Cube(cube.values[half:], name=f"{cube.name}_b"),
    )


class PcaModel(TransformerMixin, BaseEstimator):
    """Principal components of pixel spectra.

    Components come from an eigendecomposition of the ``1/(n-1)`` covariance,
    accumulated in float64.  Each component is signed so that its
    largest-magnitude entry is positive, which makes the fit deterministic.

    Parameters
    ----------
    n_components : int
        Number of leading components to keep.

    Attributes
    ----------
    mean_ : ndarray of shape (n_bands,)
    components_ : ndarray of shape (n_components, n_bands)
        Orthonormal rows, ordered by decreasing explained variance.
    explained_variance_ : ndarray of shape (n_components,)
    """

    def __init__(self, n_components: int = 10):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_pixels(X, min_samples=2)
        n, d = X.shape
        k = self.n_components
        if not 1 <= k <= d:
            raise ValueError(f"n_components={k} must be in [1, {d}] (number of bands)")
        if n < k + 1:
            raise ValueError(f"need at least {k + 1} pixels to fit {k} components, got {n}")
        mean = X.mean(axis=0)
        centered = X - mean
        cov = centered.T @ centered / (n - 1)
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1][:k]
        comps = evecs[:, order].T
        pivot = np.argmax(np.abs(comps), axis=1)
        signs = np.sign(comps[np.arange(k), pivot])
        comps = comps * signs[:, None]
        self.mean_ = mean
        self.components_ = comps
        self.explained_variance_ = np.clip(evals[order], 0.0, None)
        self.n_features_in_ = d
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_pixels(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"band mismatch: model expects {self.n_features_in_}, got {X.shape[1]}")
        return (X - self.mean_) @ self.components_.T

    def inverse_transform(self, Z):
        check_is_fitted(self)
        return np.asarray(Z, dtype=np.float64) @ self.components_ + self.mean_


def fit_pca(cube: Cube, n_components: int) -> PcaModel:
    if n_components > cube.bands:
        raise ValueError(f"n_components={n_components} exceeds {cube.bands} bands")
    return PcaModel(n_components).fit(cube.pixels())


def apply_pca(model: PcaModel, cube: Cube) -> Cube:
    check_is_fitted(model)
    if cube.bands != model.n_features_in_:
        raise ValueError(f"band mismatch: model expects {model.n_features_in_}, cube has {cube.bands}")
    out = model.transform(cube.pixels())
    values = out.T.reshape(model.n_components, cube.rows, cube.cols)
    return Cube(values.astype(np.float32), name=cube.name)


def reduce_groups(grouped: GroupedCube, model_a: PcaModel, model_b: PcaModel) -> GroupedCube:
    return GroupedCube(apply_pca(model_a, grouped.group_a), apply_pca(model_b, grouped.group_b))


# ---------------------------------------------------------------------------
# persistence: JSON sidecar + raw f32le blocks (mean, then components)


def save_pca(model: PcaModel, path) -> None:
    check_is_fitted(model)
    base = Path(path).with_suffix("")
    meta = {
        "n_components": int(model.n_components),
        "n_bands": int(model.n_features_in_),
        "dtype": "f32le",
        "blocks": ["mean", "components"],
        "explained_variance": [float(v) for v in model.explained_variance_],
    }
    raw = np.concatenate([model.mean_.ravel(), model.components_.ravel()]).astype("<f4")
    base.with_suffix(".raw").write_bytes(raw.tobytes())
    base.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")


def load_pca(path) -> PcaModel:
    base = Path(path).with_suffix("")
    sidecar = base.with_suffix(".json")
    if not sidecar.exists():
        raise FileNotFoundError(f"missing PCA sidecar {sidecar}")
    meta = json.loads(sidecar.read_text())
    k, d = int(meta["n_components"]), int(meta["n_bands"])
    raw = np.frombuffer(base.with_suffix(".raw").read_bytes(), dtype="<f4")
    if raw.size != d + k * d:
        raise ValueError(f"size mismatch: PCA raster holds {raw.size} floats, expected {d + k * d}")
    model = PcaModel(k)
    model.mean_ = raw[:d].astype(np.float64)
    model.components_ = raw[d:].reshape(k, d).astype(np.float64)
    model.explained_variance_ = np.asarray(meta["explained_variance"], dtype=np.float64)
    model.n_features_in_ = d
    return model
