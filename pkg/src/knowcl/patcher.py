"""Patch extraction and two-view augmentation.

All randomness for one sample comes from a ``numpy.random.Generator``; the
training sampler keys that generator by (seed, epoch, stream, index) so the
views do not depend on batch composition or worker count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .datacube import Cube
from .spectral import GroupedCube


@dataclass(frozen=True)
class Patch:
    values: np.ndarray  # channels, size, size
    center: tuple[int, int]
    label: int | None = None

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def size(self) -> int:
        return self.values.shape[-1]


@dataclass(frozen=True)
class ViewPair:
    view_a: Patch
    view_b: Patch
    center: tuple[int, int]


@dataclass(frozen=True)
class AugmentConfig:
    patch_size: int = 25
    crop_size: int = 23
    canonical_size: int = 24
    flip_prob: float = 0.5
    blur_prob: float = 0.5
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "blur_sigma_range", tuple(float(s) for s in self.blur_sigma_range))
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError(f"patch_size must be a positive odd integer, got {self.patch_size}")
        if not 1 <= self.crop_size <= self.patch_size:
            raise ValueError(f"crop_size {self.crop_size} must be in [1, patch_size={self.patch_size}]")
        if self.canonical_size < 1:
            raise ValueError("canonical_size must be positive")
        for key in ("flip_prob", "blur_prob"):
            p = getattr(self, key)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{key} must lie in [0, 1], got {p}")
        lo, hi = self.blur_sigma_range
        if not 0.0 <= lo <= hi:
            raise ValueError(f"blur_sigma_range must satisfy 0 <= lo <= hi, got {self.blur_sigma_range}")
        if math.ceil(3 * hi) >= self.canonical_size:
            raise ValueError("blur kernel radius must be smaller than canonical_size")


@dataclass(frozen=True)
class AugmentParams:
    offset: tuple[int, int]
    vflip: bool
    hflip: bool
    sigma: float  # 0 means no blur


# ---------------------------------------------------------------------------
# extraction


def reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Mirror indices into [0, n) without repeating the edge sample."""
    idx = np.abs(idx)
    return np.where(idx > n - 1, 2 * (n - 1) - idx, idx)


def _check_size(size: int, rows: int, cols: int) -> None:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"patch size must be odd, got {size}")
    if size > 2 * min(rows, cols) - 1:
        raise ValueError(f"patch size {size} too large for a {rows}x{cols} raster")


def extract_patches(values: np.ndarray, centers: np.ndarray, size: int) -> np.ndarray:
    """Gather (n, channels, size, size) windows around each (row, col) center."""
    _, rows, cols = values.shape
    _check_size(size, rows, cols)
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    if centers.size and (
        centers[:, 0].min() < 0 or centers[:, 0].max() >= rows
        or centers[:, 1].min() < 0 or centers[:, 1].max() >= cols
    ):
        raise ValueError(f"patch center outside the {rows}x{cols} raster")
    offsets = np.arange(size) - size // 2
    r = reflect_index(centers[:, :1] + offsets, rows)
    c = reflect_index(centers[:, 1:] + offsets, cols)
    out = values[:, r[:, :, None], c[:, None, :]]  # C, n, S, S
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def extract_patch(cube: Cube, center: tuple[int, int], size: int, label: int | None = None) -> Patch:
    values = extract_patches(cube.values, np.asarray([center]), size)[0]
    return Patch(values, (int(center[0]), int(center[1])), label)


# ---------------------------------------------------------------------------
# augmentation


def draw_params(cfg: AugmentConfig, patch_size: int, rng: np.random.Generator) -> AugmentParams:
    if cfg.crop_size > patch_size:
        raise ValueError(f"crop_size {cfg.crop_size} exceeds patch size {patch_size}")
    span = patch_size - cfg.crop_size + 1
    oy = int(rng.integers(0, span))
    ox = int(rng.integers(0, span))
    vflip = bool(rng.random() < cfg.flip_prob)
    hflip = bool(rng.random() < cfg.flip_prob)
    blur = bool(rng.random() < cfg.blur_prob)
    lo, hi = cfg.blur_sigma_range
    sigma = float(rng.uniform(lo, hi)) if hi > lo else lo
    return AugmentParams((oy, ox), vflip, hflip, sigma if blur else 0.0)


def gaussian_kernels(sigmas: list[float]) -> torch.Tensor:
    """One 1-D kernel per sigma, truncated at ceil(3*sigma), renormalized and
    zero-padded to a common width.  sigma == 0 yields a delta."""
    radii = [math.ceil(3 * s) if s > 0 else 0 for s in sigmas]
    R = max(radii, default=0)
    x = torch.arange(-R, R + 1, dtype=torch.float64)
    kernels = torch.zeros(len(sigmas), 2 * R + 1, dtype=torch.float64)
    for i, (s, r) in enumerate(zip(sigmas, radii)):
        if s <= 0:
            kernels[i, R] = 1.0
            continue
        k = torch.exp(-(x**2) / (2 * s * s))
        k[x.abs() > r] = 0.0
        kernels[i] = k / k.sum()
    return kernels


def gaussian_blur(x: torch.Tensor, sigmas: list[float]) -> torch.Tensor:
    """Separable per-sample blur of a (B, C, H, W) batch with reflect borders."""
    B, C, H, W = x.shape
    if all(s <= 0 for s in sigmas):
        return x
    k = gaussian_kernels(sigmas).to(x.dtype)
    R = (k.shape[1] - 1) // 2
    k = k.repeat_interleave(C, dim=0)  # B*C, width
    flat = x.reshape(1, B * C, H, W)
    flat = F.pad(flat, (R, R, R, R), mode="reflect")
    flat = F.conv2d(flat, k[:, None, :, None], groups=B * C)
    flat = F.conv2d(flat, k[:, None, None, :], groups=B * C)
    return flat.reshape(B, C, H, W)


def augment_batch(x: torch.Tensor, params: list[AugmentParams], cfg: AugmentConfig) -> torch.Tensor:
    """crop -> bilinear resize -> vertical flip -> horizontal flip -> blur."""
    c = cfg.crop_size
    crops = torch.stack([x[i, :, oy:oy + c, ox:ox + c] for i, (oy, ox) in enumerate(p.offset for p in params)])
    if c != cfg.canonical_size:
        crops = F.interpolate(crops, size=(cfg.canonical_size, cfg.canonical_size),
                              mode="bilinear", align_corners=False)
    vflip = torch.tensor([p.vflip for p in params])
    hflip = torch.tensor([p.hflip for p in params])
    if vflip.any():
        crops = torch.where(vflip[:, None, None, None], crops.flip(-2), crops)
    if hflip.any():
        crops = torch.where(hflip[:, None, None, None], crops.flip(-1), crops)
    return gaussian_blur(crops, [p.sigma for p in params])


def center_batch(x: torch.Tensor, cfg: AugmentConfig) -> torch.Tensor:
    """Deterministic evaluation view: center crop then resize."""
    P = x.shape[-1]
    o = (P - cfg.crop_size) // 2
    p = AugmentParams((o, o), False, False, 0.0)
    return augment_batch(x, [p] * x.shape[0], cfg)


def augment_view(patch: Patch, cfg: AugmentConfig, draw: np.random.Generator) -> Patch:
    params = draw_params(cfg, patch.size, draw)
    out = augment_batch(torch.from_numpy(patch.values[None]), [params], cfg)[0]
    return Patch(out.numpy(), patch.center, patch.label)


def make_view_pair(grouped: GroupedCube, center, size: int, cfg: AugmentConfig,
                   draw: np.random.Generator, label: int | None = None) -> ViewPair:
    if grouped.group_a.bands != grouped.group_b.bands:
        raise ValueError(
            f"groups must have equal channels, got {grouped.group_a.bands} and {grouped.group_b.bands}"
        )
    a = augment_view(extract_patch(grouped.group_a, center, size, label), cfg, draw)
    b = augment_view(extract_patch(grouped.group_b, center, size, label), cfg, draw)
    return ViewPair(a, b, a.center)


def sample_rng(seed: int, epoch: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stream, index])


class ViewSampler:
    """Batched view construction over a reduced, grouped scene."""

    def __init__(self, grouped: GroupedCube, cfg: AugmentConfig):
        if grouped.group_a.bands != grouped.group_b.bands:
            raise ValueError("groups must have equal channels")
        self.grouped = grouped
        self.cfg = cfg

    @property
    def channels(self) -> int:
        return self.grouped.group_a.bands

    def _patches(self, group: Cube, centers) -> torch.Tensor:
        return torch.from_numpy(extract_patches(group.values, centers, self.cfg.patch_size))

    def views(self, centers, keys, *, pair: bool, epoch: int, stream: int):
        """Augmented group-A views (and group-B views if ``pair``) for each center.

        ``keys`` are stable per-sample indices used to derive the random draws.
        """
        P = self.cfg.patch_size
        rngs = [sample_rng(self.cfg.seed, epoch, stream, int(k)) for k in keys]
        params_a = [draw_params(self.cfg, P, g) for g in rngs]
        va = augment_batch(self._patches(self.grouped.group_a, centers), params_a, self.cfg)
        if not pair:
            return va
        params_b = [draw_params(self.cfg, P, g) for g in rngs]
        vb = augment_batch(self._patches(self.grouped.group_b, centers), params_b, self.cfg)
        return va, vb

    def eval_views(self, centers) -> torch.Tensor:
        return center_batch(self._patches(self.grouped.group_a, centers), self.cfg)
