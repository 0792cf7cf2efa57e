"""Encoder networks: a small ViT for HSI patches, ResNet alternates, and the
supervised / contrastive heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

VARIANTS = ("vit_hsi", "vit_tiny", "vit_small", "resnet18", "resnet50")
CHECKPOINT_VERSION = 1

# embed_dim, depth, num_heads, mlp_ratio
_VIT_PRESETS = {
    "vit_hsi": (126, 4, 6, 2.0),
    "vit_tiny": (192, 12, 3, 4.0),
    "vit_small": (384, 12, 6, 4.0),
}


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 24
    in_channels: int = 5
    token_patch: int = 4
    embed_dim: int = 126
    depth: int = 4
    num_heads: int = 6
    mlp_ratio: float = 2.0
    drop_path_rate: float = 0.1
    variant: str = "vit_hsi"
    num_classes: int = 2
    head_hidden: int = 256
    head_dropout: float = 0.1
    projection_dim: int = 256

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown backbone variant {self.variant!r}; choose from {VARIANTS}")
        if self.variant.startswith("vit"):
            if self.input_size % self.token_patch:
                raise ValueError(
                    f"input_size {self.input_size} not divisible by token_patch {self.token_patch}"
                )
            if self.embed_dim % self.num_heads:
                raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValueError("drop_path_rate must lie in [0, 1)")

    @classmethod
    def preset(cls, variant: str, **overrides) -> "BackboneConfig":
        """Config for a named variant with its standard width/depth."""
        base = cls(variant=variant)
        if variant in _VIT_PRESETS:
            d, depth, heads, ratio = _VIT_PRESETS[variant]
            base = replace(base, embed_dim=d, depth=depth, num_heads=heads, mlp_ratio=ratio)
        return replace(base, **overrides)

    @property
    def out_dim(self) -> int:
        if self.variant == "resnet18":
            return 512
        if self.variant == "resnet50":
            return 2048
        return self.embed_dim


# ---------------------------------------------------------------------------
# ViT


class DropPath(nn.Module):
    """Per-sample stochastic depth on a residual branch."""

    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        mask = x.new_empty((x.shape[0],) + (1,) * (x.ndim - 1)).bernoulli_(keep)
        return x * mask / keep


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, D = x.shape
        q, k, v = self.qkv(x).reshape(B, N, 3, self.num_heads, D // self.num_heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(B, N, D))


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, drop_path: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.drop_path = DropPath(drop_path)

    def forward(self, x):
        x = x + self.drop_path(self.attn(self.norm1(x)))
        return x + self.drop_path(self.mlp(self.norm2(x)))


class VisionTransformer(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.num_patches = (cfg.input_size // cfg.token_patch) ** 2
        self.patch_embed = nn.Conv2d(cfg.in_channels, cfg.embed_dim, cfg.token_patch, stride=cfg.token_patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, self.num_patches + 1, cfg.embed_dim))
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, cfg.drop_path_rate) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.apply(_init_vit)

    def tokens(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> (B, 1 + num_patches, embed_dim) after the final norm."""
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
            raise ValueError(
                f"expected input (B, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}), got {tuple(x.shape)}"
            )
        t = self.patch_embed(x).flatten(2).transpose(1, 2)
        t = torch.cat([self.cls_token.expand(t.shape[0], -1, -1), t], dim=1) + self.pos_embed
        for blk in self.blocks:
            t = blk(t)
        return self.norm(t)

    def forward(self, x, pooling: str = "cls"):
        return pool_tokens(self.tokens(x), pooling)


def pool_tokens(tokens: torch.Tensor, pooling: str) -> torch.Tensor:
    if pooling == "cls":
        return tokens[:, 0]
    if pooling == "mean":
        return tokens.mean(dim=1)
    raise ValueError(f"unknown pooling {pooling!r}")


def _init_vit(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


# ---------------------------------------------------------------------------
# ResNet with 3x3 kernels only, no pooling layers and no classifier


def _conv3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, planes, stride=1):
        super().__init__()
        self.conv1, self.bn1 = _conv3(cin, planes, stride), nn.BatchNorm2d(planes)
        self.conv2, self.bn2 = _conv3(planes, planes), nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != planes:
            self.shortcut = nn.Sequential(_conv3(cin, planes, stride), nn.BatchNorm2d(planes))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(out)) + self.shortcut(x))


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, planes, stride=1):
        super().__init__()
        out = planes * self.expansion
        self.conv1, self.bn1 = _conv3(cin, planes), nn.BatchNorm2d(planes)
        self.conv2, self.bn2 = _conv3(planes, planes, stride), nn.BatchNorm2d(planes)
        self.conv3, self.bn3 = _conv3(planes, out), nn.BatchNorm2d(out)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != out:
            self.shortcut = nn.Sequential(_conv3(cin, out, stride), nn.BatchNorm2d(out))

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = F.relu(self.bn2(self.conv2(y)))
        return F.relu(self.bn3(self.conv3(y)) + self.shortcut(x))


class ResNet(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        block, layers = (BasicBlock, (2, 2, 2, 2)) if cfg.variant == "resnet18" else (Bottleneck, (3, 4, 6, 3))
        self.stem = nn.Sequential(_conv3(cfg.in_channels, 64), nn.BatchNorm2d(64), nn.ReLU(inplace=True))
        stages, cin = [], 64
        for i, (planes, n) in enumerate(zip((64, 128, 256, 512), layers)):
            blocks = []
            for j in range(n):
                blocks.append(block(cin, planes, 2 if (i > 0 and j == 0) else 1))
                cin = planes * block.expansion
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.Sequential(*stages)

    def forward(self, x, pooling: str = "cls"):
        # spatial mean of the last feature map serves both poolings
        return self.stages(self.stem(x)).mean(dim=(2, 3))


# ---------------------------------------------------------------------------
# heads


class SupervisedHead(nn.Module):
    """Two-layer MLP from embeddings to class logits."""

    def __init__(self, in_dim: int, num_classes: int, hidden: int = 256, dropout: float = 0.1):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.norm = nn.LayerNorm(hidden)
        self.drop = nn.Dropout(dropout)
        self.fc2 = nn.Linear(hidden, num_classes)

    def forward(self, h):
        return self.fc2(self.drop(F.gelu(self.norm(self.fc1(h)))))


class ContrastiveHead(nn.Module):
    """Linear map followed by l2 normalization."""

    def __init__(self, in_dim: int, out_dim: int = 256, eps: float = 1e-12):
        super().__init__()
        self.fc = nn.Linear(in_dim, out_dim)
        self.eps = eps

    def forward(self, h):
        v = self.fc(h)
        return v / (v.norm(dim=-1, keepdim=True) + self.eps)


def build_backbone(cfg: BackboneConfig) -> nn.Module:
    if cfg.variant.startswith("vit"):
        return VisionTransformer(cfg)
    return ResNet(cfg)


class KnowCLNet(nn.Module):
    """Backbone with both heads and the learnable task weights."""

    def __init__(self, cfg: BackboneConfig, num_tasks: int = 2):
        super().__init__()
        from .losses import LossWeights

        self.cfg = cfg
        self.backbone = build_backbone(cfg)
        self.sup_head = SupervisedHead(cfg.out_dim, cfg.num_classes, cfg.head_hidden, cfg.head_dropout)
        self.con_head = ContrastiveHead(cfg.out_dim, cfg.projection_dim)
        self.loss_weights = LossWeights(num_tasks)

    def encode(self, x, pooling: str = "cls"):
        return self.backbone(x, pooling)

    def encode_both(self, x):
        """Class-token and mean-token embeddings from a single forward pass."""
        if isinstance(self.backbone, VisionTransformer):
            t = self.backbone.tokens(x)
            return t[:, 0], t.mean(dim=1)
        h = self.backbone(x)
        return h, h

    def classify(self, h):
        return self.sup_head(h)

    def project(self, h):
        return self.con_head(h)


def encode(model: KnowCLNet, x: torch.Tensor, pooling: str = "cls") -> torch.Tensor:
    return model.encode(x, pooling)


def classify(model: KnowCLNet, h: torch.Tensor) -> torch.Tensor:
    return model.classify(h)


def project(model: KnowCLNet, h: torch.Tensor) -> torch.Tensor:
    return model.project(h)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: KnowCLNet, meta: dict | None = None) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "backbone_config": asdict(model.cfg),
            "state_dict": model.state_dict(),
            "meta": dict(meta or {}),
        },
        path,
    )


def load_checkpoint(path) -> tuple[KnowCLNet, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    version = blob.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version}")
    cfg = BackboneConfig(**blob["backbone_config"])
    n_tasks = blob["state_dict"]["loss_weights.w"].numel()
    model = KnowCLNet(cfg, n_tasks)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob["meta"]
