"""Encoder, segmentation head, masked character pooling, and projection head.

The encoder is a plain pre-norm ViT over non-overlapping 4x4 patches with a
learned per-position embedding and no class token. The segmentation head
fuses three intermediate token grids and upsamples back to image
resolution. Character features are mean-pooled from the token grid under
fractional (area-averaged) masks, then projected into a high-dimensional
space whose final layer has unit-norm weight rows.
"""

from __future__ import annotations

import dataclasses
import json
from collections import OrderedDict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .imaging import ImageBuffer
from .pseudolabel import CharMaskSet

CHECKPOINT_VERSION = 1

ENCODER_PRESETS = {
    "tiny": (192, 12, 3),
    "small": (384, 12, 6),
    "base": (512, 12, 8),
}


class CheckpointError(ValueError):
    """Raised for unreadable or mismatched checkpoint files."""


@dataclasses.dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 192
    depth: int = 12
    heads: int = 3
    patch: int = 4
    input_hw: tuple[int, int] = (32, 128)
    in_channels: int = 1
    tap_blocks: tuple[int, ...] = (2, 4, 6)  # 1-indexed

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.input_hw[0] % self.patch or self.input_hw[1] % self.patch:
            raise ValueError(f"input {self.input_hw} not divisible by patch {self.patch}")
        if any(t < 1 or t > self.depth for t in self.tap_blocks):
            raise ValueError(f"tap blocks {self.tap_blocks} outside depth {self.depth}")

    @staticmethod
    def from_preset(name: str, **overrides) -> "EncoderConfig":
        try:
            dim, depth, heads = ENCODER_PRESETS[name.lower()]
        except KeyError:
            raise ValueError(f"unknown encoder preset {name!r}") from None
        return EncoderConfig(embed_dim=dim, depth=depth, heads=heads, **overrides)

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.input_hw[0] // self.patch, self.input_hw[1] // self.patch

    @property
    def tokens(self) -> int:
        h, w = self.grid_hw
        return h * w


@dataclasses.dataclass(frozen=True)
class HeadConfig:
    """Widths of the segmentation and projection heads."""

    seg_width: int = 64
    seg_fuse_width: int = 64
    seg_out_width: int = 32
    proj_hidden: int = 2048
    proj_bottleneck: int = 256
    proj_out: int = 1024  # desk-scale default; reference value is 65536


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(),
            nn.Linear(mlp_ratio * dim, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class VitEncoder(nn.Module):
    """Patch-embedding ViT that also exposes intermediate block outputs."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(cfg.in_channels, cfg.embed_dim,
                                     kernel_size=cfg.patch, stride=cfg.patch)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.tokens, cfg.embed_dim))
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.embed_dim, cfg.heads) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Returns the final (B, h, w, d) grid and the tapped block outputs."""
        if x.shape[-2:] != torch.Size(self.cfg.input_hw) or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (B, {self.cfg.in_channels}, "
                             f"{self.cfg.input_hw[0]}, {self.cfg.input_hw[1]}) input, "
                             f"got {tuple(x.shape)}")
        h, w = self.cfg.grid_hw
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2) + self.pos_embed
        taps = []
        for i, block in enumerate(self.blocks, start=1):
            tokens = block(tokens)
            if i in self.cfg.tap_blocks:
                taps.append(tokens.reshape(-1, h, w, self.cfg.embed_dim))
        grid = self.norm(tokens).reshape(-1, h, w, self.cfg.embed_dim)
        return grid, taps


def _conv_bn_relu(cin: int, cout: int) -> nn.Sequential:
    # bias-free: the batch norm's mean subtraction would cancel it exactly
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size=3, padding=1, bias=False),
        nn.BatchNorm2d(cout, momentum=0.1),
        nn.ReLU(inplace=True),
    )


class SegmentationHead(nn.Module):
    """Fuses tapped token grids into a 2-class map at image resolution.

    Each tap runs through a shared two-conv block; the concatenated result
    is restored to input resolution by two nearest-neighbor 2x upsamplings,
    each followed by a convolution, and a final 1x1 projection to logits.
    """

    def __init__(self, embed_dim: int, n_taps: int = 3, cfg: HeadConfig = HeadConfig()):
        super().__init__()
        self.refine = nn.Sequential(
            _conv_bn_relu(embed_dim, cfg.seg_width),
            _conv_bn_relu(cfg.seg_width, cfg.seg_width),
        )
        self.up1 = nn.Upsample(scale_factor=2, mode="nearest")
        self.fuse1 = _conv_bn_relu(cfg.seg_width * n_taps, cfg.seg_fuse_width)
        self.up2 = nn.Upsample(scale_factor=2, mode="nearest")
        self.fuse2 = _conv_bn_relu(cfg.seg_fuse_width, cfg.seg_out_width)
        self.classify = nn.Conv2d(cfg.seg_out_width, 2, kernel_size=1)

    def forward(self, taps: list[torch.Tensor]) -> torch.Tensor:
        """taps: (B, h, w, d) each; returns logits (B, 2, patch*h, patch*w)."""
        refined = [self.refine(t.permute(0, 3, 1, 2)) for t in taps]
        x = torch.cat(refined, dim=1)
        x = self.fuse1(self.up1(x))
        x = self.fuse2(self.up2(x))
        return self.classify(x)


class UnitNormLinear(nn.Module):
    """Linear map whose effective weight rows are L2-normalized.

    The stored parameter is the row direction only; the magnitude is fixed
    at one, so every output coordinate is a unit-vector dot product.
    """

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.weight_v = nn.Parameter(torch.empty(out_dim, in_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        w = self.weight_v / self.weight_v.norm(dim=1, keepdim=True).clamp_min(1e-12)
        return x @ w.t()


class ProjectionHead(nn.Module):
    """MLP with a normalized bottleneck and a unit-norm final expansion."""

    def __init__(self, in_dim: int, cfg: HeadConfig = HeadConfig()):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, cfg.proj_hidden),
            nn.GELU(),
            nn.Linear(cfg.proj_hidden, cfg.proj_hidden),
            nn.GELU(),
            nn.Linear(cfg.proj_hidden, cfg.proj_bottleneck),
        )
        self.last = UnitNormLinear(cfg.proj_bottleneck, cfg.proj_out)

    def bottleneck(self, v: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.mlp(v), dim=-1, eps=1e-12)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return self.last(self.bottleneck(v))


class CharDistillModel(nn.Module):
    """Encoder plus heads; the teacher variant carries no segmentation head."""

    def __init__(self, cfg: EncoderConfig, heads: HeadConfig = HeadConfig(),
                 with_seg_head: bool = True):
        super().__init__()
        self.cfg = cfg
        self.head_cfg = heads
        self.encoder = VitEncoder(cfg)
        self.seg_head = SegmentationHead(cfg.embed_dim, len(cfg.tap_blocks), heads) \
            if with_seg_head else None
        self.proj_head = ProjectionHead(cfg.embed_dim, heads)


# ---------------------------------------------------------------------------
# Masked character pooling
# ---------------------------------------------------------------------------

def mask_token_weights(mask: np.ndarray, patch: int) -> np.ndarray:
    """Area-average an image-resolution mask down to the token grid."""
    mask = np.asarray(mask, dtype=np.float64)
    height, width = mask.shape
    if height % patch or width % patch:
        raise ValueError(f"mask shape {mask.shape} not divisible by patch {patch}")
    return mask.reshape(height // patch, patch, width // patch, patch).mean(axis=(1, 3))


def token_weight_stack(masks: list[np.ndarray] | CharMaskSet, patch: int,
                       dtype=torch.float32) -> torch.Tensor:
    mask_list = masks.masks if isinstance(masks, CharMaskSet) else masks
    if not mask_list:
        return torch.zeros(0, 0, 0, dtype=dtype)
    weights = np.stack([mask_token_weights(m, patch) for m in mask_list])
    return torch.from_numpy(weights).to(dtype)


def pool_with_weights(grid: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Weighted token average per character: (h,w,d) x (l,h,w) -> (l,d).

    Weight sums must be positive; callers drop empty masks beforehand.
    """
    if weights.numel() == 0:
        return grid.new_zeros(0, grid.shape[-1])
    sums = weights.sum(dim=(1, 2))
    pooled = torch.einsum("lhw,hwd->ld", weights, grid)
    return pooled / sums[:, None]


def pool_characters(grid: torch.Tensor, masks: CharMaskSet, patch: int) -> torch.Tensor:
    """Mean-pool token features under each mask's fractional token weights.

    Masks whose area-averaged weights sum to zero are dropped. Returns an
    (l', d) matrix; l' = 0 when every mask vanishes on the token grid.
    """
    weights = token_weight_stack(masks, patch, dtype=grid.dtype)
    if weights.numel() == 0:
        return grid.new_zeros(0, grid.shape[-1])
    keep = weights.sum(dim=(1, 2)) > 0
    return pool_with_weights(grid, weights[keep])


# ---------------------------------------------------------------------------
# Deterministic initialization and the checkpoint format
# ---------------------------------------------------------------------------

def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled until everything lies within two deviations."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2 * std
    return out


def init_params(model: nn.Module, seed: int, std: float = 0.02) -> None:
    """Seeded truncated-normal weights, zero biases, unit norm gains.

    Parameters are visited in registration order, so a seed fully determines
    every tensor. Unit-norm linear directions are normalized row-wise after
    sampling.
    """
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if param.ndim == 1:
                param.fill_(1.0 if _is_norm_gain(model, name) else 0.0)
            else:
                values = _trunc_normal(rng, tuple(param.shape), std)
                if name.endswith("weight_v"):
                    values /= np.linalg.norm(values.reshape(values.shape[0], -1),
                                             axis=1, keepdims=True)
                param.copy_(torch.from_numpy(values).to(param.dtype))


def _is_norm_gain(model: nn.Module, name: str) -> bool:
    parent = model
    parts = name.split(".")
    for part in parts[:-1]:
        parent = getattr(parent, part)
    return isinstance(parent, (nn.LayerNorm, nn.BatchNorm2d)) and parts[-1] == "weight"


def state_arrays(model: nn.Module) -> "OrderedDict[str, np.ndarray]":
    """Parameters and float buffers as numpy arrays, in state-dict order.

    BatchNorm batch counters are skipped: the momentum is fixed, so they
    never influence behavior, and the checkpoint payload is float32 only.
    """
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, tensor in model.state_dict().items():
        if name.endswith("num_batches_tracked"):
            continue
        out[name] = tensor.detach().cpu().numpy().astype(np.float32)
    return out


def save_checkpoint(path: str, tensors: "OrderedDict[str, np.ndarray]",
                    cfg: dict | None = None) -> None:
    """Single-line JSON header plus raw little-endian float32 payload."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "cfg": cfg or {},
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in tensors.items()],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: unreadable checkpoint header") from exc
        for field in ("format_version", "cfg", "tensors"):
            if field not in header:
                raise CheckpointError(f"{path}: header missing field {field!r}")
        if header["format_version"] != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: format_version {header['format_version']} != {CHECKPOINT_VERSION}")
        tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
        payload = fh.read()
    offset = 0
    for entry in header["tensors"]:
        if "name" not in entry or "shape" not in entry:
            raise CheckpointError(f"{path}: tensor entry missing name/shape")
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = count * 4
        chunk = payload[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated data for tensor {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(entry["shape"]).copy()
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing bytes after tensors")
    return header, tensors


def load_into_model(model: nn.Module, tensors: "OrderedDict[str, np.ndarray]",
                    prefix: str = "") -> None:
    state = model.state_dict()
    wanted = {n for n in state if not n.endswith("num_batches_tracked")}
    for name in wanted:
        key = prefix + name
        if key not in tensors:
            raise CheckpointError(f"checkpoint missing tensor {key!r}")
        arr = tensors[key]
        if tuple(arr.shape) != tuple(state[name].shape):
            raise CheckpointError(
                f"tensor {key!r} has shape {tuple(arr.shape)}, expected {tuple(state[name].shape)}")
    with torch.no_grad():
        for name, tensor in state.items():
            if name in wanted:
                tensor.copy_(torch.from_numpy(tensors[prefix + name]).to(tensor.dtype))


def role_of(name: str) -> str:
    """Role tag (encoder / seg_head / projection) from a tensor name."""
    base = name.split(".", 2)
    for part in base:
        if part in ("encoder",):
            return "encoder"
        if part in ("seg_head",):
            return "seg_head"
        if part in ("proj_head",):
            return "projection"
    return "other"


def encode_image(model: CharDistillModel, img: ImageBuffer,
                 ) -> tuple[np.ndarray, list[np.ndarray]]:
    """Single-image convenience wrapper around the encoder forward."""
    x = torch.from_numpy(np.transpose(img.data, (2, 0, 1))[None]).to(
        next(model.parameters()).dtype)
    with torch.no_grad():
        grid, taps = model.encoder(x)
    return grid[0].numpy(), [t[0].numpy() for t in taps]


def segment_logits(model: CharDistillModel, img: ImageBuffer) -> np.ndarray:
    """Inference-mode segmentation logits as an (H, W, 2) array."""
    if model.seg_head is None:
        raise ValueError("model has no segmentation head")
    x = torch.from_numpy(np.transpose(img.data, (2, 0, 1))[None]).to(
        next(model.parameters()).dtype)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        _, taps = model.encoder(x)
        logits = model.seg_head(taps)
    if was_training:
        model.train()
    return logits[0].permute(1, 2, 0).numpy()
