"""Image encoder, image decoder and report decoder with their fusion points.

Every parameter lives in one of three sections, keyed by the top-level
submodule name: ``encoder`` (transferred downstream), ``image_decoder`` and
``report_decoder`` (which also owns the token lookup table).

Forward functions take batched tensors: patches ``(B, k, P)``, positions
``(B, k)`` and so on. Unbatched inputs are accepted where noted.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .record_io import MASK_ID, PAD_ID

SECTIONS = ("encoder", "image_decoder", "report_decoder")
FUSION_MODES = ("gap", "gmp")
REPORT_POS_MODES = ("learnable", "fixed")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32  # low-res input side
    patch_size: int = 4
    channels: int = 1
    encoder_dim: int = 64
    encoder_depth: int = 4
    encoder_heads: int = 4
    image_decoder_dim: int = 32
    image_decoder_depth: int = 2
    image_decoder_heads: int = 2
    report_decoder_dim: int = 64
    report_decoder_depth: int = 3
    report_decoder_heads: int = 4
    vocab_size: int = 64
    max_report_len: int = 64
    fusion_mode: str = "gap"
    report_pos_mode: str = "learnable"
    super_resolution: bool = True
    hybrid_image_restoration: bool = False
    mlp_ratio: float = 4.0

    def __post_init__(self):
        for name, heads in (("encoder", self.encoder_heads),
                            ("image_decoder", self.image_decoder_heads),
                            ("report_decoder", self.report_decoder_heads)):
            dim = getattr(self, f"{name}_dim")
            if heads < 1 or dim % heads:
                raise ConfigError(f"{name}_dim={dim} not divisible by {name}_heads={heads}")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(f"patch_size={self.patch_size} must divide image_size={self.image_size}")
        if self.encoder_dim % 4 or self.image_decoder_dim % 4:
            raise ConfigError("encoder_dim and image_decoder_dim must be divisible by 4 (2-D sin-cos)")
        if self.report_pos_mode == "fixed" and self.report_decoder_dim % 2:
            raise ConfigError("fixed report positions need an even report_decoder_dim")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must be >= 4")
        if self.max_report_len < 1:
            raise ConfigError("max_report_len must be >= 1")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.report_pos_mode not in REPORT_POS_MODES:
            raise ConfigError(f"report_pos_mode must be one of {REPORT_POS_MODES}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels

    @property
    def target_dim(self) -> int:
        side = 2 * self.patch_size if self.super_resolution else self.patch_size
        return side ** 2 * self.channels

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name == "desk":
            base = {}
        elif name == "vitb16":
            base = dict(image_size=224, patch_size=16, encoder_dim=768, encoder_depth=12,
                        encoder_heads=12, image_decoder_dim=384, image_decoder_depth=4,
                        image_decoder_heads=6, report_decoder_dim=384, report_decoder_depth=6,
                        report_decoder_heads=6, vocab_size=30522, max_report_len=256)
        else:
            raise ConfigError(f"unknown preset {name!r}")
        base.update(overrides)
        return cls(**base)


# --------------------------------------------------------------------------
# positional tables


def sincos_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    if dim % 2:
        raise ValueError(f"dim must be even, got {dim}")
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.asarray(positions, dtype=np.float64).reshape(-1)[:, None] * omega[None, :]
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d(grid_rows: int, grid_cols: int, dim: int) -> np.ndarray:
    """Fixed 2-D table of shape (rows*cols, dim); first half encodes the row."""
    if dim % 4:
        raise ValueError(f"dim must be divisible by 4, got {dim}")
    rr, cc = np.meshgrid(np.arange(grid_rows), np.arange(grid_cols), indexing="ij")
    return np.concatenate([sincos_1d(rr, dim // 2), sincos_1d(cc, dim // 2)], axis=1)


# --------------------------------------------------------------------------
# building blocks


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, key_padding=None):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        if key_padding is not None:
            attn = attn.masked_fill(key_padding[:, None, None, :], float("-inf"))
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(x)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, key_padding=None):
        x = x + self.attn(self.norm1(x), key_padding)
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.encoder_dim)
        self.register_buffer(
            "pos_embed",
            torch.from_numpy(sincos_2d(cfg.grid_size, cfg.grid_size, cfg.encoder_dim)).float(),
            persistent=False)
        self.blocks = nn.ModuleList(
            Block(cfg.encoder_dim, cfg.encoder_heads, cfg.mlp_ratio) for _ in range(cfg.encoder_depth))
        self.norm = nn.LayerNorm(cfg.encoder_dim)


class ImageDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Linear(cfg.encoder_dim, cfg.image_decoder_dim)
        self.mask_token = nn.Parameter(torch.zeros(cfg.image_decoder_dim))
        self.register_buffer(
            "pos_embed",
            torch.from_numpy(sincos_2d(cfg.grid_size, cfg.grid_size, cfg.image_decoder_dim)).float(),
            persistent=False)
        if cfg.hybrid_image_restoration:
            self.report_proj = nn.Linear(cfg.report_decoder_dim, cfg.image_decoder_dim)
        self.blocks = nn.ModuleList(
            Block(cfg.image_decoder_dim, cfg.image_decoder_heads, cfg.mlp_ratio)
            for _ in range(cfg.image_decoder_depth))
        self.norm = nn.LayerNorm(cfg.image_decoder_dim)
        self.head = nn.Linear(cfg.image_decoder_dim, cfg.target_dim)


class ReportDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.report_decoder_dim
        self.token_embed = nn.Embedding(cfg.vocab_size, d)
        if cfg.encoder_dim != d:
            self.global_proj = nn.Linear(cfg.encoder_dim, d)
        if cfg.report_pos_mode == "learnable":
            self.pos_embed = nn.Parameter(torch.zeros(cfg.max_report_len, d))
        else:
            self.register_buffer(
                "pos_embed", torch.from_numpy(sincos_1d(np.arange(cfg.max_report_len), d)).float(),
                persistent=False)
        self.blocks = nn.ModuleList(
            Block(d, cfg.report_decoder_heads, cfg.mlp_ratio) for _ in range(cfg.report_decoder_depth))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.vocab_size)


class MRMModel(nn.Module):
    """Parameter store: ``encoder.*``, ``image_decoder.*``, ``report_decoder.*``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.encoder = ImageEncoder(cfg)
        self.image_decoder = ImageDecoder(cfg)
        self.report_decoder = ReportDecoder(cfg)

    def section(self, name: str) -> dict[str, torch.Tensor]:
        if name not in SECTIONS:
            raise KeyError(name)
        return {k: v for k, v in self.named_parameters() if k.split(".", 1)[0] == name}


def init_params(cfg: ModelConfig, seed: int = 0) -> MRMModel:
    """Build a model with deterministic initial weights.

    Both output heads start at exactly zero; every other weight matrix,
    embedding table and the image mask token is drawn from a normal truncated
    at two standard deviations (std 0.02). Biases start at zero and norms at
    identity.
    """
    model = MRMModel(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    std = 0.02
    heads = {"image_decoder.head.weight", "image_decoder.head.bias",
             "report_decoder.head.weight", "report_decoder.head.bias"}
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name in heads or name.endswith(".bias"):
                param.zero_()
            elif ".norm" in name:
                param.fill_(1.0)
            else:
                nn.init.trunc_normal_(param, std=std, a=-2 * std, b=2 * std, generator=gen)
    return model


# --------------------------------------------------------------------------
# forward pieces


def _batched(x: torch.Tensor, ndim: int):
    if x.dim() == ndim - 1:
        return x.unsqueeze(0), True
    return x, False


def encode(model: MRMModel, patches: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """Embed visible low-res patches at their grid positions; (B, k, P) -> (B, k, D)."""
    enc = model.encoder
    cfg = model.config
    patches, squeeze = _batched(patches, 3)
    positions, _ = _batched(torch.as_tensor(positions), 2)
    if patches.shape[-1] != cfg.patch_dim:
        raise ValueError(f"patch vectors have length {patches.shape[-1]}, expected {cfg.patch_dim}")
    if positions.shape != patches.shape[:2]:
        raise ValueError(f"positions {tuple(positions.shape)} do not match patches {tuple(patches.shape)}")
    if positions.numel() and (positions.min() < 0 or positions.max() >= cfg.num_patches):
        raise ValueError(f"patch position outside the {cfg.grid_size}x{cfg.grid_size} grid")
    x = enc.patch_embed(patches) + enc.pos_embed.to(patches.dtype)[positions]
    for blk in enc.blocks:
        x = blk(x)
    x = enc.norm(x)
    return x[0] if squeeze else x


def global_pool(embeddings: torch.Tensor, mode: str = "gap") -> torch.Tensor:
    """Pool (..., k, D) over k."""
    if embeddings.shape[-2] == 0:
        raise ValueError("global_pool needs at least one embedding")
    if mode == "gap":
        return embeddings.mean(dim=-2)
    if mode == "gmp":
        return embeddings.amax(dim=-2)
    raise ValueError(f"unknown pooling mode {mode!r}")


def project_global(model: MRMModel, global_feature: torch.Tensor) -> torch.Tensor:
    rd = model.report_decoder
    if hasattr(rd, "global_proj"):
        return rd.global_proj(global_feature)
    return global_feature


def fuse(model: MRMModel, visible_token_ids: torch.Tensor, global_feature: torch.Tensor) -> torch.Tensor:
    """Hybrid embeddings: lookup(v_i) + g for every visible token; (B, q) -> (B, q, D_r)."""
    ids = torch.as_tensor(visible_token_ids, dtype=torch.long)
    ids, squeeze = _batched(ids, 2)
    g, _ = _batched(global_feature, 2)
    if ids.numel() and (ids.min() < 0 or ids.max() >= model.config.vocab_size):
        raise ValueError("token id outside the vocabulary")
    hybrid = model.report_decoder.token_embed(ids) + project_global(model, g)[:, None, :]
    return hybrid[0] if squeeze else hybrid


def report_sequence(model: MRMModel, token_ids: torch.Tensor, visible: torch.Tensor,
                    global_feature: torch.Tensor) -> torch.Tensor:
    """Dense-batch form of fusion plus mask-token insertion.

    ``token_ids`` is (B, L) with [MASK] already at masked slots and [PAD]
    beyond each report; ``visible`` marks the slots that receive the image
    feature. Equivalent to :func:`fuse` followed by scattering into place.
    """
    emb = model.report_decoder.token_embed(token_ids)
    g = project_global(model, global_feature)[:, None, :]
    return emb + visible.unsqueeze(-1).to(emb.dtype) * g


def report_forward(model: MRMModel, sequence: torch.Tensor, padding: torch.Tensor | None = None) -> torch.Tensor:
    """Run the report decoder over (B, L, D_r) embeddings; returns log-probs (B, L, V)."""
    rd = model.report_decoder
    L = sequence.shape[1]
    if L > model.config.max_report_len:
        raise ValueError(f"report length {L} exceeds max_report_len={model.config.max_report_len}")
    x = sequence + rd.pos_embed[:L].to(sequence.dtype)
    for blk in rd.blocks:
        x = blk(x, padding)
    return F.log_softmax(rd.head(rd.norm(x)), dim=-1)


def decode_report(model: MRMModel, hybrid: torch.Tensor, visible_positions, masked_positions) -> torch.Tensor:
    """Log-probabilities over the vocabulary at each masked position of one report.

    ``hybrid`` is (q, D_r) from :func:`fuse`. Returns (p, V) ordered like
    ``masked_positions``; exponentiating a row gives a distribution.
    """
    vis = torch.as_tensor(visible_positions, dtype=torch.long).reshape(-1)
    msk = torch.as_tensor(masked_positions, dtype=torch.long).reshape(-1)
    L = vis.numel() + msk.numel()
    if L > model.config.max_report_len:
        raise ValueError(f"report length {L} exceeds max_report_len={model.config.max_report_len}")
    if hybrid.shape[0] != vis.numel():
        raise ValueError("one hybrid embedding is needed per visible position")
    covered = torch.zeros(L, dtype=torch.bool)
    covered[vis] = True
    if covered[msk].any() or int(covered.sum()) + msk.numel() != L:
        raise ValueError("visible and masked positions must partition 0..L-1")
    if msk.numel() == 0:
        return hybrid.new_zeros((0, model.config.vocab_size))
    seq = hybrid.new_zeros((L, hybrid.shape[-1]))
    seq[vis] = hybrid
    seq[msk] = model.report_decoder.token_embed.weight[MASK_ID].to(hybrid.dtype)
    return report_forward(model, seq[None])[0, msk]


def report_summary(model: MRMModel, token_ids: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
    """Mean lookup embedding of the visible tokens per record; zeros when none are visible."""
    emb = model.report_decoder.token_embed(token_ids)
    w = visible.to(emb.dtype).unsqueeze(-1)
    return (emb * w).sum(1) / w.sum(1).clamp(min=1.0)


def decode_image(model: MRMModel, visible_embeddings: torch.Tensor, visible_positions: torch.Tensor,
                 masked_positions: torch.Tensor, report_feature: torch.Tensor | None = None) -> torch.Tensor:
    """Pixel predictions for every grid cell; (B, k, D) -> (B, N, target_dim).

    ``report_feature`` (B, D_r) is only used when the model was built with
    ``hybrid_image_restoration``.
    """
    dec = model.image_decoder
    cfg = model.config
    emb, squeeze = _batched(visible_embeddings, 3)
    vis, _ = _batched(torch.as_tensor(visible_positions, dtype=torch.long), 2)
    msk, _ = _batched(torch.as_tensor(masked_positions, dtype=torch.long), 2)
    B, k, _ = emb.shape
    N = cfg.num_patches
    if vis.shape != (B, k) or msk.shape[0] != B or k + msk.shape[1] != N:
        raise ValueError(f"positions do not cover the {N}-cell grid")
    covered = torch.zeros(B, N, dtype=torch.long)
    covered.scatter_add_(1, vis, torch.ones_like(vis))
    covered.scatter_add_(1, msk, torch.ones_like(msk))
    if not bool((covered == 1).all()):
        raise ValueError("visible and masked positions must partition the grid")
    x = dec.embed(emb)
    D = x.shape[-1]
    full = dec.mask_token.to(x.dtype).expand(B, N, D)
    full = full.scatter(1, vis.unsqueeze(-1).expand(B, k, D), x)
    full = full + dec.pos_embed.to(x.dtype)
    if cfg.hybrid_image_restoration:
        if report_feature is None:
            raise ValueError("hybrid image restoration needs a report feature")
        report_feature, _ = _batched(report_feature, 2)
        full = full + dec.report_proj(report_feature)[:, None, :]
    for blk in dec.blocks:
        full = blk(full)
    out = dec.head(dec.norm(full))
    return out[0] if squeeze else out
