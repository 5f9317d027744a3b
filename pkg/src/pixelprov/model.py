"""Dual-decoder detection network.

A hierarchical four-stage transformer encoder feeds two identical (but
independently parameterized) fusion decoders, one per mask head: any-pixel
manipulation and AI-synthesized pixels. The image-level head pools the last
encoder stage and is refined by cross-branch attention whose queries come from
the segmentation decoders, letting spatially grounded evidence correct the
global decision.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

STRIDES = (4, 8, 16, 32)

_ATTN_VARIANTS = ("literal_token", "spatial_kv")
_ATTN_MODES = ("none", "forward", "dual", "reverse")


@dataclass
class EncoderConfig:
    """Network hyperparameters; defaults are the desk-scale configuration."""

    stage_channels: tuple[int, int, int, int] = (32, 64, 160, 256)
    stage_depths: tuple[int, int, int, int] = (2, 2, 2, 2)
    attention_heads: tuple[int, int, int, int] = (1, 2, 5, 8)
    decoder_channels: int = 128
    attn_variant: str = "spatial_kv"
    attention_mode: str = "reverse"
    cross_heads: int = 1
    learned_qkv: bool = True
    sr_ratios: tuple[int, int, int, int] = (8, 4, 2, 1)
    mlp_ratio: int = 4

    @property
    def strides(self) -> tuple[int, int, int, int]:
        return STRIDES

    def __post_init__(self):
        for name in ("stage_channels", "stage_depths", "attention_heads", "sr_ratios"):
            v = tuple(getattr(self, name))
            object.__setattr__(self, name, v)
            if len(v) != 4 or any(x <= 0 for x in v):
                raise ValueError(f"{name} must be 4 positive integers, got {v}")
        for c, h in zip(self.stage_channels, self.attention_heads):
            if c % h:
                raise ValueError(f"stage channels {c} not divisible by {h} heads")
        if self.decoder_channels <= 0:
            raise ValueError("decoder_channels must be positive")
        if self.decoder_channels % self.cross_heads:
            raise ValueError("decoder_channels must be divisible by cross_heads")
        if self.attn_variant not in _ATTN_VARIANTS:
            raise ValueError(f"attn_variant must be one of {_ATTN_VARIANTS}")
        if self.attention_mode not in _ATTN_MODES:
            raise ValueError(f"attention_mode must be one of {_ATTN_MODES}")

    @classmethod
    def toy(cls, **overrides) -> "EncoderConfig":
        """Small configuration for CPU experiments and tests."""
        base = dict(
            stage_channels=(16, 32, 64, 128),
            stage_depths=(1, 1, 1, 1),
            attention_heads=(1, 2, 4, 8),
            decoder_channels=64,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def tiny(cls, **overrides) -> "EncoderConfig":
        """Minimal configuration, small enough for finite-difference checks."""
        base = dict(
            stage_channels=(4, 8, 12, 16),
            stage_depths=(1, 1, 1, 1),
            attention_heads=(1, 1, 1, 1),
            decoder_channels=8,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class MultiScaleFeatures:
    """Encoder stage outputs, one map per stride in STRIDES, channels-first."""

    stages: list[torch.Tensor]


@dataclass
class DecoderFeatures:
    ai: torch.Tensor
    mani: torch.Tensor


@dataclass
class PredictionBundle:
    mask_ai_logits: torch.Tensor    # (B, H, W)
    mask_mani_logits: torch.Tensor  # (B, H, W)
    cls_logit: torch.Tensor         # (B,)
    cls_feature: torch.Tensor       # (B, decoder_channels)


def _to_tokens(x: torch.Tensor) -> torch.Tensor:
    # (B, C, H, W) -> (B, H*W, C)
    return x.flatten(2).transpose(1, 2)


def _to_map(tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
    b, _, c = tokens.shape
    return tokens.transpose(1, 2).reshape(b, c, h, w)


class OverlapPatchEmbed(nn.Module):
    def __init__(self, in_ch, out_ch, patch, stride):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, out_ch, kernel_size=patch, stride=stride,
                              padding=patch // 2)
        self.norm = nn.LayerNorm(out_ch)

    def forward(self, x):
        x = self.proj(x)
        h, w = x.shape[2:]
        return self.norm(_to_tokens(x)), h, w


class SpatialReductionAttention(nn.Module):
    """Self-attention whose keys/values come from a stride-reduced copy of the map."""

    def __init__(self, dim, heads, sr_ratio):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, kernel_size=sr_ratio, stride=sr_ratio)
            self.sr_norm = nn.LayerNorm(dim)

    def forward(self, x, h, w):
        b, n, c = x.shape
        q = self.q(x).reshape(b, n, self.heads, c // self.heads).transpose(1, 2)
        src = x
        if self.sr_ratio > 1:
            reduced = self.sr(_to_map(x, h, w))
            src = self.sr_norm(_to_tokens(reduced))
        kv = self.kv(src).reshape(b, -1, 2, self.heads, c // self.heads)
        k, v = kv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, c))


class MixFFN(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, h, w):
        x = self.fc1(x)
        x = _to_tokens(self.dwconv(_to_map(x, h, w)))
        return self.fc2(F.gelu(x))


class EncoderBlock(nn.Module):
    def __init__(self, dim, heads, sr_ratio, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SpatialReductionAttention(dim, heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = MixFFN(dim, dim * mlp_ratio)

    def forward(self, x, h, w):
        x = x + self.attn(self.norm1(x), h, w)
        return x + self.ffn(self.norm2(x), h, w)


class HierarchicalEncoder(nn.Module):
    """Four stages at strides 4/8/16/32 with overlapped patch embeddings."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        chans = cfg.stage_channels
        self.embeds = nn.ModuleList([
            OverlapPatchEmbed(3, chans[0], patch=7, stride=4),
            OverlapPatchEmbed(chans[0], chans[1], patch=3, stride=2),
            OverlapPatchEmbed(chans[1], chans[2], patch=3, stride=2),
            OverlapPatchEmbed(chans[2], chans[3], patch=3, stride=2),
        ])
        self.stages = nn.ModuleList()
        self.norms = nn.ModuleList()
        for i in range(4):
            blocks = nn.ModuleList([
                EncoderBlock(chans[i], cfg.attention_heads[i], cfg.sr_ratios[i],
                             cfg.mlp_ratio)
                for _ in range(cfg.stage_depths[i])
            ])
            self.stages.append(blocks)
            self.norms.append(nn.LayerNorm(chans[i]))

    def forward(self, x: torch.Tensor) -> MultiScaleFeatures:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        for axis, size in (("height", x.shape[2]), ("width", x.shape[3])):
            if size % STRIDES[-1]:
                raise ValueError(
                    f"input {axis} {size} is not divisible by {STRIDES[-1]}"
                )
        maps = []
        for embed, blocks, norm in zip(self.embeds, self.stages, self.norms):
            x, h, w = embed(x)
            for block in blocks:
                x = block(x, h, w)
            x = _to_map(norm(x), h, w)
            maps.append(x)
        return MultiScaleFeatures(stages=maps)


class DecoderFuser(nn.Module):
    """Project each stage to the decoder width, upsample to stride 4, fuse.

    The concatenated stack passes through a 1x1 convolution and a channelwise
    projection, yielding one map at a quarter of the input resolution.
    """

    def __init__(self, stage_channels, dec_ch):
        super().__init__()
        self.stage_proj = nn.ModuleList([nn.Linear(c, dec_ch) for c in stage_channels])
        self.fuse_conv = nn.Conv2d(4 * dec_ch, dec_ch, kernel_size=1)
        self.fuse_proj = nn.Linear(dec_ch, dec_ch)

    def unify(self, stages: list[torch.Tensor]) -> torch.Tensor:
        """Per-stage projection and upsampling, concatenated channelwise."""
        if len(stages) != len(self.stage_proj):
            raise ValueError(f"expected {len(self.stage_proj)} stage maps, got {len(stages)}")
        base_h, base_w = stages[0].shape[2:]
        unified = []
        for feat, proj in zip(stages, self.stage_proj):
            h, w = feat.shape[2:]
            t = _to_map(proj(_to_tokens(feat)), h, w)
            if (h, w) != (base_h, base_w):
                t = F.interpolate(t, size=(base_h, base_w), mode="bilinear",
                                  align_corners=False)
            unified.append(t)
        return torch.cat(unified, dim=1)

    def forward(self, stages: list[torch.Tensor]) -> torch.Tensor:
        base_h, base_w = stages[0].shape[2:]
        x = F.gelu(self.fuse_conv(self.unify(stages)))
        return _to_map(self.fuse_proj(_to_tokens(x)), base_h, base_w)


class MaskHead(nn.Module):
    """1x1 projection to one channel, then x4 bilinear upsampling."""

    def __init__(self, dec_ch):
        super().__init__()
        self.proj = nn.Conv2d(dec_ch, 1, kernel_size=1)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        logits = F.interpolate(self.proj(fused), scale_factor=4, mode="bilinear",
                               align_corners=False)
        return logits.squeeze(1)


class CrossBranchAttention(nn.Module):
    """Scaled dot-product attention between the two decoder branches and the
    classification feature, shared across both branches.

    `learned_qkv=False` drops the projections and attends on raw features.
    """

    def __init__(self, dim, heads=1, learned_qkv=True):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        if learned_qkv:
            self.wq = nn.Linear(dim, dim)
            self.wk = nn.Linear(dim, dim)
            self.wv = nn.Linear(dim, dim)
            self.wout = nn.Linear(dim, dim)
        else:
            self.wq = self.wk = self.wv = self.wout = nn.Identity()

    def weights(self, q_tokens: torch.Tensor, kv_tokens: torch.Tensor) -> torch.Tensor:
        """Softmax attention matrix, (B, heads, Nq, Nk); rows sum to 1."""
        b, nq, c = q_tokens.shape
        d = c // self.heads
        q = self.wq(q_tokens).reshape(b, nq, self.heads, d).transpose(1, 2)
        k = self.wk(kv_tokens).reshape(b, -1, self.heads, d).transpose(1, 2)
        return ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)

    def attend(self, q_tokens: torch.Tensor, kv_tokens: torch.Tensor) -> torch.Tensor:
        b, nq, c = q_tokens.shape
        d = c // self.heads
        attn = self.weights(q_tokens, kv_tokens)
        v = self.wv(kv_tokens).reshape(b, -1, self.heads, d).transpose(1, 2)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, c)
        return self.wout(out)


class DetectorNet(nn.Module):
    """Encoder, two fusion decoders with mask heads, and the attention-refined
    classification head."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        dec = cfg.decoder_channels
        self.encoder = HierarchicalEncoder(cfg)
        self.decoder_ai = DecoderFuser(cfg.stage_channels, dec)
        self.decoder_mani = DecoderFuser(cfg.stage_channels, dec)
        self.head_ai = MaskHead(dec)
        self.head_mani = MaskHead(dec)
        self.cls_proj = nn.Linear(cfg.stage_channels[3], dec)
        self.cross_attn = CrossBranchAttention(dec, cfg.cross_heads, cfg.learned_qkv)
        if cfg.attn_variant == "spatial_kv":
            self.kv_proj = nn.Linear(cfg.stage_channels[3], dec)
        self.classifier = nn.Linear(dec, 1)
        self.apply(_init_weights)

    # --- component operations -------------------------------------------------

    def encode(self, image: torch.Tensor) -> MultiScaleFeatures:
        return self.encoder(image)

    def fuse_decoder(self, features: MultiScaleFeatures, which: str) -> torch.Tensor:
        fuser = {"ai": self.decoder_ai, "mani": self.decoder_mani}[which]
        return fuser(features.stages)

    def predict_mask(self, fused: torch.Tensor, which: str) -> torch.Tensor:
        head = {"ai": self.head_ai, "mani": self.head_mani}[which]
        return head(fused)

    def cls_feature(self, features: MultiScaleFeatures) -> torch.Tensor:
        pooled = features.stages[3].mean(dim=(2, 3))
        return self.cls_proj(pooled)

    def _cls_side_tokens(self, cls_feat: torch.Tensor,
                         features: MultiScaleFeatures) -> torch.Tensor:
        if self.cfg.attn_variant == "literal_token":
            return cls_feat.unsqueeze(1)
        return self.kv_proj(_to_tokens(features.stages[3]))

    def reverse_cross_attention(
        self,
        dec_ai: torch.Tensor,
        dec_mani: torch.Tensor,
        cls_feat: torch.Tensor,
        kv_tokens: torch.Tensor,
    ) -> torch.Tensor:
        """Query from each segmentation branch into the classification side,
        mean-pool over query tokens, and add both results back residually."""
        out = cls_feat
        for branch in (dec_mani, dec_ai):
            q_tokens = _to_tokens(branch)
            out = out + self.cross_attn.attend(q_tokens, kv_tokens).mean(dim=1)
        return out

    def _forward_cross_attention(
        self,
        dec_ai: torch.Tensor,
        dec_mani: torch.Tensor,
        cls_feat: torch.Tensor,
    ) -> torch.Tensor:
        # Ablation variant: the classifier queries each segmentation branch.
        out = cls_feat
        for branch in (dec_mani, dec_ai):
            kv_tokens = _to_tokens(branch)
            out = out + self.cross_attn.attend(cls_feat.unsqueeze(1), kv_tokens).squeeze(1)
        return out

    def classify(self, cls_feat: torch.Tensor) -> torch.Tensor:
        return self.classifier(cls_feat).squeeze(-1)

    # ---------------------------------------------------------------------------

    def forward(self, image: torch.Tensor) -> PredictionBundle:
        features = self.encode(image)
        dec_ai = self.fuse_decoder(features, "ai")
        dec_mani = self.fuse_decoder(features, "mani")
        mask_ai = self.predict_mask(dec_ai, "ai")
        mask_mani = self.predict_mask(dec_mani, "mani")

        cls_feat = self.cls_feature(features)
        mode = self.cfg.attention_mode
        if mode in ("reverse", "dual"):
            kv_tokens = self._cls_side_tokens(cls_feat, features)
            cls_feat = self.reverse_cross_attention(dec_ai, dec_mani, cls_feat, kv_tokens)
        if mode in ("forward", "dual"):
            cls_feat = self._forward_cross_attention(dec_ai, dec_mani, cls_feat)

        return PredictionBundle(
            mask_ai_logits=mask_ai,
            mask_mani_logits=mask_mani,
            cls_logit=self.classify(cls_feat),
            cls_feature=cls_feat,
        )


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Linear, nn.Conv2d)):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


CHECKPOINT_SCHEMA_VERSION = 1


def save_checkpoint(model: DetectorNet, path: str | Path, extra: dict | None = None) -> None:
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[DetectorNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema version: {version}")
    cfg_dict = dict(payload["config"])
    for key in ("stage_channels", "stage_depths", "attention_heads", "sr_ratios"):
        cfg_dict[key] = tuple(cfg_dict[key])
    model = DetectorNet(EncoderConfig(**cfg_dict))
    model.load_state_dict(payload["state_dict"])
    return model, payload.get("extra", {})
