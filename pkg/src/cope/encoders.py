"""Shared visual and text encoders.

The visual encoder is a small ViT whose blocks optionally let per-frame
class tokens exchange information across time before the usual spatial
attention, followed by a single temporal-integration transformer layer
whose outputs are average-pooled into one video vector.  Product images
run through the same path as a one-frame video.

The text encoder is a three-layer pre-norm transformer over integer
tokens with a prepended class token; position tables are learned.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .errors import CapacityError, ManifestError, ShapeError, VocabularyError

PAD_TOKEN = 0

_CKPT_MAGIC = b"CPCK"
_CKPT_HEADER = struct.Struct("<4sHHI")


@dataclass(frozen=True)
class VisualEncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    mlp_ratio: float = 4.0
    max_frames: int = 8
    temporal_exchange: bool = True

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int = 200
    embed_dim: int = 64
    n_layers: int = 3
    n_heads: int = 4
    mlp_ratio: float = 4.0
    max_len: int = 32


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + MLP block.

    With ``zero_init`` both residual-branch output projections start at
    zero, making the block an exact identity at initialization.
    """

    def __init__(self, dim: int, n_heads: int, mlp_ratio: float, zero_init: bool = False):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim)
        )
        if zero_init:
            nn.init.zeros_(self.attn.out_proj.weight)
            nn.init.zeros_(self.attn.out_proj.bias)
            nn.init.zeros_(self.mlp[2].weight)
            nn.init.zeros_(self.mlp[2].bias)

    def forward(self, x: torch.Tensor, key_padding_mask: torch.Tensor | None = None):
        h = self.norm1(x)
        attn_out, _ = self.attn(h, h, h, key_padding_mask=key_padding_mask, need_weights=False)
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        return x


class CrossFrameBlock(nn.Module):
    """Spatial transformer block with an optional temporal message step.

    The message step runs one attention layer over the T class tokens of a
    video (residual added back).  Its output projection is zero-initialized
    so exchange starts as a no-op; for T=1 the step is skipped entirely,
    making single-frame inputs exactly independent of the exchange flag.
    """

    def __init__(self, cfg: VisualEncoderConfig):
        super().__init__()
        self.exchange_enabled = cfg.temporal_exchange
        self.msg_norm = nn.LayerNorm(cfg.embed_dim)
        self.msg_attn = nn.MultiheadAttention(cfg.embed_dim, cfg.n_heads, batch_first=True)
        nn.init.zeros_(self.msg_attn.out_proj.weight)
        nn.init.zeros_(self.msg_attn.out_proj.bias)
        self.spatial = TransformerBlock(cfg.embed_dim, cfg.n_heads, cfg.mlp_ratio)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """tokens: (B, T, M+1, d); position 0 of each frame is the class token."""
        b, t, m1, d = tokens.shape
        if self.exchange_enabled and t > 1:
            cls = tokens[:, :, 0, :]
            h = self.msg_norm(cls)
            msg, _ = self.msg_attn(h, h, h, need_weights=False)
            tokens = torch.cat(
                [(cls + msg).unsqueeze(2), tokens[:, :, 1:, :]], dim=2
            )
        flat = tokens.reshape(b * t, m1, d)
        flat = self.spatial(flat)
        return flat.reshape(b, t, m1, d)


class VisualEncoder(nn.Module):
    """Patch embedding -> N cross-frame blocks -> temporal integration -> mean."""

    def __init__(self, cfg: VisualEncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Linear(cfg.patch_dim, d)
        self.cls_token = nn.Parameter(torch.zeros(d))
        self.spatial_pos = nn.Parameter(torch.empty(cfg.n_patches + 1, d))
        self.temporal_pos = nn.Parameter(torch.empty(cfg.max_frames, d))
        nn.init.normal_(self.spatial_pos, std=0.02)
        nn.init.normal_(self.temporal_pos, std=0.02)
        self.blocks = nn.ModuleList(CrossFrameBlock(cfg) for _ in range(cfg.n_blocks))
        self.integrator = TransformerBlock(d, cfg.n_heads, cfg.mlp_ratio, zero_init=True)

    def _patch_tokens(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, H, W, 3) -> (B, T, M, patch_dim), patches row-major."""
        b, t, h, w, c = frames.shape
        p = self.cfg.patch_size
        if h != self.cfg.image_size or w != self.cfg.image_size:
            raise ShapeError(
                f"expected {self.cfg.image_size}x{self.cfg.image_size} frames, got {h}x{w}"
            )
        x = frames.reshape(b, t, h // p, p, w // p, p, c)
        x = x.permute(0, 1, 2, 4, 3, 5, 6)
        return x.reshape(b, t, (h // p) * (w // p), p * p * c)

    def embed_frame_tokens(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, H, W, 3) -> initial token states (B, T, M+1, d)."""
        if frames.ndim != 5:
            raise ShapeError(f"expected B,T,H,W,3 frames, got shape {tuple(frames.shape)}")
        b, t = frames.shape[:2]
        if t > self.cfg.max_frames:
            raise CapacityError(f"{t} frames exceeds max_frames={self.cfg.max_frames}")
        patches = self.patch_embed(self._patch_tokens(frames))
        cls = self.cls_token.expand(b, t, 1, -1)
        return torch.cat([cls, patches], dim=2) + self.spatial_pos

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, H, W, 3) -> video representations (B, d)."""
        tokens = self.embed_frame_tokens(frames)
        for block in self.blocks:
            tokens = block(tokens)
        t = tokens.shape[1]
        cls = tokens[:, :, 0, :] + self.temporal_pos[:t]
        return self.integrator(cls).mean(dim=1)


class TextEncoder(nn.Module):
    """Three-layer masked transformer over title tokens; returns the class slot."""

    def __init__(self, cfg: TextEncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.token_embed = nn.Embedding(cfg.vocab_size, d)
        self.cls_embed = nn.Parameter(torch.zeros(d))
        self.pos_embed = nn.Parameter(torch.empty(cfg.max_len + 1, d))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.layers = nn.ModuleList(
            TransformerBlock(d, cfg.n_heads, cfg.mlp_ratio)
            for _ in range(cfg.n_layers)
        )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """tokens: (B, L) int64, PAD_TOKEN-padded -> (B, d)."""
        if tokens.ndim != 2:
            raise ShapeError(f"expected B,L token matrix, got shape {tuple(tokens.shape)}")
        b, length = tokens.shape
        if length > self.cfg.max_len:
            raise CapacityError(f"sequence length {length} exceeds max_len={self.cfg.max_len}")
        if int(tokens.max()) >= self.cfg.vocab_size:
            raise VocabularyError(
                f"token id {int(tokens.max())} out of vocabulary "
                f"(size {self.cfg.vocab_size})"
            )
        x = torch.cat(
            [
                self.cls_embed.expand(b, 1, -1),
                self.token_embed(tokens),
            ],
            dim=1,
        ) + self.pos_embed[: length + 1]
        pad = tokens == PAD_TOKEN
        mask = torch.cat([pad.new_zeros(b, 1), pad], dim=1)
        for layer in self.layers:
            x = layer(x, key_padding_mask=mask)
        return x[:, 0]


# ---------------------------------------------------------------------------
# Checkpoint format: magic "CPCK", u16 version=1, u16 reserved, u32 index
# length, JSON index {name: {offset, shape, dtype}}, then f32-le payloads.


def save_checkpoint(state: dict[str, torch.Tensor], path: Path, meta: dict | None = None) -> None:
    index: dict[str, dict] = {}
    blobs = []
    offset = 0
    for name in sorted(state):
        tensor = state[name].detach().to(torch.float32).contiguous()
        blob = tensor.numpy().astype("<f4").tobytes()
        index[name] = {"offset": offset, "shape": list(tensor.shape), "dtype": "f32-le"}
        blobs.append(blob)
        offset += len(blob)
    payload = {"tensors": index}
    if meta:
        payload["meta"] = meta
    index_bytes = json.dumps(payload, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_HEADER.pack(_CKPT_MAGIC, 1, 0, len(index_bytes)))
        f.write(index_bytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: Path) -> tuple[dict[str, torch.Tensor], dict]:
    import numpy as np

    with open(path, "rb") as f:
        header = f.read(_CKPT_HEADER.size)
        if len(header) < _CKPT_HEADER.size:
            raise ManifestError(f"{path}: truncated checkpoint header")
        magic, version, _, index_len = _CKPT_HEADER.unpack(header)
        if magic != _CKPT_MAGIC:
            raise ManifestError(f"{path}: bad checkpoint magic {magic!r}")
        if version != 1:
            raise ManifestError(f"{path}: unsupported checkpoint version {version}")
        payload = json.loads(f.read(index_len).decode("utf-8"))
        data = f.read()
    state = {}
    for name, entry in payload["tensors"].items():
        shape = entry["shape"]
        count = 1
        for s in shape:
            count *= s
        start = entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start)
        state[name] = torch.from_numpy(arr.copy()).reshape(shape)
    return state, payload.get("meta", {})
