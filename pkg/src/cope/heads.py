"""Domain projection layers, the page fusion head, and the shared classifier."""
from __future__ import annotations

import torch
import torch.nn as nn

from .data import Domain
from .errors import UnsupportedModalityError

# The four (domain, modality) pairs that own a projection layer.  Video and
# live-stream text is deliberately absent: ASR text is not used.
PROJECTION_KEYS = ("vis_P", "txt_P", "vis_V", "vis_L")


def projection_key(domain: Domain, modality: str) -> str:
    prefix = {"vision": "vis", "text": "txt"}.get(modality)
    key = f"{prefix}_{domain.value}"
    if prefix is None or key not in PROJECTION_KEYS:
        raise UnsupportedModalityError(
            f"no projection for domain={domain.value}, modality={modality}"
        )
    return key


class ProjectionSet(nn.Module):
    """Four independent affine maps, parameters not shared between domains."""

    def __init__(self, dim: int):
        super().__init__()
        self.maps = nn.ModuleDict({k: nn.Linear(dim, dim) for k in PROJECTION_KEYS})

    def forward(self, x: torch.Tensor, domain: Domain, modality: str) -> torch.Tensor:
        return self.maps[projection_key(domain, modality)](x)


class FusionHead(nn.Module):
    """Self-attention over the (visual, text) pair of a product page.

    No position encodings are added, so the head is exactly symmetric in
    its two inputs; the attention output projection starts at zero so the
    head is an affine map of the token mean at initialization.
    """

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        nn.init.zeros_(self.attn.out_proj.weight)
        nn.init.zeros_(self.attn.out_proj.bias)
        self.out = nn.Linear(dim, dim)

    def forward(self, vis: torch.Tensor, txt: torch.Tensor) -> torch.Tensor:
        tokens = torch.stack([vis, txt], dim=1)
        h = self.norm(tokens)
        attn_out, _ = self.attn(h, h, h, need_weights=False)
        pooled = (tokens + attn_out).mean(dim=1)
        return self.out(pooled)


class ClassifierHead(nn.Module):
    """Two-layer MLP over domain representations; one set of weights for all domains."""

    def __init__(self, dim: int, n_classes: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, n_classes)
        )
        self.n_classes = n_classes

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)
