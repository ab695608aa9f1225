"""The full cross-domain product representation model.

One shared visual encoder and one shared text encoder feed four
domain-specific projection layers; product pages additionally pass their
(visual, text) pair through a fusion head.  Contrastive training and
retrieval consume L2-normalized projected vectors, the shared classifier
consumes the un-normalized ones.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import Domain, Sample
from .encoders import (
    PAD_TOKEN,
    TextEncoderConfig,
    VisualEncoder,
    VisualEncoderConfig,
    TextEncoder,
    load_checkpoint,
    save_checkpoint,
)
from .errors import CompatibilityError
from .heads import ClassifierHead, FusionHead, ProjectionSet

# Representation names used throughout losses and evaluation.  Pages are
# represented by the fused vector; videos and live streams by vision alone.
REPRESENTATIONS = ("fus_P", "vis_P", "txt_P", "vis_V", "vis_L")
FINAL_REPRESENTATION = {Domain.P: "fus_P", Domain.V: "vis_V", Domain.L: "vis_L"}


@dataclass(frozen=True)
class ModelConfig:
    visual: VisualEncoderConfig = field(default_factory=VisualEncoderConfig)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    n_classes: int = 2


@dataclass
class BatchEmbeddings:
    """All per-item representations needed by the training objective."""

    normalized: dict[str, torch.Tensor]  # name -> (B, d), unit rows
    logits: dict[str, torch.Tensor]      # "P"/"V"/"L" -> (B, C)
    product_ids: list[str]
    labels: torch.Tensor                 # (B,) int64


class CopeModel(torch.nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.visual.embed_dim != cfg.text.embed_dim:
            raise CompatibilityError("visual and text embed_dim must match")
        self.cfg = cfg
        d = cfg.visual.embed_dim
        self.visual_encoder = VisualEncoder(cfg.visual)
        self.text_encoder = TextEncoder(cfg.text)
        self.projections = ProjectionSet(d)
        self.fusion = FusionHead(d, cfg.visual.n_heads)
        self.classifier = ClassifierHead(d, cfg.n_classes)

    # -- sample -> tensor helpers ------------------------------------------

    def _frames_tensor(self, samples: list[Sample]) -> torch.Tensor:
        stack = np.stack([s.frames for s in samples])
        param = next(self.parameters())
        return torch.from_numpy(stack).to(param.dtype)

    def _token_tensor(self, samples: list[Sample]) -> torch.Tensor:
        max_len = max(len(s.text_tokens) for s in samples)
        out = torch.full((len(samples), max_len), PAD_TOKEN, dtype=torch.int64)
        for i, s in enumerate(samples):
            out[i, : len(s.text_tokens)] = torch.tensor(s.text_tokens)
        return out

    def encode_video_samples(self, samples: list[Sample]) -> torch.Tensor:
        """Encode a mixed-length list of frame stacks, batching per length."""
        by_frames: dict[int, list[int]] = {}
        for i, s in enumerate(samples):
            by_frames.setdefault(s.frames.shape[0], []).append(i)
        d = self.cfg.visual.embed_dim
        param = next(self.parameters())
        out = torch.empty(len(samples), d, dtype=param.dtype)
        for idxs in by_frames.values():
            z = self.visual_encoder(self._frames_tensor([samples[i] for i in idxs]))
            out[idxs] = z
        return out

    # -- domain pathways ---------------------------------------------------

    def encode_pages(self, samples: list[Sample]) -> dict[str, torch.Tensor]:
        """Product pages: projected vision, projected text, and fusion."""
        z_vis = self.encode_video_samples(samples)
        h_txt = self.text_encoder(self._token_tensor(samples))
        e_vis = self.projections(z_vis, Domain.P, "vision")
        e_txt = self.projections(h_txt, Domain.P, "text")
        e_fus = self.fusion(e_vis, e_txt)
        return {"vis_P": e_vis, "txt_P": e_txt, "fus_P": e_fus}

    def encode_clips(self, samples: list[Sample], domain: Domain) -> torch.Tensor:
        """Short videos / live streams: projected vision only."""
        z_vis = self.encode_video_samples(samples)
        return self.projections(z_vis, domain, "vision")

    def embed_items(self, items) -> BatchEmbeddings:
        """Embed a batch of aligned (page, video, live) triples."""
        page_reps = self.encode_pages([it.page for it in items])
        e_vis_v = self.encode_clips([it.video for it in items], Domain.V)
        e_vis_l = self.encode_clips([it.live for it in items], Domain.L)
        raw = {**page_reps, "vis_V": e_vis_v, "vis_L": e_vis_l}
        normalized = {k: F.normalize(v, dim=-1) for k, v in raw.items()}
        logits = {
            "P": self.classifier(raw["fus_P"]),
            "V": self.classifier(raw["vis_V"]),
            "L": self.classifier(raw["vis_L"]),
        }
        labels = torch.tensor([it.label for it in items], dtype=torch.int64)
        return BatchEmbeddings(
            normalized=normalized,
            logits=logits,
            product_ids=[it.product_id for it in items],
            labels=labels,
        )

    def final_representation(self, samples: list[Sample], domain: Domain) -> torch.Tensor:
        """The retrieval-time representation for one domain, L2-normalized."""
        if domain is Domain.P:
            rep = self.encode_pages(samples)["fus_P"]
        else:
            rep = self.encode_clips(samples, domain)
        return F.normalize(rep, dim=-1)

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "visual": self.cfg.visual.__dict__,
            "text": self.cfg.text.__dict__,
            "n_classes": self.cfg.n_classes,
        }
        save_checkpoint(self.state_dict(), path, meta=meta)

    @classmethod
    def load(cls, path) -> "CopeModel":
        state, meta = load_checkpoint(path)
        if not meta:
            raise CompatibilityError(f"{path}: checkpoint lacks model metadata")
        cfg = ModelConfig(
            visual=VisualEncoderConfig(**meta["visual"]),
            text=TextEncoderConfig(**meta["text"]),
            n_classes=meta["n_classes"],
        )
        model = cls(cfg)
        model.load_state_dict(state)
        model.eval()
        return model
