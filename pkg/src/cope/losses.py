"""Training objective: seven cross-domain contrastive terms plus classification.

Each contrastive channel compares one representation of the batch items
against another (e.g. fused page vectors against video vectors) with a
temperature-scaled InfoNCE loss.  Batches built by product-balance
sampling contain several items per product, so the loss averages over all
positives while keeping every item in the denominator; with a single
positive this reduces to plain InfoNCE.  Channels are symmetrized by
averaging both query/key directions.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractError

# The seven similarity channels, as (query representation, key representation).
CHANNELS: tuple[tuple[str, str], ...] = (
    ("fus_P", "vis_V"),
    ("fus_P", "vis_L"),
    ("vis_V", "vis_L"),
    ("vis_P", "vis_V"),
    ("txt_P", "vis_V"),
    ("vis_P", "vis_L"),
    ("txt_P", "vis_L"),
)


@dataclass(frozen=True)
class LossWeights:
    alpha: tuple[float, ...] = (1.0,) * 7
    beta: float = 1.0
    tau: float = 0.07

    def validate(self) -> None:
        if len(self.alpha) != len(CHANNELS):
            raise ConfigError(f"alpha needs {len(CHANNELS)} entries, got {len(self.alpha)}")
        if any(a < 0 or a != a for a in self.alpha):
            raise ConfigError(f"alpha entries must be finite and >= 0: {self.alpha}")
        if self.beta < 0 or self.beta != self.beta:
            raise ConfigError(f"beta must be finite and >= 0, got {self.beta}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")


def _nce_rows(sim: torch.Tensor, pos_mask: torch.Tensor, tau: float) -> torch.Tensor:
    """Per-query mean-over-positives InfoNCE from a similarity matrix."""
    if not bool(pos_mask.any(dim=1).all()):
        raise ContractError("every query needs at least one positive key")
    logits = sim / tau
    log_denom = torch.logsumexp(logits, dim=1, keepdim=True)
    log_prob = logits - log_denom
    return -(log_prob * pos_mask).sum(dim=1) / pos_mask.sum(dim=1)


def info_nce(
    q: torch.Tensor,
    keys: torch.Tensor,
    positive_mask: torch.Tensor,
    tau: float,
) -> torch.Tensor:
    """Contrastive loss of one query against a key set.

    q: (d,) and keys: (K, d), all L2-normalized; positive_mask: (K,) bool.
    """
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    sim = (keys @ q).unsqueeze(0)
    return _nce_rows(sim, positive_mask.unsqueeze(0), tau)[0]


def _positive_matrix(product_ids: list[str], device=None) -> torch.Tensor:
    index = {p: i for i, p in enumerate(sorted(set(product_ids)))}
    ids = torch.tensor([index[p] for p in product_ids], device=device)
    return ids.unsqueeze(0) == ids.unsqueeze(1)


def channel_loss(
    normalized: dict[str, torch.Tensor],
    product_ids: list[str],
    channel: tuple[str, str],
    tau: float,
) -> torch.Tensor:
    """Symmetrized contrastive loss of one Table-of-channels row."""
    if channel not in CHANNELS:
        raise ContractError(f"unknown similarity channel {channel}")
    q_name, k_name = channel
    for name in (q_name, k_name):
        if name not in normalized:
            raise ContractError(f"batch lacks representation {name!r}")
    q, k = normalized[q_name], normalized[k_name]
    pos = _positive_matrix(product_ids, device=q.device)
    sim = q @ k.T
    forward = _nce_rows(sim, pos, tau).mean()
    backward = _nce_rows(sim.T, pos.T, tau).mean()
    return 0.5 * (forward + backward)


def cross_domain_loss(
    normalized: dict[str, torch.Tensor],
    product_ids: list[str],
    weights: LossWeights,
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Weighted sum of the seven channel losses; returns (total, per-channel)."""
    weights.validate()
    terms = [
        channel_loss(normalized, product_ids, ch, weights.tau) for ch in CHANNELS
    ]
    total = sum(a * t for a, t in zip(weights.alpha, terms))
    if not isinstance(total, torch.Tensor):
        total = torch.zeros((), dtype=terms[0].dtype)
    return total, terms


def classification_loss(
    logits_p: torch.Tensor,
    logits_v: torch.Tensor,
    logits_l: torch.Tensor,
    labels: torch.Tensor,
) -> torch.Tensor:
    """Sum of the three per-domain softmax cross-entropies, batch-averaged."""
    n_classes = logits_p.shape[-1]
    if int(labels.max()) >= n_classes or int(labels.min()) < 0:
        raise ContractError(
            f"label out of range for {n_classes} classes: {labels.tolist()}"
        )
    return (
        F.cross_entropy(logits_p, labels)
        + F.cross_entropy(logits_v, labels)
        + F.cross_entropy(logits_l, labels)
    )


def total_loss(embeddings, weights: LossWeights):
    """Full objective on a batch; returns (loss, per-term breakdown)."""
    cd, terms = cross_domain_loss(
        embeddings.normalized, embeddings.product_ids, weights
    )
    cls = classification_loss(
        embeddings.logits["P"],
        embeddings.logits["V"],
        embeddings.logits["L"],
        embeddings.labels,
    )
    total = cd + weights.beta * cls
    breakdown = {f"channel_{i + 1}": t for i, t in enumerate(terms)}
    breakdown.update({"cross_domain": cd, "classification": cls, "total": total})
    return total, breakdown
