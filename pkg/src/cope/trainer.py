"""Training loop: AdamW over three learning-rate groups with linear warmup
followed by cosine decay, product-balance (or random) batches, JSONL
metrics, and checkpointing.

The default learning rates mirror a fine-tuning setup with pretrained
encoders (tiny visual lr); from-scratch synthetic runs should override
them (see the benchmark configs in the eval suite).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import Corpus
from .errors import ConfigError, ContractError, TrainingDivergedError
from .losses import LossWeights, total_loss
from .model import CopeModel, ModelConfig
from .sampler import sample_batch_balanced, sample_batch_random


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    warmup_epochs: int = 2
    lr_text: float = 5e-5
    lr_visual: float = 5e-7
    lr_other: float = 5e-3
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    batch_products: int = 28
    instances_per_product: int = 3
    sampling: str = "balanced"  # or "random"
    loss: LossWeights = field(default_factory=LossWeights)
    steps_per_epoch: int = 0  # 0 -> ceil(corpus size / batch samples)
    eval_every: int = 0       # epochs between holdout evaluations, 0 = off

    @property
    def batch_items(self) -> int:
        return self.batch_products * self.instances_per_product

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 < self.warmup_epochs < self.epochs:
            raise ConfigError(
                f"warmup_epochs must be in (0, epochs), got {self.warmup_epochs}"
            )
        for name in ("lr_text", "lr_visual", "lr_other"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.sampling not in ("balanced", "random"):
            raise ConfigError(f"sampling must be balanced|random, got {self.sampling!r}")
        if self.batch_products < 2 or self.instances_per_product < 1:
            raise ConfigError(
                f"need batch_products >= 2 and instances_per_product >= 1, got "
                f"{self.batch_products}, {self.instances_per_product}"
            )
        self.loss.validate()


def lr_at(step: int, total_steps: int, warmup_steps: int, max_lr: float) -> float:
    """Linear warmup to max_lr, then cosine decay to zero."""
    if step <= warmup_steps:
        return max_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return max_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def parameter_groups(model: CopeModel, cfg: TrainConfig):
    """The three lr groups: text encoder, visual encoder, everything else."""
    text, visual, other = [], [], []
    for name, param in model.named_parameters():
        if name.startswith("text_encoder."):
            text.append(param)
        elif name.startswith("visual_encoder."):
            visual.append(param)
        else:
            other.append(param)
    return [
        {"params": text, "lr": cfg.lr_text, "max_lr": cfg.lr_text, "name": "text"},
        {"params": visual, "lr": cfg.lr_visual, "max_lr": cfg.lr_visual, "name": "visual"},
        {"params": other, "lr": cfg.lr_other, "max_lr": cfg.lr_other, "name": "other"},
    ]


@dataclass
class TrainResult:
    model: CopeModel
    checkpoint_path: Path
    metrics_path: Path
    first_loss: float
    final_loss: float


def train(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    corpus: Corpus,
    out_dir: Path,
) -> TrainResult:
    """Train a fresh model on the corpus; deterministic for a fixed seed."""
    cfg.validate()
    if not corpus.complete_triples:
        raise ContractError("training corpus must be complete-triples")
    if model_cfg.n_classes != len(corpus.products):
        model_cfg = replace(model_cfg, n_classes=len(corpus.products))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.set_num_threads(1)  # bit-for-bit reproducible metrics logs
    torch.manual_seed(cfg.seed)
    model = CopeModel(model_cfg)
    model.train()
    optimizer = torch.optim.AdamW(
        parameter_groups(model, cfg), weight_decay=cfg.weight_decay
    )

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 23]))
    steps_per_epoch = cfg.steps_per_epoch or max(
        1, math.ceil(len(corpus) / (3 * cfg.batch_items))
    )
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch

    metrics_path = out_dir / "metrics.jsonl"
    checkpoint_path = out_dir / "model.cpck"
    first = final = math.nan
    with open(metrics_path, "w", encoding="utf-8") as log:
        for step in range(1, total_steps + 1):
            if cfg.sampling == "balanced":
                batch = sample_batch_balanced(
                    corpus, cfg.batch_products, cfg.instances_per_product, rng
                )
            else:
                batch = sample_batch_random(corpus, cfg.batch_items, rng)

            for group in optimizer.param_groups:
                group["lr"] = lr_at(step, total_steps, warmup_steps, group["max_lr"])

            embeddings = model.embed_items(batch.items)
            loss, breakdown = total_loss(embeddings, cfg.loss)
            for name, value in breakdown.items():
                if not math.isfinite(float(value.detach())):
                    raise TrainingDivergedError(
                        f"non-finite loss term {name!r} at step {step}"
                    )
            optimizer.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()

            record = {
                "step": step,
                "epoch": (step - 1) // steps_per_epoch + 1,
                "lr_text": optimizer.param_groups[0]["lr"],
                "lr_visual": optimizer.param_groups[1]["lr"],
                "lr_other": optimizer.param_groups[2]["lr"],
            }
            record.update({k: float(v.detach()) for k, v in breakdown.items()})
            log.write(json.dumps(record, sort_keys=True) + "\n")
            if step == 1:
                first = float(loss.detach())
            final = float(loss.detach())

    model.eval()
    model.save(checkpoint_path)
    return TrainResult(
        model=model,
        checkpoint_path=checkpoint_path,
        metrics_path=metrics_path,
        first_loss=first,
        final_loss=final,
    )
