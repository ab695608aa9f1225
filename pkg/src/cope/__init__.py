"""Cross-domain product representation learning at desk scale.

Synthetic three-domain corpora (product pages, short videos, live
streams), a shared dual-encoder model with domain projections and page
fusion, a seven-channel cross-domain contrastive objective plus product
classification, product-balance batch sampling, and a retrieval /
few-shot evaluation suite with brute-force oracles.
"""
from .data import (
    Corpus,
    Domain,
    GenConfig,
    Sample,
    generate_synthetic_corpus,
    load_manifest,
    patchify,
    save_manifest,
    split_corpus,
    unpatchify,
)
from .encoders import TextEncoderConfig, VisualEncoderConfig
from .losses import CHANNELS, LossWeights, total_loss
from .model import CopeModel, ModelConfig
from .sampler import TripleBatch, sample_batch_balanced, sample_batch_random
from .trainer import TrainConfig, lr_at, train
from .evalsuite import (
    EmbeddingTable,
    export_embeddings,
    few_shot_eval,
    load_embeddings,
    metric_oracle,
    retrieval_eval,
    save_embeddings,
)

__version__ = "0.1.0"
