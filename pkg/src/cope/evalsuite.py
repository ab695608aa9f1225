"""Retrieval and few-shot evaluation over exported embedding tables.

Six cross-domain retrieval directions (P2V, V2P, P2L, L2P, V2L, L2V) share
one code path.  Relevance is binary same-product.  Metric definitions:

* R@K       — fraction of queries with at least one relevant gallery item
              in the top K.
* R@mean    — arithmetic mean of the reported R@K values.
* Prec@K    — mean over queries of |relevant in top K| / K.
* mAR@K     — mean over queries of |relevant in top K| / |relevant|.
* mAP@K     — mean over queries of sum_{r<=K} Prec@r * rel(r) / min(|relevant|, K).

Queries whose product has no gallery item are excluded from every
denominator and counted in the report.  Ties in similarity break by
ascending sample_id.  ``metric_oracle`` recomputes everything with naive
loops and is the test-time reference for the vectorized path.

Embedding file: magic ``COPE``, u16 version=1, u16 flags=0, u32 dim,
u64 count, then count*dim float32 little-endian rows; a sidecar JSONL
(``<file>.meta.jsonl``) carries {row, sample_id, product_id, domain}.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import Corpus, Domain
from .errors import CompatibilityError, ContractError, ManifestError
from .model import CopeModel

DIRECTIONS = (
    (Domain.P, Domain.V),
    (Domain.V, Domain.P),
    (Domain.P, Domain.L),
    (Domain.L, Domain.P),
    (Domain.V, Domain.L),
    (Domain.L, Domain.V),
)

DEFAULT_RECALL_KS = (1, 5, 10, 20, 50)
DEFAULT_MAP_KS = (10, 50, 100)

_EMB_MAGIC = b"COPE"
_EMB_HEADER = struct.Struct("<4sHHIQ")


@dataclass
class EmbeddingTable:
    rows: np.ndarray              # (n, d) float32, unit rows
    sample_ids: list[str]
    product_ids: list[str]
    domains: list[Domain]

    def __post_init__(self) -> None:
        n = self.rows.shape[0]
        if not (len(self.sample_ids) == len(self.product_ids) == len(self.domains) == n):
            raise ContractError("embedding table metadata count mismatch")
        norms = np.linalg.norm(self.rows, axis=1)
        if n and not np.allclose(norms, 1.0, atol=1e-5):
            raise ContractError("embedding rows must be L2-normalized")

    def __len__(self) -> int:
        return self.rows.shape[0]

    def subset(self, domain: Domain) -> "EmbeddingTable":
        idx = [i for i, d in enumerate(self.domains) if d is domain]
        return EmbeddingTable(
            rows=self.rows[idx],
            sample_ids=[self.sample_ids[i] for i in idx],
            product_ids=[self.product_ids[i] for i in idx],
            domains=[domain] * len(idx),
        )


def export_embeddings(model: CopeModel, corpus: Corpus, batch_size: int = 64) -> EmbeddingTable:
    """One row per sample (sample_id ascending) using the final per-domain
    representation: fused for pages, projected vision for videos/lives."""
    if model.cfg.text.vocab_size < _corpus_vocab_ceiling(corpus):
        raise CompatibilityError("corpus token ids exceed the model vocabulary")
    samples = corpus.samples
    rows = np.empty((len(samples), model.cfg.visual.embed_dim), dtype=np.float32)
    model.eval()
    with torch.no_grad():
        for domain in Domain:
            idx = [i for i, s in enumerate(samples) if s.domain is domain]
            for start in range(0, len(idx), batch_size):
                chunk = idx[start : start + batch_size]
                reps = model.final_representation([samples[i] for i in chunk], domain)
                rows[chunk] = reps.to(torch.float32).numpy()
    return EmbeddingTable(
        rows=rows,
        sample_ids=[s.sample_id for s in samples],
        product_ids=[s.product_id for s in samples],
        domains=[s.domain for s in samples],
    )


def _corpus_vocab_ceiling(corpus: Corpus) -> int:
    top = 0
    for s in corpus.samples:
        if s.text_tokens:
            top = max(top, max(s.text_tokens) + 1)
    return top


def save_embeddings(table: EmbeddingTable, path: Path) -> None:
    path = Path(path)
    n, d = table.rows.shape
    with open(path, "wb") as f:
        f.write(_EMB_HEADER.pack(_EMB_MAGIC, 1, 0, d, n))
        f.write(np.ascontiguousarray(table.rows, dtype="<f4").tobytes())
    lines = [
        json.dumps(
            {
                "row": i,
                "sample_id": table.sample_ids[i],
                "product_id": table.product_ids[i],
                "domain": table.domains[i].value,
            },
            sort_keys=True,
        )
        for i in range(n)
    ]
    Path(str(path) + ".meta.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_embeddings(path: Path) -> EmbeddingTable:
    path = Path(path)
    with open(path, "rb") as f:
        header = f.read(_EMB_HEADER.size)
        if len(header) < _EMB_HEADER.size:
            raise ManifestError(f"{path}: truncated embedding header")
        magic, version, _, dim, count = _EMB_HEADER.unpack(header)
        if magic != _EMB_MAGIC:
            raise ManifestError(f"{path}: bad magic {magic!r}")
        if version != 1:
            raise ManifestError(f"{path}: unsupported version {version}")
        rows = np.frombuffer(f.read(), dtype="<f4")
    if rows.size != count * dim:
        raise ManifestError(f"{path}: payload size mismatch")
    rows = rows.reshape(count, dim).copy()
    sample_ids, product_ids, domains = [], [], []
    meta_path = Path(str(path) + ".meta.jsonl")
    with open(meta_path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            sample_ids.append(obj["sample_id"])
            product_ids.append(obj["product_id"])
            domains.append(Domain(obj["domain"]))
    if len(sample_ids) != count:
        raise ManifestError(f"{meta_path}: row count disagrees with {path}")
    return EmbeddingTable(rows, sample_ids, product_ids, domains)


# ---------------------------------------------------------------------------
# Ranking and retrieval metrics


def rank_gallery(query_row: np.ndarray, gallery: EmbeddingTable) -> np.ndarray:
    """Gallery indices in descending cosine order, ties by ascending sample_id."""
    sims = gallery.rows @ query_row.astype(gallery.rows.dtype)
    tie_rank = np.argsort(np.argsort(gallery.sample_ids, kind="stable"))
    return np.lexsort((tie_rank, -sims))


@dataclass
class RetrievalReport:
    direction: str
    recall_at: dict[int, float]
    r_mean: float
    map_at: dict[int, float]
    mar_at: dict[int, float]
    prec_at: dict[int, float]
    query_count: int
    excluded_queries: int

    def to_json(self) -> str:
        obj = {
            "direction": self.direction,
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "r_mean": self.r_mean,
            "map_at": {str(k): v for k, v in self.map_at.items()},
            "mar_at": {str(k): v for k, v in self.mar_at.items()},
            "prec_at": {str(k): v for k, v in self.prec_at.items()},
            "query_count": self.query_count,
            "excluded_queries": self.excluded_queries,
        }
        return json.dumps(obj, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RetrievalReport":
        obj = json.loads(text)
        return cls(
            direction=obj["direction"],
            recall_at={int(k): v for k, v in obj["recall_at"].items()},
            r_mean=obj["r_mean"],
            map_at={int(k): v for k, v in obj["map_at"].items()},
            mar_at={int(k): v for k, v in obj["mar_at"].items()},
            prec_at={int(k): v for k, v in obj["prec_at"].items()},
            query_count=obj["query_count"],
            excluded_queries=obj["excluded_queries"],
        )


def r_mean(recalls: dict[int, float]) -> float:
    return float(sum(recalls.values()) / len(recalls))


def _check_tables(queries: EmbeddingTable, gallery: EmbeddingTable) -> None:
    if len(queries) == 0 or len(gallery) == 0:
        raise ContractError("query and gallery sets must be non-empty")
    if queries.rows.shape[1] != gallery.rows.shape[1]:
        raise CompatibilityError("query/gallery dimension mismatch")


def retrieval_eval(
    table: EmbeddingTable,
    query_domain: Domain,
    gallery_domain: Domain,
    recall_ks: tuple[int, ...] = DEFAULT_RECALL_KS,
    map_ks: tuple[int, ...] = DEFAULT_MAP_KS,
) -> RetrievalReport:
    """Vectorized retrieval metrics for one direction."""
    queries = table.subset(query_domain)
    gallery = table.subset(gallery_domain)
    _check_tables(queries, gallery)
    gallery_products = set(gallery.product_ids)
    gal_prod = np.array(gallery.product_ids)
    tie_rank = np.argsort(np.argsort(gallery.sample_ids, kind="stable"))

    hits = {k: 0 for k in recall_ks}
    ap_sum = {k: 0.0 for k in map_ks}
    ar_sum = {k: 0.0 for k in map_ks}
    prec_sum = {k: 0.0 for k in map_ks}
    evaluated = excluded = 0
    for qi in range(len(queries)):
        if queries.product_ids[qi] not in gallery_products:
            excluded += 1
            continue
        sims = gallery.rows @ queries.rows[qi]
        keep = np.array(
            [gallery.sample_ids[g] != queries.sample_ids[qi] for g in range(len(gallery))]
        )
        order = np.lexsort((tie_rank[keep], -sims[keep]))
        rel = (gal_prod[keep][order] == queries.product_ids[qi])
        n_rel = int(rel.sum())
        evaluated += 1
        if n_rel == 0:
            continue  # empty relevance after self-exclusion: contributes 0
        cum = np.cumsum(rel)
        for k in recall_ks:
            if cum[min(k, len(rel)) - 1] > 0:
                hits[k] += 1
        ranks = np.arange(1, len(rel) + 1)
        precision_at_r = cum / ranks
        for k in map_ks:
            top = min(k, len(rel))
            rel_top = int(cum[top - 1])
            prec_sum[k] += rel_top / k
            ar_sum[k] += rel_top / n_rel
            ap_sum[k] += float(
                (precision_at_r[:top] * rel[:top]).sum() / min(n_rel, k)
            )
    if evaluated == 0:
        raise ContractError("no evaluable queries for this direction")
    recalls = {k: hits[k] / evaluated for k in recall_ks}
    return RetrievalReport(
        direction=f"{query_domain.value}2{gallery_domain.value}",
        recall_at=recalls,
        r_mean=r_mean(recalls),
        map_at={k: ap_sum[k] / evaluated for k in map_ks},
        mar_at={k: ar_sum[k] / evaluated for k in map_ks},
        prec_at={k: prec_sum[k] / evaluated for k in map_ks},
        query_count=evaluated,
        excluded_queries=excluded,
    )


def metric_oracle(
    table: EmbeddingTable,
    query_domain: Domain,
    gallery_domain: Domain,
    recall_ks: tuple[int, ...] = DEFAULT_RECALL_KS,
    map_ks: tuple[int, ...] = DEFAULT_MAP_KS,
) -> RetrievalReport:
    """Same metrics by exhaustive pairwise similarity and naive sorting."""
    queries = table.subset(query_domain)
    gallery = table.subset(gallery_domain)
    _check_tables(queries, gallery)
    if len(gallery) > 2000:
        raise ContractError("oracle is desk-scale only (gallery <= 2000 rows)")

    hits = {k: 0 for k in recall_ks}
    ap_sum = {k: 0.0 for k in map_ks}
    ar_sum = {k: 0.0 for k in map_ks}
    prec_sum = {k: 0.0 for k in map_ks}
    evaluated = excluded = 0
    for qi in range(len(queries)):
        scored = []
        for gi in range(len(gallery)):
            if gallery.sample_ids[gi] == queries.sample_ids[qi]:
                continue
            cos = float(np.dot(queries.rows[qi], gallery.rows[gi]))
            scored.append((-cos, gallery.sample_ids[gi], gallery.product_ids[gi]))
        scored.sort()
        relevant = [p == queries.product_ids[qi] for _, _, p in scored]
        n_rel = sum(relevant)
        evaluated += 1
        if n_rel == 0:
            continue
        for k in recall_ks:
            if any(relevant[:k]):
                hits[k] += 1
        for k in map_ks:
            top = relevant[:k]
            rel_top = sum(top)
            prec_sum[k] += rel_top / k
            ar_sum[k] += rel_top / n_rel
            ap = 0.0
            seen = 0
            for r, is_rel in enumerate(top, start=1):
                if is_rel:
                    seen += 1
                    ap += seen / r
            ap_sum[k] += ap / min(n_rel, k)
    if evaluated == 0:
        raise ContractError("no evaluable queries for this direction")
    recalls = {k: hits[k] / evaluated for k in recall_ks}
    return RetrievalReport(
        direction=f"{query_domain.value}2{gallery_domain.value}",
        recall_at=recalls,
        r_mean=r_mean(recalls),
        map_at={k: ap_sum[k] / evaluated for k in map_ks},
        mar_at={k: ar_sum[k] / evaluated for k in map_ks},
        prec_at={k: prec_sum[k] / evaluated for k in map_ks},
        query_count=evaluated,
        excluded_queries=excluded,
    )


# ---------------------------------------------------------------------------
# Few-shot (k=1) classification


@dataclass
class FewShotReport:
    direction: str
    mean_accuracy: float
    sd_accuracy: float
    per_repeat: list[float]


def few_shot_eval(
    table: EmbeddingTable,
    anchor_domain: Domain,
    query_domain: Domain,
    seed: int = 0,
    repeats: int = 5,
) -> FewShotReport:
    """Classify queries by the nearest of one random anchor per product."""
    anchors_all = table.subset(anchor_domain)
    queries = table.subset(query_domain)
    _check_tables(queries, anchors_all)
    by_product: dict[str, list[int]] = {}
    for i, p in enumerate(anchors_all.product_ids):
        by_product.setdefault(p, []).append(i)
    missing = sorted(set(queries.product_ids) - set(by_product))
    if missing:
        raise ContractError(f"products without anchors: {missing}")

    accuracies = []
    for r in range(repeats):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 31, r]))
        anchor_idx = [
            by_product[p][int(rng.integers(0, len(by_product[p])))]
            for p in sorted(by_product)
        ]
        anchor_rows = anchors_all.rows[anchor_idx]
        anchor_products = [anchors_all.product_ids[i] for i in anchor_idx]
        anchor_sids = [anchors_all.sample_ids[i] for i in anchor_idx]
        tie_rank = np.argsort(np.argsort(anchor_sids, kind="stable"))
        correct = 0
        for qi in range(len(queries)):
            sims = anchor_rows @ queries.rows[qi]
            best = np.lexsort((tie_rank, -sims))[0]
            if anchor_products[best] == queries.product_ids[qi]:
                correct += 1
        accuracies.append(correct / len(queries))
    return FewShotReport(
        direction=f"{query_domain.value}@{anchor_domain.value}",
        mean_accuracy=float(np.mean(accuracies)),
        sd_accuracy=float(np.std(accuracies)),
        per_repeat=accuracies,
    )


# ---------------------------------------------------------------------------
# Bootstrap filtering (dataset-construction step)


@dataclass(frozen=True)
class SampleRef:
    sample_id: str
    product_id: str
    domain: Domain


@dataclass(frozen=True)
class ScoredPair:
    a: SampleRef
    b: SampleRef
    score: float


def bootstrap_filter(pairs: list[ScoredPair], threshold: float = 0.7) -> list[ScoredPair]:
    """Keep pairs whose matching score is strictly above the threshold."""
    for pair in pairs:
        if not 0.0 <= pair.score <= 1.0:
            raise ContractError(f"matching scores must be in [0,1], got {pair.score}")
    return [p for p in pairs if p.score > threshold]


def aggregate_triples(pairs: list[ScoredPair]) -> dict[str, dict[Domain, list[str]]]:
    """Group matched samples by product, keeping only products covered in
    all three domains."""
    coverage: dict[str, dict[Domain, set[str]]] = {}
    for pair in pairs:
        for ref in (pair.a, pair.b):
            per_domain = coverage.setdefault(
                ref.product_id, {d: set() for d in Domain}
            )
            per_domain[ref.domain].add(ref.sample_id)
    return {
        product: {d: sorted(ids) for d, ids in per_domain.items()}
        for product, per_domain in sorted(coverage.items())
        if all(per_domain[d] for d in Domain)
    }


def candidate_pairs_from_table(table: EmbeddingTable) -> list[ScoredPair]:
    """All cross-domain pairs scored by cosine mapped into [0,1]."""
    refs = [
        SampleRef(table.sample_ids[i], table.product_ids[i], table.domains[i])
        for i in range(len(table))
    ]
    sims = table.rows @ table.rows.T
    pairs = []
    for i in range(len(table)):
        for j in range(i + 1, len(table)):
            if table.domains[i] is table.domains[j]:
                continue
            score = float(np.clip((sims[i, j] + 1.0) / 2.0, 0.0, 1.0))
            pairs.append(ScoredPair(refs[i], refs[j], score))
    return pairs


# ---------------------------------------------------------------------------
# 2D projection export (linear stand-in for the t-SNE figure)


def project_2d(table: EmbeddingTable) -> np.ndarray:
    """Coordinates of every row along the top-2 principal directions."""
    centered = table.rows - table.rows.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:2].T
