"""Batch construction: random item sampling and product-balance sampling.

Every batch item is a (page, video, live) triple of one product, so the
corpus must be complete-triples.  Product-balance sampling picks P
products and K instances each (N = P*K); random sampling picks N products
uniformly.  Class indices come from the lexicographic order of product
ids, frozen per corpus.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Corpus, Domain, Sample
from .errors import ContractError


@dataclass(frozen=True)
class TripleItem:
    page: Sample
    video: Sample
    live: Sample
    product_id: str
    label: int


@dataclass(frozen=True)
class TripleBatch:
    items: tuple[TripleItem, ...]

    def __len__(self) -> int:
        return len(self.items)


def class_index_map(corpus: Corpus) -> dict[str, int]:
    return {p: i for i, p in enumerate(corpus.product_ids)}


def _require_complete(corpus: Corpus) -> None:
    if not corpus.complete_triples:
        raise ContractError("corpus must contain P, V and L samples for every product")


def _pick(samples: list[Sample], rng: np.random.Generator) -> Sample:
    return samples[int(rng.integers(0, len(samples)))]


def _item(
    corpus: Corpus,
    product_id: str,
    labels: dict[str, int],
    rng: np.random.Generator,
    picks: dict[Domain, Sample] | None = None,
) -> TripleItem:
    per_domain = corpus.products[product_id]
    chosen = picks or {d: _pick(per_domain[d], rng) for d in Domain}
    return TripleItem(
        page=chosen[Domain.P],
        video=chosen[Domain.V],
        live=chosen[Domain.L],
        product_id=product_id,
        label=labels[product_id],
    )


def sample_batch_random(corpus: Corpus, n: int, rng: np.random.Generator) -> TripleBatch:
    """Uniformly pick n products (without replacement when possible)."""
    _require_complete(corpus)
    if n < 2:
        raise ContractError(f"batch size must be >= 2, got {n}")
    products = corpus.product_ids
    labels = class_index_map(corpus)
    chosen = rng.choice(products, size=n, replace=n > len(products))
    return TripleBatch(tuple(_item(corpus, p, labels, rng) for p in chosen))


def sample_batch_balanced(
    corpus: Corpus, p: int, k: int, rng: np.random.Generator
) -> TripleBatch:
    """Pick p distinct products, k instances each; instances reuse a sample
    of one domain only when the product has fewer than k samples there."""
    _require_complete(corpus)
    if p < 2 or k < 1:
        raise ContractError(f"need p >= 2 and k >= 1, got p={p}, k={k}")
    products = corpus.product_ids
    if p > len(products):
        raise ContractError(f"p={p} exceeds the {len(products)} products in the corpus")
    labels = class_index_map(corpus)
    chosen = rng.choice(products, size=p, replace=False)
    items = []
    for product_id in chosen:
        per_domain = corpus.products[product_id]
        order = {
            d: rng.permutation(len(per_domain[d])) for d in Domain
        }
        for i in range(k):
            picks = {
                d: per_domain[d][int(order[d][i % len(order[d])])] for d in Domain
            }
            items.append(_item(corpus, product_id, labels, rng, picks=picks))
    return TripleBatch(tuple(items))
