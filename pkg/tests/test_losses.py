import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from cope.errors import ConfigError, ContractError
from cope.losses import (
    CHANNELS,
    LossWeights,
    channel_loss,
    classification_loss,
    cross_domain_loss,
    info_nce,
)


def unit(v):
    return F.normalize(torch.as_tensor(v, dtype=torch.float64), dim=-1)


class TestInfoNCE:
    def test_equal_similarities_give_log_key_count(self):
        q = unit([1.0, 0.0])
        keys = q.expand(4, 2).clone()
        mask = torch.tensor([True, False, False, False])
        loss = info_nce(q, keys, mask, tau=0.5)
        assert loss.item() == pytest.approx(math.log(4), abs=1e-9)

    def test_hand_computed_value(self):
        # positive cos=1, one negative cos=0, tau=1 -> ln(1 + e^-1)
        q = unit([1.0, 0.0])
        keys = torch.stack([unit([1.0, 0.0]), unit([0.0, 1.0])])
        mask = torch.tensor([True, False])
        loss = info_nce(q, keys, mask, tau=1.0)
        assert loss.item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-9)

    def test_scale_invariance_of_cosine(self):
        rng = np.random.default_rng(0)
        raw_q = rng.normal(size=4)
        raw_keys = rng.normal(size=(3, 4))
        mask = torch.tensor([True, False, False])
        a = info_nce(unit(raw_q), unit(raw_keys), mask, tau=0.2)
        b = info_nce(unit(raw_q * 7.5), unit(raw_keys * 0.03), mask, tau=0.2)
        assert a.item() == pytest.approx(b.item(), abs=1e-12)

    def test_no_positive_raises(self):
        q = unit([1.0, 0.0])
        keys = torch.stack([unit([0.0, 1.0])])
        with pytest.raises(ContractError):
            info_nce(q, keys, torch.tensor([False]), tau=1.0)

    def test_bad_tau_raises(self):
        q = unit([1.0, 0.0])
        with pytest.raises(ConfigError):
            info_nce(q, q.unsqueeze(0), torch.tensor([True]), tau=0.0)

    def test_nonnegative_and_monotone_in_positive_similarity(self):
        neg = unit([0.0, 1.0])
        prev = None
        for angle in (0.9, 0.6, 0.3, 0.0):
            pos = unit([math.cos(angle), math.sin(angle)])
            q = unit([1.0, 0.0])
            loss = info_nce(q, torch.stack([pos, neg]), torch.tensor([True, False]), tau=0.3)
            assert loss.item() >= 0
            if prev is not None:
                assert loss.item() < prev  # higher positive cosine, lower loss
            prev = loss.item()


def two_product_embeddings():
    # orthonormal per-product embeddings, identical across representations
    e1 = torch.tensor([1.0, 0.0], dtype=torch.float64)
    e2 = torch.tensor([0.0, 1.0], dtype=torch.float64)
    reps = {name: torch.stack([e1, e2]) for name in
            ("fus_P", "vis_P", "txt_P", "vis_V", "vis_L")}
    return reps, ["a", "b"]


class TestChannelLoss:
    def test_orthonormal_two_products(self):
        reps, pids = two_product_embeddings()
        loss = channel_loss(reps, pids, ("fus_P", "vis_V"), tau=1.0)
        assert loss.item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-9)

    def test_identical_embeddings_give_log_batch(self):
        e = torch.tensor([1.0, 0.0], dtype=torch.float64)
        reps = {name: torch.stack([e, e, e]) for name in ("fus_P", "vis_V")}
        loss = channel_loss(reps, ["a", "a", "a"], ("fus_P", "vis_V"), tau=0.7)
        assert loss.item() == pytest.approx(math.log(3), abs=1e-9)

    def test_unknown_channel_rejected(self):
        reps, pids = two_product_embeddings()
        with pytest.raises(ContractError):
            channel_loss(reps, pids, ("txt_V", "vis_P"), tau=1.0)

    def test_channel_enumeration_matches_expected_table(self):
        assert CHANNELS == (
            ("fus_P", "vis_V"),
            ("fus_P", "vis_L"),
            ("vis_V", "vis_L"),
            ("vis_P", "vis_V"),
            ("txt_P", "vis_V"),
            ("vis_P", "vis_L"),
            ("txt_P", "vis_L"),
        )


class TestCrossDomainLoss:
    def rand_reps(self, n=4, d=8, seed=0):
        rng = np.random.default_rng(seed)
        reps = {
            name: unit(rng.normal(size=(n, d)))
            for name in ("fus_P", "vis_P", "txt_P", "vis_V", "vis_L")
        }
        return reps, [f"p{i}" for i in range(n)]

    def test_zero_weights_give_zero(self):
        reps, pids = self.rand_reps()
        total, _ = cross_domain_loss(reps, pids, LossWeights(alpha=(0.0,) * 7))
        assert total.item() == 0.0

    def test_single_selector_weight(self):
        reps, pids = self.rand_reps()
        weights = LossWeights(alpha=(1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0))
        total, _ = cross_domain_loss(reps, pids, weights)
        direct = channel_loss(reps, pids, CHANNELS[0], weights.tau)
        assert total.item() == pytest.approx(direct.item(), abs=1e-12)

    def test_sum_matches_independent_channel_sums(self):
        reps, pids = self.rand_reps(seed=5)
        weights = LossWeights()
        total, terms = cross_domain_loss(reps, pids, weights)
        recomputed = sum(
            channel_loss(reps, pids, ch, weights.tau).item() for ch in CHANNELS
        )
        assert total.item() == pytest.approx(recomputed, abs=1e-10)
        assert len(terms) == 7


class TestClassificationLoss:
    def test_uniform_logits(self):
        logits = torch.zeros(1, 10, dtype=torch.float64)
        labels = torch.tensor([3])
        loss = classification_loss(logits, logits, logits, labels)
        assert loss.item() == pytest.approx(3 * math.log(10), abs=1e-9)

    def test_decreases_as_correct_logit_grows(self):
        labels = torch.tensor([0])
        prev = None
        for value in (0.0, 1.0, 5.0, 20.0):
            logits = torch.zeros(1, 4, dtype=torch.float64)
            logits[0, 0] = value
            loss = classification_loss(logits, logits, logits, labels).item()
            if prev is not None:
                assert loss < prev
            prev = loss
        assert prev < 1e-7

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        base = torch.as_tensor(rng.normal(size=(2, 5)))
        labels = torch.tensor([1, 4])
        a = classification_loss(base, base, base, labels)
        b = classification_loss(base + 100.0, base, base, labels)
        assert a.item() == pytest.approx(b.item(), abs=1e-9)

    def test_label_out_of_range(self):
        logits = torch.zeros(1, 3)
        with pytest.raises(ContractError):
            classification_loss(logits, logits, logits, torch.tensor([3]))


class TestLossWeights:
    def test_tau_must_be_positive(self):
        with pytest.raises(ConfigError):
            LossWeights(tau=0.0).validate()

    def test_alpha_length(self):
        with pytest.raises(ConfigError):
            LossWeights(alpha=(1.0, 1.0)).validate()
