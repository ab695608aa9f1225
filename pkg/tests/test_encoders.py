import numpy as np
import pytest
import torch

from cope.encoders import (
    PAD_TOKEN,
    TextEncoder,
    TextEncoderConfig,
    VisualEncoder,
    VisualEncoderConfig,
    load_checkpoint,
    save_checkpoint,
)
from cope.errors import CapacityError, VocabularyError


def visual_cfg(**kwargs):
    defaults = dict(
        image_size=32, patch_size=16, embed_dim=8, n_blocks=2, n_heads=2, max_frames=4
    )
    defaults.update(kwargs)
    return VisualEncoderConfig(**defaults)


def rand_frames(t, size=32, seed=0):
    rng = np.random.default_rng(seed)
    return torch.as_tensor(rng.random((1, t, size, size, 3)), dtype=torch.float64)


class TestFrameTokens:
    def test_shape_is_patches_plus_class(self):
        torch.manual_seed(0)
        enc = VisualEncoder(visual_cfg()).double()
        tokens = enc.embed_frame_tokens(rand_frames(2))
        assert tokens.shape == (1, 2, 5, 8)  # M=4 patches + class token, d=8

    def test_zero_weights_leave_position_table(self):
        torch.manual_seed(0)
        enc = VisualEncoder(visual_cfg()).double()
        with torch.no_grad():
            enc.patch_embed.weight.zero_()
            enc.patch_embed.bias.zero_()
        tokens = enc.embed_frame_tokens(torch.zeros(1, 1, 32, 32, 3, dtype=torch.float64))
        expected = torch.cat(
            [enc.cls_token.unsqueeze(0), torch.zeros(4, 8, dtype=torch.float64)]
        ) + enc.spatial_pos
        assert torch.allclose(tokens[0, 0], expected)

    def test_identical_frames_identical_tokens(self):
        torch.manual_seed(0)
        enc = VisualEncoder(visual_cfg()).double()
        frame = rand_frames(1)
        frames = torch.cat([frame, frame], dim=1)
        tokens = enc.embed_frame_tokens(frames)
        assert torch.equal(tokens[0, 0], tokens[0, 1])

    def test_too_many_frames(self):
        enc = VisualEncoder(visual_cfg())
        with pytest.raises(CapacityError):
            enc.embed_frame_tokens(torch.zeros(1, 5, 32, 32, 3))


class TestCrossFrameExchange:
    def test_disabled_frames_are_independent(self):
        torch.manual_seed(1)
        enc = VisualEncoder(visual_cfg(temporal_exchange=False)).double()
        frames = rand_frames(2, seed=1)
        tokens = enc.embed_frame_tokens(frames)
        out_a = enc.blocks[0](tokens)
        perturbed = tokens.clone()
        perturbed[:, 1] += 0.5
        out_b = enc.blocks[0](perturbed)
        assert torch.allclose(out_a[:, 0], out_b[:, 0])

    def test_enabled_class_token_crosses_frames(self):
        torch.manual_seed(1)
        enc = VisualEncoder(visual_cfg()).double()
        # exchange starts zero-initialized; give it real weights
        with torch.no_grad():
            for block in enc.blocks:
                torch.nn.init.normal_(block.msg_attn.out_proj.weight, std=0.1)
        frames = rand_frames(2, seed=1)
        tokens = enc.embed_frame_tokens(frames)
        out_a = enc.blocks[0](tokens)
        perturbed = tokens.clone()
        perturbed[:, 1, 0, 0] += 0.5  # frame 2's class token, one component
        out_b = enc.blocks[0](perturbed)
        assert not torch.allclose(out_a[:, 0, 0], out_b[:, 0, 0])

    def test_single_frame_exchange_is_noop(self):
        torch.manual_seed(2)
        enc_on = VisualEncoder(visual_cfg(temporal_exchange=True)).double()
        enc_off = VisualEncoder(visual_cfg(temporal_exchange=False)).double()
        enc_off.load_state_dict(enc_on.state_dict())
        with torch.no_grad():
            for block in enc_on.blocks:
                torch.nn.init.normal_(block.msg_attn.out_proj.weight, std=0.1)
        frames = rand_frames(1, seed=3)
        assert torch.allclose(enc_on(frames), enc_off(frames), atol=1e-9)


class TestTemporalAggregation:
    def test_zero_branch_identity_single_frame(self):
        torch.manual_seed(3)
        enc = VisualEncoder(visual_cfg()).double()
        token = torch.as_tensor(np.random.default_rng(4).normal(size=(1, 1, 8)))
        # integrator residual branches are zero-initialized
        out = enc.integrator(token + enc.temporal_pos[:1]).mean(dim=1)
        assert torch.allclose(out, token[:, 0] + enc.temporal_pos[0])

    def test_permutation_invariance_without_temporal_positions(self):
        torch.manual_seed(3)
        enc = VisualEncoder(visual_cfg(temporal_exchange=False)).double()
        with torch.no_grad():
            enc.temporal_pos.zero_()
            # non-trivial integrator
            torch.nn.init.normal_(enc.integrator.attn.out_proj.weight, std=0.1)
            torch.nn.init.normal_(enc.integrator.mlp[2].weight, std=0.1)
        frames = rand_frames(4, seed=5)
        shuffled = frames[:, [2, 0, 3, 1]]
        assert torch.allclose(enc(frames), enc(shuffled), atol=1e-10)

    def test_identical_tokens_aggregate_to_common_value(self):
        torch.manual_seed(4)
        enc = VisualEncoder(visual_cfg()).double()
        with torch.no_grad():
            enc.temporal_pos.zero_()
            torch.nn.init.normal_(enc.integrator.attn.out_proj.weight, std=0.1)
            torch.nn.init.normal_(enc.integrator.mlp[2].weight, std=0.1)
        token = torch.as_tensor(np.random.default_rng(6).normal(size=(1, 1, 8)))
        tokens = token.expand(1, 4, 8)
        out_tokens = enc.integrator(tokens)
        # attention over identical tokens yields identical outputs
        assert torch.allclose(out_tokens[:, 0], out_tokens[:, 1])
        single = enc.integrator(token).mean(dim=1)
        assert torch.allclose(out_tokens.mean(dim=1), single)


class TestEncodeVideo:
    def test_page_encodes_to_d_vector(self):
        torch.manual_seed(5)
        enc = VisualEncoder(visual_cfg())
        out = enc(torch.rand(1, 1, 32, 32, 3))
        assert out.shape == (1, 8)

    def test_deterministic(self):
        torch.manual_seed(5)
        enc = VisualEncoder(visual_cfg()).double()
        frames = rand_frames(3, seed=7)
        assert torch.equal(enc(frames), enc(frames))

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(6)
        enc = VisualEncoder(visual_cfg()).double()
        frames = rand_frames(2, seed=8)

        enc.zero_grad()
        enc(frames).sum().backward()
        analytic = enc.patch_embed.weight.grad[0, 0].item()

        h = 1e-6
        with torch.no_grad():
            enc.patch_embed.weight[0, 0] += h
            up = enc(frames).sum().item()
            enc.patch_embed.weight[0, 0] -= 2 * h
            down = enc(frames).sum().item()
            enc.patch_embed.weight[0, 0] += h
        numeric = (up - down) / (2 * h)
        assert analytic == pytest.approx(numeric, rel=1e-5)


class TestTextEncoder:
    def make(self):
        torch.manual_seed(7)
        return TextEncoder(TextEncoderConfig(vocab_size=50, embed_dim=8, n_heads=2, max_len=10)).double()

    def test_padding_does_not_change_class_output(self):
        enc = self.make()
        tokens = torch.tensor([[5, 9, 3]])
        padded = torch.tensor([[5, 9, 3, PAD_TOKEN, PAD_TOKEN]])
        assert torch.allclose(enc(tokens), enc(padded), atol=1e-10)

    def test_deterministic(self):
        enc = self.make()
        tokens = torch.tensor([[5, 9, 3, 2]])
        assert torch.equal(enc(tokens), enc(tokens))

    def test_vocabulary_error(self):
        enc = self.make()
        with pytest.raises(VocabularyError):
            enc(torch.tensor([[50]]))

    def test_too_long_sequence(self):
        enc = self.make()
        with pytest.raises(CapacityError):
            enc(torch.ones(1, 11, dtype=torch.int64))

    def test_gradient_matches_finite_differences(self):
        enc = self.make()
        tokens = torch.tensor([[5, 9, 3]])
        enc.zero_grad()
        enc(tokens).sum().backward()
        analytic = enc.token_embed.weight.grad[5, 0].item()
        h = 1e-6
        with torch.no_grad():
            enc.token_embed.weight[5, 0] += h
            up = enc(tokens).sum().item()
            enc.token_embed.weight[5, 0] -= 2 * h
            down = enc(tokens).sum().item()
            enc.token_embed.weight[5, 0] += h
        assert analytic == pytest.approx((up - down) / (2 * h), rel=1e-5)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        torch.manual_seed(8)
        enc = VisualEncoder(visual_cfg())
        path = tmp_path / "enc.cpck"
        save_checkpoint(enc.state_dict(), path, meta={"kind": "visual"})
        state, meta = load_checkpoint(path)
        assert meta == {"kind": "visual"}
        for name, tensor in enc.state_dict().items():
            assert torch.equal(state[name], tensor)
