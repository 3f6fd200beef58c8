'''
Tests for the miniature explainer: patch encoder, masked Q-Former, temporal concatenation and decoder.
'''

import math

import numpy as np
import pytest
import torch

from exceptions import ShapeMismatchError, VocabularyError
from layers import MultiHeadAttention
from mini_vlm import (MiniVLM, VlmConfig, concat_temporal, encode_targets, load_vlm, resolve_patch_mask, save_vlm,
                      sinusoidal_2d)
from models import PatchAttentionMap


def random_pixels(shape, seed=0, dtype=torch.float32):
    generator = torch.Generator().manual_seed(seed)
    return torch.rand(*shape, generator=generator, dtype=dtype)


def tiny_map(config, ones):
    '''Map over the tiny 4x4 grid with the listed (row, col) cells set.'''
    grid = np.zeros((config.height // config.patch_size, config.width // config.patch_size), dtype=np.uint8)
    for r, c in ones:
        grid[r, c] = 1
    return PatchAttentionMap(grid=grid, patch_size=config.patch_size, height=config.height, width=config.width)


# -------------------------------------------------------------------------------------------------
# Patch encoder
# -------------------------------------------------------------------------------------------------

class TestPatchEncoder:
    '''Patchify, project and encode single frames.'''

    def test_shapes(self, seeded, tiny_vlm_config):
        model = MiniVLM(tiny_vlm_config)
        out = model.encode_frame(random_pixels((16, 16, 3)))
        assert out.shape == (1, 16, 8)
        assert torch.all(torch.isfinite(out))

    def test_default_patch_count(self):
        assert VlmConfig().num_patches == 64
        assert VlmConfig().patch_dim == 192

    def test_deterministic(self, seeded, tiny_vlm_config):
        model = MiniVLM(tiny_vlm_config)
        frames = random_pixels((2, 16, 16, 3))
        assert torch.equal(model.encode_frame(frames), model.encode_frame(frames))

    def test_patch_permutation_permutes_embeddings(self, seeded, tiny_vlm_config):
        '''Swapping two image patches swaps the matching rows of the projection.'''
        model = MiniVLM(tiny_vlm_config)
        frame = random_pixels((16, 16, 3))
        swapped = frame.clone()
        a, b = (slice(0, 4), slice(4, 8)), (slice(8, 12), slice(12, 16))
        swapped[a[0], a[1]], swapped[b[0], b[1]] = frame[b[0], b[1]], frame[a[0], a[1]]
        original = model.embed_patches(frame)[0]
        permuted = model.embed_patches(swapped)[0]
        order = list(range(16))
        order[1], order[11] = 11, 1
        torch.testing.assert_close(permuted, original[order])

    def test_excluded_patches_do_not_reach_kept_rows(self, seeded, tiny_vlm_config):
        '''Encoder self-attention drops excluded patches as keys.'''
        model = MiniVLM(tiny_vlm_config)
        frame = random_pixels((16, 16, 3))
        changed = random_pixels((16, 16, 3), seed=5)
        changed[:, :8] = frame[:, :8]
        exclude = torch.zeros(1, 16, dtype=torch.bool)
        for r in range(4):
            exclude[0, 4 * r + 2:4 * r + 4] = True
        kept = ~exclude[0]
        a = model.encode_frame(frame, exclude=exclude)[0, kept]
        b = model.encode_frame(changed, exclude=exclude)[0, kept]
        torch.testing.assert_close(a, b, rtol=0.0, atol=1e-6)
        assert not torch.allclose(model.encode_frame(frame)[0, kept], model.encode_frame(changed)[0, kept])

    def test_wrong_frame_size(self, seeded, tiny_vlm_config):
        with pytest.raises(ShapeMismatchError):
            MiniVLM(tiny_vlm_config).encode_frame(random_pixels((12, 16, 3)))

    def test_positional_encoding(self):
        enc = sinusoidal_2d(4, 4, 8)
        assert enc.shape == (16, 8)
        assert len({tuple(row.tolist()) for row in enc}) == 16
        with pytest.raises(ShapeMismatchError):
            sinusoidal_2d(4, 4, 6)


# -------------------------------------------------------------------------------------------------
# Masked Q-Former
# -------------------------------------------------------------------------------------------------

class TestPatchMask:
    '''resolve_patch_mask.'''

    def test_absent_and_all_zero_maps(self, tiny_vlm_config):
        assert resolve_patch_mask(None, "infer", 0.75, 16) is None
        zeros = PatchAttentionMap.full(16, 16, 4, value=0)
        assert resolve_patch_mask(zeros, "infer", 0.75, 16) is None
        assert resolve_patch_mask(zeros, "train", 0.75, 16) is None

    def test_all_ones_masks_nothing(self):
        assert resolve_patch_mask(PatchAttentionMap.full(16, 16, 4), "infer", 0.75, 16) is None

    def test_infer_masks_every_zero_patch(self, tiny_vlm_config):
        patch_map = tiny_map(tiny_vlm_config, [(0, 0), (2, 3)])
        mask = resolve_patch_mask(patch_map, "infer", 0.75, 16)
        np.testing.assert_array_equal(mask.numpy(), patch_map.flat() == 0)

    def test_train_never_masks_ones(self, tiny_vlm_config):
        patch_map = tiny_map(tiny_vlm_config, [(1, 1), (1, 2)])
        generator = torch.Generator().manual_seed(0)
        masked = np.zeros(16)
        for _ in range(400):
            mask = resolve_patch_mask(patch_map, "train", 0.75, 16, generator)
            if mask is not None:
                assert not mask[5] and not mask[6]
                masked += mask.numpy()
        rate = masked[patch_map.flat() == 0] / 400
        assert np.all(np.abs(rate - 0.75) < 0.12)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            resolve_patch_mask(None, "sometimes", 0.75, 16)

    def test_wrong_grid_size(self):
        with pytest.raises(ShapeMismatchError):
            resolve_patch_mask(PatchAttentionMap.full(8, 8, 4), "infer", 0.75, 16)


class TestQFormer:
    '''Query extraction under patch masks.'''

    def test_token_shapes(self, seeded, tiny_vlm_config):
        model = MiniVLM(tiny_vlm_config)
        t_v = model.frame_tokens(random_pixels((2, 3, 16, 16, 3)))
        assert t_v.shape == (2, 3 * 2, 8)

    def test_all_ones_map_matches_no_map(self, seeded, tiny_vlm_config):
        model = MiniVLM(tiny_vlm_config)
        pixels = random_pixels((2, 3, 16, 16, 3))
        full = [PatchAttentionMap.full(16, 16, 4)] * 2
        assert torch.equal(model.frame_tokens(pixels, full, mode="infer"), model.frame_tokens(pixels))
        assert torch.equal(model.frame_tokens(pixels, full, mode="train"), model.frame_tokens(pixels))

    def test_zero_mask_probability_matches_no_map(self, seeded, tiny_vlm_config):
        tiny_vlm_config.p_mask = 0.0
        model = MiniVLM(tiny_vlm_config)
        pixels = random_pixels((1, 3, 16, 16, 3))
        maps = [tiny_map(tiny_vlm_config, [(0, 0)])]
        generator = torch.Generator().manual_seed(1)
        assert torch.equal(model.frame_tokens(pixels, maps, mode="train", generator=generator),
                           model.frame_tokens(pixels))

    def test_infer_ignores_masked_pixels(self, seeded, tiny_vlm_config):
        '''Pixels under map-value-0 patches cannot influence T_V.'''
        model = MiniVLM(tiny_vlm_config)
        rng = np.random.default_rng(0)
        for trial in range(100):
            ones = {(int(r), int(c)) for r, c in rng.integers(0, 4, size=(int(rng.integers(1, 6)), 2))}
            patch_map = tiny_map(tiny_vlm_config, ones)
            pixels = random_pixels((1, 3, 16, 16, 3), seed=trial)
            changed = random_pixels((1, 3, 16, 16, 3), seed=1000 + trial)
            for r, c in ones:
                changed[:, :, 4 * r:4 * r + 4, 4 * c:4 * c + 4] = pixels[:, :, 4 * r:4 * r + 4, 4 * c:4 * c + 4]
            a = model.frame_tokens(pixels, [patch_map], mode="infer")
            b = model.frame_tokens(changed, [patch_map], mode="infer")
            torch.testing.assert_close(a, b, rtol=0.0, atol=1e-6)

    def test_mask_changes_tokens(self, seeded, tiny_vlm_config):
        model = MiniVLM(tiny_vlm_config)
        pixels = random_pixels((1, 3, 16, 16, 3))
        masked = model.frame_tokens(pixels, [tiny_map(tiny_vlm_config, [(0, 0)])], mode="infer")
        assert not torch.allclose(masked, model.frame_tokens(pixels))

    def test_attention_rows_sum_to_one(self, seeded):
        attention = MultiHeadAttention(8, 2)
        x = torch.randn(2, 5, 8)
        key_mask = torch.tensor([[False, True, False, False, True], [False] * 5])
        attention(x, key_mask=key_mask)
        weights = attention.last_weights
        torch.testing.assert_close(weights.sum(-1), torch.ones(2, 2, 5))
        assert torch.all(weights[0, :, :, 1] == 0) and torch.all(weights[0, :, :, 4] == 0)

    def test_too_many_frames(self, seeded, tiny_vlm_config):
        with pytest.raises(ShapeMismatchError):
            MiniVLM(tiny_vlm_config).frame_tokens(random_pixels((1, 4, 16, 16, 3)))


# -------------------------------------------------------------------------------------------------
# Temporal concatenation
# -------------------------------------------------------------------------------------------------

class TestConcatTemporal:
    '''Frame-ordered token concatenation.'''

    def test_blocks_keep_frame_order(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n, q, d = int(rng.integers(1, 9)), int(rng.integers(1, 5)), int(rng.integers(1, 6))
            frames = [torch.as_tensor(rng.random((q, d))) for _ in range(n)]
            joined = concat_temporal(frames)
            assert joined.shape == (n * q, d)
            for k in range(n):
                assert torch.equal(joined[k * q:(k + 1) * q], frames[k])
            reversed_join = concat_temporal(frames[::-1])
            for k in range(n):
                assert torch.equal(reversed_join[k * q:(k + 1) * q], joined[(n - 1 - k) * q:(n - k) * q])

    def test_batched(self):
        frames = [torch.full((2, 3, 4), float(k)) for k in range(3)]
        joined = concat_temporal(frames)
        assert joined.shape == (2, 9, 4)
        assert torch.all(joined[:, 6:] == 2.0)

    def test_errors(self):
        with pytest.raises(ShapeMismatchError):
            concat_temporal([])
        with pytest.raises(ShapeMismatchError):
            concat_temporal([torch.zeros(2, 4), torch.zeros(3, 4)])


# -------------------------------------------------------------------------------------------------
# Decoder
# -------------------------------------------------------------------------------------------------

class TestDecoder:
    '''Teacher-forced loss and greedy generation.'''

    def test_fresh_loss_near_uniform(self, seeded, small_vlm_config, vocab, corpus):
        model = MiniVLM(small_vlm_config)
        clips = corpus[:4]
        pixels = torch.from_numpy(np.stack([c.pixel_stack() for c in clips]))
        targets = encode_targets([c.gt_explanation for c in clips], vocab, 12)
        loss = float(model.decode_loss(model.frame_tokens(pixels), targets, vocab))
        assert abs(loss - math.log(len(vocab))) <= 0.05 * math.log(len(vocab))

    def test_padding_is_ignored(self, seeded, tiny_vlm_config, vocab):
        model = MiniVLM(tiny_vlm_config)
        t_v = model.frame_tokens(random_pixels((1, 3, 16, 16, 3)))
        ids = vocab.encode("car stopped ahead")
        padded = ids + [vocab.pad_id] * 4
        torch.testing.assert_close(model.decode_loss(t_v, [ids], vocab), model.decode_loss(t_v, [padded], vocab))

    def test_target_errors(self, seeded, tiny_vlm_config, vocab):
        model = MiniVLM(tiny_vlm_config)
        t_v = model.frame_tokens(random_pixels((1, 3, 16, 16, 3)))
        with pytest.raises(VocabularyError):
            model.decode_loss(t_v, [[3, 99, 2]], vocab)
        with pytest.raises(ShapeMismatchError):
            model.decode_loss(t_v, [[3] * 13], vocab)

    def test_greedy_is_deterministic_and_bounded(self, seeded, tiny_vlm_config, vocab):
        model = MiniVLM(tiny_vlm_config)
        model.eval()
        t_v = model.frame_tokens(random_pixels((3, 3, 16, 16, 3)))
        first, second = model.generate(t_v, vocab), model.generate(t_v, vocab)
        assert first == second
        for ids in first:
            assert 1 <= len(ids) <= 12
            assert vocab.bos_id not in ids and vocab.pad_id not in ids
            assert vocab.eos_id not in ids[:-1]

    def test_explain_returns_text(self, seeded, tiny_vlm_config, vocab):
        texts = MiniVLM(tiny_vlm_config).explain(random_pixels((2, 3, 16, 16, 3)), vocab=vocab)
        assert len(texts) == 2
        assert all(isinstance(t, str) for t in texts)

    def test_gradients_match_finite_differences(self, seeded, tiny_vlm_config, vocab):
        model = MiniVLM(tiny_vlm_config).double()
        pixels = random_pixels((1, 3, 16, 16, 3), dtype=torch.float64)
        maps = [tiny_map(tiny_vlm_config, [(0, 0), (1, 1), (2, 2)])]
        targets = [vocab.encode("cyclist crossing on the right")]

        def loss():
            return model.decode_loss(model.frame_tokens(pixels, maps, mode="infer"), targets, vocab)

        model.zero_grad()
        loss().backward()
        eps = 1e-6
        rng = np.random.default_rng(1)
        for name, param in model.named_parameters():
            flat = param.data.view(-1)
            grad = param.grad.view(-1)
            for idx in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
                original = flat[idx].item()
                with torch.no_grad():
                    flat[idx] = original + eps
                    up = float(loss())
                    flat[idx] = original - eps
                    down = float(loss())
                    flat[idx] = original
                numeric = (up - down) / (2 * eps)
                analytic = grad[idx].item()
                assert abs(numeric - analytic) <= 1e-3 * max(abs(numeric), abs(analytic)) + 1e-7, name

    def test_checkpoint_round_trip(self, seeded, tmp_path, tiny_vlm_config, vocab):
        model = MiniVLM(tiny_vlm_config)
        save_vlm(model, str(tmp_path), step=1, seed=0)
        restored = load_vlm(str(tmp_path))
        pixels = random_pixels((1, 3, 16, 16, 3))
        targets = [vocab.encode("truck approaching ahead")]
        with torch.no_grad():
            a = model.decode_loss(model.frame_tokens(pixels), targets, vocab)
            b = restored.decode_loss(restored.frame_tokens(pixels), targets, vocab)
        assert torch.equal(a, b)

    @pytest.mark.slow
    def test_single_clip_overfit(self, seeded, small_vlm_config, vocab, corpus):
        clip = corpus[0]
        model = MiniVLM(small_vlm_config)
        pixels = torch.from_numpy(clip.pixel_stack()[None])
        targets = encode_targets([clip.gt_explanation], vocab, 12)
        optimizer = torch.optim.Adam(model.parameters(), lr=3e-3)
        for _ in range(300):
            optimizer.zero_grad()
            model.decode_loss(model.frame_tokens(pixels), targets, vocab).backward()
            optimizer.step()
        assert model.explain(pixels, vocab=vocab) == [clip.gt_explanation]
