"""
Miniature BLIP2-style explainer.

Pipeline per clip:
    frames -> patch encoder -> Q-Former (cross-attention masked by the patch
    attention map) -> per-frame query tokens -> temporal concatenation T_V
    -> causal decoder with T_V as prefix -> explanation tokens
"""

import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from torch import nn

from exceptions import ShapeMismatchError, VocabularyError
from layers import QFormerBlock, TransformerBlock
from models import LabeledClip, PatchAttentionMap
from storage import load_checkpoint, save_checkpoint
from vocabulary import Vocabulary

CHECKPOINT_KIND = "mini_vlm"
MASK_MODES = ("train", "infer")


@dataclass
class VlmConfig:
    height: int = 64
    width: int = 64
    patch_size: int = 8
    dim: int = 64
    num_heads: int = 4
    encoder_layers: int = 2
    qformer_layers: int = 2
    decoder_layers: int = 2
    num_queries: int = 8
    num_frames: int = 4
    max_length: int = 12
    vocab_size: int = 19
    p_mask: float = 0.75

    @property
    def num_patches(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def sinusoidal_2d(rows: int, cols: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sine/cosine encodings, half the channels per axis, (rows * cols, dim)"""
    if dim % 4:
        raise ShapeMismatchError(f"2-D positional encoding needs dim divisible by 4, got {dim}")
    quarter = dim // 4
    freqs = torch.exp(-math.log(10000.0) * torch.arange(quarter, dtype=torch.float64) / quarter)
    r = torch.arange(rows, dtype=torch.float64)[:, None] * freqs
    c = torch.arange(cols, dtype=torch.float64)[:, None] * freqs
    row_enc = torch.cat([r.sin(), r.cos()], dim=-1)
    col_enc = torch.cat([c.sin(), c.cos()], dim=-1)
    grid = torch.cat([
        row_enc[:, None, :].expand(rows, cols, dim // 2),
        col_enc[None, :, :].expand(rows, cols, dim // 2),
    ], dim=-1)
    return grid.reshape(rows * cols, dim).to(torch.float32)


def concat_temporal(per_frame_tokens: Sequence[torch.Tensor]) -> torch.Tensor:
    """
    Join per-frame query tokens in the given order.

    Args:
        per_frame_tokens: n tensors of shape (..., q, d)

    Returns:
        (..., n * q, d); block k equals per_frame_tokens[k]
    """
    if len(per_frame_tokens) == 0:
        raise ShapeMismatchError("concat_temporal needs at least one frame")
    shape = per_frame_tokens[0].shape
    for k, tokens in enumerate(per_frame_tokens):
        if tokens.shape != shape:
            raise ShapeMismatchError(f"Frame {k} tokens have shape {tuple(tokens.shape)}, expected {tuple(shape)}")
    return torch.cat(list(per_frame_tokens), dim=-2)


def resolve_patch_mask(patch_map: Optional[PatchAttentionMap], mode: str, p_mask: float,
                       num_patches: int, generator: Optional[torch.Generator] = None) -> Optional[torch.Tensor]:
    """
    Patches excluded from attention for one frame.

    Absent or all-zero maps mask nothing. In infer mode every map-value-0
    patch is masked; in train mode each map-value-0 patch is masked with
    probability p_mask. Map-value-1 patches are never masked.

    Returns:
        (num_patches,) bool tensor with True on masked patches, or None
        when nothing is masked
    """
    if mode not in MASK_MODES:
        raise ValueError(f"Unknown masking mode '{mode}'")
    if patch_map is None:
        return None
    flat = torch.from_numpy(np.asarray(patch_map.flat(), dtype=np.int64))
    if flat.numel() != num_patches:
        raise ShapeMismatchError(f"Patch map has {flat.numel()} cells for {num_patches} patches")
    if patch_map.is_all_zeros():
        return None

    candidates = flat == 0
    if mode == "train":
        candidates = candidates & (torch.rand(num_patches, generator=generator) < p_mask)
    return candidates if bool(candidates.any()) else None


class MiniVLM(nn.Module):
    """Patch encoder, Q-Former and prefix-conditioned causal decoder"""

    def __init__(self, config: VlmConfig = None):
        super().__init__()
        self.config = config or VlmConfig()
        c = self.config
        if c.height % c.patch_size or c.width % c.patch_size:
            raise ShapeMismatchError(f"Frame {c.height}x{c.width} not divisible by patch size {c.patch_size}")

        self.patch_embed = nn.Linear(c.patch_dim, c.dim)
        self.register_buffer(
            "patch_pos", sinusoidal_2d(c.height // c.patch_size, c.width // c.patch_size, c.dim), persistent=False
        )
        self.encoder = nn.ModuleList([TransformerBlock(c.dim, c.num_heads) for _ in range(c.encoder_layers)])
        self.encoder_norm = nn.LayerNorm(c.dim)

        self.queries = nn.Parameter(torch.randn(c.num_queries, c.dim) * 0.02)
        self.qformer = nn.ModuleList([QFormerBlock(c.dim, c.num_heads) for _ in range(c.qformer_layers)])
        self.qformer_norm = nn.LayerNorm(c.dim)

        self.frame_pos = nn.Embedding(c.num_frames, c.dim)
        self.token_embed = nn.Embedding(c.vocab_size, c.dim)
        self.text_pos = nn.Embedding(c.max_length, c.dim)
        self.decoder = nn.ModuleList([TransformerBlock(c.dim, c.num_heads) for _ in range(c.decoder_layers)])
        self.decoder_norm = nn.LayerNorm(c.dim)

        nn.init.normal_(self.token_embed.weight, std=0.02)
        nn.init.normal_(self.text_pos.weight, std=0.02)
        nn.init.normal_(self.frame_pos.weight, std=0.02)

    # image side

    def encoder_parameters(self) -> List[nn.Parameter]:
        return (list(self.patch_embed.parameters()) + list(self.encoder.parameters())
                + list(self.encoder_norm.parameters()))

    def freeze_encoder(self):
        for p in self.encoder_parameters():
            p.requires_grad_(False)
        logger.debug("Patch encoder frozen")

    def _pixels(self, frames) -> torch.Tensor:
        pixels = torch.as_tensor(np.asarray(frames) if not isinstance(frames, torch.Tensor) else frames)
        pixels = pixels.to(self.patch_embed.weight.dtype)
        if pixels.ndim == 3:
            pixels = pixels.unsqueeze(0)
        c = self.config
        if pixels.ndim != 4 or tuple(pixels.shape[1:]) != (c.height, c.width, 3):
            raise ShapeMismatchError(
                f"Frame batch has shape {tuple(pixels.shape)}, expected (batch, {c.height}, {c.width}, 3)"
            )
        return pixels

    def embed_patches(self, frames) -> torch.Tensor:
        """Patch projections before positional encoding, (batch, P, d) in row-major patch order"""
        pixels = self._pixels(frames)
        p = self.config.patch_size
        batch, height, width, _ = pixels.shape
        patches = pixels.reshape(batch, height // p, p, width // p, p, 3).permute(0, 1, 3, 2, 4, 5)
        return self.patch_embed(patches.reshape(batch, -1, self.config.patch_dim))

    def encode_frame(self, frames, exclude: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Args:
            frames: (H, W, 3) or (batch, H, W, 3) pixels in [0, 1]
            exclude: optional (batch, P) bool, True keeps a patch out of
                every other patch's attention

        Returns:
            (batch, P, d) patch embeddings
        """
        x = self.embed_patches(frames) + self.patch_pos.to(self.patch_embed.weight.dtype)
        for block in self.encoder:
            x = block(x, key_mask=exclude)
        return self.encoder_norm(x)

    def batch_patch_mask(self, patch_maps: Optional[Sequence[Optional[PatchAttentionMap]]], mode: str,
                         generator: Optional[torch.Generator] = None) -> Optional[torch.Tensor]:
        """Stack per-frame masks into (batch, P); None when no frame masks anything"""
        if patch_maps is None:
            return None
        rows = [resolve_patch_mask(m, mode, self.config.p_mask, self.config.num_patches, generator)
                for m in patch_maps]
        if all(r is None for r in rows):
            return None
        empty = torch.zeros(self.config.num_patches, dtype=torch.bool)
        return torch.stack([empty if r is None else r for r in rows])

    def qformer_extract(self, patches: torch.Tensor,
                        patch_maps: Optional[Sequence[Optional[PatchAttentionMap]]] = None,
                        mode: str = "infer", generator: Optional[torch.Generator] = None,
                        mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Learned queries cross-attend to the patches of each frame.

        Args:
            patches: (batch, P, d) from encode_frame
            patch_maps: one map (or None) per batch row
            mode: "train" or "infer"
            generator: random source for train-mode masking
            mask: precomputed (batch, P) mask, overrides patch_maps

        Returns:
            (batch, q, d) query tokens
        """
        if patches.ndim != 3 or patches.shape[1] != self.config.num_patches:
            raise ShapeMismatchError(f"Expected (batch, {self.config.num_patches}, d) patches, "
                                     f"got {tuple(patches.shape)}")
        if mask is None and patch_maps is not None:
            if len(patch_maps) != patches.shape[0]:
                raise ShapeMismatchError(f"{len(patch_maps)} patch maps for {patches.shape[0]} frames")
            mask = self.batch_patch_mask(patch_maps, mode, generator)

        queries = self.queries.unsqueeze(0).expand(patches.shape[0], -1, -1)
        for block in self.qformer:
            queries = block(queries, patches, patch_mask=mask)
        return self.qformer_norm(queries)

    def frame_tokens(self, pixels, patch_maps: Optional[Sequence[Optional[PatchAttentionMap]]] = None,
                     mode: str = "infer", generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """
        T_V for a batch of clips.

        Args:
            pixels: (batch, n, H, W, 3)
            patch_maps: one keyframe map (or None) per clip, applied to every frame

        Returns:
            (batch, n * q, d)
        """
        pixels = torch.as_tensor(np.asarray(pixels) if not isinstance(pixels, torch.Tensor) else pixels)
        if pixels.ndim != 5:
            raise ShapeMismatchError(f"Clip batch must be (batch, n, H, W, 3), got {tuple(pixels.shape)}")
        batch, n = pixels.shape[:2]
        if n > self.config.num_frames:
            raise ShapeMismatchError(f"Clip has {n} frames, model supports {self.config.num_frames}")

        frame_maps = None
        if patch_maps is not None:
            if len(patch_maps) != batch:
                raise ShapeMismatchError(f"{len(patch_maps)} patch maps for {batch} clips")
            frame_maps = [m for m in patch_maps for _ in range(n)]
        mask = self.batch_patch_mask(frame_maps, mode, generator)

        # masked patches are dropped as keys in the encoder too, or their pixels leak into kept rows
        patches = self.encode_frame(pixels.reshape(batch * n, *pixels.shape[2:]), exclude=mask)
        tokens = self.qformer_extract(patches, mask=mask).reshape(batch, n, self.config.num_queries, -1)
        return concat_temporal([tokens[:, k] for k in range(n)])

    # text side

    def prefix(self, t_v: torch.Tensor) -> torch.Tensor:
        """T_V plus the learned frame-position embedding of each block"""
        q = self.config.num_queries
        if t_v.ndim == 2:
            t_v = t_v.unsqueeze(0)
        if t_v.shape[1] % q:
            raise ShapeMismatchError(f"T_V length {t_v.shape[1]} is not a multiple of {q} queries")
        n = t_v.shape[1] // q
        if n > self.config.num_frames:
            raise ShapeMismatchError(f"T_V holds {n} frames, model supports {self.config.num_frames}")
        frame_ids = torch.arange(n, device=t_v.device).repeat_interleave(q)
        return t_v + self.frame_pos(frame_ids)

    def decoder_logits(self, prefix: torch.Tensor, input_ids: torch.Tensor) -> torch.Tensor:
        """Next-token logits for every text position, (batch, L, vocab)"""
        length = input_ids.shape[1]
        positions = torch.arange(length, device=input_ids.device)
        text = self.token_embed(input_ids) + self.text_pos(positions)
        x = torch.cat([prefix, text], dim=1)
        for block in self.decoder:
            x = block(x, causal=True)
        h = self.decoder_norm(x[:, prefix.shape[1]:])
        return h @ self.token_embed.weight.t()

    def _check_targets(self, gt_tokens: torch.Tensor):
        if gt_tokens.shape[1] > self.config.max_length:
            raise ShapeMismatchError(f"Target length {gt_tokens.shape[1]} exceeds {self.config.max_length}")
        if bool(((gt_tokens < 0) | (gt_tokens >= self.config.vocab_size)).any()):
            raise VocabularyError(f"Target token outside the vocabulary of {self.config.vocab_size}")

    def decode_loss(self, t_v: torch.Tensor, gt_tokens, vocab: Vocabulary = None) -> torch.Tensor:
        """
        Teacher-forced mean cross-entropy over non-PAD target positions.

        Args:
            t_v: (batch, n * q, d) concatenated tokens
            gt_tokens: (batch, L) ids ending with EOS, right-padded with PAD
            vocab: token vocabulary, defaults to the template vocabulary
        """
        vocab = vocab or Vocabulary()
        targets = torch.as_tensor(gt_tokens, dtype=torch.long)
        if targets.ndim == 1:
            targets = targets.unsqueeze(0)
        self._check_targets(targets)
        prefix = self.prefix(t_v)
        bos = torch.full((targets.shape[0], 1), vocab.bos_id, dtype=torch.long)
        inputs = torch.cat([bos, targets[:, :-1]], dim=1)
        logits = self.decoder_logits(prefix, inputs)
        return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=vocab.pad_id)

    @torch.no_grad()
    def generate(self, t_v: torch.Tensor, vocab: Vocabulary = None) -> List[List[int]]:
        """
        Greedy decoding from BOS until EOS or max_length tokens.

        Returns:
            generated ids per clip, EOS included when produced
        """
        vocab = vocab or Vocabulary()
        prefix = self.prefix(t_v)
        batch = prefix.shape[0]
        ids = torch.full((batch, 1), vocab.bos_id, dtype=torch.long)
        finished = torch.zeros(batch, dtype=torch.bool)
        outputs: List[List[int]] = [[] for _ in range(batch)]

        for _ in range(self.config.max_length):
            logits = self.decoder_logits(prefix, ids)[:, -1]
            logits[:, vocab.bos_id] = float("-inf")
            logits[:, vocab.pad_id] = float("-inf")
            # argmax returns the first maximum, so ties go to the lower id
            next_ids = torch.argmax(logits, dim=-1)
            for b in range(batch):
                if not finished[b]:
                    outputs[b].append(int(next_ids[b]))
            finished |= next_ids == vocab.eos_id
            if bool(finished.all()):
                break
            ids = torch.cat([ids, next_ids.unsqueeze(1)], dim=1)
        return outputs

    def explain(self, pixels, patch_maps=None, vocab: Vocabulary = None) -> List[str]:
        vocab = vocab or Vocabulary()
        self.eval()
        with torch.no_grad():
            t_v = self.frame_tokens(pixels, patch_maps, mode="infer")
        return [vocab.decode(ids) for ids in self.generate(t_v, vocab)]


def clip_pixels(clips: Sequence[LabeledClip], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(batch, n, H, W, 3) pixel tensor of several clips"""
    return torch.from_numpy(np.stack([clip.pixel_stack() for clip in clips])).to(dtype)


def encode_targets(texts: Sequence[str], vocab: Vocabulary, max_length: int) -> torch.Tensor:
    """Right-padded (batch, L) target ids, each ending with EOS"""
    encoded = [vocab.encode(text, max_length=max_length) for text in texts]
    longest = max(len(ids) for ids in encoded)
    targets = torch.full((len(encoded), longest), vocab.pad_id, dtype=torch.long)
    for b, ids in enumerate(encoded):
        targets[b, :len(ids)] = torch.tensor(ids, dtype=torch.long)
    return targets


def save_vlm(model: MiniVLM, directory: str, step: int, seed: int, extra: Optional[Dict[str, Any]] = None):
    save_checkpoint(model, directory, CHECKPOINT_KIND, model.config.to_dict(), {"init": seed}, step, extra)


def load_vlm(directory: str) -> MiniVLM:
    manifest, state = load_checkpoint(directory, kind=CHECKPOINT_KIND)
    model = MiniVLM(VlmConfig(**manifest["model_config"]))
    model.load_state_dict(state)
    model.eval()
    logger.info(f"Loaded explainer from {directory} (step {manifest.get('step')})")
    return model
