"""
Training loops for the attention map generator and the explainer,
step learning-rate schedule, early stopping and run history.
"""

import copy
import math
import os
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Any, Dict, List, Optional, Sequence, Tuple

import torch
from loguru import logger

from attention_providers import ATTENTION_SOURCES, AttentionProvider
from attn_generator import (AttentionMapGenerator, GeneratorConfig, batch_losses, collate_generator_batch,
                            generator_step, significance_cases)
from exceptions import ConfigError, DatasetFormatError, NonFiniteLossError
from metrics import evaluate_records, topk_accuracy
from mini_vlm import MiniVLM, VlmConfig, clip_pixels, encode_targets
from models import EvalRecord, LabeledClip
from scene_data import split_clips
from storage import write_json
from vocabulary import Vocabulary


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 500
    step_size: int = 50
    gamma: float = 0.1
    seed: int = 0
    attention_source: str = "none"
    patience: int = 25
    encoder_warm_epochs: int = 20
    snapshot_every: int = 0
    dataset: str = ""
    checkpoint_dir: str = ""
    generator_checkpoint: str = ""

    def validate(self) -> "TrainConfig":
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.step_size < 1 or not 0 < self.gamma <= 1:
            raise ConfigError(f"Bad schedule: step_size={self.step_size}, gamma={self.gamma}")
        if self.patience < 1:
            raise ConfigError(f"patience must be positive, got {self.patience}")
        if self.attention_source not in ATTENTION_SOURCES:
            raise ConfigError(f"Unknown attention source '{self.attention_source}'")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def lr_schedule(base_lr: float, epoch: int, step_size: int = 50, gamma: float = 0.1) -> float:
    """base_lr * gamma ** floor(epoch / step_size), computed exactly in decimal"""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    if step_size < 1:
        raise ValueError(f"step_size must be positive, got {step_size}")
    return float(Fraction(str(base_lr)) * Fraction(str(gamma)) ** (epoch // step_size))


@dataclass
class TrainHistory:
    """Per-epoch losses and metric snapshots of one run"""

    model: str
    seed: int
    attention_source: str = "none"
    epochs: List[Dict[str, Any]] = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early: bool = False
    timings: List[float] = field(default_factory=list)

    def add(self, epoch: int, lr: float, train: Dict[str, float], validation: Dict[str, float],
            seconds: float, snapshot: Optional[Dict[str, float]] = None):
        entry = {"epoch": epoch, "lr": lr, "train": train, "validation": validation}
        if snapshot:
            entry["snapshot"] = snapshot
        self.epochs.append(entry)
        self.timings.append(seconds)

    @property
    def best(self) -> Optional[Dict[str, Any]]:
        if self.best_epoch is None:
            return None
        return next(e for e in self.epochs if e["epoch"] == self.best_epoch)

    def to_dict(self) -> Dict[str, Any]:
        """Reproducible fields only; wall-clock times are kept apart"""
        return {
            "model": self.model,
            "seed": self.seed,
            "attention_source": self.attention_source,
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            "epochs": self.epochs,
        }

    def save(self, directory: str):
        os.makedirs(directory, exist_ok=True)
        write_json(os.path.join(directory, "history.json"), self.to_dict())
        write_json(os.path.join(directory, "timing.json"), {
            "epoch_seconds": self.timings,
            "total_seconds": sum(self.timings),
        })


def _batches(items: Sequence[Any], batch_size: int, generator: Optional[torch.Generator] = None) -> List[List[Any]]:
    """Split items into batches, shuffled when a generator is given"""
    if generator is None:
        order = list(range(len(items)))
    else:
        order = torch.randperm(len(items), generator=generator).tolist()
    return [[items[i] for i in order[start:start + batch_size]] for start in range(0, len(order), batch_size)]


def _split(clips: Sequence[LabeledClip]) -> Tuple[List[LabeledClip], List[LabeledClip]]:
    if not clips:
        raise DatasetFormatError("Dataset holds no clips")
    train, val = split_clips(clips)
    if not train:
        train = list(val)
    if not val:
        logger.warning("Validation split is empty, validating on the training clips")
        val = list(train)
    return train, val


def _set_lr(optimizer: torch.optim.Optimizer, lr: float):
    for group in optimizer.param_groups:
        group["lr"] = lr


def generator_config_for(clips: Sequence[LabeledClip]) -> GeneratorConfig:
    height, width = clips[0].keyframe.pixels.shape[:2]
    crop_size = clips[0].detections[0].crop.shape[0]
    return GeneratorConfig(height=height, width=width, crop_size=crop_size)


def generator_validation(model: AttentionMapGenerator, clips: Sequence[LabeledClip],
                         batch_size: int = 64) -> Dict[str, float]:
    """Clip-weighted validation losses plus top-1/top-3 accuracy"""
    model.eval()
    totals = {"iou": 0.0, "ce": 0.0, "total": 0.0}
    with torch.no_grad():
        for batch_clips in _batches(clips, batch_size):
            batch = collate_generator_batch(batch_clips, model.config)
            for name, value in batch_losses(model, batch).items():
                totals[name] += float(value) * len(batch_clips)
    cases = significance_cases(model, clips)
    result = {name: value / len(clips) for name, value in totals.items()}
    result["top1"] = topk_accuracy(cases, 1)
    result["top3"] = topk_accuracy(cases, 3)
    return result


def train_generator(config: TrainConfig, clips: Sequence[LabeledClip],
                    model_config: Optional[GeneratorConfig] = None) -> Tuple[AttentionMapGenerator, TrainHistory]:
    """
    Train the attention map generator with early stopping on validation top-1.

    Args:
        config: Training parameters
        clips: Full dataset, split by clip-id hash
        model_config: Architecture, derived from the clips when omitted

    Returns:
        (model holding the best-epoch weights, history)
    """
    config.validate()
    train, val = _split(clips)
    torch.manual_seed(config.seed)
    model = AttentionMapGenerator(model_config or generator_config_for(clips))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
    shuffle = torch.Generator().manual_seed(config.seed)
    history = TrainHistory(model="attention_map_generator", seed=config.seed)

    best_state = copy.deepcopy(model.state_dict())
    best_key = None
    stale = 0
    logger.info(f"Training attention map generator on {len(train)} clips, validating on {len(val)}")

    for epoch in range(config.epochs):
        started = time.perf_counter()
        lr = lr_schedule(config.lr, epoch, config.step_size, config.gamma)
        _set_lr(optimizer, lr)

        sums = {"iou": 0.0, "ce": 0.0, "total": 0.0}
        for batch_clips in _batches(train, config.batch_size, shuffle):
            batch = collate_generator_batch(batch_clips, model.config)
            for name, value in generator_step(model, batch, optimizer).items():
                sums[name] += value * len(batch_clips)
        train_losses = {name: value / len(train) for name, value in sums.items()}
        validation = generator_validation(model, val)
        history.add(epoch, lr, train_losses, validation, time.perf_counter() - started)
        logger.info(f"Epoch {epoch}: loss {train_losses['total']:.4f}, val loss {validation['total']:.4f}, "
                    f"top-1 {validation['top1']:.3f}, top-3 {validation['top3']:.3f}, lr {lr:g}")

        key = (validation["top1"], -validation["total"])
        if best_key is None or key > best_key:
            best_key, history.best_epoch, stale = key, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= config.patience:
                history.stopped_early = True
                logger.info(f"Early stopping at epoch {epoch}, best epoch {history.best_epoch}")
                break

    model.load_state_dict(best_state)
    model.eval()
    return model, history


def vlm_config_for(clips: Sequence[LabeledClip], patch_size: int = 8, vocab: Vocabulary = None) -> VlmConfig:
    height, width = clips[0].keyframe.pixels.shape[:2]
    return VlmConfig(height=height, width=width, patch_size=patch_size, num_frames=clips[0].num_frames,
                     vocab_size=len(vocab or Vocabulary()))


def _vlm_batch_loss(model: MiniVLM, batch_clips: Sequence[LabeledClip], provider: AttentionProvider,
                    vocab: Vocabulary, mode: str, generator: Optional[torch.Generator] = None) -> Tuple[torch.Tensor, int]:
    targets = encode_targets([c.gt_explanation for c in batch_clips], vocab, model.config.max_length)
    t_v = model.frame_tokens(clip_pixels(batch_clips, model.patch_embed.weight.dtype), provider.maps(batch_clips),
                             mode=mode, generator=generator)
    return model.decode_loss(t_v, targets, vocab), int((targets != vocab.pad_id).sum())


def vlm_validation_loss(model: MiniVLM, clips: Sequence[LabeledClip], provider: AttentionProvider,
                        vocab: Vocabulary = None, batch_size: int = 64) -> float:
    """Token-weighted language-modelling CE over clips, infer-mode masking"""
    vocab = vocab or Vocabulary()
    model.eval()
    total, tokens = 0.0, 0
    with torch.no_grad():
        for batch_clips in _batches(clips, batch_size):
            loss, count = _vlm_batch_loss(model, batch_clips, provider, vocab, mode="infer")
            total += float(loss) * count
            tokens += count
    return total / tokens


def generate_records(model: MiniVLM, clips: Sequence[LabeledClip], provider: AttentionProvider,
                     vocab: Vocabulary = None, batch_size: int = 64) -> List[EvalRecord]:
    """Greedy explanations for clips, paired with their references"""
    vocab = vocab or Vocabulary()
    records = []
    for batch_clips in _batches(clips, batch_size):
        texts = model.explain(clip_pixels(batch_clips, model.patch_embed.weight.dtype),
                              provider.maps(batch_clips), vocab)
        records.extend(
            EvalRecord(clip_id=c.clip_id, candidate=text, reference=c.gt_explanation,
                       attention_source=provider.source)
            for c, text in zip(batch_clips, texts)
        )
    return records


def train_vlm(config: TrainConfig, clips: Sequence[LabeledClip], provider: AttentionProvider,
              model_config: Optional[VlmConfig] = None) -> Tuple[MiniVLM, TrainHistory]:
    """
    Train the explainer end to end with early stopping on validation loss.

    The patch encoder trains for config.encoder_warm_epochs epochs and is
    frozen afterwards; the Q-Former and decoder train throughout.

    Args:
        config: Training parameters
        clips: Full dataset, split by clip-id hash
        provider: Patch attention maps matching config.attention_source
        model_config: Architecture, derived from the clips when omitted

    Returns:
        (model holding the best-epoch weights, history)
    """
    config.validate()
    if provider.source != config.attention_source:
        raise ConfigError(f"Attention provider '{provider.source}' does not match "
                          f"attention_source '{config.attention_source}'")
    train, val = _split(clips)
    vocab = Vocabulary()
    torch.manual_seed(config.seed)
    model = MiniVLM(model_config or vlm_config_for(clips, vocab=vocab))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
    shuffle = torch.Generator().manual_seed(config.seed)
    masking = torch.Generator().manual_seed(config.seed + 1)
    history = TrainHistory(model="mini_vlm", seed=config.seed, attention_source=config.attention_source)

    best_state = copy.deepcopy(model.state_dict())
    best_loss = math.inf
    stale = 0
    logger.info(f"Training explainer ({config.attention_source}) on {len(train)} clips, validating on {len(val)}")

    for epoch in range(config.epochs):
        started = time.perf_counter()
        if epoch == config.encoder_warm_epochs:
            model.freeze_encoder()
        lr = lr_schedule(config.lr, epoch, config.step_size, config.gamma)
        _set_lr(optimizer, lr)

        model.train()
        total, tokens = 0.0, 0
        for batch_clips in _batches(train, config.batch_size, shuffle):
            optimizer.zero_grad(set_to_none=True)
            loss, count = _vlm_batch_loss(model, batch_clips, provider, vocab, mode="train", generator=masking)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NonFiniteLossError([c.clip_id for c in batch_clips], {"ce": value})
            loss.backward()
            optimizer.step()
            total += value * count
            tokens += count

        val_loss = vlm_validation_loss(model, val, provider, vocab)
        snapshot = None
        if config.snapshot_every and (epoch + 1) % config.snapshot_every == 0:
            report = evaluate_records(generate_records(model, val, provider, vocab), ce_loss=val_loss,
                                      attention_source=provider.source)
            snapshot = {name: value for name, value in report.scores().items() if value is not None}
            snapshot["parse_rate"] = report.parse_rate
        history.add(epoch, lr, {"ce": total / tokens}, {"ce": val_loss}, time.perf_counter() - started, snapshot)
        logger.info(f"Epoch {epoch}: loss {total / tokens:.4f}, val loss {val_loss:.4f}, lr {lr:g}")

        if val_loss < best_loss:
            best_loss, history.best_epoch, stale = val_loss, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= config.patience:
                history.stopped_early = True
                logger.info(f"Early stopping at epoch {epoch}, best epoch {history.best_epoch}")
                break

    model.load_state_dict(best_state)
    model.eval()
    return model, history
