"""
Attention Map Generator.

Scores how significant each keyframe detection is for the ego vehicle's
reaction and predicts that reaction. Each detection becomes a feature
vector [index, box, crop pixels]; a small transformer encoder mixes the
detections, a per-object head gives the significance distribution A_sig
and a pooled head gives the action logits. Training minimises the
IoU-weighted significance loss plus action cross-entropy.
"""

from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from torch import nn

from exceptions import NonFiniteLossError, ShapeMismatchError
from geometry import iou_matrix
from layers import TransformerBlock
from models import ACTION_CLASSES, Box, DetectedObject, LabeledClip
from storage import load_checkpoint, save_checkpoint

CHECKPOINT_KIND = "attention_map_generator"


@dataclass
class GeneratorConfig:
    height: int = 64
    width: int = 64
    crop_size: int = 8
    max_objects: int = 10
    dim: int = 64
    num_heads: int = 4
    num_layers: int = 2
    num_actions: int = len(ACTION_CLASSES)

    @property
    def feature_dim(self) -> int:
        return 1 + 4 + self.crop_size * self.crop_size * 3

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class SignificanceOutput:
    """Per-detection significance distribution and predicted ego action"""

    a_sig: np.ndarray
    action_logits: np.ndarray

    @property
    def action_pred(self) -> int:
        return int(np.argmax(self.action_logits))


def build_object_features(objects: Sequence[DetectedObject], height: int, width: int,
                          n_max: int, crop_size: int = 8) -> np.ndarray:
    """
    Build F_i = [I_i, B_i, P_i] for every detection.

    Args:
        objects: Keyframe detections, in detection order
        height: Frame height, normalises y coordinates
        width: Frame width, normalises x coordinates
        n_max: Index normaliser
        crop_size: Expected crop side

    Returns:
        (len(objects), 5 + crop_size * crop_size * 3) float32 array
    """
    features = []
    for obj in objects:
        crop = np.asarray(obj.crop)
        if crop.shape != (crop_size, crop_size, 3):
            raise ShapeMismatchError(
                f"Detection {obj.index} crop has shape {crop.shape}, expected {(crop_size, crop_size, 3)}"
            )
        b = obj.box
        head = [obj.index / n_max, b.x_min / width, b.y_min / height, b.x_max / width, b.y_max / height]
        features.append(np.concatenate([np.asarray(head, dtype=np.float32), crop.reshape(-1).astype(np.float32)]))
    return np.stack(features) if features else np.zeros((0, 5 + crop_size * crop_size * 3), dtype=np.float32)


class AttentionMapGenerator(nn.Module):
    """Transformer over per-object feature vectors"""

    def __init__(self, config: GeneratorConfig = None):
        super().__init__()
        self.config = config or GeneratorConfig()
        c = self.config
        self.embed = nn.Linear(c.feature_dim, c.dim)
        self.blocks = nn.ModuleList([TransformerBlock(c.dim, c.num_heads) for _ in range(c.num_layers)])
        self.norm = nn.LayerNorm(c.dim)
        self.significance_head = nn.Linear(c.dim, 1)
        self.action_head = nn.Linear(c.dim, c.num_actions)

    def forward(self, features: torch.Tensor, valid: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
            features: (batch, N, feature_dim), padded rows arbitrary
            valid: (batch, N) bool, False marks padding

        Returns:
            log A_sig (batch, N) with -inf on padding, action logits (batch, num_actions)
        """
        padding = ~valid
        key_mask = padding if bool(padding.any()) else None
        h = self.embed(features)
        for block in self.blocks:
            h = block(h, key_mask=key_mask)
        h = self.norm(h)

        scores = self.significance_head(h).squeeze(-1)
        if key_mask is not None:
            scores = scores.masked_fill(padding, float("-inf"))
        log_a_sig = F.log_softmax(scores, dim=-1)

        weights = valid.to(h.dtype).unsqueeze(-1)
        pooled = (h * weights).sum(dim=1) / weights.sum(dim=1)
        return log_a_sig, self.action_head(pooled)

    @torch.no_grad()
    def score_objects(self, features) -> SignificanceOutput:
        """Significance distribution and action logits for one keyframe"""
        features = torch.as_tensor(np.asarray(features), dtype=self.embed.weight.dtype)
        if features.ndim != 2 or features.shape[0] == 0:
            raise ShapeMismatchError("score_objects needs at least one feature vector")
        if features.shape[1] != self.config.feature_dim:
            raise ShapeMismatchError(f"Feature length {features.shape[1]}, expected {self.config.feature_dim}")
        valid = torch.ones(1, features.shape[0], dtype=torch.bool)
        log_a_sig, logits = self(features.unsqueeze(0), valid)
        return SignificanceOutput(
            a_sig=log_a_sig.exp()[0].cpu().numpy(),
            action_logits=logits[0].cpu().numpy(),
        )

    def score_clip(self, clip: LabeledClip) -> SignificanceOutput:
        c = self.config
        features = build_object_features(clip.detections, c.height, c.width, c.max_objects, c.crop_size)
        return self.score_objects(features)


def significance_loss(detections: Sequence[Box], gt_box: Box, a_sig) -> torch.Tensor:
    """
    L_IoU = -sum_i IoU(B_i, B_GT) * log A_sig,i

    Args:
        detections: Detection boxes
        gt_box: Annotated significant-object box
        a_sig: Strictly positive weights, one per detection

    Returns:
        Scalar tensor, differentiable in a_sig when it is a tensor
    """
    a = a_sig if isinstance(a_sig, torch.Tensor) else torch.as_tensor(np.asarray(a_sig, dtype=np.float64))
    if a.ndim != 1 or a.shape[0] != len(detections):
        raise ShapeMismatchError(f"A_sig has shape {tuple(a.shape)} for {len(detections)} detections")
    if bool((a <= 0).any()):
        raise ValueError("A_sig entries must be strictly positive")
    ious = torch.as_tensor(iou_matrix(detections, gt_box), dtype=a.dtype, device=a.device)
    return -(ious * torch.log(a)).sum()


def significance_loss_from_log(ious: torch.Tensor, log_a_sig: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Batched L_IoU from log weights; padding contributes nothing"""
    safe_log = log_a_sig.masked_fill(~valid, 0.0)
    return -(ious * safe_log).sum(dim=-1)


def action_loss(action_logits, gt_action) -> torch.Tensor:
    """Negative log-softmax of the true action class"""
    logits = torch.as_tensor(action_logits)
    if not torch.is_floating_point(logits):
        logits = logits.to(torch.float64)
    target = torch.as_tensor(gt_action, dtype=torch.long, device=logits.device)
    num_classes = logits.shape[-1]
    if bool(((target < 0) | (target >= num_classes)).any()):
        raise ValueError(f"Action class {gt_action} outside [0, {num_classes})")
    if logits.ndim == 1:
        return F.cross_entropy(logits.unsqueeze(0), target.reshape(1))
    return F.cross_entropy(logits, target)


def total_loss(sig_loss, act_loss):
    """L = L_IoU + L_CE, unweighted"""
    return sig_loss + act_loss


def select_significant(a_sig, tau: float = 0.5, k: int = 3) -> List[int]:
    """
    Relative-threshold top-K selection of significant detections.

    Keeps indices with A_sig[i] >= tau * max A_sig, at most k of them,
    highest first and lower index first on ties. Never empty.
    """
    scores = np.asarray(a_sig, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ShapeMismatchError("select_significant needs a non-empty score vector")
    ranked = sorted(range(scores.size), key=lambda i: (-scores[i], i))
    threshold = tau * scores[ranked[0]]
    return [i for i in ranked if scores[i] >= threshold][:k]


@dataclass
class GeneratorBatch:
    clip_ids: List[str]
    features: torch.Tensor
    valid: torch.Tensor
    ious: torch.Tensor
    actions: torch.Tensor
    gt_index: torch.Tensor


def collate_generator_batch(clips: Sequence[LabeledClip], config: GeneratorConfig,
                            dtype: torch.dtype = torch.float32) -> GeneratorBatch:
    """Pad keyframe detections of several clips into one batch"""
    longest = max(len(clip.detections) for clip in clips)
    features = torch.zeros(len(clips), longest, config.feature_dim, dtype=dtype)
    valid = torch.zeros(len(clips), longest, dtype=torch.bool)
    ious = torch.zeros(len(clips), longest, dtype=dtype)

    for b, clip in enumerate(clips):
        n = len(clip.detections)
        f = build_object_features(clip.detections, config.height, config.width, config.max_objects,
                                  config.crop_size)
        features[b, :n] = torch.from_numpy(f).to(dtype)
        valid[b, :n] = True
        ious[b, :n] = torch.from_numpy(iou_matrix([d.box for d in clip.detections], clip.gt_box)).to(dtype)

    return GeneratorBatch(
        clip_ids=[clip.clip_id for clip in clips],
        features=features,
        valid=valid,
        ious=ious,
        actions=torch.tensor([clip.gt_action for clip in clips], dtype=torch.long),
        gt_index=torch.tensor([clip.gt_detection_index for clip in clips], dtype=torch.long),
    )


def batch_losses(model: AttentionMapGenerator, batch: GeneratorBatch) -> Dict[str, torch.Tensor]:
    log_a_sig, logits = model(batch.features, batch.valid)
    sig = significance_loss_from_log(batch.ious, log_a_sig, batch.valid).mean()
    act = F.cross_entropy(logits, batch.actions)
    return {"iou": sig, "ce": act, "total": total_loss(sig, act)}


def generator_step(model: AttentionMapGenerator, batch: GeneratorBatch,
                   optimizer: torch.optim.Optimizer) -> Dict[str, float]:
    """
    One Adam update of every generator parameter on a batch.

    Returns:
        Batch-mean L_IoU, L_CE and L
    """
    model.train()
    optimizer.zero_grad(set_to_none=True)
    losses = batch_losses(model, batch)
    values = {name: float(v.detach()) for name, v in losses.items()}
    if not all(np.isfinite(v) for v in values.values()):
        raise NonFiniteLossError(batch.clip_ids, values)
    losses["total"].backward()
    optimizer.step()
    return values


def significance_cases(model: AttentionMapGenerator, clips: Sequence[LabeledClip]) -> List[Tuple[np.ndarray, int]]:
    """(A_sig, gt_detection_index) for every clip"""
    model.eval()
    return [(model.score_clip(clip).a_sig, clip.gt_detection_index) for clip in clips]


def save_generator(model: AttentionMapGenerator, directory: str, step: int, seed: int,
                   extra: Optional[Dict[str, Any]] = None):
    save_checkpoint(model, directory, CHECKPOINT_KIND, model.config.to_dict(), {"init": seed}, step, extra)


def load_generator(directory: str) -> AttentionMapGenerator:
    manifest, state = load_checkpoint(directory, kind=CHECKPOINT_KIND)
    model = AttentionMapGenerator(GeneratorConfig(**manifest["model_config"]))
    model.load_state_dict(state)
    model.eval()
    logger.info(f"Loaded attention map generator from {directory} (step {manifest.get('step')})")
    return model
