"""Promptable training with random channel subsets.

Each iteration draws a random subset of bands per scene (keeping the
wavelength/data pairing), a handful of ground-truth masks and one or two
foreground points per mask, and minimises ``20 * focal + dice`` on the best of
the candidate masks. The quality head is regressed onto the IoU of each
candidate with its target.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import FOREGROUND, PADDING, PromptableSegmenter, PointPrompt
from .errors import ShapeError, TrainingError, ValidationError
from .spectral_io import HyperCube, SceneTruth

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 8e-5
    batch_size: int = 16
    masks_per_image: int = 16
    points_per_mask: Tuple[int, int] = (1, 2)
    focal_weight: float = 20.0
    dice_weight: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    score_weight: float = 1.0
    weight_decay: float = 0.01
    epochs: int = 1
    channel_subset_range: Optional[Tuple[int, int]] = None
    include_background: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValidationError("learning_rate must be >= 0")
        lo, hi = self.points_per_mask
        if not (1 <= lo <= hi <= 2):
            raise ValidationError(f"points_per_mask must be within [1, 2], got {self.points_per_mask}")
        if self.batch_size < 1 or self.masks_per_image < 1:
            raise ValidationError("batch_size and masks_per_image must be >= 1")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """CPU-sized defaults (batch 4, 8 masks per image)."""
        base = dict(batch_size=4, masks_per_image=8)
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown TrainConfig fields: {sorted(unknown)}")
        kw = dict(obj)
        for name in ("points_per_mask", "channel_subset_range"):
            if kw.get(name) is not None:
                kw[name] = tuple(kw[name])
        return cls(**kw)


@dataclass
class LossBreakdown:
    focal: float
    dice: float
    total: float


def _loss_terms(logits: torch.Tensor, gt: torch.Tensor, alpha: float, gamma: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """Focal and dice per mask over the trailing two (spatial) dims."""
    ce = F.binary_cross_entropy_with_logits(logits, gt, reduction="none")  # -log p_t
    p_t = torch.exp(-ce)
    alpha_t = alpha * gt + (1.0 - alpha) * (1.0 - gt)
    focal = (alpha_t * (1.0 - p_t) ** gamma * ce).mean(dim=(-2, -1))
    prob = torch.sigmoid(logits)
    inter = (prob * gt).sum(dim=(-2, -1))
    dice = 1.0 - (2.0 * inter + 1.0) / (prob.sum(dim=(-2, -1)) + gt.sum(dim=(-2, -1)) + 1.0)
    return focal, dice


def loss_tensor(logits: torch.Tensor, gt: torch.Tensor, config: Optional[TrainConfig] = None):
    cfg = config or TrainConfig()
    focal, dice = _loss_terms(logits, gt, cfg.focal_alpha, cfg.focal_gamma)
    return cfg.focal_weight * focal + cfg.dice_weight * dice, focal, dice


def compute_loss(logits, gt, config: Optional[TrainConfig] = None) -> LossBreakdown:
    """Focal + dice loss of one predicted logit map against a binary mask."""
    cfg = config or TrainConfig()
    logits_t = torch.as_tensor(np.asarray(logits) if not isinstance(logits, torch.Tensor) else logits,
                               dtype=torch.float64)
    gt_np = np.asarray(gt.detach().cpu() if isinstance(gt, torch.Tensor) else gt)
    if logits_t.shape != gt_np.shape:
        raise ShapeError(f"logits {tuple(logits_t.shape)} vs mask {gt_np.shape}")
    if not np.isin(gt_np, (0, 1)).all():
        raise ValidationError("ground-truth mask must be binary")
    focal, dice = _loss_terms(logits_t, torch.as_tensor(gt_np, dtype=torch.float64), cfg.focal_alpha, cfg.focal_gamma)
    focal, dice = float(focal), float(dice)
    return LossBreakdown(focal, dice, cfg.focal_weight * focal + cfg.dice_weight * dice)


def sample_channel_subset(cube: HyperCube, size_range: Optional[Tuple[int, int]],
                          rng: np.random.Generator) -> Tuple[HyperCube, np.ndarray]:
    """Random band subset of uniformly drawn size, in ascending band order."""
    n = cube.bands
    lo, hi = size_range if size_range is not None else (n, n)
    if not (1 <= lo <= hi <= n):
        raise ValidationError(f"channel subset range {size_range} infeasible for {n} bands")
    k = int(rng.integers(lo, hi + 1))
    idx = np.sort(rng.choice(n, size=k, replace=False))
    sub = cube.select_bands(idx)
    return sub, sub.wavelengths


@dataclass
class Sample:
    cube: HyperCube
    masks: List[np.ndarray]
    scene_id: str = ""

    @classmethod
    def from_truth(cls, cube: HyperCube, truth: SceneTruth, scene_id: str = "",
                   include_background: bool = True) -> "Sample":
        masks = [m for m in truth.instance_masks if m.any()]
        bg = truth.background_mask()
        if include_background and bg.any():
            masks.append(bg)
        return cls(cube, masks, scene_id)


def sample_training_prompts(truth: Union[SceneTruth, Sequence[np.ndarray]], config: TrainConfig,
                            rng: np.random.Generator) -> List[Tuple[List[PointPrompt], np.ndarray]]:
    """Draw up to ``masks_per_image`` masks and 1-2 foreground points inside each."""
    masks = truth.instance_masks if isinstance(truth, SceneTruth) else list(truth)
    masks = [np.asarray(m, dtype=bool) for m in masks if np.asarray(m).any()]
    if not masks:
        raise ValidationError("scene has no non-empty masks to sample prompts from")
    count = min(config.masks_per_image, len(masks))
    chosen = rng.choice(len(masks), size=count, replace=False)
    lo, hi = config.points_per_mask
    out = []
    for i in chosen:
        ys, xs = np.nonzero(masks[i])
        npts = int(rng.integers(lo, hi + 1))
        pick = rng.integers(0, ys.size, size=npts)
        out.append(([PointPrompt(int(xs[k]), int(ys[k])) for k in pick], masks[i]))
    return out


@dataclass
class EpochStats:
    epoch: int
    focal: float
    dice: float
    total: float
    score_mse: float
    iterations: int
    samples: int

    def as_dict(self) -> dict:
        return asdict(self)


def _mask_iou(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    inter = (pred & gt).sum(dim=(-2, -1)).double()
    union = (pred | gt).sum(dim=(-2, -1)).double()
    return torch.where(union > 0, inter / union.clamp(min=1), torch.zeros_like(inter))


class Trainer:
    """AdamW trainer; one instance per run, single writer of the parameters."""

    def __init__(self, model: PromptableSegmenter, config: TrainConfig):
        self.model = model
        self.config = config
        self.optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999),
                                           weight_decay=config.weight_decay)
        self.epoch = 0

    def _sample_loss(self, sample: Sample, rng: np.random.Generator):
        cfg = self.config
        cube, wl = sample_channel_subset(sample.cube, cfg.channel_subset_range, rng)
        pairs = sample_training_prompts(sample.masks, cfg, rng)
        h, w = cube.height, cube.width
        pmax = max(len(pts) for pts, _ in pairs)
        points = np.zeros((len(pairs), pmax, 2), dtype=np.int64)
        labels = np.full((len(pairs), pmax), PADDING, dtype=np.int64)
        for i, (pts, _) in enumerate(pairs):
            for k, p in enumerate(pts):
                points[i, k] = (p.x, p.y)
                labels[i, k] = FOREGROUND
        dtype = self.model.dtype
        gt = torch.as_tensor(np.stack([m for _, m in pairs]), dtype=dtype)
        logits, scores = self.model(cube.data, wl, points, labels)
        total, focal, dice = loss_tensor(logits, gt[:, None].expand_as(logits), cfg)  # (B, M)
        best = total.argmin(dim=1)
        rows = torch.arange(len(pairs))
        with torch.no_grad():
            iou = _mask_iou(logits > 0, gt[:, None].bool()).to(dtype)
        score_mse = F.mse_loss(scores, iou)
        return total[rows, best].mean(), focal[rows, best].mean(), dice[rows, best].mean(), score_mse

    def train_epoch(self, corpus: Sequence[Sample]) -> EpochStats:
        cfg = self.config
        if not corpus:
            raise ValidationError("training corpus is empty")
        rng = np.random.default_rng([cfg.seed, self.epoch])
        order = rng.permutation(len(corpus))
        sums = np.zeros(4)
        iters = 0
        self.model.train()
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            self.optimizer.zero_grad(set_to_none=True)
            objective = 0.0
            for si in batch:
                sample = corpus[si]
                total, focal, dice, smse = self._sample_loss(sample, rng)
                if not torch.isfinite(total) or not torch.isfinite(smse):
                    raise TrainingError(f"non-finite loss at epoch {self.epoch} iteration {iters} "
                                        f"scene {sample.scene_id or si}")
                objective = objective + (total + cfg.score_weight * smse) / len(batch)
                sums += [focal.item(), dice.item(), total.item(), smse.item()]
            objective.backward()
            self.optimizer.step()
            iters += 1
        n = len(order)
        stats = EpochStats(self.epoch, sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n, iters, n)
        log.info("epoch %d: total %.4f focal %.5f dice %.4f score_mse %.4f", self.epoch, stats.total,
                 stats.focal, stats.dice, stats.score_mse)
        self.epoch += 1
        self.model.eval()
        return stats


def train(model: PromptableSegmenter, corpus: Sequence[Sample], config: TrainConfig,
          log_path: Optional[Union[str, Path]] = None) -> List[EpochStats]:
    """Run ``config.epochs`` epochs, appending one JSON line per epoch to ``log_path``."""
    trainer = Trainer(model, config)
    history = []
    for _ in range(config.epochs):
        stats = trainer.train_epoch(corpus)
        history.append(stats)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(stats.as_dict()) + "\n")
    return history
