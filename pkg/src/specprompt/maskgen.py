"""Mask banks, mask IoU, greedy NMS and whole-image automatic mask generation."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from . import rle
from .backbone import FOREGROUND, PromptableSegmenter
from .errors import FormatError, ShapeError, ValidationError
from .spectral_io import HyperCube

log = logging.getLogger(__name__)


@dataclass
class MaskBank:
    """k binary masks with quality scores; ``areas`` is derived from the masks."""

    masks: np.ndarray  # (k, h, w) bool
    scores: np.ndarray  # (k,)
    areas: np.ndarray = field(default=None)

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim != 3:
            raise ShapeError(f"masks must be (k, h, w), got {self.masks.shape}")
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if self.scores.size != self.masks.shape[0]:
            raise ShapeError(f"{self.scores.size} scores for {self.masks.shape[0]} masks")
        if not np.all(np.isfinite(self.scores)):
            raise ValidationError("mask scores must be finite")
        k, h, w = self.masks.shape
        self.areas = self.masks.reshape(k, h * w).sum(axis=1).astype(np.int64)

    @classmethod
    def empty(cls, height: int, width: int) -> "MaskBank":
        return cls(np.zeros((0, height, width), dtype=bool), np.zeros(0))

    @property
    def k(self) -> int:
        return self.masks.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.masks.shape[1], self.masks.shape[2]

    def __len__(self) -> int:
        return self.k

    def subset(self, indices: Sequence[int]) -> "MaskBank":
        idx = np.asarray(list(indices), dtype=np.int64)
        return MaskBank(self.masks[idx], self.scores[idx])

    @staticmethod
    def concat(banks: Sequence["MaskBank"]) -> "MaskBank":
        if not banks:
            raise ValidationError("nothing to concatenate")
        return MaskBank(np.concatenate([b.masks for b in banks]), np.concatenate([b.scores for b in banks]))

    def to_json(self) -> dict:
        h, w = self.shape
        return {
            "height": int(h),
            "width": int(w),
            "masks": [
                {"score": float(s), "area": int(a), "rle": rle.encode(m)}
                for m, s, a in zip(self.masks, self.scores, self.areas)
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MaskBank":
        try:
            h, w = int(obj["height"]), int(obj["width"])
            masks = [rle.decode(item["rle"], h, w) for item in obj["masks"]]
            scores = [float(item["score"]) for item in obj["masks"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed mask bank: {exc}") from exc
        bank = cls(np.stack(masks) if masks else np.zeros((0, h, w), dtype=bool), np.asarray(scores))
        for item, area in zip(obj["masks"], bank.areas):
            if "area" in item and int(item["area"]) != int(area):
                raise FormatError(f"stored area {item['area']} does not match decoded mask area {area}")
        return bank


def save_bank(bank: MaskBank, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(bank.to_json()))


def load_bank(path: Union[str, Path]) -> MaskBank:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    return MaskBank.from_json(obj)


@dataclass
class NMSConfig:
    iou_threshold: float = 0.7
    score_floor: float = 0.5
    grid_spacing: int = 8
    logit_threshold: float = 0.0
    batch: int = 64

    def __post_init__(self):
        if not (0.0 < self.iou_threshold <= 1.0):
            raise ValidationError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")
        if self.grid_spacing < 1:
            raise ValidationError("grid_spacing must be >= 1")

    @classmethod
    def from_json(cls, obj: dict) -> "NMSConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown NMS fields: {sorted(unknown)}")
        return cls(**obj)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def pairwise_iou(masks: np.ndarray) -> np.ndarray:
    flat = masks.reshape(masks.shape[0], -1).astype(np.float64)
    inter = flat @ flat.T
    areas = flat.sum(axis=1)
    union = areas[:, None] + areas[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def nms_order(bank: MaskBank) -> List[int]:
    """Score descending, then larger area, then lower index."""
    return sorted(range(bank.k), key=lambda i: (-bank.scores[i], -bank.areas[i], i))


def greedy_nms(bank: MaskBank, config: Optional[NMSConfig] = None) -> MaskBank:
    cfg = config or NMSConfig()
    if bank.k == 0:
        return bank
    iou = pairwise_iou(bank.masks)
    kept: List[int] = []
    for i in nms_order(bank):
        if bank.scores[i] < cfg.score_floor:
            continue
        if all(iou[i, j] < cfg.iou_threshold for j in kept):
            kept.append(i)
    return bank.subset(kept)


def grid_points(height: int, width: int, spacing: int) -> List[Tuple[int, int]]:
    """Regular (x, y) prompt grid; always at least one point per axis."""
    def axis(n: int) -> List[int]:
        start = min(spacing // 2, (n - 1) // 2)
        return list(range(start, n, spacing))
    return [(x, y) for y in axis(height) for x in axis(width)]


@dataclass
class GenerationStats:
    prompts: int = 0
    candidates: int = 0
    kept: int = 0
    empty_bank_warnings: int = 0


@torch.no_grad()
def auto_generate_masks(model: PromptableSegmenter, cube: HyperCube, config: Optional[NMSConfig] = None,
                        features: Optional[torch.Tensor] = None,
                        stats: Optional[GenerationStats] = None) -> MaskBank:
    """Everything-mode: prompt a point grid, filter by score, binarise, NMS."""
    cfg = config or NMSConfig()
    stats = stats if stats is not None else GenerationStats()
    h, w = cube.height, cube.width
    feats = model.features(cube) if features is None else features
    pts = grid_points(h, w, cfg.grid_spacing)
    stats.prompts += len(pts)
    masks, scores = [], []
    for start in range(0, len(pts), cfg.batch):
        chunk = np.asarray(pts[start : start + cfg.batch], dtype=np.int64)[:, None, :]
        labels = np.full(chunk.shape[:2], FOREGROUND, dtype=np.int64)
        emb = model.encode_prompts(chunk, labels, (h, w))
        logits, sc = model.decode_masks(feats, emb, (h, w))
        binary = (logits > cfg.logit_threshold).numpy()
        sc = sc.double().numpy()
        for b in range(binary.shape[0]):
            for m in range(binary.shape[1]):
                if sc[b, m] >= cfg.score_floor and binary[b, m].any():
                    masks.append(binary[b, m])
                    scores.append(sc[b, m])
    stats.candidates += len(masks)
    if not masks:
        stats.empty_bank_warnings += 1
        log.warning("automatic mask generation produced no candidate masks")
        return MaskBank.empty(h, w)
    bank = greedy_nms(MaskBank(np.stack(masks), np.asarray(scores)), cfg)
    stats.kept += bank.k
    return bank
