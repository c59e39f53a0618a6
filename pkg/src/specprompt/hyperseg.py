"""Mask-generation engine for spectral cubes.

Nine key bands are split into three false-colour composites, each composite is
segmented independently by a pluggable segmenter, and the union of the three
mask banks is reduced with greedy NMS.
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from .corpus import write_shard
from .errors import EngineError, ValidationError
from .maskgen import MaskBank, NMSConfig, auto_generate_masks, greedy_nms, load_bank
from .spectral_io import HyperCube

# Landsat-8 reflective bands plus the 2500 nm end of the range
DEFAULT_KEY_WAVELENGTHS = [443.0, 482.5, 562.5, 655.0, 865.0, 1375.0, 1610.0, 2200.0, 2500.0]
DEFAULT_TOLERANCE_NM = 25.0


@dataclass
class GroupSplit:
    composites: List[np.ndarray]  # three (h, w, 3) images in [0, 1]
    channel_assignment: List[Tuple[float, float, float]]
    band_indices: List[Tuple[int, int, int]]


def stretch(channel: np.ndarray) -> np.ndarray:
    """Min-max stretch to [0, 1]; a constant channel maps to zeros."""
    lo, hi = float(channel.min()), float(channel.max())
    if hi <= lo:
        return np.zeros_like(channel, dtype=np.float32)
    return ((channel - lo) / (hi - lo)).astype(np.float32)


def match_key_bands(wavelengths: Sequence[float], key_wavelengths: Sequence[float],
                    tolerance_nm: float = DEFAULT_TOLERANCE_NM) -> Tuple[List[int], List[float]]:
    """Nearest distinct band per key wavelength (ascending keys, greedy).

    Returns matched band indices and the keys that found no band within tolerance.
    """
    wl = np.asarray(wavelengths, dtype=np.float64)
    used = np.zeros(wl.size, dtype=bool)
    matched, missing = [], []
    for key in sorted(float(k) for k in key_wavelengths):
        dist = np.where(used, np.inf, np.abs(wl - key))
        best = int(np.argmin(dist))
        if not np.isfinite(dist[best]) or dist[best] > tolerance_nm:
            missing.append(key)
            continue
        used[best] = True
        matched.append(best)
    return matched, missing


def make_group_composites(cube: HyperCube, key_wavelengths: Sequence[float] = DEFAULT_KEY_WAVELENGTHS,
                          tolerance_nm: float = DEFAULT_TOLERANCE_NM) -> GroupSplit:
    if len(key_wavelengths) != 9:
        raise ValidationError(f"need exactly 9 key wavelengths, got {len(key_wavelengths)}")
    matched, missing = match_key_bands(cube.wavelengths, key_wavelengths, tolerance_nm)
    if missing:
        raise EngineError(f"no band within {tolerance_nm} nm of key wavelengths {missing}")
    bands = sorted(matched)
    composites, assignment, indices = [], [], []
    for g in range(3):
        trip = bands[3 * g : 3 * g + 3]
        composites.append(np.stack([stretch(cube.data[:, :, b]) for b in trip], axis=-1))
        assignment.append(tuple(float(cube.wavelengths[b]) for b in trip))
        indices.append(tuple(trip))
    return GroupSplit(composites, assignment, indices)


def composite_hash(image: np.ndarray) -> str:
    arr = np.ascontiguousarray(image, dtype="<f4")
    h = hashlib.sha256(json.dumps(list(arr.shape)).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


class Segmenter(Protocol):
    def __call__(self, image: np.ndarray, wavelengths: Sequence[float]) -> MaskBank: ...


class InternalSegmenter:
    """The trained promptable model run in everything-mode on a 3-band composite."""

    def __init__(self, model, nms: Optional[NMSConfig] = None):
        self.model = model
        self.nms = nms or NMSConfig()

    def __call__(self, image: np.ndarray, wavelengths: Sequence[float]) -> MaskBank:
        return auto_generate_masks(self.model, HyperCube(image, wavelengths), self.nms)


class ExternalSegmenter:
    """Reads precomputed banks named ``<composite sha256>.json`` from a directory."""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)

    def __call__(self, image: np.ndarray, wavelengths: Sequence[float]) -> MaskBank:
        path = self.directory / f"{composite_hash(image)}.json"
        if not path.exists():
            raise FileNotFoundError(f"no precomputed mask bank {path}")
        bank = load_bank(path)
        if bank.shape != image.shape[:2]:
            raise ValidationError(f"{path}: bank is {bank.shape}, composite is {image.shape[:2]}")
        return bank


class StubSegmenter:
    """Seeded random rectangles; deterministic per (seed, composite)."""

    def __init__(self, seed: int = 0, max_masks: int = 12):
        self.seed = seed
        self.max_masks = max_masks

    def __call__(self, image: np.ndarray, wavelengths: Sequence[float]) -> MaskBank:
        digest = int(composite_hash(image)[:16], 16)
        rng = np.random.default_rng([self.seed, digest])
        h, w = image.shape[:2]
        k = int(rng.integers(0, self.max_masks + 1))
        masks = np.zeros((k, h, w), dtype=bool)
        for i in range(k):
            y0, x0 = int(rng.integers(0, h)), int(rng.integers(0, w))
            y1, x1 = int(rng.integers(y0 + 1, h + 1)), int(rng.integers(x0 + 1, w + 1))
            masks[i, y0:y1, x0:x1] = True
        return MaskBank(masks, rng.uniform(0.5, 1.0, size=k))


@dataclass
class EngineStats:
    per_group_mask_counts: List[int]
    merged_count: int
    merge_ratio: float
    mask_area_histogram: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def area_histogram(areas: np.ndarray, max_area: int) -> dict:
    """Counts of mask areas in power-of-two bins [1, 2), [2, 4), ..."""
    top = max(1, int(np.ceil(np.log2(max(max_area, 1) + 1))))
    edges = [2**i for i in range(top + 1)]
    counts, _ = np.histogram(np.asarray(areas, dtype=np.float64), bins=edges)
    return {"bin_edges": edges, "counts": counts.astype(int).tolist()}


def run_engine(cube: HyperCube, segmenter: Segmenter, nms: Optional[NMSConfig] = None,
               key_wavelengths: Sequence[float] = DEFAULT_KEY_WAVELENGTHS,
               tolerance_nm: float = DEFAULT_TOLERANCE_NM, jobs: int = 1) -> Tuple[MaskBank, EngineStats]:
    """Segment the three composites (concurrently if ``jobs > 1``) and merge with NMS."""
    nms = nms or NMSConfig()
    split = make_group_composites(cube, key_wavelengths, tolerance_nm)
    pairs = list(zip(split.composites, split.channel_assignment))
    if jobs > 1:
        with ThreadPoolExecutor(min(jobs, len(pairs))) as pool:
            futures = [pool.submit(segmenter, image, wl) for image, wl in pairs]
    else:
        futures = None
    banks = []
    for g, (image, wl) in enumerate(pairs):
        try:
            bank = futures[g].result() if futures else segmenter(image, wl)
        except Exception as exc:
            raise EngineError(f"segmenter failed on composite {g}: {exc}") from exc
        if bank.shape != (cube.height, cube.width):
            raise EngineError(f"composite {g}: segmenter returned masks of shape {bank.shape}")
        banks.append(bank)
    merged = greedy_nms(MaskBank.concat(banks), nms)
    counts = [b.k for b in banks]
    mean = float(np.mean(counts))
    stats = EngineStats(
        per_group_mask_counts=counts,
        merged_count=merged.k,
        merge_ratio=merged.k / mean if mean > 0 else 0.0,
        mask_area_histogram=area_histogram(merged.areas, cube.height * cube.width),
    )
    return merged, stats


def export_shard(cube: HyperCube, bank: MaskBank, out_dir: Union[str, Path], shard_id: str = "shard") -> dict:
    """Write the cube, its RLE mask bank and a manifest line."""
    return write_shard(out_dir, shard_id, cube, bank=bank)


@dataclass
class EngineConfig:
    key_wavelengths_nm: List[float] = field(default_factory=lambda: list(DEFAULT_KEY_WAVELENGTHS))
    tolerance_nm: float = DEFAULT_TOLERANCE_NM
    segmenter: dict = field(default_factory=lambda: {"kind": "internal"})
    nms: NMSConfig = field(default_factory=NMSConfig)

    @classmethod
    def from_json(cls, obj: dict) -> "EngineConfig":
        unknown = set(obj) - {"key_wavelengths_nm", "tolerance_nm", "segmenter", "nms"}
        if unknown:
            raise ValidationError(f"unknown engine config fields: {sorted(unknown)}")
        cfg = cls()
        if "key_wavelengths_nm" in obj:
            cfg.key_wavelengths_nm = [float(x) for x in obj["key_wavelengths_nm"]]
        if "tolerance_nm" in obj:
            cfg.tolerance_nm = float(obj["tolerance_nm"])
        if "segmenter" in obj:
            cfg.segmenter = dict(obj["segmenter"])
            if cfg.segmenter.get("kind") not in ("internal", "external", "stub"):
                raise ValidationError(f"unknown segmenter kind {cfg.segmenter.get('kind')!r}")
        if "nms" in obj:
            cfg.nms = NMSConfig.from_json(obj["nms"])
        return cfg
