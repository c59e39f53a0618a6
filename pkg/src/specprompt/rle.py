"""Column-major run-length encoding for binary masks.

Counts alternate between runs of zeros and ones, always starting with a
zero-run (which may be 0). Pixels are visited column by column, i.e. in
Fortran order, matching the COCO uncompressed RLE convention.
"""
from __future__ import annotations

from typing import Dict, List, Sequence

import numpy as np


def encode(mask: np.ndarray) -> List[int]:
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    if flat.size == 0:
        return []
    # positions where the value changes, plus both ends
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def decode(counts: Sequence[int], height: int, width: int) -> np.ndarray:
    total = height * width
    if sum(counts) != total:
        raise ValueError(f"RLE covers {sum(counts)} pixels, expected {total}")
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, np.asarray(counts, dtype=np.int64))
    return flat.reshape((height, width), order="F")


def to_dict(mask: np.ndarray) -> Dict[str, object]:
    h, w = mask.shape
    return {"size": [int(h), int(w)], "counts": encode(mask)}


def from_dict(obj: Dict[str, object]) -> np.ndarray:
    h, w = obj["size"]
    return decode(obj["counts"], int(h), int(w))
