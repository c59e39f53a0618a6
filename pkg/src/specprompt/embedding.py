"""Wavelength-keyed weight dictionaries and the channel-adaptive patch embedding.

A dictionary maps wavelength anchors to ``p x p x j`` kernel slices. For an
image with wavelengths ``b`` the convolution kernel is gathered slice by slice
(:func:`assemble_kernel`) so the number of input bands is free. Two dictionaries
are used: a coarse 10 nm grid for ordinary bands ("cube" branch) and a sparse
set of satellite-heritage anchors ("key" branch); the token grid is the sum of
both branch outputs.
"""
from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from .errors import DerivationError, FormatError, RangeError, ShapeError, ValidationError

CUBE_KEY_COUNT = 221
CUBE_START_NM = 400.0
CUBE_STEP_NM = 10.0
DEFAULT_TOLERANCE_NM = 5.0

# Centre wavelengths (nm) of classic multispectral sensors; thermal bands are
# listed too and dropped by the > 2500 nm filter.
SATELLITE_WAVELENGTHS: Dict[str, List[float]] = {
    "Landsat-7": [482.5, 565, 660, 825, 2220, 1650, 11450],
    "Landsat-8": [443, 482.5, 562.5, 655, 865, 1610, 1375, 2200, 10895, 12005],
    "Sentinel-2A/2B": [443, 490, 560, 665, 705, 740, 783, 842, 865, 945, 1375, 1610, 2190],
    "WorldView-2/3": [425, 480, 545, 605, 660, 725, 832.5, 950],
    "ZY1-02D/E": [486.5, 564.5, 662.5, 835.5, 434, 612, 730, 959],
    "ZY-3": [485, 555, 660, 830],
    "RapidEye": [455, 555, 655, 710, 805],
    "PlanetScope": [485, 545, 630, 820],
    "GeoEye-1": [480, 545, 672.5, 850],
    "SPOT-6/7": [485, 560, 655, 825],
    "Pleiades-1A/B": [490, 560, 650, 840],
    "IRS-P6": [555, 640, 815, 1625],
    "KOMPSAT-2/3/4": [485, 560, 660, 830],
    "GF-1/2": [485, 555, 660, 830],
    "GF-4": [485, 560, 660, 830, 3800],
    "GF-6": [485, 555, 660, 830, 720, 750, 425, 610],
}


def derive_key_wavelengths(satellite_table: Sequence[Sequence[float]], min_gap: float = 10.0,
                           longest: float = 2500.0) -> List[float]:
    """Merge near-duplicate sensor wavelengths into a set of key anchors.

    All wavelengths up to ``longest`` are pooled and sorted; the leftmost pair
    closer than ``min_gap`` is replaced by its mean until no such pair is left,
    and ``longest`` is appended if absent.
    """
    pool = sorted(float(w) for row in satellite_table for w in row if w <= longest)
    if any(w <= 0 for w in pool):
        raise DerivationError("wavelengths must be positive")
    if not pool:
        raise DerivationError("no wavelengths <= %g nm in the table" % longest)
    merged: List[float] = []
    # merged is always gap-free, so the next close pair is necessarily (top, w)
    for w in pool:
        if merged and w - merged[-1] < min_gap:
            merged[-1] = (merged[-1] + w) / 2.0
        else:
            merged.append(w)
    if merged[-1] != longest:
        merged.append(longest)
    return merged


def default_key_anchors() -> List[float]:
    return derive_key_wavelengths(list(SATELLITE_WAVELENGTHS.values()))


def cube_anchors() -> List[float]:
    return [CUBE_START_NM + CUBE_STEP_NM * i for i in range(CUBE_KEY_COUNT)]


class WeightDictionary(nn.Module):
    """Learnable ``|keys| x p x p x j`` table of kernel slices.

    ``branch="cube"`` uses the fixed 10 nm index rule; ``branch="key"`` looks up
    the nearest anchor.
    """

    def __init__(self, keys: Sequence[float], patch: int, token_dim: int, branch: str,
                 expected_channels: int = 8, generator: Optional[torch.Generator] = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        if branch not in ("key", "cube"):
            raise ValidationError(f"branch must be 'key' or 'cube', got {branch!r}")
        keys = [float(k) for k in keys]
        if any(b <= a for a, b in zip(keys, keys[1:])):
            raise ValidationError("dictionary keys must be strictly increasing")
        if branch == "cube" and len(keys) != CUBE_KEY_COUNT:
            raise ValidationError(f"cube dictionary needs {CUBE_KEY_COUNT} keys, got {len(keys)}")
        self.keys = keys
        self.patch = int(patch)
        self.token_dim = int(token_dim)
        self.branch = branch
        std = (self.patch * self.patch * expected_channels) ** -0.5
        init = torch.randn(len(keys), self.patch, self.patch, self.token_dim, generator=generator, dtype=dtype)
        self.entries = nn.Parameter(init * std)

    @classmethod
    def cube(cls, patch: int, token_dim: int, **kw) -> "WeightDictionary":
        return cls(cube_anchors(), patch, token_dim, "cube", **kw)

    @classmethod
    def key(cls, patch: int, token_dim: int, anchors: Optional[Sequence[float]] = None, **kw) -> "WeightDictionary":
        return cls(default_key_anchors() if anchors is None else anchors, patch, token_dim, "key", **kw)

    def index(self, wavelength: float) -> int:
        return wavelength_to_index(wavelength, self)

    def extra_repr(self) -> str:
        return f"branch={self.branch}, keys={len(self.keys)}, patch={self.patch}, token_dim={self.token_dim}"


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def wavelength_to_index(lambda_nm: float, dictionary: WeightDictionary) -> int:
    if dictionary.branch == "cube":
        if not (400.0 <= lambda_nm <= 2500.0):
            raise RangeError(f"wavelength {lambda_nm} nm outside the 400-2500 nm dictionary range")
        idx = _round_half_up((lambda_nm - CUBE_START_NM) / CUBE_STEP_NM)
        return min(max(idx, 0), CUBE_KEY_COUNT - 1)
    return nearest_anchor(lambda_nm, dictionary.keys)


def nearest_anchor(lambda_nm: float, anchors: Sequence[float]) -> int:
    """Index of the closest anchor; equidistant cases go to the lower anchor."""
    if lambda_nm <= 0:
        raise RangeError(f"wavelength must be positive, got {lambda_nm}")
    pos = bisect.bisect_left(anchors, lambda_nm)
    if pos == 0:
        return 0
    if pos == len(anchors):
        return len(anchors) - 1
    below, above = anchors[pos - 1], anchors[pos]
    return pos - 1 if lambda_nm - below <= above - lambda_nm else pos


@dataclass
class ChannelSplit:
    key_indices: List[int]
    cube_indices: List[int]
    key_assignment: List[float]  # anchor wavelength per key channel


def split_channels(wavelengths: Sequence[float], anchors: Sequence[float],
                   tolerance_nm: float = DEFAULT_TOLERANCE_NM) -> ChannelSplit:
    """Partition channels into key channels and the cube remainder.

    Each channel is matched to its nearest anchor; an anchor keeps only the
    closest matching channel within ``tolerance_nm`` (ties: lower channel index).
    """
    if tolerance_nm < 0:
        raise ValidationError("tolerance_nm must be >= 0")
    anchors = [float(a) for a in anchors]
    if any(b <= a for a, b in zip(anchors, anchors[1:])):
        raise ValidationError("anchors must be strictly increasing")
    claims: Dict[int, Tuple[float, int]] = {}
    if anchors:
        for ch, wl in enumerate(wavelengths):
            a = nearest_anchor(float(wl), anchors)
            dist = abs(float(wl) - anchors[a])
            if dist <= tolerance_nm and (a not in claims or dist < claims[a][0]):
                claims[a] = (dist, ch)
    chosen = {ch: a for a, (_, ch) in claims.items()}
    key_idx = sorted(chosen)
    cube_idx = [i for i in range(len(wavelengths)) if i not in chosen]
    return ChannelSplit(key_idx, cube_idx, [anchors[chosen[i]] for i in key_idx])


@dataclass
class AssembledKernel:
    weights: torch.Tensor  # (n, p, p, j)
    source_indices: List[int]


def assemble_kernel(wavelengths: Sequence[float], dictionary: WeightDictionary) -> AssembledKernel:
    idx = [wavelength_to_index(float(w), dictionary) for w in wavelengths]
    index = torch.as_tensor(idx, dtype=torch.long)
    return AssembledKernel(dictionary.entries.index_select(0, index), idx)


def _as_tensor(x, dtype: torch.dtype) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def patch_embed(cube_part, kernel: Union[AssembledKernel, torch.Tensor]) -> torch.Tensor:
    """Stride-``p`` convolution of an ``h x w x n`` cube with an ``n x p x p x j`` kernel.

    Returns the ``(h/p) x (w/p) x j`` token grid; zero input channels give zero tokens.
    """
    W = kernel.weights if isinstance(kernel, AssembledKernel) else kernel
    x = _as_tensor(cube_part, W.dtype)
    if x.ndim != 3:
        raise ShapeError(f"cube part must be (h, w, n), got {tuple(x.shape)}")
    h, w, n = x.shape
    if W.ndim != 4 or W.shape[1] != W.shape[2]:
        raise ShapeError(f"kernel must be (n, p, p, j), got {tuple(W.shape)}")
    p, j = W.shape[1], W.shape[3]
    if W.shape[0] != n:
        raise ShapeError(f"kernel has {W.shape[0]} channels, cube has {n}")
    if h % p or w % p:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by patch {p}; pad first")
    if n == 0:
        return torch.zeros(h // p, w // p, j, dtype=W.dtype)
    patches = x.reshape(h // p, p, w // p, p, n)
    return torch.einsum("aubvi,iuvj->abj", patches, W)


def pad_to_multiple(data, p: int):
    """Edge-replicate the bottom/right borders so h and w are multiples of ``p``."""
    h, w = data.shape[:2]
    ph, pw = (-h) % p, (-w) % p
    if not (ph or pw):
        return data
    if isinstance(data, torch.Tensor):
        idx_h = torch.clamp(torch.arange(h + ph), max=h - 1)
        idx_w = torch.clamp(torch.arange(w + pw), max=w - 1)
        return data[idx_h][:, idx_w]
    return np.pad(data, ((0, ph), (0, pw), (0, 0)), mode="edge")


def channel_adaptive_embed(data, wavelengths: Sequence[float], dict_k: WeightDictionary, dict_c: WeightDictionary,
                           anchors: Optional[Sequence[float]] = None,
                           tolerance_nm: float = DEFAULT_TOLERANCE_NM) -> torch.Tensor:
    """Token grid = key-branch embedding + cube-branch embedding.

    ``data`` is ``h x w x n`` (numpy or torch); ``anchors`` defaults to the key
    dictionary's keys.
    """
    if dict_k.patch != dict_c.patch or dict_k.token_dim != dict_c.token_dim:
        raise ShapeError("key and cube dictionaries must share patch size and token dim")
    wavelengths = [float(w) for w in wavelengths]
    x = _as_tensor(data, dict_c.entries.dtype)
    if x.ndim != 3 or x.shape[2] != len(wavelengths):
        raise ShapeError(f"data shape {tuple(x.shape)} does not match {len(wavelengths)} wavelengths")
    x = pad_to_multiple(x, dict_c.patch)
    split = split_channels(wavelengths, dict_k.keys if anchors is None else anchors, tolerance_nm)
    k_idx = torch.as_tensor(split.key_indices, dtype=torch.long)
    c_idx = torch.as_tensor(split.cube_indices, dtype=torch.long)
    key_kernel = assemble_kernel([wavelengths[i] for i in split.key_indices], dict_k)
    cube_kernel = assemble_kernel([wavelengths[i] for i in split.cube_indices], dict_c)
    return patch_embed(x.index_select(2, k_idx), key_kernel) + patch_embed(x.index_select(2, c_idx), cube_kernel)


# --------------------------------------------------------------------------- checkpoints


def save_dictionary(dictionary: WeightDictionary, path: Union[str, Path]) -> None:
    """Write ``<path>`` (JSON manifest) and ``<path>.f32`` (key-major float32 payload)."""
    path = Path(path)
    blob = path.with_name(path.name + ".f32")
    manifest = {
        "branch": dictionary.branch,
        "keys_nm": dictionary.keys,
        "patch": dictionary.patch,
        "token_dim": dictionary.token_dim,
        "payload": blob.name,
    }
    path.write_text(json.dumps(manifest, indent=1))
    blob.write_bytes(dictionary.entries.detach().cpu().numpy().astype("<f4").tobytes())


def load_dictionary(path: Union[str, Path]) -> WeightDictionary:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
        keys, p, j, branch = manifest["keys_nm"], manifest["patch"], manifest["token_dim"], manifest["branch"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"{path}: bad dictionary manifest: {exc}") from exc
    raw = (path.parent / manifest.get("payload", path.name + ".f32")).read_bytes()
    expected = len(keys) * p * p * j * 4
    if len(raw) != expected:
        raise FormatError(f"{path}: payload has {len(raw)} bytes, expected {expected}")
    d = WeightDictionary(keys, p, j, branch)
    values = np.frombuffer(raw, dtype="<f4").reshape(len(keys), p, p, j)
    with torch.no_grad():
        d.entries.copy_(torch.from_numpy(values.copy()))
    return d
