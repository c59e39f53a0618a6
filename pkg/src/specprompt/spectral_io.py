"""Hyperspectral cube container, the HSC file format and a synthetic scene generator.

HSC layout::

    b"HSCUBE01" | uint32 LE header length | UTF-8 JSON header | float32 LE payload

The payload is band-sequential: all of band 1 in row-major order, then band 2,
and so on.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import rle
from .errors import ConsistencyError, FormatError, GenerationError, ShapeError, TruncationError, ValidationError

MAGIC = b"HSCUBE01"
MIN_WAVELENGTH = 400.0
MAX_WAVELENGTH = 2500.0

PathLike = Union[str, Path]


@dataclass
class HyperCube:
    """An h x w x n reflectance cube with per-band center wavelengths (nm)."""

    data: np.ndarray  # (h, w, n) float32
    wavelengths: np.ndarray  # (n,) float64, strictly increasing

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.wavelengths = np.asarray(self.wavelengths, dtype=np.float64).reshape(-1)
        if self.data.ndim != 3:
            raise ValidationError(f"cube data must be 3-D (h, w, n), got shape {self.data.shape}")
        h, w, n = self.data.shape
        if min(h, w, n) < 1:
            raise ValidationError(f"cube dimensions must be >= 1, got {self.data.shape}")
        if self.wavelengths.size != n:
            raise ConsistencyError(f"{self.wavelengths.size} wavelengths for {n} bands")
        validate_wavelengths(self.wavelengths)
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("cube data contains NaN or Inf")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValidationError("cube values must lie in [0, 1]; use normalize='minmax' for raw data")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    def select_bands(self, indices: Sequence[int]) -> "HyperCube":
        idx = np.asarray(indices, dtype=np.int64)
        return HyperCube(self.data[:, :, idx], self.wavelengths[idx])

    def __eq__(self, other):
        if not isinstance(other, HyperCube):
            return NotImplemented
        return (
            self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
            and np.array_equal(self.wavelengths, other.wavelengths)
        )


def validate_wavelengths(wavelengths: np.ndarray) -> None:
    wl = np.asarray(wavelengths, dtype=np.float64)
    if wl.size and (wl.min() < MIN_WAVELENGTH or wl.max() > MAX_WAVELENGTH):
        raise ValidationError(f"wavelengths must lie in [{MIN_WAVELENGTH}, {MAX_WAVELENGTH}] nm")
    if np.any(np.diff(wl) <= 0):
        raise ValidationError("wavelengths must be strictly increasing")


def minmax_normalize(data: np.ndarray) -> np.ndarray:
    """Per-band min-max scaling to [0, 1]; constant bands become 0."""
    data = np.asarray(data, dtype=np.float64)
    lo = data.min(axis=(0, 1), keepdims=True)
    span = data.max(axis=(0, 1), keepdims=True) - lo
    out = np.where(span > 0, (data - lo) / np.where(span > 0, span, 1.0), 0.0)
    return out.astype(np.float32)


# --------------------------------------------------------------------------- HSC I/O


def _write_container(path: PathLike, header: dict, data: np.ndarray) -> None:
    head = json.dumps(header).encode("utf-8")
    payload = np.ascontiguousarray(data.transpose(2, 0, 1)).astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(payload)


def write_cube(cube: HyperCube, path: PathLike) -> None:
    header = {
        "height": cube.height,
        "width": cube.width,
        "bands": cube.bands,
        "wavelengths_nm": [float(w) for w in cube.wavelengths],
        "dtype": "f32",
        "layout": "band_sequential",
    }
    _write_container(path, header, cube.data)


def _require(header: dict, name: str, kind):
    if name not in header:
        raise FormatError(f"HSC header missing field '{name}'")
    value = header[name]
    if kind is int and (not isinstance(value, int) or isinstance(value, bool) or value < 1):
        raise FormatError(f"HSC header field '{name}' must be a positive integer, got {value!r}")
    if kind is list and not (isinstance(value, list) and all(isinstance(v, (int, float)) for v in value)):
        raise FormatError(f"HSC header field '{name}' must be a list of numbers")
    return value


def _read_container(path: PathLike) -> Tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"bad magic {raw[:8]!r}, expected {MAGIC!r}")
    if len(raw) < 12:
        raise TruncationError("file ends inside the header length field")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise TruncationError("file ends inside the JSON header")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object")
    h = _require(header, "height", int)
    w = _require(header, "width", int)
    n = _require(header, "bands", int)
    if header.get("dtype", "f32") != "f32":
        raise FormatError(f"unsupported dtype {header.get('dtype')!r}")
    if header.get("layout", "band_sequential") != "band_sequential":
        raise FormatError(f"unsupported layout {header.get('layout')!r}")
    payload = raw[12 + hlen :]
    expected = h * w * n * 4
    if len(payload) != expected:
        raise TruncationError(f"payload has {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(n, h, w).transpose(1, 2, 0)
    return header, np.array(data, dtype=np.float32)


def read_cube(path: PathLike, normalize: str = "none") -> HyperCube:
    """Read an HSC file.

    ``normalize="minmax"`` rescales each band to [0, 1] for raw radiance data;
    the default expects values already in range.
    """
    header, data = _read_container(path)
    wl = _require(header, "wavelengths_nm", list)
    if len(wl) != header["bands"]:
        raise ConsistencyError(f"header declares bands={header['bands']} but lists {len(wl)} wavelengths")
    if normalize == "minmax":
        data = minmax_normalize(data)
    elif normalize != "none":
        raise ValidationError(f"unknown normalize mode {normalize!r}")
    return HyperCube(data, np.asarray(wl, dtype=np.float64))


def write_map(array: np.ndarray, path: PathLike, name: str = "map") -> None:
    """A single-band result map in the HSC container (no wavelengths, any finite values)."""
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim != 2:
        raise ShapeError(f"map must be 2-D, got {arr.shape}")
    header = {"height": arr.shape[0], "width": arr.shape[1], "bands": 1, "wavelengths_nm": [],
              "dtype": "f32", "layout": "band_sequential", "kind": "map", "name": name}
    _write_container(path, header, arr[:, :, None])


def read_map(path: PathLike) -> Tuple[str, np.ndarray]:
    header, data = _read_container(path)
    if header.get("kind") != "map" or header["bands"] != 1:
        raise FormatError(f"{path}: not a single-band map file")
    return str(header.get("name", "map")), data[:, :, 0]


# --------------------------------------------------------------------------- scenes


@dataclass
class SceneTruth:
    class_map: np.ndarray  # (h, w) int, 0 = background
    instance_masks: List[np.ndarray]
    instance_classes: List[int]
    material_spectra: Dict[int, np.ndarray]
    background_spectrum: Optional[np.ndarray] = None
    change_map: Optional[np.ndarray] = None
    anomaly_label: Optional[int] = None

    def background_mask(self) -> np.ndarray:
        return self.class_map == 0

    def anomaly_map(self) -> np.ndarray:
        if self.anomaly_label is None:
            return np.zeros_like(self.class_map, dtype=bool)
        return self.class_map == self.anomaly_label

    def to_json(self) -> dict:
        h, w = self.class_map.shape
        out = {
            "height": int(h),
            "width": int(w),
            "class_map": self.class_map.astype(int).ravel().tolist(),
            "instances": [
                {"class": int(c), "rle": rle.encode(m)} for m, c in zip(self.instance_masks, self.instance_classes)
            ],
            "material_spectra": {str(k): [float(x) for x in v] for k, v in self.material_spectra.items()},
            "background_spectrum": None
            if self.background_spectrum is None
            else [float(x) for x in self.background_spectrum],
            "change_map": None if self.change_map is None else rle.encode(self.change_map),
            "anomaly_label": self.anomaly_label,
        }
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SceneTruth":
        try:
            h, w = int(obj["height"]), int(obj["width"])
            class_map = np.asarray(obj["class_map"], dtype=np.int64).reshape(h, w)
            masks = [rle.decode(inst["rle"], h, w) for inst in obj["instances"]]
            classes = [int(inst["class"]) for inst in obj["instances"]]
            spectra = {int(k): np.asarray(v, dtype=np.float64) for k, v in obj["material_spectra"].items()}
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed truth sidecar: {exc}") from exc
        bg = obj.get("background_spectrum")
        cm = obj.get("change_map")
        return cls(
            class_map=class_map,
            instance_masks=masks,
            instance_classes=classes,
            material_spectra=spectra,
            background_spectrum=None if bg is None else np.asarray(bg, dtype=np.float64),
            change_map=None if cm is None else rle.decode(cm, h, w),
            anomaly_label=obj.get("anomaly_label"),
        )


def write_truth(truth: SceneTruth, path: PathLike) -> None:
    Path(path).write_text(json.dumps(truth.to_json()))


def read_truth(path: PathLike) -> SceneTruth:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    return SceneTruth.from_json(obj)


@dataclass
class SceneConfig:
    """Parameters of a synthetic scene.

    ``band_plan`` is an explicit wavelength list, or a ``(start_nm, step_nm, count)``
    tuple (``{"start_nm", "step_nm", "count"}`` in JSON).
    Optional anomalies are small targets with their own spectrum, labelled
    ``num_classes + 1``.
    """

    height: int = 64
    width: int = 64
    band_plan: Union[Sequence[float], Tuple[float, float, int]] = (450.0, 100.0, 20)
    num_classes: int = 3
    shapes_per_class: Tuple[int, int] = (1, 2)
    size_range: Tuple[int, int] = (10, 22)
    noise_sigma: float = 0.0
    spectral_separation: float = 15.0
    seed: int = 0
    anomaly_count: int = 0
    anomaly_size: Tuple[int, int] = (5, 8)

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if self.spectral_separation <= 0:
            raise ValidationError("spectral_separation must be > 0")
        if self.height < 1 or self.width < 1:
            raise ValidationError("scene dimensions must be >= 1")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        lo, hi = self.shapes_per_class
        if lo < 1 or hi < lo:
            raise ValidationError(f"invalid shapes_per_class {self.shapes_per_class}")
        validate_wavelengths(self.wavelengths())

    def wavelengths(self) -> np.ndarray:
        plan = self.band_plan
        if isinstance(plan, dict):
            plan = (plan["start_nm"], plan["step_nm"], plan["count"])
        if isinstance(plan, tuple):
            start, step, count = plan
            return float(start) + float(step) * np.arange(int(count), dtype=np.float64)
        return np.asarray(plan, dtype=np.float64)

    def to_json(self) -> dict:
        plan = self.band_plan
        if isinstance(plan, tuple):
            plan = {"start_nm": plan[0], "step_nm": plan[1], "count": plan[2]}
        elif not isinstance(plan, dict):
            plan = [float(x) for x in plan]
        return {
            "height": self.height,
            "width": self.width,
            "band_plan": plan,
            "num_classes": self.num_classes,
            "shapes_per_class": list(self.shapes_per_class),
            "size_range": list(self.size_range),
            "noise_sigma": self.noise_sigma,
            "spectral_separation": self.spectral_separation,
            "seed": self.seed,
            "anomaly_count": self.anomaly_count,
            "anomaly_size": list(self.anomaly_size),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SceneConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown SceneConfig fields: {sorted(unknown)}")
        kw = dict(obj)
        for name in ("shapes_per_class", "size_range", "anomaly_size"):
            if name in kw:
                kw[name] = tuple(kw[name])
        return cls(**kw)


def spectral_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Angle between two spectra in degrees."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    return math.degrees(math.acos(float(np.clip(cos, -1.0, 1.0))))


def random_spectrum(wavelengths: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Linear baseline plus 2-4 Gaussian absorption/reflection bumps."""
    wl = np.asarray(wavelengths, dtype=np.float64)
    lo, hi = MIN_WAVELENGTH, MAX_WAVELENGTH
    t = (wl - lo) / (hi - lo)
    spec = rng.uniform(0.1, 0.45) + rng.uniform(-0.2, 0.2) * t
    for _ in range(rng.integers(2, 5)):
        center = rng.uniform(lo, hi)
        width = rng.uniform(60.0, 400.0)
        amp = rng.uniform(-0.3, 0.45)
        spec = spec + amp * np.exp(-0.5 * ((wl - center) / width) ** 2)
    return np.clip(spec, 0.02, 0.98)


def _separated_spectra(count: int, wavelengths: np.ndarray, min_angle: float, rng: np.random.Generator,
                       max_tries: int = 2000) -> List[np.ndarray]:
    spectra: List[np.ndarray] = []
    tries = 0
    while len(spectra) < count:
        tries += 1
        if tries > max_tries:
            raise GenerationError(
                f"could not draw {count} spectra with pairwise angle >= {min_angle} deg "
                f"over {len(wavelengths)} bands"
            )
        cand = random_spectrum(wavelengths, rng)
        if all(spectral_angle(cand, s) >= min_angle for s in spectra):
            spectra.append(cand)
    return spectra


def _shape_mask(h: int, w: int, top: int, left: int, sh: int, sw: int, ellipse: bool) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    if not ellipse:
        mask[top : top + sh, left : left + sw] = True
        return mask
    yy, xx = np.mgrid[0:sh, 0:sw]
    cy, cx = (sh - 1) / 2.0, (sw - 1) / 2.0
    inside = ((yy - cy) / (sh / 2.0)) ** 2 + ((xx - cx) / (sw / 2.0)) ** 2 <= 1.0
    mask[top : top + sh, left : left + sw] = inside
    return mask


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def _place_shapes(h: int, w: int, labels: List[int], sizes: List[Tuple[int, int]], rng: np.random.Generator,
                  occupied: np.ndarray, max_tries: int = 500) -> List[np.ndarray]:
    masks = []
    for label, (lo, hi) in zip(labels, sizes):
        for _ in range(max_tries):
            sh = int(rng.integers(lo, hi + 1))
            sw = int(rng.integers(lo, hi + 1))
            sh, sw = min(sh, h), min(sw, w)
            top = int(rng.integers(0, h - sh + 1))
            left = int(rng.integers(0, w - sw + 1))
            m = _shape_mask(h, w, top, left, sh, sw, ellipse=bool(rng.random() < 0.5))
            # a one-pixel gap keeps neighbouring instances from merging
            if m.any() and not (_dilate(m) & occupied).any():
                occupied |= m
                masks.append(m)
                break
        else:
            raise GenerationError(f"could not place a non-overlapping shape for class {label}")
    return masks


def generate_scene(config: SceneConfig) -> Tuple[HyperCube, SceneTruth]:
    """Draw a piecewise-constant synthetic scene; deterministic in ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    wl = config.wavelengths()
    h, w = config.height, config.width
    n_materials = config.num_classes + 1 + (1 if config.anomaly_count > 0 else 0)
    spectra = _separated_spectra(n_materials, wl, config.spectral_separation, rng)
    background = spectra[0]
    materials = {c: spectra[c] for c in range(1, config.num_classes + 1)}

    labels: List[int] = []
    for c in range(1, config.num_classes + 1):
        lo, hi = config.shapes_per_class
        labels.extend([c] * int(rng.integers(lo, hi + 1)))
    sizes = [tuple(config.size_range)] * len(labels)
    anomaly_label = None
    if config.anomaly_count > 0:
        anomaly_label = config.num_classes + 1
        materials[anomaly_label] = spectra[-1]
        labels.extend([anomaly_label] * config.anomaly_count)
        sizes.extend([tuple(config.anomaly_size)] * config.anomaly_count)

    occupied = np.zeros((h, w), dtype=bool)
    masks = _place_shapes(h, w, labels, sizes, rng, occupied)

    class_map = np.zeros((h, w), dtype=np.int64)
    for m, c in zip(masks, labels):
        class_map[m] = c
    clean = _paint(class_map, background, materials)
    data = _add_noise(clean, config.noise_sigma, rng)
    truth = SceneTruth(
        class_map=class_map,
        instance_masks=masks,
        instance_classes=labels,
        material_spectra=materials,
        background_spectrum=background,
        anomaly_label=anomaly_label,
    )
    return HyperCube(data, wl), truth


def _paint(class_map: np.ndarray, background: np.ndarray, materials: Dict[int, np.ndarray]) -> np.ndarray:
    h, w = class_map.shape
    clean = np.broadcast_to(background, (h, w, background.size)).copy()
    for c, spec in materials.items():
        clean[class_map == c] = spec
    return clean


def _add_noise(clean: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma > 0:
        clean = clean + rng.normal(0.0, sigma, size=clean.shape)
    return np.clip(clean, 0.0, 1.0).astype(np.float32)


def generate_change_pair(config: SceneConfig) -> Tuple[HyperCube, HyperCube, SceneTruth]:
    """A registered bi-temporal pair in which one instance swaps its material.

    The returned truth describes the first epoch and carries ``change_map``.
    """
    if config.num_classes < 2:
        raise GenerationError("a material swap needs at least two classes")
    cube1, truth = generate_scene(config)
    rng = np.random.default_rng([config.seed, 1])
    k = int(rng.integers(len(truth.instance_masks)))
    old = truth.instance_classes[k]
    choices = [c for c in range(1, config.num_classes + 1) if c != old]
    new = int(rng.choice(choices))
    class_map2 = truth.class_map.copy()
    class_map2[truth.instance_masks[k]] = new
    clean2 = _paint(class_map2, truth.background_spectrum, truth.material_spectra)
    cube2 = HyperCube(_add_noise(clean2, config.noise_sigma, rng), cube1.wavelengths)
    truth.change_map = truth.instance_masks[k].copy()
    return cube1, cube2, truth
