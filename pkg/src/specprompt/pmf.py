"""Prompt-mask-feature interaction and the five tuning-free task workflows.

Every mask is summarised by the mean feature of the token cells it covers.
Mode 1 turns a point into a semantic vector (via the smallest valid mask that
contains it); Mode 2 selects all masks whose summary is cosine-similar to a
vector. Classification, one-class classification, target detection, anomaly
detection and change detection are thin compositions of the two.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .backbone import PointPrompt
from .errors import NoMaskError, RegistrationError, ShapeError, TaskError, ValidationError
from .maskgen import MaskBank

TASKS = ("hc", "hocc", "htd", "had", "hcd")


@dataclass
class SemanticVector:
    values: np.ndarray
    source: str  # "prompt-point" | "mask-index" | "spectrum-match"
    mask_index: Optional[int] = None


@dataclass
class MaskSelection:
    indices: List[int]
    similarities: List[float]


@dataclass
class TaskResult:
    kind: str
    class_map: Optional[np.ndarray] = None
    binary_map: Optional[np.ndarray] = None
    score_map: Optional[np.ndarray] = None
    anomaly_map: Optional[np.ndarray] = None
    change_map: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def maps(self) -> Dict[str, np.ndarray]:
        names = ("class_map", "binary_map", "score_map", "anomaly_map", "change_map")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}


def _as_features(features) -> np.ndarray:
    if hasattr(features, "detach"):
        features = features.detach().cpu().numpy()
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 3:
        raise ShapeError(f"feature cube must be (rows, cols, j), got {f.shape}")
    return f


def _patch_of(shape: Tuple[int, int], features: np.ndarray) -> int:
    h, w = shape
    rows, cols = features.shape[:2]
    p = -(-h // rows)
    if -(-h // p) != rows or -(-w // p) != cols:
        raise ShapeError(f"mask {h}x{w} is not compatible with a {rows}x{cols} feature grid")
    return p


def _coverage(masks: np.ndarray, rows: int, cols: int, p: int) -> np.ndarray:
    """Fraction of each p x p block covered, (k, rows, cols); edges padded by replication."""
    k, h, w = masks.shape
    ph, pw = rows * p - h, cols * p - w
    if ph or pw:
        masks = np.pad(masks, ((0, 0), (0, ph), (0, pw)), mode="edge")
    return masks.reshape(k, rows, p, cols, p).mean(axis=(2, 4))


def _cell_weights(masks: np.ndarray, features: np.ndarray) -> np.ndarray:
    rows, cols = features.shape[:2]
    p = _patch_of(masks.shape[1:], features)
    cov = _coverage(masks.astype(np.float64), rows, cols, p).reshape(masks.shape[0], -1)
    inside = cov >= 0.5
    for i in np.flatnonzero(~inside.any(axis=1)):
        inside[i, int(np.argmax(cov[i]))] = True
    return inside / inside.sum(axis=1, keepdims=True)


def mask_feature(mask: np.ndarray, features) -> np.ndarray:
    """Mean feature over token cells at least half covered by ``mask``.

    When no cell reaches half coverage the single best-covered cell is used.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValidationError("cannot summarise an empty mask")
    f = _as_features(features)
    return (_cell_weights(mask[None], f) @ f.reshape(-1, f.shape[2]))[0]


def mask_features(bank: MaskBank, features) -> np.ndarray:
    """Summary vector of every mask in the bank, (k, j)."""
    f = _as_features(features)
    if bank.k == 0:
        return np.zeros((0, f.shape[2]))
    if np.any(bank.areas == 0):
        raise ValidationError("bank contains an empty mask")
    return _cell_weights(bank.masks, f) @ f.reshape(-1, f.shape[2])


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, norm, out=np.zeros_like(v, dtype=np.float64), where=norm > 0)


def cosine_to_all(d: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Cosine similarity of ``d`` to each row; zero rows score -1."""
    d = np.asarray(d, dtype=np.float64)
    if not np.any(d):
        raise ValidationError("semantic vector must be nonzero")
    sims = _unit(vectors) @ _unit(d)
    sims[~np.any(vectors, axis=1)] = -1.0
    return np.clip(sims, -1.0, 1.0)


def containing_valid(bank: MaskBank, x: int, y: int, valid_score: float) -> np.ndarray:
    h, w = bank.shape
    if not (0 <= x < w and 0 <= y < h):
        raise ValidationError(f"point ({x}, {y}) outside the {w}x{h} image")
    return np.flatnonzero(bank.masks[:, y, x] & (bank.scores >= valid_score))


def mode1(point: PointPrompt, bank: MaskBank, features, valid_score: float = 0.5) -> SemanticVector:
    """Point -> mean feature of the smallest valid mask containing it."""
    if bank.k == 0:
        raise NoMaskError("mask bank is empty")
    cands = containing_valid(bank, point.x, point.y, valid_score)
    if cands.size == 0:
        raise NoMaskError(f"no mask with score >= {valid_score} contains ({point.x}, {point.y})")
    best = min(cands, key=lambda i: (bank.areas[i], -bank.scores[i], i))
    return SemanticVector(mask_feature(bank.masks[best], features), "prompt-point", int(best))


def mode2(d, bank: MaskBank, features, tau: float) -> MaskSelection:
    """All masks with cosine(d, mask feature) >= tau, most similar first."""
    if bank.k == 0:
        raise ValidationError("mask bank is empty")
    vec = d.values if isinstance(d, SemanticVector) else d
    sims = cosine_to_all(vec, mask_features(bank, features))
    sel = [i for i in range(bank.k) if sims[i] >= tau]
    sel.sort(key=lambda i: (-sims[i], i))
    return MaskSelection(sel, [float(sims[i]) for i in sel])


def _prototype(points: Sequence[PointPrompt], bank: MaskBank, features, valid_score: float) -> Optional[np.ndarray]:
    """Mean Mode-1 vector; unusable prompts retry with the validity floor at 0."""
    vecs = []
    for pt in points:
        for floor in (valid_score, 0.0):
            try:
                vecs.append(mode1(pt, bank, features, floor).values)
                break
            except NoMaskError:
                continue
    return np.mean(vecs, axis=0) if vecs else None


def run_hc(bank: MaskBank, features, prompts: Mapping[int, Sequence[PointPrompt]],
           valid_score: float = 0.5) -> TaskResult:
    """Closed-set classification: each mask takes the class of its nearest prototype."""
    if not prompts:
        raise ValidationError("classification needs at least one class")
    for c, pts in prompts.items():
        if not pts:
            raise ValidationError(f"class {c} has no prompt points")
        if int(c) <= 0:
            raise ValidationError("class labels must be positive; 0 marks unclassified pixels")
    h, w = bank.shape
    protos, classes, unassignable = [], [], []
    for c in sorted(prompts):
        proto = _prototype(prompts[c], bank, features, valid_score)
        if proto is None:
            unassignable.append(int(c))
        else:
            protos.append(proto)
            classes.append(int(c))
    class_map = np.zeros((h, w), dtype=np.int64)
    assignment: List[int] = []
    if protos and bank.k:
        feats = mask_features(bank, features)
        dist = 1.0 - _unit(feats) @ _unit(np.stack(protos)).T  # (k, C)
        assignment = [classes[i] for i in np.argmin(dist, axis=1)]
        # low-score masks first so the highest-score mask owns overlaps
        for i in np.argsort(bank.scores, kind="stable"):
            class_map[bank.masks[i]] = assignment[i]
    return TaskResult("hc", class_map=class_map,
                      meta={"assignment": assignment, "unassignable": unassignable})


def run_hocc(bank: MaskBank, features, prompts: Sequence[PointPrompt], tau: float,
             valid_score: float = 0.5) -> TaskResult:
    """One-class: accrete masks by similarity while coverage approaches a ``tau`` share of pixels.

    The most similar mask is always taken. Accretion stops once the budget is
    met, or before a mask that would overshoot it by at least the current
    shortfall, so coverage is the similarity-ordered prefix closest to the budget.
    """
    if not prompts:
        raise ValidationError("one-class classification needs at least one target prompt")
    if not (0.0 < tau <= 1.0):
        raise ValidationError(f"class prior must be in (0, 1], got {tau}")
    h, w = bank.shape
    proto = _prototype(prompts, bank, features, valid_score)
    if proto is None:
        raise TaskError("no target prompt hits a mask")
    sims = cosine_to_all(proto, mask_features(bank, features))
    order = sorted(range(bank.k), key=lambda i: (-sims[i], i))
    budget = tau * h * w
    covered = np.zeros((h, w), dtype=bool)
    score_map = np.zeros((h, w))
    accreted = []
    for i in order:
        count = int(covered.sum())
        if count >= budget - 1e-9 * h * w:
            break
        m = bank.masks[i]
        gain = int((m & ~covered).sum())
        if accreted and count + gain - budget >= budget - count:
            break
        score_map[m & ~covered] = sims[i]  # visited in descending similarity: first write is the max
        covered |= m
        accreted.append(i)
    return TaskResult("hocc", binary_map=covered, score_map=score_map,
                      meta={"accreted": accreted, "similarities": [float(sims[i]) for i in accreted]})


def match_spectrum(cube_data: np.ndarray, spectrum: np.ndarray) -> Tuple[int, int]:
    """(x, y) of the pixel with the smallest cosine distance; ties -> lowest row-major index."""
    data = np.asarray(cube_data, dtype=np.float64)
    spectrum = np.asarray(spectrum, dtype=np.float64)
    if spectrum.shape != (data.shape[2],):
        raise ShapeError(f"target spectrum has {spectrum.size} entries, cube has {data.shape[2]} bands")
    h, w, n = data.shape
    flat = data.reshape(-1, n)
    sims = _unit(flat) @ _unit(spectrum)
    idx = int(np.argmin(1.0 - sims))
    return idx % w, idx // w


def _coverage_max(bank: MaskBank, values: np.ndarray, keep: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    h, w = bank.shape
    out = np.full((h, w), -np.inf)
    for i in range(bank.k):
        if keep is None or keep[i]:
            np.maximum(out, np.where(bank.masks[i], values[i], -np.inf), out=out)
    covered = np.isfinite(out)
    return np.where(covered, out, 0.0), covered


def run_htd(cube_data: np.ndarray, bank: MaskBank, features, target_spectrum: Sequence[float], tau: float,
            valid_score: float = 0.5) -> TaskResult:
    """Target detection from a reference spectrum."""
    if not (-1.0 <= tau <= 1.0):
        raise ValidationError(f"similarity threshold must be in [-1, 1], got {tau}")
    if bank.k == 0:
        raise TaskError("mask bank is empty")
    x, y = match_spectrum(cube_data, np.asarray(target_spectrum))
    valid_any = (bank.masks & (bank.scores >= valid_score)[:, None, None]).any(axis=0)
    if not valid_any[y, x]:
        ys, xs = np.nonzero(valid_any)
        if ys.size == 0:
            raise TaskError("no valid mask anywhere in the image")
        d2 = (ys - y) ** 2 + (xs - x) ** 2
        k = int(np.argmin(d2))  # nonzero() is row-major, so ties go to the lowest index
        x, y = int(xs[k]), int(ys[k])
    d = mode1(PointPrompt(x, y), bank, features, valid_score)
    d.source = "spectrum-match"
    sims = cosine_to_all(d.values, mask_features(bank, features))
    score_map, covered = _coverage_max(bank, sims)
    return TaskResult("htd", binary_map=covered & (score_map >= tau), score_map=score_map,
                      meta={"prompt": [x, y], "mask_index": d.mask_index})


def run_had(bank: MaskBank, tau: float) -> TaskResult:
    """Anomalies are what remains after dropping masks larger than ``tau`` pixels."""
    h, w = bank.shape
    if bank.k == 0:
        return TaskResult("had", anomaly_map=np.zeros((h, w)), meta={"kept": []})
    keep = bank.areas <= tau
    amap, _ = _coverage_max(bank, bank.scores, keep)
    return TaskResult("had", anomaly_map=amap, meta={"kept": [int(i) for i in np.flatnonzero(keep)]})


def run_hcd(bank1: MaskBank, features1, features2, tau: float) -> TaskResult:
    """A first-epoch mask changed if its footprint's feature drifted by more than ``tau`` (cosine distance)."""
    f1, f2 = _as_features(features1), _as_features(features2)
    if f1.shape != f2.shape:
        raise RegistrationError(f"feature cubes differ between epochs: {f1.shape} vs {f2.shape}")
    if not (0.0 <= tau <= 2.0):
        raise ValidationError(f"change threshold must be in [0, 2], got {tau}")
    h, w = bank1.shape
    change = np.zeros((h, w), dtype=bool)
    distances = []
    if bank1.k:
        v1, v2 = mask_features(bank1, f1), mask_features(bank1, f2)
        same = np.all(v1 == v2, axis=1)
        cos = np.sum(_unit(v1) * _unit(v2), axis=1)
        dist = np.where(same, 0.0, 1.0 - np.clip(cos, -1.0, 1.0))
        for i in np.flatnonzero(dist > tau):
            change |= bank1.masks[i]
        distances = dist.tolist()
    return TaskResult("hcd", change_map=change, meta={"distances": distances})


# --------------------------------------------------------------------------- config


@dataclass
class TaskConfig:
    task: str
    tau: Optional[float] = None
    prompts: Dict[int, List[PointPrompt]] = field(default_factory=dict)
    spectrum: Optional[List[float]] = None
    valid_score: float = 0.5

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValidationError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.task == "hc":
            if self.tau is not None:
                raise ValidationError("classification takes no tau")
        elif self.tau is None:
            raise ValidationError(f"task {self.task} requires tau")
        if self.task in ("hc", "hocc"):
            if not self.prompts:
                raise ValidationError(f"task {self.task} requires prompts")
            for c, pts in self.prompts.items():
                if not pts:
                    raise ValidationError(f"class {c} lists zero prompt points")
        if self.task == "htd" and not self.spectrum:
            raise ValidationError("target detection requires a spectrum")

    @classmethod
    def from_json(cls, obj: dict) -> "TaskConfig":
        if "task" not in obj:
            raise ValidationError("task config needs a 'task' field")
        prompts = {}
        raw = obj.get("prompts") or {}
        if isinstance(raw, list):
            raw = {"1": raw}
        for key, pts in raw.items():
            try:
                prompts[int(key)] = [PointPrompt(int(p[0]), int(p[1])) for p in pts]
            except (TypeError, ValueError, IndexError) as exc:
                raise ValidationError(f"bad prompt list for class {key}: {exc}") from exc
        tau = obj.get("tau")
        return cls(task=str(obj["task"]).lower(), tau=None if tau is None else float(tau), prompts=prompts,
                   spectrum=obj.get("spectrum"), valid_score=float(obj.get("valid_score", 0.5)))

    def to_json(self) -> dict:
        out = {"task": self.task, "tau": self.tau, "valid_score": self.valid_score}
        if self.prompts:
            out["prompts"] = {str(c): [[p.x, p.y] for p in pts] for c, pts in self.prompts.items()}
        if self.spectrum is not None:
            out["spectrum"] = list(self.spectrum)
        return out
