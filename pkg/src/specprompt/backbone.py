"""A small promptable segmentation model.

Channel-adaptive tokens go through a pre-norm transformer encoder to produce
the feature cube; point prompts are embedded with a sinusoidal code plus a
learned polarity vector; a two-way attention decoder emits several candidate
masks per prompt set together with a predicted quality score for each.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .embedding import DEFAULT_TOLERANCE_NM, WeightDictionary, channel_adaptive_embed
from .errors import FormatError, ShapeError, ValidationError
from .spectral_io import HyperCube

FOREGROUND = 1
BACKGROUND = 0
PADDING = -1


@dataclass
class ModelConfig:
    token_dim: int = 64
    encoder_depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    decoder_depth: int = 2
    masks_per_prompt: int = 3
    patch: int = 4
    max_grid: int = 128
    tolerance_nm: float = DEFAULT_TOLERANCE_NM
    key_anchors: Optional[List[float]] = None
    seed: int = 0

    def __post_init__(self):
        if self.token_dim % self.heads:
            raise ValidationError(f"token_dim {self.token_dim} not divisible by heads {self.heads}")
        if self.token_dim % 4:
            raise ValidationError("token_dim must be a multiple of 4 for the sinusoidal prompt code")
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            raise ValidationError("depths must be >= 1")
        if self.masks_per_prompt < 1 or self.patch < 1:
            raise ValidationError("masks_per_prompt and patch must be >= 1")

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class PointPrompt:
    x: int
    y: int
    foreground: bool = True


@dataclass
class MaskPrediction:
    logits: np.ndarray  # (masks_per_prompt, h, w)
    scores: np.ndarray  # (masks_per_prompt,)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        q, k, v = self._split(self.q(q)), self._split(self.k(k)), self._split(self.v(v))
        out = F.scaled_dot_product_attention(q, k, v)
        b, h, n, dh = out.shape
        return self.out(out.transpose(1, 2).reshape(b, n, h * dh))


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int, out: Optional[int] = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out or dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm1(x)
        x = x + self.attn(y, y, y)
        return x + self.mlp(self.norm2(x))


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        j = cfg.token_dim
        self.input_norm = nn.LayerNorm(j)
        self.row_embed = nn.Parameter(torch.randn(cfg.max_grid, j) * 0.02)
        self.col_embed = nn.Parameter(torch.randn(cfg.max_grid, j) * 0.02)
        self.blocks = nn.ModuleList(EncoderBlock(j, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.encoder_depth))
        self.neck = nn.Linear(j, j)
        # no bias: features stay zero-mean across channels so cosine similarity is not
        # swamped by a shared offset
        self.neck_norm = nn.LayerNorm(j, bias=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """(rows, cols, j) or (B, rows, cols, j) tokens -> features of the same shape."""
        squeeze = tokens.ndim == 3
        if squeeze:
            tokens = tokens[None]
        b, rows, cols, j = tokens.shape
        if rows > self.row_embed.shape[0] or cols > self.col_embed.shape[0]:
            raise ShapeError(f"token grid {rows}x{cols} exceeds max_grid {self.row_embed.shape[0]}")
        pos = self.row_embed[:rows, None, :] + self.col_embed[None, :cols, :]
        x = (self.input_norm(tokens) + pos).reshape(b, rows * cols, j)
        for blk in self.blocks:
            x = blk(x)
        x = self.neck_norm(self.neck(x)).reshape(b, rows, cols, j)
        return x[0] if squeeze else x


def sinusoidal_code(xn: torch.Tensor, yn: torch.Tensor, dim: int) -> torch.Tensor:
    """Sin/cos code of normalised coordinates; ``dim/4`` geometric frequencies per axis."""
    nf = dim // 4
    freqs = 2.0 ** torch.linspace(0.0, 5.0, nf, dtype=xn.dtype) * math.pi
    ax = xn[..., None] * freqs
    ay = yn[..., None] * freqs
    return torch.cat([torch.sin(ax), torch.cos(ax), torch.sin(ay), torch.cos(ay)], dim=-1)


class PromptEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.dim = cfg.token_dim
        self.patch = cfg.patch
        # rows: background, foreground, padding slot
        self.polarity = nn.Embedding(3, cfg.token_dim)

    def forward(self, points: torch.Tensor, labels: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
        """points (B, P, 2) as (x, y) pixels, labels (B, P) in {1, 0, -1} -> (B, P, j)."""
        h, w = size
        dtype = self.polarity.weight.dtype
        pts = points.to(dtype)
        code = sinusoidal_code(pts[..., 0] / w, pts[..., 1] / h, self.dim)
        code = torch.where((labels == PADDING)[..., None], torch.zeros_like(code), code)
        return code + self.polarity(torch.where(labels == PADDING, 2, labels.long()))

    def dense_code(self, rows: int, cols: int, size: Tuple[int, int], dtype: torch.dtype) -> torch.Tensor:
        """Code of every token-cell centre, (rows*cols, j)."""
        h, w = size
        p = self.patch
        ys = (torch.arange(rows, dtype=dtype) * p + (p - 1) / 2.0) / h
        xs = (torch.arange(cols, dtype=dtype) * p + (p - 1) / 2.0) / w
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        return sinusoidal_code(xx.reshape(-1), yy.reshape(-1), self.dim)


class TwoWayBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.self_attn = Attention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.token_to_image = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio))
        self.norm3 = nn.LayerNorm(dim)
        self.image_to_token = Attention(dim, heads)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, queries, keys, query_pe, key_pe):
        q = queries + query_pe
        queries = self.norm1(queries + self.self_attn(q, q, queries))
        q = queries + query_pe
        k = keys + key_pe
        queries = self.norm2(queries + self.token_to_image(q, k, keys))
        queries = self.norm3(queries + self.mlp(queries))
        q = queries + query_pe
        keys = self.norm4(keys + self.image_to_token(k, q, queries))
        return queries, keys


class MaskDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        j = cfg.token_dim
        self.num_masks = cfg.masks_per_prompt
        self.patch = cfg.patch
        self.score_token = nn.Parameter(torch.randn(1, j) * 0.02)
        self.mask_tokens = nn.Parameter(torch.randn(cfg.masks_per_prompt, j) * 0.02)
        self.layers = nn.ModuleList(TwoWayBlock(j, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.decoder_depth))
        self.final_attn = Attention(j, cfg.heads)
        self.final_norm = nn.LayerNorm(j)
        self.pixel_proj = nn.Linear(j, j)
        self.hyper = nn.ModuleList(MLP(j, j) for _ in range(cfg.masks_per_prompt))
        self.score_head = MLP(j, j, cfg.masks_per_prompt)

    def forward(self, features: torch.Tensor, prompt_emb: torch.Tensor, image_pe: torch.Tensor,
                size: Tuple[int, int]) -> Tuple[torch.Tensor, torch.Tensor]:
        """features (rows, cols, j) shared by B prompt sets (B, P, j).

        Returns logits (B, M, h, w) and scores (B, M) in [0, 1].
        """
        rows, cols, j = features.shape
        b = prompt_emb.shape[0]
        out_tokens = torch.cat([self.score_token, self.mask_tokens], dim=0)
        queries = torch.cat([out_tokens.expand(b, -1, -1), prompt_emb], dim=1)
        query_pe = queries
        keys = features.reshape(1, rows * cols, j).expand(b, -1, -1)
        key_pe = image_pe[None]
        for layer in self.layers:
            queries, keys = layer(queries, keys, query_pe, key_pe)
        q = queries + query_pe
        queries = self.final_norm(queries + self.final_attn(q, keys + key_pe, keys))
        mask_out = queries[:, 1 : 1 + self.num_masks]
        hyper = torch.stack([mlp(mask_out[:, i]) for i, mlp in enumerate(self.hyper)], dim=1)  # (B, M, j)
        pix = self.pixel_proj(keys)  # (B, N, j)
        grid = (hyper @ pix.transpose(1, 2)).reshape(b, self.num_masks, rows, cols)
        up = F.interpolate(grid, scale_factor=self.patch, mode="bilinear", align_corners=False)
        h, w = size
        logits = up[:, :, :h, :w]
        scores = torch.sigmoid(self.score_head(queries[:, 0]))
        return logits, scores


class PromptableSegmenter(nn.Module):
    """Dictionaries + encoder + prompt encoder + decoder as one module."""

    def __init__(self, cfg: Optional[ModelConfig] = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.config = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        torch.manual_seed(cfg.seed)
        self.dict_k = WeightDictionary.key(cfg.patch, cfg.token_dim, anchors=cfg.key_anchors, generator=gen)
        self.dict_c = WeightDictionary.cube(cfg.patch, cfg.token_dim, generator=gen)
        self.image_encoder = ImageEncoder(cfg)
        self.prompt_encoder = PromptEncoder(cfg)
        self.mask_decoder = MaskDecoder(cfg)

    @property
    def dtype(self) -> torch.dtype:
        return self.dict_c.entries.dtype

    def embed(self, data, wavelengths: Sequence[float]) -> torch.Tensor:
        return channel_adaptive_embed(data, wavelengths, self.dict_k, self.dict_c,
                                      tolerance_nm=self.config.tolerance_nm)

    def encode_image(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.config.token_dim:
            raise ShapeError(f"token dim {tokens.shape[-1]} != configured {self.config.token_dim}")
        return self.image_encoder(tokens)

    def features(self, cube: HyperCube) -> torch.Tensor:
        return self.encode_image(self.embed(cube.data, cube.wavelengths))

    def encode_prompts(self, points, labels, size: Tuple[int, int]) -> torch.Tensor:
        points = torch.as_tensor(np.asarray(points), dtype=torch.float64)
        labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
        if points.ndim == 2:
            points, labels = points[None], labels[None]
        h, w = size
        real = labels != PADDING
        xs, ys = points[..., 0][real], points[..., 1][real]
        if ((xs < 0) | (xs >= w) | (ys < 0) | (ys >= h)).any():
            raise ValidationError(f"prompt point outside the {w}x{h} image")
        return self.prompt_encoder(points, labels, size)

    def decode_masks(self, features: torch.Tensor, prompt_emb: torch.Tensor,
                     size: Tuple[int, int]) -> Tuple[torch.Tensor, torch.Tensor]:
        rows, cols, j = features.shape
        if j != self.config.token_dim or prompt_emb.shape[-1] != j:
            raise ShapeError("feature / prompt dims do not match the model")
        p = self.config.patch
        if rows * p < size[0] or cols * p < size[1]:
            raise ShapeError(f"feature grid {rows}x{cols} too small for image {size}")
        image_pe = self.prompt_encoder.dense_code(rows, cols, size, features.dtype)
        return self.mask_decoder(features, prompt_emb, image_pe, size)

    def forward(self, data, wavelengths, points, labels) -> Tuple[torch.Tensor, torch.Tensor]:
        h, w = data.shape[:2]
        feats = self.encode_image(self.embed(data, wavelengths))
        return self.decode_masks(feats, self.encode_prompts(points, labels, (h, w)), (h, w))

    @torch.no_grad()
    def predict(self, cube: HyperCube, prompts: Sequence[PointPrompt],
                features: Optional[torch.Tensor] = None) -> MaskPrediction:
        feats = self.features(cube) if features is None else features
        pts = [[p.x, p.y] for p in prompts]
        lab = [FOREGROUND if p.foreground else BACKGROUND for p in prompts]
        emb = self.encode_prompts(pts, lab, (cube.height, cube.width))
        logits, scores = self.decode_masks(feats, emb, (cube.height, cube.width))
        return MaskPrediction(logits[0].double().numpy(), scores[0].double().numpy())


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(model: PromptableSegmenter, directory: Union[str, Path]) -> None:
    """Manifest ``model.json`` plus one little-endian float32 blob per parameter."""
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    registry = []
    for name, tensor in model.state_dict().items():
        fname = f"params/{name}.f32"
        (directory / fname).write_bytes(tensor.detach().cpu().numpy().astype("<f4").tobytes())
        registry.append({"name": name, "shape": list(tensor.shape), "file": fname})
    cfg = asdict(model.config)
    cfg["key_anchors"] = list(model.dict_k.keys)
    manifest = {"config": cfg, "parameters": registry}
    (directory / "model.json").write_text(json.dumps(manifest, indent=1))


def load_checkpoint(directory: Union[str, Path]) -> PromptableSegmenter:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "model.json").read_text())
        cfg = ModelConfig.from_json(manifest["config"])
        registry = manifest["parameters"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"{directory}: bad model manifest: {exc}") from exc
    model = PromptableSegmenter(cfg)
    state = {}
    for item in registry:
        raw = (directory / item["file"]).read_bytes()
        shape = tuple(item["shape"])
        if len(raw) != 4 * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"{item['file']}: size does not match shape {shape}")
        state[item["name"]] = torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(shape).copy())
    model.load_state_dict(state)
    return model
