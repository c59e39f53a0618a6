"""Shard directories: cubes plus masks or scene truth, indexed by ``manifest.jsonl``.

Each manifest line is a JSON object::

    {"id": ..., "cube": "<id>.hsc", "cube_sha256": ...,
     "masks": "<id>.masks.json" | null, "masks_sha256": ...,
     "truth": "<id>.truth.json" | null, "truth_sha256": ...}
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Union

from .errors import FormatError
from .maskgen import MaskBank, load_bank, save_bank
from .spectral_io import HyperCube, SceneTruth, read_cube, read_truth, write_cube, write_truth
from .training import Sample

MANIFEST = "manifest.jsonl"


def sha256_file(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_shard(out_dir: Union[str, Path], shard_id: str, cube: HyperCube, bank: Optional[MaskBank] = None,
                truth: Optional[SceneTruth] = None) -> dict:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        entry: Dict[str, Optional[str]] = {"id": shard_id}
        cube_path = out / f"{shard_id}.hsc"
        write_cube(cube, cube_path)
        entry["cube"] = cube_path.name
        entry["cube_sha256"] = sha256_file(cube_path)
        for kind, obj, writer in (("masks", bank, save_bank), ("truth", truth, write_truth)):
            if obj is None:
                entry[kind] = None
                continue
            path = out / f"{shard_id}.{kind}.json"
            writer(obj, path)
            entry[kind] = path.name
            entry[f"{kind}_sha256"] = sha256_file(path)
        with open(out / MANIFEST, "a") as fh:
            fh.write(json.dumps(entry) + "\n")
    except OSError as exc:
        raise OSError(f"writing shard {shard_id!r} to {out}: {exc}") from exc
    return entry


def read_manifest(directory: Union[str, Path]) -> List[dict]:
    path = Path(directory) / MANIFEST
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            entries.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return entries


def iter_shards(directory: Union[str, Path], verify: bool = True) -> Iterator[dict]:
    """Yield ``{"id", "cube", "bank", "truth"}`` per manifest entry."""
    directory = Path(directory)
    for entry in read_manifest(directory):
        record = {"id": entry["id"], "bank": None, "truth": None}
        for kind in ("cube", "masks", "truth"):
            name = entry.get(kind)
            if not name:
                continue
            path = directory / name
            if verify and entry.get(f"{kind}_sha256") and sha256_file(path) != entry[f"{kind}_sha256"]:
                raise FormatError(f"{path}: checksum does not match the manifest")
            if kind == "cube":
                record["cube"] = read_cube(path)
            elif kind == "masks":
                record["bank"] = load_bank(path)
            else:
                record["truth"] = read_truth(path)
        yield record


def load_corpus(directory: Union[str, Path], include_background: bool = True) -> List[Sample]:
    """Training samples from a shard directory; truth sidecars win over mask banks."""
    samples = []
    for rec in iter_shards(directory):
        if rec["truth"] is not None:
            samples.append(Sample.from_truth(rec["cube"], rec["truth"], rec["id"], include_background))
        elif rec["bank"] is not None:
            samples.append(Sample(rec["cube"], list(rec["bank"].masks), rec["id"]))
        else:
            raise FormatError(f"shard {rec['id']} has neither masks nor truth")
    return samples
