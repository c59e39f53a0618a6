"""Command-line entry point.

Subcommands: synth, train, masks, task, engine, eval, dict. Each writes its
artifacts plus ``run_manifest.json`` into ``--out``. Exit codes: 0 success,
1 validation error (bad config, bad arguments, malformed input), 2 I/O error.
Logging verbosity comes from ``HYPERFREE_LOG`` (error, info or debug).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import plotting
from .backbone import ModelConfig, PromptableSegmenter, load_checkpoint, save_checkpoint
from .corpus import load_corpus, write_shard
from .errors import TrainingError, ValidationError
from .hyperseg import (EngineConfig, ExternalSegmenter, InternalSegmenter, StubSegmenter, area_histogram,
                       export_shard, run_engine)
from .maskgen import NMSConfig, auto_generate_masks, load_bank, save_bank
from .metrics import binary_iou, binary_prf, classification_metrics, roc_aucs, roc_curve
from .pmf import TaskConfig, run_hc, run_had, run_hcd, run_hocc, run_htd
from .spectral_io import SceneConfig, generate_change_pair, generate_scene, read_cube, read_map, read_truth, write_cube, write_map
from .training import TrainConfig, train

log = logging.getLogger("specprompt")

LOG_ENV = "HYPERFREE_LOG"


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunManifest:
    subcommand: str
    config: Optional[str]
    inputs: Dict[str, object]
    outputs: List[str]
    seed: Optional[int]
    started: float = 0.0
    wall_seconds: float = 0.0
    stages: Dict[str, float] = field(default_factory=dict)

    def write(self, out_dir: Path) -> None:
        (out_dir / "run_manifest.json").write_text(json.dumps(asdict(self), indent=1))


class _Stages:
    """Collects per-stage wall-clock timings."""

    def __init__(self):
        self.times: Dict[str, float] = {}

    def __call__(self, name: str):
        stages = self

        class _T:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                stages.times[name] = stages.times.get(name, 0.0) + time.perf_counter() - self.t

        return _T()


def _load_json(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return obj


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def _set_seed(seed: Optional[int]) -> None:
    if seed is not None:
        torch.manual_seed(seed)
        np.random.seed(seed % 2**32)


# --------------------------------------------------------------------------- synth


def _synth_one(args):
    scene_json, pairs = args
    cfg = SceneConfig.from_json(scene_json)
    if pairs:
        return generate_change_pair(cfg)
    return generate_scene(cfg)


def cmd_synth(ns, out: Path, stages: _Stages) -> List[str]:
    obj = _load_json(ns.config)
    count = int(obj.pop("count", ns.count))
    pairs = bool(obj.pop("change_pairs", ns.pairs))
    base = SceneConfig.from_json(obj)
    seed0 = base.seed if ns.seed is None else ns.seed
    if count < 1:
        raise ValidationError("count must be >= 1")
    jobs = [(dict(base.to_json(), seed=seed0 + i), pairs) for i in range(count)]
    with stages("generate"):
        if ns.jobs > 1:
            with ProcessPoolExecutor(ns.jobs) as pool:
                scenes = list(pool.map(_synth_one, jobs))
        else:
            scenes = [_synth_one(j) for j in jobs]
    manifest = out / "manifest.jsonl"
    if manifest.exists():
        manifest.unlink()
    outputs = [manifest.name]
    with stages("write"):
        for i, scene in enumerate(scenes):
            sid = f"scene_{i:05d}"
            if pairs:
                cube, cube2, truth = scene
                write_cube(cube2, out / f"{sid}_t2.hsc")
                outputs.append(f"{sid}_t2.hsc")
            else:
                cube, truth = scene
            entry = write_shard(out, sid, cube, truth=truth)
            outputs += [entry["cube"], entry["truth"]]
    _dump(dict(base.to_json(), seed=seed0, count=count, change_pairs=pairs), out / "scene_config.json")
    outputs.append("scene_config.json")
    print(f"wrote {count} scene(s) to {out}")
    return outputs


# --------------------------------------------------------------------------- train


def cmd_train(ns, out: Path, stages: _Stages) -> List[str]:
    obj = _load_json(ns.config)
    unknown = set(obj) - {"corpus", "model", "train", "init"}
    if unknown:
        raise ValidationError(f"unknown training config fields: {sorted(unknown)}")
    corpus_dir = ns.corpus or obj.get("corpus")
    if not corpus_dir:
        raise ValidationError("training needs a corpus directory (config 'corpus' or --corpus)")
    tcfg = TrainConfig.from_json(obj.get("train", {}))
    if ns.seed is not None:
        tcfg.seed = ns.seed
    if ns.epochs is not None:
        tcfg.epochs = ns.epochs
    init = ns.init or obj.get("init")
    if init:
        model = load_checkpoint(init)
    else:
        mcfg = ModelConfig.from_json(obj.get("model", {}))
        if ns.seed is not None:
            mcfg.seed = ns.seed
        model = PromptableSegmenter(mcfg)
    with stages("load"):
        corpus = load_corpus(corpus_dir, include_background=tcfg.include_background)
    log_path = out / "train_log.jsonl"
    if log_path.exists():
        log_path.unlink()
    with stages("train"):
        history = train(model, corpus, tcfg, log_path)
    ckpt = out / "checkpoint"
    with stages("save"):
        save_checkpoint(model, ckpt)
        _dump({"train": asdict(tcfg)}, out / "train_config.json")
        plotting.plot_training([h.as_dict() for h in history], out / "training_loss.png")
    print(f"trained {len(history)} epoch(s) on {len(corpus)} scenes; checkpoint in {ckpt}")
    return ["checkpoint/model.json", log_path.name, "train_config.json", "training_loss.png"]


# --------------------------------------------------------------------------- masks / task


def _features_and_bank(model, cube, nms: NMSConfig, masks_path: Optional[str], stages: _Stages):
    with stages("features"), torch.no_grad():
        feats = model.features(cube)
    if masks_path:
        bank = load_bank(masks_path)
        if bank.shape != (cube.height, cube.width):
            raise ValidationError(f"mask bank {bank.shape} does not match cube {(cube.height, cube.width)}")
    else:
        with stages("masks"):
            bank = auto_generate_masks(model, cube, nms, features=feats)
    return feats, bank


def cmd_masks(ns, out: Path, stages: _Stages) -> List[str]:
    nms = NMSConfig.from_json(_load_json(ns.config))
    model = load_checkpoint(ns.checkpoint)
    cube = read_cube(ns.cube, normalize=ns.normalize)
    _, bank = _features_and_bank(model, cube, nms, None, stages)
    save_bank(bank, out / "masks.json")
    plotting.plot_area_histogram(area_histogram(bank.areas, cube.height * cube.width), out / "mask_areas.png")
    print(f"{bank.k} masks -> {out / 'masks.json'}")
    return ["masks.json", "mask_areas.png"]


def cmd_task(ns, out: Path, stages: _Stages) -> List[str]:
    obj = _load_json(ns.config)
    obj.setdefault("task", ns.task)
    if str(obj["task"]).lower() != ns.task:
        raise ValidationError(f"config task {obj['task']!r} does not match subcommand {ns.task!r}")
    tcfg = TaskConfig.from_json(obj)
    model = load_checkpoint(ns.checkpoint)
    cube = read_cube(ns.cube, normalize=ns.normalize)
    nms = NMSConfig.from_json(_load_json(ns.nms))
    feats, bank = _features_and_bank(model, cube, nms, ns.masks, stages)
    with stages("task"):
        if ns.task == "hc":
            result = run_hc(bank, feats, tcfg.prompts, tcfg.valid_score)
        elif ns.task == "hocc":
            pts = [p for c in sorted(tcfg.prompts) for p in tcfg.prompts[c]]
            result = run_hocc(bank, feats, pts, tcfg.tau, tcfg.valid_score)
            result.meta["target_class"] = sorted(tcfg.prompts)[0]
        elif ns.task == "htd":
            result = run_htd(cube.data, bank, feats, tcfg.spectrum, tcfg.tau, tcfg.valid_score)
        elif ns.task == "had":
            result = run_had(bank, tcfg.tau)
        else:
            if not ns.cube2:
                raise ValidationError("change detection needs --cube2")
            cube2 = read_cube(ns.cube2, normalize=ns.normalize)
            if (cube2.height, cube2.width) != (cube.height, cube.width):
                raise ValidationError("the two epochs have different spatial sizes")
            with torch.no_grad():
                feats2 = model.features(cube2)
            result = run_hcd(bank, feats, feats2, tcfg.tau)
    outputs = []
    for name, arr in result.maps().items():
        write_map(arr, out / f"{name}.hsc", name)
        outputs.append(f"{name}.hsc")
    summary = {"task": ns.task, "config": tcfg.to_json(), "masks": bank.k, "meta": _jsonable(result.meta)}
    _dump(summary, out / "summary.json")
    plotting.plot_maps(result.maps(), out / "maps.png", title=ns.task.upper())
    print(f"task {ns.task}: {bank.k} masks, maps {sorted(result.maps())}")
    return outputs + ["summary.json", "maps.png"]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


# --------------------------------------------------------------------------- engine


def cmd_engine(ns, out: Path, stages: _Stages) -> List[str]:
    cfg = EngineConfig.from_json(_load_json(ns.config))
    cube = read_cube(ns.cube, normalize=ns.normalize)
    kind = cfg.segmenter.get("kind", "internal")
    if kind == "internal":
        ckpt = ns.checkpoint or cfg.segmenter.get("checkpoint")
        if not ckpt:
            raise ValidationError("the internal segmenter needs --checkpoint")
        segmenter = InternalSegmenter(load_checkpoint(ckpt), cfg.nms)
    elif kind == "external":
        if "dir" not in cfg.segmenter:
            raise ValidationError("the external segmenter needs a 'dir'")
        segmenter = ExternalSegmenter(cfg.segmenter["dir"])
    else:
        seed = cfg.segmenter.get("seed", 0) if ns.seed is None else ns.seed
        segmenter = StubSegmenter(seed, cfg.segmenter.get("max_masks", 12))
    with stages("engine"):
        bank, stats = run_engine(cube, segmenter, cfg.nms, cfg.key_wavelengths_nm, cfg.tolerance_nm, ns.jobs)
    save_bank(bank, out / "masks.json")
    _dump(stats.as_dict(), out / "engine_stats.json")
    plotting.plot_area_histogram(stats.mask_area_histogram, out / "mask_areas.png")
    outputs = ["masks.json", "engine_stats.json", "mask_areas.png"]
    if ns.shard:
        export_shard(cube, bank, out / "shards", Path(ns.cube).stem)
        outputs.append("shards/manifest.jsonl")
    print(f"engine: groups {stats.per_group_mask_counts} -> {stats.merged_count} merged masks")
    return outputs


# --------------------------------------------------------------------------- eval


def cmd_eval(ns, out: Path, stages: _Stages) -> List[str]:
    result_dir = Path(ns.result)
    summary = json.loads((result_dir / "summary.json").read_text())
    task = summary["task"]
    truth = read_truth(ns.truth)
    maps = {}
    for path in sorted(result_dir.glob("*.hsc")):
        name, arr = read_map(path)
        maps[name] = arr
    dataset = ns.dataset or Path(ns.truth).stem
    figures = []
    if task == "hc":
        m = classification_metrics(maps["class_map"].astype(np.int64), truth.class_map, ignore_label=0)
        metrics = {"OA": m["OA"], "AA": m["AA"], "KA": m["Kappa"], "per_class": m["per_class"]}
    elif task in ("hocc", "htd"):
        target = ns.target_class or summary["meta"].get("target_class")
        if target is None:
            raise ValidationError(f"{task} evaluation needs --target-class")
        gt = truth.class_map == int(target)
        metrics = dict(binary_prf(maps["binary_map"] > 0.5, gt))
        if task == "htd" or "score_map" in maps:
            metrics.update(roc_aucs(maps["score_map"], gt))
            plotting.plot_roc({task: roc_curve(maps["score_map"], gt)}, out / "roc.png")
            figures.append("roc.png")
    elif task == "had":
        gt = truth.anomaly_map()
        metrics = roc_aucs(maps["anomaly_map"], gt)
        plotting.plot_roc({task: roc_curve(maps["anomaly_map"], gt)}, out / "roc.png")
        figures.append("roc.png")
    else:
        if truth.change_map is None:
            raise ValidationError("truth has no change map")
        pred = maps["change_map"] > 0.5
        metrics = {"IoU": binary_iou(pred, truth.change_map), **binary_prf(pred, truth.change_map)}
    report = {task: {dataset: metrics}}
    _dump(report, out / "metrics.json")
    print(json.dumps(report, sort_keys=True))
    return ["metrics.json"] + figures


# --------------------------------------------------------------------------- dict


def cmd_dict(ns, out: Path, stages: _Stages) -> List[str]:
    model = load_checkpoint(ns.checkpoint)
    report = {}
    for name, d in (("key", model.dict_k), ("cube", model.dict_c)):
        norms = d.entries.detach().double().reshape(len(d.keys), -1).norm(dim=1).numpy()
        report[name] = {"anchors_nm": d.keys, "entry_norms": norms.tolist(), "count": len(d.keys)}
        plotting.plot_dictionary(d.keys, norms, out / f"dictionary_{name}.png")
    _dump(report, out / "dictionary.json")
    print(f"key anchors: {len(model.dict_k.keys)}, cube keys: {len(model.dict_c.keys)}")
    return ["dictionary.json", "dictionary_key.png", "dictionary_cube.png"]


# --------------------------------------------------------------------------- wiring


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "masks": cmd_masks, "task": cmd_task,
    "engine": cmd_engine, "eval": cmd_eval, "dict": cmd_dict,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--jobs", type=int, default=1, help="worker bound for parallel stages")

    parser = _Parser(prog="specprompt", description="Tuning-free spectral segmentation pipeline")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic scenes")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--pairs", action="store_true", help="bi-temporal material-swap pairs")

    p = sub.add_parser("train", parents=[common], help="train the promptable model")
    p.add_argument("--corpus")
    p.add_argument("--init", help="start from an existing checkpoint")
    p.add_argument("--epochs", type=int)

    for name in ("masks", "task", "engine"):
        p = sub.add_parser(name, parents=[common], help={"masks": "automatic mask generation",
                                                         "task": "run a tuning-free task",
                                                         "engine": "group-composite mask engine"}[name])
        if name == "task":
            p.add_argument("task", choices=["hc", "hocc", "htd", "had", "hcd"])
            p.add_argument("--cube2", help="second epoch (hcd)")
            p.add_argument("--masks", help="precomputed mask bank instead of generating one")
            p.add_argument("--nms", help="NMS config JSON for mask generation")
        if name == "engine":
            p.add_argument("--shard", action="store_true", help="also export a training shard")
        p.add_argument("--checkpoint", required=name != "engine")
        p.add_argument("--cube", required=True)
        p.add_argument("--normalize", choices=["none", "minmax"], default="none")

    p = sub.add_parser("eval", parents=[common], help="score task maps against truth")
    p.add_argument("--result", required=True, help="directory written by 'task'")
    p.add_argument("--truth", required=True)
    p.add_argument("--dataset")
    p.add_argument("--target-class", type=int)

    p = sub.add_parser("dict", parents=[common], help="dictionary anchor and norm report")
    p.add_argument("--checkpoint", required=True)
    return parser


def _configure_logging() -> None:
    level = os.environ.get(LOG_ENV, "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"{LOG_ENV} must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        _configure_logging()
        ns = build_parser().parse_args(argv)
        if ns.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        out = Path(ns.out)
        out.mkdir(parents=True, exist_ok=True)
        _set_seed(ns.seed)
        stages = _Stages()
        started = time.time()
        t0 = time.perf_counter()
        outputs = COMMANDS[ns.command](ns, out, stages)
        inputs = {k: v for k, v in vars(ns).items() if k not in ("out", "config", "seed", "command") and v is not None}
        RunManifest(ns.command, ns.config, inputs, outputs, ns.seed, started,
                    time.perf_counter() - t0, stages.times).write(out)
        return 0
    except (ValidationError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
