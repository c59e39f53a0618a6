"""End-to-end demo: synth -> train -> task hc -> eval on the default demo scene.

    python scripts/demo.py --out demo_run

Every step goes through the ``specprompt`` command line, so each stage leaves
its artifacts and a run manifest under ``--out``. Prompts (one point per class)
are taken from the demo scene's ground truth.
"""
import argparse
import json
import sys
from pathlib import Path

import numpy as np

from specprompt.cli import main as cli
from specprompt.spectral_io import read_truth

# training corpus: default-looking scenes with a little noise; well separated materials
# shorten the early loss plateau, so a few epochs already give usable masks
CORPUS = {"num_classes": 4, "shapes_per_class": [1, 2], "size_range": [6, 22], "noise_sigma": 0.005,
          "spectral_separation": 30.0, "seed": 1000}
TRAIN = {"batch_size": 4, "masks_per_image": 8, "learning_rate": 1e-3, "channel_subset_range": [5, 20]}
NMS = {"grid_spacing": 4}


def run(args) -> int:
    code = cli(args)
    if code != 0:
        raise SystemExit(f"step {args[0]} failed with exit code {code}")
    return code


def class_prompts(truth, seed: int) -> dict:
    """One pixel per class, drawn from the class's pixels with a seeded generator."""
    rng = np.random.default_rng(seed)
    prompts = {}
    for c in np.unique(truth.class_map[truth.class_map > 0]).tolist():
        ys, xs = np.nonzero(truth.class_map == c)
        i = int(rng.integers(len(ys)))
        prompts[str(c)] = [[int(xs[i]), int(ys[i])]]
    return prompts


def main(argv=None) -> dict:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--scenes", type=int, default=1200, help="training scenes")
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ns = ap.parse_args(argv)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)

    (out / "corpus.json").write_text(json.dumps(dict(CORPUS, count=ns.scenes)))
    (out / "demo_scene.json").write_text(json.dumps({"count": 1}))  # SceneConfig defaults
    (out / "train.json").write_text(json.dumps({"train": dict(TRAIN, epochs=ns.epochs, seed=ns.seed)}))
    (out / "nms.json").write_text(json.dumps(NMS))

    run(["synth", "--config", str(out / "corpus.json"), "--out", str(out / "corpus")])
    run(["synth", "--config", str(out / "demo_scene.json"), "--out", str(out / "demo")])
    run(["train", "--config", str(out / "train.json"), "--corpus", str(out / "corpus"), "--out", str(out / "train")])

    truth_path = out / "demo" / "scene_00000.truth.json"
    task = {"task": "hc", "prompts": class_prompts(read_truth(truth_path), ns.seed)}
    (out / "task.json").write_text(json.dumps(task))
    run(["task", "hc", "--config", str(out / "task.json"), "--nms", str(out / "nms.json"),
         "--checkpoint", str(out / "train" / "checkpoint"), "--cube", str(out / "demo" / "scene_00000.hsc"),
         "--out", str(out / "task")])
    run(["eval", "--result", str(out / "task"), "--truth", str(truth_path), "--dataset", "demo",
         "--out", str(out / "eval")])
    metrics = json.loads((out / "eval" / "metrics.json").read_text())["hc"]["demo"]
    print(f"demo scene: OA {metrics['OA']:.3f}  AA {metrics['AA']:.3f}  KA {metrics['KA']:.3f}")
    return metrics


if __name__ == "__main__":
    main(sys.argv[1:])
