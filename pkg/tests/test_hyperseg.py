import json

import numpy as np
import pytest

from oracles import nms_keep
from specprompt.backbone import ModelConfig, PromptableSegmenter
from specprompt.corpus import iter_shards, load_corpus, read_manifest, sha256_file
from specprompt.errors import EngineError, FormatError, ValidationError
from specprompt.hyperseg import (DEFAULT_KEY_WAVELENGTHS, EngineConfig, ExternalSegmenter, InternalSegmenter,
                                 StubSegmenter, area_histogram, composite_hash, export_shard,
                                 make_group_composites, match_key_bands, run_engine)
from specprompt.maskgen import MaskBank, NMSConfig, greedy_nms, save_bank
from specprompt.spectral_io import HyperCube, SceneConfig, generate_scene

WIDE = (400.0, 10.0, 211)  # 400..2500 nm


def wide_scene(seed, size=24):
    cfg = SceneConfig(height=size, width=size, band_plan=WIDE, size_range=(size // 5, size // 3), seed=seed)
    return generate_scene(cfg)[0]


class Fixed:
    def __init__(self, banks):
        self.banks = list(banks)
        self.calls = 0

    def __call__(self, image, wavelengths):
        bank = self.banks[self.calls % len(self.banks)]
        self.calls += 1
        return bank


def test_identity_assignment(rng):
    cube = HyperCube(rng.random((6, 5, 9)), DEFAULT_KEY_WAVELENGTHS)
    split = make_group_composites(cube)
    assert split.band_indices == [(0, 1, 2), (3, 4, 5), (6, 7, 8)]
    assert split.channel_assignment[1] == (655.0, 865.0, 1375.0)
    for comp in split.composites:
        assert comp.shape == (6, 5, 3) and comp.min() >= 0 and comp.max() <= 1


def test_constant_band_stretches_to_zero(rng):
    data = rng.random((6, 5, 9))
    data[:, :, 4] = 0.37
    split = make_group_composites(HyperCube(data, DEFAULT_KEY_WAVELENGTHS))
    assert np.all(split.composites[1][:, :, 1] == 0)
    assert split.composites[0][:, :, 0].max() == pytest.approx(1.0)


def test_out_of_range_keys_are_listed(rng):
    wl = 650.0 + 10.0 * np.arange(46)
    cube = HyperCube(rng.random((4, 4, 46)), wl)
    expected = [k for k in DEFAULT_KEY_WAVELENGTHS if np.min(np.abs(wl - k)) > 25.0]
    assert expected == [443.0, 482.5, 562.5, 1375.0, 1610.0, 2200.0, 2500.0]
    with pytest.raises(EngineError) as err:
        make_group_composites(cube)
    for k in expected:
        assert str(k) in str(err.value)
    with pytest.raises(ValidationError):
        make_group_composites(cube, DEFAULT_KEY_WAVELENGTHS[:8])


def test_key_matching_enforces_distinct_bands():
    matched, missing = match_key_bands([500.0, 505.0, 900.0], [501.0, 502.0, 503.0], tolerance_nm=10)
    assert matched == [0, 1] and missing == [503.0]


def test_empty_banks_give_zero_ratio():
    cube = wide_scene(1)
    merged, stats = run_engine(cube, Fixed([MaskBank.empty(24, 24)]))
    assert merged.k == 0 and stats.merged_count == 0 and stats.merge_ratio == 0.0
    assert stats.per_group_mask_counts == [0, 0, 0]


def test_identical_banks_merge_to_one():
    mask = np.zeros((1, 24, 24), bool)
    mask[0, 3:9, 4:12] = True
    cube = wide_scene(2)
    merged, stats = run_engine(cube, Fixed([MaskBank(mask, [0.9])]), NMSConfig(iou_threshold=0.7))
    assert stats.merged_count == 1 and stats.per_group_mask_counts == [1, 1, 1]
    assert stats.merge_ratio == pytest.approx(1.0)


def test_stub_engine_equals_nms_oracle():
    stub = StubSegmenter(seed=5)
    for seed in range(5):
        cube = wide_scene(seed)
        cfg = NMSConfig(iou_threshold=0.5, score_floor=0.0)
        merged, stats = run_engine(cube, stub, cfg)
        split = make_group_composites(cube)
        banks = [stub(c, wl) for c, wl in zip(split.composites, split.channel_assignment)]
        masks = np.concatenate([b.masks for b in banks])
        scores = np.concatenate([b.scores for b in banks])
        kept = nms_keep(list(masks), list(scores), 0.5)
        assert np.array_equal(merged.masks, masks[kept]) and np.array_equal(merged.scores, scores[kept])
        assert stats.per_group_mask_counts == [b.k for b in banks]


def test_engine_is_deterministic_and_parallel_safe():
    cube = wide_scene(9)
    a, sa = run_engine(cube, StubSegmenter(seed=1))
    b, sb = run_engine(cube, StubSegmenter(seed=1), jobs=3)
    assert np.array_equal(a.masks, b.masks) and np.array_equal(a.scores, b.scores)
    assert sa.as_dict() == sb.as_dict()
    assert sa.merged_count <= sum(sa.per_group_mask_counts)
    assert sum(sa.mask_area_histogram["counts"]) == sa.merged_count


def test_segmenter_failures_name_the_composite():
    cube = wide_scene(3)

    def broken(image, wavelengths):
        if wavelengths[0] > 1000:
            raise RuntimeError("boom")
        return MaskBank.empty(24, 24)

    with pytest.raises(EngineError, match="composite 2"):
        run_engine(cube, broken)
    with pytest.raises(EngineError, match="shape"):
        run_engine(cube, Fixed([MaskBank.empty(5, 5)]))


def test_internal_segmenter_runs_on_composites():
    model = PromptableSegmenter(ModelConfig(token_dim=16, heads=2, encoder_depth=1, decoder_depth=1))
    cube = wide_scene(4, size=16)
    merged, stats = run_engine(cube, InternalSegmenter(model, NMSConfig(score_floor=0.0)))
    assert merged.shape == (16, 16) and len(stats.per_group_mask_counts) == 3


def test_external_segmenter_reads_hash_keyed_banks(tmp_path):
    cube = wide_scene(6)
    split = make_group_composites(cube)
    stub = StubSegmenter(seed=2)
    for comp, wl in zip(split.composites, split.channel_assignment):
        save_bank(stub(comp, wl), tmp_path / f"{composite_hash(comp)}.json")
    ext, _ = run_engine(cube, ExternalSegmenter(tmp_path))
    ref, _ = run_engine(cube, stub)
    assert np.array_equal(ext.masks, ref.masks)
    with pytest.raises(EngineError, match="no precomputed"):
        run_engine(wide_scene(7), ExternalSegmenter(tmp_path))


def test_area_histogram_bins():
    hist = area_histogram(np.array([1, 2, 3, 4, 100]), 100)
    assert hist["bin_edges"][:4] == [1, 2, 4, 8]
    assert hist["counts"][:3] == [1, 2, 1] and sum(hist["counts"]) == 5


def test_export_and_reload(tmp_path):
    cube = wide_scene(8)
    bank, _ = run_engine(cube, StubSegmenter(seed=3))
    export_shard(cube, bank, tmp_path, "s0")
    export_shard(cube, MaskBank.empty(24, 24), tmp_path, "s1")
    recs = list(iter_shards(tmp_path))
    assert recs[0]["cube"] == cube
    assert np.array_equal(recs[0]["bank"].masks, bank.masks)
    assert recs[1]["bank"].k == 0
    samples = load_corpus(tmp_path)
    assert len(samples) == 2 and len(samples[1].masks) == 0


def test_ten_shards_with_manifest_hashes(tmp_path):
    for i in range(10):
        cube = wide_scene(100 + i, size=16)
        bank, _ = run_engine(cube, StubSegmenter(seed=i))
        export_shard(cube, bank, tmp_path, f"scene_{i:02d}")
    entries = read_manifest(tmp_path)
    assert [e["id"] for e in entries] == [f"scene_{i:02d}" for i in range(10)]
    for e in entries:
        assert sha256_file(tmp_path / e["cube"]) == e["cube_sha256"]
        assert sha256_file(tmp_path / e["masks"]) == e["masks_sha256"]
    assert len(list(iter_shards(tmp_path))) == 10
    with open(tmp_path / entries[3]["masks"], "a") as fh:
        fh.write(" ")
    with pytest.raises(FormatError, match="checksum"):
        list(iter_shards(tmp_path))


def test_engine_config_json():
    cfg = EngineConfig.from_json({"tolerance_nm": 10, "segmenter": {"kind": "stub", "seed": 1},
                                  "nms": {"iou_threshold": 0.6}})
    assert cfg.tolerance_nm == 10 and cfg.nms.iou_threshold == 0.6
    assert cfg.key_wavelengths_nm == DEFAULT_KEY_WAVELENGTHS
    with pytest.raises(ValidationError):
        EngineConfig.from_json({"segmenter": {"kind": "sam"}})
    with pytest.raises(ValidationError):
        EngineConfig.from_json({"keys": []})
    json.dumps(cfg.segmenter)
