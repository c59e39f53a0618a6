import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from specprompt.errors import (ConsistencyError, FormatError, GenerationError, TruncationError,
                               ValidationError)
from specprompt.spectral_io import (MAGIC, HyperCube, SceneConfig, SceneTruth, generate_change_pair,
                                    generate_scene, read_cube, read_map, read_truth, spectral_angle,
                                    write_cube, write_map, write_truth)


def _hsc_bytes(header: dict, payload: bytes) -> bytes:
    head = json.dumps(header).encode()
    return MAGIC + struct.pack("<I", len(head)) + head + payload


def test_round_trip_small(tmp_path):
    data = np.arange(12, dtype=np.float32).reshape(2, 2, 3) / 12
    cube = HyperCube(data, [450.0, 550.0, 650.0])
    write_cube(cube, tmp_path / "c.hsc")
    back = read_cube(tmp_path / "c.hsc")
    assert back == cube
    assert back.data.dtype == np.float32


def test_minimal_cube_layout(tmp_path):
    write_cube(HyperCube(np.full((1, 1, 1), 0.5), [500.0]), tmp_path / "m.hsc")
    raw = (tmp_path / "m.hsc").read_bytes()
    (hlen,) = struct.unpack("<I", raw[8:12])
    assert raw[:8] == MAGIC
    assert len(raw) == 12 + hlen + 4


def test_payload_is_band_sequential(tmp_path):
    data = np.zeros((2, 2, 2), np.float32)
    data[:, :, 0] = [[0.1, 0.2], [0.3, 0.4]]
    data[:, :, 1] = [[0.5, 0.6], [0.7, 0.8]]
    write_cube(HyperCube(data, [500.0, 600.0]), tmp_path / "c.hsc")
    raw = (tmp_path / "c.hsc").read_bytes()
    payload = raw[-32:]
    assert len(raw) - 12 - struct.unpack("<I", raw[8:12])[0] == 32
    np.testing.assert_array_equal(np.frombuffer(payload, "<f4"),
                                  np.float32([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]))


def test_46_band_file_built_by_hand(tmp_path):
    # written without write_cube, checked field by field
    rng = np.random.default_rng(3)
    wl = [650.0 + 10 * i for i in range(46)]
    bands = rng.random((46, 64, 64)).astype("<f4")
    header = {"height": 64, "width": 64, "bands": 46, "wavelengths_nm": wl, "dtype": "f32",
              "layout": "band_sequential"}
    (tmp_path / "c.hsc").write_bytes(_hsc_bytes(header, bands.tobytes()))
    cube = read_cube(tmp_path / "c.hsc")
    assert (cube.height, cube.width, cube.bands) == (64, 64, 46)
    assert list(cube.wavelengths) == wl
    for b in (0, 17, 45):
        np.testing.assert_array_equal(cube.data[:, :, b], bands[b])


def test_band_count_mismatch(tmp_path):
    header = {"height": 1, "width": 1, "bands": 3, "wavelengths_nm": [500, 600], "dtype": "f32"}
    (tmp_path / "c.hsc").write_bytes(_hsc_bytes(header, b"\0" * 12))
    with pytest.raises(ConsistencyError):
        read_cube(tmp_path / "c.hsc")


def test_truncated_payload(tmp_path):
    header = {"height": 2, "width": 2, "bands": 1, "wavelengths_nm": [500]}
    (tmp_path / "c.hsc").write_bytes(_hsc_bytes(header, b"\0" * 15))
    with pytest.raises(TruncationError):
        read_cube(tmp_path / "c.hsc")


def test_truncated_header(tmp_path):
    (tmp_path / "c.hsc").write_bytes(MAGIC + struct.pack("<I", 100) + b"{}")
    with pytest.raises(TruncationError):
        read_cube(tmp_path / "c.hsc")


@pytest.mark.parametrize("header,field", [
    ({"width": 1, "bands": 1, "wavelengths_nm": [500]}, "height"),
    ({"height": 1, "width": "1", "bands": 1, "wavelengths_nm": [500]}, "width"),
    ({"height": 1, "width": 1, "bands": 1, "wavelengths_nm": "500"}, "wavelengths_nm"),
])
def test_malformed_header_names_field(tmp_path, header, field):
    (tmp_path / "c.hsc").write_bytes(_hsc_bytes(header, b"\0" * 4))
    with pytest.raises(FormatError, match=field):
        read_cube(tmp_path / "c.hsc")


def test_bad_magic(tmp_path):
    (tmp_path / "c.hsc").write_bytes(b"NOTACUBE" + b"\0" * 8)
    with pytest.raises(FormatError):
        read_cube(tmp_path / "c.hsc")


def test_minmax_option(tmp_path):
    header = {"height": 1, "width": 2, "bands": 1, "wavelengths_nm": [500]}
    (tmp_path / "c.hsc").write_bytes(_hsc_bytes(header, np.float32([10, 30]).tobytes()))
    with pytest.raises(ValidationError):
        read_cube(tmp_path / "c.hsc")
    cube = read_cube(tmp_path / "c.hsc", normalize="minmax")
    np.testing.assert_array_equal(cube.data[0, :, 0], [0.0, 1.0])


@pytest.mark.parametrize("wl", [[500, 500], [399, 500], [500, 2501], [600, 500]])
def test_wavelength_invariants(wl):
    with pytest.raises(ValidationError):
        HyperCube(np.zeros((1, 1, 2)), wl)


def test_nan_rejected():
    with pytest.raises(ValidationError):
        HyperCube(np.full((1, 1, 1), np.nan), [500])


@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 6), st.integers(1, 8))
def test_round_trip_property(seed, h, w, n):
    import tempfile
    from pathlib import Path

    rng = np.random.default_rng(seed)
    wl = np.sort(rng.choice(np.arange(400, 2501), size=n, replace=False)).astype(float)
    cube = HyperCube(rng.random((h, w, n)).astype(np.float32), wl)
    with tempfile.TemporaryDirectory() as d:
        write_cube(cube, Path(d) / "c.hsc")
        assert read_cube(Path(d) / "c.hsc") == cube


def test_map_files(tmp_path):
    arr = np.array([[0, 3], [2, 1]])
    write_map(arr, tmp_path / "m.hsc", "class_map")
    name, back = read_map(tmp_path / "m.hsc")
    assert name == "class_map"
    np.testing.assert_array_equal(back, arr)
    write_cube(HyperCube(np.zeros((1, 1, 1)), [500]), tmp_path / "c.hsc")
    with pytest.raises(FormatError):
        read_map(tmp_path / "c.hsc")


# --------------------------------------------------------------------------- generator


def test_single_class_zero_noise_is_exact():
    cube, truth = generate_scene(SceneConfig(num_classes=1, seed=4))
    spec = truth.material_spectra[1].astype(np.float32)
    for m in truth.instance_masks:
        np.testing.assert_array_equal(cube.data[m], np.broadcast_to(spec, (m.sum(), cube.bands)))


def test_determinism():
    cfg = SceneConfig(noise_sigma=0.01, seed=9)
    c1, t1 = generate_scene(cfg)
    c2, t2 = generate_scene(cfg)
    assert c1 == c2
    assert json.dumps(t1.to_json()) == json.dumps(t2.to_json())


def test_separation_seed_42():
    _, truth = generate_scene(SceneConfig(num_classes=3, spectral_separation=15.0, seed=42))
    spectra = list(truth.material_spectra.values())
    for i in range(len(spectra)):
        for j in range(i + 1, len(spectra)):
            a, b = spectra[i], spectra[j]
            angle = np.degrees(np.arccos(a @ b / np.linalg.norm(a) / np.linalg.norm(b)))
            assert angle >= 15.0
            assert spectral_angle(a, b) == pytest.approx(angle)


def test_infeasible_separation():
    with pytest.raises(GenerationError):
        generate_scene(SceneConfig(num_classes=4, spectral_separation=85.0, seed=0))


def _components(mask):
    from scipy import ndimage

    return ndimage.label(mask)[1]


@pytest.mark.parametrize("seed", range(5))
def test_truth_invariants(seed):
    cube, truth = generate_scene(SceneConfig(num_classes=3, seed=seed, noise_sigma=0.02))
    cover = np.sum(truth.instance_masks, axis=0)
    assert np.array_equal(cover > 0, truth.class_map > 0)
    assert cover.max() <= 1
    for m, c in zip(truth.instance_masks, truth.instance_classes):
        assert _components(m) == 1
        assert np.all(truth.class_map[m] == c)
    for s in truth.material_spectra.values():
        assert s.shape == (cube.bands,) and s.min() >= 0 and s.max() <= 1
    assert cube.data.min() >= 0 and cube.data.max() <= 1


@pytest.mark.parametrize("seed", range(5))
def test_nearest_spectrum_labels(seed):
    cube, truth = generate_scene(SceneConfig(num_classes=3, seed=seed))
    labels = sorted(truth.material_spectra)
    spectra = np.stack([truth.material_spectra[c] for c in labels]).astype(np.float32)
    fg = truth.class_map > 0
    d = ((cube.data[fg][:, None, :] - spectra[None]) ** 2).sum(-1)
    np.testing.assert_array_equal(np.asarray(labels)[d.argmin(1)], truth.class_map[fg])


def test_truth_sidecar_round_trip(tmp_path):
    _, _, truth = generate_change_pair(SceneConfig(seed=2))
    write_truth(truth, tmp_path / "t.json")
    back = read_truth(tmp_path / "t.json")
    np.testing.assert_array_equal(back.class_map, truth.class_map)
    np.testing.assert_array_equal(back.change_map, truth.change_map)
    for a, b in zip(back.instance_masks, truth.instance_masks):
        np.testing.assert_array_equal(a, b)


def test_change_pair_swaps_one_instance():
    c1, c2, truth = generate_change_pair(SceneConfig(seed=11))
    changed = np.any(c1.data != c2.data, axis=2)
    np.testing.assert_array_equal(changed, truth.change_map)
    assert any(np.array_equal(truth.change_map, m) for m in truth.instance_masks)


def test_anomalies_are_labelled():
    _, truth = generate_scene(SceneConfig(num_classes=2, anomaly_count=3, seed=1))
    assert truth.anomaly_label == 3
    assert sum(1 for c in truth.instance_classes if c == 3) == 3
    assert truth.anomaly_map().sum() > 0


def test_scene_config_json_round_trip():
    cfg = SceneConfig(band_plan=[500.0, 700.0, 900.0], seed=3)
    back = SceneConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert list(back.wavelengths()) == [500.0, 700.0, 900.0]
    plan = SceneConfig.from_json({"band_plan": {"start_nm": 400, "step_nm": 10, "count": 5}})
    assert list(plan.wavelengths()) == [400, 410, 420, 430, 440]
    with pytest.raises(ValidationError):
        SceneConfig.from_json({"colour": 1})
    with pytest.raises(ValidationError):
        SceneConfig(noise_sigma=-1)
