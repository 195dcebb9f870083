import json

import numpy as np
import pytest

from slpkit import nnls
from slpkit.datasets import (
    GenConfig,
    gen_dataset,
    load_dataset,
    read_arrays,
    train_test_split,
    write_arrays,
)
from slpkit.modulation import build_constellation
from slpkit.precoding import cizf_optimal, cimmse_optimal


class TestArrayContainer:
    def test_roundtrip_dtypes(self, tmp_path):
        path = tmp_path / "t.slpd"
        arrays = {
            "f": np.arange(6, dtype=np.float64).reshape(2, 3),
            "c": np.array([1 + 2j, -3j]),
            "i": np.arange(4, dtype=np.int64),
        }
        write_arrays(path, arrays)
        loaded = read_arrays(path)
        for k in arrays:
            np.testing.assert_array_equal(loaded[k], arrays[k])
            assert loaded[k].dtype == arrays[k].dtype

    def test_magic_and_version(self, tmp_path):
        path = tmp_path / "t.slpd"
        write_arrays(path, {"x": np.zeros(1)})
        raw = path.read_bytes()
        assert raw[:4] == b"SLPD"
        assert int.from_bytes(raw[4:8], "little") == 1


class TestGenCizf:
    def test_manifest_counts_and_certification(self, tmp_path):
        cfg = GenConfig(scenario="cizf", k=2, n_tx=3, n_sym=4, n_train=8, n_test=2, seed=1)
        manifest = gen_dataset(cfg, tmp_path / "d")
        assert manifest["n_samples"] == 10
        assert manifest["n_train_samples"] == 8
        assert manifest["skipped"] == []
        man, arrays = load_dataset(tmp_path / "d")
        assert arrays["delta"].shape == (10, 2, 4, 2)
        assert np.all(arrays["delta"] >= 0)

    def test_byte_identical_reruns(self, tmp_path):
        cfg = GenConfig(scenario="cizf", k=2, n_tx=2, n_sym=3, n_train=4, n_test=2, seed=2)
        gen_dataset(cfg, tmp_path / "a", workers=1)
        gen_dataset(cfg, tmp_path / "b", workers=2)
        assert (tmp_path / "a/arrays.slpd").read_bytes() == (tmp_path / "b/arrays.slpd").read_bytes()
        assert (tmp_path / "a/manifest.json").read_text() == (tmp_path / "b/manifest.json").read_text()

    def test_label_replay(self, tmp_path):
        # oracle replay: re-solving a stored sample reproduces its label
        cfg = GenConfig(scenario="cizf", k=3, n_tx=3, n_sym=4, n_train=5, n_test=1, seed=3)
        gen_dataset(cfg, tmp_path / "d")
        _, arrays = load_dataset(tmp_path / "d")
        const = build_constellation("psk", 4)
        i = 2
        _, d, _ = cizf_optimal(arrays["h"][i], arrays["s_idx"][i], const, 1.0)
        np.testing.assert_allclose(d, arrays["delta"][i], atol=1e-9)

    def test_split_disjoint(self, tmp_path):
        cfg = GenConfig(scenario="cizf", k=2, n_tx=2, n_sym=2, n_train=6, n_test=3, seed=4)
        manifest = gen_dataset(cfg, tmp_path / "d")
        man, arrays = load_dataset(tmp_path / "d")
        train, test = train_test_split(man, arrays)
        assert train["h"].shape[0] == 6 and test["h"].shape[0] == 3
        # no shared channels across the split
        for ht in train["h"]:
            assert not np.any(np.all(np.isclose(test["h"], ht), axis=(1, 2)))


class TestGenCimmse:
    def test_snr_grid_expansion(self, tmp_path):
        cfg = GenConfig(
            scenario="cimmse", k=2, n_tx=3, n_sym=3, n_train=3, n_test=1,
            snr_grid_db=[0, 10, 20], seed=5,
        )
        manifest = gen_dataset(cfg, tmp_path / "d")
        assert manifest["n_samples"] == 12
        assert manifest["n_train_samples"] == 9
        man, arrays = load_dataset(tmp_path / "d")
        np.testing.assert_array_equal(np.unique(arrays["snr_db"]), [0, 10, 20])
        # channel shared across its grid rows
        np.testing.assert_array_equal(arrays["h"][0], arrays["h"][1])

    def test_label_replay(self, tmp_path):
        cfg = GenConfig(
            scenario="cimmse", k=2, n_tx=2, n_sym=3, n_train=2, n_test=1,
            snr_grid_db=[10], seed=6,
        )
        gen_dataset(cfg, tmp_path / "d")
        _, arrays = load_dataset(tmp_path / "d")
        const = build_constellation("psk", 4)
        sigma2 = 1.0 / 10.0
        _, d, _ = cimmse_optimal(arrays["h"][1], arrays["s_idx"][1], const, 1.0, sigma2)
        np.testing.assert_allclose(d, arrays["delta"][1], atol=1e-9)


class TestGenRobust:
    def test_arrays_and_certification(self, tmp_path):
        cfg = GenConfig(
            scenario="robust", k=2, n_tx=2, n_sym=3, n_train=3, n_test=1,
            snr_grid_db=[20, 30], alpha=0.95, fine_factor=2, seed=7,
        )
        manifest = gen_dataset(cfg, tmp_path / "d")
        assert manifest["n_samples"] == 8
        man, arrays = load_dataset(tmp_path / "d")
        assert arrays["psi"].shape == (8, 2, 3)
        assert np.all(arrays["psi"] > 0)
        assert arrays["v_t"].shape == (2, 4)
        assert np.all(arrays["delta"] >= 0)

    def test_split_excludes_container_arrays(self, tmp_path):
        cfg = GenConfig(
            scenario="robust", k=2, n_tx=2, n_sym=2, n_train=2, n_test=1,
            snr_grid_db=[25], alpha=0.95, seed=8,
        )
        manifest = gen_dataset(cfg, tmp_path / "d")
        man, arrays = load_dataset(tmp_path / "d")
        train, test = train_test_split(man, arrays)
        assert "v_t" not in train
        assert train["psi"].shape[0] == 2 and test["psi"].shape[0] == 1


def test_manifest_is_stable_json(tmp_path):
    cfg = GenConfig(scenario="cizf", k=2, n_tx=2, n_sym=2, n_train=2, n_test=1, seed=9)
    manifest = gen_dataset(cfg, tmp_path / "d")
    with open(tmp_path / "d/manifest.json") as fh:
        on_disk = json.load(fh)
    assert on_disk == json.loads(json.dumps(manifest))
    assert on_disk["arrays"] == sorted(on_disk["arrays"])
