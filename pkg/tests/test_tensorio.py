import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from coatcbm.errors import DataError, ShapeError
from coatcbm.tensorio import (
    ConceptBank,
    Dataset,
    load_concept_bank,
    load_dataset,
    read_bundle,
    save_concept_bank,
    save_dataset,
    write_bundle,
)


def test_one_is_golden_bytes(tmp_path):
    write_bundle({"x": np.ones((1, 1))}, tmp_path)
    # 1.0f = sign 0, exponent 127, mantissa 0 -> 0x3F800000, little-endian
    assert (tmp_path / "x.bin").read_bytes() == bytes([0x00, 0x00, 0x80, 0x3F])


def test_manifest_fields(tmp_path):
    write_bundle({"w": np.zeros((2, 3))}, tmp_path)
    entry = json.loads((tmp_path / "manifest.json").read_text())["entries"][0]
    assert entry == {"name": "w", "dtype": "f32", "shape": [2, 3], "byte_order": "little",
                     "layout": "row-major", "file": "w.bin", "count": 6}


def test_empty_bundle(tmp_path):
    write_bundle({}, tmp_path)
    assert json.loads((tmp_path / "manifest.json").read_text())["entries"] == []
    assert read_bundle(tmp_path) == {}


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 5)),
              elements=st.floats(allow_nan=False, width=32)))
def test_round_trip_bitwise(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("b")
    write_bundle({"a": arr, "b": arr[:1]}, path)
    back = read_bundle(path)
    assert back["a"].tobytes() == arr.tobytes()
    assert back["b"].tobytes() == arr[:1].tobytes()


def test_nan_and_inf_written_verbatim(tmp_path):
    arr = np.array([np.nan, np.inf, -np.inf, -0.0], dtype=np.float32)
    write_bundle({"v": arr}, tmp_path)
    assert read_bundle(tmp_path)["v"].tobytes() == arr.tobytes()


# -- malformed input catalogue ---------------------------------------------------------

def test_missing_manifest(tmp_path):
    with pytest.raises(DataError, match="manifest"):
        read_bundle(tmp_path)


def test_truncated_file(tmp_path):
    write_bundle({"x": np.arange(6.0).reshape(2, 3)}, tmp_path)
    data = (tmp_path / "x.bin").read_bytes()
    (tmp_path / "x.bin").write_bytes(data[:-4])
    with pytest.raises(ShapeError, match="corrupt"):
        read_bundle(tmp_path)


def test_unknown_dtype(tmp_path):
    write_bundle({"x": np.ones(2)}, tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["entries"][0]["dtype"] = "f64"
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DataError, match="unknown dtype"):
        read_bundle(tmp_path)


@pytest.mark.parametrize("name", ["", "a/b", "..", "x\\y"])
def test_bad_entry_names(tmp_path, name):
    with pytest.raises(DataError):
        write_bundle({name: np.ones(1)}, tmp_path)


def _dataset(m=4, n_patches=3, dim=2, n_classes=2):
    rng = np.random.default_rng(0)
    return Dataset(rng.standard_normal((m, n_patches + 1, dim)).astype(np.float32),
                   np.arange(m) % n_classes, n_classes)


def test_dataset_round_trip(tmp_path):
    ds = _dataset()
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert np.array_equal(back.features, ds.features)
    assert back.labels.tolist() == ds.labels.tolist()
    assert (back.n_patches, back.dim, back.n_classes) == (3, 2, 2)


def test_label_out_of_range(tmp_path):
    ds = _dataset()
    save_dataset(ds, tmp_path)
    write_bundle({"features": ds.features, "labels": np.array([0, 1, 2, 0], dtype=np.float32)}, tmp_path)
    with pytest.raises(DataError, match="sample 2"):
        load_dataset(tmp_path)


def test_non_integral_label(tmp_path):
    ds = _dataset()
    save_dataset(ds, tmp_path)
    write_bundle({"features": ds.features, "labels": np.array([0, 1, 0.5, 0], dtype=np.float32)}, tmp_path)
    with pytest.raises(DataError, match="integral"):
        load_dataset(tmp_path)


def test_missing_global_row(tmp_path):
    ds = _dataset()
    save_dataset(ds, tmp_path)
    write_bundle({"features": ds.features[:, 1:], "labels": ds.labels.astype(np.float32)}, tmp_path)
    with pytest.raises(ShapeError, match="global"):
        load_dataset(tmp_path)


def test_bank_round_trip_and_positive_count(tmp_path, tiny_bank):
    save_concept_bank(tiny_bank, tmp_path)
    bank = load_concept_bank(tmp_path)
    assert len(bank.positives(0)) == 2
    assert bank.positives(1) == [2]
    assert np.array_equal(bank.text_embeddings, tiny_bank.text_embeddings)


@pytest.mark.parametrize("c2c, msg", [
    ({"0": [0, 3], "1": [2]}, "concept index 3"),
    ({"0": [0, 0], "1": [2]}, "duplicate"),
    ({"0": [], "1": [2]}, "empty"),
    ({"0": [0]}, "cover classes"),
])
def test_bank_invariants(tmp_path, tiny_bank, c2c, msg):
    save_concept_bank(tiny_bank, tmp_path)
    meta = json.loads((tmp_path / "bank.json").read_text())
    meta["class_to_concepts"] = c2c
    (tmp_path / "bank.json").write_text(json.dumps(meta))
    with pytest.raises(DataError, match=msg):
        load_concept_bank(tmp_path)


def test_degenerate_bank_allowed(tmp_path):
    bank = ConceptBank(["only"], np.ones((1, 2)), ["a", "b"], {0: [0], 1: [0]})
    save_concept_bank(bank, tmp_path)
    assert load_concept_bank(tmp_path).n_concepts == 1


def test_failed_load_leaves_nothing_behind(tmp_path):
    os.makedirs(tmp_path / "ds")
    with pytest.raises(DataError):
        load_dataset(tmp_path / "ds")
