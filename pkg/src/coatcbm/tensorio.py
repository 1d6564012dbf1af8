"""On-disk formats: tensor bundles, datasets and concept banks.

A bundle is a directory holding ``manifest.json`` plus one headerless
little-endian float32 file per entry.  Datasets and concept banks are
bundles with a JSON sidecar.  Loaders check every invariant up front and
raise ``DataError`` naming the offending item; they never hand back a
half-valid object.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError

MANIFEST = "manifest.json"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


def _check_name(name):
    if not isinstance(name, str) or not name or "/" in name or "\\" in name or name in (".", ".."):
        raise DataError(f"invalid bundle entry name {name!r}")


def write_bundle(bundle, path):
    """Write a mapping ``name -> array`` as a tensor bundle directory.

    Values are cast to float32; NaN and Inf are stored verbatim.
    """
    os.makedirs(path, exist_ok=True)
    entries = []
    for name in sorted(bundle):
        _check_name(name)
        arr = np.ascontiguousarray(bundle[name], dtype=_LE_F32)
        if arr.ndim == 0:
            raise ShapeError(f"entry {name!r}: scalars are not supported, use shape (1,)")
        if any(dim <= 0 for dim in arr.shape):
            raise ShapeError(f"entry {name!r}: shape {arr.shape} has a non-positive dimension")
        filename = f"{name}.bin"
        with open(os.path.join(path, filename), "wb") as fh:
            fh.write(arr.tobytes(order="C"))
        entries.append({
            "name": name,
            "dtype": "f32",
            "shape": list(arr.shape),
            "byte_order": "little",
            "layout": "row-major",
            "file": filename,
            "count": int(arr.size),
        })
    manifest = {"format_version": FORMAT_VERSION, "entries": entries}
    with open(os.path.join(path, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def read_bundle(path):
    """Read a bundle directory back into ``{name: float32 array}``."""
    mpath = os.path.join(path, MANIFEST)
    if not os.path.isfile(mpath):
        raise DataError(f"missing {MANIFEST} in {path}")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
        entries = manifest["entries"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"unreadable manifest {mpath}: {exc}") from exc

    out = {}
    for entry in entries:
        try:
            name = entry["name"]
            dtype = entry["dtype"]
            shape = tuple(int(x) for x in entry["shape"])
            filename = entry["file"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed manifest entry {entry!r}") from exc
        _check_name(name)
        if name in out:
            raise DataError(f"duplicate bundle entry {name!r}")
        if dtype != "f32":
            raise DataError(f"entry {name!r}: unknown dtype {dtype!r}")
        if entry.get("byte_order", "little") != "little" or entry.get("layout", "row-major") != "row-major":
            raise DataError(f"entry {name!r}: only little-endian row-major data is supported")
        if not shape or any(dim <= 0 for dim in shape):
            raise ShapeError(f"entry {name!r}: invalid shape {list(shape)}")
        count = int(np.prod(shape))
        if "count" in entry and int(entry["count"]) != count:
            raise ShapeError(f"entry {name!r}: count {entry['count']} != product of shape {count}")
        fpath = os.path.join(path, filename)
        if os.path.basename(filename) != filename or not os.path.isfile(fpath):
            raise DataError(f"entry {name!r}: data file {filename!r} not found")
        size = os.path.getsize(fpath)
        if size != 4 * count:
            raise ShapeError(
                f"entry {name!r}: file holds {size} bytes, shape {list(shape)} needs {4 * count} (corrupt bundle)"
            )
        data = np.fromfile(fpath, dtype=_LE_F32).reshape(shape)
        out[name] = data.astype(np.float32)
    return out


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _read_json(path):
    if not os.path.isfile(path):
        raise DataError(f"missing {path}")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON in {path}: {exc}") from exc


@dataclass
class Dataset:
    """Frozen encoder features with labels.

    ``features`` has shape ``(M, n_patches + 1, dim)``; row 0 of every
    sample is the global token.
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    descriptions: list = None

    @property
    def n_patches(self):
        return self.features.shape[1] - 1

    @property
    def dim(self):
        return self.features.shape[2]

    def __len__(self):
        return self.features.shape[0]

    def subset(self, idx):
        desc = None if self.descriptions is None else [self.descriptions[i] for i in idx]
        return Dataset(self.features[idx], self.labels[idx], self.n_classes, desc)


def validate_dataset(ds, n_patches=None, dim=None):
    feats = ds.features
    if feats.ndim != 3:
        raise ShapeError(f"features must be 3-D (M, N_p+1, d), got shape {feats.shape}")
    if n_patches is not None and feats.shape[1] != n_patches + 1:
        raise ShapeError(
            f"feature tensors have {feats.shape[1]} rows, expected N_p+1 = {n_patches + 1} "
            "(row 0 must be the global token)"
        )
    if feats.shape[1] < 2:
        raise ShapeError("need a global token and at least one patch token")
    if dim is not None and feats.shape[2] != dim:
        raise ShapeError(f"feature dim {feats.shape[2]} != meta dim {dim}")
    labels = np.asarray(ds.labels)
    if labels.shape != (feats.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match {feats.shape[0]} samples")
    for i in range(labels.shape[0]):
        lab = labels[i]
        if not (0 <= lab < ds.n_classes):
            raise DataError(f"sample {i}: label {lab} outside [0, {ds.n_classes})")
    bad = np.flatnonzero(~np.isfinite(feats).all(axis=(1, 2)))
    if bad.size:
        raise DataError(f"sample {int(bad[0])}: non-finite feature values")
    if ds.descriptions is not None and len(ds.descriptions) != feats.shape[0]:
        raise DataError("descriptions length does not match sample count")


def save_dataset(ds, path):
    validate_dataset(ds)
    write_bundle({"features": ds.features, "labels": ds.labels.astype(np.float32)}, path)
    meta = {"n_patches": int(ds.n_patches), "dim": int(ds.dim), "n_classes": int(ds.n_classes)}
    if ds.descriptions is not None:
        meta["descriptions"] = list(ds.descriptions)
    _write_json(meta, os.path.join(path, "meta.json"))


def load_dataset(path):
    meta = _read_json(os.path.join(path, "meta.json"))
    try:
        n_patches = int(meta["n_patches"])
        dim = int(meta["dim"])
        n_classes = int(meta["n_classes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"meta.json in {path} needs integer n_patches, dim, n_classes") from exc
    if n_patches < 1 or dim < 1 or n_classes < 1:
        raise DataError(f"meta.json in {path}: sizes must be positive")
    bundle = read_bundle(path)
    for key in ("features", "labels"):
        if key not in bundle:
            raise DataError(f"dataset {path} lacks bundle entry {key!r}")
    raw = bundle["labels"]
    if raw.ndim != 1:
        raise ShapeError(f"labels must be 1-D, got shape {raw.shape}")
    for i, v in enumerate(raw):
        if not np.isfinite(v) or v != np.floor(v):
            raise DataError(f"sample {i}: label {v} is not integral")
    ds = Dataset(bundle["features"], raw.astype(np.int64), n_classes, meta.get("descriptions"))
    validate_dataset(ds, n_patches=n_patches, dim=dim)
    return ds


@dataclass
class ConceptBank:
    concepts: list
    text_embeddings: np.ndarray
    class_names: list
    class_to_concepts: dict = field(default_factory=dict)

    @property
    def n_concepts(self):
        return len(self.concepts)

    @property
    def n_classes(self):
        return len(self.class_names)

    def positives(self, y):
        return list(self.class_to_concepts[int(y)])

    def positive_mask(self):
        """Boolean matrix (n_classes, n_concepts); row y marks y's positives."""
        mask = np.zeros((self.n_classes, self.n_concepts), dtype=bool)
        for y, idx in self.class_to_concepts.items():
            mask[y, idx] = True
        return mask


def validate_bank(bank):
    n = len(bank.concepts)
    if n < 1:
        raise DataError("concept bank is empty")
    T = bank.text_embeddings
    if T.ndim != 2 or T.shape[0] != n:
        raise ShapeError(f"text_embeddings shape {T.shape} does not match {n} concepts")
    if not np.isfinite(T).all():
        raise DataError("text_embeddings contain non-finite values")
    keys = set(bank.class_to_concepts)
    if keys != set(range(len(bank.class_names))):
        raise DataError(f"class_to_concepts must cover classes 0..{len(bank.class_names) - 1} exactly")
    for y in range(len(bank.class_names)):
        idx = bank.class_to_concepts[y]
        if not idx:
            raise DataError(f"class {y}: empty positive concept list")
        if len(set(idx)) != len(idx):
            raise DataError(f"class {y}: duplicate concept indices {idx}")
        for c in idx:
            if not (0 <= c < n):
                raise DataError(f"class {y}: concept index {c} outside [0, {n})")


def save_concept_bank(bank, path):
    validate_bank(bank)
    write_bundle({"text_embeddings": bank.text_embeddings}, path)
    _write_json({
        "concepts": list(bank.concepts),
        "class_names": list(bank.class_names),
        "class_to_concepts": {str(k): [int(c) for c in v] for k, v in sorted(bank.class_to_concepts.items())},
    }, os.path.join(path, "bank.json"))


def load_concept_bank(path):
    meta = _read_json(os.path.join(path, "bank.json"))
    try:
        concepts = [str(c) for c in meta["concepts"]]
        class_names = [str(c) for c in meta["class_names"]]
        c2c = {}
        for k, v in meta["class_to_concepts"].items():
            y = int(k)
            if y in c2c:
                raise DataError(f"class {y} listed twice in class_to_concepts")
            c2c[y] = [int(c) for c in v]
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise DataError(f"bank.json in {path} is malformed: {exc}") from exc
    bundle = read_bundle(path)
    if "text_embeddings" not in bundle:
        raise DataError(f"bank {path} lacks bundle entry 'text_embeddings'")
    bank = ConceptBank(concepts, bundle["text_embeddings"], class_names, c2c)
    validate_bank(bank)
    return bank


def check_compatible(ds, bank):
    if ds.n_classes != bank.n_classes:
        raise DataError(f"dataset has {ds.n_classes} classes but the bank has {bank.n_classes}")
