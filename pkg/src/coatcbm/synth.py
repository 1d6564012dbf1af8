"""Planted-concept synthetic data with known ground truth.

Each concept owns a unit direction in feature space and a unit text
embedding.  An image of class ``y`` hides ``planted_patches_per_concept``
copies of ``signal_scale * u_c`` (plus noise) among its patch tokens for
every positive concept ``c`` of ``y``.  The global token and all other
patches are pure noise, so a model can only succeed by attending to
patches.
"""

import json
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import DataError
from .rng import SplitMix64
from .tensorio import ConceptBank, Dataset, save_concept_bank, save_dataset


@dataclass
class SynthConfig:
    seed: int = 0
    n_classes: int = 10
    concepts_per_class: int = 5
    d: int = 32
    d_c: int = 16
    n_patches: int = 16
    train_per_class: int = 50
    test_per_class: int = 20
    val_per_class: int = None  # None -> 20% of train_per_class
    signal_scale: float = 2.0
    noise_std: float = 0.3
    planted_patches_per_concept: int = 3

    @property
    def n_concepts(self):
        return self.n_classes * self.concepts_per_class

    @property
    def val_count(self):
        if self.val_per_class is not None:
            return self.val_per_class
        return max(1, int(round(0.2 * self.train_per_class)))

    def validate(self):
        for name in ("n_classes", "concepts_per_class", "d", "d_c", "n_patches",
                     "planted_patches_per_concept"):
            if int(getattr(self, name)) < 1:
                raise DataError(f"synth config: {name} must be >= 1")
        for name in ("train_per_class", "test_per_class"):
            if int(getattr(self, name)) < 0:
                raise DataError(f"synth config: {name} must be >= 0")
        if self.val_per_class is not None and self.val_per_class < 0:
            raise DataError("synth config: val_per_class must be >= 0")
        if self.planted_patches_per_concept * self.concepts_per_class > self.n_patches:
            raise DataError(
                "synth config: planted_patches_per_concept * concepts_per_class "
                f"= {self.planted_patches_per_concept * self.concepts_per_class} exceeds n_patches = {self.n_patches}"
            )
        if not self.signal_scale > 0:
            raise DataError("synth config: signal_scale must be > 0")
        if not self.noise_std >= 0:
            raise DataError("synth config: noise_std must be >= 0")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise DataError(f"synth config: unknown keys {sorted(unknown)}")
        return cls(**data)


@dataclass
class GroundTruth:
    class_relevant: dict      # class index -> sorted concept indices
    image_relevant: dict      # split name -> list of concept-index lists, one per sample

    def to_json(self):
        return {
            "class_relevant": {str(k): v for k, v in sorted(self.class_relevant.items())},
            "image_relevant": self.image_relevant,
        }


def _unit_directions(rng, count, dim):
    raw = rng.normal((count, dim))
    if dim >= count:
        # Gram-Schmidt via QR: rows of the result are orthonormal
        q, r = np.linalg.qr(raw.T)
        signs = np.sign(np.diag(r))
        signs[signs == 0] = 1.0
        return (q * signs).T
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def _make_split(rng, cfg, u, c2c, per_class):
    n_tok = cfg.n_patches + 1
    feats = np.empty((per_class * cfg.n_classes, n_tok, cfg.d))
    labels = np.empty(per_class * cfg.n_classes, dtype=np.int64)
    k = cfg.planted_patches_per_concept
    i = 0
    for y in range(cfg.n_classes):
        for _ in range(per_class):
            z = cfg.noise_std * rng.normal((n_tok, cfg.d))
            slots = 1 + rng.permutation(cfg.n_patches)
            for j, c in enumerate(c2c[y]):
                z[slots[j * k:(j + 1) * k]] += cfg.signal_scale * u[c]
            feats[i] = z
            labels[i] = y
            i += 1
    return Dataset(feats.astype(np.float32), labels, cfg.n_classes)


def generate(cfg):
    """Build ``(train, val, test, bank, truth)`` deterministically from ``cfg``."""
    cfg.validate()
    rng = SplitMix64(cfg.seed)
    n = cfg.n_concepts
    u = _unit_directions(rng, n, cfg.d)
    t = _unit_directions(rng, n, cfg.d_c)
    cpc = cfg.concepts_per_class
    c2c = {y: list(range(y * cpc, (y + 1) * cpc)) for y in range(cfg.n_classes)}
    bank = ConceptBank(
        concepts=[f"class{c // cpc}_concept{c % cpc}" for c in range(n)],
        text_embeddings=t.astype(np.float32),
        class_names=[f"class{y}" for y in range(cfg.n_classes)],
        class_to_concepts=c2c,
    )
    train = _make_split(rng, cfg, u, c2c, cfg.train_per_class)
    val = _make_split(rng, cfg, u, c2c, cfg.val_count)
    test = _make_split(rng, cfg, u, c2c, cfg.test_per_class)
    truth = GroundTruth(
        class_relevant={y: list(v) for y, v in c2c.items()},
        image_relevant={name: [c2c[int(y)] for y in ds.labels]
                        for name, ds in (("train", train), ("val", val), ("test", test))},
    )
    return train, val, test, bank, truth


def relevance_rows(labels, class_relevant, n_concepts, n_classes):
    """Ground-truth relevance table rows ``(subject_type, subject_id, concept, flag)``."""
    rows = []
    for y in range(n_classes):
        pos = set(class_relevant[y])
        rows.extend(("class", y, c, int(c in pos)) for c in range(n_concepts))
    for i, y in enumerate(labels):
        pos = set(class_relevant[int(y)])
        rows.extend(("image", i, c, int(c in pos)) for c in range(n_concepts))
    return rows


def write_synth(cfg, out):
    """Write every split, the bank, ``truth.json`` and per-split relevance tables."""
    from .interp import write_relevance_table

    train, val, test, bank, truth = generate(cfg)
    os.makedirs(out, exist_ok=True)
    splits = {"train": train, "val": val, "test": test}
    for name, ds in splits.items():
        if len(ds):
            save_dataset(ds, os.path.join(out, name))
    save_concept_bank(bank, os.path.join(out, "bank"))
    with open(os.path.join(out, "truth.json"), "w") as fh:
        json.dump({"config": asdict(cfg), **truth.to_json()}, fh)
        fh.write("\n")
    for name, ds in splits.items():
        rows = relevance_rows(ds.labels, truth.class_relevant, bank.n_concepts, bank.n_classes)
        write_relevance_table(rows, os.path.join(out, f"relevance_{name}.csv"))
    return splits, bank, truth


def nearest_centroid_accuracy(train, test):
    """Accuracy of a nearest-centroid classifier on mean patch features.

    Independent of every learned component; used as a separability oracle.
    """
    def embed(ds):
        return ds.features[:, 1:, :].astype(np.float64).mean(axis=1)

    xtr, xte = embed(train), embed(test)
    classes = np.unique(train.labels)
    cents = np.stack([xtr[train.labels == y].mean(axis=0) for y in classes])
    d2 = ((xte[:, None, :] - cents[None, :, :]) ** 2).sum(axis=-1)
    pred = classes[np.argmin(d2, axis=1)]
    return float(np.mean(pred == test.labels))
