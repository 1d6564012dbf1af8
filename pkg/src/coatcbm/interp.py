"""Interpretability metrics, relevance oracles and pattern-level exports.

CDR asks whether an image's top-N_i concepts are relevant to the image;
CC asks whether they are relevant to the predicted class.  ``N_i`` is the
size of the true class's positive set and ties in the ranking go to the
lower concept index.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .scoring import top_indices
from .trainer import compute_scores

SUBJECT_TYPES = ("image", "class")


# -- relevance tables and oracles -----------------------------------------------

def write_relevance_table(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_type", "subject_id", "concept_index", "relevant"])
        for kind, sid, c, flag in rows:
            w.writerow([kind, sid, int(c), int(flag)])


def read_relevance_table(path):
    """Parse a relevance CSV into ``{(kind, subject_id, concept): bool}``."""
    table = {}
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open relevance table {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        need = {"subject_type", "subject_id", "concept_index", "relevant"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DataError(f"{path}: header must contain {sorted(need)}")
        for lineno, row in enumerate(reader, start=2):
            kind = row["subject_type"].strip()
            if kind not in SUBJECT_TYPES:
                raise DataError(f"{path}:{lineno}: subject_type must be image or class, got {kind!r}")
            flag = row["relevant"].strip()
            if flag not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: relevant must be 0 or 1, got {flag!r}")
            try:
                key = (kind, row["subject_id"].strip(), int(row["concept_index"]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad concept_index") from exc
            table[key] = flag == "1"
    return table


class RelevanceOracle:
    """Answers R(subject, concept) from a table or a remote judge, with a cache.

    ``subject_id`` is the image id for ``kind="image"`` and the class index
    for ``kind="class"``; ids are compared as strings.
    """

    def __init__(self, table=None, judge=None, subject_text=None, concept_text=None):
        if (table is None) == (judge is None):
            raise ValueError("give exactly one of table or judge")
        self.table = table
        self.judge = judge
        self.subject_text = subject_text or {}
        self.concept_text = concept_text or {}
        self.cache = {}

    @classmethod
    def from_csv(cls, path):
        return cls(table=read_relevance_table(path))

    def __call__(self, kind, subject_id, concept):
        key = (kind, str(subject_id), int(concept))
        if key in self.cache:
            return self.cache[key]
        if self.table is not None:
            if key not in self.table:
                raise DataError(f"relevance table has no entry for {kind} {subject_id!r}, concept {concept}")
            ans = self.table[key]
        else:
            subject = self.subject_text.get((kind, str(subject_id)))
            if subject is None:
                raise DataError(f"no text description for {kind} {subject_id!r}")
            ans = self.judge.ask(kind, subject, self.concept_text[int(concept)])
        self.cache[key] = ans
        return ans


# -- metrics ------------------------------------------------------------------------

@dataclass
class EvalSet:
    image_ids: list
    labels: np.ndarray
    preds: np.ndarray
    scores: np.ndarray   # (L, n)
    n_pos: np.ndarray    # N_i per image

    def __len__(self):
        return len(self.image_ids)

    def validate(self):
        L, n = self.scores.shape
        if not (len(self.image_ids) == L == len(self.labels) == len(self.preds) == len(self.n_pos)):
            raise DataError("eval set fields disagree on the number of images")
        if L == 0:
            raise DataError("eval set is empty")
        bad = np.flatnonzero((self.n_pos < 1) | (self.n_pos > n))
        if bad.size:
            i = int(bad[0])
            raise DataError(f"image {self.image_ids[i]!r}: N_i = {self.n_pos[i]} outside [1, {n}]")


def build_eval_set(dataset, checkpoint, bank, image_ids=None):
    cfg = checkpoint.config
    s = compute_scores(dataset.features, checkpoint.params, bank, cfg.use_global, cfg.dtype)
    head = checkpoint.head.astype(cfg.dtype)
    preds = np.argmax(s @ head.W.T + head.b, axis=-1)
    ids = list(image_ids) if image_ids is not None else [str(i) for i in range(len(dataset))]
    n_pos = np.array([len(bank.positives(y)) for y in dataset.labels], dtype=np.int64)
    return EvalSet(ids, np.asarray(dataset.labels), preds, s, n_pos)


def _top_relevance(eval_set, oracle, subject_of):
    eval_set.validate()
    total = 0.0
    for i in range(len(eval_set)):
        k = int(eval_set.n_pos[i])
        top = top_indices(eval_set.scores[i], k)
        kind, sid = subject_of(i)
        hits = sum(bool(oracle(kind, sid, int(c))) for c in top)
        total += hits / k
    return total / len(eval_set)


def cdr(eval_set, bank, oracle):
    """Mean fraction of each image's top-N_i concepts relevant to the image."""
    return _top_relevance(eval_set, oracle, lambda i: ("image", eval_set.image_ids[i]))


def cc(eval_set, bank, oracle):
    """Mean fraction of each image's top-N_i concepts relevant to its predicted class."""
    return _top_relevance(eval_set, oracle, lambda i: ("class", int(eval_set.preds[i])))


# -- pattern-level views -------------------------------------------------------------

def assoc_map(test_set, checkpoint, bank):
    """Class x concept mean score over images of each true class.

    Returns ``(matrix, empty_classes)``; classes with no images get a NaN row.
    """
    cfg = checkpoint.config
    s = compute_scores(test_set.features, checkpoint.params, bank, cfg.use_global, cfg.dtype)
    out = np.full((bank.n_classes, bank.n_concepts), np.nan)
    empty = []
    for y in range(bank.n_classes):
        sel = test_set.labels == y
        if sel.any():
            out[y] = s[sel].astype(np.float64).mean(axis=0)
        else:
            empty.append(y)
    return out, empty


def block_contrast(matrix, bank):
    """Mean on-class association minus mean off-class association."""
    mask = bank.positive_mask()
    rows = ~np.isnan(matrix).any(axis=1)
    return float(matrix[rows][mask[rows]].mean() - matrix[rows][~mask[rows]].mean())


def write_matrix_csv(matrix, path, row_labels, col_labels, corner="class"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([corner] + list(col_labels))
        for lab, row in zip(row_labels, matrix):
            w.writerow([lab] + [repr(float(v)) for v in row])


def read_matrix_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def export_head(checkpoint, out_dir):
    """Write ``head_W.csv`` (class x concept) and ``head_b.csv`` at full precision."""
    os.makedirs(out_dir, exist_ok=True)
    W, b = checkpoint.head.W, checkpoint.head.b
    paths = (os.path.join(out_dir, "head_W.csv"), os.path.join(out_dir, "head_b.csv"))
    write_matrix_csv(W, paths[0], range(W.shape[0]), range(W.shape[1]))
    write_matrix_csv(b[:, None], paths[1], range(b.shape[0]), ["bias"])
    return paths


def head_overlap(W, bank):
    """Mean fraction of each class's N_y largest weights that fall on its own concepts."""
    fracs = []
    for y in range(bank.n_classes):
        pos = set(bank.positives(y))
        top = top_indices(W[y], len(pos))
        fracs.append(len(pos.intersection(int(c) for c in top)) / len(pos))
    return float(np.mean(fracs))
