"""Cosine concept scores and the linear bottleneck classifier."""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError

NORM_FLOOR = 1e-12


@dataclass
class Head:
    W: np.ndarray  # (n_classes, n_concepts)
    b: np.ndarray  # (n_classes,)

    @classmethod
    def zeros(cls, n_classes, n_concepts, dtype=np.float64):
        return cls(np.zeros((n_classes, n_concepts), dtype=dtype), np.zeros(n_classes, dtype=dtype))

    def astype(self, dtype):
        return Head(self.W.astype(dtype), self.b.astype(dtype))

    def copy(self):
        return Head(self.W.copy(), self.b.copy())


@dataclass
class PosNegSplit:
    pos_idx: np.ndarray
    neg_idx: np.ndarray

    @classmethod
    def from_class(cls, bank, y):
        return cls.from_positives(bank.positives(y), bank.n_concepts)

    @classmethod
    def from_positives(cls, pos, n):
        pos = np.unique(np.asarray(pos, dtype=np.int64))
        if pos.size and (pos[0] < 0 or pos[-1] >= n):
            raise DataError(f"positive index outside [0, {n})")
        mask = np.zeros(n, dtype=bool)
        mask[pos] = True
        return cls(pos, np.flatnonzero(~mask))

    @property
    def n(self):
        return self.pos_idx.size + self.neg_idx.size

    @property
    def mask(self):
        m = np.zeros(self.n, dtype=bool)
        m[self.pos_idx] = True
        return m


def cosine_parts(E, T):
    """Scores plus the norms needed by the backward pass.

    Works on ``(n, d_c)`` or batched ``(B, n, d_c)`` embeddings; ``T`` is
    always ``(n, d_c)``.
    """
    if E.shape[-2:] != T.shape:
        raise ShapeError(f"visual embeddings {E.shape[-2:]} and text embeddings {T.shape} disagree")
    en = np.linalg.norm(E, axis=-1)
    tn = np.linalg.norm(T, axis=-1)
    dot = np.sum(E * T, axis=-1)
    ok = (en >= NORM_FLOOR) & (tn >= NORM_FLOOR)
    denom = np.where(ok, en * tn, 1.0)
    s = np.where(ok, dot / denom, 0.0)
    return s, en, tn, ok


def concept_scores(E, T):
    """s_i = cos(e_i, t_i); a zero-norm side scores 0."""
    return cosine_parts(np.asarray(E), np.asarray(T))[0]


def cosine_backward(ds, E, T, s, en, tn, ok):
    """dL/dE given dL/ds for the batched cosine."""
    en_safe = np.where(ok, en, 1.0)
    tn_safe = np.where(ok, tn, 1.0)
    coef_t = np.where(ok, ds / (en_safe * tn_safe), 0.0)
    coef_e = np.where(ok, ds * s / en_safe**2, 0.0)
    return coef_t[..., None] * T - coef_e[..., None] * E


def logits(head, s):
    s = np.asarray(s)
    if s.shape[-1] != head.W.shape[1]:
        raise ShapeError(f"score vector length {s.shape[-1]} != head input size {head.W.shape[1]}")
    return s @ head.W.T + head.b


def predict(head, s):
    """Return ``(logits, y_hat)``; ties go to the lowest class index."""
    z = logits(head, s)
    return z, np.argmax(z, axis=-1)


def intervene(s, edits):
    """Copy of ``s`` with ``{concept index: value}`` edits, values clamped to [-1, 1]."""
    out = np.array(s, dtype=np.float64, copy=True)
    n = out.shape[-1]
    for idx, val in edits.items():
        idx = int(idx)
        if not 0 <= idx < n:
            raise DataError(f"intervention index {idx} outside [0, {n})")
        val = float(val)
        if np.isnan(val):
            raise DataError(f"intervention value for concept {idx} is NaN")
        out[..., idx] = min(1.0, max(-1.0, val))
    return out


def top_k(s, bank, k):
    """Top-k ``(index, text, score)`` sorted by score, ties by ascending index."""
    s = np.asarray(s)
    n = s.shape[0]
    if not 1 <= k <= n:
        raise DataError(f"k = {k} outside [1, {n}]")
    order = top_indices(s, k)
    texts = bank.concepts if bank is not None else [str(i) for i in range(n)]
    return [(int(i), texts[i], float(s[i])) for i in order]


def top_indices(s, k):
    return np.argsort(-np.asarray(s), kind="stable")[:k]
