"""Training objectives and their exact gradients.

The concept contrastive loss treats all positive concepts of the true
class jointly against the negatives:

    L_cco = logsumexp(s / tau) - logsumexp(s[pos] / tau)

The total objective averages ``cross_entropy + lambda * concept_loss``
over the batch.  Gradients are derived by hand and checked against
central finite differences in the test suite.
"""

from dataclasses import dataclass, field

import numpy as np

from . import coat
from .errors import DataError, NumericError, ShapeError
from .scoring import cosine_backward, cosine_parts

LOSS_MODES = ("cco", "bce", "none")


@dataclass
class LossConfig:
    lam: float = 0.5
    tau: float = 1.0
    tau_bce: float = 1.0
    precision: str = "f32"
    loss_mode: str = "cco"
    use_global: bool = True
    grouped: bool = True  # False selects the reference path without the concept->query lookup

    def __post_init__(self):
        if not self.tau > 0 or not self.tau_bce > 0:
            raise DataError("temperatures must be positive")
        if not self.lam >= 0:
            raise DataError("lambda must be >= 0")
        if self.precision not in ("f32", "f64"):
            raise DataError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.loss_mode not in LOSS_MODES:
            raise DataError(f"loss_mode must be one of {LOSS_MODES}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


@dataclass
class GradientBundle:
    dQ: np.ndarray
    dW_K: np.ndarray
    dW_V: np.ndarray
    dW: np.ndarray
    db: np.ndarray

    def items(self):
        return [("Q", self.dQ), ("W_K", self.dW_K), ("W_V", self.dW_V), ("W", self.dW), ("b", self.db)]


@dataclass
class LossStats:
    skipped_no_positive: int = 0
    extra: dict = field(default_factory=dict)


def _as_mask(split, n):
    if hasattr(split, "mask"):
        return split.mask
    mask = np.asarray(split, dtype=bool)
    if mask.shape != (n,):
        raise ShapeError(f"positive mask shape {mask.shape} != ({n},)")
    return mask


# -- batched kernels: s (B, n), pos (B, n) bool --------------------------------

def _cco_batch(s, pos, tau):
    a = s / tau
    m = np.max(a, axis=-1, keepdims=True)
    e = np.exp(a - m)
    tot = np.sum(e, axis=-1)
    has_pos = pos.any(axis=-1)
    # positives get their own shift so they cannot all underflow
    ap = np.where(pos, a, -np.inf)
    mp = np.where(has_pos, np.max(ap, axis=-1), 0.0)
    ep = np.exp(ap - mp[:, None])
    pos_sum = np.where(has_pos, np.sum(ep, axis=-1), 1.0)
    loss = np.where(has_pos, (m[:, 0] - mp) + (np.log(tot) - np.log(pos_sum)), 0.0)
    grad = (e / tot[:, None] - ep / pos_sum[:, None]) / tau
    grad = np.where(has_pos[:, None], grad, 0.0)
    return loss, grad, int(np.sum(~has_pos))


def _bce_batch(s, pos, tau_bce):
    x = s / tau_bce
    n = s.shape[-1]
    # -log(sigmoid(x)) = logaddexp(0, -x); -log(1 - sigmoid(x)) = logaddexp(0, x)
    per = np.where(pos, np.logaddexp(0.0, -x), np.logaddexp(0.0, x))
    loss = per.mean(axis=-1)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    grad = (sig - pos) / (tau_bce * n)
    return loss, grad


def _ce_batch(z, y):
    m = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - m)
    tot = np.sum(e, axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(tot[:, 0])
    loss = lse - z[np.arange(z.shape[0]), y]
    grad = e / tot
    grad[np.arange(z.shape[0]), y] -= 1.0
    return loss, grad


# -- scalar API ----------------------------------------------------------------

def cco_loss(s, split, tau, stats=None):
    """Multi-positive contrastive loss for one score vector.

    With no positive concepts the term is skipped: returns 0 and bumps
    ``stats.skipped_no_positive`` when a ``LossStats`` is passed.
    """
    if not tau > 0:
        raise DataError("tau must be positive")
    s = np.asarray(s, dtype=np.float64)
    pos = _as_mask(split, s.shape[0])
    loss, _, skipped = _cco_batch(s[None], pos[None], tau)
    if stats is not None:
        stats.skipped_no_positive += skipped
    return float(loss[0])


def cls_loss(z, y):
    z = np.asarray(z, dtype=np.float64)
    if not 0 <= int(y) < z.shape[0]:
        raise DataError(f"label {y} outside [0, {z.shape[0]})")
    return float(_ce_batch(z[None], np.array([int(y)]))[0][0])


def bce_loss(s, split, tau_bce=1.0):
    if not tau_bce > 0:
        raise DataError("tau_bce must be positive")
    s = np.asarray(s, dtype=np.float64)
    pos = _as_mask(split, s.shape[0])
    return float(_bce_batch(s[None], pos[None], tau_bce)[0][0])


# -- full objective --------------------------------------------------------------

def _unpack(batch):
    if hasattr(batch, "features"):
        return batch.features, batch.labels
    feats, labels = batch
    return feats, labels


def forward_scores(features, params, bank_T, use_global=True, grouped=True):
    """Batched forward to concept scores; returns ``(s, trace, cache, cos_parts)``."""
    if not grouped and params.n_queries != params.n_concepts:
        raise ShapeError("the ungrouped path needs one query per concept")
    trace, cache = coat.forward(features, params, use_global=use_global, grouped=grouped)
    E = trace.embeddings
    parts = cosine_parts(E, bank_T)
    return parts[0], trace, cache, parts


def total_loss(batch, params, head, bank, cfg):
    """Mean over the batch of ``cls_loss + lam * concept_loss`` with gradients.

    Returns ``(loss, GradientBundle, stats)``.  Features and text
    embeddings are treated as constants.
    """
    feats, labels = _unpack(batch)
    dtype = cfg.dtype
    feats = np.asarray(feats, dtype=dtype)
    labels = np.asarray(labels, dtype=np.int64)
    if feats.ndim != 3 or feats.shape[0] == 0:
        raise ShapeError("batch must be a nonempty (B, P, d) feature array")
    if labels.shape != (feats.shape[0],):
        raise ShapeError("labels do not match the batch size")
    if head.W.shape != (bank.n_classes, bank.n_concepts) or params.n_concepts != bank.n_concepts:
        raise ShapeError("head / attention parameters do not match the concept bank")
    if labels.min() < 0 or labels.max() >= bank.n_classes:
        raise DataError("label outside the bank's class range")
    T = np.asarray(bank.text_embeddings, dtype=dtype)
    B = feats.shape[0]

    s, trace, cache, (_, en, tn, ok) = forward_scores(feats, params, T, cfg.use_global, cfg.grouped)
    z = s @ head.W.T + head.b
    ce, dz = _ce_batch(z, labels)
    per_sample = ce
    ds = np.zeros_like(s)
    stats = LossStats()
    concept = np.zeros_like(ce)
    use_concept = cfg.loss_mode != "none" and cfg.lam != 0
    if use_concept:
        pos = bank.positive_mask()[labels]
        if cfg.loss_mode == "cco":
            concept, dconcept, skipped = _cco_batch(s, pos, cfg.tau)
            stats.skipped_no_positive = skipped
        else:
            concept, dconcept = _bce_batch(s, pos, cfg.tau_bce)
        per_sample = ce + cfg.lam * concept
        ds = (cfg.lam / B) * dconcept

    bad = np.flatnonzero(~np.isfinite(per_sample))
    if bad.size:
        i = int(bad[0])
        raise NumericError(
            f"non-finite loss at batch sample {i}: ce={ce[i]!r}, concept={concept[i]!r}, "
            f"score range [{np.min(s[i])!r}, {np.max(s[i])!r}]"
        )
    loss = float(np.mean(per_sample))

    dz = dz / B
    dW = (dz[:, :, None] * s[:, None, :]).sum(axis=0)
    db = dz.sum(axis=0)
    ds = ds + dz @ head.W
    dE = cosine_backward(ds, trace.embeddings, T, s, en, tn, ok)
    dQ, dW_K, dW_V = coat.backward(dE, params, cache)
    grads = GradientBundle(dQ, dW_K, dW_V, dW, db)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    stats.extra = {
        "ce": float(np.mean(ce)),
        "concept": float(np.mean(concept)),
        "correct": int(np.sum(np.argmax(z, axis=-1) == labels)),
    }
    return loss, grads, stats
