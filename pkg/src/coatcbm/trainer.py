"""AdamW training loop, best-validation checkpointing and evaluation."""

import hashlib
import json
import logging
import os
import shutil
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import coat
from .cco import LOSS_MODES, LossConfig, forward_scores, total_loss
from .errors import DataError, NumericError
from .rng import SplitMix64
from .scoring import Head
from .tensorio import check_compatible, load_concept_bank, read_bundle, save_concept_bank

logger = logging.getLogger(__name__)

_SHUFFLE_TAG = 0x5348


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    lam: float = 0.5
    tau: float = 1.0
    tau_bce: float = 1.0
    group_ratio: float = 1.0
    d_k: int = 64
    d_c: int = None  # None -> taken from the bank's text embeddings
    precision: str = "f32"
    eval_every: int = 1
    loss_mode: str = "cco"
    use_global: bool = True

    def validate(self):
        if not self.lr > 0:
            raise DataError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise DataError("betas must lie in [0, 1)")
        if not self.eps > 0:
            raise DataError("eps must be > 0")
        if not self.weight_decay >= 0:
            raise DataError("weight_decay must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise DataError("epochs >= 0, batch_size >= 1 and eval_every >= 1 are required")
        if self.loss_mode not in LOSS_MODES:
            raise DataError(f"loss_mode must be one of {LOSS_MODES}")
        self.loss_config()

    def loss_config(self, grouped=True):
        return LossConfig(lam=self.lam, tau=self.tau, tau_bce=self.tau_bce, precision=self.precision,
                          loss_mode=self.loss_mode, use_global=self.use_global, grouped=grouped)

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        if "betas" in data:
            data["beta1"], data["beta2"] = data.pop("betas")
        unknown = set(data) - known
        if unknown:
            raise DataError(f"train config: unknown keys {sorted(unknown)}")
        return cls(**data)


# -- optimiser -----------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def zeros_like(cls, tensors):
        return cls(0, {k: np.zeros_like(t) for k, t in tensors.items()},
                   {k: np.zeros_like(t) for k, t in tensors.items()})


NO_DECAY = frozenset({"b"})


def adamw_step(tensors, grads, state, cfg):
    """One in-place AdamW update of ``tensors`` (a name -> array dict).

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta); the
    bias ``b`` is not decayed.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}; step aborted")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, theta in tensors.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if name not in NO_DECAY:
            update = update + cfg.weight_decay * theta
        theta -= cfg.lr * update
    return tensors, state


# -- checkpoints -------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: coat.CoatParams
    head: Head
    config: TrainConfig
    epoch: int
    val_accuracy: float
    history: list = None

    @property
    def hash(self):
        return checkpoint_hash(self.params, self.head, self.config)


def _param_tensors(params, head):
    return {"Q": params.Q, "W_K": params.W_K, "W_V": params.W_V, "W": head.W, "b": head.b}


def checkpoint_hash(params, head, config):
    """SHA-256 over float32 parameter bytes, group map and canonical config JSON."""
    h = hashlib.sha256()
    for name, arr in sorted(_param_tensors(params, head).items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    h.update(np.asarray(params.group_of, dtype="<i8").tobytes())
    h.update(json.dumps(asdict(config), sort_keys=True).encode())
    return h.hexdigest()


def save_checkpoint(ckpt, path, bank=None):
    os.makedirs(path, exist_ok=True)
    coat.save_params(ckpt.params, path, extra={"head_W": ckpt.head.W, "head_b": ckpt.head.b})
    meta = {
        "epoch": ckpt.epoch,
        "val_accuracy": ckpt.val_accuracy,
        "config": asdict(ckpt.config),
        "hash": ckpt.hash,
    }
    if ckpt.history is not None:
        meta["history"] = ckpt.history
    with open(os.path.join(path, "checkpoint.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
    if bank is not None:
        bank_dir = os.path.join(path, "bank")
        if os.path.isdir(bank_dir):
            shutil.rmtree(bank_dir)
        save_concept_bank(bank, bank_dir)


def load_checkpoint(path):
    """Load ``(checkpoint, bank_or_None)``; the stored hash is verified."""
    from .tensorio import _read_json

    params, bundle = coat.load_params(path)
    for key in ("head_W", "head_b"):
        if key not in bundle:
            raise DataError(f"{path}: missing {key}")
    meta = _read_json(os.path.join(path, "checkpoint.json"))
    config = TrainConfig.from_dict(meta["config"])
    head = Head(bundle["head_W"], bundle["head_b"])
    if head.W.shape != (head.b.shape[0], params.n_concepts):
        raise DataError(f"{path}: head shape {head.W.shape} inconsistent with {params.n_concepts} concepts")
    ckpt = Checkpoint(params, head, config, int(meta["epoch"]), float(meta["val_accuracy"]), meta.get("history"))
    if meta.get("hash") != ckpt.hash:
        raise DataError(f"{path}: checkpoint hash mismatch (corrupt or edited files)")
    bank = None
    if os.path.isdir(os.path.join(path, "bank")):
        bank = load_concept_bank(os.path.join(path, "bank"))
    return ckpt, bank


# -- evaluation ----------------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    per_class_accuracy: list
    mean_pos_score: float
    mean_neg_score: float
    predictions: np.ndarray
    scores: np.ndarray

    @property
    def score_gap(self):
        return self.mean_pos_score - self.mean_neg_score


def compute_scores(features, params, bank, use_global=True, dtype=np.float64, chunk=256, grouped=True):
    T = np.asarray(bank.text_embeddings, dtype=dtype)
    p = params.astype(dtype)
    out = []
    for start in range(0, features.shape[0], chunk):
        feats = np.asarray(features[start:start + chunk], dtype=dtype)
        out.append(forward_scores(feats, p, T, use_global, grouped)[0])
    if not out:
        return np.zeros((0, bank.n_concepts), dtype=dtype)
    return np.concatenate(out, axis=0)


def evaluate(dataset, checkpoint, bank):
    check_compatible(dataset, bank)
    cfg = checkpoint.config
    s = compute_scores(dataset.features, checkpoint.params, bank, cfg.use_global, cfg.dtype)
    head = checkpoint.head.astype(cfg.dtype)
    pred = np.argmax(s @ head.W.T + head.b, axis=-1)
    labels = dataset.labels
    per_class = []
    for y in range(bank.n_classes):
        sel = labels == y
        per_class.append(float(np.mean(pred[sel] == y)) if sel.any() else float("nan"))
    pos = bank.positive_mask()[labels]
    acc = float(np.mean(pred == labels)) if len(labels) else float("nan")
    mean_pos = float(s[pos].mean()) if pos.any() else float("nan")
    mean_neg = float(s[~pos].mean()) if (~pos).any() else float("nan")
    return EvalResult(acc, per_class, mean_pos, mean_neg, pred, s)


def accuracy(dataset, params, head, bank, cfg, grouped=True):
    s = compute_scores(dataset.features, params, bank, cfg.use_global, cfg.dtype, grouped=grouped)
    pred = np.argmax(s @ head.W.T + head.b, axis=-1)
    return float(np.mean(pred == dataset.labels))


# -- training ------------------------------------------------------------------------

def train(train_set, val_set, bank, cfg, progress=None, grouped=True):
    """Train and return the best-validation checkpoint (earliest epoch on ties).

    ``grouped=False`` runs the reference path that skips the concept->query
    lookup; it requires ``group_ratio == 1``.
    """
    cfg.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise DataError("training and validation sets must be nonempty")
    check_compatible(train_set, bank)
    check_compatible(val_set, bank)
    if val_set.dim != train_set.dim:
        raise DataError("train and validation feature dims differ")
    d_c = bank.text_embeddings.shape[1]
    if cfg.d_c is not None and cfg.d_c != d_c:
        raise DataError(f"config d_c = {cfg.d_c} but bank text embeddings have width {d_c}")
    dtype = cfg.dtype
    loss_cfg = cfg.loss_config(grouped)
    params = coat.init_params(cfg.seed, bank.n_concepts, train_set.dim, cfg.d_k, d_c,
                              cfg.group_ratio, dtype=dtype)
    head = Head.zeros(bank.n_classes, bank.n_concepts, dtype=dtype)
    tensors = _param_tensors(params, head)
    state = AdamState.zeros_like(tensors)
    shuffle_rng = SplitMix64(cfg.seed).spawn(_SHUFFLE_TAG)
    feats = np.asarray(train_set.features, dtype=dtype)
    labels = train_set.labels

    def snapshot(epoch):
        acc = accuracy(val_set, params, head, bank, cfg, grouped)
        return Checkpoint(params.copy(), head.copy(), cfg, epoch, acc)

    best = snapshot(0)
    history = [{"epoch": 0, "val_accuracy": best.val_accuracy}]
    M = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(M)
        losses = []
        for start in range(0, M, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads, _ = total_loss((feats[idx], labels[idx]), params, head, bank, loss_cfg)
            adamw_step(tensors, dict(grads.items()), state, cfg)
            losses.append(loss)
        record = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            cand = snapshot(epoch)
            record["val_accuracy"] = cand.val_accuracy
            if cand.val_accuracy > best.val_accuracy:
                best = cand
        history.append(record)
        logger.info("epoch %d %s", epoch, record)
        if progress is not None:
            progress(record)
    best.history = history
    return best
