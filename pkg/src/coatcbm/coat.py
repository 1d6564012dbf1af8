"""Concept-wise attention: learnable queries over frozen visual tokens.

Every query attends over the joint token set (global token first, then
patches) through shared key/value projections; concept ``i`` reads the
embedding of query ``group_of[i]``.  Functions accept a single feature
set ``(P, d)`` or a batch ``(B, P, d)``.
"""

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .rng import SplitMix64


@dataclass
class CoatParams:
    Q: np.ndarray        # (n_q, d_k)
    W_K: np.ndarray      # (d, d_k)
    W_V: np.ndarray      # (d, d_c)
    group_of: np.ndarray  # (n,) int, concept -> query

    @property
    def n_queries(self):
        return self.Q.shape[0]

    @property
    def n_concepts(self):
        return self.group_of.shape[0]

    @property
    def d_k(self):
        return self.Q.shape[1]

    def astype(self, dtype):
        return CoatParams(self.Q.astype(dtype), self.W_K.astype(dtype), self.W_V.astype(dtype),
                          self.group_of.copy())

    def copy(self):
        return CoatParams(self.Q.copy(), self.W_K.copy(), self.W_V.copy(), self.group_of.copy())

    def validate(self):
        nq, dk = self.Q.shape
        if self.W_K.shape[1] != dk:
            raise ShapeError(f"W_K has width {self.W_K.shape[1]}, queries have d_k = {dk}")
        if self.W_K.shape[0] != self.W_V.shape[0]:
            raise ShapeError("W_K and W_V disagree on the feature dimension")
        g = self.group_of
        if g.ndim != 1 or g.shape[0] < nq:
            raise DataError(f"group_of must map n >= n_q = {nq} concepts")
        if g.min() < 0 or g.max() >= nq:
            raise DataError("group_of references a query index out of range")
        if np.unique(g).shape[0] != nq:
            raise DataError("every query must serve at least one concept")
        for name in ("Q", "W_K", "W_V"):
            if not np.isfinite(getattr(self, name)).all():
                raise DataError(f"{name} contains non-finite values")


@dataclass
class AttentionTrace:
    alphas: np.ndarray      # (..., n_q, P)
    embeddings: np.ndarray  # (..., n, d_c)


def n_queries_for(n, group_ratio):
    return max(1, int(round(group_ratio * n)))


def group_map(n, n_q):
    """Concept ``i`` -> query ``floor(i * n_q / n)``."""
    return (np.arange(n, dtype=np.int64) * n_q) // n


def init_params(seed, n, d, d_k, d_c, group_ratio=1.0, dtype=np.float64):
    """Fan-in scaled Gaussian initialisation.

    Q has std ``1/sqrt(d_k)``; W_K and W_V have std ``1/sqrt(d)``.
    """
    for name, val in (("n", n), ("d", d), ("d_k", d_k), ("d_c", d_c)):
        if int(val) < 1:
            raise DataError(f"{name} must be positive, got {val}")
    if not 0.0 < group_ratio <= 1.0:
        raise DataError(f"group_ratio must lie in (0, 1], got {group_ratio}")
    n_q = n_queries_for(n, group_ratio)
    rng = SplitMix64(seed)
    Q = rng.normal((n_q, d_k)) / np.sqrt(d_k)
    W_K = rng.normal((d, d_k)) / np.sqrt(d)
    W_V = rng.normal((d, d_c)) / np.sqrt(d)
    return CoatParams(Q.astype(dtype), W_K.astype(dtype), W_V.astype(dtype), group_map(n, n_q))


def softmax(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def _check_inputs(Z, params):
    if Z.ndim not in (2, 3):
        raise ShapeError(f"features must be (P, d) or (B, P, d), got {Z.shape}")
    if Z.shape[-1] != params.W_K.shape[0]:
        raise ShapeError(f"feature dim {Z.shape[-1]} != projection input dim {params.W_K.shape[0]}")
    if Z.shape[-2] < 1:
        raise ShapeError("need at least one token")
    if not np.isfinite(Z).all():
        raise DataError("non-finite values in features")


def forward(Z, params, use_global=True, grouped=True):
    """Attention forward pass; returns ``(trace, cache)`` for backprop."""
    _check_inputs(Z, params)
    Zt = Z if use_global else Z[..., 1:, :]
    K = Zt @ params.W_K
    V = Zt @ params.W_V
    logits = (K @ params.Q.T) / math.sqrt(params.d_k)   # (..., P, n_q)
    alphas = softmax(np.swapaxes(logits, -1, -2))      # (..., n_q, P)
    Eq = alphas @ V                                     # (..., n_q, d_c)
    E = np.take(Eq, params.group_of, axis=-2) if grouped else Eq
    cache = {"Z": Zt, "K": K, "V": V, "alphas": alphas, "grouped": grouped}
    return AttentionTrace(alphas, E), cache


def attend(Z, params, use_global=True):
    trace, _ = forward(np.asarray(Z), params, use_global=use_global)
    return trace


def attend_ungrouped(Z, params, use_global=True):
    """Reference path that skips the concept->query lookup (needs n_q == n)."""
    if params.n_queries != params.n_concepts:
        raise DataError("ungrouped attention requires one query per concept")
    trace, _ = forward(np.asarray(Z), params, use_global=use_global, grouped=False)
    return trace


def backward(dE, params, cache):
    """Gradients of a scalar w.r.t. (Q, W_K, W_V) given ``dE = dL/dE``.

    ``dE`` is batched ``(B, n, d_c)``; returned gradients are summed over the
    batch with ``ndarray.sum(axis=0)``, so the reduction order depends only
    on the sample order.
    """
    Z, K, V, alphas = cache["Z"], cache["K"], cache["V"], cache["alphas"]
    if cache["grouped"]:
        dEq = np.empty(dE.shape[:-2] + (params.n_queries, dE.shape[-1]), dtype=dE.dtype)
        seen = np.zeros(params.n_queries, dtype=bool)
        # first write copies so that an identity map reproduces dE bit for bit
        for i, q in enumerate(params.group_of):
            if seen[q]:
                dEq[..., q, :] += dE[..., i, :]
            else:
                dEq[..., q, :] = dE[..., i, :]
                seen[q] = True
    else:
        dEq = dE
    scale = 1.0 / math.sqrt(params.d_k)
    dalpha = dEq @ np.swapaxes(V, -1, -2)                       # (B, n_q, P)
    dV = np.swapaxes(alphas, -1, -2) @ dEq                      # (B, P, d_c)
    dlogit = alphas * (dalpha - np.sum(dalpha * alphas, axis=-1, keepdims=True))
    dQ = (dlogit @ K * scale).sum(axis=0)                       # (n_q, d_k)
    dK = np.swapaxes(dlogit, -1, -2) @ params.Q * scale         # (B, P, d_k)
    Zt = np.swapaxes(Z, -1, -2)
    dW_K = (Zt @ dK).sum(axis=0)
    dW_V = (Zt @ dV).sum(axis=0)
    return dQ, dW_K, dW_V


def save_params(params, path, extra=None):
    from .tensorio import write_bundle

    bundle = {"Q": params.Q, "W_K": params.W_K, "W_V": params.W_V}
    if extra:
        bundle.update(extra)
    write_bundle(bundle, path)
    with open(os.path.join(path, "coat.json"), "w") as fh:
        json.dump({"group_of": [int(g) for g in params.group_of]}, fh)
        fh.write("\n")


def load_params(path):
    from .tensorio import _read_json, read_bundle

    bundle = read_bundle(path)
    meta = _read_json(os.path.join(path, "coat.json"))
    for key in ("Q", "W_K", "W_V"):
        if key not in bundle:
            raise DataError(f"{path}: missing parameter {key}")
    try:
        group_of = np.asarray([int(g) for g in meta["group_of"]], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}/coat.json: bad group_of") from exc
    params = CoatParams(bundle["Q"], bundle["W_K"], bundle["W_V"], group_of)
    params.validate()
    return params, bundle
