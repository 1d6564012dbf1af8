"""Finite-difference check of the analytic gradients.

``reference_loss`` recomputes the objective with plain loops and the
textbook formulas, sharing no code with the vectorised forward pass, and
central differences on it serve as the oracle.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import coat
from .cco import LossConfig, total_loss
from .rng import SplitMix64
from .scoring import Head
from .tensorio import ConceptBank

TOLERANCE = 1e-4
STEP = 1e-5
# below this magnitude errors are measured absolutely; central differences
# at STEP carry ~1e-10 of roundoff, so exact-zero partials need headroom
REL_FLOOR = 1e-5

DIMS = {
    "small": dict(max_n=4, max_d=8, max_dk=4, max_dc=4, max_np=3, max_batch=3),
    "tiny": dict(max_n=2, max_d=3, max_dk=2, max_dc=2, max_np=1, max_batch=2),
}


def reference_loss(feats, labels, Q, W_K, W_V, group_of, W, b, T, positives, lam, tau,
                   loss_mode="cco", tau_bce=1.0, use_global=True):
    total = 0.0
    dk = Q.shape[1]
    for x, y in zip(feats, labels):
        tokens = [list(row) for row in (x if use_global else x[1:])]
        keys = [[sum(t[a] * W_K[a][j] for a in range(len(t))) for j in range(dk)] for t in tokens]
        vals = [[sum(t[a] * W_V[a][j] for a in range(len(t))) for j in range(W_V.shape[1])] for t in tokens]
        per_query = []
        for q in Q:
            raw = [sum(kk[j] * q[j] for j in range(dk)) / math.sqrt(dk) for kk in keys]
            top = max(raw)
            w = [math.exp(r - top) for r in raw]
            z = sum(w)
            w = [v / z for v in w]
            per_query.append([sum(w[p] * vals[p][j] for p in range(len(w))) for j in range(len(vals[0]))])
        scores = []
        for i, g in enumerate(group_of):
            e, t = per_query[g], T[i]
            ne = math.sqrt(sum(v * v for v in e))
            nt = math.sqrt(sum(v * v for v in t))
            if ne < 1e-12 or nt < 1e-12:
                scores.append(0.0)
            else:
                scores.append(sum(a * c for a, c in zip(e, t)) / (ne * nt))
        logits = [sum(W[c][i] * scores[i] for i in range(len(scores))) + b[c] for c in range(len(b))]
        top = max(logits)
        ce = top + math.log(sum(math.exp(v - top) for v in logits)) - logits[y]
        pos = set(positives[y])
        concept = 0.0
        if loss_mode == "cco" and pos:
            num = sum(math.exp(scores[i] / tau) for i in pos)
            den = sum(math.exp(v / tau) for v in scores)
            concept = -math.log(num / den)
        elif loss_mode == "bce":
            terms = []
            for i, v in enumerate(scores):
                p = 1.0 / (1.0 + math.exp(-v / tau_bce))
                terms.append(-math.log(p) if i in pos else -math.log(1.0 - p))
            concept = sum(terms) / len(terms)
        total += ce + (lam * concept if loss_mode != "none" else 0.0)
    return total / len(labels)


@dataclass
class Instance:
    feats: np.ndarray
    labels: np.ndarray
    params: coat.CoatParams
    head: Head
    bank: ConceptBank


def random_instance(seed, dims="small"):
    lim = DIMS[dims]
    rng = SplitMix64(seed)

    def pick(lo, hi):
        return lo + int(rng.uniform(1)[0] * (hi - lo + 1))

    n = pick(1, lim["max_n"])
    d = pick(1, lim["max_d"])
    dk = pick(1, lim["max_dk"])
    dc = pick(1, lim["max_dc"])
    n_p = pick(1, lim["max_np"])
    n_classes = pick(1, n)
    batch = pick(1, lim["max_batch"])
    ratio = [1.0, 0.5][pick(0, 1)]
    params = coat.init_params(int(rng.next_u64(1)[0]), n, d, dk, dc, ratio)
    # spread queries and projections so attention is far from uniform
    params.Q *= 1.0 + 2.0 * rng.uniform(1)[0]
    head = Head(rng.normal((n_classes, n)), rng.normal(n_classes))
    T = rng.normal((n, dc))
    perm = rng.permutation(n)
    c2c = {y: sorted(int(c) for c in perm[y::n_classes]) for y in range(n_classes)}
    bank = ConceptBank([f"c{i}" for i in range(n)], T, [f"y{j}" for j in range(n_classes)], c2c)
    feats = rng.normal((batch, n_p + 1, d))
    labels = np.array([pick(0, n_classes - 1) for _ in range(batch)], dtype=np.int64)
    return Instance(feats, labels, params, head, bank)


def check_instance(inst, lam=0.5, tau=0.07, loss_mode="cco", step=STEP):
    """Largest relative error between analytic and finite-difference gradients."""
    cfg = LossConfig(lam=lam, tau=tau, precision="f64", loss_mode=loss_mode)
    _, grads, _ = total_loss((inst.feats, inst.labels), inst.params, inst.head, inst.bank, cfg)
    tensors = {
        "Q": inst.params.Q, "W_K": inst.params.W_K, "W_V": inst.params.W_V,
        "W": inst.head.W, "b": inst.head.b,
    }
    positives = inst.bank.class_to_concepts

    def loss():
        return reference_loss(inst.feats, inst.labels, tensors["Q"], tensors["W_K"], tensors["W_V"],
                              inst.params.group_of, tensors["W"], tensors["b"],
                              inst.bank.text_embeddings, positives, lam, tau, loss_mode)

    worst = 0.0
    for name, analytic in grads.items():
        arr = tensors[name]
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + step
            up = loss()
            arr[idx] = old - step
            down = loss()
            arr[idx] = old
            fd = (up - down) / (2.0 * step)
            a = analytic[idx]
            err = abs(a - fd) / max(abs(a), abs(fd), REL_FLOOR)
            worst = max(worst, err)
    return worst


def run(seed=0, count=50, dims="small", lam=0.5, tau=0.07, loss_mode="cco"):
    """Check ``count`` random instances; returns the max relative error per instance."""
    return [check_instance(random_instance(seed * 100003 + i, dims), lam, tau, loss_mode)
            for i in range(count)]
