"""Softmax-family and triplet losses with analytic gradients.

Class weights are a ``d x n`` matrix, one column per class. Angular losses
normalize embeddings and weight columns internally; inputs are never mutated.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from spheremetric.errors import ContractError
from spheremetric.numerics import DTYPE, Rng, draw_normal

LOSS_KINDS = ("softmax", "modified-softmax", "sphereface", "triplet")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "sphereface"
    m: int = 5
    s: float = 30.0
    triplet_margin: float = 0.2

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ContractError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if int(self.m) != self.m or self.m < 1:
            raise ContractError(f"margin m must be an integer >= 1, got {self.m}")
        if self.s <= 0:
            raise ContractError(f"scale s must be positive, got {self.s}")
        if self.triplet_margin <= 0:
            raise ContractError(f"triplet margin must be positive, got {self.triplet_margin}")
        if self.kind == "sphereface" and self.m < 4:
            warnings.warn(f"angular margin m={self.m} is below the usual m >= 4 range", stacklevel=3)

    @property
    def uses_class_weights(self) -> bool:
        return self.kind != "triplet"


def init_class_weights(rng: Rng, dim: int, n_classes: int) -> np.ndarray:
    return draw_normal(rng, (dim, n_classes), 0.0, math.sqrt(2.0 / dim))


def _segment(theta, m):
    return np.minimum(np.floor(m * np.asarray(theta) / math.pi), m - 1)


def psi(theta, m: int):
    """Monotone extension of cos(m*theta) over [0, pi]: (-1)^k cos(m theta) - 2k."""
    t = np.asarray(theta, dtype=DTYPE)
    if np.any(t < 0) or np.any(t > math.pi) or np.any(np.isnan(t)):
        raise ContractError("psi is defined for theta in [0, pi]")
    if int(m) != m or m < 1:
        raise ContractError(f"m must be an integer >= 1, got {m}")
    k = _segment(t, m)
    out = np.where(k % 2 == 0, 1.0, -1.0) * np.cos(m * t) - 2 * k
    return float(out) if out.ndim == 0 else out


def _chebyshev(c, m):
    """T_m(c) and U_{m-1}(c) by the three-term recurrence."""
    t_prev, t_cur = np.ones_like(c), c
    u_prev, u_cur = np.zeros_like(c), np.ones_like(c)  # U_{-1}, U_0
    for _ in range(m - 1):
        t_prev, t_cur = t_cur, 2 * c * t_cur - t_prev
        u_prev, u_cur = u_cur, 2 * c * u_cur - u_prev
    return t_cur, u_cur


def psi_of_cosine(c, m: int):
    """Psi and dPsi/dcos evaluated from the cosine, bounded at c = +-1."""
    c = np.clip(np.asarray(c, dtype=DTYPE), -1.0, 1.0)
    k = _segment(np.arccos(c), m)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    t_m, u_m1 = _chebyshev(c, m)
    return sign * t_m - 2 * k, sign * m * u_m1


def _check_labels(labels, n_rows, n_classes):
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise ContractError(f"expected {n_rows} labels, got shape {labels.shape}")
    if n_rows and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(f"labels must lie in [0, {n_classes})")
    return labels.astype(int)


def _cross_entropy(logits, labels):
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1)
    rows = np.arange(n)
    loss = float(np.mean(np.log(total) - shifted[rows, labels]))
    dlogits = exp / total[:, None]
    dlogits[rows, labels] -= 1.0
    return loss, dlogits / n


def softmax_loss(x, labels, W):
    """Plain softmax cross-entropy on unnormalized logits ``x @ W`` (no bias)."""
    x = np.asarray(x, dtype=DTYPE)
    W = np.asarray(W, dtype=DTYPE)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ContractError(f"incompatible embeddings {x.shape} and weights {W.shape}")
    labels = _check_labels(labels, x.shape[0], W.shape[1])
    loss, d = _cross_entropy(x @ W, labels)
    return loss, d @ W.T, x.T @ d


def _unit_rows(x, what):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    zero = np.flatnonzero(norms[:, 0] == 0)
    if zero.size:
        raise ContractError(f"{what} {int(zero[0])} has zero norm")
    return x / norms, norms


def _project_back(g_unit, unit, norms):
    # gradient through v -> v / |v|, row-wise
    return (g_unit - (g_unit * unit).sum(axis=1, keepdims=True) * unit) / norms


def angular_softmax_loss(x, labels, W, m: int, s: float):
    """Normalized-softmax loss whose target logit is ``s * psi(theta, m)``.

    ``m = 1`` gives the margin-free (modified) softmax.
    """
    x = np.asarray(x, dtype=DTYPE)
    W = np.asarray(W, dtype=DTYPE)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ContractError(f"incompatible embeddings {x.shape} and weights {W.shape}")
    if int(m) != m or m < 1:
        raise ContractError(f"m must be an integer >= 1, got {m}")
    if s <= 0:
        raise ContractError(f"s must be positive, got {s}")
    labels = _check_labels(labels, x.shape[0], W.shape[1])
    xh, xn = _unit_rows(x, "embedding")
    wh_t, wn_t = _unit_rows(W.T, "weight column")
    cos = np.clip(xh @ wh_t.T, -1.0, 1.0)
    rows = np.arange(x.shape[0])
    target_psi, target_dpsi = psi_of_cosine(cos[rows, labels], int(m))
    logits = s * cos
    logits[rows, labels] = s * target_psi
    loss, dlogits = _cross_entropy(logits, labels)
    dcos = s * dlogits
    dcos[rows, labels] *= target_dpsi
    gx = _project_back(dcos @ wh_t, xh, xn)
    gW = _project_back(dcos.T @ xh, wh_t, wn_t).T
    return loss, gx, gW


def sphereface_loss(x, labels, W, config: LossConfig):
    return angular_softmax_loss(x, labels, W, config.m, config.s)


def modified_softmax_loss(x, labels, W, s: float = 30.0):
    return angular_softmax_loss(x, labels, W, 1, s)


def mine_triplets(x, labels) -> np.ndarray:
    """Batch-hard mining on unit-normalized embeddings.

    For each anchor with at least one positive and one negative: the farthest
    same-class sample and the nearest other-class sample (first index on ties).
    Returns an ``(T, 3)`` int array of (anchor, positive, negative).
    """
    x = np.asarray(x, dtype=DTYPE)
    labels = np.asarray(labels)
    if len(x) == 0:
        return np.zeros((0, 3), dtype=int)
    xh, _ = _unit_rows(x, "embedding")
    sq = np.maximum(2.0 - 2.0 * (xh @ xh.T), 0.0)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    diff = labels[:, None] != labels[None, :]
    triples = []
    for a in range(len(x)):
        if not same[a].any() or not diff[a].any():
            continue
        p = int(np.argmax(np.where(same[a], sq[a], -np.inf)))
        n = int(np.argmin(np.where(diff[a], sq[a], np.inf)))
        triples.append((a, p, n))
    return np.array(triples, dtype=int).reshape(-1, 3)


def triplet_loss(x, triples, margin: float = 0.2, normalize: bool = True):
    """Mean hinge ``max(0, |a-p|^2 - |a-n|^2 + margin)`` over the given triples."""
    x = np.asarray(x, dtype=DTYPE)
    triples = np.asarray(triples, dtype=int).reshape(-1, 3)
    grad = np.zeros_like(x)
    if len(triples) == 0:
        return 0.0, grad
    if triples.min() < 0 or triples.max() >= len(x):
        raise ContractError("triplet index out of range")
    if normalize:
        e, norms = _unit_rows(x, "embedding")
    else:
        e = x
    a, p, n = (e[triples[:, i]] for i in range(3))
    hinge = ((a - p) ** 2).sum(axis=1) - ((a - n) ** 2).sum(axis=1) + margin
    active = (hinge > 0)[:, None]
    t = len(triples)
    ge = np.zeros_like(e)
    np.add.at(ge, triples[:, 0], active * 2 * (n - p) / t)
    np.add.at(ge, triples[:, 1], active * -2 * (a - p) / t)
    np.add.at(ge, triples[:, 2], active * 2 * (a - n) / t)
    loss = float(np.maximum(hinge, 0.0).mean())
    return loss, _project_back(ge, e, norms) if normalize else ge


def compute_loss(config: LossConfig, x, labels, W=None):
    """Dispatch on ``config.kind``; returns (loss, grad_x, grad_W or None)."""
    if config.kind == "softmax":
        return softmax_loss(x, labels, W)
    if config.kind == "modified-softmax":
        return angular_softmax_loss(x, labels, W, 1, config.s)
    if config.kind == "sphereface":
        return angular_softmax_loss(x, labels, W, config.m, config.s)
    triples = mine_triplets(x, labels)
    loss, gx = triplet_loss(x, triples, config.triplet_margin)
    return loss, gx, None
