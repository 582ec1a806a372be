"""Training objectives: NT-Xent, supervised contrastive, cross-entropy, and
the combined pretraining / fine-tuning losses built from them.

All entry points l2-normalize embeddings themselves; the cosine-similarity
formulas silently corrupt gradients otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models
from . import tensor as T
from .tensor import Tensor

SCHEMES = ("CL", "SCL", "SL", "SL+CL", "CL+SCL", "SL+SCL")

DEFAULT_TAU_CL = 0.5
DEFAULT_TAU_SCL = 0.1


class LossError(Exception):
    pass


@dataclass
class LossConfig:
    scheme: str = "CL"
    temperature: float | None = None  # None -> per-scheme default
    alpha: float = 0.5
    beta: float = 0.5
    combo_weights: tuple = (1.0, 1.0)  # per-constituent weights for combined schemes

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise LossError(f"unknown scheme {self.scheme!r}")
        if self.temperature is not None and self.temperature <= 0:
            raise LossError("temperature must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise LossError("alpha and beta must be non-negative")

    def tau(self, constituent: str) -> float:
        if self.temperature is not None:
            return self.temperature
        return DEFAULT_TAU_CL if constituent == "CL" else DEFAULT_TAU_SCL


def _check_tau(tau: float) -> None:
    if tau <= 0:
        raise LossError("temperature must be positive")


def _row_logsumexp(s: Tensor) -> Tensor:
    """Per-row log(sum(exp)), stabilized with a detached row max."""
    m = s.data.max(axis=1, keepdims=True)
    shifted = T.sub(s, Tensor(np.broadcast_to(m, s.shape).copy()))
    return T.add(T.log(T.tsum(T.exp(shifted), axis=1)), Tensor(m[:, 0]))


def nt_xent(z_a: Tensor, z_b: Tensor, tau: float) -> Tensor:
    """NT-Xent over 2n stacked embeddings; positive of i is its other view."""
    _check_tau(tau)
    if z_a.shape != z_b.shape or z_a.data.ndim != 2:
        raise LossError(f"nt_xent: incompatible shapes {z_a.shape}, {z_b.shape}")
    n = z_a.shape[0]
    z = T.l2_normalize_rows(T.concat_rows(z_a, z_b))
    s = T.scale(T.matmul(z, T.transpose(z)), 1.0 / tau)
    m = 2 * n
    self_mask = np.full((m, m), 0.0)
    np.fill_diagonal(self_mask, -1e9)
    s_masked = T.add(s, Tensor(self_mask))
    pos_idx = np.concatenate([np.arange(n) + n, np.arange(n)])
    pos_mask = np.zeros((m, m))
    pos_mask[np.arange(m), pos_idx] = 1.0
    pos = T.tsum(T.mul(s_masked, Tensor(pos_mask)), axis=1)
    return T.tmean(T.sub(_row_logsumexp(s_masked), pos))


def supcon(z: Tensor, y: np.ndarray, tau: float) -> Tensor:
    """Supervised contrastive loss; same-label others are positives.

    Anchors without positives are skipped; if no anchor has a positive the
    loss is undefined and an error is raised.
    """
    _check_tau(tau)
    if z.data.ndim != 2 or z.shape[0] < 2:
        raise LossError("supcon: need an (m, d) matrix with m >= 2")
    y = np.asarray(y)
    m = z.shape[0]
    if y.shape != (m,):
        raise LossError("supcon: label count mismatch")
    zn = T.l2_normalize_rows(z)
    s = T.scale(T.matmul(zn, T.transpose(zn)), 1.0 / tau)
    self_mask = np.zeros((m, m))
    np.fill_diagonal(self_mask, -1e9)
    s_masked = T.add(s, Tensor(self_mask))
    pos_mask = (y[:, None] == y[None, :]).astype(np.float64)
    np.fill_diagonal(pos_mask, 0.0)
    pos_counts = pos_mask.sum(axis=1)
    anchors = pos_counts > 0
    if not anchors.any():
        raise LossError("supcon: no anchor has a positive")
    lse = _row_logsumexp(s_masked)  # (m,)
    pos_sum = T.tsum(T.mul(s_masked, Tensor(pos_mask)), axis=1)
    # per-anchor mean log-ratio; weight vector folds in the 1/|P(i)| factor
    # and drops anchors without positives
    weights = np.where(anchors, 1.0 / np.maximum(pos_counts, 1.0), 0.0)
    counts_v = Tensor(np.where(anchors, pos_counts, 1.0))
    per_anchor = T.sub(T.mul(lse, counts_v), pos_sum)
    weighted = T.mul(per_anchor, Tensor(weights))
    return T.scale(T.tsum(weighted), 1.0 / float(anchors.sum()))


def cross_entropy(logits: Tensor, y: np.ndarray) -> Tensor:
    """Mean of -log softmax(logits)[y]."""
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise LossError("cross_entropy: need (n, C) logits with C >= 2")
    y = np.asarray(y)
    n, c = logits.shape
    if y.shape != (n,) or y.min() < 0 or y.max() >= c:
        raise LossError("cross_entropy: labels out of range")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0
    true_logit = T.tsum(T.mul(logits, Tensor(onehot)), axis=1)
    return T.tmean(T.sub(_row_logsumexp(logits), true_logit))


# ---------------------------------------------------------------------------
# model-level losses
# ---------------------------------------------------------------------------

def _embed(model, x: Tensor) -> Tensor:
    rep, _ = models.encode(model, x)
    return models.project(model, rep)


def contrastive_pair_loss(model, xa: Tensor, xb: Tensor, constituent: str,
                          y: np.ndarray | None, cfg: LossConfig) -> Tensor:
    """One contrastive term over a view pair, through encoder + head."""
    za = _embed(model, xa)
    zb = _embed(model, xb)
    tau = cfg.tau(constituent)
    if constituent == "CL":
        return nt_xent(za, zb, tau)
    if y is None:
        raise LossError("SCL constituent requires labels")
    z = T.concat_rows(za, zb)
    return supcon(z, np.concatenate([y, y]), tau)


def pretrain_loss(model, batch, cfg: LossConfig) -> Tensor:
    """alpha * L(x', x'') + beta * L(x, x_adv) for scheme CL or SCL."""
    if cfg.scheme not in ("CL", "SCL"):
        raise LossError(f"pretrain_loss: scheme must be CL or SCL, got {cfg.scheme}")
    if batch.x_prime is None or batch.x_double_prime is None:
        raise LossError("pretrain_loss: batch is missing augmented views")
    y = batch.y
    if cfg.scheme == "SCL" and y is None:
        raise LossError("pretrain_loss: SCL requires labels")
    terms = []
    if cfg.alpha != 0.0:
        clean = contrastive_pair_loss(model, batch.x_prime, batch.x_double_prime,
                                      cfg.scheme, y, cfg)
        terms.append(T.scale(clean, cfg.alpha))
    if cfg.beta != 0.0:
        if batch.x_adv is None:
            raise LossError("pretrain_loss: beta > 0 requires x_adv")
        adv = contrastive_pair_loss(model, batch.x, batch.x_adv, cfg.scheme, y, cfg)
        terms.append(T.scale(adv, cfg.beta))
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def _ce_through(model, x: Tensor, y: np.ndarray) -> Tensor:
    rep, _ = models.encode(model, x)
    return cross_entropy(models.classify(model, rep), y)


def finetune_loss(model, batch, cfg: LossConfig, mode: str) -> Tensor:
    """Fine-tuning objective; caller controls which parameters are tracked.

    standard   -> CE on clean inputs
    partial_at -> alpha*CE(x) + beta*CE(x_adv), encoder must stay frozen
    full_at    -> same sum, encoder updates allowed
    """
    if mode not in ("standard", "partial_at", "full_at"):
        raise LossError(f"unknown fine-tuning mode {mode!r}")
    if batch.y is None:
        raise LossError("finetune_loss: labels required")
    if mode == "standard":
        return _ce_through(model, batch.x, batch.y)
    if batch.x_adv is None:
        raise LossError(f"finetune_loss: {mode} requires x_adv")
    if mode == "partial_at" and not model.freeze_encoder:
        raise LossError("partial_at requires freeze_encoder=True")
    clean = T.scale(_ce_through(model, batch.x, batch.y), cfg.alpha)
    adv = T.scale(_ce_through(model, batch.x_adv, batch.y), cfg.beta)
    return T.add(clean, adv)


def combined_scheme_loss(model, batch, cfg: LossConfig) -> Tensor:
    """Equal-weight sum of constituent losses for SL+CL, CL+SCL, SL+SCL.

    CE runs through the classifier branch, contrastive constituents through
    the head branch, all in one joint graph.
    """
    if "+" not in cfg.scheme:
        raise LossError(f"combined_scheme_loss: {cfg.scheme} is not a combination")
    parts = cfg.scheme.split("+")
    weights = cfg.combo_weights
    if len(weights) != len(parts):
        raise LossError("combo_weights length must match the number of constituents")
    terms = []
    for part, w in zip(parts, weights):
        if w == 0.0:
            continue
        if part == "SL":
            if batch.y is None:
                raise LossError("SL constituent requires labels")
            terms.append(T.scale(_ce_through(model, batch.x, batch.y), w))
        else:
            if batch.x_prime is None or batch.x_double_prime is None:
                raise LossError(f"{part} constituent requires augmented views")
            loss = contrastive_pair_loss(model, batch.x_prime, batch.x_double_prime,
                                         part, batch.y, cfg)
            terms.append(T.scale(loss, w))
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total
