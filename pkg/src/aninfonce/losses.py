"""InfoNCE, AnInfoNCE, the ensemble loss, and the Bayes-optimal loss oracle.

All losses take anchor and positive embeddings of shape (N, d) and either
explicit per-anchor negatives (N, M, d) or none, in which case negatives of
anchor i are the other anchors j != i.  Both may be combined (explicit hard
negatives appended to in-batch ones) with ``in_batch=True``.

Inputs may be ``Tensor``s recorded on a tape (the returned loss is then
differentiable) or plain arrays.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import InvalidArgumentError
from .rng import as_generator
from .sphere import as_diag, sample_conditional, sample_uniform_sphere


@dataclass
class LossValue:
    loss: "ad.Tensor | float"
    per_anchor: np.ndarray
    pos_similarity: float
    neg_similarity: float

    @property
    def value(self) -> float:
        return float(self.loss.data) if isinstance(self.loss, ad.Tensor) else float(self.loss)


def _prepare(*xs):
    tensors = [x for x in xs if isinstance(x, ad.Tensor)]
    if tensors:
        tape = tensors[0].tape
        return tape, [x if isinstance(x, ad.Tensor) or x is None else tape.constant(x) for x in xs], True
    tape = ad.GradientTape()
    return tape, [None if x is None else tape.constant(x) for x in xs], False


def _finish(per_anchor: ad.Tensor, pos, neg, differentiable: bool) -> LossValue:
    loss = per_anchor.mean()
    return LossValue(
        loss if differentiable else float(loss.data),
        per_anchor.data.copy(),
        float(np.mean(pos)),
        neg,
    )


def _assemble(pos_logit, inbatch_logits, explicit_logits):
    """Logit matrix: positive on the diagonal (in-batch) or in column 0."""
    if inbatch_logits is not None:
        logits = ad.set_diagonal(inbatch_logits, pos_logit)
        if explicit_logits is not None and explicit_logits.shape[1]:
            logits = ad.concat([logits, explicit_logits], axis=1)
        return logits
    parts = [pos_logit.reshape(-1, 1)]
    if explicit_logits is not None and explicit_logits.shape[1]:
        parts.append(explicit_logits)
    return ad.concat(parts, axis=1) if len(parts) > 1 else parts[0]


def _neg_mean(inbatch, explicit) -> float:
    total, count = 0.0, 0
    if inbatch is not None:
        n = inbatch.shape[0]
        total += float(inbatch.data.sum() - np.trace(inbatch.data))
        count += n * (n - 1)
    if explicit is not None:
        total += float(explicit.data.sum())
        count += explicit.data.size
    return total / count if count else float("nan")


def _offdiag_mean(x: np.ndarray) -> float:
    n = x.shape[0]
    return float(x.sum() - np.trace(x)) / (n * (n - 1)) if n > 1 else float("nan")


def _diag_xent(logits: np.ndarray):
    """In place: turn ``logits`` into row-softmax numerators; return the
    per-row ``logsumexp - diagonal`` and the row sums for the backward pass."""
    n = logits.shape[0]
    idx = np.arange(n)
    diag = logits[idx, idx].copy()
    m = logits.max(axis=1)
    logits -= m[:, None]
    np.exp(logits, out=logits)
    s = logits.sum(axis=1)
    return m + np.log(s) - diag, s


def _diag_xent_grad(e: np.ndarray, s: np.ndarray, g: np.ndarray) -> np.ndarray:
    """d(per-row loss)/d(logits) weighted by ``g``: g_i (softmax_ij - delta_ij)."""
    gl = e * (g / s)[:, None]
    idx = np.arange(e.shape[0])
    gl[idx, idx] -= g
    return gl


def _inbatch_aninfonce(a, p, lam) -> "ad.Tensor":
    """Fused per-anchor AnInfoNCE with in-batch negatives (anchors j != i).

    Same value as composing ``pairwise_weighted_sqdist``, ``set_diagonal``
    and ``logsumexp``, but with a single N x N buffer.
    """
    ad_, pd, ld = a.data, p.data, lam.data
    al = ad_ * ld
    sq = np.sum(al * ad_, axis=1)
    dpa = pd - ad_
    q_pos = np.sum(dpa * dpa * ld, axis=1)
    logits = al @ np.ascontiguousarray(ad_.T)
    logits *= 2.0
    logits -= sq[:, None]
    logits -= sq[None, :]
    idx = np.arange(logits.shape[0])
    logits[idx, idx] = -q_pos
    neg_mean = _offdiag_mean(logits)
    per_anchor, s = _diag_xent(logits)
    e = logits

    def vjp(g):
        gl = _diag_xent_grad(e, s, g)
        g_pos = -gl[idx, idx].copy()  # d/d q_pos
        gl[idx, idx] = 0.0
        # logits_ij = -D_ij off the diagonal; D symmetric in its two arguments
        rs = gl.sum(axis=1)
        cs = gl.sum(axis=0)
        ga = gl @ ad_ + gl.T @ ad_
        da = -2.0 * ld * (ad_ * (rs + cs)[:, None] - ga)
        dl = -((rs + cs) @ (ad_ * ad_) - np.sum(ad_ * ga, axis=0))
        gp = 2.0 * ld * dpa * g_pos[:, None]
        return da - gp, gp, dl + g_pos @ (dpa * dpa)

    return a.tape._record(per_anchor, (a, p, lam), vjp), -q_pos, neg_mean


def _inbatch_infonce(a, p, tau: float) -> "ad.Tensor":
    ad_, pd = a.data, p.data
    inv = 1.0 / tau
    logits = ad_ @ np.ascontiguousarray(ad_.T)
    logits *= inv
    idx = np.arange(logits.shape[0])
    pos = np.sum(ad_ * pd, axis=1) * inv
    logits[idx, idx] = pos
    neg_mean = _offdiag_mean(logits)
    per_anchor, s = _diag_xent(logits)
    e = logits

    def vjp(g):
        gl = _diag_xent_grad(e, s, g)
        g_pos = gl[idx, idx].copy() * inv
        gl[idx, idx] = 0.0
        da = (gl @ ad_ + gl.T @ ad_) * inv + g_pos[:, None] * pd
        return da, g_pos[:, None] * ad_

    return a.tape._record(per_anchor, (a, p), vjp), pos, neg_mean


def _check_shapes(a, p, n):
    if a.ndim != 2 or a.shape != p.shape:
        raise InvalidArgumentError(f"anchor {a.shape} / positive {p.shape} shapes differ")
    if n is not None and (n.ndim != 3 or n.shape[0] != a.shape[0] or n.shape[2] != a.shape[1]):
        raise InvalidArgumentError(f"negatives must have shape (N, M, d), got {n.shape}")


def infonce_loss(anchors, positives, negatives=None, tau: float = 1.0, in_batch: bool | None = None) -> LossValue:
    """Mean over anchors of ``-log softmax`` of ``<f(x), f(x~)> / tau`` at the positive."""
    if not tau > 0:
        raise InvalidArgumentError(f"temperature must be > 0, got {tau}")
    in_batch = negatives is None if in_batch is None else in_batch
    tape, (a, p, n), diff = _prepare(anchors, positives, negatives)
    _check_shapes(a, p, n)
    norms = np.linalg.norm(a.data, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        warnings.warn("infonce_loss expects unit-norm embeddings", stacklevel=2)
    if in_batch and n is None:
        return _finish(*_inbatch_infonce(a, p, tau), differentiable=diff)
    inv = 1.0 / tau
    pos = (a * p).sum(axis=1) * inv
    inbatch = (a @ a.T) * inv if in_batch else None
    explicit = None
    if n is not None:
        explicit = (n * a.reshape(a.shape[0], 1, a.shape[1])).sum(axis=2) * inv
    logits = _assemble(pos, inbatch, explicit)
    per_anchor = ad.logsumexp(logits, axis=1) - pos
    return _finish(per_anchor, pos.data, _neg_mean(inbatch, explicit), diff)


def _weighted_sq_to_anchor(a, x, lam):
    diff = x - a
    return (diff * diff * lam).sum(axis=-1)


def aninfonce_loss(anchors, positives, negatives=None, lam=None, in_batch: bool | None = None) -> LossValue:
    """Mean over anchors of ``-log softmax`` of ``-(f(x~) - f(x))^T L (f(x~) - f(x))``.

    ``lam`` is the materialized diagonal (a Tensor for training, or array).
    """
    if lam is None:
        raise InvalidArgumentError("aninfonce_loss needs a concentration diagonal")
    in_batch = negatives is None if in_batch is None else in_batch
    tape, (a, p, n, lam_t), diff = _prepare(anchors, positives, negatives, lam)
    _check_shapes(a, p, n)
    if lam_t.shape != (a.shape[1],):
        raise InvalidArgumentError(f"concentration has shape {lam_t.shape}, embeddings have d={a.shape[1]}")
    if in_batch and n is None:
        return _finish(*_inbatch_aninfonce(a, p, lam_t), differentiable=diff)
    q_pos = _weighted_sq_to_anchor(a, p, lam_t)
    inbatch = None
    if in_batch:
        inbatch = -ad.pairwise_weighted_sqdist(a, a, lam_t)
    explicit = None
    if n is not None:
        explicit = -_weighted_sq_to_anchor(a.reshape(a.shape[0], 1, a.shape[1]), n, lam_t)
    logits = _assemble(-q_pos, inbatch, explicit)
    per_anchor = ad.logsumexp(logits, axis=1) + q_pos
    return _finish(per_anchor, -q_pos.data, _neg_mean(inbatch, explicit), diff)


def ensemble_loss(batches, lams, in_batch: bool | None = None) -> LossValue:
    """Sum over members of ``aninfonce_loss(batch_i, lam_i)``.

    ``batches`` is a sequence of ``(anchors, positives, negatives)``; the
    returned ``per_anchor`` has shape (k, N) and ``loss`` is the sum of the
    k member means.
    """
    batches, lams = list(batches), list(lams)
    if len(batches) != len(lams) or not batches:
        raise InvalidArgumentError(f"{len(batches)} batches for {len(lams)} concentrations")
    values = [aninfonce_loss(a, p, n, lam, in_batch=in_batch) for (a, p, n), lam in zip(batches, lams)]
    total = values[0].loss
    for v in values[1:]:
        total = total + v.loss
    return LossValue(
        total,
        np.stack([v.per_anchor for v in values]),
        float(np.mean([v.pos_similarity for v in values])),
        float(np.mean([v.neg_similarity for v in values])),
    )


@dataclass
class BayesLoss:
    value: float
    stderr: float
    n_mc: int


def _lse_rows(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=1, keepdims=True)
    return m[:, 0] + np.log(np.sum(np.exp(x - m), axis=1))


def bayes_optimal_loss(
    lam_pos,
    lam_neg=None,
    m: int = 1,
    d: int | None = None,
    n_mc: int = 100_000,
    rng=None,
    *,
    method: str = "exact",
    block: int = 1024,
    allow_degenerate: bool = False,
) -> BayesLoss:
    """Monte-Carlo estimate of the minimal attainable contrastive loss.

    The Bayes-optimal critic scores a candidate by the log density ratio
    ``-(z~ - z)^T L_eff (z~ - z)`` with ``L_eff = lam_pos - lam_neg`` (or
    ``lam_pos`` for uniform negatives).  Anchors are uniform, positives come
    from the ``lam_pos`` conditional, negatives are fresh draws: uniform
    (shared by all anchors of a block, so the standard error is taken over
    block means) or, with ``lam_neg``, per-anchor conditional draws.
    """
    pos = as_diag(lam_pos, d)
    d = pos.size
    neg = None if lam_neg is None else as_diag(lam_neg, d)
    eff = pos - (0.0 if neg is None else neg)
    if allow_degenerate:
        if np.any(eff < 0):
            raise InvalidArgumentError("effective concentration must be >= 0")
    elif np.any(eff <= 0):
        raise InvalidArgumentError("effective concentration lam_pos - lam_neg must be positive definite")
    if m < 1 or n_mc < 1:
        raise InvalidArgumentError("need m >= 1 and n_mc >= 1")
    gen = as_generator(rng)
    block = min(block, n_mc)
    n_blocks = -(-n_mc // block)
    block_means = np.empty(n_blocks)
    per_anchor_all = []
    for b in range(n_blocks):
        z = sample_uniform_sphere(d, block, gen)
        zp = sample_conditional(z, pos, 1, method, gen)[:, 0]
        q_pos = np.sum((zp - z) ** 2 * eff, axis=1)
        if neg is None:
            zn = sample_uniform_sphere(d, m, gen)
            sq_z = np.sum(z * z * eff, axis=1)
            sq_n = np.sum(zn * zn * eff, axis=1)
            q_neg = sq_z[:, None] + sq_n[None, :] - 2.0 * (z * eff) @ zn.T
        else:
            zn = sample_conditional(z, neg, m, method, gen)
            q_neg = np.sum((zn - z[:, None, :]) ** 2 * eff, axis=2)
        logits = np.concatenate([-q_pos[:, None], -q_neg], axis=1)
        per_anchor = _lse_rows(logits) + q_pos
        block_means[b] = per_anchor.mean()
        if neg is not None:
            per_anchor_all.append(per_anchor)
    value = float(block_means.mean())
    if neg is None:
        stderr = float(block_means.std(ddof=1) / np.sqrt(n_blocks)) if n_blocks > 1 else float("nan")
    else:
        pa = np.concatenate(per_anchor_all)
        stderr = float(pa.std(ddof=1) / np.sqrt(pa.size)) if pa.size > 1 else float("nan")
    return BayesLoss(value, stderr, n_blocks * block)
