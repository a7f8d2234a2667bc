"""Identifiability metrics: linear R^2, concentration matching, block-orthogonal
Procrustes residuals, similarity-overlap histograms and domain classification.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import orthogonal_procrustes
from scipy.optimize import linear_sum_assignment

from .errors import InsufficientDataError, InvalidArgumentError
from .rng import as_generator
from .sphere import as_diag

REPORT_SCHEMA_VERSION = 1


@dataclass
class LinearFit:
    A: np.ndarray  # (d_pred, d_target): target ~ predicted @ A + intercept
    intercept: np.ndarray
    per_dim_r2: np.ndarray
    mean_r2: float
    n_fit: int
    n_eval: int


def fit_linear_map(
    predicted,
    target,
    with_intercept: bool = True,
    dims=None,
    fit_fraction: float = 0.8,
) -> LinearFit:
    """Least-squares map from ``predicted`` to ``target``; R^2 on the held-out tail.

    Rows are assumed i.i.d., so the first ``fit_fraction`` of them form the
    fitting split and the rest the evaluation split.
    """
    x = np.asarray(predicted, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise InvalidArgumentError(f"predicted {x.shape} and target {y.shape} must be (n, d) with equal n")
    n = x.shape[0]
    if n < 10 * max(x.shape[1], y.shape[1]):
        raise InsufficientDataError(f"need n >= 10 d samples, got n={n}")
    n_fit = int(round(fit_fraction * n))
    design = np.hstack([x, np.ones((n, 1))]) if with_intercept else x
    xf, yf = design[:n_fit], y[:n_fit]
    coef, _, rank, _ = np.linalg.lstsq(xf, yf, rcond=None)
    if rank < design.shape[1]:
        warnings.warn(f"rank-deficient design ({rank} < {design.shape[1]}); using the pseudo-inverse solution")
    xe, ye = design[n_fit:], y[n_fit:]
    resid = ye - xe @ coef
    ssr = np.sum(resid**2, axis=0)
    sst = np.sum((ye - ye.mean(axis=0)) ** 2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(sst > 0, 1.0 - ssr / sst, np.where(ssr > 0, -np.inf, 1.0))
    sel = np.arange(y.shape[1]) if dims is None else np.asarray(dims, dtype=int)
    A = coef[: x.shape[1]]
    intercept = coef[-1] if with_intercept else np.zeros(y.shape[1])
    return LinearFit(A, intercept, r2, float(np.mean(r2[sel])), n_fit, n - n_fit)


def content_style_dims(lam) -> tuple[np.ndarray, np.ndarray]:
    """Split dimensions into content-like (high concentration) and style-like (low).

    Two distinct values: the higher-valued dims are content.  One value: both
    sets are all dims.  More values: top half vs bottom half by rank.
    """
    diag = as_diag(lam)
    values = np.unique(diag)
    idx = np.arange(diag.size)
    if values.size == 1:
        return idx, idx
    if values.size == 2:
        return idx[diag == values[1]], idx[diag == values[0]]
    order = np.argsort(-diag, kind="stable")
    half = diag.size // 2
    return np.sort(order[:half]), np.sort(order[half:])


@dataclass
class LambdaMatch:
    raw_errors: np.ndarray  # |l_hat - l| / l for sorted pairs
    scale: float  # s minimising sum (s l_hat - l)^2
    scaled_errors: np.ndarray
    learned_sorted: np.ndarray
    truth_sorted: np.ndarray


def compare_lambda(learned, truth) -> LambdaMatch:
    """Match learned and true diagonals by sorting (optimal for 1-D assignment)."""
    lh = np.sort(as_diag(learned))
    lt = np.sort(as_diag(truth))
    if lh.shape != lt.shape:
        raise InvalidArgumentError("learned and true concentrations differ in dimension")
    raw = np.abs(lh - lt) / lt
    scale = float(np.dot(lh, lt) / np.dot(lh, lh))
    scaled = np.abs(scale * lh - lt) / lt
    return LambdaMatch(raw, scale, scaled, lh, lt)


def lambda_blocks(lam, rtol: float = 0.01) -> list[np.ndarray]:
    """Groups of dims whose concentrations agree within ``rtol`` (relative)."""
    diag = as_diag(lam)
    order = np.argsort(diag, kind="stable")
    blocks, current = [], [order[0]]
    for i in order[1:]:
        if abs(diag[i] - diag[current[0]]) <= rtol * abs(diag[current[0]]):
            current.append(i)
        else:
            blocks.append(np.sort(np.array(current)))
            current = [i]
    blocks.append(np.sort(np.array(current)))
    return blocks


@dataclass
class OrthoFit:
    residual: float
    rotation: np.ndarray  # (d, d) block-orthogonal up to output permutation: h ~ z @ rotation
    blocks: list[np.ndarray]
    assigned: list[np.ndarray]  # output coordinates carried by each block


def orthogonality_residual(z, h, lam, rtol: float = 0.01) -> OrthoFit:
    """Fit ``h ~ z Q`` with Q orthogonal and block-structured by equal concentrations.

    Output coordinates are first assigned to latent blocks (respecting block
    sizes) by how much of their variance each block explains linearly; then
    an orthogonal Procrustes problem is solved per block.  The residual is
    the mean squared mismatch per sample (0 for exact block-orthogonal maps).
    """
    z = np.asarray(z, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    n, d = z.shape
    if h.shape != (n, d):
        raise InvalidArgumentError(f"z {z.shape} and h {h.shape} must have equal shape")
    if n < d:
        raise InsufficientDataError(f"need at least d={d} samples, got {n}")
    blocks = lambda_blocks(as_diag(lam, d), rtol)
    if len(blocks) == 1:
        assigned = [np.arange(d)]
    else:
        # explained sum of squares of each output coordinate by each latent block
        score = np.empty((len(blocks), d))
        for k, blk in enumerate(blocks):
            coef, *_ = np.linalg.lstsq(z[:, blk], h, rcond=None)
            score[k] = np.sum((z[:, blk] @ coef) ** 2, axis=0)
        slots = np.concatenate([[k] * len(blk) for k, blk in enumerate(blocks)])
        rows, cols = linear_sum_assignment(-score[slots])
        assigned = [np.sort(cols[slots[rows] == k]) for k in range(len(blocks))]
    rotation = np.zeros((d, d))
    for blk, out in zip(blocks, assigned):
        q, _ = orthogonal_procrustes(z[:, blk], h[:, out])
        rotation[np.ix_(blk, out)] = q
    resid = h - z @ rotation
    return OrthoFit(float(np.mean(np.sum(resid**2, axis=1))), rotation, blocks, assigned)


@dataclass
class OverlapHistogram:
    bin_edges: np.ndarray
    positive_counts: np.ndarray
    negative_counts: np.ndarray
    disjoint: bool
    min_positive: float
    max_negative: float


def overlap_histogram(anchors, positives, negatives=None, bins: int = 100) -> OverlapHistogram:
    """Cosine similarities of positive and negative pairs, binned on [-1, 1].

    Without explicit ``negatives`` (N, M, d), negative pairs are all anchor
    pairs (i, j), i != j.
    """
    a = np.asarray(anchors, dtype=np.float64)
    p = np.asarray(positives, dtype=np.float64)
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    p = p / np.linalg.norm(p, axis=1, keepdims=True)
    pos = np.sum(a * p, axis=1)
    if negatives is None:
        sims = a @ a.T
        neg = sims[~np.eye(a.shape[0], dtype=bool)]
    else:
        nvec = np.asarray(negatives, dtype=np.float64)
        nvec = nvec / np.linalg.norm(nvec, axis=-1, keepdims=True)
        neg = np.einsum("nd,nmd->nm", a, nvec).ravel()
    edges = np.linspace(-1.0, 1.0, bins + 1)
    # clip so that rounding just above 1 lands in the top bin
    pc, _ = np.histogram(np.clip(pos, -1, 1), edges)
    nc, _ = np.histogram(np.clip(neg, -1, 1), edges)
    return OverlapHistogram(edges, pc, nc, bool(pos.min() > neg.max()), float(pos.min()), float(neg.max()))


def domain_classifier_accuracy(
    train_embeddings,
    test_embeddings,
    rng=0,
    steps: int = 300,
    lr: float = 0.1,
) -> float:
    """Balanced held-out accuracy of a logistic-regression domain classifier.

    Samples from the two sets are labelled 0 / 1, shuffled, split 80/20, and
    a linear classifier on standardised features is trained by full-batch
    Adam on the logistic loss.
    """
    x0 = np.asarray(train_embeddings, dtype=np.float64)
    x1 = np.asarray(test_embeddings, dtype=np.float64)
    if x0.ndim != 2 or x1.ndim != 2 or len(x0) < 2 or len(x1) < 2:
        raise InvalidArgumentError("domain classifier needs two non-trivial (n, d) sets")
    if x0.shape[1] != x1.shape[1]:
        raise InvalidArgumentError("embedding dimensions differ")
    gen = as_generator(rng)
    x = np.vstack([x0, x1])
    y = np.concatenate([np.zeros(len(x0)), np.ones(len(x1))])
    perm = gen.permutation(len(y))
    x, y = x[perm], y[perm]
    n_fit = int(round(0.8 * len(y)))
    xf, yf, xe, ye = x[:n_fit], y[:n_fit], x[n_fit:], y[n_fit:]
    if len(np.unique(yf)) < 2 or len(np.unique(ye)) < 2:
        raise InvalidArgumentError("a split ended up with a single class")
    mu, sd = xf.mean(axis=0), xf.std(axis=0)
    sd[sd == 0] = 1.0
    xf = np.hstack([(xf - mu) / sd, np.ones((len(xf), 1))])
    xe = np.hstack([(xe - mu) / sd, np.ones((len(xe), 1))])
    w = np.zeros(xf.shape[1])
    m, v = np.zeros_like(w), np.zeros_like(w)
    for t in range(1, steps + 1):
        logits = xf @ w
        prob = 0.5 * (1.0 + np.tanh(0.5 * logits))
        g = xf.T @ (prob - yf) / len(yf)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    pred = (xe @ w) > 0
    tpr = np.mean(pred[ye == 1])
    tnr = np.mean(~pred[ye == 0])
    return float(0.5 * (tpr + tnr))


@dataclass
class EvalReport:
    r2_all: float
    r2_content: float
    r2_style: float
    per_dim_r2: list
    n_eval: int
    lambda_hat: list | None = None
    lambda_raw_errors: list | None = None
    lambda_scale: float | None = None
    lambda_scaled_errors: list | None = None
    ortho_residual: float | None = None
    loss: float | None = None
    loss_stderr: float | None = None
    extra: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        if data.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise InvalidArgumentError(f"unsupported report schema {data.get('schema_version')}")
        return cls(**data)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def evaluate_latents(
    z,
    z_hat,
    lam_true,
    lam_hat=None,
    with_intercept: bool = True,
    ortho: bool = True,
) -> EvalReport:
    """Full report for recovered latents ``z_hat`` against ground truth ``z``."""
    content, style = content_style_dims(lam_true)
    fit = fit_linear_map(z_hat, z, with_intercept=with_intercept)
    r2 = fit.per_dim_r2
    report = EvalReport(
        r2_all=float(np.mean(r2)),
        r2_content=float(np.mean(r2[content])),
        r2_style=float(np.mean(r2[style])),
        per_dim_r2=r2.tolist(),
        n_eval=fit.n_eval,
    )
    if lam_hat is not None:
        match = compare_lambda(lam_hat, lam_true)
        report.lambda_hat = as_diag(lam_hat).tolist()
        report.lambda_raw_errors = match.raw_errors.tolist()
        report.lambda_scale = match.scale
        report.lambda_scaled_errors = match.scaled_errors.tolist()
    if ortho and z_hat.shape[1] == z.shape[1]:
        report.ortho_residual = orthogonality_residual(z, z_hat, lam_true).residual
    return report
