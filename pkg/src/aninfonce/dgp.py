"""Synthetic anisotropic data-generating processes.

Latents live on S^(d-1).  Anchors come from the marginal (uniform, or a
vMF/uniform mixture for marginal-shift studies), positives from the
anisotropic conditional with concentration ``lam_pos``, and negatives are
either uniform, drawn from a broader conditional ``lam_neg`` (hard
negatives), or taken in-batch from the other anchors.  Observations are
produced by an invertible LeakyReLU MLP ``g: R^d -> R^d``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import ortho_group

from .errors import ConstructionError, InvalidArgumentError, SingularLayerError
from .nn import MlpNetwork
from .rng import RngStream, as_generator
from .sphere import (
    CONDITIONAL_METHODS,
    ConcentrationMatrix,
    VmfParams,
    sample_conditional,
    sample_marginal,
    sample_uniform_sphere,
)

IN_BATCH = "in-batch"


@dataclass(frozen=True)
class GeneratorSpec:
    d: int
    n_layers: int = 3
    leaky_slope: float = 0.2
    max_condition_number: float = 25.0
    seed: int = 0

    def __post_init__(self):
        if self.d < 1 or self.n_layers < 1:
            raise InvalidArgumentError("generator needs d >= 1 and n_layers >= 1")
        if not 0 < self.leaky_slope < 1:
            raise InvalidArgumentError("leaky_slope must lie in (0, 1)")
        if not self.max_condition_number > 1:
            raise InvalidArgumentError("max_condition_number must exceed 1")


def make_generator(spec: GeneratorSpec, max_tries: int = 100) -> MlpNetwork:
    """Square, well-conditioned LeakyReLU MLP with zero biases.

    Each weight is a Haar-random orthogonal matrix.  The condition-number
    check and redraw loop still guard the bound, which only bites for
    bounds within rounding error of 1.
    """
    gen = RngStream(spec.seed, 0x6E6).generator()
    d = spec.d
    weights = []
    for layer in range(spec.n_layers):
        for _ in range(max_tries):
            w = ortho_group.rvs(d, random_state=gen) if d > 1 else np.array([[gen.choice([-1.0, 1.0])]])
            if np.linalg.cond(w) <= spec.max_condition_number:
                weights.append(w)
                break
        else:
            raise ConstructionError(
                f"layer {layer}: no weight with condition number <= {spec.max_condition_number} "
                f"after {max_tries} draws (d={d}); loosen max_condition_number"
            )
    return MlpNetwork(weights, [np.zeros(d) for _ in weights], spec.leaky_slope, False)


def invert_generator(gen: MlpNetwork, x, max_cond: float = 1e12) -> np.ndarray:
    """Exact inverse of a square MLP: undo each affine map and LeakyReLU in turn."""
    h = np.asarray(x, dtype=np.float64)
    for i in reversed(range(gen.n_layers)):
        w, b = gen.weights[i], gen.biases[i]
        if w.shape[0] != w.shape[1]:
            raise InvalidArgumentError(f"layer {i} is not square")
        if i < gen.n_layers - 1:
            h = np.where(h > 0, h, h / gen.slope)
        if not np.linalg.cond(w) < max_cond:
            raise SingularLayerError(f"layer {i} is numerically singular")
        # rows satisfy y = h W + b, i.e. W^T h^T = (y - b)^T
        h = np.linalg.solve(w.T, (h - b).T).T
    return h


@dataclass(frozen=True)
class VmfMixtureMarginal:
    """``alpha * vMF(mean, kappa) + (1 - alpha) * uniform``."""

    vmf: VmfParams
    alpha: float = 1.0

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise InvalidArgumentError("alpha must lie in [0, 1]")


@dataclass(frozen=True)
class DgpSpec:
    d: int
    lam_pos: ConcentrationMatrix
    generator: GeneratorSpec
    lam_neg: ConcentrationMatrix | None = None
    conditional_method: str = "projected_gaussian"
    marginal: VmfMixtureMarginal | None = None  # None means uniform
    mh_burn_in: int = 200
    mh_thin: int = 5

    def __post_init__(self):
        if not isinstance(self.lam_pos, ConcentrationMatrix):
            object.__setattr__(self, "lam_pos", ConcentrationMatrix(self.lam_pos))
        if self.lam_neg is not None and not isinstance(self.lam_neg, ConcentrationMatrix):
            object.__setattr__(self, "lam_neg", ConcentrationMatrix(self.lam_neg))
        if self.lam_pos.d != self.d or self.generator.d != self.d:
            raise InvalidArgumentError("lam_pos and generator must match d")
        if self.lam_neg is not None:
            if self.lam_neg.d != self.d:
                raise InvalidArgumentError("lam_neg must match d")
            if not np.all(self.lam_pos.diag > self.lam_neg.diag):
                raise InvalidArgumentError(
                    "hard negatives need lam_pos > lam_neg entrywise "
                    "(effective concentration lam_pos - lam_neg must be positive definite)"
                )
        if self.conditional_method not in CONDITIONAL_METHODS:
            raise InvalidArgumentError(f"unknown conditional method {self.conditional_method!r}")
        if self.marginal is not None and self.marginal.vmf.mean_direction.size != self.d:
            raise InvalidArgumentError("marginal vMF dimension must match d")

    def conditional(self, anchors, lam, n, gen):
        return sample_conditional(
            anchors, lam, n, self.conditional_method, gen, burn_in=self.mh_burn_in, thin=self.mh_thin
        )

    def sample_anchors(self, n: int, rng) -> np.ndarray:
        if self.marginal is None:
            return sample_uniform_sphere(self.d, n, rng)
        return sample_marginal(self.d, n, rng, self.marginal.vmf, self.marginal.alpha)


@dataclass
class LatentBatch:
    anchors: np.ndarray  # (N, d)
    positives: np.ndarray  # (N, d)
    negatives: np.ndarray | None  # (N, M, d), or None for in-batch

    @property
    def in_batch(self) -> bool:
        return self.negatives is None

    def __len__(self):
        return self.anchors.shape[0]


@dataclass
class ObservationBatch:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray | None
    latents: LatentBatch = field(repr=False)

    @property
    def in_batch(self) -> bool:
        return self.negatives is None

    def __len__(self):
        return self.anchors.shape[0]


def sample_latent_batch(dgp: DgpSpec, n_anchors: int, n_negatives, rng) -> LatentBatch:
    """Anchors from the marginal, one positive each, and negatives.

    ``n_negatives`` is an int M (fresh per-anchor negatives: uniform, or from
    the ``lam_neg`` conditional) or ``"in-batch"``.
    """
    gen = as_generator(rng)
    d = dgp.d
    if n_negatives == IN_BATCH:
        if n_anchors < 2:
            raise InvalidArgumentError("in-batch negatives need at least 2 anchors")
    elif int(n_negatives) < 0:
        raise InvalidArgumentError("number of negatives must be >= 0")
    if n_anchors == 0:
        empty = np.empty((0, d))
        return LatentBatch(empty, empty.copy(), None if n_negatives == IN_BATCH else np.empty((0, int(n_negatives), d)))
    anchors = dgp.sample_anchors(n_anchors, gen)
    positives = dgp.conditional(anchors, dgp.lam_pos, 1, gen)[:, 0]
    if n_negatives == IN_BATCH:
        negatives = None
    else:
        m = int(n_negatives)
        if m == 0:
            negatives = np.empty((n_anchors, 0, d))
        elif dgp.lam_neg is None:
            negatives = sample_uniform_sphere(d, n_anchors * m, gen).reshape(n_anchors, m, d)
        else:
            negatives = dgp.conditional(anchors, dgp.lam_neg, m, gen)
    return LatentBatch(anchors, positives, negatives)


def generate_observations(gen: MlpNetwork, batch: LatentBatch) -> ObservationBatch:
    def apply(z):
        if z is None:
            return None
        if z.size == 0:
            return z.copy()
        return gen(z.reshape(-1, z.shape[-1])).reshape(z.shape[:-1] + (gen.out_dim,))

    return ObservationBatch(apply(batch.anchors), apply(batch.positives), apply(batch.negatives), batch)


@dataclass(frozen=True)
class EnsembleDgp:
    """k DGPs sharing one generator and marginal, differing in concentration."""

    members: tuple[DgpSpec, ...]

    def __post_init__(self):
        if len(self.members) < 1:
            raise InvalidArgumentError("ensemble needs at least one member")
        first = self.members[0]
        for m in self.members[1:]:
            if m.d != first.d or m.generator != first.generator:
                raise InvalidArgumentError("ensemble members must share d and the generator")

    @classmethod
    def from_lams(cls, base: DgpSpec, lams) -> "EnsembleDgp":
        from dataclasses import replace

        return cls(tuple(replace(base, lam_pos=ConcentrationMatrix(lam)) for lam in lams))

    @property
    def k(self) -> int:
        return len(self.members)

    @property
    def generator(self) -> GeneratorSpec:
        return self.members[0].generator
