"""Sampling and densities on the unit hypersphere S^(d-1).

Points are stored as rows of float64 arrays.  Three families are covered:
the uniform distribution, von Mises-Fisher (vMF), and the anisotropic
conditional ``p(z+ | z) ~ exp(-(z+ - z)^T L (z+ - z))`` with a diagonal
concentration ``L``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.special import erfc, gammaln, hyperu, pbdv

from .errors import DegenerateInputError, EnvelopeTooLooseError, InvalidArgumentError
from .rng import as_generator

NORM_TOL = 1e-9

# below this acceptance rate "exact" falls back to MH
_MIN_ENVELOPE_RATE = 1e-3

CONDITIONAL_METHODS = (
    "exact_mh",
    "exact_rejection",
    "exact_vmf_rejection",
    "exact_gaussian_rejection",
    "projected_gaussian",
    "exact",
)


class ConcentrationMatrix:
    """Diagonal positive concentration matrix, stored as its diagonal."""

    __slots__ = ("diag",)

    def __init__(self, diag, allow_zero: bool = False):
        diag = np.array(diag, dtype=np.float64).reshape(-1)
        if diag.size == 0:
            raise InvalidArgumentError("concentration matrix needs at least one entry")
        if not np.all(np.isfinite(diag)):
            raise InvalidArgumentError("concentration entries must be finite")
        if allow_zero:
            if np.any(diag < 0):
                raise InvalidArgumentError("concentration entries must be >= 0")
        elif np.any(diag <= 0):
            raise InvalidArgumentError(f"concentration entries must be > 0, got {diag}")
        self.diag = diag

    @classmethod
    def isotropic(cls, value: float, d: int) -> "ConcentrationMatrix":
        return cls(np.full(d, float(value)))

    @property
    def d(self) -> int:
        return self.diag.size

    def is_isotropic(self, rtol: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.diag - self.diag[0]) <= rtol * abs(self.diag[0])))

    def __array__(self, dtype=None, copy=None):
        return self.diag if dtype is None else self.diag.astype(dtype)

    def __repr__(self):
        return f"ConcentrationMatrix({self.diag.tolist()})"

    def __eq__(self, other):
        return isinstance(other, ConcentrationMatrix) and np.array_equal(self.diag, other.diag)


def as_diag(lam, d: int | None = None) -> np.ndarray:
    if isinstance(lam, ConcentrationMatrix):
        diag = lam.diag
    else:
        diag = np.asarray(lam, dtype=np.float64)
        if diag.ndim == 0:
            if d is None:
                raise InvalidArgumentError("scalar concentration needs an explicit dimension")
            diag = np.full(d, float(diag))
    if d is not None and diag.shape != (d,):
        raise InvalidArgumentError(f"concentration has {diag.size} entries, expected {d}")
    return diag


@dataclass(frozen=True)
class VmfParams:
    mean_direction: np.ndarray
    kappa: float

    def __post_init__(self):
        mu = np.asarray(self.mean_direction, dtype=np.float64)
        if mu.ndim != 1 or abs(np.linalg.norm(mu) - 1.0) > NORM_TOL:
            raise InvalidArgumentError("mean_direction must be a unit vector")
        if not self.kappa >= 0:
            raise InvalidArgumentError(f"kappa must be >= 0, got {self.kappa}")
        object.__setattr__(self, "mean_direction", mu)


def pole(d: int, south: bool = False) -> np.ndarray:
    """North (e_1) or south (-e_1) pole of S^(d-1)."""
    mu = np.zeros(d)
    mu[0] = -1.0 if south else 1.0
    return mu


def project_to_sphere(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise DegenerateInputError("cannot project a zero (or non-finite) vector to the sphere")
    return x / norms


def _check_dn(d: int, n: int):
    if int(d) < 1 or int(n) < 1:
        raise InvalidArgumentError(f"need d >= 1 and n >= 1, got d={d}, n={n}")


def sample_uniform_sphere(d: int, n: int, rng) -> np.ndarray:
    _check_dn(d, n)
    gen = as_generator(rng)
    if d == 1:
        return gen.choice(np.array([-1.0, 1.0]), size=(n, 1))
    x = gen.standard_normal((n, d))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    while np.any(norms == 0):  # measure-zero; redraw for completeness
        bad = norms[:, 0] == 0
        x[bad] = gen.standard_normal((int(bad.sum()), d))
        norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / norms


def conditional_density_unnorm(anchor, point, lam) -> np.ndarray | float:
    """``exp(-(point - anchor)^T L (point - anchor))``; broadcasts over rows."""
    anchor = np.asarray(anchor, dtype=np.float64)
    point = np.asarray(point, dtype=np.float64)
    d = point.shape[-1]
    if anchor.shape[-1] != d:
        raise InvalidArgumentError("anchor and point dimensions differ")
    diag = as_diag(lam, d)
    diff = point - anchor
    out = np.exp(-np.sum(diff * diff * diag, axis=-1))
    return float(out) if out.ndim == 0 else out


def _wood_cosines(kappa: np.ndarray, d: int, gen: np.random.Generator) -> np.ndarray:
    """Sample t = <x, mu> for vMF on S^(d-1), d >= 2, one per entry of ``kappa``."""
    m = d - 1
    kappa = np.asarray(kappa, dtype=np.float64)
    out = np.empty(kappa.shape)
    b = m / (np.sqrt(4.0 * kappa**2 + m * m) + 2.0 * kappa)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + m * np.log(1.0 - x0 * x0)
    pending = np.arange(kappa.size)
    while pending.size:
        k, bb, xx, cc = kappa[pending], b[pending], x0[pending], c[pending]
        z = gen.beta(m / 2.0, m / 2.0, size=pending.size)
        w = (1.0 - (1.0 + bb) * z) / (1.0 - (1.0 - bb) * z)
        u = gen.random(pending.size)
        ok = k * w + m * np.log(1.0 - xx * w) - cc >= np.log(u)
        out[pending[ok]] = w[ok]
        pending = pending[~ok]
    return out


def _vmf_rows(mu: np.ndarray, kappa, gen: np.random.Generator) -> np.ndarray:
    """One vMF draw per row of ``mu`` (shape (n, d)); ``kappa`` scalar or (n,)."""
    n, d = mu.shape
    kappa = np.broadcast_to(np.asarray(kappa, dtype=np.float64), (n,))
    if d == 1:
        p_same = 1.0 / (1.0 + np.exp(-2.0 * kappa))
        sign = np.where(gen.random(n) < p_same, 1.0, -1.0)
        return mu * sign[:, None]
    t = _wood_cosines(kappa, d, gen)
    v = gen.standard_normal((n, d))
    v -= np.sum(v * mu, axis=1, keepdims=True) * mu
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    x = t[:, None] * mu + np.sqrt(np.clip(1.0 - t * t, 0.0, None))[:, None] * v
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def sample_vmf(params: VmfParams, n: int, rng) -> np.ndarray:
    mu = params.mean_direction
    _check_dn(mu.size, n)
    gen = as_generator(rng)
    if params.kappa == 0:
        return sample_uniform_sphere(mu.size, n, gen)
    return _vmf_rows(np.broadcast_to(mu, (n, mu.size)).copy(), params.kappa, gen)


def _mh_chains(
    starts: np.ndarray,
    diag: np.ndarray,
    n_keep: int,
    burn_in: int,
    thin: int,
    gen: np.random.Generator,
) -> np.ndarray:
    """Random-walk Metropolis-Hastings with a vMF proposal around the current state.

    ``starts`` are (C, d) chain initial states which double as the anchors of
    the target density.  Returns (C, n_keep, d).
    """
    anchors = starts
    state = starts.copy()
    kappa = 2.0 * float(np.max(diag))

    def logp(u):
        diff = u - anchors
        return -np.sum(diff * diff * diag, axis=1)

    cur = logp(state)
    out = np.empty((starts.shape[0], n_keep, starts.shape[1]))
    kept = 0
    total = burn_in + n_keep * thin
    for it in range(1, total + 1):
        prop = _vmf_rows(state, kappa, gen)
        new = logp(prop)
        accept = np.log(gen.random(state.shape[0])) < new - cur
        state[accept] = prop[accept]
        cur[accept] = new[accept]
        if it > burn_in and (it - burn_in) % thin == 0:
            out[:, kept] = state
            kept += 1
    return out


def _reshape_anchor(anchor) -> tuple[np.ndarray, bool]:
    anchor = np.asarray(anchor, dtype=np.float64)
    single = anchor.ndim == 1
    anchors = anchor[None, :] if single else anchor
    if anchors.ndim != 2:
        raise InvalidArgumentError("anchor must be a vector or a (n_anchors, d) array")
    if np.any(np.abs(np.linalg.norm(anchors, axis=1) - 1.0) > 1e-6):
        raise InvalidArgumentError("anchors must be unit norm")
    return anchors, single


def sample_conditional(
    anchor,
    lam,
    n: int,
    method: str = "exact_mh",
    rng=None,
    *,
    burn_in: int = 200,
    thin: int = 5,
    max_chains: int = 4096,
) -> np.ndarray:
    """Draw ``n`` points from the anisotropic conditional around each anchor.

    ``anchor`` is a single point (result (n, d)) or a stack of anchors
    (result (n_anchors, n, d)).

    Methods:

    * ``exact_mh``: random-walk Metropolis-Hastings with a vMF proposal of
      concentration ``2 * max(L)``; chains start at the anchor (the mode).
    * ``exact_rejection``: uniform proposals accepted with probability
      ``conditional_density_unnorm``; only usable for small ``L``.
    * ``projected_gaussian``: ``normalize(anchor + N(0, (2L)^-1))``.  Cheap,
      but only approximates the conditional; the tangent precision it induces
      is the inverse of the projected covariance, not ``L`` restricted to the
      tangent plane.
    * ``exact_vmf_rejection``: vMF proposals around the anchor with
      ``kappa = 2 * min(L)``, accepted with probability
      ``exp(-sum_i (L_i - min L) (z~_i - z_i)^2)`` (at most 1, so exact).
      The rate decays like ``prod_i sqrt(min L / L_i)``.
    * ``exact_gaussian_rejection``: ``projected_gaussian`` proposals
      corrected by rejection.  The proposal density of a direction has a
      closed form (a radial integral), so the acceptance ratio is exact; see
      :func:`gaussian_envelope_log_bound`.
    * ``exact``: an exact vMF draw with ``kappa = 2 * L`` when ``L`` is
      isotropic (the conditional is then exactly vMF); otherwise whichever
      of the two envelope samplers has the higher estimated acceptance rate,
      or ``exact_mh`` when both rates fall below 1e-3.
    """
    anchors, single = _reshape_anchor(anchor)
    n_anchors, d = anchors.shape
    _check_dn(d, n)
    diag = as_diag(lam, d)
    if np.any(diag <= 0):
        raise InvalidArgumentError("concentration entries must be > 0")
    gen = as_generator(rng)

    if method == "exact":
        if np.all(diag == diag[0]):
            rep = np.repeat(anchors, n, axis=0)
            out = _vmf_rows(rep, 2.0 * diag[0], gen).reshape(n_anchors, n, d)
            return out[0] if single else out
        g_rate, v_rate = gaussian_envelope_rate(diag), vmf_envelope_rate(diag)
        if max(g_rate, v_rate) < _MIN_ENVELOPE_RATE:
            method = "exact_mh"
        else:
            method = "exact_gaussian_rejection" if g_rate >= v_rate else "exact_vmf_rejection"

    if method == "projected_gaussian":
        noise = gen.standard_normal((n_anchors, n, d)) / np.sqrt(2.0 * diag)
        out = project_to_sphere(anchors[:, None, :] + noise)
    elif method == "exact_mh":
        if burn_in < 0 or thin < 1:
            raise InvalidArgumentError("burn_in must be >= 0 and thin >= 1")
        per_anchor = max(1, min(n, max_chains // n_anchors))
        n_keep = -(-n // per_anchor)
        starts = np.repeat(anchors, per_anchor, axis=0)
        draws = _mh_chains(starts, diag, n_keep, burn_in, thin, gen)
        # interleave chains so the first n draws spread over all chains
        draws = draws.reshape(n_anchors, per_anchor, n_keep, d).transpose(0, 2, 1, 3)
        out = draws.reshape(n_anchors, per_anchor * n_keep, d)[:, :n]
    elif method == "exact_rejection":
        out = _rejection(anchors, diag, n, gen)
    elif method == "exact_vmf_rejection":
        out = _vmf_rejection(anchors, diag, n, gen)
    elif method == "exact_gaussian_rejection":
        out = _gaussian_rejection(anchors, diag, n, gen)
    else:
        raise InvalidArgumentError(f"unknown conditional method {method!r}")
    return out[0] if single else out


def vmf_envelope_rate(lam) -> float:
    """Small-noise estimate of the vMF-envelope acceptance rate."""
    diag = as_diag(lam)
    return float(np.prod(np.sqrt(diag.min() / diag)))


def _vmf_rejection(anchors: np.ndarray, diag: np.ndarray, n: int, gen) -> np.ndarray:
    n_anchors, d = anchors.shape
    lo = float(diag.min())
    extra = diag - lo
    out = np.empty((n_anchors * n, d))
    pending = np.repeat(np.arange(n_anchors), n)
    slots = np.arange(n_anchors * n)
    rate = max(vmf_envelope_rate(diag), 1e-6)
    while slots.size:
        reps = int(min(np.ceil(1.3 / rate) + 1, max(1, 4_000_000 // (slots.size * d))))
        owner = np.tile(np.arange(slots.size), reps)
        mu = anchors[pending[owner]]
        cand = _vmf_rows(mu, 2.0 * lo, gen)
        diff = cand - mu
        ok = gen.random(owner.size) < np.exp(-np.sum(diff * diff * extra, axis=1))
        # first accepted proposal per pending slot
        acc_owner, first = np.unique(owner[ok], return_index=True)
        out[slots[acc_owner]] = cand[ok][first]
        keep = np.ones(slots.size, dtype=bool)
        keep[acc_owner] = False
        slots, pending = slots[keep], pending[keep]
    return out.reshape(n_anchors, n, d)


def log_radial_integral(a, b, n: int) -> np.ndarray:
    """``log int_0^inf r^n exp(-a r^2 + 2 b r) dr`` for ``a > 0``, elementwise.

    For ``b >= 0`` a forward recursion in the shifted moments
    ``K_k = int r^k exp(-a (r - b/a)^2) dr`` adds only positive terms.  For
    ``b < 0`` that recursion cancels, so the parabolic-cylinder form is used
    instead (through Tricomi's U function once ``D`` would underflow).
    """
    a, b = np.broadcast_arrays(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    out = np.empty(a.shape)
    pos = b >= 0
    ap, m = a[pos], b[pos] / a[pos]
    k_prev = 0.5 * np.sqrt(np.pi / ap) * (2.0 - erfc(m * np.sqrt(ap)))
    k_cur = m * k_prev + np.exp(-ap * m * m) / (2.0 * ap)
    if n == 0:
        k_cur = k_prev
    for k in range(2, n + 1):
        k_prev, k_cur = k_cur, m * k_cur + (k - 1) / (2.0 * ap) * k_prev
    out[pos] = np.log(k_cur) + ap * m * m
    an, bn, nu = a[~pos], b[~pos], n + 1.0
    x = -bn * np.sqrt(2.0 / an)
    far = x > 30.0  # D underflows; U is fast out here
    neg = np.empty(an.shape)
    near = ~far
    neg[near] = bn[near] ** 2 / (2.0 * an[near]) + np.log(pbdv(-nu, x[near])[0])
    neg[far] = -0.5 * nu * np.log(2.0) + np.log(hyperu(0.5 * nu, 0.5, 0.5 * x[far] ** 2))
    out[~pos] = gammaln(nu) - 0.5 * nu * np.log(2.0 * an) + neg
    return out


def _gaussian_log_ratio(a, b, n: int) -> np.ndarray:
    # log target / proposal up to a constant, with a = u^T L u and b = u^T L z
    return 2.0 * b - a - log_radial_integral(a, b, n)


def _golden_max(fn, lo: np.ndarray, hi: np.ndarray, iters: int = 90) -> np.ndarray:
    """Vectorised golden-section search for the max of concave ``fn`` on [lo, hi]."""
    g = (np.sqrt(5.0) - 1.0) / 2.0
    x1, x2 = hi - g * (hi - lo), lo + g * (hi - lo)
    f1, f2 = fn(x1), fn(x2)
    for _ in range(iters):
        left = f1 < f2
        lo = np.where(left, x1, lo)
        hi = np.where(left, hi, x2)
        x1n = np.where(left, x2, hi - g * (hi - lo))
        x2n = np.where(left, lo + g * (hi - lo), x1)
        fn_new = fn(np.where(left, x2n, x1n))
        f1, f2 = np.where(left, f2, fn_new), np.where(left, fn_new, f1)
        x1, x2 = x1n, x2n
    return np.maximum.reduce([fn(lo), fn(hi), f1, f2])


@lru_cache(maxsize=64)
def _gaussian_bound_table(diag: tuple, n_grid: int = 129) -> tuple[np.ndarray, np.ndarray]:
    lam = np.array(diag)
    n = lam.size - 1
    lo, hi = float(lam.min()), float(lam.max())
    grid = np.linspace(lo, hi, n_grid) if hi > lo else np.array([lo])
    ones = np.ones_like(grid)
    edges = [
        _golden_max(lambda b: _gaussian_log_ratio(lo * ones, b, n), -grid, grid),
        _golden_max(lambda b: _gaussian_log_ratio(hi * ones, b, n), -grid, grid),
        _golden_max(lambda a: _gaussian_log_ratio(a, grid, n), lo * ones, hi * ones),
        _golden_max(lambda a: _gaussian_log_ratio(a, -grid, n), lo * ones, hi * ones),
    ]
    # monotone in the grid value because the rectangles are nested
    return grid, np.maximum.accumulate(np.maximum.reduce(edges)) + 1e-9


def gaussian_envelope_log_bound(lam, anchors) -> np.ndarray:
    """Upper bound on ``_gaussian_log_ratio`` per anchor.

    With ``a = u^T L u`` in ``[min L, max L]`` and ``|b| <= ||L z||`` the log
    ratio is concave in ``(a, b)`` (a linear term minus a log-partition
    function), so its max over that rectangle sits on an edge and a 1-D
    search per edge finds it.  Bounds are tabulated on a grid of
    ``||L z||`` and read off at the next grid point up.
    """
    diag = as_diag(lam)
    grid, bound = _gaussian_bound_table(tuple(diag.tolist()))
    reach = np.linalg.norm(np.atleast_2d(anchors) * diag, axis=1)
    idx = np.minimum(np.searchsorted(grid, reach * (1 - 1e-12)), grid.size - 1)
    return bound[idx]


def gaussian_envelope_rate(lam, n_anchors: int = 64, per_anchor: int = 32) -> float:
    """Monte Carlo estimate of the acceptance rate of ``exact_gaussian_rejection``.

    Uses a fixed internal seed so the caller's stream is untouched.
    """
    return _gaussian_rate(tuple(as_diag(lam).tolist()), n_anchors, per_anchor)


@lru_cache(maxsize=64)
def _gaussian_rate(diag: tuple, n_anchors: int, per_anchor: int) -> float:
    lam = np.array(diag)
    gen = np.random.default_rng(0)
    anchors = sample_uniform_sphere(lam.size, n_anchors, gen)
    mu = np.repeat(anchors, per_anchor, axis=0)
    cand = project_to_sphere(mu + gen.standard_normal(mu.shape) / np.sqrt(2.0 * lam))
    a = np.einsum("nd,d,nd->n", cand, lam, cand)
    b = np.einsum("nd,nd->n", cand, mu * lam)
    log_m = np.repeat(gaussian_envelope_log_bound(lam, anchors), per_anchor)
    return float(np.mean(np.exp(_gaussian_log_ratio(a, b, lam.size - 1) - log_m)))


def _gaussian_rejection(anchors: np.ndarray, diag: np.ndarray, n: int, gen) -> np.ndarray:
    n_anchors, d = anchors.shape
    out = np.empty((n_anchors * n, d))
    pending = np.repeat(np.arange(n_anchors), n)
    slots = np.arange(n_anchors * n)
    log_m = gaussian_envelope_log_bound(diag, anchors)
    scale = 1.0 / np.sqrt(2.0 * diag)
    while slots.size:
        reps = max(1, min(3, 4_000_000 // (slots.size * d)))
        owner = np.tile(np.arange(slots.size), reps)
        mu = anchors[pending[owner]]
        cand = project_to_sphere(mu + gen.standard_normal(mu.shape) * scale)
        a = np.einsum("nd,d,nd->n", cand, diag, cand)
        b = np.einsum("nd,nd->n", cand, mu * diag)
        log_r = _gaussian_log_ratio(a, b, d - 1) - log_m[pending[owner]]
        ok = np.log(gen.random(owner.size)) < log_r
        acc_owner, first = np.unique(owner[ok], return_index=True)
        out[slots[acc_owner]] = cand[ok][first]
        keep = np.ones(slots.size, dtype=bool)
        keep[acc_owner] = False
        slots, pending = slots[keep], pending[keep]
    return out.reshape(n_anchors, n, d)


def _rejection(anchors: np.ndarray, diag: np.ndarray, n: int, gen) -> np.ndarray:
    n_anchors, d = anchors.shape
    probe = sample_uniform_sphere(d, 4000, gen)
    rates = np.array([conditional_density_unnorm(a, probe, diag).mean() for a in anchors])
    worst = float(rates.min())
    if worst < 1e-6:
        raise EnvelopeTooLooseError(
            f"uniform-proposal acceptance rate ~{worst:.2e} < 1e-6; use method='exact_mh'"
        )
    out = np.empty((n_anchors, n, d))
    filled = np.zeros(n_anchors, dtype=int)
    for i, a in enumerate(anchors):
        chunk = int(min(2_000_000 // d, max(1000, 1.2 * n / rates[i])))
        while filled[i] < n:
            cand = sample_uniform_sphere(d, chunk, gen)
            acc = cand[gen.random(chunk) < conditional_density_unnorm(a, cand, diag)]
            take = min(len(acc), n - filled[i])
            out[i, filled[i] : filled[i] + take] = acc[:take]
            filled[i] += take
    return out


def sample_marginal(
    d: int,
    n: int,
    rng,
    vmf: VmfParams | None = None,
    alpha: float = 0.0,
) -> np.ndarray:
    """Uniform marginal, or a mixture ``alpha * vMF + (1 - alpha) * uniform``.

    ``alpha = 0`` and ``kappa = 0`` both reduce to the uniform law and draw
    exactly the same points from ``rng``.
    """
    _check_dn(d, n)
    if not 0 <= alpha <= 1:
        raise InvalidArgumentError(f"mixture weight must lie in [0, 1], got {alpha}")
    gen = as_generator(rng)
    if vmf is None or alpha == 0 or vmf.kappa == 0:
        return sample_uniform_sphere(d, n, gen)
    out = sample_uniform_sphere(d, n, gen)
    from_vmf = gen.random(n) < alpha
    k = int(from_vmf.sum())
    if k:
        out[from_vmf] = sample_vmf(vmf, k, gen)
    return out


def cosine_similarities(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = project_to_sphere(a)
    b = project_to_sphere(b)
    return np.sum(a * b, axis=-1)


__all__: Sequence[str] = [
    "CONDITIONAL_METHODS",
    "vmf_envelope_rate",
    "gaussian_envelope_log_bound",
    "gaussian_envelope_rate",
    "log_radial_integral",
    "ConcentrationMatrix",
    "VmfParams",
    "as_diag",
    "conditional_density_unnorm",
    "cosine_similarities",
    "pole",
    "project_to_sphere",
    "sample_conditional",
    "sample_marginal",
    "sample_uniform_sphere",
    "sample_vmf",
]
