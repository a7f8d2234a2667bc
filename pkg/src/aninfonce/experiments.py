"""Experiment drivers built on ``run_training``.

Every driver takes a flat base config (see ``config.DEFAULTS``) plus its own
axes, runs one training per cell in an isolated output directory, and
returns a result object with a ``table`` of plain dicts.  A failing cell is
recorded (``error`` set, ``error.txt`` written) without stopping the others.
"""
from __future__ import annotations

import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .config import SweepSpec, TrainConfig, build_config, merged
from .dgp import IN_BATCH, DgpSpec, GeneratorSpec, generate_observations, invert_generator, make_generator, sample_latent_batch
from .errors import InvalidArgumentError
from .evaluation import EvalReport, compare_lambda, domain_classifier_accuracy
from .losses import aninfonce_loss, bayes_optimal_loss
from .nn import forward
from .rng import RngStream
from .sphere import as_diag, sample_marginal, sample_uniform_sphere
from .training import MetricRow, Trainer, run_training

log = logging.getLogger(__name__)

R2_TARGETS = (0.70, 0.80, 0.90)


@dataclass
class CellResult:
    index: int
    overrides: dict
    out: str | None
    report: EvalReport | None = None
    rows: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class SweepResult:
    cells: list[CellResult]
    table: list[dict]

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.cells)


def _cell_dir(out, index: int) -> str | None:
    return None if out is None else str(Path(out) / f"cell_{index:03d}")


def run_cell(base: dict, overrides: dict, index: int = 0, out=None, post=None) -> CellResult:
    """Train one cell; exceptions are captured in the result."""
    cell_out = _cell_dir(out, index)
    res = CellResult(index, dict(overrides), cell_out)
    try:
        cfg = build_config(merged(base, overrides, {"out": cell_out}))
        tr = run_training(cfg)
        res.report, res.rows = tr.report, tr.rows
        if post is not None:
            res.extra.update(post(tr))
    except Exception as exc:  # noqa: BLE001 - one bad cell must not sink the sweep
        res.error = f"{type(exc).__name__}: {exc}"
        log.error("cell %d failed: %s", index, res.error)
        if cell_out is not None:
            Path(cell_out).mkdir(parents=True, exist_ok=True)
            (Path(cell_out) / "error.txt").write_text(traceback.format_exc())
    return res


def _run_cell_args(args):
    return run_cell(*args)


def run_sweep(base: dict, spec: SweepSpec, out=None, workers: int = 1, post=None) -> list[CellResult]:
    """Run every cell of ``spec``; results come back in enumeration order."""
    cells = spec.cells()
    jobs = [(base, cell, i, out, post) for i, cell in enumerate(cells)]
    if workers > 1 and len(jobs) > 1 and post is None:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_run_cell_args, jobs))
    return [run_cell(*job) for job in jobs]


def first_step_reaching(rows: list[MetricRow], target: float, attr: str = "r2_all") -> int | None:
    for row in rows:
        if getattr(row, attr) >= target:
            return row.step
    return None


# --- Lambda sweep -------------------------------------------------------------


def run_lambda_sweep(
    base: dict,
    lam2_values,
    lam1: float = 5.0,
    kinds=("infonce", "aninfonce"),
    repeats: int = 1,
    out=None,
    workers: int = 1,
) -> SweepResult:
    """Half the dimensions fixed at ``lam1``, the other half swept over ``lam2``."""
    d = int(merged(base)["dgp.d"])
    h = d // 2
    lams = [[float(lam1)] * h + [float(v)] * (d - h) for v in lam2_values]
    spec = SweepSpec({"dgp.lam": lams, "loss.kind": list(kinds)}, repeats, int(merged(base)["seed"]))
    cells = run_sweep(base, spec, out, workers)
    table = []
    for c in cells:
        lam = c.overrides["dgp.lam"]
        row = {"lam2": lam[-1], "kind": c.overrides["loss.kind"], "seed": c.overrides["seed"], "error": c.error}
        if c.report is not None:
            row.update(r2_all=c.report.r2_all, r2_content=c.report.r2_content, r2_style=c.report.r2_style)
        table.append(row)
    return SweepResult(cells, table)


# --- Learning dynamics ----------------------------------------------------------


@dataclass
class DynamicsResult:
    report: EvalReport
    rows: list[MetricRow]
    lambda_match: object
    content_step: int | None  # first logged step with r2_content >= threshold
    style_step: int | None
    bayes: object | None = None


def run_dynamics(config: TrainConfig, threshold: float = 0.9, bayes_mc: int = 0, rng=None) -> DynamicsResult:
    """Train with a dense metric stream and summarize the trajectories.

    With ``bayes_mc > 0`` the Bayes-optimal loss for the run's DGP (in-batch
    negatives, M = N - 1) is estimated for comparison.
    """
    if config.eval_every > 500:
        raise InvalidArgumentError("dynamics need eval_every <= 500 to resolve transitions")
    res = run_training(config)
    lam_hat = res.lams[0].value
    match = compare_lambda(lam_hat, config.lam_true) if config.loss.kind != "infonce" else None
    bayes = None
    if bayes_mc:
        bayes = bayes_optimal_loss(
            config.dgp.lam_pos,
            m=config.batch_size - 1,
            n_mc=bayes_mc,
            rng=RngStream(config.seed, 0xBA7E5) if rng is None else rng,
        )
    return DynamicsResult(
        res.report,
        res.rows,
        match,
        first_step_reaching(res.rows, threshold, "r2_content"),
        first_step_reaching(res.rows, threshold, "r2_style"),
        bayes,
    )


def analytic_baseline_loss(config: TrainConfig, n_batches: int = 10, rng=None) -> tuple[float, float]:
    """Loss of the ideal encoder f = g^-1 with the true concentration, on fresh
    in-batch batches; returns (mean, standard error over anchors)."""
    gen_rng = RngStream(config.seed, 0xA7A1).generator() if rng is None else rng
    lam = config.lam_true
    g = make_generator(config.dgp.generator)
    per = []
    for _ in range(n_batches):
        obs = generate_observations(g, sample_latent_batch(config.dgp, config.batch_size, IN_BATCH, gen_rng))
        a, p = invert_generator(g, obs.anchors), invert_generator(g, obs.positives)
        per.append(aninfonce_loss(a, p, None, lam).per_anchor)
    per = np.concatenate(per)
    return float(per.mean()), float(per.std(ddof=1) / np.sqrt(per.size))


# --- Dimension / batch sweep ------------------------------------------------------


def run_dim_batch_sweep(
    base: dict,
    dims=(5, 10, 20),
    batch_sizes=(1024,),
    repeats: int = 2,
    targets=R2_TARGETS,
    out=None,
    workers: int = 1,
) -> SweepResult:
    """Final R^2 and steps-to-target per (d, N) cell.  ``dgp.lam`` in ``base``
    should be a scalar so it adapts to every d."""
    spec = SweepSpec({"dgp.d": list(dims), "train.batch_size": list(batch_sizes)}, repeats, int(merged(base)["seed"]))
    cells = run_sweep(base, spec, out, workers)
    table = []
    for c in cells:
        row = {
            "d": c.overrides["dgp.d"],
            "batch_size": c.overrides["train.batch_size"],
            "seed": c.overrides["seed"],
            "error": c.error,
        }
        if c.report is not None:
            row["r2_all"] = c.report.r2_all
            for t in targets:
                row[f"steps_to_{t:.2f}"] = first_step_reaching(c.rows, t)
        table.append(row)
    return SweepResult(cells, table)


def mean_by(table: list[dict], key: str, value: str = "r2_all") -> dict:
    groups: dict = {}
    for row in table:
        if row.get(value) is not None:
            groups.setdefault(row[key], []).append(row[value])
    return {k: float(np.mean(v)) for k, v in sorted(groups.items())}


def is_monotone(values, increasing: bool, slack: float = 0.0) -> bool:
    v = list(values)
    if increasing:
        return all(b >= a - slack for a, b in zip(v, v[1:]))
    return all(b <= a + slack for a, b in zip(v, v[1:]))


# --- Hard negatives -----------------------------------------------------------------


@dataclass
class HnScanResult:
    gammas: list[float]
    losses: list[float]
    stderrs: list[float]

    @property
    def argmin(self) -> float:
        return self.gammas[int(np.argmin(self.losses))]


def run_hn_scan(
    lam_pos,
    lam_neg,
    gammas,
    d: int | None = None,
    n_negatives: int = 64,
    batch_size: int = 1024,
    n_batches: int = 20,
    seed: int = 0,
    encoder=None,
    generator=None,
    method: str = "exact",
) -> HnScanResult:
    """AnInfoNCE loss with ``L^ = gamma I`` over hard-negative batches.

    Each anchor gets one positive (``lam_pos`` conditional) and
    ``n_negatives`` negatives from the ``lam_neg`` conditional, or uniform
    ones when ``lam_neg`` is None.  Without an encoder the ground-truth
    encoder is used (embeddings are the latents); with one, observations
    ``generator(z)`` are embedded.  All gammas see the same batches.
    """
    gammas = [float(g) for g in gammas]
    if not gammas:
        raise InvalidArgumentError("empty gamma grid")
    pos = as_diag(lam_pos, d)
    d = pos.size
    neg = None if lam_neg is None else as_diag(lam_neg, d)
    if neg is not None and not np.all(pos > neg):
        raise InvalidArgumentError("lam_pos - lam_neg must be positive definite")
    if (encoder is None) != (generator is None):
        raise InvalidArgumentError("a trained encoder needs its generator")
    dgp = DgpSpec(d, pos, GeneratorSpec(d), neg, method)
    gen = RngStream(seed, 0x4E5C).generator()
    per = np.zeros((len(gammas), n_batches * batch_size))
    for b in range(n_batches):
        lat = sample_latent_batch(dgp, batch_size, n_negatives, gen)
        if encoder is None:
            a, p, n = lat.anchors, lat.positives, lat.negatives
        else:
            obs = generate_observations(generator, lat)
            a = forward(encoder, obs.anchors)
            p = forward(encoder, obs.positives)
            n = forward(encoder, obs.negatives.reshape(-1, d)).reshape(obs.negatives.shape[:2] + (-1,))
        sl = slice(b * batch_size, (b + 1) * batch_size)
        for i, g in enumerate(gammas):
            per[i, sl] = aninfonce_loss(a, p, n, np.full(a.shape[1], g), in_batch=False).per_anchor
    losses = per.mean(axis=1).tolist()
    stderrs = (per.std(axis=1, ddof=1) / np.sqrt(per.shape[1])).tolist()
    return HnScanResult(gammas, losses, stderrs)


@dataclass
class FinetuneResult:
    seed: int
    before: EvalReport
    regular: EvalReport  # equal-budget continued regular training
    finetuned: EvalReport

    @property
    def improvement(self) -> float:
        return self.finetuned.r2_all - self.regular.r2_all


def run_hn_finetune(base: dict, finetune_steps: int, hard_negatives: int = 3, seeds=(0,), out=None) -> list[FinetuneResult]:
    """Pretrain per ``base``, then continue from the same state twice: with
    ``hard_negatives`` extra ``lam_neg`` negatives per anchor appended to the
    in-batch ones, and with regular batches for the same number of steps.
    """
    results = []
    for seed in seeds:
        root = None if out is None else Path(out) / f"seed_{seed}"
        pre_cfg = build_config(merged(base, {"seed": seed, "train.hard_negatives": 0, "out": _sub(root, "pretrain")}))
        if pre_cfg.dgp.lam_neg is None:
            raise InvalidArgumentError("hard-negative finetuning needs dgp.lam_neg")
        pre = Trainer(pre_cfg)
        before = run_training(pre_cfg, trainer=pre).report
        reg_cfg = pre_cfg.with_overrides(**{"train.steps": finetune_steps, "out": _sub(root, "regular")})
        ft_cfg = pre_cfg.with_overrides(
            **{"train.steps": finetune_steps, "train.hard_negatives": hard_negatives, "out": _sub(root, "finetune")}
        )
        regular = run_training(reg_cfg, trainer=pre.clone(reg_cfg)).report
        finetuned = run_training(ft_cfg, trainer=pre.clone(ft_cfg)).report
        results.append(FinetuneResult(seed, before, regular, finetuned))
    return results


def _sub(root, name):
    return None if root is None else str(root / name)


# --- Loss ensemble --------------------------------------------------------------------


def ensemble_lams(d: int = 20, high: float = 400.0, a: float = 15.0, b: float = 250.0, n_high: int = 3) -> list[list[float]]:
    """Two diagonals sharing ``n_high`` dims at ``high``; the remaining dims
    alternate between ``a`` and ``b`` in opposite phase across the two."""
    rest = d - n_high
    n_a = rest // 2  # 8 of 17 at a for d = 20
    lam1 = [high] * n_high + [a] * n_a + [b] * (rest - n_a)
    lam2 = [high] * n_high + [b] * n_a + [a] * (rest - n_a)
    return [lam1, lam2]


def lambda_anticorrelation(lam1, lam2, n_shared: int = 3) -> float:
    """Pearson correlation of two learned diagonals over all but the ``n_shared``
    dims with the largest combined value (the dims shared by both DGPs)."""
    l1, l2 = np.asarray(lam1, float), np.asarray(lam2, float)
    keep = np.argsort(l1 + l2)[: l1.size - n_shared]
    return float(stats.pearsonr(l1[keep], l2[keep])[0])


def run_ensemble(base: dict, lams=None, seeds=(0, 1), out=None) -> SweepResult:
    """InfoNCE and AnInfoNCE on the first DGP vs the loss ensemble over both."""
    d = int(merged(base)["dgp.d"])
    lams = lams or ensemble_lams(d)
    table, cells = [], []
    idx = 0
    for seed in seeds:
        for kind in ("infonce", "aninfonce", "ensemble"):
            ov = {"seed": seed, "loss.kind": kind, "dgp.lam": lams[0]}
            if kind == "ensemble":
                ov["ensemble.lams"] = lams
            cell = run_cell(base, ov, idx, out)
            idx += 1
            cells.append(cell)
            row = {"seed": seed, "kind": kind, "error": cell.error}
            if cell.report is not None:
                row["r2_all"] = cell.report.r2_all
                if kind == "ensemble":
                    members = cell.report.extra.get("lambda_hat_members")
                    row["lambda_hat_members"] = members
                    row["lambda_corr"] = lambda_anticorrelation(*members[:2])
            table.append(row)
    return SweepResult(cells, table)


# --- Marginal shift ----------------------------------------------------------------------


def _domain_post(n: int, seed: int):
    def post(tr):
        c = tr.config
        gen = tr.generator
        stream = RngStream(c.seed, 0xD0A1)
        m_train = c.dgp.marginal
        m_test = c.test_marginal()
        if m_train is None:
            z0 = sample_uniform_sphere(c.d, n, stream.split(0).generator())
            z1 = sample_uniform_sphere(c.d, n, stream.split(1).generator())
        else:
            z0 = sample_marginal(c.d, n, stream.split(0).generator(), m_train.vmf, m_train.alpha)
            z1 = sample_marginal(c.d, n, stream.split(1).generator(), m_test.vmf, m_test.alpha)
        e0 = forward(tr.encoder, gen(z0))
        e1 = forward(tr.encoder, gen(z1))
        return {"domain_accuracy": domain_classifier_accuracy(e0, e1, rng=seed)}

    return post


def run_marginal_shift(base: dict, kappas=(0.0, 5.0, 20.0, 50.0), alpha: float = 1.0, seeds=(0,), n_domain: int = 5000, out=None) -> SweepResult:
    """Train with a vMF-mixture marginal at the north pole, evaluate on the
    mirrored mixture at the south pole, and measure how separable the two
    embedding distributions are."""
    overrides = {"dgp.marginal": "vmf_mixture", "dgp.marginal_alpha": alpha, "eval.marginal": "opposite"}
    table, cells = [], []
    idx = 0
    for seed in seeds:
        for kappa in kappas:
            ov = {**overrides, "seed": seed, "dgp.marginal_kappa": float(kappa)}
            cell = run_cell(base, ov, idx, out, post=_domain_post(n_domain, seed))
            idx += 1
            cells.append(cell)
            row = {"seed": seed, "kappa": float(kappa), "alpha": alpha, "error": cell.error}
            if cell.report is not None:
                row["r2_all"] = cell.report.r2_all
                row["domain_accuracy"] = cell.extra["domain_accuracy"]
            table.append(row)
    return SweepResult(cells, table)


def spearman_by_seed(table: list[dict], x: str = "domain_accuracy", y: str = "r2_all") -> dict:
    out = {}
    for seed in sorted({r["seed"] for r in table}):
        rows = [r for r in table if r["seed"] == seed and r.get(y) is not None]
        out[seed] = float(stats.spearmanr([r[x] for r in rows], [r[y] for r in rows])[0]) if len(rows) > 1 else float("nan")
    return out
