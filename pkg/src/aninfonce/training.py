"""Training loop: sample, generate, embed, contrast, backprop, Adam."""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import TrainConfig, dump_config
from .dgp import IN_BATCH, DgpSpec, generate_observations, make_generator, sample_latent_batch
from .errors import InvalidArgumentError, NumericOverflowError
from .evaluation import EvalReport, evaluate_latents
from .losses import aninfonce_loss, infonce_loss
from .nn import AdamState, LearnableConcentration, MlpNetwork, adam_step, forward, make_encoder, save_checkpoint
from .rng import RngStream
from .sphere import sample_marginal, sample_uniform_sphere

log = logging.getLogger(__name__)

# stream ids under the run seed
_INIT, _DATA, _EVAL, _FINAL = 1, 2, 3, 4


@dataclass
class MetricRow:
    step: int
    loss: float
    r2_all: float
    r2_content: float
    r2_style: float
    lambda_hat: list  # one diagonal per learnable concentration
    wall_s: float

    def csv_fields(self) -> list:
        row = [self.step, self.loss, self.r2_all, self.r2_content, self.r2_style]
        for lam in self.lambda_hat:
            row.extend(lam)
        return row + [self.wall_s]


def csv_header(d: int, n_lams: int) -> list[str]:
    cols = ["step", "loss", "r2_all", "r2_content", "r2_style"]
    for k in range(n_lams):
        tag = "lambda_hat" if k == 0 else f"lambda_hat_m{k}"
        cols.extend(f"{tag}_{i}" for i in range(d))
    return cols + ["wall_s"]


@dataclass
class TrainResult:
    report: EvalReport
    rows: list[MetricRow]
    encoder: MlpNetwork
    lams: list[LearnableConcentration]
    generator: MlpNetwork
    config: TrainConfig
    extra: dict = field(default_factory=dict)


class Trainer:
    """Holds the mutable state of one run; ``step()`` performs one update."""

    def __init__(self, config: TrainConfig, encoder: MlpNetwork | None = None, lams=None):
        self.config = config
        self.root = RngStream(config.seed)
        self.generator = make_generator(config.dgp.generator)
        d = config.d
        if encoder is None:
            e = config.encoder
            encoder = make_encoder(d, self.root.split(_INIT), e.n_layers, e.width, e.slope, e.normalize)
        self.encoder = encoder
        k = config.ensemble.k if config.loss.kind == "ensemble" else 1
        if lams is None:
            lams = [LearnableConcentration.init(d, config.loss.lam_init) for _ in range(k)]
        self.lams = lams
        o = config.optim
        self.adam = AdamState(o.lr, o.beta1, o.beta2, o.eps)
        if o.lam_lr is not None:
            self.adam.lr_by_param = {f"lam{i}": o.lam_lr for i in range(k)}
        self.step_count = 0
        self.last_loss = float("nan")
        self.window = (0, config.steps)  # (first step, length) of the lr schedule

    def clone(self, config: TrainConfig | None = None) -> "Trainer":
        """Independent copy of the current state, optionally under a new config
        (same generator required).  Continues the data stream at step_count."""
        config = config or self.config
        if config.dgp.generator != self.config.dgp.generator:
            raise InvalidArgumentError("a cloned trainer must keep the generator")
        lams = [LearnableConcentration(lam.log_diag.copy()) for lam in self.lams]
        other = Trainer(config, self.encoder.copy(), lams)
        other.adam = copy.deepcopy(self.adam)
        other.step_count = self.step_count
        other.last_loss = self.last_loss
        return other

    # parameters -------------------------------------------------------------
    def params(self) -> dict[str, np.ndarray]:
        out = self.encoder.params("enc.")
        for i, lam in enumerate(self.lams):
            out[f"lam{i}"] = lam.log_diag
        return out

    def members(self) -> list[DgpSpec]:
        c = self.config
        return list(c.ensemble.members) if c.loss.kind == "ensemble" else [c.dgp]

    # data -------------------------------------------------------------------
    def sample_batch(self, dgp: DgpSpec, rng):
        c = self.config
        gen = rng.generator() if isinstance(rng, RngStream) else rng
        latents = sample_latent_batch(dgp, c.batch_size, c.negatives, gen)
        hard = None
        if c.hard_negatives:
            hard = dgp.conditional(latents.anchors, dgp.lam_neg, c.hard_negatives, gen)
        obs = generate_observations(self.generator, latents)
        negs = obs.negatives
        if hard is not None:
            h = self.generator(hard.reshape(-1, c.d)).reshape(hard.shape)
            negs = h if negs is None else np.concatenate([negs, h], axis=1)
        in_batch = c.negatives == IN_BATCH
        return obs.anchors, obs.positives, negs, in_batch, latents

    def _loss_terms(self, batches, tape, active):
        """Embed all batches with one forward pass and sum the active loss terms."""
        c = self.config
        n, d = c.batch_size, c.d
        pieces, layout = [], []
        for a, p, negs, _ in batches:
            pieces.extend([a, p])
            m = 0 if negs is None else negs.shape[1]
            if m:
                pieces.append(negs.reshape(-1, d))
            layout.append(m)
        x = np.concatenate(pieces, axis=0)
        emb = forward(self.encoder, x, tape)
        total, pos = None, 0
        lam_values = {}
        for i, ((_, _, _, in_batch), m) in enumerate(zip(batches, layout)):
            ea = _rows(emb, pos, n)
            ep = _rows(emb, pos + n, n)
            pos += 2 * n
            en = None
            if m:
                en = _rows(emb, pos, n * m).reshape(n, m, d)
                pos += n * m
            if i not in active:
                continue
            if c.loss.kind == "infonce":
                value = infonce_loss(ea, ep, en, c.loss.tau, in_batch=in_batch)
            else:
                lam = self.lams[i]
                if tape is not None and c.loss.learn_lam:
                    lam_t = lam.materialize(tape, f"lam{i}")
                else:
                    lam_t = lam.value
                value = aninfonce_loss(ea, ep, en, lam_t, in_batch=in_batch)
            lam_values[i] = value
            total = value.loss if total is None else total + value.loss
        return total, lam_values

    def step(self):
        c = self.config
        members = self.members()
        rng = self.root.split(_DATA, self.step_count)
        gen = rng.generator()
        batches = [self.sample_batch(m, gen)[:4] for m in members]
        if c.loss.kind == "ensemble" and c.loss.ensemble_update == "alternating":
            active = {self.step_count % len(members)}
        else:
            active = set(range(len(members)))
        tape = ad.GradientTape()
        loss, _ = self._loss_terms(batches, tape, active)
        grads = ad.backward(tape, loss)
        params = self.params()
        if c.optim.schedule == "cosine":
            frac = min(1.0, (self.step_count - self.window[0]) / max(1, self.window[1]))
            self.adam.scale = 0.5 * (1.0 + math.cos(math.pi * frac))
        adam_step(self.adam, params, grads)
        self.step_count += 1
        self.last_loss = float(loss.data)
        return self.last_loss

    # evaluation ---------------------------------------------------------------
    def embed_latents(self, z: np.ndarray) -> np.ndarray:
        return forward(self.encoder, self.generator(z))

    def eval_latents(self, n: int, rng) -> np.ndarray:
        c = self.config
        marg = c.test_marginal()
        if marg is None:
            return sample_uniform_sphere(c.d, n, rng)
        return sample_marginal(c.d, n, rng, marg.vmf, marg.alpha)

    def fresh_loss(self, rng, n_batches: int = 1) -> tuple[float, float]:
        """Loss on fresh batches; returns (mean, standard error over anchors)."""
        gen = rng.generator() if isinstance(rng, RngStream) else rng
        per = []
        members = self.members()
        for _ in range(n_batches):
            batches = [self.sample_batch(m, gen)[:4] for m in members]
            _, values = self._loss_terms(batches, None, set(range(len(members))))
            per.append(np.sum([values[i].per_anchor for i in values], axis=0))
        per = np.concatenate(per)
        return float(per.mean()), float(per.std(ddof=1) / np.sqrt(per.size))

    def evaluate(self, n: int, rng, loss_batches: int = 1, ortho: bool = True) -> EvalReport:
        c = self.config
        stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
        z = self.eval_latents(n, stream.split(0).generator())
        z_hat = self.embed_latents(z)
        lam_hat = self.lams[0].value if c.loss.kind != "infonce" else None
        truth = c.lam_true if c.loss.kind != "ensemble" else self.members()[0].lam_pos.diag
        report = evaluate_latents(z, z_hat, truth, lam_hat, c.with_intercept, ortho=ortho)
        report.loss, report.loss_stderr = self.fresh_loss(stream.split(1), loss_batches)
        if len(self.lams) > 1 and c.loss.kind == "ensemble":
            report.extra["lambda_hat_members"] = [lam.value.tolist() for lam in self.lams]
        return report

    def metric_row(self, t0: float) -> MetricRow:
        c = self.config
        rep = self.evaluate(c.metric_eval_size, self.root.split(_EVAL, self.step_count), ortho=False)
        return MetricRow(
            self.step_count,
            rep.loss,
            rep.r2_all,
            rep.r2_content,
            rep.r2_style,
            [lam.value.tolist() for lam in self.lams] if c.loss.kind != "infonce" else [],
            time.perf_counter() - t0,
        )

    def save(self, path, **meta):
        lams = {f"lam{i}": lam for i, lam in enumerate(self.lams)}
        save_checkpoint(path, {"encoder": self.encoder, "generator": self.generator}, lams, {"step": self.step_count, **meta})


def _rows(t, start, count):
    if isinstance(t, ad.Tensor):
        return ad.slice_rows(t, start, count)
    return t[start : start + count]


def run_training(
    config: TrainConfig,
    encoder: MlpNetwork | None = None,
    lams=None,
    on_row=None,
    trainer: Trainer | None = None,
) -> TrainResult:
    """Train per ``config``; emits a MetricRow every ``eval_every`` steps.

    With ``config.out`` set, writes ``metrics.csv``, ``report.json``,
    ``config.txt`` and ``checkpoint.npz`` into that directory.  A numeric
    overflow saves the last valid parameters as ``checkpoint.npz`` before
    re-raising.
    """
    c = config
    tr = trainer or Trainer(c, encoder, lams)
    out = Path(c.out) if c.out else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dump_config(c.flat))
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(csv_header(c.d, len(tr.lams) if c.loss.kind != "infonce" else 0))
    rows: list[MetricRow] = []
    t0 = time.perf_counter()

    def emit():
        row = tr.metric_row(t0)
        rows.append(row)
        if writer is not None:
            writer.writerow(row.csv_fields())
            fh.flush()
        if on_row is not None:
            on_row(row)
        log.info("step %d loss %.4f r2 %.3f (content %.3f style %.3f)", row.step, row.loss, row.r2_all, row.r2_content, row.r2_style)

    try:
        start = tr.step_count
        tr.window = (start, c.steps)
        if c.steps > 0 and c.eval_every <= c.steps:
            emit()
        for _ in range(c.steps):
            try:
                tr.step()
            except NumericOverflowError:
                if out is not None:
                    tr.save(out / "checkpoint.npz", aborted=True)
                raise
            if (tr.step_count - start) % c.eval_every == 0:
                emit()
        n_loss_batches = max(1, -(-c.eval_size // c.batch_size))
        report = tr.evaluate(c.eval_size, tr.root.split(_FINAL), loss_batches=n_loss_batches)
        report.extra["steps"] = tr.step_count
        if out is not None:
            report.to_json(out / "report.json")
            tr.save(out / "checkpoint.npz")
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(report, rows, tr.encoder, tr.lams, tr.generator, c)
