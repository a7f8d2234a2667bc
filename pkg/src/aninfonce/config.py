"""Run configuration: flat ``section.key = value`` files with CLI overrides.

A config file holds one assignment per line; ``#`` starts a comment.
Values are Python/JSON-style literals (``10``, ``1e-4``, ``"aninfonce"``,
``[5, 25]``, ``true``, ``none``); bare words are read as strings.  Every
key in ``DEFAULTS`` may be set, and nothing else.
"""
from __future__ import annotations

import ast
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dgp import IN_BATCH, DgpSpec, EnsembleDgp, GeneratorSpec, VmfMixtureMarginal
from .errors import ConfigError, InvalidArgumentError
from .sphere import ConcentrationMatrix, VmfParams, pole

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "out": None,
    # data-generating process
    "dgp.d": 10,
    "dgp.lam": [5.0] * 5 + [25.0] * 5,  # scalar means isotropic
    "dgp.lam_neg": None,
    "dgp.conditional": "projected_gaussian",
    "dgp.mh_burn_in": 200,
    "dgp.mh_thin": 5,
    "dgp.marginal": "uniform",  # or "vmf_mixture"
    "dgp.marginal_kappa": 0.0,
    "dgp.marginal_alpha": 1.0,
    "dgp.generator.n_layers": 3,
    "dgp.generator.slope": 0.2,
    "dgp.generator.max_cond": 25.0,
    "dgp.generator.seed": None,  # none: derived from seed
    # encoder
    "encoder.n_layers": 6,
    "encoder.width": None,  # none: 10 * d
    "encoder.slope": 0.2,
    "encoder.normalize": True,
    # loss
    "loss.kind": "aninfonce",  # infonce | aninfonce | ensemble
    "loss.tau": 1.0,
    "loss.lam_init": 1.0,
    "loss.learn_lam": True,
    "ensemble.lams": None,  # list of diagonals, one per DGP
    "ensemble.update": "summed",  # or "alternating"
    # training loop
    "train.batch_size": 1024,
    "train.negatives": IN_BATCH,  # or an int M of fresh per-anchor negatives
    "train.hard_negatives": 0,  # extra lam_neg negatives appended per anchor
    "train.steps": 20000,
    "train.eval_every": 500,
    "train.metric_eval_size": 4096,
    "train.eval_size": 10000,
    "eval.marginal": "train",  # "train" or "opposite" (vMF mixture at the other pole)
    "eval.with_intercept": True,
    # optimizer
    "optim.lr": 1e-4,
    "optim.lam_lr": None,  # none: same as optim.lr
    "optim.beta1": 0.9,
    "optim.beta2": 0.999,
    "optim.eps": 1e-8,
    "optim.schedule": "constant",  # or "cosine": decay to 0 over train.steps
}


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_assignment(line: str) -> tuple[str, object]:
    if "=" not in line:
        raise ConfigError(f"expected key = value, got {line!r}")
    key, value = line.split("=", 1)
    key = key.strip()
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    return key, parse_value(value)


def load_config_file(path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            key, value = parse_assignment(line)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
        values[key] = value
    return values


def merged(*layers: dict) -> dict:
    flat = dict(DEFAULTS)
    for layer in layers:
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            flat[key] = value
    return flat


def dump_config(flat: dict) -> str:
    return "".join(f"{k} = {_fmt(flat[k])}\n" for k in sorted(flat))


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return repr(v)
    if isinstance(v, np.ndarray):
        v = v.tolist()
    return repr(v)


@dataclass(frozen=True)
class EncoderSpec:
    n_layers: int = 6
    width: int | None = None
    slope: float = 0.2
    normalize: bool = True


@dataclass(frozen=True)
class LossConfig:
    kind: str = "aninfonce"
    tau: float = 1.0
    lam_init: float = 1.0
    learn_lam: bool = True
    ensemble_update: str = "summed"

    def __post_init__(self):
        if self.kind not in ("infonce", "aninfonce", "ensemble"):
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if not self.tau > 0:
            raise ConfigError("loss.tau must be > 0")
        if not self.lam_init > 0:
            raise ConfigError("loss.lam_init must be > 0")
        if self.ensemble_update not in ("summed", "alternating"):
            raise ConfigError("ensemble.update must be 'summed' or 'alternating'")


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lam_lr: float | None = None
    schedule: str = "constant"


@dataclass(frozen=True)
class TrainConfig:
    dgp: DgpSpec
    encoder: EncoderSpec
    loss: LossConfig
    batch_size: int
    negatives: object
    hard_negatives: int
    steps: int
    eval_every: int
    metric_eval_size: int
    eval_size: int
    optim: AdamConfig
    seed: int
    out: str | None = None
    ensemble: EnsembleDgp | None = None
    eval_marginal: str = "train"
    with_intercept: bool = True
    flat: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def d(self) -> int:
        return self.dgp.d

    @property
    def uses_hard_negatives(self) -> bool:
        return self.dgp.lam_neg is not None and (self.hard_negatives > 0 or self.negatives != IN_BATCH)

    @property
    def lam_true(self) -> np.ndarray:
        """Concentration an optimal critic recovers: lam_pos, or lam_pos - lam_neg
        when negatives come from the lam_neg conditional."""
        if self.uses_hard_negatives:
            return self.dgp.lam_pos.diag - self.dgp.lam_neg.diag
        return self.dgp.lam_pos.diag

    def with_overrides(self, **kv) -> "TrainConfig":
        return build_config(merged(self.flat, kv))

    def test_marginal(self) -> VmfMixtureMarginal | None:
        m = self.dgp.marginal
        if self.eval_marginal == "train" or m is None:
            return m
        return VmfMixtureMarginal(VmfParams(-m.vmf.mean_direction, m.vmf.kappa), m.alpha)


def _lam(value, d, name):
    if value is None:
        return None
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(d, float(arr))
    if arr.shape != (d,):
        raise ConfigError(f"{name} needs {d} entries, got {arr.size}")
    try:
        return ConcentrationMatrix(arr)
    except InvalidArgumentError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def build_config(flat: dict) -> TrainConfig:
    """Validate a flat key/value mapping and build the typed run config."""
    flat = merged(flat)
    try:
        return _build(flat)
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc)) from None


def _build(f: dict) -> TrainConfig:
    d = int(f["dgp.d"])
    seed = int(f["seed"])
    gseed = seed if f["dgp.generator.seed"] is None else int(f["dgp.generator.seed"])
    gspec = GeneratorSpec(
        d,
        int(f["dgp.generator.n_layers"]),
        float(f["dgp.generator.slope"]),
        float(f["dgp.generator.max_cond"]),
        gseed,
    )
    loss = LossConfig(
        str(f["loss.kind"]),
        float(f["loss.tau"]),
        float(f["loss.lam_init"]),
        bool(f["loss.learn_lam"]),
        str(f["ensemble.update"]),
    )
    lam_rows = None
    if loss.kind == "ensemble":
        if f["ensemble.lams"] is None or len(f["ensemble.lams"]) < 2:
            raise ConfigError("loss.kind = 'ensemble' needs ensemble.lams with >= 2 diagonals")
        lam_rows = [_lam(row, d, "ensemble.lams") for row in f["ensemble.lams"]]
        lam_pos = lam_rows[0]
    else:
        lam_pos = _lam(f["dgp.lam"], d, "dgp.lam")
    marginal = None
    if f["dgp.marginal"] == "vmf_mixture":
        marginal = VmfMixtureMarginal(VmfParams(pole(d), float(f["dgp.marginal_kappa"])), float(f["dgp.marginal_alpha"]))
    elif f["dgp.marginal"] != "uniform":
        raise ConfigError(f"unknown marginal {f['dgp.marginal']!r}")
    dgp = DgpSpec(
        d,
        lam_pos,
        gspec,
        _lam(f["dgp.lam_neg"], d, "dgp.lam_neg"),
        str(f["dgp.conditional"]),
        marginal,
        int(f["dgp.mh_burn_in"]),
        int(f["dgp.mh_thin"]),
    )
    ensemble = EnsembleDgp.from_lams(dgp, [r.diag for r in lam_rows]) if lam_rows else None
    negatives = f["train.negatives"]
    if negatives != IN_BATCH:
        try:
            negatives = int(negatives)
        except (TypeError, ValueError):
            raise ConfigError(f"train.negatives must be 'in-batch' or an int, got {negatives!r}") from None
        if negatives < 1:
            raise ConfigError("train.negatives must be >= 1")
    hard = int(f["train.hard_negatives"])
    if hard and dgp.lam_neg is None:
        raise ConfigError("train.hard_negatives needs dgp.lam_neg")
    batch = int(f["train.batch_size"])
    if batch < 2:
        raise ConfigError("train.batch_size must be >= 2")
    steps, every = int(f["train.steps"]), int(f["train.eval_every"])
    if steps < 0 or every < 1:
        raise ConfigError("train.steps must be >= 0 and train.eval_every >= 1")
    if f["eval.marginal"] not in ("train", "opposite"):
        raise ConfigError("eval.marginal must be 'train' or 'opposite'")
    enc = EncoderSpec(
        int(f["encoder.n_layers"]),
        None if f["encoder.width"] is None else int(f["encoder.width"]),
        float(f["encoder.slope"]),
        bool(f["encoder.normalize"]),
    )
    lam_lr = None if f["optim.lam_lr"] is None else float(f["optim.lam_lr"])
    optim = AdamConfig(
        float(f["optim.lr"]), float(f["optim.beta1"]), float(f["optim.beta2"]), float(f["optim.eps"]), lam_lr, str(f["optim.schedule"])
    )
    if optim.schedule not in ("constant", "cosine"):
        raise ConfigError("optim.schedule must be 'constant' or 'cosine'")
    if not optim.lr > 0 or (lam_lr is not None and not lam_lr > 0):
        raise ConfigError("learning rates must be > 0")
    return TrainConfig(
        dgp=dgp,
        encoder=enc,
        loss=loss,
        batch_size=batch,
        negatives=negatives,
        hard_negatives=hard,
        steps=steps,
        eval_every=every,
        metric_eval_size=int(f["train.metric_eval_size"]),
        eval_size=int(f["train.eval_size"]),
        optim=optim,
        seed=seed,
        out=f["out"],
        ensemble=ensemble,
        eval_marginal=str(f["eval.marginal"]),
        with_intercept=bool(f["eval.with_intercept"]),
        flat=dict(f),
    )


@dataclass(frozen=True)
class SweepSpec:
    """Cartesian product of config-key axes, each cell repeated over seeds."""

    axes: dict  # dotted key -> list of values
    repeats: int = 1
    seed_base: int = 0

    def cells(self) -> list[dict]:
        keys = list(self.axes)
        grids = [list(self.axes[k]) for k in keys]
        out: list[dict] = []
        if any(len(g) == 0 for g in grids):
            return out

        def rec(i, acc):
            if i == len(keys):
                for r in range(self.repeats):
                    out.append({**acc, "seed": self.seed_base + r})
                return
            for v in grids[i]:
                rec(i + 1, {**acc, keys[i]: v})

        rec(0, {})
        return out
