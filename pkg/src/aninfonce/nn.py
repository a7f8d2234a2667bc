"""MLP networks, the learnable concentration, Adam, and checkpoints."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import InvalidArgumentError, NumericOverflowError
from .rng import as_generator

CHECKPOINT_VERSION = 1


@dataclass
class MlpNetwork:
    """Stack of affine layers ``y = x @ W + b`` with LeakyReLU in between.

    The activation follows every layer except the last.  With
    ``output_normalize`` the final outputs are projected onto the sphere.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    slope: float = 0.2
    output_normalize: bool = False

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidArgumentError("need one bias per weight matrix and at least one layer")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise InvalidArgumentError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise InvalidArgumentError(f"layer {i}: input width does not chain")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{i}"] = w
            out[f"{prefix}b{i}"] = b
        return out

    def copy(self) -> "MlpNetwork":
        return MlpNetwork(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.slope,
            self.output_normalize,
        )

    def __call__(self, x) -> np.ndarray:
        return forward(self, x)


def forward(net: MlpNetwork, inputs, tape: ad.GradientTape | None = None, prefix: str = "enc."):
    """Run ``net`` on a batch.

    Without a tape this is plain numpy.  With a tape, the parameters are
    watched under ``prefix + "W{i}"`` / ``prefix + "b{i}"`` and the returned
    value is a ``Tensor``.
    """
    if tape is None:
        h = np.asarray(inputs, dtype=np.float64)
        if h.shape[-1] != net.in_dim:
            raise InvalidArgumentError(f"input dim {h.shape[-1]} != network input dim {net.in_dim}")
        last = net.n_layers - 1
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            h = h @ w + b
            if i < last:
                h = h * ((h > 0) * (1.0 - net.slope) + net.slope)
        if net.output_normalize:
            norm = np.linalg.norm(h, axis=-1, keepdims=True)
            h = h / norm
        if not np.all(np.isfinite(h)):
            raise NumericOverflowError("non-finite network output")
        return h

    h = inputs if isinstance(inputs, ad.Tensor) else tape.constant(inputs)
    if h.shape[-1] != net.in_dim:
        raise InvalidArgumentError(f"input dim {h.shape[-1]} != network input dim {net.in_dim}")
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ tape.watch(w, f"{prefix}W{i}") + tape.watch(b, f"{prefix}b{i}")
        if i < last:
            h = ad.leaky_relu(h, net.slope)
    if net.output_normalize:
        h = ad.normalize_rows(h)
    if not np.all(np.isfinite(h.data)):
        raise NumericOverflowError("non-finite network output")
    return h


def make_encoder(
    d: int,
    rng,
    n_layers: int = 6,
    width: int | None = None,
    slope: float = 0.2,
    output_normalize: bool = True,
    out_dim: int | None = None,
) -> MlpNetwork:
    """He-initialised MLP ``R^d -> R^out_dim`` (hidden width defaults to 10 d)."""
    if n_layers < 1:
        raise InvalidArgumentError("encoder needs at least one layer")
    gen = as_generator(rng)
    width = 10 * d if width is None else int(width)
    out_dim = d if out_dim is None else out_dim
    dims = [d] + [width] * (n_layers - 1) + [out_dim]
    gain = np.sqrt(2.0 / (1.0 + slope**2))
    weights = [gen.standard_normal((a, b)) * gain / np.sqrt(a) for a, b in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(b) for b in dims[1:]]
    return MlpNetwork(weights, biases, slope, output_normalize)


@dataclass
class LearnableConcentration:
    """Trainable diagonal ``exp(log_diag)``; always strictly positive."""

    log_diag: np.ndarray

    @classmethod
    def init(cls, d: int, value: float = 1.0) -> "LearnableConcentration":
        return cls(np.full(d, np.log(value)))

    @property
    def value(self) -> np.ndarray:
        return np.exp(self.log_diag)

    def materialize(self, tape: ad.GradientTape | None = None, name: str = "log_lam"):
        if tape is None:
            return self.value
        return ad.exp(tape.watch(self.log_diag, name))


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    lr_by_param: dict = field(default_factory=dict)  # per-parameter override of lr
    scale: float = 1.0  # schedule multiplier applied to every learning rate
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    """Bias-corrected Adam update, applied in place to ``params``."""
    for name, g in grads.items():
        if name not in params:
            raise InvalidArgumentError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise InvalidArgumentError(f"gradient shape mismatch for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericOverflowError(f"non-finite gradient for {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= state.scale * state.lr_by_param.get(name, state.lr) * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def save_checkpoint(path, nets: dict[str, MlpNetwork], lams: dict[str, LearnableConcentration] | None = None, meta=None):
    """Write networks and concentrations to an ``.npz`` file.

    Layout: ``{net}.W{i}`` / ``{net}.b{i}`` arrays, ``{lam}.log_diag`` arrays,
    and a JSON ``__meta__`` string holding the format version, layer counts,
    slopes, normalize flags and any caller metadata.
    """
    arrays = {}
    info = {"version": CHECKPOINT_VERSION, "nets": {}, "lams": [], "meta": meta or {}}
    for name, net in nets.items():
        info["nets"][name] = {
            "n_layers": net.n_layers,
            "slope": net.slope,
            "output_normalize": net.output_normalize,
            "shapes": [list(w.shape) for w in net.weights],
        }
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            arrays[f"{name}.W{i}"] = w
            arrays[f"{name}.b{i}"] = b
    for name, lam in (lams or {}).items():
        info["lams"].append(name)
        arrays[f"{name}.log_diag"] = lam.log_diag
    arrays["__meta__"] = np.array(json.dumps(info))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        info = json.loads(str(data["__meta__"]))
        if info.get("version") != CHECKPOINT_VERSION:
            raise InvalidArgumentError(f"unsupported checkpoint version {info.get('version')}")
        nets = {}
        for name, spec in info["nets"].items():
            ws = [data[f"{name}.W{i}"] for i in range(spec["n_layers"])]
            bs = [data[f"{name}.b{i}"] for i in range(spec["n_layers"])]
            nets[name] = MlpNetwork(ws, bs, spec["slope"], spec["output_normalize"])
        lams = {name: LearnableConcentration(data[f"{name}.log_diag"].copy()) for name in info["lams"]}
    return nets, lams, info["meta"]
