"""Shared test oracles."""
import numpy as np

from aninfonce import autodiff as ad
from aninfonce.nn import LearnableConcentration, MlpNetwork, forward


def unit_rows(x):
    x = np.asarray(x, float)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def net_from_params(template: MlpNetwork, params: dict, prefix="enc.") -> MlpNetwork:
    n = template.n_layers
    return MlpNetwork(
        [params[f"{prefix}W{i}"] for i in range(n)],
        [params[f"{prefix}b{i}"] for i in range(n)],
        template.slope,
        template.output_normalize,
    )


def analytic_and_numeric(loss_fn, net: MlpNetwork, lam: LearnableConcentration | None, n_coords=100, h=1e-5, seed=0):
    """Compare backward() against central differences on random coordinates.

    ``loss_fn(embed, lam_value)`` builds a scalar loss; ``embed(*xs)`` maps
    raw input batches through the network in one recorded pass and returns
    one embedding per batch.  Returns
    (analytic, numeric) arrays over the sampled coordinates.
    """
    params = net.params("enc.")
    if lam is not None:
        params["lam"] = lam.log_diag

    def evaluate(p, tape):
        cur = net_from_params(net, p)
        lam_value = None
        if lam is not None:
            lam_value = ad.exp(tape.watch(p["lam"], "lam")) if tape is not None else np.exp(p["lam"])

        def embed(*xs):
            flat = [x.reshape(-1, x.shape[-1]) for x in xs]
            emb = forward(cur, np.concatenate(flat), tape)
            out, pos = [], 0
            for x, f in zip(xs, flat):
                part = ad.slice_rows(emb, pos, len(f)) if tape is not None else emb[pos : pos + len(f)]
                out.append(part.reshape(*x.shape[:-1], -1) if x.ndim == 3 else part)
                pos += len(f)
            return out

        return loss_fn(embed, lam_value)

    tape = ad.GradientTape()
    loss = evaluate(params, tape)
    grads = ad.backward(tape, loss)

    rng = np.random.default_rng(seed)
    names = sorted(params)
    sizes = np.array([params[k].size for k in names], float)
    analytic, numeric = [], []
    for _ in range(n_coords):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        idx = tuple(rng.integers(0, s) for s in params[name].shape)
        vals = []
        for sign in (1, -1):
            p = {k: v.copy() for k, v in params.items()}
            p[name][idx] += sign * h
            vals.append(float(np.asarray(_value(evaluate(p, None)))))
        numeric.append((vals[0] - vals[1]) / (2 * h))
        analytic.append(grads[name][idx])
    return np.array(analytic), np.array(numeric)


def _value(x):
    return x.data if isinstance(x, ad.Tensor) else x


def max_rel_err(a, n, floor=1e-6):
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))
