"""Beta-mixture density network: forward pass, analytic gradients, prediction.

Architecture (input to output):

    LeakyGate: elementwise LeakyReLU(s * x + c), learned s, c
    Dense -> LeakyReLU
    PONO: per-sample normalization across hidden units, learned gain/shift
    Dense -> LeakyReLU            (repeated for each further hidden size)
    Dense head -> 3K raw values per sample

The raw head splits into K mixture logits, K alpha inputs, K beta inputs;
weights go through a softmax, shapes through softplus + 1e-3 clamped to
the shared betamix bounds.  Everything runs in float64; gradients are
hand-written reverse mode so they can be checked against central finite
differences at tight tolerance.

Weights live in a plain dict of named float64 arrays (see weight_names),
mutated only by the optimizer.  Checkpoints serialize config + weights to
a single JSON document with sorted keys, so identical models produce
byte-identical files.
"""

import json
from dataclasses import dataclass

import numpy as np

from .betamix import (
    SHAPE_MAX,
    SHAPE_MIN,
    MixtureParams,
    digamma,
    log_gamma,
    mixture_mean_var,
    mixture_nll,
)
from .errors import ConfigError, DataError, NumericalError

CHECKPOINT_FORMAT = "shiftmdn-weights-v1"


@dataclass
class NetworkConfig:
    input_dim: int
    hidden: tuple = (128, 128)
    n_components: int = 5
    leaky_slope: float = 0.01
    pono_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if self.n_components < 1:
            raise ConfigError("n_components must be >= 1")
        if len(self.hidden) < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("hidden sizes must all be >= 1")

    @property
    def head_width(self):
        return 3 * self.n_components

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "n_components": self.n_components,
            "leaky_slope": self.leaky_slope,
            "pono_eps": self.pono_eps,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class PredictiveSummary:
    """Per-sample prediction in target units.

    var_epistemic is 0 for a single model; ensembling fills it in.
    """

    mean: float
    var_aleatoric: float
    var_epistemic: float = 0.0

    @property
    def var_total(self):
        return self.var_aleatoric + self.var_epistemic


def summaries_to_arrays(summaries):
    """(mean, var_aleatoric, var_epistemic) float64 arrays from a list."""
    mean = np.array([s.mean for s in summaries], dtype=np.float64)
    va = np.array([s.var_aleatoric for s in summaries], dtype=np.float64)
    ve = np.array([s.var_epistemic for s in summaries], dtype=np.float64)
    return mean, va, ve


def summaries_from_arrays(mean, var_aleatoric, var_epistemic=None):
    if var_epistemic is None:
        var_epistemic = np.zeros_like(np.asarray(mean, dtype=np.float64))
    return [
        PredictiveSummary(float(m), float(va), float(ve))
        for m, va, ve in zip(mean, var_aleatoric, var_epistemic)
    ]


def _layer_dims(config):
    """(fan_in, fan_out) pairs for every dense matrix, head last."""
    sizes = [config.input_dim, *config.hidden, config.head_width]
    return list(zip(sizes[:-1], sizes[1:]))


def weight_names(config):
    """Canonical ordering of the weight dict keys."""
    names = ["gate_scale", "gate_shift"]
    n_dense = len(config.hidden)
    for i in range(n_dense):
        names += [f"dense{i}_w", f"dense{i}_b"]
        if i == 0:
            names += ["pono_gain", "pono_shift"]
    names += ["head_w", "head_b"]
    return names


def init_weights(config):
    """Fresh weights: Glorot-uniform dense matrices, identity gate and PONO.

    The draw order is fixed (dense layers in depth order, head last) so a
    seed fully determines the result.
    """
    rng = np.random.default_rng(config.seed)
    w = {
        "gate_scale": np.ones(config.input_dim),
        "gate_shift": np.zeros(config.input_dim),
        "pono_gain": np.ones(config.hidden[0]),
        "pono_shift": np.zeros(config.hidden[0]),
    }
    dims = _layer_dims(config)
    for i, (fan_in, fan_out) in enumerate(dims[:-1]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w[f"dense{i}_w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        w[f"dense{i}_b"] = np.zeros(fan_out)
    fan_in, fan_out = dims[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    w["head_w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    w["head_b"] = np.zeros(fan_out)
    return w


def validate_weights(config, weights):
    expected = {
        "gate_scale": (config.input_dim,),
        "gate_shift": (config.input_dim,),
        "pono_gain": (config.hidden[0],),
        "pono_shift": (config.hidden[0],),
    }
    dims = _layer_dims(config)
    for i, (fan_in, fan_out) in enumerate(dims[:-1]):
        expected[f"dense{i}_w"] = (fan_in, fan_out)
        expected[f"dense{i}_b"] = (fan_out,)
    expected["head_w"] = dims[-1]
    expected["head_b"] = (dims[-1][1],)
    if set(weights) != set(expected):
        raise ConfigError("weight dict keys do not match the architecture")
    for name, shape in expected.items():
        if weights[name].shape != shape:
            raise ConfigError(
                f"{name} has shape {weights[name].shape}, expected {shape}")
        if not np.all(np.isfinite(weights[name])):
            raise NumericalError(f"non-finite values in {name}")
    return weights


def _leaky(z, slope):
    return np.where(z > 0, z, slope * z)


def _leaky_grad(z, slope):
    return np.where(z > 0, 1.0, slope)


def _softplus(a):
    return np.logaddexp(0.0, a)


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite activation after {name}")


def _forward_cache(config, weights, x):
    """Run the network, keeping every intermediate needed for backward."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != config.input_dim:
        raise DataError(
            f"input has {x.shape[1]} features, network expects "
            f"{config.input_dim}")
    cache = {"x": x}

    z0 = weights["gate_scale"] * x + weights["gate_shift"]
    g = _leaky(z0, config.leaky_slope)
    _check_finite("gate", g)
    cache["gate_pre"] = z0
    act = g

    for i in range(len(config.hidden)):
        pre = act @ weights[f"dense{i}_w"] + weights[f"dense{i}_b"]
        act = _leaky(pre, config.leaky_slope)
        _check_finite(f"dense{i}", act)
        cache[f"dense{i}_pre"] = pre
        if i == 0:
            # PONO: normalize each sample across hidden units, then affine
            mu = act.mean(axis=1, keepdims=True)
            var = act.var(axis=1, keepdims=True)
            inv = 1.0 / np.sqrt(var + config.pono_eps)
            n_hat = (act - mu) * inv
            act = weights["pono_gain"] * n_hat + weights["pono_shift"]
            _check_finite("pono", act)
            cache["pono_nhat"] = n_hat
            cache["pono_inv"] = inv
        cache[f"layer{i}_out"] = act

    raw = act @ weights["head_w"] + weights["head_b"]
    _check_finite("head", raw)
    cache["head_in"] = act
    cache["raw"] = raw
    return raw, cache


def _head_map(config, raw):
    """Raw head values -> (MixtureParams, cache for backward)."""
    k = config.n_components
    logits = raw[:, :k]
    a_raw = raw[:, k:2 * k]
    b_raw = raw[:, 2 * k:]

    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    pi = e / e.sum(axis=1, keepdims=True)

    sp_a = _softplus(a_raw) + SHAPE_MIN
    sp_b = _softplus(b_raw) + SHAPE_MIN
    alphas = np.minimum(sp_a, SHAPE_MAX)
    betas = np.minimum(sp_b, SHAPE_MAX)

    params = MixtureParams(pi, alphas, betas)
    hcache = {
        "pi": pi,
        "a_raw": a_raw,
        "b_raw": b_raw,
        "a_clamped": sp_a >= SHAPE_MAX,
        "b_clamped": sp_b >= SHAPE_MAX,
    }
    return params, hcache


def forward(config, weights, x):
    """Map scaled inputs to per-sample beta-mixture parameters."""
    raw, _ = _forward_cache(config, weights, x)
    params, _ = _head_map(config, raw)
    return params


def batch_loss(config, weights, x, y, mix=None):
    """Mean mixed NLL of the batch; the quantity the gradients differentiate."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape[0] == 0:
        raise DataError("empty batch")
    raw, _ = _forward_cache(config, weights, x)
    params, _ = _head_map(config, raw)
    nll_own = mixture_nll(params, y)
    if mix is None:
        per_row = nll_own
    else:
        nll_partner = mixture_nll(params, y[mix.partner])
        per_row = mix.lam * nll_own + (1.0 - mix.lam) * nll_partner
    if not np.all(np.isfinite(per_row)):
        bad = int(np.flatnonzero(~np.isfinite(per_row))[0])
        raise NumericalError(f"non-finite loss at batch row {bad}")
    return float(per_row.mean())


def _nll_grad_wrt_params(params, y):
    """d mean-NLL contribution per sample, w.r.t. logits/alpha/beta.

    Returns (nll, d_logits, d_alpha, d_beta), each (n, K), for the
    per-sample NLL (no batch averaging, no lambda weighting).
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    a, b = params.alphas, params.betas
    log_pdf = ((a - 1.0) * np.log(y) + (b - 1.0) * np.log1p(-y)
               - (log_gamma(a) + log_gamma(b) - log_gamma(a + b)))
    with np.errstate(divide="ignore"):
        t = np.log(params.weights) + log_pdf
    m = np.max(t, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    lse = m + np.log(np.sum(np.exp(t - m), axis=1, keepdims=True))
    resp = np.exp(t - lse)
    nll = -lse[:, 0]

    # d nll / d logit_j = pi_j - r_j  (softmax chain through log pi)
    d_logits = params.weights - resp
    dig_ab = digamma(a + b)
    d_alpha = -resp * (np.log(y) - digamma(a) + dig_ab)
    d_beta = -resp * (np.log1p(-y) - digamma(b) + dig_ab)
    return nll, d_logits, d_alpha, d_beta


def loss_and_gradients(config, weights, x, y, mix=None):
    """Mean batch NLL (with optional MoEx label mixing) and its gradients.

    For an augmented row i with partner j and weight lam, the row loss is
    lam * NLL(out_i, y_i) + (1 - lam) * NLL(out_i, y_j); x is expected to
    be the already moment-exchanged features.  Gradients are exact
    reverse-mode derivatives of the returned scalar.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = x.shape[0]
    if n == 0:
        raise DataError("empty batch")
    raw, cache = _forward_cache(config, weights, x)
    params, hcache = _head_map(config, raw)

    nll_own, dl_own, da_own, db_own = _nll_grad_wrt_params(params, y)
    if mix is None:
        per_row = nll_own
        d_logits, d_alpha, d_beta = dl_own, da_own, db_own
    else:
        y_part = y[mix.partner]
        nll_part, dl_part, da_part, db_part = _nll_grad_wrt_params(
            params, y_part)
        lam = mix.lam[:, None]
        per_row = mix.lam * nll_own + (1.0 - mix.lam) * nll_part
        d_logits = lam * dl_own + (1.0 - lam) * dl_part
        d_alpha = lam * da_own + (1.0 - lam) * da_part
        d_beta = lam * db_own + (1.0 - lam) * db_part
    if not np.all(np.isfinite(per_row)):
        bad = int(np.flatnonzero(~np.isfinite(per_row))[0])
        raise NumericalError(f"non-finite loss at batch row {bad}")
    loss = float(per_row.mean())

    # chain through the head map; batch mean scales everything by 1/n
    scale = 1.0 / n
    sig_a = 1.0 / (1.0 + np.exp(-hcache["a_raw"]))
    sig_b = 1.0 / (1.0 + np.exp(-hcache["b_raw"]))
    d_a_raw = d_alpha * sig_a * np.where(hcache["a_clamped"], 0.0, 1.0)
    d_b_raw = d_beta * sig_b * np.where(hcache["b_clamped"], 0.0, 1.0)
    d_raw = scale * np.concatenate([d_logits, d_a_raw, d_b_raw], axis=1)

    grads = {}
    act = cache["head_in"]
    grads["head_w"] = act.T @ d_raw
    grads["head_b"] = d_raw.sum(axis=0)
    d_act = d_raw @ weights["head_w"].T

    slope = config.leaky_slope
    for i in reversed(range(len(config.hidden))):
        if i == 0:
            # undo the PONO affine, then the normalization itself
            n_hat = cache["pono_nhat"]
            grads["pono_gain"] = (d_act * n_hat).sum(axis=0)
            grads["pono_shift"] = d_act.sum(axis=0)
            d_nhat = d_act * weights["pono_gain"]
            inv = cache["pono_inv"]
            d_act = inv * (
                d_nhat
                - d_nhat.mean(axis=1, keepdims=True)
                - n_hat * (d_nhat * n_hat).mean(axis=1, keepdims=True))
        d_pre = d_act * _leaky_grad(cache[f"dense{i}_pre"], slope)
        layer_in = (_leaky(cache["gate_pre"], slope) if i == 0
                    else cache[f"layer{i - 1}_out"])
        grads[f"dense{i}_w"] = layer_in.T @ d_pre
        grads[f"dense{i}_b"] = d_pre.sum(axis=0)
        d_act = d_pre @ weights[f"dense{i}_w"].T

    d_gate = d_act * _leaky_grad(cache["gate_pre"], slope)
    grads["gate_scale"] = (d_gate * cache["x"]).sum(axis=0)
    grads["gate_shift"] = d_gate.sum(axis=0)
    return loss, grads


def predict(config, weights, x, scalers=None):
    """Per-sample predictive summaries, converted back to target units.

    x may be a raw (n, d) array of scaled features or any object with a
    `features` attribute holding one.  With scalers=None the summaries
    stay in scaled units.
    """
    if hasattr(x, "features"):
        x = x.features
    params = forward(config, weights, x)
    mean, var = mixture_mean_var(params)
    if scalers is not None:
        mean = scalers.invert_target(mean)
        var = var * scalers.variance_scale
    return summaries_from_arrays(mean, var)


def save_checkpoint(path, config, weights):
    """Write config + weights as one sorted-keys JSON document."""
    validate_weights(config, weights)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": config.to_dict(),
        "weights": {k: v.tolist() for k, v in weights.items()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(
            f"unrecognized checkpoint format {doc.get('format')!r}")
    config = NetworkConfig.from_dict(doc["config"])
    weights = {k: np.asarray(v, dtype=np.float64)
               for k, v in doc["weights"].items()}
    return config, validate_weights(config, weights)
