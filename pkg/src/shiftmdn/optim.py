"""Training loop: LAMB steps, gradient centralization, cosine restarts, SWA.

The loop runs `cycles` cosine cycles of `epochs_per_cycle` epochs each;
the learning rate restarts at lr_max at every cycle boundary.  Within the
last `swa_window` epochs of each cycle the weights are snapshotted into a
running average.  The final model is whichever of {best validation
checkpoint, SWA average} scores the lower validation NLL.

Reproducibility: all shuffling and augmentation randomness comes from
SeedSequence streams keyed by (seed, purpose, epoch[, batch]), so the
result is a pure function of the configs.  Purpose codes: 0 shuffle,
1 augment.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .augment import augment_batch
from .errors import ConfigError, DataError, NumericalError
from .network import batch_loss, init_weights, loss_and_gradients

_SHUFFLE, _AUGMENT = 0, 1

# per-tensor trust ratio bounds; ratios outside are clamped and counted
TRUST_MIN = 1e-3
TRUST_MAX = 10.0

_EVAL_CHUNK = 8192


@dataclass
class TrainConfig:
    batch_size: int = 512
    cycles: int = 2
    epochs_per_cycle: int = 15
    lr_max: float = 1e-3
    lr_min: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.0
    swa_window: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.lr_max > self.lr_min > 0:
            raise ConfigError("need lr_max > lr_min > 0")
        if self.cycles * self.epochs_per_cycle < 1:
            raise ConfigError("need at least one training epoch")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.swa_window <= self.epochs_per_cycle:
            raise ConfigError("swa_window must fit inside a cycle")


@dataclass
class OptState:
    """Optimizer moments plus SWA and best-checkpoint bookkeeping."""

    m: dict
    v: dict
    step: int = 0
    swa_sum: dict = field(default_factory=dict)
    swa_count: int = 0
    best_val_loss: float = np.inf
    best_weights: dict = None

    @classmethod
    def for_weights(cls, weights):
        return cls(
            m={k: np.zeros_like(w) for k, w in weights.items()},
            v={k: np.zeros_like(w) for k, w in weights.items()},
        )


@dataclass
class TrainResult:
    weights: dict
    log: list
    final_choice: str
    best_val_loss: float
    swa_val_loss: float
    final_val_loss: float
    aborted: bool = False
    abort_reason: str = ""


def cosine_lr(t, period, lr_max, lr_min):
    """Cosine decay from lr_max at t=0 to lr_min at t=period."""
    if not 0 <= t <= period:
        raise ConfigError(f"epoch index {t} outside [0, {period}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + np.cos(np.pi * t / period))


def centralize_gradients(grads):
    """Zero the per-output mean of each dense gradient matrix.

    Matrices are stored (fan_in, fan_out), so each output unit's incoming
    gradient is a column; the mean is removed along axis 0.  Bias and
    elementwise-parameter gradients (1-D) pass through untouched.
    """
    out = {}
    for name, g in grads.items():
        if g.ndim == 2:
            out[name] = g - g.mean(axis=0, keepdims=True)
        else:
            out[name] = g
    return out


def lamb_step(weights, grads, state, lr, config):
    """One LAMB update in place; returns the number of clamped trust ratios.

    Per tensor: bias-corrected Adam moments, update direction
    u = m_hat / (sqrt(v_hat) + eps) + weight_decay * w, trust ratio
    r = ||w|| / ||u|| (1 when either norm vanishes) clamped to
    [TRUST_MIN, TRUST_MAX], then w <- w - lr * r * u.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - config.beta1**t
    bc2 = 1.0 - config.beta2**t
    clamped = 0
    for name, w in weights.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        u = (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        if config.weight_decay != 0.0:
            u = u + config.weight_decay * w
        w_norm = np.linalg.norm(w)
        u_norm = np.linalg.norm(u)
        if w_norm == 0.0 or u_norm == 0.0:
            r = 1.0
        else:
            r = w_norm / u_norm
            if r < TRUST_MIN or r > TRUST_MAX:
                r = np.clip(r, TRUST_MIN, TRUST_MAX)
                clamped += 1
        w -= lr * r * u
    return clamped


def swa_update(state, weights):
    """Add one snapshot to the running average."""
    if not state.swa_sum:
        state.swa_sum = {k: w.copy() for k, w in weights.items()}
    else:
        for k, w in weights.items():
            state.swa_sum[k] += w
    state.swa_count += 1


def swa_finalize(state):
    """Arithmetic mean of the collected snapshots."""
    if state.swa_count == 0:
        raise NumericalError("SWA finalize needs at least one snapshot")
    return {k: s / state.swa_count for k, s in state.swa_sum.items()}


def _xy(data):
    if hasattr(data, "features") and hasattr(data, "target"):
        return np.asarray(data.features, dtype=np.float64), \
            np.asarray(data.target, dtype=np.float64)
    x, y = data
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)


def _val_loss(net_config, weights, x, y):
    """Validation NLL, chunked with a fixed reduction order."""
    n = x.shape[0]
    total = 0.0
    for lo in range(0, n, _EVAL_CHUNK):
        hi = min(lo + _EVAL_CHUNK, n)
        total += batch_loss(net_config, weights, x[lo:hi], y[lo:hi]) * (hi - lo)
    return total / n


def _stream(seed, purpose, *key):
    return np.random.default_rng(np.random.SeedSequence((seed, purpose, *key)))


def train(net_config, train_data, val_data, train_config, moex_config=None):
    """Fit the network; returns a TrainResult with weights and epoch log.

    moex_config=None disables augmentation; a config with p=0 produces the
    identical result (the augment stream is separate from the shuffle
    stream, and a p=0 batch never draws from it).
    """
    x_train, y_train = _xy(train_data)
    x_val, y_val = _xy(val_data)
    if x_val.shape[0] == 0:
        raise DataError("validation set is empty")
    if x_train.shape[0] == 0:
        raise DataError("training set is empty")

    weights = init_weights(net_config)
    state = OptState.for_weights(weights)
    cfg = train_config
    n = x_train.shape[0]
    log = []
    aborted = False
    abort_reason = ""

    for cycle in range(cfg.cycles):
        for e in range(cfg.epochs_per_cycle):
            epoch = cycle * cfg.epochs_per_cycle + e
            lr = cosine_lr(e, cfg.epochs_per_cycle, cfg.lr_max, cfg.lr_min)
            order = _stream(cfg.seed, _SHUFFLE, epoch).permutation(n)
            loss_sum = 0.0
            aug_rows = 0
            clamp_count = 0
            try:
                for b, lo in enumerate(range(0, n, cfg.batch_size)):
                    idx = order[lo:lo + cfg.batch_size]
                    xb = x_train[idx]
                    yb = y_train[idx]
                    if moex_config is not None and moex_config.p > 0:
                        rng = _stream(cfg.seed, _AUGMENT, epoch, b)
                        xb, mix = augment_batch(xb, moex_config, rng)
                        aug_rows += mix.n_augmented
                    else:
                        mix = None
                    loss, grads = loss_and_gradients(
                        net_config, weights, xb, yb, mix)
                    grads = centralize_gradients(grads)
                    clamp_count += lamb_step(weights, grads, state, lr, cfg)
                    loss_sum += loss * len(idx)
                val_loss = _val_loss(net_config, weights, x_val, y_val)
            except NumericalError as err:
                aborted = True
                abort_reason = str(err)
                break
            if not np.isfinite(val_loss):
                aborted = True
                abort_reason = f"non-finite validation loss at epoch {epoch}"
                break
            if val_loss < state.best_val_loss:
                state.best_val_loss = val_loss
                state.best_weights = {k: w.copy() for k, w in weights.items()}
            if e >= cfg.epochs_per_cycle - cfg.swa_window:
                swa_update(state, weights)
            log.append({
                "epoch": epoch,
                "cycle": cycle,
                "epoch_in_cycle": e,
                "lr": float(lr),
                "train_loss": loss_sum / n,
                "val_loss": float(val_loss),
                "augmented_fraction": aug_rows / n,
                "trust_clamped": clamp_count,
            })
        if aborted:
            break

    if state.best_weights is None:
        # no finite epoch at all: report the failure rather than guess
        raise NumericalError(
            abort_reason or "training never produced a finite validation loss")

    best_val = state.best_val_loss
    if state.swa_count > 0:
        swa_weights = swa_finalize(state)
        swa_val = _val_loss(net_config, swa_weights, x_val, y_val)
    else:
        swa_weights, swa_val = None, np.inf
    if np.isfinite(swa_val) and swa_val < best_val:
        final, choice, final_val = swa_weights, "swa", swa_val
    else:
        final, choice, final_val = state.best_weights, "best_checkpoint", best_val
    return TrainResult(
        weights=final,
        log=log,
        final_choice=choice,
        best_val_loss=float(best_val),
        swa_val_loss=float(swa_val) if np.isfinite(swa_val) else float("nan"),
        final_val_loss=float(final_val),
        aborted=aborted,
        abort_reason=abort_reason,
    )


def save_log(path, records):
    """Write the per-epoch log as JSON lines with stable key order."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
