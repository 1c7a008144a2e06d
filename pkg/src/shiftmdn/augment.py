"""MoEx moment-exchange augmentation for tabular feature vectors.

A row is augmented by replacing its positional (per-row) mean and std with
those of a randomly chosen partner row from the same batch, keeping its
normalized shape.  Targets are never touched; the training loss mixes the
two rows' likelihood terms with a weight lambda ~ Beta(100, 100), recorded
per row in MoExPairing.

All random draws for a batch are made full-size up front (selection
uniforms, partner offsets, lambdas) and then masked, so the generator
stream layout does not depend on which rows end up augmented.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

# floor keeps the normalize step finite on constant rows
STD_FLOOR = 1e-5


@dataclass
class MoExConfig:
    """Augmentation knobs: per-row probability and Beta mixing parameters."""

    p: float = 0.20
    lambda_alpha: float = 100.0
    lambda_beta: float = 100.0
    seed: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"moex p must lie in [0, 1], got {self.p}")
        if self.lambda_alpha <= 0 or self.lambda_beta <= 0:
            raise ConfigError("moex lambda parameters must be positive")


@dataclass
class MoExPairing:
    """Per-row augmentation record for one batch.

    Pass-through rows keep partner == own index and lam == 1.0 so the loss
    mixing is the identity for them.  undersized marks a batch too small to
    augment (fewer than 2 rows with p > 0).
    """

    augmented: np.ndarray
    partner: np.ndarray
    lam: np.ndarray
    undersized: bool = False

    @property
    def n_augmented(self):
        return int(np.count_nonzero(self.augmented))

    def validate(self):
        n = self.augmented.shape[0]
        idx = np.arange(n)
        if np.any(self.partner[self.augmented] == idx[self.augmented]):
            raise DataError("augmented row paired with itself")
        lam_aug = self.lam[self.augmented]
        if np.any(lam_aug <= 0.0) or np.any(lam_aug >= 1.0):
            raise DataError("mixing weights must lie in (0, 1)")
        return self

    @classmethod
    def passthrough(cls, n, undersized=False):
        return cls(
            augmented=np.zeros(n, dtype=bool),
            partner=np.arange(n),
            lam=np.ones(n),
            undersized=undersized,
        )


def pono_stats(x):
    """Positional mean and std of a feature vector (or of each row).

    The std is uncorrected (divide by n) and floored at 1e-5 so constant
    rows stay usable.  1-D input returns two floats, 2-D input returns two
    (n,) arrays.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise DataError("pono_stats needs at least 2 entries per row")
    mean = x.mean(axis=-1)
    std = np.maximum(x.std(axis=-1), STD_FLOOR)
    if x.ndim == 1:
        return float(mean), float(std)
    return mean, std


def moex_exchange(x_a, x_b):
    """Give x_a the positional moments of x_b, keeping x_a's shape.

    x' = sigma_B * (x_a - mu_A) / sigma_A + mu_B.  Accepts single vectors
    or equally shaped row matrices.
    """
    x_a = np.asarray(x_a, dtype=np.float64)
    x_b = np.asarray(x_b, dtype=np.float64)
    if x_a.shape != x_b.shape:
        raise DataError(
            f"moex_exchange shape mismatch: {x_a.shape} vs {x_b.shape}")
    mu_a, sd_a = pono_stats(x_a)
    mu_b, sd_b = pono_stats(x_b)
    if x_a.ndim == 2:
        mu_a, sd_a = mu_a[:, None], sd_a[:, None]
        mu_b, sd_b = mu_b[:, None], sd_b[:, None]
    return sd_b * (x_a - mu_a) / sd_a + mu_b


def sample_lambda(config, rng, size=None):
    """Draw mixing weights from Beta(lambda_alpha, lambda_beta)."""
    return rng.beta(config.lambda_alpha, config.lambda_beta, size=size)


def augment_batch(x, config, rng):
    """Augment each batch row independently with probability config.p.

    Returns (features, pairing).  Partners are uniform over the other rows
    of the batch.  A batch with fewer than 2 rows (or p == 0) passes
    through unchanged; the undersized case is flagged on the pairing.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DataError("augment_batch expects a 2-D (rows, features) array")
    n = x.shape[0]
    if config.p == 0.0:
        return x, MoExPairing.passthrough(n)
    if n < 2:
        return x, MoExPairing.passthrough(n, undersized=True)

    u = rng.random(n)
    offsets = rng.integers(0, n - 1, size=n)
    lam_draw = sample_lambda(config, rng, size=n)

    augmented = u < config.p
    idx = np.arange(n)
    partner = idx.copy()
    # offset skips the row itself, mapping 0..n-2 onto the other rows
    partner[augmented] = offsets[augmented] + (offsets[augmented] >= idx[augmented])
    lam = np.ones(n)
    lam[augmented] = lam_draw[augmented]

    if not np.any(augmented):
        return x, MoExPairing(augmented, partner, lam)
    out = x.copy()
    out[augmented] = moex_exchange(x[augmented], x[partner[augmented]])
    return out, MoExPairing(augmented, partner, lam)
