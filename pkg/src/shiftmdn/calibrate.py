"""CRUDE calibration of predictive distributions, plus robust set selection.

CRUDE turns a calibration set into a pool of z-scores
z_i = (y_i - mu_i) / sigma_i and reuses the pool's empirical
distribution as the shape of every future predictive distribution:

    calibrated quantile  q_p = mu + sigma * Quantile_p(pool)
    calibrated mean          = mu + sigma * mean(pool)
    calibrated std           = sigma * std(pool)

sigma is the predicted aleatoric std; epistemic variance rides along
untouched.  Pool statistics use the uncorrected (population) std, the
same convention as the ingest scalers and the seed ensembles.

Robust selection fits one pool per candidate calibration set, applies
each pool to its own predictions, and keeps the set whose self-
calibrated Gaussian NLL is smallest, ties going to the lowest index.
Indices are 1-based, matching the usual numbering of the validation
environments the candidates come from.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .metrics import gaussian_nll, summary_arrays

MIN_POOL_STD = 1e-8
MIN_FIT_POINTS = 10


@dataclass
class ZPool:
    """Sorted calibration z-scores with cached moments.

    Immutable after construction; quantiles interpolate linearly between
    order statistics and clamp to the extreme pool values outside them.
    """

    z: np.ndarray
    source: str = ""
    mean: float = field(init=False)
    std: float = field(init=False)

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        if z.ndim != 1 or z.size == 0:
            raise DataError("z-score pool must be a nonempty vector")
        if not np.all(np.isfinite(z)):
            raise DataError("z-score pool contains non-finite values")
        if np.any(np.diff(z) < 0.0):
            raise DataError("z-score pool must be sorted ascending")
        self.z = z
        self.z.setflags(write=False)
        self.mean = float(z.mean())
        self.std = float(z.std())
        if self.std < MIN_POOL_STD:
            raise DataError(
                "degenerate calibration pool: all z-scores identical "
                f"within {MIN_POOL_STD:g}"
            )

    @property
    def size(self):
        return self.z.size

    def quantile(self, p):
        """Linear interpolation between order statistics at level p."""
        p = np.asarray(p, dtype=np.float64)
        positions = p * (self.z.size - 1)
        value = np.interp(positions, np.arange(self.z.size), self.z)
        return float(value) if value.ndim == 0 else value

    def to_dict(self):
        return {"source": self.source, "z": [float(v) for v in self.z]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["z"], dtype=np.float64),
                   source=d.get("source", ""))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class CalibratedSummary:
    """One prediction after CRUDE: Gaussian-free mean/std plus quantiles.

    The pool field is the provenance; quantiles reuse its empirical
    shape, so q(0.5) is the pool median mapped into target units.
    """

    mean: float
    std: float
    var_epistemic: float
    pool: ZPool

    def __post_init__(self):
        if not np.isfinite(self.mean) or not np.isfinite(self.std):
            raise DataError("calibrated summary has non-finite mean or std")
        if self.std <= 0.0:
            raise DataError("calibrated std must be positive")
        if self.var_epistemic < 0.0:
            raise DataError("epistemic variance must be nonnegative")

    @property
    def var_aleatoric(self):
        return self.std * self.std

    @property
    def var_total(self):
        return self.std * self.std + self.var_epistemic

    @property
    def source(self):
        return self.pool.source

    def quantile(self, p):
        scale = self.std / self.pool.std
        shift = self.mean - scale * self.pool.mean
        return shift + scale * self.pool.quantile(p)


def crude_fit(cal_preds, cal_targets, *, use_total_variance=False,
              min_points=MIN_FIT_POINTS, source=""):
    """Pool of sorted z-scores from a calibration set.

    z uses the aleatoric std by default; use_total_variance switches the
    denominator to sqrt(aleatoric + epistemic) for experimentation.
    """
    mean, va, ve = summary_arrays(cal_preds)
    y = np.asarray(cal_targets, dtype=np.float64)
    if y.ndim != 1 or len(y) != len(mean):
        raise DataError(
            f"calibration targets shape {y.shape} does not match "
            f"{len(mean)} predictions"
        )
    if not np.all(np.isfinite(y)):
        raise DataError("calibration targets contain non-finite values")
    if len(y) < min_points:
        raise DataError(
            f"need at least {min_points} calibration points, got {len(y)}"
        )
    var = va + ve if use_total_variance else va
    if np.any(var <= 0.0):
        raise DataError("calibration predictions have nonpositive variance")
    z = np.sort((y - mean) / np.sqrt(var))
    return ZPool(z, source=source)


def crude_apply(summary, pool):
    """Calibrate one predictive summary against a fitted pool."""
    sigma = float(np.sqrt(summary.var_aleatoric))
    return CalibratedSummary(
        mean=summary.mean + sigma * pool.mean,
        std=sigma * pool.std,
        var_epistemic=summary.var_epistemic,
        pool=pool,
    )


def crude_apply_batch(summaries, pool):
    return [crude_apply(s, pool) for s in summaries]


def robust_select(candidates, *, use_total_variance=False,
                  min_points=MIN_FIT_POINTS, labels=None):
    """(index, pool) of the candidate with minimum self-calibrated NLL.

    candidates are (predictions, targets) pairs; each is scored by
    fitting a pool on itself, applying it to itself, and taking the
    Gaussian NLL of the calibrated means and stds.  Degenerate or
    undersized candidates are skipped; ties go to the lowest index.
    The returned index is 1-based.
    """
    candidates = list(candidates)
    if len(candidates) == 0:
        raise ConfigError("robust_select needs at least one candidate set")
    if labels is None:
        labels = [f"set{i}" for i in range(1, len(candidates) + 1)]
    if len(labels) != len(candidates):
        raise ConfigError(
            f"{len(labels)} labels for {len(candidates)} candidates"
        )
    best_nll = None
    best = None
    for i, (preds, targets) in enumerate(candidates, start=1):
        try:
            pool = crude_fit(preds, targets,
                             use_total_variance=use_total_variance,
                             min_points=min_points, source=labels[i - 1])
        except DataError:
            continue
        calibrated = crude_apply_batch(preds, pool)
        nll = gaussian_nll(
            [c.mean for c in calibrated],
            [c.std for c in calibrated],
            targets,
        )
        if best_nll is None or nll < best_nll:
            best_nll = nll
            best = (i, pool)
    if best is None:
        raise DataError(
            "every candidate calibration set was degenerate or undersized"
        )
    return best
