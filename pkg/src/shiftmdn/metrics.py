"""Evaluation suite for probabilistic regression under shift.

Point metrics (MAE, RMSE, BE), Gaussian NLL, normalized interval
sharpness, signed average calibration error, error-retention and
F1-retention curves with their areas, and a rank-based ROC-AUC for
uncertainty-driven OOD detection.

Two knobs recur across the suite and are echoed into every report:

    distribution_variance ("aleatoric" | "total"): which variance feeds
        the predictive distribution itself (NLL sigma, Gaussian interval
        width).  Aleatoric-only is the default; "total" folds in the
        epistemic part.
    score ("total" | "aleatoric"): which variance ranks samples by
        uncertainty for the retention curves and OOD detection.  Total
        variance is the default ranking score.

Summaries may be plain Gaussian ones (mean + variances) or calibrated
ones carrying their own quantile function; anything exposing
``quantile(p)`` gets its intervals from that instead of Gaussian theory.
"""

import json
import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .errors import ConfigError, DataError

IS_ALPHA = 0.32
ACE_LEVELS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
F1_THRESHOLD = 1.0

_STD_NORMAL = NormalDist()


def _as_vector(values, name):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DataError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise DataError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def _check_lengths(a, b, name_a, name_b):
    if len(a) != len(b):
        raise DataError(
            f"{name_a} has {len(a)} entries but {name_b} has {len(b)}"
        )


def summary_arrays(summaries):
    """(mean, var_aleatoric, var_epistemic) vectors from any summary list."""
    if len(summaries) == 0:
        raise DataError("summaries is empty")
    mean = np.array([s.mean for s in summaries], dtype=np.float64)
    va = np.array([s.var_aleatoric for s in summaries], dtype=np.float64)
    ve = np.array([s.var_epistemic for s in summaries], dtype=np.float64)
    for name, arr in (("mean", mean), ("var_aleatoric", va), ("var_epistemic", ve)):
        if not np.all(np.isfinite(arr)):
            raise DataError(f"summary {name} contains non-finite values")
    return mean, va, ve


def _distribution_var(va, ve, distribution_variance):
    if distribution_variance == "aleatoric":
        return va
    if distribution_variance == "total":
        return va + ve
    raise ConfigError(
        "distribution_variance must be 'aleatoric' or 'total', "
        f"got {distribution_variance!r}"
    )


def uncertainty_scores(summaries, score="total"):
    """Per-sample ranking score: total variance by default."""
    _, va, ve = summary_arrays(summaries)
    if score == "total":
        return va + ve
    if score == "aleatoric":
        return va
    raise ConfigError(f"score must be 'total' or 'aleatoric', got {score!r}")


def central_z(level):
    """Half-width in sigmas of the central interval holding `level` mass."""
    if not 0.0 < level < 1.0:
        raise ConfigError(f"interval level must be in (0, 1), got {level}")
    return _STD_NORMAL.inv_cdf(0.5 + 0.5 * level)


def _intervals(summaries, level, distribution_variance):
    """(lower, upper) central-interval endpoints at the given mass level.

    Calibrated summaries answer through their own quantile function;
    Gaussian ones get mu +- z*sigma.
    """
    if not any(hasattr(s, "quantile") for s in summaries):
        mean, va, ve = summary_arrays(summaries)
        half = central_z(level) * np.sqrt(
            _distribution_var(va, ve, distribution_variance))
        return mean - half, mean + half
    lo = np.empty(len(summaries))
    hi = np.empty(len(summaries))
    p_lo = 0.5 - 0.5 * level
    p_hi = 0.5 + 0.5 * level
    z = central_z(level)
    for i, s in enumerate(summaries):
        if hasattr(s, "quantile"):
            lo[i] = s.quantile(p_lo)
            hi[i] = s.quantile(p_hi)
        else:
            sigma = math.sqrt(_distribution_var(
                np.float64(s.var_aleatoric), np.float64(s.var_epistemic),
                distribution_variance))
            lo[i] = s.mean - z * sigma
            hi[i] = s.mean + z * sigma
    return lo, hi


def point_metrics(preds, targets):
    """(mae, rmse, be); be is signed, prediction minus truth."""
    x = _as_vector(preds, "preds")
    y = _as_vector(targets, "targets")
    _check_lengths(x, y, "preds", "targets")
    d = x - y
    mae = float(np.mean(np.abs(d)))
    rmse = float(np.sqrt(np.mean(d * d)))
    be = float(np.mean(d))
    return mae, rmse, be


def gaussian_nll(means, stds, targets):
    """Mean of 0.5 ln(2 pi sigma^2) + (y - mu)^2 / (2 sigma^2)."""
    mu = _as_vector(means, "means")
    sigma = _as_vector(stds, "stds")
    y = _as_vector(targets, "targets")
    _check_lengths(mu, y, "means", "targets")
    _check_lengths(sigma, y, "stds", "targets")
    if np.any(sigma <= 0.0):
        raise DataError("stds must all be positive")
    terms = 0.5 * np.log(2.0 * np.pi * sigma * sigma)
    terms += (y - mu) ** 2 / (2.0 * sigma * sigma)
    return float(np.mean(terms))


def interval_sharpness(summaries, targets, alpha=IS_ALPHA, *,
                       distribution_variance="aleatoric",
                       normalize=True, target_range=None):
    """Mean interval score of the central (1 - alpha) interval.

    S_alpha(l, u; y) = (u - l) + (2/alpha) (l - y) 1[y < l]
                                + (2/alpha) (y - u) 1[y > u]

    Normalized by the evaluation set's target range unless disabled;
    pass target_range to override the computed range.
    """
    y = _as_vector(targets, "targets")
    _check_lengths(summaries, y, "summaries", "targets")
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must be in (0, 1), got {alpha}")
    lo, hi = _intervals(summaries, 1.0 - alpha, distribution_variance)
    scores = hi - lo
    scores += (2.0 / alpha) * np.maximum(lo - y, 0.0)
    scores += (2.0 / alpha) * np.maximum(y - hi, 0.0)
    value = float(np.mean(scores))
    if not normalize:
        return value
    if target_range is None:
        target_range = float(np.max(y) - np.min(y))
    if target_range <= 0.0:
        raise DataError(
            "degenerate target range; pass target_range or normalize=False"
        )
    return value / target_range


def ace(summaries, targets, levels=ACE_LEVELS, *,
        distribution_variance="aleatoric"):
    """Signed average calibration error over central-interval levels.

    Mean over levels of (empirical strict coverage - nominal level);
    negative means under-coverage.
    """
    y = _as_vector(targets, "targets")
    _check_lengths(summaries, y, "summaries", "targets")
    if len(levels) == 0:
        raise ConfigError("levels is empty")
    gaps = []
    for level in levels:
        lo, hi = _intervals(summaries, level, distribution_variance)
        coverage = float(np.mean((y > lo) & (y < hi)))
        gaps.append(coverage - level)
    return float(np.mean(gaps))


def _certainty_order(scores):
    """Ascending by uncertainty score, ties by original index."""
    return np.argsort(scores, kind="stable")


def error_retention_auc(summaries, targets, *, score="total"):
    """(r_auc, curve): MSE over the most-certain fraction, swept.

    curve rows are (retention fraction, MSE over retained); the r -> 0
    limit is anchored at (0, 0) and the area is the trapezoid over the
    full grid.
    """
    y = _as_vector(targets, "targets")
    _check_lengths(summaries, y, "summaries", "targets")
    mean, _, _ = summary_arrays(summaries)
    order = _certainty_order(uncertainty_scores(summaries, score))
    sq = (mean - y)[order] ** 2
    n = len(y)
    k = np.arange(1, n + 1, dtype=np.float64)
    mse = np.cumsum(sq) / k
    curve = np.zeros((n + 1, 2))
    curve[1:, 0] = k / n
    curve[1:, 1] = mse
    r_auc = float(np.trapezoid(curve[:, 1], curve[:, 0]))
    return r_auc, curve


def f1_retention(summaries, targets, threshold=F1_THRESHOLD, *, score="total"):
    """(f1_auc, f1_at_95, curve) for acceptability |mu - y| < threshold.

    At retention r the most-certain ceil(r n) samples are retained;
    F1 = 2 TP / (2 TP + FP + FN), defined as 1 when the denominator is 0.
    """
    y = _as_vector(targets, "targets")
    _check_lengths(summaries, y, "summaries", "targets")
    if threshold <= 0.0:
        raise ConfigError(f"threshold must be positive, got {threshold}")
    mean, _, _ = summary_arrays(summaries)
    order = _certainty_order(uncertainty_scores(summaries, score))
    acceptable = (np.abs(mean - y) < threshold)[order]
    n = len(y)
    total_acceptable = int(acceptable.sum())
    tp = np.cumsum(acceptable, dtype=np.float64)
    k = np.arange(1, n + 1, dtype=np.float64)
    fp = k - tp
    fn = total_acceptable - tp
    denom = 2.0 * tp + fp + fn
    f1 = np.where(denom > 0.0, 2.0 * tp / np.where(denom > 0.0, denom, 1.0), 1.0)
    f1_zero = 1.0 if total_acceptable == 0 else 0.0
    curve = np.zeros((n + 1, 2))
    curve[0, 1] = f1_zero
    curve[1:, 0] = k / n
    curve[1:, 1] = f1
    f1_auc = float(np.trapezoid(curve[:, 1], curve[:, 0]))
    k95 = int(math.ceil(0.95 * n - 1e-12))
    f1_at_95 = float(f1[k95 - 1]) if k95 >= 1 else f1_zero
    return f1_auc, f1_at_95, curve


def roc_auc_ood(uncertainties_id, uncertainties_ood):
    """P(u_ood > u_id) + 0.5 P(u_ood = u_id) over all pairs."""
    uid = _as_vector(uncertainties_id, "uncertainties_id")
    uood = _as_vector(uncertainties_ood, "uncertainties_ood")
    ids = np.sort(uid)
    below = np.searchsorted(ids, uood, side="left")
    at_or_below = np.searchsorted(ids, uood, side="right")
    wins = below.sum() + 0.5 * (at_or_below - below).sum()
    return float(wins / (len(uid) * len(uood)))


@dataclass
class MetricsReport:
    """One evaluated prediction set; the Table-1-shaped row plus curves.

    `sharpness` is the normalized interval score; it serializes under the
    key "is" (the metric's usual abbreviation is not a valid field name).
    """

    mae: float
    rmse: float
    be: float
    sharpness: float
    ace: float
    nll: float
    r_auc: float
    f1_auc: float
    f1_at_95: float
    roc_auc_ood: float = None
    error_retention_curve: np.ndarray = None
    f1_retention_curve: np.ndarray = None
    config: dict = field(default_factory=dict)

    def to_dict(self):
        d = {
            "mae": self.mae,
            "rmse": self.rmse,
            "be": self.be,
            "is": self.sharpness,
            "ace": self.ace,
            "nll": self.nll,
            "r_auc": self.r_auc,
            "f1_auc": self.f1_auc,
            "f1_at_95": self.f1_at_95,
            "roc_auc_ood": self.roc_auc_ood,
            "config": dict(self.config),
        }
        if self.error_retention_curve is not None:
            d["error_retention_curve"] = [
                [float(r), float(v)] for r, v in self.error_retention_curve
            ]
        if self.f1_retention_curve is not None:
            d["f1_retention_curve"] = [
                [float(r), float(v)] for r, v in self.f1_retention_curve
            ]
        return d

    @classmethod
    def from_dict(cls, d):
        def curve(key):
            if key not in d or d[key] is None:
                return None
            return np.array(d[key], dtype=np.float64)

        return cls(
            mae=d["mae"], rmse=d["rmse"], be=d["be"], sharpness=d["is"],
            ace=d["ace"], nll=d["nll"], r_auc=d["r_auc"],
            f1_auc=d["f1_auc"], f1_at_95=d["f1_at_95"],
            roc_auc_ood=d.get("roc_auc_ood"),
            error_retention_curve=curve("error_retention_curve"),
            f1_retention_curve=curve("f1_retention_curve"),
            config=dict(d.get("config", {})),
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def save_curve_csv(curve, path, value_name):
    """Retention curve as CSV rows (r, value) for external plotting."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"r,{value_name}\n")
        for r, v in curve:
            fh.write(f"{float(r)!r},{float(v)!r}\n")


def full_report(summaries, targets, *, alpha=IS_ALPHA, levels=ACE_LEVELS,
                threshold=F1_THRESHOLD, score="total",
                distribution_variance="aleatoric", normalize_is=True,
                target_range=None, id_uncertainties=None):
    """Every metric over one prediction set, with the knobs echoed.

    id_uncertainties, when given, are in-distribution ranking scores;
    the evaluated set plays the OOD side of the detection ROC-AUC.
    """
    y = _as_vector(targets, "targets")
    _check_lengths(summaries, y, "summaries", "targets")
    mean, va, ve = summary_arrays(summaries)
    mae, rmse, be = point_metrics(mean, y)
    sigma = np.sqrt(_distribution_var(va, ve, distribution_variance))
    nll = gaussian_nll(mean, sigma, y)
    sharp = interval_sharpness(
        summaries, y, alpha, distribution_variance=distribution_variance,
        normalize=normalize_is, target_range=target_range)
    ace_value = ace(summaries, y, levels,
                    distribution_variance=distribution_variance)
    r_auc, err_curve = error_retention_auc(summaries, y, score=score)
    f1_auc, f1_95, f1_curve = f1_retention(summaries, y, threshold,
                                           score=score)
    roc = None
    if id_uncertainties is not None:
        roc = roc_auc_ood(id_uncertainties,
                          uncertainty_scores(summaries, score))
    return MetricsReport(
        mae=mae, rmse=rmse, be=be, sharpness=sharp, ace=ace_value, nll=nll,
        r_auc=r_auc, f1_auc=f1_auc, f1_at_95=f1_95, roc_auc_ood=roc,
        error_retention_curve=err_curve, f1_retention_curve=f1_curve,
        config={
            "alpha": alpha,
            "ace_levels": list(levels),
            "threshold": threshold,
            "score": score,
            "distribution_variance": distribution_variance,
            "normalize_is": bool(normalize_is),
        },
    )
