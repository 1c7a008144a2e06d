"""Combining predictions across domain experts and across seeds.

Two distinct rules, matching how the rows of the results table are built:

    inverse_variance_combine: precision-weighted pooling of M experts,
        combined mean Sum(mu/v) / Sum(1/v), combined variance 1/Sum(1/v).
    combine_calibrated: the calibrated-row variant, a precision-weighted
        mean of the calibrated means AND of the calibrated stds.  This
        follows the stated recipe literally; note it is not the same
        rule as 1/Sum(1/v) above.
    seed_aggregate: seed replicates of one model; the spread of their
        means becomes the epistemic variance (uncorrected, the replicate
        count is small by design).

Weights default to total variance (aleatoric + epistemic); an
aleatoric_only flag restricts them to the aleatoric part.
"""

import numpy as np

from .errors import ConfigError, DataError
from .metrics import summary_arrays
from .network import PredictiveSummary, summaries_from_arrays


def _stack(members):
    """(means, var_aleatoric, var_epistemic) stacked to (M, n) arrays."""
    members = [list(m) for m in members]
    if len(members) == 0:
        raise ConfigError("no member prediction lists given")
    n = len(members[0])
    triples = [summary_arrays(m) for m in members]
    for i, (mean, _, _) in enumerate(triples):
        if len(mean) != n:
            raise DataError(
                f"member {i} has {len(mean)} rows, expected {n}"
            )
    mean = np.stack([t[0] for t in triples])
    va = np.stack([t[1] for t in triples])
    ve = np.stack([t[2] for t in triples])
    return mean, va, ve


def _weight_variance(va, ve, aleatoric_only):
    v = va if aleatoric_only else va + ve
    if np.any(v <= 0.0):
        raise DataError("inverse-variance weights need positive variances")
    return v


def inverse_variance_combine(members, *, aleatoric_only=False,
                             allow_single=False):
    """Precision-weighted combination of M expert prediction lists.

    Returns one PredictiveSummary per row with the pooled variance
    reported as aleatoric and epistemic 0.  A single member passes
    through unchanged when allow_single is set.
    """
    mean, va, ve = _stack(members)
    if mean.shape[0] == 1:
        if not allow_single:
            raise ConfigError(
                "inverse-variance combination needs at least 2 members "
                "(allow_single passes one through)"
            )
        return summaries_from_arrays(mean[0], va[0], ve[0])
    v = _weight_variance(va, ve, aleatoric_only)
    precision = 1.0 / v
    total_precision = precision.sum(axis=0)
    combined_mean = (mean * precision).sum(axis=0) / total_precision
    combined_var = 1.0 / total_precision
    return summaries_from_arrays(combined_mean, combined_var)


def combine_calibrated(members, *, aleatoric_only=False, allow_single=False):
    """Calibrated-row combination: weighted means of means and of stds.

    Weights are inverse variances as in inverse_variance_combine, but the
    combined std is the weighted mean of member stds, not the pooled
    1/Sum(1/v).  Returns Gaussian summaries (the pool-specific quantile
    shapes do not survive averaging).
    """
    mean, va, ve = _stack(members)
    if mean.shape[0] == 1:
        if not allow_single:
            raise ConfigError(
                "calibrated combination needs at least 2 members "
                "(allow_single passes one through)"
            )
        return summaries_from_arrays(mean[0], va[0], ve[0])
    v = _weight_variance(va, ve, aleatoric_only)
    precision = 1.0 / v
    total_precision = precision.sum(axis=0)
    combined_mean = (mean * precision).sum(axis=0) / total_precision
    combined_std = (np.sqrt(va) * precision).sum(axis=0) / total_precision
    return summaries_from_arrays(combined_mean, combined_std**2)


def seed_aggregate(members):
    """Aggregate S seed replicates of the same model.

    mean of means; mean of aleatoric variances; population variance of
    the member means as the epistemic variance.
    """
    mean, va, _ = _stack(members)
    if mean.shape[0] < 2:
        raise ConfigError("seed aggregation needs at least 2 replicates")
    return summaries_from_arrays(
        mean.mean(axis=0),
        va.mean(axis=0),
        mean.var(axis=0),
    )
