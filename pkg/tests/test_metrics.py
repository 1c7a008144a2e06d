"""Metrics against quadratic-time brute-force oracles and hand values.

Every oracle here is written in plain Python loops straight from the
metric definitions, sharing no code with the implementation.  Interval
endpoints for the oracle side come from scipy.stats.norm.ppf so the
stdlib inv_cdf path is cross-checked too.
"""

import itertools
import json
import math

import numpy as np
import pytest
from scipy import stats

from shiftmdn.errors import ConfigError, DataError
from shiftmdn.metrics import (
    ACE_LEVELS,
    MetricsReport,
    ace,
    central_z,
    error_retention_auc,
    f1_retention,
    full_report,
    gaussian_nll,
    interval_sharpness,
    point_metrics,
    roc_auc_ood,
    save_curve_csv,
    uncertainty_scores,
)
from shiftmdn.network import PredictiveSummary


def make_summaries(means, var_aleatoric, var_epistemic=None):
    if var_epistemic is None:
        var_epistemic = np.zeros_like(np.asarray(means, dtype=np.float64))
    return [
        PredictiveSummary(float(m), float(va), float(ve))
        for m, va, ve in zip(means, var_aleatoric, var_epistemic)
    ]


class QuantileSummary:
    """Minimal stand-in for a calibrated summary: explicit quantiles."""

    def __init__(self, mean, std, quantile_fn, var_epistemic=0.0):
        self.mean = mean
        self.std = std
        self.var_aleatoric = std * std
        self.var_epistemic = var_epistemic
        self._fn = quantile_fn

    def quantile(self, p):
        return self._fn(p)


def random_instance(rng, n, tie_heavy=False):
    means = rng.normal(size=n) * 3.0
    va = rng.uniform(0.1, 4.0, size=n)
    ve = rng.uniform(0.0, 2.0, size=n)
    targets = rng.normal(size=n) * 3.0
    if tie_heavy:
        means = np.round(means)
        va = np.round(va * 2.0) / 2.0 + 0.5
        ve = np.round(ve)
        targets = np.round(targets)
    return make_summaries(means, va, ve), targets


# ---------------------------------------------------------------- oracles


def oracle_point(preds, targets):
    n = len(preds)
    mae = sum(abs(p - t) for p, t in zip(preds, targets)) / n
    rmse = math.sqrt(sum((p - t) ** 2 for p, t in zip(preds, targets)) / n)
    be = sum(p - t for p, t in zip(preds, targets)) / n
    return mae, rmse, be


def oracle_nll(means, stds, targets):
    terms = [
        0.5 * math.log(2.0 * math.pi * s * s) + (y - m) ** 2 / (2.0 * s * s)
        for m, s, y in zip(means, stds, targets)
    ]
    return sum(terms) / len(terms)


def oracle_intervals(summaries, level, which="aleatoric"):
    z = stats.norm.ppf(0.5 + 0.5 * level)
    lo, hi = [], []
    for s in summaries:
        if hasattr(s, "quantile"):
            lo.append(s.quantile(0.5 - 0.5 * level))
            hi.append(s.quantile(0.5 + 0.5 * level))
        else:
            v = s.var_aleatoric
            if which == "total":
                v += s.var_epistemic
            lo.append(s.mean - z * math.sqrt(v))
            hi.append(s.mean + z * math.sqrt(v))
    return lo, hi


def oracle_sharpness(summaries, targets, alpha, rng_width, which="aleatoric"):
    lo, hi = oracle_intervals(summaries, 1.0 - alpha, which)
    total = 0.0
    for l, u, y in zip(lo, hi, targets):
        s = u - l
        if y < l:
            s += (2.0 / alpha) * (l - y)
        if y > u:
            s += (2.0 / alpha) * (y - u)
        total += s
    return total / len(targets) / rng_width


def oracle_ace(summaries, targets, levels, which="aleatoric"):
    gaps = []
    for level in levels:
        lo, hi = oracle_intervals(summaries, level, which)
        hits = sum(1 for l, u, y in zip(lo, hi, targets) if l < y < u)
        gaps.append(hits / len(targets) - level)
    return sum(gaps) / len(gaps)


def oracle_order(scores):
    return [i for _, i in sorted((s, i) for i, s in enumerate(scores))]


def oracle_trapezoid(points):
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        area += 0.5 * (x1 - x0) * (y0 + y1)
    return area


def oracle_retention(summaries, targets, scores):
    order = oracle_order(scores)
    n = len(targets)
    points = [(0.0, 0.0)]
    for k in range(1, n + 1):
        kept = order[:k]
        mse = sum((summaries[i].mean - targets[i]) ** 2 for i in kept) / k
        points.append((k / n, mse))
    return oracle_trapezoid(points), points


def oracle_f1(summaries, targets, scores, threshold):
    order = oracle_order(scores)
    n = len(targets)
    acceptable = [abs(s.mean - y) < threshold
                  for s, y in zip(summaries, targets)]

    def f1_at(k):
        kept = set(order[:k])
        tp = sum(1 for i in range(n) if i in kept and acceptable[i])
        fp = sum(1 for i in range(n) if i in kept and not acceptable[i])
        fn = sum(1 for i in range(n) if i not in kept and acceptable[i])
        denom = 2 * tp + fp + fn
        return 1.0 if denom == 0 else 2.0 * tp / denom

    points = [(k / n, f1_at(k)) for k in range(0, n + 1)]
    k95 = math.ceil(0.95 * n - 1e-12)
    return oracle_trapezoid(points), f1_at(k95), points


def oracle_roc(uid, uood):
    wins = 0.0
    for u in uood:
        for v in uid:
            if u > v:
                wins += 1.0
            elif u == v:
                wins += 0.5
    return wins / (len(uid) * len(uood))


# ----------------------------------------------------------- hand values


class TestPointMetrics:
    def test_constant_error(self):
        assert point_metrics([1.0, 1.0], [0.0, 0.0]) == (1.0, 1.0, 1.0)

    def test_cancelling_bias(self):
        assert point_metrics([1.0, -1.0], [0.0, 0.0]) == (1.0, 1.0, 0.0)

    def test_perfect(self):
        assert point_metrics([2.0, 3.0], [2.0, 3.0]) == (0.0, 0.0, 0.0)

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            point_metrics([1.0], [1.0, 2.0])

    def test_empty(self):
        with pytest.raises(DataError):
            point_metrics([], [])


class TestGaussianNll:
    def test_unit_sigma_zero_residual(self):
        got = gaussian_nll([0.0, 1.0], [1.0, 1.0], [0.0, 1.0])
        assert got == pytest.approx(0.5 * math.log(2.0 * math.pi), abs=1e-12)

    def test_sigma_two(self):
        got = gaussian_nll([0.0], [2.0], [0.0])
        want = 0.5 * math.log(2.0 * math.pi) + math.log(2.0)
        assert got == pytest.approx(want, abs=1e-12)

    def test_scale_shift_identity(self):
        rng = np.random.default_rng(0)
        mu = rng.normal(size=50)
        sd = rng.uniform(0.5, 2.0, size=50)
        y = mu + rng.normal(size=50) * sd
        base = gaussian_nll(mu, sd, y)
        c = 3.7
        shifted = gaussian_nll(mu * c, sd * c, y * c)
        assert shifted == pytest.approx(base + math.log(c), abs=1e-12)

    def test_nonpositive_std(self):
        with pytest.raises(DataError):
            gaussian_nll([0.0], [0.0], [0.0])


class TestIntervalSharpness:
    def test_constant_width_all_covered(self):
        # central 68% interval width = 2 z sigma; targets at the means
        sigma = 1.5
        summaries = make_summaries([0.0, 10.0], [sigma**2, sigma**2])
        width = 2.0 * central_z(0.68) * sigma
        got = interval_sharpness(summaries, [0.0, 10.0], alpha=0.32)
        assert got == pytest.approx(width / 10.0, abs=1e-12)

    def test_single_sample_miss(self):
        s = QuantileSummary(0.5, 1.0, lambda p: float(p >= 0.75))
        got = interval_sharpness([s], [2.0], alpha=0.5, target_range=1.0)
        assert got == pytest.approx(5.0, abs=1e-12)

    def test_gaussian_path_same_example(self):
        # Gaussian whose central 50% interval is exactly [0, 1]
        sigma = 0.5 / central_z(0.5)
        summaries = make_summaries([0.5], [sigma**2])
        got = interval_sharpness(summaries, [2.0], alpha=0.5,
                                 target_range=1.0)
        assert got == pytest.approx(5.0, abs=1e-12)

    def test_narrower_is_sharper(self):
        y = np.array([0.0, 1.0, 2.0])
        wide = make_summaries(y, [4.0, 4.0, 4.0])
        narrow = make_summaries(y, [1.0, 1.0, 1.0])
        assert interval_sharpness(narrow, y) < interval_sharpness(wide, y)

    def test_degenerate_range(self):
        summaries = make_summaries([0.0], [1.0])
        with pytest.raises(DataError):
            interval_sharpness(summaries, [1.0])

    def test_unnormalized_flag(self):
        sigma = 2.0
        summaries = make_summaries([0.0, 5.0], [sigma**2, sigma**2])
        got = interval_sharpness(summaries, [0.0, 5.0], normalize=False)
        assert got == pytest.approx(2.0 * central_z(0.68) * sigma, abs=1e-12)


class TestAce:
    def test_zero_width_intervals(self):
        summaries = make_summaries([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
        got = ace(summaries, [1.0, 2.0, 3.0])
        assert got == pytest.approx(-0.5, abs=1e-12)

    def test_cover_everything(self):
        summaries = make_summaries([0.0, 0.0], [1e12, 1e12])
        got = ace(summaries, [1.0, -1.0])
        assert got == pytest.approx(0.5, abs=1e-12)

    def test_calibrated_sampling(self):
        rng = np.random.default_rng(7)
        n = 100_000
        mu = rng.normal(size=n)
        sd = rng.uniform(0.5, 2.0, size=n)
        y = mu + sd * rng.normal(size=n)
        got = ace(make_summaries(mu, sd**2), y)
        assert abs(got) < 0.01


class TestRetention:
    def test_all_errors_zero(self):
        summaries = make_summaries([1.0, 2.0], [0.5, 1.5])
        r_auc, curve = error_retention_auc(summaries, [1.0, 2.0])
        assert r_auc == 0.0
        assert np.all(curve[:, 1] == 0.0)

    def test_hand_trapezoid(self):
        summaries = make_summaries([0.0, 2.0], [0.0, 1.0])
        r_auc, curve = error_retention_auc(summaries, [0.0, 0.0])
        assert r_auc == pytest.approx(0.5, abs=1e-15)
        want = np.array([[0.0, 0.0], [0.5, 0.0], [1.0, 2.0]])
        assert np.allclose(curve, want, atol=1e-15)

    def test_perfect_ordering_minimizes_r_auc(self):
        # uncertainty anti-correlated with |error|: no permutation of the
        # score assignment does better
        errors = np.array([0.1, 0.5, 1.0, 2.0, 3.0, 5.0])
        targets = np.zeros_like(errors)
        best = None
        aucs = []
        for perm in itertools.permutations(range(len(errors))):
            scores = np.array(perm, dtype=np.float64)
            summaries = make_summaries(errors, scores + 1.0)
            r_auc, _ = error_retention_auc(summaries, targets,
                                           score="aleatoric")
            aucs.append(r_auc)
            if perm == tuple(range(len(errors))):
                best = r_auc
        assert best == pytest.approx(min(aucs), abs=1e-15)

    def test_monotone_score_transform_invariance(self):
        rng = np.random.default_rng(3)
        summaries, targets = random_instance(rng, 40)
        base_auc, base_curve = error_retention_auc(summaries, targets)
        scores = uncertainty_scores(summaries)
        for fn in (lambda s: 3.0 * s + 1.0, np.exp, np.sqrt):
            mapped = make_summaries(
                [s.mean for s in summaries], fn(scores))
            auc2, curve2 = error_retention_auc(mapped, targets,
                                               score="aleatoric")
            assert auc2 == pytest.approx(base_auc, abs=1e-12)
            assert np.allclose(curve2, base_curve, atol=1e-12)


class TestF1Retention:
    def test_all_acceptable_at_95(self):
        n = 20
        summaries = make_summaries(np.zeros(n), np.linspace(1, 2, n))
        f1_auc, f1_95, curve = f1_retention(summaries, np.zeros(n))
        assert f1_95 == pytest.approx(38.0 / 39.0, abs=1e-12)
        assert curve[0, 1] == 0.0

    def test_none_acceptable(self):
        n = 5
        summaries = make_summaries(np.full(n, 10.0), np.ones(n))
        f1_auc, f1_95, curve = f1_retention(summaries, np.zeros(n))
        assert np.all(curve[1:, 1] == 0.0)
        assert curve[0, 1] == 1.0
        assert f1_95 == 0.0

    def test_perfect_ordering_maximizes_f1_auc(self):
        errors = np.array([0.1, 0.2, 0.3, 2.0, 3.0, 4.0])
        targets = np.zeros_like(errors)
        best = None
        aucs = []
        for perm in itertools.permutations(range(len(errors))):
            scores = np.array(perm, dtype=np.float64)
            summaries = make_summaries(errors, scores + 1.0)
            f1_auc, _, _ = f1_retention(summaries, targets,
                                        score="aleatoric")
            aucs.append(f1_auc)
            if perm == tuple(range(len(errors))):
                best = f1_auc
        assert best == pytest.approx(max(aucs), abs=1e-15)

    def test_threshold_validated(self):
        summaries = make_summaries([0.0], [1.0])
        with pytest.raises(ConfigError):
            f1_retention(summaries, [0.0], threshold=0.0)


class TestRocAucOod:
    def test_perfect_separation(self):
        assert roc_auc_ood([0.1, 0.2], [0.8, 0.9]) == 1.0

    def test_all_ties(self):
        assert roc_auc_ood([3.0, 3.0], [3.0, 3.0, 3.0]) == 0.5

    def test_reversed(self):
        assert roc_auc_ood([0.8, 0.9], [0.1, 0.2]) == 0.0

    def test_against_pairwise_oracle(self):
        rng = np.random.default_rng(11)
        uid = rng.normal(size=50)
        uood = rng.normal(size=50) + 0.5
        got = roc_auc_ood(uid, uood)
        assert got == pytest.approx(oracle_roc(uid, uood), abs=1e-12)

    def test_tie_heavy_against_oracle(self):
        rng = np.random.default_rng(12)
        uid = rng.integers(0, 4, size=60).astype(np.float64)
        uood = rng.integers(1, 5, size=40).astype(np.float64)
        got = roc_auc_ood(uid, uood)
        assert got == pytest.approx(oracle_roc(uid, uood), abs=1e-12)

    def test_empty_side(self):
        with pytest.raises(DataError):
            roc_auc_ood([], [1.0])


# ------------------------------------------------- oracle agreement sweep


class TestBruteForceAgreement:
    def test_random_instances(self):
        rng = np.random.default_rng(2024)
        for trial in range(40):
            n = int(rng.integers(2, 100))
            summaries, targets = random_instance(
                rng, n, tie_heavy=trial % 3 == 0)
            means, va, ve = (np.array([s.mean for s in summaries]),
                             np.array([s.var_aleatoric for s in summaries]),
                             np.array([s.var_epistemic for s in summaries]))
            scores = va + ve

            got = point_metrics(means, targets)
            want = oracle_point(means, targets)
            assert got == pytest.approx(want, abs=1e-12)

            sd = np.sqrt(va)
            assert gaussian_nll(means, sd, targets) == pytest.approx(
                oracle_nll(means, sd, targets), abs=1e-12)

            rng_width = float(np.max(targets) - np.min(targets))
            if rng_width > 0:
                assert interval_sharpness(
                    summaries, targets) == pytest.approx(
                        oracle_sharpness(summaries, targets, 0.32, rng_width),
                        abs=1e-12)

            assert ace(summaries, targets) == pytest.approx(
                oracle_ace(summaries, targets, ACE_LEVELS), abs=1e-12)

            r_auc, curve = error_retention_auc(summaries, targets)
            want_auc, want_points = oracle_retention(
                summaries, targets, scores)
            assert r_auc == pytest.approx(want_auc, abs=1e-12)
            assert np.allclose(curve, np.array(want_points), atol=1e-12)

            f1_auc, f1_95, f1_curve = f1_retention(summaries, targets)
            w_auc, w_95, w_points = oracle_f1(
                summaries, targets, scores, 1.0)
            assert f1_auc == pytest.approx(w_auc, abs=1e-12)
            assert f1_95 == pytest.approx(w_95, abs=1e-12)
            assert np.allclose(f1_curve, np.array(w_points), atol=1e-12)

    def test_total_variance_flag(self):
        rng = np.random.default_rng(5)
        summaries, targets = random_instance(rng, 30)
        got = ace(summaries, targets, distribution_variance="total")
        want = oracle_ace(summaries, targets, ACE_LEVELS, which="total")
        assert got == pytest.approx(want, abs=1e-12)


# ------------------------------------------------------------- properties


class TestProperties:
    def test_rmse_mae_be_ordering(self):
        rng = np.random.default_rng(21)
        for _ in range(20):
            x = rng.normal(size=30)
            y = rng.normal(size=30)
            mae, rmse, be = point_metrics(x, y)
            assert rmse >= mae - 1e-15
            assert mae >= abs(be) - 1e-15

    def test_sharpness_matches_analytic_on_calibrated(self):
        # quantile-midpoint draws from the predictive Gaussian kill the
        # O(n^-1/2) sampling noise, so the closed form is matched tightly
        n = 100_000
        rng = np.random.default_rng(17)
        mu = rng.normal(size=n)
        z_grid = stats.norm.ppf((np.arange(n) + 0.5) / n)
        rng.shuffle(z_grid)
        y = mu + z_grid
        summaries = make_summaries(mu, np.ones(n))
        alpha = 0.32
        z = stats.norm.ppf(1.0 - alpha / 2.0)
        analytic = 2.0 * z + (4.0 / alpha) * (
            stats.norm.pdf(z) - z * stats.norm.sf(z))
        got = interval_sharpness(summaries, y, alpha, normalize=False)
        assert got == pytest.approx(analytic, abs=1e-3)
        assert abs(ace(summaries, y)) < 1e-3

    def test_retention_grid_strictly_increasing(self):
        rng = np.random.default_rng(8)
        summaries, targets = random_instance(rng, 25, tie_heavy=True)
        _, curve = error_retention_auc(summaries, targets)
        assert np.all(np.diff(curve[:, 0]) > 0)
        assert curve[0, 0] == 0.0 and curve[-1, 0] == 1.0


# ------------------------------------------------------------ full report


class TestFullReport:
    def test_perfect_deterministic(self):
        y = np.array([1.0, 2.0, 3.0])
        summaries = make_summaries(y, np.ones(3))
        report = full_report(summaries, y)
        assert report.mae == 0.0 and report.rmse == 0.0 and report.be == 0.0
        assert report.nll == pytest.approx(0.9189385, abs=1e-6)
        assert report.roc_auc_ood is None

    def test_matches_individual_operations(self):
        rng = np.random.default_rng(33)
        summaries, targets = random_instance(rng, 60)
        uid = rng.uniform(0.1, 1.0, size=40)
        report = full_report(summaries, targets, id_uncertainties=uid)
        means, va, ve = (np.array([s.mean for s in summaries]),
                         np.array([s.var_aleatoric for s in summaries]),
                         np.array([s.var_epistemic for s in summaries]))
        assert (report.mae, report.rmse, report.be) == point_metrics(
            means, targets)
        assert report.nll == gaussian_nll(means, np.sqrt(va), targets)
        assert report.sharpness == interval_sharpness(summaries, targets)
        assert report.ace == ace(summaries, targets)
        r_auc, _ = error_retention_auc(summaries, targets)
        assert report.r_auc == r_auc
        f1_auc, f1_95, _ = f1_retention(summaries, targets)
        assert report.f1_auc == f1_auc and report.f1_at_95 == f1_95
        assert report.roc_auc_ood == roc_auc_ood(
            uid, uncertainty_scores(summaries))

    def test_json_round_trip(self, tmp_path):
        rng = np.random.default_rng(44)
        summaries, targets = random_instance(rng, 15)
        report = full_report(summaries, targets,
                             id_uncertainties=[0.1, 0.2, 0.3])
        path = tmp_path / "report.json"
        report.save(path)
        back = MetricsReport.load(path)
        assert back.to_dict() == report.to_dict()
        doc = json.loads(path.read_text())
        assert "is" in doc and doc["is"] == report.sharpness

    def test_curve_csv(self, tmp_path):
        rng = np.random.default_rng(45)
        summaries, targets = random_instance(rng, 10)
        report = full_report(summaries, targets)
        path = tmp_path / "curve.csv"
        save_curve_csv(report.error_retention_curve, path, "mse")
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "r,mse"
        assert len(lines) == 12
        r, v = lines[1].split(",")
        assert float(r) == 0.0 and float(v) == 0.0
