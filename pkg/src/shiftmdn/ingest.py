"""Tabular loading, environment splitting, and the two-stage scalers.

CSV columns carry one of five roles: meta (kept but never modeled),
feature, target, climate, timestamp.  Splitting partitions rows into
climate x {Early, Late} environments using a configurable week-of-year
threshold.  Features are standardized with train statistics and then
min-max mapped using the standardized train range, so the train frame
lands exactly in [0, 1]; the target's composed affine map sends the train
min/max to 0.1/0.9, leaving a buffer for shifted data.

All scaler statistics are population style (divide by n), keeping the
min/max exactness checks deterministic.  Frames are immutable after
construction.
"""

import json
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError
from .network import PredictiveSummary

ROLES = ("meta", "feature", "target", "climate", "timestamp")

TARGET_LO = 0.1
TARGET_HI = 0.9

# beta support is open; targets outside after shift are clamped this far in
NLL_CLAMP = 1e-4

TIME_BINS = ("Early", "Late")


@dataclass
class SchemaSpec:
    """Ordered (name, role) column declarations."""

    columns: list

    def __post_init__(self):
        names = [c[0] for c in self.columns]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate column names in schema")
        for name, role in self.columns:
            if role not in ROLES:
                raise ConfigError(f"unknown role {role!r} for column {name!r}")
        for role in ("target", "climate", "timestamp"):
            if len(self._names(role)) > 1:
                raise ConfigError(f"more than one {role} column in schema")

    def _names(self, role):
        return [n for n, r in self.columns if r == role]

    @property
    def names(self):
        return [c[0] for c in self.columns]

    @property
    def feature_names(self):
        return self._names("feature")

    @property
    def meta_names(self):
        return self._names("meta")

    @property
    def target_name(self):
        names = self._names("target")
        return names[0] if names else None

    @property
    def climate_name(self):
        names = self._names("climate")
        return names[0] if names else None

    @property
    def time_name(self):
        names = self._names("timestamp")
        return names[0] if names else None

    def to_dict(self):
        return {"columns": [{"name": n, "role": r} for n, r in self.columns]}

    @classmethod
    def from_dict(cls, d):
        return cls([(c["name"], c["role"]) for c in d["columns"]])

    def without_meta(self):
        return SchemaSpec([c for c in self.columns if c[1] != "meta"])


@dataclass
class Frame:
    """Immutable row set: features, optional target, and split columns.

    row_ids track positions in the originally loaded table so split
    manifests can reference source rows after subsetting.
    """

    features: np.ndarray
    target: np.ndarray = None
    climate: np.ndarray = None
    time: np.ndarray = None
    domain: np.ndarray = None
    schema: SchemaSpec = None
    meta: pd.DataFrame = None
    row_ids: np.ndarray = None
    n_dropped: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError("features must be a 2-D (rows, columns) array")
        n = self.features.shape[0]
        if not np.all(np.isfinite(self.features)):
            raise DataError("non-finite feature values")
        if self.target is not None:
            self.target = np.asarray(self.target, dtype=np.float64)
            if self.target.shape != (n,):
                raise DataError("target length does not match row count")
            if not np.all(np.isfinite(self.target)):
                raise DataError("non-finite target values")
        for name in ("climate", "domain"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=object)
                if v.shape != (n,):
                    raise DataError(f"{name} length does not match row count")
                setattr(self, name, v)
        if self.time is not None:
            self.time = np.asarray(self.time, dtype=np.float64)
            if self.time.shape != (n,):
                raise DataError("time length does not match row count")
        if self.row_ids is None:
            self.row_ids = np.arange(n)
        else:
            self.row_ids = np.asarray(self.row_ids, dtype=np.int64)
        for arr in (self.features, self.target, self.climate, self.time,
                    self.domain, self.row_ids):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def n_rows(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    def take(self, indices):
        """Subset rows into a new Frame, preserving source row ids."""
        indices = np.asarray(indices)
        return Frame(
            features=self.features[indices],
            target=None if self.target is None else self.target[indices],
            climate=None if self.climate is None else self.climate[indices],
            time=None if self.time is None else self.time[indices],
            domain=None if self.domain is None else self.domain[indices],
            schema=self.schema,
            meta=None if self.meta is None else
            self.meta.iloc[indices].reset_index(drop=True),
            row_ids=self.row_ids[indices],
        )

    def replace(self, **kwargs):
        fields = dict(
            features=self.features, target=self.target, climate=self.climate,
            time=self.time, domain=self.domain, schema=self.schema,
            meta=self.meta, row_ids=self.row_ids, n_dropped=self.n_dropped)
        fields.update(kwargs)
        return Frame(**fields)


def load_table(path, schema, missing="drop", delimiter=","):
    """Read a CSV into a Frame under the given schema.

    Cells pandas recognizes as missing are handled per `missing`: "drop"
    removes the row (count recorded on the Frame), "fail" raises.
    Non-numeric content in a numeric-role column is always an error,
    reported with its file line and column.
    """
    if missing not in ("drop", "fail"):
        raise ConfigError(f"missing policy must be drop or fail, not {missing!r}")
    try:
        raw = pd.read_csv(path, sep=delimiter, dtype=str, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: empty file") from None
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    if raw.shape[0] == 0:
        raise DataError(f"{path}: no data rows")

    have = list(raw.columns)
    missing_cols = [n for n in schema.names if n not in have]
    extra_cols = [n for n in have if n not in set(schema.names)]
    if missing_cols or extra_cols:
        parts = []
        if missing_cols:
            parts.append(f"missing columns {missing_cols}")
        if extra_cols:
            parts.append(f"unexpected columns {extra_cols}")
        raise DataError(f"{path}: header does not match schema: "
                        + "; ".join(parts))

    numeric_cols = list(schema.feature_names)
    if schema.target_name:
        numeric_cols.append(schema.target_name)
    if schema.time_name:
        numeric_cols.append(schema.time_name)

    converted = {}
    missing_mask = np.zeros(len(raw), dtype=bool)
    for name in numeric_cols:
        col = raw[name]
        absent = col.isna().to_numpy()
        try:
            # numpy's string conversion is correctly rounded, unlike
            # pandas' to_numeric, and exactness matters for byte-identical
            # round trips of generated data
            values = col.to_numpy(dtype=np.float64)
        except (ValueError, TypeError):
            values = None
        if values is None:
            for i, cell in enumerate(col):
                if absent[i]:
                    continue
                try:
                    float(cell)
                except (ValueError, TypeError):
                    raise DataError(
                        f"{path}: non-numeric value {cell!r} in column "
                        f"{name!r}, line {i + 2}") from None
            raise DataError(f"{path}: column {name!r} failed numeric parse")
        converted[name] = values
        missing_mask |= absent
    if schema.climate_name:
        missing_mask |= raw[schema.climate_name].isna().to_numpy()

    n_dropped = int(np.count_nonzero(missing_mask))
    if n_dropped and missing == "fail":
        i = int(np.flatnonzero(missing_mask)[0])
        raise DataError(f"{path}: missing value at line {i + 2} "
                        "(missing policy is fail)")
    keep = ~missing_mask
    if not np.any(keep):
        raise DataError(f"{path}: all rows dropped as missing")

    features = np.column_stack(
        [converted[n][keep] for n in schema.feature_names]
    ) if schema.feature_names else np.empty((int(keep.sum()), 0))
    return Frame(
        features=features,
        target=converted[schema.target_name][keep]
        if schema.target_name else None,
        climate=raw[schema.climate_name].to_numpy(dtype=object)[keep]
        if schema.climate_name else None,
        time=converted[schema.time_name][keep] if schema.time_name else None,
        schema=schema,
        meta=raw.loc[keep, schema.meta_names].reset_index(drop=True)
        if schema.meta_names else None,
        n_dropped=n_dropped,
    )


def drop_meta(frame):
    """Strip meta columns; feature order is untouched."""
    if frame.n_features == 0:
        raise DataError("no features remain after dropping meta columns")
    if frame.meta is None and (
            frame.schema is None or not frame.schema.meta_names):
        return frame
    return frame.replace(
        meta=None,
        schema=None if frame.schema is None else frame.schema.without_meta())


@dataclass
class TimeRule:
    """Week-of-year binning: week >= early_threshold is Early, else Late.

    The records run autumn to spring, so high week numbers open the
    season.  The boundary is a configurable guess.
    """

    early_threshold: float = 27.0

    def bins(self, time_values):
        return np.where(np.asarray(time_values) >= self.early_threshold,
                        "Early", "Late").astype(object)


def environment_labels(climates):
    """Deterministic environment order: climate lexicographic, Early first."""
    return [f"{c}|{b}" for c in sorted(climates) for b in TIME_BINS]


def split_environments(frame, time_rule=None, expected_climates=3):
    """Partition a frame into climate x time-bin environments.

    Returns (frames, labels) in the deterministic order.  The climate and
    timestamp columns come from the frame itself (schema roles).  Exactly
    `expected_climates` distinct climates must be present and every
    (climate, bin) cell must be nonempty.
    """
    if frame.climate is None:
        raise DataError("frame has no climate column; cannot split")
    if frame.time is None:
        raise DataError("frame has no timestamp column; cannot split")
    time_rule = time_rule or TimeRule()
    climates = sorted(set(frame.climate))
    if len(climates) != expected_climates:
        raise DataError(
            f"expected {expected_climates} climates, found {len(climates)}: "
            f"{climates}")
    bins = time_rule.bins(frame.time)
    labels = environment_labels(climates)
    frames = []
    for label in labels:
        climate, tbin = label.split("|")
        mask = (frame.climate == climate) & (bins == tbin)
        if not np.any(mask):
            raise DataError(f"environment {label!r} has no rows")
        tags = np.full(int(mask.sum()), label, dtype=object)
        frames.append(frame.take(np.flatnonzero(mask)).replace(domain=tags))
    return frames, labels


@dataclass
class EnvironmentSplit:
    """Six train/val environment frames plus their pools and the test set."""

    train_envs: list
    val_envs: list
    train_all: Frame
    val_all: Frame
    test: Frame
    labels: list

    @classmethod
    def build(cls, train_frame, val_frame, test_frame, time_rule=None,
              expected_climates=3):
        train_envs, labels = split_environments(
            train_frame, time_rule, expected_climates)
        val_envs, val_labels = split_environments(
            val_frame, time_rule, expected_climates)
        if labels != val_labels:
            raise DataError(
                f"train and validation climates differ: {labels} vs {val_labels}")
        return cls(train_envs, val_envs, train_frame, val_frame, test_frame,
                   labels)

    def validate(self):
        for envs, pool, what in ((self.train_envs, self.train_all, "train"),
                                 (self.val_envs, self.val_all, "validation")):
            ids = np.concatenate([f.row_ids for f in envs])
            if sorted(ids.tolist()) != sorted(pool.row_ids.tolist()):
                raise DataError(f"{what} environments do not partition the pool")
        return self

    def manifest(self):
        """JSON-ready description: per-environment source rows and counts."""
        def env_entry(frames):
            return {
                label: {
                    "count": f.n_rows,
                    "rows": f.row_ids.tolist(),
                }
                for label, f in zip(self.labels, frames)
            }
        return {
            "labels": list(self.labels),
            "train": env_entry(self.train_envs),
            "val": env_entry(self.val_envs),
            "test": {"count": self.test.n_rows},
        }


def save_split_manifest(path, split):
    with open(path, "w") as fh:
        json.dump(split.manifest(), fh, sort_keys=True, separators=(",", ":"))


@dataclass
class ScalerParams:
    """Composed feature and target scalers fitted on one training frame.

    Features: standardize by train mean/std, then min-max over the
    standardized train range.  Constant features (std 0) are flagged and
    always map to 0.5.  Target: one affine u = a*y + b sending the train
    min to 0.1 and max to 0.9.
    """

    feature_mean: np.ndarray
    feature_std: np.ndarray
    z_min: np.ndarray
    z_max: np.ndarray
    constant_mask: np.ndarray
    target_a: float
    target_b: float

    def transform_features(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.feature_mean.shape[0]:
            raise DataError(
                f"feature count {x.shape[-1]} does not match scaler "
                f"({self.feature_mean.shape[0]})")
        std = np.where(self.constant_mask, 1.0, self.feature_std)
        span = np.where(self.constant_mask, 1.0, self.z_max - self.z_min)
        z = (x - self.feature_mean) / std
        out = (z - self.z_min) / span
        return np.where(self.constant_mask, 0.5, out)

    def transform_target(self, y):
        return self.target_a * np.asarray(y, dtype=np.float64) + self.target_b

    def invert_target(self, u):
        return (np.asarray(u, dtype=np.float64) - self.target_b) / self.target_a

    @property
    def variance_scale(self):
        """Multiplier taking scaled-space variances to target units."""
        return 1.0 / self.target_a**2

    def to_dict(self):
        return {
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "z_min": self.z_min.tolist(),
            "z_max": self.z_max.tolist(),
            "constant_mask": self.constant_mask.astype(int).tolist(),
            "target_a": self.target_a,
            "target_b": self.target_b,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            feature_mean=np.asarray(d["feature_mean"], dtype=np.float64),
            feature_std=np.asarray(d["feature_std"], dtype=np.float64),
            z_min=np.asarray(d["z_min"], dtype=np.float64),
            z_max=np.asarray(d["z_max"], dtype=np.float64),
            constant_mask=np.asarray(d["constant_mask"], dtype=bool),
            target_a=float(d["target_a"]),
            target_b=float(d["target_b"]),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def fit_scalers(train):
    """Fit feature and target scalers on a training frame (>= 2 rows)."""
    if train.n_rows == 0:
        raise DataError("cannot fit scalers on an empty frame")
    if train.n_rows == 1:
        raise DataError("cannot fit scalers on a single row (std undefined)")
    if train.target is None:
        raise DataError("training frame has no target column")
    x = train.features
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    constant = std == 0.0
    safe_std = np.where(constant, 1.0, std)
    z = (x - mean) / safe_std
    z_min = z.min(axis=0)
    z_max = z.max(axis=0)

    y = train.target
    y_min, y_max = y.min(), y.max()
    if y_max == y_min:
        raise DataError("target is constant; scaler undefined")
    a = (TARGET_HI - TARGET_LO) / (y_max - y_min)
    b = TARGET_LO - a * y_min
    return ScalerParams(
        feature_mean=mean, feature_std=std, z_min=z_min, z_max=z_max,
        constant_mask=constant, target_a=float(a), target_b=float(b))


def transform(frame, scalers):
    """Scale a frame's features and target; split columns pass through."""
    features = scalers.transform_features(frame.features)
    target = None if frame.target is None else \
        scalers.transform_target(frame.target)
    return frame.replace(features=features, target=target)


def invert_target(u, scalers):
    return scalers.invert_target(u)


def variance_scale(scalers):
    return scalers.variance_scale


def clamp_targets(u, margin=NLL_CLAMP):
    """Clamp scaled targets into the open beta support.

    Returns (clamped, n_clamped).  Only likelihood evaluation uses the
    clamped values; point metrics always see the originals.
    """
    u = np.asarray(u, dtype=np.float64)
    clamped = np.clip(u, margin, 1.0 - margin)
    return clamped, int(np.count_nonzero(clamped != u))


def load_external_predictions(path):
    """Read externally produced predictions for scoring.

    CSV columns: pred_mean, pred_std_aleatoric, target, plus optional
    pred_std_epistemic and domain.  Returns (summaries, targets, domains),
    domains None when the column is absent.
    """
    try:
        # the default float parser is not correctly rounded; repr-written
        # files must survive a write/read cycle bit for bit
        df = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: empty file") from None
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    for col in ("pred_mean", "pred_std_aleatoric", "target"):
        if col not in df.columns:
            raise DataError(f"{path}: missing required column {col!r}")
    std_a = df["pred_std_aleatoric"].to_numpy(dtype=np.float64)
    bad = ~(std_a > 0)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise DataError(
            f"{path}: nonpositive aleatoric std at line {i + 2}")
    if "pred_std_epistemic" in df.columns:
        std_e = df["pred_std_epistemic"].to_numpy(dtype=np.float64)
        if np.any(std_e < 0):
            i = int(np.flatnonzero(std_e < 0)[0])
            raise DataError(
                f"{path}: negative epistemic std at line {i + 2}")
    else:
        std_e = np.zeros_like(std_a)
    mean = df["pred_mean"].to_numpy(dtype=np.float64)
    summaries = [
        PredictiveSummary(float(m), float(sa)**2, float(se)**2)
        for m, sa, se in zip(mean, std_a, std_e)
    ]
    targets = df["target"].to_numpy(dtype=np.float64)
    domains = df["domain"].to_numpy(dtype=object) \
        if "domain" in df.columns else None
    return summaries, targets, domains
