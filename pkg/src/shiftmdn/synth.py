"""Synthetic multi-domain regression benchmarks with controlled covariate shift.

Six train/val domains (3 climates x Early/Late weeks) share one target
function y = w.x + A sin(B (w2.x)) + b0 + eps; only the feature means
mu_d differ between domains, with the held-out test domain ("polar")
pushed strictly further from the origin than any training domain.  A
single intercept b0 keeps the pooled data exactly linear when A = 0, so a
least-squares fit recovers the targets to the noise floor.

All randomness comes from PCG64 generators (numpy default_rng) keyed by
SeedSequence((seed, purpose[, domain])), purposes: 0 parameters, 1 train,
2 val, 3 test.  Identical config gives byte-identical CSV output.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .ingest import EnvironmentSplit, Frame, SchemaSpec, TimeRule

CLIMATES = ("dry", "temperate", "tropical")
TEST_CLIMATE = "polar"

# week-of-year constants consistent with the default TimeRule threshold 27
EARLY_WEEK = 40.0
LATE_WEEK = 10.0
TEST_WEEK = 20.0

_PARAMS, _TRAIN, _VAL, _TEST = 0, 1, 2, 3


@dataclass
class SynthConfig:
    seed: int = 0
    n_per_domain: int = 1000
    n_val_per_domain: int = None
    n_test: int = None
    n_features: int = 8
    train_offset_norm: float = 1.0
    ood_offset_norm: float = 3.0
    domain_offsets: object = None
    noise_std: object = 1.0
    # frequency 0.5 keeps the sin smooth at domain scale (argument std
    # about 1.4 rad) while an OoD mean shift moves it several radians
    sin_amplitude: float = 3.0
    sin_frequency: float = 0.5

    def __post_init__(self):
        if self.n_val_per_domain is None:
            self.n_val_per_domain = max(self.n_per_domain // 5, 10)
        if self.n_test is None:
            self.n_test = self.n_per_domain
        if self.n_per_domain < 10:
            raise ConfigError("n_per_domain must be >= 10")
        if self.n_val_per_domain < 10:
            raise ConfigError("n_val_per_domain must be >= 10")
        if self.n_test < 10:
            raise ConfigError("n_test must be >= 10")
        if self.n_features < 1:
            raise ConfigError("n_features must be >= 1")
        if self.sin_amplitude < 0:
            raise ConfigError("sin_amplitude must be >= 0")
        noise = np.broadcast_to(
            np.asarray(self.noise_std, dtype=np.float64), (7,))
        if np.any(noise <= 0):
            raise ConfigError("noise_std must be positive")
        if self.domain_offsets is not None:
            off = np.asarray(self.domain_offsets, dtype=np.float64)
            if off.shape != (7, self.n_features):
                raise ConfigError(
                    f"domain_offsets must have shape (7, {self.n_features})")
            norms = np.linalg.norm(off, axis=1)
            if not np.all(norms[6] > norms[:6]):
                raise ConfigError(
                    "OoD offset norm must exceed every train offset norm")
        elif not self.ood_offset_norm > self.train_offset_norm:
            raise ConfigError(
                "ood_offset_norm must exceed train_offset_norm")

    @property
    def noise_per_domain(self):
        return np.broadcast_to(
            np.asarray(self.noise_std, dtype=np.float64), (7,)).copy()

    def to_dict(self):
        d = {
            "seed": self.seed,
            "n_per_domain": self.n_per_domain,
            "n_val_per_domain": self.n_val_per_domain,
            "n_test": self.n_test,
            "n_features": self.n_features,
            "train_offset_norm": self.train_offset_norm,
            "ood_offset_norm": self.ood_offset_norm,
            "noise_std": self.noise_per_domain.tolist(),
            "sin_amplitude": self.sin_amplitude,
            "sin_frequency": self.sin_frequency,
        }
        if self.domain_offsets is not None:
            d["domain_offsets"] = np.asarray(
                self.domain_offsets, dtype=np.float64).tolist()
        return d


def domain_labels():
    """The six train/val domains in environment order, then the test domain."""
    labels = [f"{c}|{b}" for c in CLIMATES for b in ("Early", "Late")]
    return labels + [TEST_CLIMATE]


def benchmark_schema(n_features):
    return SchemaSpec(
        [("record_id", "meta"), ("climate", "climate"), ("week", "timestamp")]
        + [(f"x{i}", "feature") for i in range(n_features)]
        + [("y", "target")])


def _stream(seed, *key):
    return np.random.default_rng(np.random.SeedSequence((seed, *key)))


def _draw_parameters(config):
    rng = _stream(config.seed, _PARAMS)
    f = config.n_features
    w = rng.normal(size=f)
    w2 = rng.normal(size=f)
    b0 = float(rng.normal())
    if config.domain_offsets is not None:
        offsets = np.asarray(config.domain_offsets, dtype=np.float64)
    else:
        dirs = rng.normal(size=(7, f))
        # the test domain shifts along the nonlinearity's input direction,
        # so growing its norm genuinely degrades any smooth fit instead of
        # wandering off in a direction the target function ignores
        dirs[6] = w2
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        norms = np.array(
            [config.train_offset_norm] * 6 + [config.ood_offset_norm])
        offsets = dirs * norms[:, None]
    return w, w2, b0, offsets


def _domain_rows(rng, n, mu, noise, w, w2, b0, config):
    x = rng.normal(size=(n, len(mu))) + mu
    eps = rng.normal(scale=noise, size=n)
    y = (x @ w
         + config.sin_amplitude * np.sin(config.sin_frequency * (x @ w2))
         + b0 + eps)
    return x, y


def _domain_frame(config, purpose, n_rows, w, w2, b0, offsets, noise):
    """Features/targets for the 6 in-distribution domains, one frame."""
    feats, targets, climates, weeks = [], [], [], []
    for d in range(6):
        rng = _stream(config.seed, purpose, d)
        x, y = _domain_rows(
            rng, n_rows, offsets[d], noise[d], w, w2, b0, config)
        feats.append(x)
        targets.append(y)
        climate = CLIMATES[d // 2]
        week = EARLY_WEEK if d % 2 == 0 else LATE_WEEK
        climates += [climate] * n_rows
        weeks += [week] * n_rows
    return Frame(
        features=np.vstack(feats),
        target=np.concatenate(targets),
        climate=np.array(climates, dtype=object),
        time=np.array(weeks, dtype=np.float64),
        schema=benchmark_schema(config.n_features),
    )


def generate(config):
    """Build the benchmark: (EnvironmentSplit, ground-truth manifest)."""
    w, w2, b0, offsets = _draw_parameters(config)
    noise = config.noise_per_domain

    train = _domain_frame(
        config, _TRAIN, config.n_per_domain, w, w2, b0, offsets, noise)
    val = _domain_frame(
        config, _VAL, config.n_val_per_domain, w, w2, b0, offsets, noise)

    test_rng = _stream(config.seed, _TEST)
    x, y = _domain_rows(
        test_rng, config.n_test, offsets[6], noise[6], w, w2, b0, config)
    test = Frame(
        features=x,
        target=y,
        climate=np.full(config.n_test, TEST_CLIMATE, dtype=object),
        time=np.full(config.n_test, TEST_WEEK),
        domain=np.full(config.n_test, TEST_CLIMATE, dtype=object),
        schema=benchmark_schema(config.n_features),
    )

    split = EnvironmentSplit.build(train, val, test, TimeRule())
    manifest = {
        "config": config.to_dict(),
        "domains": domain_labels(),
        "w": w.tolist(),
        "w2": w2.tolist(),
        "b": [b0] * 7,
        "offsets": offsets.tolist(),
        "offset_norms": np.linalg.norm(offsets, axis=1).tolist(),
        "noise_std": noise.tolist(),
        "counts": {
            "train_per_domain": config.n_per_domain,
            "val_per_domain": config.n_val_per_domain,
            "test": config.n_test,
        },
        "weeks": {"Early": EARLY_WEEK, "Late": LATE_WEEK,
                  "test": TEST_WEEK},
    }
    return split, manifest


def write_frame_csv(path, frame):
    """Emit a frame in the benchmark CSV schema, full double precision."""
    schema = frame.schema
    getters = []
    feature_pos = {n: j for j, n in enumerate(schema.feature_names)}
    for name, role in schema.columns:
        if role == "meta":
            getters.append(lambda i: f"r{i:06d}")
        elif role == "climate":
            getters.append(lambda i: str(frame.climate[i]))
        elif role == "timestamp":
            getters.append(lambda i: repr(float(frame.time[i])))
        elif role == "target":
            getters.append(lambda i: repr(float(frame.target[i])))
        else:
            j = feature_pos[name]
            getters.append(lambda i, j=j: repr(float(frame.features[i, j])))
    with open(path, "w") as fh:
        fh.write(",".join(schema.names) + "\n")
        for i in range(frame.n_rows):
            fh.write(",".join(g(i) for g in getters) + "\n")


def write_benchmark(out_dir, config):
    """Generate and write train/val/test CSVs, schema, and manifest.

    Returns the manifest.  Output is byte-identical across runs with the
    same config.
    """
    import os

    split, manifest = generate(config)
    os.makedirs(out_dir, exist_ok=True)
    write_frame_csv(os.path.join(out_dir, "train.csv"), split.train_all)
    write_frame_csv(os.path.join(out_dir, "val.csv"), split.val_all)
    write_frame_csv(os.path.join(out_dir, "test.csv"), split.test)
    schema = benchmark_schema(config.n_features)
    with open(os.path.join(out_dir, "schema.json"), "w") as fh:
        json.dump(schema.to_dict(), fh, sort_keys=True, indent=2)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
    return manifest
