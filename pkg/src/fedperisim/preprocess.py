"""Fit-on-train preprocessing: outlier winsorization, imputation with
presence flags, standardization, time-series resampling and the
chronological train/validation/test split.

Everything is fitted on a training cohort only and applied unchanged to
validation/test cohorts; applying is pure per record, with winsorization
draws keyed by (seed, "preprocess", site, record_id, feature) so results
do not depend on iteration order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .base import ParamsMixin, check_is_fitted
from .cohort import Cohort, FeatureSchema, MISSING_TOKEN, Record
from .errors import ContractError, FitError, SplitError
from .rng import stream

PERCENTILE_POINTS = (0.5, 1.0, 5.0, 95.0, 99.0, 99.5)


@dataclass
class ContinuousStats:
    """Training-cohort order statistics for one continuous feature.

    Percentiles use linear interpolation between closest ranks.  A feature
    whose observed training values are all identical is flagged degenerate
    and standardizes to zero.
    """

    p0_5: float
    p1: float
    p5: float
    p95: float
    p99: float
    p99_5: float
    median: float
    mean: float
    std: float

    @property
    def degenerate(self):
        return self.std == 0.0

    @classmethod
    def from_values(cls, values):
        v = np.asarray(values, dtype=np.float64)
        pts = np.percentile(v, PERCENTILE_POINTS, method="linear")
        # identical values have exactly zero spread; do not let float noise
        # in the moment computation hide the degenerate flag
        std = 0.0 if v.min() == v.max() else float(v.std())
        return cls(
            p0_5=float(pts[0]), p1=float(pts[1]), p5=float(pts[2]),
            p95=float(pts[3]), p99=float(pts[4]), p99_5=float(pts[5]),
            median=float(np.percentile(v, 50.0, method="linear")),
            mean=float(v.mean()), std=std,
        )


@dataclass
class ChannelStats:
    """Training-cohort summary of one intraoperative channel."""

    median: float
    mean: float
    std: float

    @property
    def degenerate(self):
        return self.std == 0.0


@dataclass
class FittedTransform:
    """Everything preprocessing learned from one training cohort."""

    site: str
    seed: int
    continuous: dict  # feature -> ContinuousStats
    channels: dict  # channel -> ChannelStats
    vocab: dict  # feature -> {token: id}

    def to_json(self):
        return {
            "site": self.site,
            "seed": self.seed,
            "continuous": {k: vars(v) for k, v in sorted(self.continuous.items())},
            "channels": {k: vars(v) for k, v in sorted(self.channels.items())},
            "vocab": {k: dict(v) for k, v in sorted(self.vocab.items())},
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            site=obj["site"],
            seed=obj["seed"],
            continuous={k: ContinuousStats(**v) for k, v in obj["continuous"].items()},
            channels={k: ChannelStats(**v) for k, v in obj["channels"].items()},
            vocab={k: dict(v) for k, v in obj["vocab"].items()},
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def fit_transform_params(train: Cohort, schema: FeatureSchema, seed: int) -> FittedTransform:
    """Fit percentiles/medians/moments from observed training values only."""
    if len(train) == 0:
        raise FitError("cannot fit on an empty training cohort")

    continuous = {}
    for name in schema.continuous_names:
        values = [r.continuous_vals[name] for r in train.records
                  if name in r.continuous_vals]
        if not values:
            raise FitError(f"continuous feature {name!r} has no observed training values")
        continuous[name] = ContinuousStats.from_values(values)

    channels = {}
    for channel in schema.channel_names:
        values = [v for r in train.records
                  for _m, v in r.timeseries.get(channel, [])]
        if not values:
            raise FitError(f"time-series channel {channel!r} has no observed training values")
        arr = np.asarray(values, dtype=np.float64)
        channels[channel] = ChannelStats(
            median=float(np.percentile(arr, 50.0, method="linear")),
            mean=float(arr.mean()),
            std=0.0 if arr.min() == arr.max() else float(arr.std()),
        )

    vocab = {name: {token: i for i, token in enumerate(tokens)}
             for name, tokens in schema.high_cardinality}
    return FittedTransform(site=train.site, seed=seed,
                           continuous=continuous, channels=channels, vocab=vocab)


def winsorize_outliers(value: float, stats: ContinuousStats, rng) -> float:
    """Replace values beyond the 1st/99th training percentiles by a uniform
    draw from the adjacent band ([p0.5, p5] below, [p95, p99.5] above)."""
    if value > stats.p99:
        return float(rng.uniform(stats.p95, stats.p99_5))
    if value < stats.p1:
        return float(rng.uniform(stats.p0_5, stats.p5))
    return float(value)


def impute_and_flag(record: Record, fitted: FittedTransform, schema: FeatureSchema):
    """Densify one record's preoperative features.

    Missing continuous values take the training median with presence 0;
    observed values are winsorized with presence 1.  Missing binaries map
    to 0 with presence 0.  Missing or unseen categories map to the reserved
    id 0.  Returns (cont_values, cont_presence, bin_values, bin_presence,
    cat_ids); continuous values are raw (not yet standardized).
    """
    n_cont = len(schema.continuous_names)
    cont = np.empty(n_cont)
    cont_presence = np.zeros(n_cont)
    for i, name in enumerate(schema.continuous_names):
        stats = fitted.continuous[name]
        raw = record.continuous_vals.get(name)
        if raw is None:
            cont[i] = stats.median
        else:
            if raw > stats.p99 or raw < stats.p1:
                # keyed draw only when a replacement is actually needed
                rng = stream(fitted.seed, "preprocess", fitted.site,
                             record.record_id, name)
                cont[i] = winsorize_outliers(raw, stats, rng)
            else:
                cont[i] = float(raw)
            cont_presence[i] = 1.0

    n_bin = len(schema.binary)
    bins = np.zeros(n_bin)
    bin_presence = np.zeros(n_bin)
    for i, name in enumerate(schema.binary):
        if name in record.binary_vals:
            bins[i] = float(record.binary_vals[name])
            bin_presence[i] = 1.0

    cat_ids = np.zeros(len(schema.categorical_names), dtype=np.int64)
    for i, name in enumerate(schema.categorical_names):
        token = record.categorical_vals.get(name, MISSING_TOKEN)
        cat_ids[i] = fitted.vocab[name].get(token, 0)

    return cont, cont_presence, bins, bin_presence, cat_ids


def standardize(values, fitted: FittedTransform, schema: FeatureSchema):
    """z = (x - train_mean) / train_std per feature; degenerate features -> 0.

    Accepts a single feature vector or an (n, n_cont) matrix.
    """
    values = np.asarray(values, dtype=np.float64)
    mean = np.array([fitted.continuous[n].mean for n in schema.continuous_names])
    std = np.array([fitted.continuous[n].std for n in schema.continuous_names])
    scale = np.where(std == 0.0, 1.0, std)
    out = (values - mean) / scale
    out[..., std == 0.0] = 0.0
    return out


def resample_timeseries(observations, duration: int, channel_stats: ChannelStats):
    """Place a channel on a dense 1-minute grid of the given duration.

    Interior gaps are linearly interpolated, leading/trailing gaps take the
    nearest observed value, and a fully missing channel becomes a constant
    training-median series.  Presence is 1 only at originally observed
    minutes.
    """
    if duration < 1:
        raise ContractError(f"duration must be >= 1, got {duration}")
    obs = [(m, v) for m, v in observations if 0 <= m < duration]
    minutes = [m for m, _v in obs]
    if len(minutes) != len(set(minutes)):
        raise ContractError("duplicate minute entries in time-series channel")

    presence = np.zeros(duration)
    if not obs:
        return np.full(duration, channel_stats.median), presence

    obs.sort()
    xs = np.array([m for m, _v in obs], dtype=np.float64)
    ys = np.array([v for _m, v in obs], dtype=np.float64)
    grid = np.arange(duration, dtype=np.float64)
    # np.interp clamps to the boundary values, which is exactly the
    # nearest-observation fill for leading/trailing gaps.
    values = np.interp(grid, xs, ys)
    presence[xs.astype(np.int64)] = 1.0
    return values, presence


def lab_summary(observations, window):
    """(count, mean, variance, min, max) of lab values within a day window.

    ``window`` is (lo, hi) in negative day offsets, inclusive on both ends;
    variance is the population variance.  With no observations in the
    window the four value statistics are missing (None).
    """
    lo, hi = window
    for day, _v in observations:
        if day >= 0:
            raise ContractError(f"lab day offsets must be strictly negative, got {day}")
    values = [v for day, v in observations if lo <= day <= hi]
    if not values:
        return 0, None, None, None, None
    arr = np.asarray(values, dtype=np.float64)
    return (len(values), float(arr.mean()), float(arr.var()),
            float(arr.min()), float(arr.max()))


def chronological_split(cohort: Cohort):
    """63/7/30 split ordered by surgery time (ties broken by record id)."""
    n = len(cohort)
    if n < 15:
        raise SplitError(f"need at least 15 records to split chronologically, got {n}")
    order = sorted(cohort.records, key=lambda r: (r.surgery_time, r.record_id))
    n_train = int(np.floor(0.63 * n))
    n_val = int(np.floor(0.07 * n))
    train = Cohort(cohort.site, cohort.schema, order[:n_train])
    val = Cohort(cohort.site, cohort.schema, order[n_train:n_train + n_val])
    test = Cohort(cohort.site, cohort.schema, order[n_train + n_val:])
    return train, val, test


@dataclass
class TransformedCohort:
    """Dense model-ready view of a cohort under one fitted transform.

    The binary-branch input stacks the binary values with the continuous
    and binary presence flags (presence features are 0/1 and live in the
    binary branch).
    """

    site: str
    fit_site: str
    record_ids: list
    x_cont: np.ndarray  # (n, n_cont) standardized
    x_bin: np.ndarray  # (n, n_bin + n_cont + n_bin)
    x_cat: np.ndarray  # (n, n_cat) embedding ids
    labels: np.ndarray  # (n, 9)
    sex: np.ndarray
    race: np.ndarray
    age: np.ndarray
    series_vals: list = field(default_factory=list)  # per record (T_i, C) or None
    series_pres: list = field(default_factory=list)

    def __len__(self):
        return self.x_cont.shape[0]

    @property
    def has_series(self):
        return bool(self.series_vals)

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return TransformedCohort(
            site=self.site,
            fit_site=self.fit_site,
            record_ids=[self.record_ids[i] for i in idx],
            x_cont=self.x_cont[idx],
            x_bin=self.x_bin[idx],
            x_cat=self.x_cat[idx],
            labels=self.labels[idx],
            sex=self.sex[idx],
            race=self.race[idx],
            age=self.age[idx],
            series_vals=[self.series_vals[i] for i in idx] if self.has_series else [],
            series_pres=[self.series_pres[i] for i in idx] if self.has_series else [],
        )

    def make_batch(self, idx, with_series):
        idx = np.asarray(idx, dtype=np.int64)
        batch = Batch(
            cont=self.x_cont[idx],
            bins=self.x_bin[idx],
            cats=self.x_cat[idx],
            labels=self.labels[idx],
        )
        if with_series:
            if not self.has_series:
                raise ContractError("postoperative batches need transformed time series")
            vals = [self.series_vals[i] for i in idx]
            pres = [self.series_pres[i] for i in idx]
            t_max = max(v.shape[0] for v in vals)
            n, c = len(idx), vals[0].shape[1]
            batch.ts_vals = np.zeros((n, t_max, c))
            batch.ts_pres = np.zeros((n, t_max, c))
            batch.ts_mask = np.zeros((n, t_max))
            for j, (v, p) in enumerate(zip(vals, pres)):
                t = v.shape[0]
                batch.ts_vals[j, :t] = v
                batch.ts_pres[j, :t] = p
                batch.ts_mask[j, :t] = 1.0
        return batch


@dataclass
class Batch:
    cont: np.ndarray
    bins: np.ndarray
    cats: np.ndarray
    labels: np.ndarray
    ts_vals: np.ndarray = None
    ts_pres: np.ndarray = None
    ts_mask: np.ndarray = None

    def __len__(self):
        return self.cont.shape[0]


class CohortPreprocessor(ParamsMixin):
    """Estimator-style wrapper: fit on a raw training cohort, transform raw
    cohorts into dense model inputs.  Raw records in, matrices out; the two
    types are distinct so a transform can never be applied twice."""

    def __init__(self, schema: FeatureSchema, seed: int = 0):
        self.schema = schema
        self.seed = seed
        self.fitted_ = None

    def fit(self, train: Cohort):
        self.fitted_ = fit_transform_params(train, self.schema, self.seed)
        return self

    @classmethod
    def from_fitted(cls, schema, fitted: FittedTransform):
        pre = cls(schema, seed=fitted.seed)
        pre.fitted_ = fitted
        return pre

    def transform(self, cohort: Cohort, with_series: bool = False) -> TransformedCohort:
        check_is_fitted(self, "fitted_")
        fitted = self.fitted_
        schema = self.schema
        n = len(cohort)
        n_cont = len(schema.continuous_names)
        n_bin = len(schema.binary)

        x_cont = np.zeros((n, n_cont))
        x_bin = np.zeros((n, n_bin + n_cont + n_bin))
        x_cat = np.zeros((n, len(schema.categorical_names)), dtype=np.int64)
        labels = np.zeros((n, len(schema.outcomes)))
        sex = np.empty(n, dtype="U1")
        race = np.empty(n, dtype="U6")
        age = np.zeros(n)
        series_vals, series_pres = [], []

        chan_mean = np.array([fitted.channels[c].mean for c in schema.channel_names])
        chan_std = np.array([fitted.channels[c].std for c in schema.channel_names])
        chan_scale = np.where(chan_std == 0.0, 1.0, chan_std)

        for i, record in enumerate(cohort.records):
            cont, cont_pres, bins, bin_pres, cat_ids = impute_and_flag(
                record, fitted, schema)
            x_cont[i] = cont
            x_bin[i] = np.concatenate([bins, cont_pres, bin_pres])
            x_cat[i] = cat_ids
            labels[i] = record.labels
            sex[i] = record.sex
            race[i] = record.race
            age[i] = record.age_years

            if with_series:
                t = record.duration_minutes
                vals = np.zeros((t, len(schema.channel_names)))
                pres = np.zeros((t, len(schema.channel_names)))
                for j, channel in enumerate(schema.channel_names):
                    v, p = resample_timeseries(
                        record.timeseries.get(channel, []), t, fitted.channels[channel])
                    vals[:, j] = v
                    pres[:, j] = p
                vals = (vals - chan_mean) / chan_scale
                vals[:, chan_std == 0.0] = 0.0
                series_vals.append(vals)
                series_pres.append(pres)

        return TransformedCohort(
            site=cohort.site, fit_site=fitted.site,
            record_ids=[r.record_id for r in cohort.records],
            x_cont=standardize(x_cont, fitted, schema),
            x_bin=x_bin, x_cat=x_cat, labels=labels,
            sex=sex, race=race, age=age,
            series_vals=series_vals, series_pres=series_pres,
        )


def save_transformed(tc: TransformedCohort, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "x_cont.npy", tc.x_cont)
    np.save(directory / "x_bin.npy", tc.x_bin)
    np.save(directory / "x_cat.npy", tc.x_cat)
    np.save(directory / "labels.npy", tc.labels)
    np.save(directory / "sex.npy", tc.sex)
    np.save(directory / "race.npy", tc.race)
    np.save(directory / "age.npy", tc.age)
    np.save(directory / "record_ids.npy", np.array(tc.record_ids))
    if tc.has_series:
        offsets = np.cumsum([0] + [v.shape[0] for v in tc.series_vals])
        np.save(directory / "series_offsets.npy", offsets)
        np.save(directory / "series_vals.npy", np.concatenate(tc.series_vals, axis=0))
        np.save(directory / "series_pres.npy", np.concatenate(tc.series_pres, axis=0))
    with open(directory / "meta.json", "w") as fh:
        json.dump({"site": tc.site, "fit_site": tc.fit_site,
                   "has_series": tc.has_series}, fh, sort_keys=True)
        fh.write("\n")


def load_transformed(directory) -> TransformedCohort:
    directory = Path(directory)
    with open(directory / "meta.json") as fh:
        meta = json.load(fh)
    series_vals, series_pres = [], []
    if meta["has_series"]:
        offsets = np.load(directory / "series_offsets.npy")
        vals = np.load(directory / "series_vals.npy")
        pres = np.load(directory / "series_pres.npy")
        for lo, hi in zip(offsets[:-1], offsets[1:]):
            series_vals.append(vals[lo:hi])
            series_pres.append(pres[lo:hi])
    return TransformedCohort(
        site=meta["site"], fit_site=meta["fit_site"],
        record_ids=[str(s) for s in np.load(directory / "record_ids.npy")],
        x_cont=np.load(directory / "x_cont.npy"),
        x_bin=np.load(directory / "x_bin.npy"),
        x_cat=np.load(directory / "x_cat.npy"),
        labels=np.load(directory / "labels.npy"),
        sex=np.load(directory / "sex.npy"),
        race=np.load(directory / "race.npy"),
        age=np.load(directory / "age.npy"),
        series_vals=series_vals, series_pres=series_pres,
    )
