"""Synthetic two-site cohort generation.

Each site draws records from a shared latent-factor model: continuous and
binary features load on a handful of latent factors, intraoperative
channels follow AR(1) paths whose levels track the same factors, and the
nine outcome labels come from logistic models over the true feature
values, so trained models have signal to find.  Sites differ by
per-feature mean/scale offsets, outcome prevalences (calibrated
intercepts), an optional rotation of the outcome coefficients and
different subgroup mixes, which together produce the cross-site
heterogeneity the paradigm comparison needs.

Everything is keyed off (site seed, purpose), so a (spec, seed) pair is
bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cohort import (Cohort, FeatureSchema, MISSING_TOKEN, OUTCOME_NAMES,
                     Record, TIMESERIES_CHANNELS)
from .errors import CalibrationError, ConfigError
from .preprocess import lab_summary
from .rng import stream

N_LATENT = 6
LAB_ANALYTES = ("creatinine", "hemoglobin")
LAB_WINDOWS = {"7d": (-7, -1), "365d": (-365, -8)}
LAB_STATS = ("count", "mean", "variance", "min", "max")

CALIBRATION_DRAWS = 50_000
# contract: Monte-Carlo prevalence within +/-0.5% of target; bisect tighter
# so sampling noise in realized cohorts keeps the +/-1% invariant with margin
CALIBRATION_TOL = 0.005
BISECTION_TOL = 0.001
MAX_BISECTION_STEPS = 100

# Table-1-flavored default prevalences for the two training cohorts
GNV_PREVALENCES = (0.29, 0.09, 0.17, 0.12, 0.15, 0.05, 0.08, 0.16, 0.02)
JAX_PREVALENCES = (0.24, 0.08, 0.12, 0.11, 0.14, 0.04, 0.09, 0.14, 0.02)


def default_schema(n_continuous=50, n_binary=20, n_categorical=3, vocab_size=100,
                   n_channels=10) -> FeatureSchema:
    """Desk-scale stand-in for the full preoperative feature space."""
    lab_features = [(f"{analyte}_{window}_{stat}", "")
                    for analyte in LAB_ANALYTES
                    for window in LAB_WINDOWS
                    for stat in LAB_STATS]
    continuous = [("age", "years"), ("bmi", "kg/m2")] + lab_features
    if n_continuous < len(continuous):
        raise ConfigError(f"need at least {len(continuous)} continuous features")
    continuous += [(f"preop_feature_{i:02d}", "")
                   for i in range(n_continuous - len(continuous))]

    binary = ["sex_female", "race_african_american"]
    if n_binary < len(binary):
        raise ConfigError("need at least 2 binary features")
    binary += [f"comorbidity_{i:02d}" for i in range(n_binary - len(binary))]

    cat_names = ["surgeon_id", "procedure_code", "residence_zip"][:n_categorical]
    cat_names += [f"categorical_{i}" for i in range(n_categorical - len(cat_names))]
    vocab = (MISSING_TOKEN,) + tuple(f"v{i:03d}" for i in range(1, vocab_size))
    return FeatureSchema(
        continuous=tuple(continuous),
        binary=tuple(binary),
        high_cardinality=tuple((name, vocab) for name in cat_names),
        timeseries_channels=tuple(TIMESERIES_CHANNELS[:n_channels]),
        outcomes=OUTCOME_NAMES,
    )


@dataclass(frozen=True)
class SiteSpec:
    """One synthetic site: size, prevalence targets and heterogeneity knobs.

    ``shift_mean``/``shift_scale`` set the magnitude of per-feature
    mean/scale offsets versus the reference structure (the offsets
    themselves are drawn once from the site stream and live on the
    generator model); ``concept_shift`` rotates the outcome coefficient
    vectors away from the shared ones.
    """

    name: str
    n_records: int
    target_prevalences: tuple = GNV_PREVALENCES
    shift_mean: float = 0.0
    shift_scale: float = 0.0
    concept_shift: float = 0.0
    missing_continuous: float = 0.15
    missing_binary: float = 0.10
    missing_categorical: float = 0.10
    missing_channel: float = 0.05
    obs_density: float = 0.5
    ts_minutes: tuple = (30, 90)
    p_female: float = 0.5
    p_african_american: float = 0.15
    age_mean: float = 57.0
    age_sd: float = 17.0
    seed: int = 0

    def __post_init__(self):
        if len(self.target_prevalences) != 9:
            raise ConfigError("nine outcome prevalences required")
        if any(not 0.005 < p < 0.6 for p in self.target_prevalences):
            raise ConfigError("prevalences must lie in (0.005, 0.6)")
        if self.n_records < 100:
            raise ConfigError("n_records must be >= 100")
        if not (1 <= self.ts_minutes[0] <= self.ts_minutes[1]):
            raise ConfigError("ts_minutes must be an increasing positive pair")


@dataclass
class GeneratorModel:
    """Calibrated per-site generative model (shared structure + site offsets)."""

    site: str
    schema: FeatureSchema
    spec: SiteSpec
    base_seed: int
    loadings: np.ndarray  # (L, n_cont) latent factor loadings
    rho: np.ndarray  # factor share per continuous feature
    cont_base: np.ndarray
    cont_scale: np.ndarray
    mean_shift: np.ndarray  # per-feature site offsets (reference-SD units)
    scale_mult: np.ndarray
    bin_coef: np.ndarray  # (L, n_bin)
    bin_bias: np.ndarray
    bin_mean: np.ndarray  # latent-model marginal P(binary = 1)
    chan_base: np.ndarray
    chan_scale: np.ndarray
    chan_load: np.ndarray  # (L, n_channels)
    signal_idx: np.ndarray  # continuous feature indices feeding the outcomes
    weights: np.ndarray  # (9, d_signal) site coefficient vectors
    intercepts: np.ndarray = field(default=None)


SIGNAL_SCALE = 2.8
_CHANNEL_AR = 0.9


def _shared_structure(schema: FeatureSchema, base_seed: int):
    """Site-independent generative structure, keyed by the base seed only."""
    names = schema.continuous_names
    n_cont = len(names)
    n_bin = len(schema.binary)
    n_chan = len(schema.channel_names)

    rng = stream(base_seed, "generator", "structure")
    loadings = rng.normal(size=(N_LATENT, n_cont))
    loadings /= np.linalg.norm(loadings, axis=0, keepdims=True)
    rho = rng.uniform(0.35, 0.8, size=n_cont)
    cont_base = rng.uniform(-1.0, 1.0, size=n_cont) * 10.0
    cont_scale = rng.uniform(0.5, 3.0, size=n_cont)

    # clinically-flavored anchors for the named features
    idx = {name: i for i, name in enumerate(names)}
    cont_base[idx["age"]], cont_scale[idx["age"]] = 57.0, 17.0
    cont_base[idx["bmi"]], cont_scale[idx["bmi"]] = 28.0, 6.0

    bin_coef = rng.normal(size=(N_LATENT, n_bin))
    bin_coef /= np.linalg.norm(bin_coef, axis=0, keepdims=True)
    bin_bias = rng.uniform(-1.6, -0.2, size=n_bin)
    # marginal P(binary = 1) implied by the latent model, used to center the
    # outcome design matrix so an unshifted site has zero-mean logits
    u = stream(base_seed, "generator", "bin-marginal").standard_normal(200_000)
    bin_mean = np.array([float(np.mean(1.0 / (1.0 + np.exp(-(1.3 * u + b)))))
                         for b in bin_bias])

    chan_base = np.array([120.0, 70.0, 85.0, 75.0, 36.6, 35.0, 97.0, 18.0,
                          14.0, 1.0][:n_chan])
    chan_scale = np.array([18.0, 10.0, 12.0, 12.0, 0.5, 4.0, 2.0, 4.0,
                           3.0, 0.3][:n_chan])
    chan_load = rng.normal(size=(N_LATENT, n_chan))
    chan_load /= np.linalg.norm(chan_load, axis=0, keepdims=True)

    signal_idx = np.array([i for i, name in enumerate(names)
                           if not any(name.startswith(a) for a in LAB_ANALYTES)])

    weights = np.zeros((9, len(signal_idx) + n_bin))
    d = weights.shape[1]
    for k in range(9):
        w_rng = stream(base_seed, "generator", "weights", k)
        support = w_rng.choice(d, size=min(12, d), replace=False)
        values = w_rng.normal(size=support.size)
        weights[k, support] = values
        weights[k] *= SIGNAL_SCALE / np.linalg.norm(weights[k])
    return dict(loadings=loadings, rho=rho, cont_base=cont_base,
                cont_scale=cont_scale, bin_coef=bin_coef, bin_bias=bin_bias,
                bin_mean=bin_mean, chan_base=chan_base, chan_scale=chan_scale,
                chan_load=chan_load, signal_idx=signal_idx, weights=weights)


def _site_offsets(spec: SiteSpec, schema, base_seed):
    n_cont = len(schema.continuous_names)
    rng = stream(base_seed, "generator", "site-shift", spec.name)
    mean_shift = rng.uniform(-1.0, 1.0, size=n_cont) * spec.shift_mean
    scale_mult = np.exp(rng.uniform(-1.0, 1.0, size=n_cont) * spec.shift_scale)
    return mean_shift, scale_mult


def _site_weights(shared_weights, spec: SiteSpec, base_seed):
    if spec.concept_shift == 0.0:
        return shared_weights.copy()
    out = np.empty_like(shared_weights)
    for k in range(shared_weights.shape[0]):
        rng = stream(base_seed, "generator", "concept", spec.name, k)
        delta = rng.normal(size=shared_weights.shape[1])
        delta *= np.linalg.norm(shared_weights[k]) / np.linalg.norm(delta)
        mixed = shared_weights[k] + spec.concept_shift * delta
        out[k] = mixed * np.linalg.norm(shared_weights[k]) / np.linalg.norm(mixed)
    return out


def build_generator(spec: SiteSpec, schema: FeatureSchema, base_seed: int = 0):
    """Assemble the (not yet calibrated) generator model for one site."""
    shared = _shared_structure(schema, base_seed)
    mean_shift, scale_mult = _site_offsets(spec, schema, base_seed)
    return GeneratorModel(
        site=spec.name, schema=schema, spec=spec, base_seed=base_seed,
        mean_shift=mean_shift, scale_mult=scale_mult,
        weights=_site_weights(shared["weights"], spec, base_seed),
        **{k: shared[k] for k in ("loadings", "rho", "cont_base", "cont_scale",
                                  "bin_coef", "bin_bias", "bin_mean",
                                  "chan_base", "chan_scale", "chan_load",
                                  "signal_idx")},
    )


def _draw_factors_and_features(model: GeneratorModel, n, purpose):
    """True (pre-missingness) non-lab features for n records."""
    spec, schema = model.spec, model.schema
    z = stream(spec.seed, purpose, "latent", model.site).standard_normal((n, N_LATENT))
    eps = stream(spec.seed, purpose, "noise", model.site).standard_normal(
        (n, len(schema.continuous_names)))

    factor_part = z @ model.loadings
    std_units = model.rho * factor_part + np.sqrt(1.0 - model.rho ** 2) * eps
    x_cont = (model.cont_base + model.mean_shift * model.cont_scale
              + model.cont_scale * model.scale_mult * std_units)

    demo = stream(spec.seed, purpose, "subgroup", model.site)
    sex_female = demo.uniform(size=n) < spec.p_female
    race_aa = demo.uniform(size=n) < spec.p_african_american
    age = np.clip(spec.age_mean + spec.age_sd * (0.4 * z[:, 0]
                                                 + 0.917 * demo.standard_normal(n)),
                  18.0, 95.0)

    names = schema.continuous_names
    x_cont[:, names.index("age")] = age

    bin_logits = 1.3 * (z @ model.bin_coef) + model.bin_bias
    bin_u = stream(spec.seed, purpose, "binary", model.site).uniform(
        size=bin_logits.shape)
    x_bin = (bin_u < 1.0 / (1.0 + np.exp(-bin_logits))).astype(float)
    x_bin[:, list(schema.binary).index("sex_female")] = sex_female
    x_bin[:, list(schema.binary).index("race_african_american")] = race_aa
    return dict(z=z, x_cont=x_cont, x_bin=x_bin, age=age,
                sex_female=sex_female, race_aa=race_aa)


def _signal_matrix(model: GeneratorModel, truth):
    """Outcome model design matrix: reference-standardized non-lab features
    plus centered binaries (zero-mean at an unshifted site)."""
    idx = model.signal_idx
    ref_center = model.cont_base[idx]
    ref_scale = model.cont_scale[idx]
    g_cont = (truth["x_cont"][:, idx] - ref_center) / ref_scale

    schema = model.schema
    centers = model.bin_mean.copy()
    centers[list(schema.binary).index("sex_female")] = model.spec.p_female
    centers[list(schema.binary).index("race_african_american")] = \
        model.spec.p_african_american
    return np.concatenate([g_cont, truth["x_bin"] - centers], axis=1)


def calibrate_intercepts(spec: SiteSpec, schema: FeatureSchema,
                         base_seed: int = 0) -> GeneratorModel:
    """Bisect each outcome intercept until the Monte-Carlo prevalence over
    50,000 draws is within +/-0.5% absolute of the target."""
    model = build_generator(spec, schema, base_seed)
    truth = _draw_factors_and_features(model, CALIBRATION_DRAWS, "calibration")
    g = _signal_matrix(model, truth)

    intercepts = np.zeros(9)
    for k, target in enumerate(spec.target_prevalences):
        raw = g @ model.weights[k]

        def prevalence(b):
            return float(np.mean(1.0 / (1.0 + np.exp(-(raw + b)))))

        lo, hi = -30.0, 30.0
        value = None
        for _ in range(MAX_BISECTION_STEPS):
            mid = 0.5 * (lo + hi)
            value = prevalence(mid)
            if abs(value - target) <= BISECTION_TOL:
                intercepts[k] = mid
                break
            if value < target:
                lo = mid
            else:
                hi = mid
        else:
            if value is None or abs(value - target) > CALIBRATION_TOL:
                raise CalibrationError(
                    f"intercept for outcome {k} did not reach {target} "
                    f"(last prevalence {value})")
            intercepts[k] = mid
    model.intercepts = intercepts
    return model


def _categorical_tokens(model, n, purpose):
    spec, schema = model.spec, model.schema
    out = {}
    for name, vocab in schema.high_cardinality:
        real = np.array(vocab[1:])
        ranks = stream(model.base_seed, "generator", "popularity",
                       model.site, name).permutation(real.size)
        weights = 1.0 / (1.0 + ranks) ** 1.1
        weights /= weights.sum()
        draws = stream(spec.seed, purpose, "categorical", model.site,
                       name).choice(real.size, size=n, p=weights)
        out[name] = real[draws]
    return out


def _lab_observations(model, truth, n, purpose):
    """Raw pre-surgery lab series per record/analyte, summarized through
    lab_summary into the schema's derived feature columns."""
    spec = model.spec
    values = {}
    for a, analyte in enumerate(LAB_ANALYTES):
        rng = stream(spec.seed, purpose, "labs", model.site, analyte)
        level = truth["z"] @ model.chan_load[:, a % model.chan_load.shape[1]]
        base, scale = (1.1, 0.4) if analyte == "creatinine" else (12.5, 1.8)
        counts = {"7d": rng.poisson(0.9, size=n), "365d": rng.poisson(2.4, size=n)}
        max_c = {w: int(c.max()) if c.size else 0 for w, c in counts.items()}
        draws = {w: rng.normal(size=(n, max(1, max_c[w]))) for w in LAB_WINDOWS}
        day_draws = {w: rng.integers(-abs(LAB_WINDOWS[w][0]), LAB_WINDOWS[w][1] + 1,
                                     size=(n, max(1, max_c[w])))
                     for w in LAB_WINDOWS}
        values[analyte] = (level, base, scale, counts, draws, day_draws)
    features = {}
    for analyte in LAB_ANALYTES:
        level, base, scale, counts, draws, day_draws = values[analyte]
        for window in LAB_WINDOWS:
            stats_rows = {stat: np.full(n, np.nan) for stat in LAB_STATS}
            count_row = counts[window]
            for i in range(n):
                c = int(count_row[i])
                obs = [(int(day_draws[window][i, j]),
                        float(base + scale * (0.8 * level[i]
                                              + 0.6 * draws[window][i, j])))
                       for j in range(c)]
                # de-duplicate days to keep offsets well-defined
                seen = {}
                for day, value in obs:
                    seen.setdefault(day, value)
                summary = lab_summary(sorted(seen.items()), LAB_WINDOWS[window])
                stats_rows["count"][i] = summary[0]
                for stat, value in zip(LAB_STATS[1:], summary[1:]):
                    stats_rows[stat][i] = np.nan if value is None else value
            for stat in LAB_STATS:
                features[f"{analyte}_{window}_{stat}"] = stats_rows[stat]
    return features


def _series_paths(model, truth, durations, purpose):
    """AR(1)-with-drift channel paths, vectorized over records."""
    spec = model.spec
    n = durations.size
    n_chan = model.chan_base.size
    t_max = int(durations.max())
    level = truth["z"] @ model.chan_load  # (n, C)
    mu = model.chan_base + 0.6 * model.chan_scale * level
    drift = 0.4 * model.chan_scale * (truth["z"][:, :1] @ np.ones((1, n_chan)))
    noise = stream(spec.seed, purpose, "series", model.site).standard_normal(
        (t_max, n, n_chan))
    sigma = 0.18 * model.chan_scale

    paths = np.empty((t_max, n, n_chan))
    state = mu + sigma * noise[0]
    paths[0] = state
    for t in range(1, t_max):
        target = mu + drift * (t / t_max)
        state = target + _CHANNEL_AR * (state - target) + sigma * noise[t]
        paths[t] = state
    return paths


def generate_site(spec: SiteSpec, schema: FeatureSchema,
                  base_seed: int = 0, model: GeneratorModel = None) -> Cohort:
    """Draw one site's cohort from its calibrated generator."""
    if model is None:
        model = calibrate_intercepts(spec, schema, base_seed)
    if model.intercepts is None:
        raise CalibrationError("generator model is not calibrated")
    n = spec.n_records
    purpose = "cohort"
    truth = _draw_factors_and_features(model, n, purpose)
    g = _signal_matrix(model, truth)
    probs = 1.0 / (1.0 + np.exp(-(g @ model.weights.T + model.intercepts)))
    label_u = stream(spec.seed, purpose, "labels", model.site).uniform(size=(n, 9))
    labels = (label_u < probs).astype(int)

    lab_features = _lab_observations(model, truth, n, purpose)
    for name, column in lab_features.items():
        truth["x_cont"][:, schema.continuous_names.index(name)] = column

    tokens = _categorical_tokens(model, n, purpose)

    durations = stream(spec.seed, purpose, "durations", model.site).integers(
        spec.ts_minutes[0], spec.ts_minutes[1] + 1, size=n)
    paths = _series_paths(model, truth, durations, purpose)

    miss = stream(spec.seed, purpose, "missingness", model.site)
    cont_missing = miss.uniform(size=(n, len(schema.continuous_names))) < \
        spec.missing_continuous
    bin_missing = miss.uniform(size=(n, len(schema.binary))) < spec.missing_binary
    cat_missing = miss.uniform(size=(n, len(schema.categorical_names))) < \
        spec.missing_categorical
    chan_missing = miss.uniform(size=(n, model.chan_base.size)) < \
        spec.missing_channel
    keep_minute = miss.uniform(size=(int(durations.max()), n,
                                     model.chan_base.size)) < spec.obs_density

    gaps = stream(spec.seed, purpose, "times", model.site).integers(
        5, 120, size=n)
    times = np.cumsum(gaps)

    cont_names = schema.continuous_names
    bin_names = list(schema.binary)
    cat_names = schema.categorical_names
    chan_names = schema.channel_names
    count_cols = {cont_names.index(f"{a}_{w}_count")
                  for a in LAB_ANALYTES for w in LAB_WINDOWS}

    records = []
    for i in range(n):
        continuous = {}
        for j, name in enumerate(cont_names):
            value = truth["x_cont"][i, j]
            if np.isnan(value):
                continue  # lab stats with zero observations
            if j in count_cols or not cont_missing[i, j]:
                continuous[name] = float(value)
        binary = {name: bool(truth["x_bin"][i, j])
                  for j, name in enumerate(bin_names) if not bin_missing[i, j]}
        # subgroup attributes stay observed as features
        binary["sex_female"] = bool(truth["sex_female"][i])
        binary["race_african_american"] = bool(truth["race_aa"][i])
        categorical = {name: str(tokens[name][i])
                       for j, name in enumerate(cat_names) if not cat_missing[i, j]}

        duration = int(durations[i])
        series = {}
        for c, channel in enumerate(chan_names):
            if chan_missing[i, c]:
                continue
            kept = np.flatnonzero(keep_minute[:duration, i, c])
            if kept.size == 0:
                kept = np.array([0])
            series[channel] = [(int(t), float(paths[t, i, c])) for t in kept]

        records.append(Record(
            record_id=f"{spec.name}-{i:06d}",
            surgery_time=int(times[i]),
            continuous_vals=continuous,
            binary_vals=binary,
            categorical_vals=categorical,
            timeseries=series,
            labels=tuple(int(v) for v in labels[i]),
            sex="F" if truth["sex_female"][i] else "M",
            race="AA" if truth["race_aa"][i] else "non-AA",
            age_years=float(truth["age"][i]),
            duration_minutes=duration,
        ))
    return Cohort(site=spec.name, schema=schema, records=records)


def true_signal(spec: SiteSpec, schema: FeatureSchema, base_seed: int = 0):
    """The generator's own design matrix and labels (for oracle checks)."""
    model = calibrate_intercepts(spec, schema, base_seed)
    truth = _draw_factors_and_features(model, spec.n_records, "cohort")
    g = _signal_matrix(model, truth)
    probs = 1.0 / (1.0 + np.exp(-(g @ model.weights.T + model.intercepts)))
    label_u = stream(spec.seed, "cohort", "labels", model.site).uniform(
        size=(spec.n_records, 9))
    return g, (label_u < probs).astype(int)
