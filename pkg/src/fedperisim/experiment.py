"""Config-driven end-to-end experiment pipeline.

Five content-addressed stages (generate -> preprocess -> train -> evaluate
-> report) persist every intermediate artifact under the output directory.
Each stage writes a manifest carrying the hash of the config subtree it
depends on; rerunning with an identical config and seed reuses cached
outputs, a missing upstream stage is a stage-order error and a hash
mismatch is a stale-cache error.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import federation as fed
from . import metrics as mt
from . import model as rm
from . import preprocess as pp
from . import synth
from .cohort import Cohort, OUTCOME_NAMES, load_cohort, pool_cohorts, save_cohort
from .errors import ConfigError, StageOrderError, StaleCacheError
from .rng import derive_seed, stream

POOLED = "pooled"


@dataclass
class EvalSettings:
    bootstrap_b: int = 1000
    alpha: float = 0.05
    subgroups: bool = True
    downsample: bool = False
    downsample_repeats: int = 10


@dataclass
class ExperimentConfig:
    seed: int = 7
    outdir: str = "runs/default"
    variant: str = rm.PREOPERATIVE
    schema_spec: dict = field(default_factory=dict)
    sites: list = field(default_factory=list)  # of SiteSpec
    model_spec: dict = field(default_factory=dict)
    plan_spec: dict = field(default_factory=dict)
    paradigms: list = field(default_factory=lambda: ["local", "central", "scaffold"])
    evaluation: EvalSettings = field(default_factory=EvalSettings)

    def __post_init__(self):
        if self.variant not in (rm.PREOPERATIVE, rm.POSTOPERATIVE):
            raise ConfigError(f"unknown variant {self.variant!r}")
        for paradigm in self.paradigms:
            if paradigm not in fed.PARADIGMS:
                raise ConfigError(f"unknown paradigm {paradigm!r}")
        if len(self.sites) < 1:
            raise ConfigError("at least one site spec is required")

    def schema(self):
        return synth.default_schema(**self.schema_spec)

    def model_config(self):
        schema = self.schema()
        return rm.ModelConfig(
            variant=self.variant,
            n_continuous=len(schema.continuous_names),
            n_binary=len(schema.binary),
            cat_vocab_sizes=tuple(len(v) for _n, v in schema.high_cardinality),
            n_channels=len(schema.channel_names),
            **self.model_spec,
        )

    def plan(self, paradigm):
        spec = dict(self.plan_spec)
        mu = spec.pop("mu", 0.01)
        if paradigm == fed.FEDPROX:
            spec["mu"] = mu
        return fed.TrainPlan(paradigm=paradigm, seed=self.seed, **spec)

    # config subtrees that each stage's outputs depend on
    def generate_subtree(self):
        return {"seed": self.seed, "schema": self.schema_spec,
                "sites": [asdict(s) for s in self.sites]}

    def preprocess_subtree(self):
        return {"generate": self.generate_subtree(), "variant": self.variant}

    def train_subtree(self, paradigm):
        return {"preprocess": self.preprocess_subtree(),
                "model": self.model_spec, "plan": self.plan_spec,
                "paradigm": paradigm}

    def evaluate_subtree(self, paradigm):
        return {"train": self.train_subtree(paradigm),
                "evaluation": asdict(self.evaluation)}

    def report_subtree(self):
        return {"evaluate": {p: self.evaluate_subtree(p) for p in self.paradigms}}


DEFAULT_SITES = [
    dict(name="gnv", n_records=20_000, target_prevalences=synth.GNV_PREVALENCES,
         p_african_american=0.15, age_mean=57.0),
    dict(name="jax", n_records=8_000, target_prevalences=synth.JAX_PREVALENCES,
         shift_mean=0.8, shift_scale=0.25, concept_shift=0.7,
         p_african_american=0.35, age_mean=52.0),
]


def default_config(outdir="runs/default", seed=7, **overrides) -> ExperimentConfig:
    """Two Table-1-flavored heterogeneous sites at desk scale.

    The default plan runs 50 rounds: at the default learning rate the
    paradigm comparison needs the extra rounds for every model (local ones
    included) to reach its ceiling.
    """
    sites = [synth.SiteSpec(seed=seed, **spec) for spec in DEFAULT_SITES]
    overrides.setdefault("plan_spec", {"rounds": 50})
    return ExperimentConfig(seed=seed, outdir=outdir, sites=sites, **overrides)


def _site_spec_from_dict(obj, seed):
    obj = dict(obj)
    obj.setdefault("seed", seed)
    if "target_prevalences" in obj:
        obj["target_prevalences"] = tuple(obj["target_prevalences"])
    if "ts_minutes" in obj:
        obj["ts_minutes"] = tuple(obj["ts_minutes"])
    return synth.SiteSpec(**obj)


def load_config(path) -> ExperimentConfig:
    """Read a TOML (or JSON) experiment config."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        if path.suffix == ".json":
            obj = json.loads(path.read_text())
        else:
            try:
                import tomllib
            except ImportError:
                import tomli as tomllib
            obj = tomllib.loads(path.read_text())
    except Exception as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from exc
    return config_from_dict(obj)


def config_from_dict(obj) -> ExperimentConfig:
    try:
        seed = int(obj.get("seed", 7))
        model_spec = dict(obj.get("model", {}))
        for key in ("continuous_hidden", "binary_hidden", "categorical_hidden"):
            if key in model_spec:
                model_spec[key] = tuple(model_spec[key])
        site_dicts = obj.get("sites", DEFAULT_SITES)
        evaluation = EvalSettings(**obj.get("evaluate", {}))
        train = dict(obj.get("train", {}))
        paradigms = train.pop("paradigms", ["local", "central", "scaffold"])
        return ExperimentConfig(
            seed=seed,
            outdir=obj.get("outdir", "runs/default"),
            variant=obj.get("variant", rm.PREOPERATIVE),
            schema_spec=dict(obj.get("schema", {})),
            sites=[_site_spec_from_dict(s, seed) for s in site_dicts],
            model_spec=model_spec,
            plan_spec=train,
            paradigms=list(paradigms),
            evaluation=evaluation,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid experiment config: {exc}") from exc


def config_hash(subtree) -> str:
    return hashlib.sha256(
        json.dumps(subtree, sort_keys=True).encode()).hexdigest()


def _write_manifest(directory, stage, subtree, seed, wall_time_s):
    manifest = {
        "stage": stage,
        "config_hash": config_hash(subtree),
        "seed": seed,
        "versions": {"fedperisim": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "wall_time_s": wall_time_s,
    }
    with open(Path(directory) / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _check_cached(directory, subtree):
    """True if the stage directory holds outputs for exactly this subtree."""
    path = Path(directory) / "manifest.json"
    if not path.exists():
        return False
    with open(path) as fh:
        manifest = json.load(fh)
    return manifest.get("config_hash") == config_hash(subtree)


def _require_upstream(directory, subtree, stage_name):
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise StageOrderError(
            f"missing upstream artifacts in {directory}; run '{stage_name}' first")
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("config_hash") != config_hash(subtree):
        raise StaleCacheError(
            f"artifacts in {directory} were built under a different config; "
            f"rerun '{stage_name}'")


def stage_generate(cfg: ExperimentConfig):
    out = Path(cfg.outdir) / "generate"
    subtree = cfg.generate_subtree()
    if _check_cached(out, subtree):
        return out
    t0 = time.monotonic()
    schema = cfg.schema()
    out.mkdir(parents=True, exist_ok=True)
    for spec in cfg.sites:
        cohort = synth.generate_site(spec, schema, base_seed=cfg.seed)
        save_cohort(cohort, out / spec.name)
    _write_manifest(out, "generate", subtree, cfg.seed, time.monotonic() - t0)
    return out


def _load_site_cohorts(cfg):
    gen_dir = Path(cfg.outdir) / "generate"
    _require_upstream(gen_dir, cfg.generate_subtree(), "generate")
    return {spec.name: load_cohort(gen_dir / spec.name) for spec in cfg.sites}


def stage_preprocess(cfg: ExperimentConfig):
    """Fit per-site and pooled transforms, persist every transformed split.

    Layout: preprocess/transforms/<fit>.json and
    preprocess/data/<fit>/<split>-<site>/ with fit in {site..., pooled}.
    Per-site fits also transform the other sites' test splits so local
    models can be evaluated across sites.
    """
    out = Path(cfg.outdir) / "preprocess"
    subtree = cfg.preprocess_subtree()
    if _check_cached(out, subtree):
        return out
    t0 = time.monotonic()
    cohorts = _load_site_cohorts(cfg)
    schema = cfg.schema()
    with_series = cfg.variant == rm.POSTOPERATIVE

    splits = {name: pp.chronological_split(cohort)
              for name, cohort in cohorts.items()}
    (out / "transforms").mkdir(parents=True, exist_ok=True)

    preprocessors = {}
    for name in cohorts:
        train, _val, _test = splits[name]
        pre = pp.CohortPreprocessor(schema, seed=cfg.seed).fit(train)
        pre.fitted_.save(out / "transforms" / f"{name}.json")
        preprocessors[name] = pre

    pooled_train = pool_cohorts([splits[s.name][0] for s in cfg.sites])
    pooled_pre = pp.CohortPreprocessor(schema, seed=cfg.seed).fit(pooled_train)
    pooled_pre.fitted_.save(out / "transforms" / f"{POOLED}.json")

    for fit_name, pre in preprocessors.items():
        base = out / "data" / fit_name
        train, val, test = splits[fit_name]
        pp.save_transformed(pre.transform(train, with_series), base / f"train-{fit_name}")
        pp.save_transformed(pre.transform(val, with_series), base / f"val-{fit_name}")
        pp.save_transformed(pre.transform(test, with_series), base / f"test-{fit_name}")
        for other in cohorts:
            if other != fit_name:
                pp.save_transformed(pre.transform(splits[other][2], with_series),
                                    base / f"test-{other}")

    base = out / "data" / POOLED
    pooled_val = pool_cohorts([splits[s.name][1] for s in cfg.sites])
    pp.save_transformed(pooled_pre.transform(pooled_train, with_series),
                        base / f"train-{POOLED}")
    pp.save_transformed(pooled_pre.transform(pooled_val, with_series),
                        base / f"val-{POOLED}")
    for name in cohorts:
        pp.save_transformed(pooled_pre.transform(splits[name][2], with_series),
                            base / f"test-{name}")

    _write_manifest(out, "preprocess", subtree, cfg.seed, time.monotonic() - t0)
    return out


def _load_transformed(cfg, fit_name, split_site):
    base = Path(cfg.outdir) / "preprocess" / "data" / fit_name
    return pp.load_transformed(base / split_site)


def _site_data_for(cfg, paradigm):
    names = [s.name for s in cfg.sites]
    if paradigm == fed.CENTRAL:
        return [fed.SiteData(
            site_id=POOLED,
            train=_load_transformed(cfg, POOLED, f"train-{POOLED}"),
            val=_load_transformed(cfg, POOLED, f"val-{POOLED}"))]
    return [fed.SiteData(
        site_id=name,
        train=_load_transformed(cfg, name, f"train-{name}"),
        val=_load_transformed(cfg, name, f"val-{name}"))
        for name in names]


def stage_train(cfg: ExperimentConfig, paradigm):
    if paradigm not in fed.PARADIGMS:
        raise ConfigError(f"unknown paradigm {paradigm!r}")
    out = Path(cfg.outdir) / "train" / paradigm
    subtree = cfg.train_subtree(paradigm)
    if _check_cached(out, subtree):
        return out
    _require_upstream(Path(cfg.outdir) / "preprocess", cfg.preprocess_subtree(),
                      "preprocess")
    t0 = time.monotonic()
    config = cfg.model_config()
    plan = cfg.plan(paradigm)
    # central loads the pooled-transform splits as a single data holder
    sites = _site_data_for(cfg, paradigm)
    artifacts = fed.run_paradigm(plan, sites, config, outcomes=OUTCOME_NAMES)

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "rounds.jsonl", "w") as fh:
        for entry in artifacts.rounds:
            fh.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")
    for key, flat in artifacts.params.items():
        name = "model.ckpt" if key == "global" else f"model-{key}.ckpt"
        rm.ModelParams.unflatten(config, flat).save(out / name)
    with open(out / "selection.json", "w") as fh:
        json.dump({"best_round": artifacts.best_round}, fh, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, f"train/{paradigm}", subtree, cfg.seed,
                    time.monotonic() - t0)
    return out


def score_transformed(params: rm.ModelParams, tc, batch_size=512) -> np.ndarray:
    with_series = params.config.variant == rm.POSTOPERATIVE
    chunks = [rm.predict_proba(
        params, tc.make_batch(np.arange(s, min(s + batch_size, len(tc))),
                              with_series))
        for s in range(0, len(tc), batch_size)]
    return np.concatenate(chunks, axis=0)


def scored_set_for(params, tc) -> mt.ScoredSet:
    return mt.ScoredSet(scores=score_transformed(params, tc), labels=tc.labels,
                        outcomes=OUTCOME_NAMES, sex=tc.sex, race=tc.race,
                        age=tc.age, site=tc.site)


def _model_test_pairs(cfg, paradigm):
    """(model key, checkpoint name, fit used for test data) per evaluation."""
    names = [s.name for s in cfg.sites]
    if paradigm == fed.LOCAL:
        return [(name, f"model-{name}.ckpt", name) for name in names]
    if paradigm == fed.CENTRAL:
        return [("global", "model.ckpt", POOLED)]
    return [("global", "model.ckpt", None)]  # per-site transform


def stage_evaluate(cfg: ExperimentConfig, paradigm):
    out = Path(cfg.outdir) / "evaluate" / paradigm
    subtree = cfg.evaluate_subtree(paradigm)
    if _check_cached(out, subtree):
        return out
    train_dir = Path(cfg.outdir) / "train" / paradigm
    _require_upstream(train_dir, cfg.train_subtree(paradigm), f"train {paradigm}")
    t0 = time.monotonic()
    out.mkdir(parents=True, exist_ok=True)
    settings = cfg.evaluation
    names = [s.name for s in cfg.sites]

    for model_key, ckpt, fit in _model_test_pairs(cfg, paradigm):
        params = rm.ModelParams.load(train_dir / ckpt)
        for site in names:
            fit_name = fit if fit is not None else site
            tc = _load_transformed(cfg, fit_name, f"test-{site}")
            scored = scored_set_for(params, tc)
            np.save(out / f"scores-{model_key}-on-{site}.npy", scored.scores)
            report = mt.bootstrap_report(scored, b=settings.bootstrap_b,
                                         alpha=settings.alpha,
                                         seed=(cfg.seed, paradigm, model_key, site))
            report.save_csv(out / f"metrics-{model_key}-on-{site}.csv")
            report.save_json(out / f"metrics-{model_key}-on-{site}.json")

            if settings.subgroups and model_key == "global":
                subgroup_out = {}
                for partition in mt.SUBGROUP_PARTITIONS:
                    reports, p_values = mt.subgroup_eval(
                        scored, partition, b=settings.bootstrap_b,
                        alpha=settings.alpha,
                        seed=(cfg.seed, paradigm, site, partition))
                    subgroup_out[partition] = {
                        "strata": {k: v.to_json() for k, v in reports.items()},
                        "p_values": p_values,
                        "p_values_bonferroni": {
                            k: float(min(1.0, v * len(p_values)))
                            for k, v in p_values.items()},
                    }
                with open(out / f"subgroups-on-{site}.json", "w") as fh:
                    json.dump(subgroup_out, fh, sort_keys=True, indent=1)
                    fh.write("\n")

    if settings.downsample and paradigm in fed.FEDERATED:
        table = downsample_experiment(cfg, paradigm,
                                      repeats=settings.downsample_repeats)
        with open(out / "downsample.json", "w") as fh:
            json.dump(table, fh, sort_keys=True, indent=1)
            fh.write("\n")

    _write_manifest(out, f"evaluate/{paradigm}", subtree, cfg.seed,
                    time.monotonic() - t0)
    return out


def downsample_experiment(cfg: ExperimentConfig, paradigm, repeats=10):
    """Equalize training sizes by subsampling the larger site, rerun the
    federated paradigm per repeat, and report mean (SD) test AUROC.

    Per-repeat trainings are cached under <outdir>/cache keyed by the
    config hash and repeat index.
    """
    cohorts = _load_site_cohorts(cfg)
    schema = cfg.schema()
    config = cfg.model_config()
    with_series = cfg.variant == rm.POSTOPERATIVE
    splits = {name: pp.chronological_split(cohort)
              for name, cohort in cohorts.items()}
    train_sizes = {name: len(splits[name][0]) for name in cohorts}
    target = min(train_sizes.values())
    larger = max(sorted(train_sizes), key=lambda n: train_sizes[n])

    cache_dir = Path(cfg.outdir) / "cache" / "downsample"
    cache_dir.mkdir(parents=True, exist_ok=True)
    key = config_hash({"train": cfg.train_subtree(paradigm),
                       "repeats": repeats})[:16]

    per_repeat = []
    for repeat in range(repeats):
        cache_file = cache_dir / f"{key}-r{repeat}.json"
        if cache_file.exists():
            with open(cache_file) as fh:
                per_repeat.append(json.load(fh))
            continue

        repeat_seed = derive_seed(cfg.seed, "downsample", repeat)
        sites = []
        for spec in cfg.sites:
            name = spec.name
            train, val, test = splits[name]
            if name == larger and len(train) > target:
                idx = np.sort(stream(cfg.seed, "downsample", repeat).choice(
                    len(train), size=target, replace=False))
                train = Cohort(train.site, schema,
                               [train.records[i] for i in idx])
            pre = pp.CohortPreprocessor(schema, seed=cfg.seed).fit(train)
            sites.append(fed.SiteData(
                site_id=name,
                train=pre.transform(train, with_series),
                val=pre.transform(val, with_series),
                test=pre.transform(test, with_series)))

        plan_spec = dict(cfg.plan_spec)
        mu = plan_spec.pop("mu", 0.01)
        if paradigm == fed.FEDPROX:
            plan_spec["mu"] = mu
        plan = fed.TrainPlan(paradigm=paradigm, seed=repeat_seed, **plan_spec)
        artifacts = fed.run_paradigm(plan, sites, config, outcomes=OUTCOME_NAMES)
        params = rm.ModelParams.unflatten(config, artifacts.params["global"])

        row = {}
        for site_data in sites:
            scored = scored_set_for(params, site_data.test)
            for k, outcome in enumerate(OUTCOME_NAMES):
                row[f"{site_data.site_id}/{outcome}"] = mt.auroc(
                    scored.scores[:, k], scored.labels[:, k])
        with open(cache_file, "w") as fh:
            json.dump(row, fh, sort_keys=True)
            fh.write("\n")
        per_repeat.append(row)

    summary = mt.summarize_repeats(per_repeat)
    return {key: {"mean": mean, "sd": sd} for key, (mean, sd) in summary.items()}


def _format_ci(point, ci):
    if point is None or ci is None:
        return "n/a"
    return f"{point:.2f} ({ci[0]:.2f}-{ci[1]:.2f})"


def _model_rows(cfg):
    """Report rows in Table-3 order: the local site models, central, federated."""
    rows = []
    for paradigm in cfg.paradigms:
        if paradigm == fed.LOCAL:
            rows.extend((paradigm, s.name, f"{s.name} model") for s in cfg.sites)
        elif paradigm == fed.CENTRAL:
            rows.append((paradigm, "global", "central"))
        else:
            rows.append((paradigm, "global", paradigm))
    return rows


def stage_report(cfg: ExperimentConfig):
    out = Path(cfg.outdir) / "report"
    subtree = cfg.report_subtree()
    if _check_cached(out, subtree):
        return out
    for paradigm in cfg.paradigms:
        _require_upstream(Path(cfg.outdir) / "evaluate" / paradigm,
                          cfg.evaluate_subtree(paradigm), f"evaluate {paradigm}")
    t0 = time.monotonic()
    out.mkdir(parents=True, exist_ok=True)
    names = [s.name for s in cfg.sites]
    rows = _model_rows(cfg)

    reports = {}
    for paradigm, model_key, label in rows:
        for site in names:
            path = (Path(cfg.outdir) / "evaluate" / paradigm /
                    f"metrics-{model_key}-on-{site}.json")
            with open(path) as fh:
                reports[(label, site)] = json.load(fh)

    lines = ["# Paradigm comparison", "",
             f"Test AUROC (95% CI) per outcome; seed {cfg.seed}, "
             f"variant {cfg.variant}.", ""]
    header = "| Outcome | Model | " + " | ".join(f"{n} test data" for n in names) + " |"
    rule = "|---" * (2 + len(names)) + "|"
    lines += [header, rule]
    csv_rows = []
    for outcome in OUTCOME_NAMES:
        for _paradigm, _key, label in rows:
            cells = []
            for site in names:
                entry = reports[(label, site)]["outcomes"][outcome]
                cells.append(_format_ci(entry["auroc"], entry["auroc_ci"]))
                csv_rows.append([outcome, label, site, entry["auroc"],
                                 *(entry["auroc_ci"] or (None, None))])
            lines.append(f"| {outcome} | {label} | " + " | ".join(cells) + " |")
    lines.append("")

    lines += ["## AUPRC", "", header, rule]
    for outcome in OUTCOME_NAMES:
        for _paradigm, _key, label in rows:
            cells = []
            for site in names:
                entry = reports[(label, site)]["outcomes"][outcome]
                cells.append(_format_ci(entry["auprc"], entry["auprc_ci"]))
            lines.append(f"| {outcome} | {label} | " + " | ".join(cells) + " |")
    lines.append("")

    downsample_path = None
    for paradigm in cfg.paradigms:
        candidate = Path(cfg.outdir) / "evaluate" / paradigm / "downsample.json"
        if candidate.exists():
            downsample_path = candidate
            break
    if downsample_path is not None:
        with open(downsample_path) as fh:
            table = json.load(fh)
        lines += ["## Downsampling sensitivity (equalized training sizes)", "",
                  "| Outcome | " + " | ".join(f"{n} mean (SD)" for n in names) + " |",
                  "|---" * (1 + len(names)) + "|"]
        for outcome in OUTCOME_NAMES:
            cells = [mt.format_mean_sd(table[f"{n}/{outcome}"]["mean"],
                                       table[f"{n}/{outcome}"]["sd"])
                     for n in names]
            lines.append(f"| {outcome} | " + " | ".join(cells) + " |")
        lines.append("")

    (out / "comparison.md").write_text("\n".join(lines))
    with open(out / "comparison.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["outcome", "model", "test_site", "auroc", "lo", "hi"])
        for row in csv_rows:
            writer.writerow(row)
    _write_manifest(out, "report", subtree, cfg.seed, time.monotonic() - t0)
    return out


def run_all(cfg: ExperimentConfig):
    stage_generate(cfg)
    stage_preprocess(cfg)
    for paradigm in cfg.paradigms:
        stage_train(cfg, paradigm)
    for paradigm in cfg.paradigms:
        stage_evaluate(cfg, paradigm)
    return stage_report(cfg)
