"""Cohort data model and its on-disk format.

A cohort is one site's set of surgeries: per-record preoperative feature
values (with missing entries), intraoperative time series, nine binary
outcome labels and subgroup attributes.  On disk a cohort is a tabular CSV
(header = schema names, empty cell = missing), a long-form time-series CSV
(record_id, channel, minute, value) and a JSON schema file.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, ContractError

MISSING_TOKEN = "__missing__"

OUTCOME_NAMES = (
    "prolonged_icu_stay",
    "prolonged_mechanical_ventilation",
    "neurological_complications",
    "cardiovascular_complications",
    "acute_kidney_injury",
    "venous_thromboembolism",
    "sepsis",
    "wound_complications",
    "hospital_mortality",
)

TIMESERIES_CHANNELS = (
    ("systolic_bp", "mmHg"),
    ("diastolic_bp", "mmHg"),
    ("mean_arterial_pressure", "mmHg"),
    ("heart_rate", "bpm"),
    ("temperature", "degC"),
    ("etco2", "mmHg"),
    ("spo2", "%"),
    ("peak_inspiratory_pressure", "cmH2O"),
    ("respiratory_rate", "breaths/min"),
    ("minimum_alveolar_concentration", "MAC"),
)


@dataclass(frozen=True)
class FeatureSchema:
    """Declarative description of the feature space and outcome list."""

    continuous: tuple  # of (name, unit)
    binary: tuple  # of name
    high_cardinality: tuple  # of (name, vocabulary tuple; index == embedding id)
    timeseries_channels: tuple  # of (name, unit)
    outcomes: tuple = OUTCOME_NAMES

    def __post_init__(self):
        names = (self.continuous_names + list(self.binary)
                 + self.categorical_names + self.channel_names)
        if len(names) != len(set(names)):
            raise ConfigError("feature names must be unique across all groups")
        if tuple(self.outcomes) != OUTCOME_NAMES:
            raise ConfigError(
                f"schema must declare exactly the nine canonical outcomes, got {self.outcomes}"
            )
        for name, vocab in self.high_cardinality:
            if len(vocab) < 1 or vocab[0] != MISSING_TOKEN:
                raise ConfigError(
                    f"vocabulary for {name!r} must reserve id 0 for {MISSING_TOKEN!r}"
                )
            if len(vocab) != len(set(vocab)):
                raise ConfigError(f"vocabulary for {name!r} has duplicate tokens")

    @property
    def continuous_names(self):
        return [name for name, _unit in self.continuous]

    @property
    def categorical_names(self):
        return [name for name, _vocab in self.high_cardinality]

    @property
    def channel_names(self):
        return [name for name, _unit in self.timeseries_channels]

    def vocabulary(self, feature):
        for name, vocab in self.high_cardinality:
            if name == feature:
                return vocab
        raise KeyError(feature)

    def to_json(self):
        return {
            "continuous": [[n, u] for n, u in self.continuous],
            "binary": list(self.binary),
            "high_cardinality": [[n, list(v)] for n, v in self.high_cardinality],
            "timeseries_channels": [[n, u] for n, u in self.timeseries_channels],
            "outcomes": list(self.outcomes),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            continuous=tuple((n, u) for n, u in obj["continuous"]),
            binary=tuple(obj["binary"]),
            high_cardinality=tuple((n, tuple(v)) for n, v in obj["high_cardinality"]),
            timeseries_channels=tuple((n, u) for n, u in obj["timeseries_channels"]),
            outcomes=tuple(obj["outcomes"]),
        )


@dataclass
class Record:
    """One surgery: raw feature values, time series, labels and subgroup."""

    record_id: str
    surgery_time: int  # minutes since the site epoch; sites emit monotone times
    continuous_vals: dict  # name -> float, present keys only
    binary_vals: dict  # name -> bool
    categorical_vals: dict  # name -> vocabulary token
    timeseries: dict  # channel -> list of (minute, value), minutes increasing
    labels: tuple  # nine 0/1 ints aligned with schema.outcomes
    sex: str  # 'F' | 'M'
    race: str  # 'AA' | 'non-AA'
    age_years: float
    duration_minutes: int = 1

    def __post_init__(self):
        if self.age_years < 18:
            raise ContractError(
                f"record {self.record_id}: adult cohort requires age >= 18, got {self.age_years}"
            )
        if len(self.labels) != len(OUTCOME_NAMES):
            raise ContractError(f"record {self.record_id}: expected 9 labels")
        for channel, obs in self.timeseries.items():
            minutes = [m for m, _v in obs]
            if any(b <= a for a, b in zip(minutes, minutes[1:])):
                raise ContractError(
                    f"record {self.record_id}: minutes not strictly increasing in {channel}"
                )


@dataclass
class Cohort:
    site: str
    schema: FeatureSchema
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)


def pool_cohorts(cohorts, site="pooled"):
    """Union of cohorts keyed by record id (first occurrence wins)."""
    if not cohorts:
        raise ContractError("cannot pool zero cohorts")
    schema = cohorts[0].schema
    merged = {}
    for cohort in cohorts:
        if cohort.schema != schema:
            raise ContractError("pooled cohorts must share a schema")
        for record in cohort.records:
            merged.setdefault(record.record_id, record)
    return Cohort(site=site, schema=schema, records=list(merged.values()))


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def save_cohort(cohort: Cohort, directory):
    """Write tabular.csv, timeseries.csv and schema.json under a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    schema = cohort.schema

    header = (["record_id", "surgery_time", "sex", "race", "age_years",
               "duration_minutes"]
              + schema.continuous_names + list(schema.binary)
              + schema.categorical_names + list(schema.outcomes))
    with open(directory / "tabular.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in cohort.records:
            row = [r.record_id, r.surgery_time, r.sex, r.race, _fmt(r.age_years),
                   r.duration_minutes]
            for name in schema.continuous_names:
                v = r.continuous_vals.get(name)
                row.append("" if v is None else _fmt(float(v)))
            for name in schema.binary:
                v = r.binary_vals.get(name)
                row.append("" if v is None else str(int(v)))
            for name in schema.categorical_names:
                v = r.categorical_vals.get(name)
                row.append("" if v is None else str(v))
            row.extend(str(int(v)) for v in r.labels)
            writer.writerow(row)

    with open(directory / "timeseries.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["record_id", "channel", "minute", "value"])
        for r in cohort.records:
            for channel in schema.channel_names:
                for minute, value in r.timeseries.get(channel, []):
                    writer.writerow([r.record_id, channel, minute, _fmt(float(value))])

    meta = {"site": cohort.site, "schema": schema.to_json()}
    with open(directory / "schema.json", "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_cohort(directory) -> Cohort:
    directory = Path(directory)
    with open(directory / "schema.json") as fh:
        meta = json.load(fh)
    schema = FeatureSchema.from_json(meta["schema"])

    series = {}
    with open(directory / "timeseries.csv", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for record_id, channel, minute, value in reader:
            series.setdefault(record_id, {}).setdefault(channel, []).append(
                (int(minute), float(value))
            )

    records = []
    with open(directory / "tabular.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        index = {name: i for i, name in enumerate(header)}
        for row in reader:
            record_id = row[index["record_id"]]
            continuous = {}
            for name in schema.continuous_names:
                cell = row[index[name]]
                if cell != "":
                    continuous[name] = float(cell)
            binary = {}
            for name in schema.binary:
                cell = row[index[name]]
                if cell != "":
                    binary[name] = bool(int(cell))
            categorical = {}
            for name in schema.categorical_names:
                cell = row[index[name]]
                if cell != "":
                    categorical[name] = cell
            labels = tuple(int(row[index[name]]) for name in schema.outcomes)
            records.append(Record(
                record_id=record_id,
                surgery_time=int(row[index["surgery_time"]]),
                continuous_vals=continuous,
                binary_vals=binary,
                categorical_vals=categorical,
                timeseries=series.get(record_id, {}),
                labels=labels,
                sex=row[index["sex"]],
                race=row[index["race"]],
                age_years=float(row[index["age_years"]]),
                duration_minutes=int(row[index["duration_minutes"]]),
            ))
    return Cohort(site=meta["site"], schema=schema, records=records)
