"""Record types, CSV ingestion and the seeded synthetic cohort generator."""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Optional

import numpy as np

PRNG_ID = "numpy.random.PCG64"

OBSERVATION_HEADER = ["stay_id", "channel", "offset_minutes", "value"]
COHORT_HEADER = ["stay_id", "patient_id", "age_years", "los_hours", "death_time_hours"]


class VitalChannel(enum.IntEnum):
    HEART_RATE = 0
    SYSTOLIC_BP = 1
    DIASTOLIC_BP = 2
    MEAN_BP = 3
    RESPIRATORY_RATE = 4
    OXYGEN_SATURATION = 5
    GLASGOW_COMA_SCORE = 6
    BLOOD_UREA_NITROGEN = 7
    TEMPERATURE = 8
    WHITE_BLOOD_CELLS = 9
    BILIRUBIN = 10

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, name: str) -> "VitalChannel":
        if name != name.lower() or name.upper() not in cls.__members__:
            raise ValueError(f"unknown channel {name!r}")
        return cls[name.upper()]


N_CHANNELS = len(VitalChannel)
CHANNEL_NAMES = [c.label for c in VitalChannel]


class ChannelProfile(NamedTuple):
    baseline: float
    sd: float
    direction: int  # sign of the drift for deteriorating patients
    low: float  # plausible physical range
    high: float
    unit: str


# Baselines, spread and plausible ranges used by the generator and by score
# input validation.
CHANNEL_PROFILES = {
    VitalChannel.HEART_RATE: ChannelProfile(80.0, 10.0, +1, 0.0, 300.0, "beats/min"),
    VitalChannel.SYSTOLIC_BP: ChannelProfile(120.0, 12.0, -1, 0.0, 300.0, "mmHg"),
    VitalChannel.DIASTOLIC_BP: ChannelProfile(70.0, 8.0, -1, 0.0, 200.0, "mmHg"),
    VitalChannel.MEAN_BP: ChannelProfile(85.0, 9.0, -1, 0.0, 250.0, "mmHg"),
    VitalChannel.RESPIRATORY_RATE: ChannelProfile(16.0, 3.0, +1, 0.0, 80.0, "breaths/min"),
    VitalChannel.OXYGEN_SATURATION: ChannelProfile(97.0, 1.5, -1, 0.0, 100.0, "%"),
    VitalChannel.GLASGOW_COMA_SCORE: ChannelProfile(14.0, 1.0, -1, 3.0, 15.0, "points"),
    VitalChannel.BLOOD_UREA_NITROGEN: ChannelProfile(18.0, 6.0, +1, 0.0, 300.0, "mg/dL"),
    VitalChannel.TEMPERATURE: ChannelProfile(37.0, 0.4, +1, 25.0, 45.0, "degC"),
    VitalChannel.WHITE_BLOOD_CELLS: ChannelProfile(9.0, 2.5, +1, 0.0, 500.0, "10^3/uL"),
    VitalChannel.BILIRUBIN: ChannelProfile(0.8, 0.3, +1, 0.0, 80.0, "mg/dL"),
}

# Generator clips draws to these (tighter than the validation ranges above).
_GENERATOR_CLIP = {
    VitalChannel.HEART_RATE: (20.0, 250.0),
    VitalChannel.SYSTOLIC_BP: (40.0, 250.0),
    VitalChannel.DIASTOLIC_BP: (20.0, 150.0),
    VitalChannel.MEAN_BP: (30.0, 180.0),
    VitalChannel.RESPIRATORY_RATE: (4.0, 60.0),
    VitalChannel.OXYGEN_SATURATION: (50.0, 100.0),
    VitalChannel.GLASGOW_COMA_SCORE: (3.0, 15.0),
    VitalChannel.BLOOD_UREA_NITROGEN: (2.0, 200.0),
    VitalChannel.TEMPERATURE: (30.0, 43.0),
    VitalChannel.WHITE_BLOOD_CELLS: (0.1, 100.0),
    VitalChannel.BILIRUBIN: (0.1, 50.0),
}


class RawObservation(NamedTuple):
    stay_id: str
    channel: VitalChannel
    offset_minutes: int
    value: float


@dataclass(frozen=True)
class CohortEntry:
    stay_id: str
    patient_id: str
    age_years: float
    los_hours: float
    death_time_hours: Optional[float] = None

    @property
    def died(self) -> bool:
        return self.death_time_hours is not None


@dataclass(frozen=True)
class SyntheticConfig:
    n_stays: int = 2000
    mortality_rate: float = 0.2
    frame_signal_strength: float = 3.0
    missing_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.n_stays, (int, np.integer)) or self.n_stays <= 0:
            raise ValueError("n_stays must be a positive integer")
        if not 0.0 <= self.mortality_rate <= 1.0:
            raise ValueError("mortality_rate must lie in [0, 1]")
        if not self.frame_signal_strength >= 0.0:
            raise ValueError("frame_signal_strength must be >= 0")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must lie in [0, 1)")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")


class ParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _rows(text, header):
    if isinstance(text, str):
        text = io.StringIO(text)
    reader = csv.reader(text)
    first = next(reader, None)
    if first is None:
        raise ParseError(1, "missing header")
    if [h.strip() for h in first] != header:
        raise ParseError(1, f"expected header {','.join(header)}")
    for row in reader:
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != len(header):
            raise ParseError(reader.line_num, f"expected {len(header)} fields, got {len(row)}")
        yield reader.line_num, row


def _finite(s, line, what):
    try:
        v = float(s)
    except ValueError:
        raise ParseError(line, f"non-numeric {what} {s!r}") from None
    if not math.isfinite(v):
        raise ParseError(line, f"non-finite {what} {s!r}")
    return v


def parse_observations(text) -> list[RawObservation]:
    """Parse the observations CSV (string or text stream), preserving row order."""
    out = []
    for line, (stay, chan, off, val) in _rows(text, OBSERVATION_HEADER):
        try:
            channel = VitalChannel.from_label(chan.strip())
        except ValueError:
            raise ParseError(line, f"unknown channel {chan!r}") from None
        try:
            offset = int(off)
        except ValueError:
            raise ParseError(line, f"malformed offset {off!r}") from None
        if offset < 0:
            raise ParseError(line, f"negative offset {offset}")
        out.append(RawObservation(stay, channel, offset, _finite(val, line, "value")))
    return out


def parse_cohort(text) -> list[CohortEntry]:
    out = []
    seen = set()
    for line, (stay, patient, age, los, death) in _rows(text, COHORT_HEADER):
        if stay in seen:
            raise ParseError(line, f"duplicate stay_id {stay!r}")
        seen.add(stay)
        los_h = _finite(los, line, "los_hours")
        if los_h <= 0:
            raise ParseError(line, f"non-positive los_hours {los_h}")
        death_h = _finite(death, line, "death_time_hours") if death.strip() else None
        out.append(CohortEntry(stay, patient, _finite(age, line, "age_years"), los_h, death_h))
    return out


def serialize_observations(obs: Iterable[RawObservation]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(OBSERVATION_HEADER)
    for o in obs:
        w.writerow([o.stay_id, o.channel.label, o.offset_minutes, repr(float(o.value))])
    return buf.getvalue()


def serialize_cohort(cohort: Iterable[CohortEntry]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COHORT_HEADER)
    for e in cohort:
        death = "" if e.death_time_hours is None else repr(float(e.death_time_hours))
        w.writerow([e.stay_id, e.patient_id, repr(float(e.age_years)), repr(float(e.los_hours)),
                    death])
    return buf.getvalue()


def read_observations(path) -> list[RawObservation]:
    with open(path, encoding="utf-8", newline="") as f:
        return parse_observations(f)


def read_cohort(path) -> list[CohortEntry]:
    with open(path, encoding="utf-8", newline="") as f:
        return parse_cohort(f)


# Death-time strata used to spread non-survivors over the four LOS classes.
_DEATH_STRATA = [(0.5, 6.0), (6.0, 12.0), (12.0, 24.0), (24.0, 120.0)]


def _urgency(death_time):
    # Patients who die sooner deteriorate faster; keeps LOS classes learnable.
    return 0.5 + 1.5 * math.exp(-death_time / 12.0)


def generate_synthetic_cohort(cfg: SyntheticConfig):
    """Draw a cohort and its hourly vital-sign observations.

    Non-survivors drift away from the channel baselines at a rate of
    ``frame_signal_strength`` baseline standard deviations per 6 hours
    (scaled by how soon death occurs). Every stay gets one reading per
    channel per started hour of its stay; each reading is then dropped with
    probability ``missing_rate``. Output depends only on ``cfg``.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    n = cfg.n_stays
    n_dead = int(math.floor(n * cfg.mortality_rate))
    dead = np.zeros(n, dtype=bool)
    dead[rng.permutation(n)[:n_dead]] = True

    ages = np.round(np.clip(rng.normal(64.0, 16.0, n), 16.0, 100.0), 1)
    cohort = []
    observations = []
    width = len(str(n))
    for k in range(n):
        stay_id = f"s{k:0{width}d}"
        patient_id = f"p{k:0{width}d}"
        if dead[k]:
            lo, hi = _DEATH_STRATA[int(rng.integers(len(_DEATH_STRATA)))]
            death = round(float(rng.uniform(lo, hi)), 2)
            los = round(death + float(rng.uniform(0.0, 2.0)), 2)
            slope_scale = cfg.frame_signal_strength / 6.0 * _urgency(death)
        else:
            death = None
            los = round(float(np.clip(rng.lognormal(math.log(30.0), 0.6), 0.5, 240.0)), 2)
            slope_scale = 0.0
        cohort.append(CohortEntry(stay_id, patient_id, float(ages[k]), los, death))
        observations.extend(_stay_observations(rng, stay_id, los, slope_scale, cfg.missing_rate))
    return cohort, observations


def _stay_observations(rng, stay_id, los_hours, slope_scale, missing_rate):
    n_hours = int(math.ceil(los_hours))
    limit = int(math.ceil(los_hours * 60.0))  # offsets must stay below this
    hours = np.arange(n_hours)
    span = np.minimum(60, limit - 60 * hours)
    offsets = 60 * hours[:, None] + rng.integers(0, span[:, None], size=(n_hours, N_CHANNELS))
    noise = rng.normal(0.0, 0.5, size=(n_hours, N_CHANNELS))
    stay_offset = rng.normal(0.0, 0.5, size=N_CHANNELS)
    keep = rng.random((n_hours, N_CHANNELS)) >= missing_rate
    out = []
    for c in VitalChannel:
        p = CHANNEL_PROFILES[c]
        lo, hi = _GENERATOR_CLIP[c]
        t = offsets[:, c] / 60.0
        z = stay_offset[c] + noise[:, c] + p.direction * slope_scale * t
        vals = np.clip(p.baseline + p.sd * z, lo, hi)
        if c == VitalChannel.GLASGOW_COMA_SCORE:
            vals = np.round(vals)
        else:
            vals = np.round(vals, 2)
        for h in np.flatnonzero(keep[:, c]):
            out.append(RawObservation(stay_id, c, int(offsets[h, c]), float(vals[h])))
    out.sort(key=lambda o: (o.offset_minutes, o.channel))
    return out


def write_synthetic(cfg: SyntheticConfig, out_dir) -> dict:
    """Generate and write ``cohort.csv``, ``observations.csv`` and ``provenance.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cohort, obs = generate_synthetic_cohort(cfg)
    paths = {
        "cohort": out_dir / "cohort.csv",
        "observations": out_dir / "observations.csv",
        "provenance": out_dir / "provenance.json",
    }
    paths["cohort"].write_text(serialize_cohort(cohort), encoding="utf-8")
    paths["observations"].write_text(serialize_observations(obs), encoding="utf-8")
    provenance = {"generator": "icu_lstm.data.generate_synthetic_cohort", "prng": PRNG_ID,
                  "config": asdict(cfg)}
    paths["provenance"].write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    return paths
