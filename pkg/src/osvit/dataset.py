"""Cohort filtering, survival labeling, subject-level splits, and phantoms.

Survival is bucketed into three classes by days-to-event with half-open
intervals: [0, 260) -> Short, [260, 470) -> Medium, [470, inf) -> Long.
Class codes are fixed (Long=0, Medium=1, Short=2) and must never change;
they are baked into checkpoints and reports.

Each subject contributes four MRI sequences, treated as separate samples
that always travel together through the train/test split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Mapping

import numpy as np

from .errors import ConfigError
from .volume_io import Resection, SubjectRecord, Volume

SHORT_MEDIUM_DAYS = 260
MEDIUM_LONG_DAYS = 470


class SurvivalClass(IntEnum):
    LONG = 0
    MEDIUM = 1
    SHORT = 2


class Sequence(Enum):
    T1 = "t1"
    T1CE = "t1ce"
    T2 = "t2"
    FLAIR = "flair"


@dataclass(frozen=True)
class Sample:
    subject_id: str
    sequence: Sequence
    volume: Volume
    age: float
    label: SurvivalClass


@dataclass
class DatasetSplit:
    train: list
    test: list
    seed: int


def derive_label(survival_days) -> SurvivalClass:
    if survival_days is None:
        raise ConfigError("subject has no survival_days; cannot derive a label")
    if survival_days < 0:
        raise ConfigError(f"survival_days must be >= 0, got {survival_days}")
    if survival_days < SHORT_MEDIUM_DAYS:
        return SurvivalClass.SHORT
    if survival_days < MEDIUM_LONG_DAYS:
        return SurvivalClass.MEDIUM
    return SurvivalClass.LONG


def filter_cohort(records) -> list:
    """Keep subjects with gross total resection and a recorded survival time."""
    return [r for r in records
            if r.resection is Resection.GTR and r.survival_days is not None]


def build_samples(records, volume_lookup: Mapping, expected_dims=(50, 64, 64)) -> list:
    """Fan each subject out into one sample per MRI sequence.

    ``volume_lookup`` maps (subject_id, Sequence) to a preprocessed volume.
    """
    samples = []
    for record in records:
        missing = [seq.value for seq in Sequence
                   if (record.subject_id, seq) not in volume_lookup]
        if missing:
            raise ConfigError(f"subject {record.subject_id!r} is missing sequence(s): "
                              f"{', '.join(missing)}")
        label = derive_label(record.survival_days)
        for seq in Sequence:
            volume = volume_lookup[(record.subject_id, seq)]
            if volume.dims != tuple(expected_dims):
                raise ConfigError(f"subject {record.subject_id!r} sequence {seq.value}: "
                                  f"dims {volume.dims} do not match expected {tuple(expected_dims)}")
            samples.append(Sample(record.subject_id, seq, volume, record.age, label))
    return samples


def split_by_subject(samples, train_fraction: float = 0.8, seed: int = 0) -> DatasetSplit:
    """Shuffle subjects with a seeded PCG64 stream and cut at the train fraction.

    All of a subject's sequences land in the same partition.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    subjects = list(dict.fromkeys(s.subject_id for s in samples))
    if len(subjects) < 2:
        raise ConfigError(f"need at least 2 subjects to split, got {len(subjects)}")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(subjects))
    n_train = math.floor(train_fraction * len(subjects))
    train_ids = {subjects[i] for i in order[:n_train]}
    train = [s for s in samples if s.subject_id in train_ids]
    test = [s for s in samples if s.subject_id not in train_ids]
    return DatasetSplit(train=train, test=test, seed=seed)


def write_split_manifest(split: DatasetSplit, path) -> None:
    """One line per subject, sorted: ``subject_id,partition``."""
    rows = {s.subject_id: "train" for s in split.train}
    rows.update({s.subject_id: "test" for s in split.test})
    with open(path, "w", encoding="utf-8") as fh:
        for sid in sorted(rows):
            fh.write(f"{sid},{rows[sid]}\n")


@dataclass(frozen=True)
class SynthConfig:
    """Phantom generator geometry; logged in run manifests."""
    dims: tuple = (50, 64, 64)
    # ellipsoid semi-axis in voxels per class code; shorter survival -> larger
    base_radius: float = 6.0
    radius_step: float = 3.0
    background: float = 30.0
    foreground: float = 200.0
    noise_sigma: float = 8.0
    age_range: tuple = (40.0, 80.0)
    survival_ranges: tuple = ((470, 1200), (260, 470), (30, 260))  # per class code


def _ellipsoid_phantom(cfg: SynthConfig, radius: float, rng) -> Volume:
    d, h, w = cfg.dims
    zd, zh, zw = np.meshgrid(np.arange(d) - (d - 1) / 2,
                             np.arange(h) - (h - 1) / 2,
                             np.arange(w) - (w - 1) / 2, indexing="ij")
    # depth extent is roughly 0.8x the in-plane extent at default dims
    inside = (zd / (0.8 * radius)) ** 2 + (zh / radius) ** 2 + (zw / radius) ** 2 <= 1.0
    data = np.full(cfg.dims, cfg.background)
    data[inside] = cfg.foreground
    data += rng.normal(0.0, cfg.noise_sigma, size=cfg.dims)
    return Volume(np.clip(np.floor(data + 0.5), 0, 255).astype(np.uint8))


def synth_generate(n_subjects: int, seed: int, cfg: SynthConfig = SynthConfig()):
    """Build a balanced synthetic cohort: (records, volume lookup).

    Each subject gets four phantom sequences sharing one bright ellipsoid
    whose radius grows with class code, so Short-survival phantoms carry the
    largest lesion. Fully deterministic for a fixed (n_subjects, seed).
    """
    if n_subjects < 3:
        raise ConfigError(f"synth_generate needs n_subjects >= 3, got {n_subjects}")
    rng = np.random.Generator(np.random.PCG64(seed))
    records = []
    volumes = {}
    for i in range(n_subjects):
        code = i % 3  # round-robin keeps class counts within 1 of each other
        lo, hi = cfg.survival_ranges[code]
        days = int(rng.integers(lo, hi))
        age = float(np.round(rng.uniform(*cfg.age_range), 1))
        sid = f"synth{i:03d}"
        records.append(SubjectRecord(sid, age, days, Resection.GTR))
        radius = cfg.base_radius + cfg.radius_step * code
        for seq in Sequence:
            volumes[(sid, seq)] = _ellipsoid_phantom(cfg, radius, rng)
    return records, volumes
