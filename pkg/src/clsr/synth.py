"""Synthetic WLAN retransmission telemetry.

Labeled situations follow five pattern classes (drop, multiple / single
disassociation, stable around 20 % and 40 %) plus "other" distractors.  The
unlabeled corpus mixes similar shapes with random walks, ramps and steps and
overlays random missing-data episodes.  Values are retransmission rates in
[0, 100] sampled every 10 s; NaN marks a sample the device did not report.

Every labeled instance is checked against a machine-readable class predicate
and regenerated until it satisfies exactly its own predicate.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .data import PrepConfig, RawSeries, Situation, impute, odd_even_split, segment_and_average

CLASSES = ("drop", "multi_disassoc", "single_disassoc", "stable20", "stable40")
SAMPLE_INTERVAL = 10
MINUTES = 60
PER_MINUTE = 60 // SAMPLE_INTERVAL
START_TIME = 1_700_000_000


@dataclass
class ClassSpec:
    name: str
    noise_std: float
    params: dict = field(default_factory=dict)


DEFAULT_SPECS: dict[str, ClassSpec] = {
    "drop": ClassSpec("drop", 3.0, {"high": (45.0, 80.0), "low": (2.0, 15.0), "minutes": (6, 14), "margin": 8}),
    "multi_disassoc": ClassSpec(
        "multi_disassoc", 3.0, {"level": (10.0, 60.0), "gaps": (2, 3), "gap_minutes": (2, 5), "spacing": 4}
    ),
    "single_disassoc": ClassSpec("single_disassoc", 3.0, {"level": (10.0, 60.0), "gap_minutes": (8, 20)}),
    "stable20": ClassSpec("stable20", 2.0, {"level": 20.0, "jitter": 1.5}),
    "stable40": ClassSpec("stable40", 4.0, {"level": 40.0, "jitter": 3.0}),
}

UNLABELED_MIX = {
    "stable": 3.0,
    "drop": 1.0,
    "random_walk": 2.0,
    "ramp": 1.0,
    "step": 1.0,
    "sine": 1.0,
    "spiky": 1.0,
}


# --- class predicates (evaluated on a prepared T-step situation) -------------


def missing_runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of unobserved steps as (start, length), channel 0."""
    missing = ~np.asarray(mask)[:, 0] if np.ndim(mask) == 2 else ~np.asarray(mask)
    runs = []
    i = 0
    n = missing.size
    while i < n:
        if missing[i]:
            j = i
            while j < n and missing[j]:
                j += 1
            runs.append((i, j - i))
            i = j
        else:
            i += 1
    return runs


def _values(s: Situation) -> np.ndarray:
    return s.values[:, 0]


def is_drop(s: Situation) -> bool:
    if not s.mask.all():
        return False
    v = _values(s)
    low = v < np.median(v) - 20.0
    runs = missing_runs(~low[:, None])
    if len(runs) != 1:
        return False
    start, length = runs[0]
    return 2 <= length <= v.size // 2 and start > 0 and start + length < v.size


def is_multi_disassoc(s: Situation) -> bool:
    return len(missing_runs(s.mask)) >= 2


def is_single_disassoc(s: Situation) -> bool:
    runs = missing_runs(s.mask)
    return len(runs) == 1 and runs[0][1] >= 3


def _is_stable(s: Situation, spec: ClassSpec) -> bool:
    if not s.mask.all():
        return False
    level = spec.params["level"]
    return bool(np.all(np.abs(_values(s) - level) <= 3.0 * spec.noise_std))


def is_stable20(s: Situation, specs: dict = DEFAULT_SPECS) -> bool:
    return _is_stable(s, specs["stable20"])


def is_stable40(s: Situation, specs: dict = DEFAULT_SPECS) -> bool:
    return _is_stable(s, specs["stable40"])


PREDICATES = {
    "drop": is_drop,
    "multi_disassoc": is_multi_disassoc,
    "single_disassoc": is_single_disassoc,
    "stable20": is_stable20,
    "stable40": is_stable40,
}


def matching_classes(s: Situation) -> list[str]:
    return [name for name, pred in PREDICATES.items() if pred(s)]


# --- minute-level profiles ----------------------------------------------------


def _place_gaps(rng, n_gaps, gap_range, spacing, minutes=MINUTES, tries=100):
    for _ in range(tries):
        lengths = rng.integers(gap_range[0], gap_range[1] + 1, size=n_gaps)
        starts = np.sort(rng.integers(1, minutes - lengths.max() - 1, size=n_gaps))
        ok = all(starts[i + 1] - (starts[i] + lengths[i]) >= spacing for i in range(n_gaps - 1))
        if ok and starts[-1] + lengths[-1] < minutes - 1:
            gaps = np.zeros(minutes, dtype=bool)
            for st, ln in zip(starts, lengths):
                gaps[st : st + ln] = True
            return gaps
    raise RuntimeError("could not place gaps")  # pragma: no cover


def class_profile(name: str, spec: ClassSpec, rng: np.random.Generator) -> np.ndarray:
    """Per-minute mean level for one hour of a labeled class; NaN = gap."""
    p = spec.params
    if name == "drop":
        high = rng.uniform(*p["high"])
        low = rng.uniform(*p["low"])
        length = int(rng.integers(p["minutes"][0], p["minutes"][1] + 1))
        start = int(rng.integers(p["margin"], MINUTES - p["margin"] - length + 1))
        prof = np.full(MINUTES, high)
        prof[start : start + length] = low
        return prof
    if name in ("multi_disassoc", "single_disassoc"):
        prof = np.full(MINUTES, rng.uniform(*p["level"]))
        if name == "multi_disassoc":
            n_gaps = int(rng.integers(p["gaps"][0], p["gaps"][1] + 1))
            gaps = _place_gaps(rng, n_gaps, p["gap_minutes"], p["spacing"])
        else:
            gaps = _place_gaps(rng, 1, p["gap_minutes"], 0)
        prof[gaps] = np.nan
        return prof
    if name in ("stable20", "stable40"):
        return np.full(MINUTES, p["level"] + rng.uniform(-p["jitter"], p["jitter"]))
    raise ValueError(f"unknown class {name!r}")


def behaviour_profile(kind: str, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Per-minute level and raw noise std for an unlabeled / distractor hour."""
    t = np.arange(MINUTES)
    if kind == "stable":
        return np.full(MINUTES, rng.uniform(0, 100)), rng.uniform(1, 5)
    if kind == "drop":
        high = rng.uniform(30, 95)
        prof = np.full(MINUTES, high)
        length = int(rng.integers(3, 20))
        start = int(rng.integers(0, MINUTES - length))
        prof[start : start + length] = rng.uniform(0, high * 0.6)
        return prof, rng.uniform(1, 5)
    if kind == "random_walk":
        start = rng.uniform(0, 100)
        return start + np.cumsum(rng.normal(0, rng.uniform(1, 4), MINUTES)), rng.uniform(1, 4)
    if kind == "ramp":
        a, b = rng.uniform(0, 100, size=2)
        return np.linspace(a, b, MINUTES), rng.uniform(1, 4)
    if kind == "step":
        a, b = rng.uniform(0, 100, size=2)
        cut = int(rng.integers(5, MINUTES - 5))
        return np.where(t < cut, a, b), rng.uniform(1, 4)
    if kind == "sine":
        base = rng.uniform(15, 85)
        amp = rng.uniform(5, min(base, 100 - base))
        period = rng.uniform(8, 40)
        return base + amp * np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi)), rng.uniform(1, 3)
    if kind == "spiky":
        prof = np.full(MINUTES, rng.uniform(0, 50))
        spikes = rng.random(MINUTES) < rng.uniform(0.05, 0.2)
        prof[spikes] += rng.uniform(20, 50, size=spikes.sum())
        return prof, rng.uniform(1, 3)
    raise ValueError(f"unknown behaviour {kind!r}")


def expand(profile: np.ndarray, noise_std: float, rng: np.random.Generator, dropout_p: float = 0.02) -> np.ndarray:
    """Minute profile -> raw 10 s samples with noise, clipping and dropouts."""
    raw = np.repeat(profile, PER_MINUTE) + rng.normal(0, noise_std, profile.size * PER_MINUTE)
    raw = np.round(np.clip(raw, 0.0, 100.0), 2)
    raw[rng.random(raw.size) < dropout_p] = np.nan
    raw[np.repeat(np.isnan(profile), PER_MINUTE)] = np.nan
    return raw


# --- labeled set ------------------------------------------------------------------


@dataclass
class LabeledSet:
    situations: list[Situation]
    classes: dict[str, list[str]]
    distractors: list[str]


def _to_situation(raw: RawSeries, id_: str, label: str, cfg: PrepConfig) -> Situation:
    (seq,) = segment_and_average(raw, cfg)
    first = odd_even_split(seq, id=id_).first
    return Situation(id_, impute(first, cfg).values, first.mask, {"class": label})


def _labeled_instance(label, spec, rng, idx, cfg, max_tries=1000):
    for _ in range(max_tries):
        prof = class_profile(label, spec, rng)
        raw = RawSeries(f"{label}-{idx:02d}", START_TIME, SAMPLE_INTERVAL, expand(prof, spec.noise_std, rng))
        s = _to_situation(raw, raw.device_id, label, cfg)
        if matching_classes(s) == [label]:
            return s
    raise RuntimeError(f"could not generate a valid {label} instance")  # pragma: no cover


DISTRACTOR_KINDS = ("random_walk", "ramp", "step", "sine", "spiky", "stable", "drop", "short_gap")


def _distractor(rng, idx, cfg, max_tries=1000):
    id_ = f"other-{idx:02d}"
    for _ in range(max_tries):
        kind = DISTRACTOR_KINDS[int(rng.integers(len(DISTRACTOR_KINDS)))]
        if kind == "short_gap":
            prof, noise = behaviour_profile(("random_walk", "stable", "ramp")[int(rng.integers(3))], rng)
            start = int(rng.integers(1, MINUTES - 5))
            prof = prof.astype(float)
            prof[start : start + int(rng.integers(2, 4))] = np.nan
        else:
            prof, noise = behaviour_profile(kind, rng)
        raw = RawSeries(id_, START_TIME, SAMPLE_INTERVAL, expand(prof, noise, rng))
        s = _to_situation(raw, id_, "other", cfg)
        if s.n_observed >= cfg.min_points and not matching_classes(s):
            s.meta["kind"] = kind
            return s
    raise RuntimeError("could not generate a distractor")  # pragma: no cover


def generate_labeled(
    specs: dict[str, ClassSpec] | None = None,
    members_per_class: int = 8,
    distractors: int = 48,
    seed: int = 42,
    cfg: PrepConfig | None = None,
) -> LabeledSet:
    """Labeled query/ground-truth situations plus distractors.

    Each instance is one hour of raw telemetry passed through the same
    averaging and odd-even split as the training data; its odd half is
    kept as the T-step situation.
    """
    specs = specs or DEFAULT_SPECS
    cfg = cfg or PrepConfig()
    missing = set(CLASSES) - set(specs)
    if missing:
        raise ValueError(f"specs missing classes {sorted(missing)}")
    situations: list[Situation] = []
    classes: dict[str, list[str]] = {}
    for ci, label in enumerate(CLASSES):
        classes[label] = []
        for m in range(members_per_class):
            rng = np.random.default_rng([seed, 2, ci, m])
            s = _labeled_instance(label, specs[label], rng, m, cfg)
            situations.append(s)
            classes[label].append(s.id)
    distractor_ids = []
    for j in range(distractors):
        s = _distractor(np.random.default_rng([seed, 3, j]), j, cfg)
        situations.append(s)
        distractor_ids.append(s.id)
    return LabeledSet(situations, classes, distractor_ids)


# --- unlabeled corpus ---------------------------------------------------------


def missing_episodes(n: int, rate: float, mean_len: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of missing samples from an alternating renewal process.

    Missing and present run lengths are geometric with means ``mean_len`` and
    ``mean_len * (1 - rate) / rate``, so the long-run missing fraction is
    ``rate``.  The initial state is drawn from the stationary distribution.
    """
    out = np.zeros(n, dtype=bool)
    if rate <= 0:
        return out
    if rate >= 1:
        out[:] = True
        return out
    p_end_missing = 1.0 / mean_len
    p_end_present = rate / (mean_len * (1.0 - rate))
    state = rng.random() < rate
    pos = 0
    while pos < n:
        length = int(rng.geometric(p_end_missing if state else p_end_present))
        if state:
            out[pos : pos + length] = True
        pos += length
        state = not state
    return out


def iter_unlabeled(
    segments: int = 1,
    mix: dict[str, float] | None = None,
    missing_rate: float = 0.08,
    mean_gap_minutes: float = 5.0,
    seed: int = 0,
    start_time: int = START_TIME,
) -> Iterator[RawSeries]:
    """Endless stream of unlabeled devices; series ``i`` depends only on (seed, i)."""
    mix = mix or UNLABELED_MIX
    kinds = sorted(mix)
    weights = np.array([mix[k] for k in kinds], dtype=float)
    weights /= weights.sum()
    for i in itertools.count():
        rng = np.random.default_rng([seed, 1, i])
        hours = []
        for _ in range(segments):
            kind = kinds[int(rng.choice(len(kinds), p=weights))]
            prof, noise = behaviour_profile(kind, rng)
            hours.append(expand(prof, noise, rng, dropout_p=0.0))
        values = np.concatenate(hours)
        values[missing_episodes(values.size, missing_rate, mean_gap_minutes * PER_MINUTE, rng)] = np.nan
        yield RawSeries(f"dev{i:06d}", start_time, SAMPLE_INTERVAL, values)


def generate_unlabeled(
    n_series: int,
    segments: int = 1,
    mix: dict[str, float] | None = None,
    missing_rate: float = 0.08,
    mean_gap_minutes: float = 5.0,
    seed: int = 0,
    start_time: int = START_TIME,
) -> list[RawSeries]:
    """Unlabeled raw telemetry: ``n_series`` devices, ``segments`` hours each."""
    stream = iter_unlabeled(segments, mix, missing_rate, mean_gap_minutes, seed, start_time)
    return list(itertools.islice(stream, n_series))
