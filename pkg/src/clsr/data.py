"""Situation data model, JSONL interchange and the pair-preparation pipeline.

A raw series is sampled telemetry for one device (one value per sample
interval, ``NaN`` where the device did not report).  The preparation pipeline
turns it into positive pairs of fixed-length situations::

    segment_and_average -> odd_even_split -> min-points filter
        -> augment second member -> impute both
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, EmptyDatasetError, ShapeError

AUGMENTATIONS = ("cyclic_shift", "vertical_shift", "scale")


@dataclass
class RawSeries:
    device_id: str
    start_time: int
    sample_interval: int
    values: np.ndarray  # 1-D float, NaN = not reporting

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)


@dataclass
class Situation:
    """A T x C matrix of feature values with its observation mask.

    ``values`` holds NaN at unobserved cells until :func:`impute` replaces
    them with the sentinel; ``mask`` is True where a value was observed.
    """

    id: str
    values: np.ndarray
    mask: np.ndarray
    meta: dict | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        self.mask = np.asarray(self.mask, dtype=bool).reshape(self.values.shape)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    @property
    def is_imputed(self) -> bool:
        return not np.isnan(self.values).any()

    def replace(self, values=None, mask=None, id=None) -> "Situation":
        return Situation(
            id=self.id if id is None else id,
            values=self.values.copy() if values is None else values,
            mask=self.mask.copy() if mask is None else mask,
            meta=None if self.meta is None else dict(self.meta),
        )


@dataclass
class SituationPair:
    first: Situation
    second: Situation

    def __post_init__(self):
        if self.first.shape != self.second.shape:
            raise ShapeError(
                f"pair members differ in shape: {self.first.shape} vs {self.second.shape}"
            )


@dataclass
class PrepConfig:
    segment_minutes: int = 60
    window_seconds: int = 60
    min_points: int = 10
    sentinel: float = -100.0
    augmentations: frozenset = field(default_factory=frozenset)
    vertical_shift_range: tuple[float, float] = (-10.0, 10.0)
    scale_range: tuple[float, float] = (0.5, 2.0)
    valid_range: tuple[float, float] = (0.0, 100.0)
    rng_seed: int = 0

    def __post_init__(self):
        self.augmentations = frozenset(self.augmentations)
        self.vertical_shift_range = tuple(float(v) for v in self.vertical_shift_range)
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.valid_range = tuple(float(v) for v in self.valid_range)

    def validate(self) -> "PrepConfig":
        unknown = self.augmentations - set(AUGMENTATIONS)
        if unknown:
            raise ConfigError(f"unknown augmentations: {sorted(unknown)}")
        lo, hi = self.valid_range
        if lo <= self.sentinel <= hi:
            raise ConfigError(
                f"sentinel {self.sentinel} lies inside the valid range [{lo}, {hi}]"
            )
        s_lo, s_hi = self.vertical_shift_range
        if not s_lo < s_hi:
            raise ConfigError("vertical shift bounds must satisfy lo < hi")
        a_lo, a_hi = self.scale_range
        if not (0 < a_lo < a_hi):
            raise ConfigError("scale bounds must be positive with lo < hi")
        if self.window_seconds <= 0 or self.segment_minutes <= 0:
            raise ConfigError("window and segment lengths must be positive")
        if (self.segment_minutes * 60) % self.window_seconds:
            raise ConfigError(
                f"segment of {self.segment_minutes} min is not a multiple of "
                f"{self.window_seconds} s windows"
            )
        if self.min_points < 0:
            raise ConfigError("min_points must be non-negative")
        return self

    @property
    def sequence_length(self) -> int:
        """Number of averaged entries per segment (2T)."""
        return self.segment_minutes * 60 // self.window_seconds

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augmentations"] = sorted(self.augmentations)
        for key in ("vertical_shift_range", "scale_range", "valid_range"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PrepConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown prep config keys: {sorted(unknown)}")
        return cls(**d)


# --- pipeline steps -------------------------------------------------------


def segment_and_average(raw: RawSeries, cfg: PrepConfig) -> list[np.ndarray]:
    """Cut ``raw`` into segments and average the samples of each window.

    Returns one 1-D array of ``cfg.sequence_length`` entries per complete
    segment.  An entry is the mean of the observed samples in its window,
    or NaN if none were observed.  A trailing partial segment is dropped.
    """
    if raw.sample_interval <= 0 or cfg.window_seconds % raw.sample_interval:
        raise ConfigError(
            f"sample interval {raw.sample_interval} s does not divide "
            f"window of {cfg.window_seconds} s"
        )
    if (cfg.segment_minutes * 60) % cfg.window_seconds:
        raise ConfigError("segment length is not a multiple of the window length")

    per_window = cfg.window_seconds // raw.sample_interval
    per_segment = per_window * cfg.sequence_length
    n_segments = raw.values.size // per_segment
    if n_segments == 0:
        return []
    windows = raw.values[: n_segments * per_segment].reshape(
        n_segments, cfg.sequence_length, per_window
    )
    observed = ~np.isnan(windows)
    counts = observed.sum(axis=2)
    sums = np.where(observed, windows, 0.0).sum(axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return [row for row in means]


def odd_even_split(seq: Sequence[float | None], id: str = "s", meta: dict | None = None) -> SituationPair:
    """Split a 2T-long sequence into its odd- and even-position halves.

    ``seq`` may be a 1-D sequence (C=1) or a (2T, C) array; None/NaN mark
    missing entries.
    """
    if isinstance(seq, np.ndarray):
        arr = np.asarray(seq, dtype=np.float64)
    else:
        arr = np.array([np.nan if v is None else v for v in seq], dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape[0] % 2:
        raise ShapeError(f"odd_even_split needs an even length, got {arr.shape[0]}")
    odd, even = arr[0::2], arr[1::2]
    return SituationPair(
        first=Situation(f"{id}:a", odd, ~np.isnan(odd), meta),
        second=Situation(f"{id}:b", even, ~np.isnan(even), meta),
    )


def interleave(pair: SituationPair) -> np.ndarray:
    """Inverse of :func:`odd_even_split` (on values, NaN for missing)."""
    first = np.where(pair.first.mask, pair.first.values, np.nan)
    second = np.where(pair.second.mask, pair.second.values, np.nan)
    out = np.empty((first.shape[0] * 2, first.shape[1]))
    out[0::2] = first
    out[1::2] = second
    return out


def keep_min_points(s: Situation, min_points: int = 10) -> bool:
    return s.n_observed >= min_points


def impute(s: Situation, cfg: PrepConfig) -> Situation:
    lo, hi = cfg.valid_range
    if lo <= cfg.sentinel <= hi:
        raise ConfigError(f"sentinel {cfg.sentinel} lies inside the valid range [{lo}, {hi}]")
    return s.replace(values=np.where(s.mask, s.values, cfg.sentinel))


def cyclic_shift(s: Situation, offset: int) -> Situation:
    """Rotate values and mask forward in time by ``offset`` steps."""
    return s.replace(
        values=np.roll(s.values, offset, axis=0), mask=np.roll(s.mask, offset, axis=0)
    )


def vertical_shift(s: Situation, delta: float) -> Situation:
    return s.replace(values=np.where(s.mask, s.values + delta, s.values))


def scale(s: Situation, factor: float) -> Situation:
    return s.replace(values=np.where(s.mask, s.values * factor, s.values))


def augment_cyclic_shift(s: Situation, rng: np.random.Generator) -> Situation:
    return cyclic_shift(s, int(rng.integers(0, s.shape[0])))


def augment_vertical_shift(
    s: Situation, rng: np.random.Generator, bounds: tuple[float, float] = (-10.0, 10.0)
) -> Situation:
    return vertical_shift(s, float(rng.uniform(*bounds)))


def augment_scale(
    s: Situation, rng: np.random.Generator, bounds: tuple[float, float] = (0.5, 2.0)
) -> Situation:
    return scale(s, float(rng.uniform(*bounds)))


def augment(s: Situation, cfg: PrepConfig, rng: np.random.Generator) -> Situation:
    # fixed application order keeps the rng stream layout stable
    if "cyclic_shift" in cfg.augmentations:
        s = augment_cyclic_shift(s, rng)
    if "vertical_shift" in cfg.augmentations:
        s = augment_vertical_shift(s, rng, cfg.vertical_shift_range)
    if "scale" in cfg.augmentations:
        s = augment_scale(s, rng, cfg.scale_range)
    return s


def series_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for the ``index``-th input series."""
    return np.random.default_rng([seed, index])


def build_pair_dataset(
    raws: Iterable[RawSeries], cfg: PrepConfig, limit: int | None = None
) -> tuple[list[SituationPair], dict]:
    """Run the full preparation pipeline over ``raws``.

    ``limit`` truncates the output to the first ``limit`` pairs.  Returns the
    pairs and a manifest dict with counts and the config echo.
    """
    cfg.validate()
    pairs: list[SituationPair] = []
    n_series = n_segments = n_discarded = 0
    for index, raw in enumerate(raws):
        if limit is not None and len(pairs) >= limit:
            break
        n_series += 1
        rng = series_rng(cfg.rng_seed, index)
        for seg_no, seq in enumerate(segment_and_average(raw, cfg)):
            n_segments += 1
            seg_start = raw.start_time + seg_no * cfg.segment_minutes * 60
            meta = {"device_id": raw.device_id, "start_time": seg_start}
            pair = odd_even_split(seq, id=f"{raw.device_id}@{seg_start}", meta=meta)
            if not (
                keep_min_points(pair.first, cfg.min_points)
                and keep_min_points(pair.second, cfg.min_points)
            ):
                n_discarded += 1
                continue
            second = augment(pair.second, cfg, rng)
            pairs.append(SituationPair(impute(pair.first, cfg), impute(second, cfg)))
            if limit is not None and len(pairs) >= limit:
                break
    if not pairs:
        raise EmptyDatasetError("data preparation produced no pairs")
    manifest = {
        "series": n_series,
        "segments": n_segments,
        "discarded_min_points": n_discarded,
        "pairs": len(pairs),
        "T": pairs[0].first.shape[0],
        "C": pairs[0].first.shape[1],
        "seed": cfg.rng_seed,
        "config": cfg.to_dict(),
    }
    return pairs, manifest


def pairs_to_arrays(pairs: Sequence[SituationPair], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Stack imputed pairs into two (N, T, C) arrays."""
    first = np.stack([p.first.values for p in pairs]).astype(dtype)
    second = np.stack([p.second.values for p in pairs]).astype(dtype)
    return first, second


def situations_to_array(situations: Sequence[Situation], dtype=np.float32) -> np.ndarray:
    arr = np.stack([s.values for s in situations])
    if np.isnan(arr).any():
        raise ShapeError("situations must be imputed before stacking")
    return arr.astype(dtype)


# --- JSONL interchange ----------------------------------------------------


def _encode_matrix(values: np.ndarray, mask: np.ndarray) -> list:
    return [
        [float(v) if m else None for v, m in zip(row, mrow)]
        for row, mrow in zip(values.tolist(), mask.tolist())
    ]


def situation_to_dict(s: Situation) -> dict:
    d = {"id": s.id, "values": _encode_matrix(s.values, s.mask)}
    if s.is_imputed and not s.mask.all():
        fills = np.unique(s.values[~s.mask])
        d["fill"] = float(fills[0]) if fills.size == 1 else None
    if s.meta:
        d["meta"] = s.meta
    return d


def situation_from_dict(d: dict) -> Situation:
    rows = d["values"]
    mask = np.array([[v is not None for v in row] for row in rows], dtype=bool)
    fill = d.get("fill")
    values = np.array(
        [[np.nan if v is None else v for v in row] for row in rows], dtype=np.float64
    )
    if fill is not None:
        values[~mask] = fill
    return Situation(id=d["id"], values=values, mask=mask, meta=d.get("meta"))


def raw_to_dict(raw: RawSeries) -> dict:
    return {
        "device_id": raw.device_id,
        "start_time": raw.start_time,
        "sample_interval": raw.sample_interval,
        "values": [None if np.isnan(v) else v for v in raw.values.tolist()],
    }


def raw_from_dict(d: dict) -> RawSeries:
    return RawSeries(
        device_id=d["device_id"],
        start_time=int(d["start_time"]),
        sample_interval=int(d["sample_interval"]),
        values=np.array([np.nan if v is None else v for v in d["values"]], dtype=np.float64),
    )


def _write_jsonl(path: Path, records: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")))
            fh.write("\n")


def _read_jsonl(path: Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_situations(path, situations: Iterable[Situation]) -> None:
    _write_jsonl(path, (situation_to_dict(s) for s in situations))


def read_situations(path) -> list[Situation]:
    return [situation_from_dict(d) for d in _read_jsonl(path)]


def write_pairs(path, pairs: Iterable[SituationPair]) -> None:
    _write_jsonl(
        path,
        ({"first": situation_to_dict(p.first), "second": situation_to_dict(p.second)} for p in pairs),
    )


def read_pairs(path) -> list[SituationPair]:
    return [
        SituationPair(situation_from_dict(d["first"]), situation_from_dict(d["second"]))
        for d in _read_jsonl(path)
    ]


def write_raw(path, raws: Iterable[RawSeries]) -> None:
    _write_jsonl(path, (raw_to_dict(r) for r in raws))


def iter_raw(path) -> Iterator[RawSeries]:
    for d in _read_jsonl(path):
        yield raw_from_dict(d)
