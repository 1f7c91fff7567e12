"""Latitude / longitude / date metadata to the 6-d cyclic encoding.

Each raw field is mapped linearly onto [-1, 1] (lat/90, lon/180, 2*date-1),
then encoded as ``[sin(pi*x), cos(pi*x)]`` with all sines first. A record with
any field absent encodes to the all-zero vector, which no present record can
produce because every sin/cos pair has unit norm.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from typing import Iterable

import numpy as np

ENCODED_DIM = 6


@dataclass(frozen=True)
class MetadataRecord:
    lat: float | None = None
    lon: float | None = None
    date: float | None = None  # fraction of the year in [0, 1)

    @property
    def missing(self) -> bool:
        return self.lat is None or self.lon is None or self.date is None

    def validate(self) -> None:
        for name, value, lo, hi, closed_hi in (
            ("lat", self.lat, -90.0, 90.0, True),
            ("lon", self.lon, -180.0, 180.0, True),
            ("date", self.date, 0.0, 1.0, False),
        ):
            if value is None:
                continue
            ok = np.isfinite(value) and lo <= value and (value <= hi if closed_hi else value < hi)
            if not ok:
                bracket = "]" if closed_hi else ")"
                raise ValueError(f"{name}={value!r} outside [{lo:g}, {hi:g}{bracket}")


@dataclass(frozen=True)
class EncodedMetadata:
    values: np.ndarray
    missing: bool


def date_to_year_fraction(value: str | dt.date) -> float:
    """Calendar date to fraction of the year; Jan 1 -> 0, Dec 31 -> (n-1)/n."""
    if isinstance(value, str):
        value = dt.date.fromisoformat(value[:10])
    day_of_year = value.timetuple().tm_yday
    days_in_year = 366 if _is_leap(value.year) else 365
    return (day_of_year - 1) / days_in_year


def _is_leap(year: int) -> bool:
    return year % 4 == 0 and (year % 100 != 0 or year % 400 == 0)


def normalize_metadata(record: MetadataRecord) -> np.ndarray:
    """Map (lat, lon, date) onto [-1, 1]^3.

    Longitude 180 is canonicalized to -180 so the antimeridian has a single
    normalized value. Absent fields come out as NaN; ``encode_record`` never
    passes such records through.
    """
    record.validate()
    lat = np.nan if record.lat is None else record.lat / 90.0
    if record.lon is None:
        lon = np.nan
    else:
        lon = -1.0 if record.lon == 180.0 else record.lon / 180.0
    date = np.nan if record.date is None else 2.0 * record.date - 1.0
    return np.array([lat, lon, date], dtype=np.float64)


def cyclic_encode(normalized: np.ndarray) -> EncodedMetadata:
    normalized = np.asarray(normalized, dtype=np.float64)
    if normalized.shape != (3,) or np.any(np.abs(normalized) > 1):
        raise ValueError(f"expected 3 components in [-1, 1], got {normalized!r}")
    angle = np.pi * normalized
    return EncodedMetadata(np.concatenate([np.sin(angle), np.cos(angle)]), False)


def encode_record(record: MetadataRecord) -> EncodedMetadata:
    if record.missing:
        record.validate()
        return EncodedMetadata(np.zeros(ENCODED_DIM), True)
    return cyclic_encode(normalize_metadata(record))


def encode_batch(records: Iterable[MetadataRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Stack encodings into an (n, 6) array plus an (n,) missing-flag array."""
    encoded = [encode_record(r) for r in records]
    if not encoded:
        return np.zeros((0, ENCODED_DIM)), np.zeros(0, dtype=bool)
    return np.stack([e.values for e in encoded]), np.array([e.missing for e in encoded])
