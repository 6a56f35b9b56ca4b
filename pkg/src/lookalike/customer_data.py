"""Customer universe: records, JSONL I/O, synthetic generation, time windows."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CHANNELS = ("transaction", "visit", "engagement")


class DataError(ValueError):
    """Raised for malformed or inconsistent customer data."""


@dataclass(frozen=True)
class TimeWindow:
    """Half-open day range ``[start_day, end_day)``."""

    start_day: int
    end_day: int

    def __post_init__(self):
        if not self.start_day < self.end_day:
            raise ValueError(f"empty window [{self.start_day}, {self.end_day})")

    def __contains__(self, day: int) -> bool:
        return self.start_day <= day < self.end_day

    @classmethod
    def parse(cls, text: str) -> "TimeWindow":
        start, _, end = text.partition(":")
        return cls(int(start), int(end))

    def __str__(self):
        return f"{self.start_day}:{self.end_day}"


@dataclass
class CustomerRecord:
    customer_id: int
    # (day, channel, category_index, magnitude)
    events: list[tuple[int, str, int, float]] = field(default_factory=list)
    demographics: dict[str, str] = field(default_factory=dict)
    dense_stats: dict[str, float] = field(default_factory=dict)
    location_text: str = ""

    def to_json(self) -> str:
        return json.dumps(
            {
                "customer_id": self.customer_id,
                "events": [list(e) for e in self.events],
                "demographics": self.demographics,
                "dense_stats": self.dense_stats,
                "location_text": self.location_text,
            },
            ensure_ascii=False,
            separators=(",", ":"),
        )


@dataclass(frozen=True)
class SynthConfig:
    n_customers: int = 10_000
    n_categories: int = 20
    n_archetypes: int = 8
    day_range: TimeWindow = TimeWindow(0, 365)
    location_informative: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_customers < 0 or self.n_categories < 1 or self.n_archetypes < 1:
            raise ValueError("n_customers must be >= 0; n_categories, n_archetypes >= 1")
        if self.n_customers and self.n_archetypes > self.n_customers:
            raise ValueError("n_archetypes may not exceed n_customers")
        if not 0 <= self.rng_seed < 2**64:
            raise ValueError("rng_seed must be an unsigned 64-bit integer")


def _parse_record(obj: dict, lineno: int, n_categories: int | None) -> CustomerRecord:
    if not isinstance(obj, dict):
        raise DataError(f"line {lineno}: expected a JSON object")
    if "customer_id" not in obj:
        raise DataError(f"line {lineno}: missing customer_id")
    cid = obj["customer_id"]
    if not isinstance(cid, int) or isinstance(cid, bool) or cid < 0:
        raise DataError(f"line {lineno}: customer_id must be a non-negative integer")
    events = []
    for ev in obj.get("events", []):
        try:
            day, channel, cat, mag = ev
            day, cat, mag = int(day), int(cat), float(mag)
        except (TypeError, ValueError):
            raise DataError(f"line {lineno}: malformed event {ev!r}") from None
        if channel not in CHANNELS:
            raise DataError(f"line {lineno}: unknown channel {channel!r}")
        if cat < 0 or (n_categories is not None and cat >= n_categories):
            raise DataError(f"line {lineno}: category index {cat} out of range")
        if not mag > 0:
            raise DataError(f"line {lineno}: event magnitude must be positive")
        events.append((day, channel, cat, mag))
    demographics = obj.get("demographics", {})
    dense_stats = obj.get("dense_stats", {})
    location = obj.get("location_text", "")
    if not isinstance(demographics, dict) or not isinstance(dense_stats, dict):
        raise DataError(f"line {lineno}: demographics and dense_stats must be objects")
    if not isinstance(location, str):
        raise DataError(f"line {lineno}: location_text must be a string")
    return CustomerRecord(
        customer_id=cid,
        events=events,
        demographics={str(k): str(v) for k, v in demographics.items()},
        dense_stats={str(k): float(v) for k, v in dense_stats.items()},
        location_text=location,
    )


def load_customers(path: str | Path, n_categories: int | None = None) -> list[CustomerRecord]:
    """Read a JSONL universe file. Blank lines count toward line numbers but yield nothing."""
    records = []
    seen: set[int] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            rec = _parse_record(obj, lineno, n_categories)
            if rec.customer_id in seen:
                raise DataError(f"duplicate customer_id {rec.customer_id} (line {lineno})")
            seen.add(rec.customer_id)
            records.append(rec)
    return records


def save_customers(records: Iterable[CustomerRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json())
            fh.write("\n")


def n_categories_of(records: Sequence[CustomerRecord]) -> int:
    """Smallest category count consistent with the observed events."""
    top = -1
    for rec in records:
        for _, _, cat, _ in rec.events:
            top = max(top, cat)
    return top + 1


def activity_vector(
    record: CustomerRecord, channel: str, window: TimeWindow, n_categories: int
) -> np.ndarray:
    """Per-category sum of event magnitudes for one channel inside ``window``."""
    out = np.zeros(n_categories)
    for day, ch, cat, mag in record.events:
        if ch == channel and window.start_day <= day < window.end_day:
            out[cat] += mag
    return out


def activity_matrix(
    records: Sequence[CustomerRecord], channel: str, window: TimeWindow, n_categories: int
) -> np.ndarray:
    """Row i is ``activity_vector(records[i], ...)``."""
    out = np.zeros((len(records), n_categories))
    lo, hi = window.start_day, window.end_day
    for i, rec in enumerate(records):
        row = out[i]
        for day, ch, cat, mag in rec.events:
            if ch == channel and lo <= day < hi:
                row[cat] += mag
    return out


@dataclass(frozen=True)
class WindowedView:
    """All records, with event aggregation restricted to ``window``."""

    records: Sequence[CustomerRecord]
    window: TimeWindow

    @property
    def customer_ids(self) -> list[int]:
        return [r.customer_id for r in self.records]


def time_split(
    records: Sequence[CustomerRecord], train_window: TimeWindow, eval_window: TimeWindow
) -> tuple[WindowedView, WindowedView]:
    if train_window.end_day > eval_window.start_day:
        raise ValueError(
            f"train window {train_window} overlaps or follows eval window {eval_window}"
        )
    return WindowedView(records, train_window), WindowedView(records, eval_window)


# --- synthetic universe -----------------------------------------------------

_SYLLABLES = (
    "ash", "bel", "cor", "dun", "el", "fair", "glen", "har", "iver", "jas", "kel",
    "lin", "mar", "nor", "oak", "pel", "quin", "ros", "sal", "tor", "ul", "ven",
    "wes", "yar", "zen", "brook", "field", "ford", "ham", "ton", "ville", "wood",
)
_STREETS = (
    "main", "oak", "pine", "maple", "cedar", "elm", "washington", "lake", "hill",
    "park", "walnut", "sunset", "river", "church", "spring", "highland",
)
_SUFFIXES = ("st", "ave", "rd", "blvd", "ln", "dr", "ct", "way")
_GENDERS = ("female", "male", "unspecified")
_EDUCATION = ("high_school", "some_college", "bachelor", "graduate")
_OCCUPATIONS = (
    "professional", "service", "sales", "technical", "student", "retired",
    "manual", "self_employed",
)
_CITIES_PER_REGION = 6
# Expected events per customer-day, per channel.
_BASE_RATES = {"transaction": 0.3, "visit": 0.06, "engagement": 0.02}
# Dirichlet concentration of archetype propensities (lower = sparser) and
# how tightly customers follow their archetype (higher = tighter).
_ARCHETYPE_ALPHA = 0.2
_CUSTOMER_CONCENTRATION = 150.0


def _city_name(region: int, j: int) -> str:
    n = len(_SYLLABLES)
    k = region * _CITIES_PER_REGION + j
    return _SYLLABLES[k % n] + _SYLLABLES[(7 * k + 3) % n] + str(k)


def location_vocabulary(n_archetypes: int) -> dict[str, list[str]]:
    """Token groups used by the generator: one city list and one state per region."""
    return {
        "cities": [
            _city_name(r, j) for r in range(n_archetypes) for j in range(_CITIES_PER_REGION)
        ],
        "states": [f"st{r}" for r in range(n_archetypes)],
        "streets": list(_STREETS),
        "suffixes": list(_SUFFIXES),
    }


def generate_synthetic(config: SynthConfig) -> list[CustomerRecord]:
    """Archetype mixture universe.

    Each archetype has Dirichlet category propensities; customers perturb
    their archetype's propensities and draw Poisson event counts across the
    day range. Demographics lean weakly on the archetype. With
    ``location_informative`` the city comes (mostly) from the archetype's own
    region, so location text predicts activity similarity.
    """
    rng = np.random.default_rng(config.rng_seed)
    n_cat, n_arch = config.n_categories, config.n_archetypes
    lo, hi = config.day_range.start_day, config.day_range.end_day
    n_days = hi - lo

    propensity = rng.dirichlet(np.full(n_cat, _ARCHETYPE_ALPHA), size=n_arch)
    arch_rate = np.exp(rng.normal(0.0, 0.35, size=(n_arch, len(CHANNELS))))
    price = np.exp(rng.normal(3.0, 0.6, size=n_cat))
    edu_pref = rng.dirichlet(np.full(len(_EDUCATION), 1.0), size=n_arch)
    occ_pref = rng.dirichlet(np.full(len(_OCCUPATIONS), 0.7), size=n_arch)
    cities = [
        [_city_name(r, j) for j in range(_CITIES_PER_REGION)] for r in range(n_arch)
    ]

    records = []
    for cid in range(config.n_customers):
        arch = int(rng.integers(n_arch))
        own = rng.dirichlet(_CUSTOMER_CONCENTRATION * propensity[arch] + 0.02)
        activity = np.exp(rng.normal(0.0, 0.4))
        events: dict[tuple[int, str, int], float] = {}
        totals = {}
        for c, channel in enumerate(CHANNELS):
            lam = _BASE_RATES[channel] * arch_rate[arch, c] * activity * n_days
            count = int(rng.poisson(lam))
            totals[channel] = count
            if count == 0:
                continue
            days = rng.integers(lo, hi, size=count)
            cats = rng.choice(n_cat, size=count, p=own)
            for d, k in zip(days.tolist(), cats.tolist()):
                key = (d, channel, k)
                events[key] = events.get(key, 0.0) + 1.0
        ev_list = [(d, ch, k, m) for (d, ch, k), m in sorted(events.items())]

        gmv = 0.0
        for d, ch, k, m in ev_list:
            if ch == "transaction":
                gmv += m * price[k]
        n_orders = totals["transaction"]
        dense = {
            "order_count": float(n_orders),
            "gmv": round(gmv, 2),
            "avg_order_value": round(gmv / n_orders, 2) if n_orders else 0.0,
            "visit_count": float(totals["visit"]),
            "engagement_count": float(totals["engagement"]),
        }
        demo = {
            "gender": _GENDERS[int(rng.integers(len(_GENDERS)))],
            "education": _EDUCATION[int(rng.choice(len(_EDUCATION), p=edu_pref[arch]))],
            "occupation": _OCCUPATIONS[int(rng.choice(len(_OCCUPATIONS), p=occ_pref[arch]))],
        }
        if config.location_informative and rng.random() < 0.9:
            region = arch
        else:
            region = int(rng.integers(n_arch))
        city = cities[region][int(rng.integers(_CITIES_PER_REGION))]
        street = _STREETS[int(rng.integers(len(_STREETS)))]
        suffix = _SUFFIXES[int(rng.integers(len(_SUFFIXES)))]
        number = int(rng.integers(1, 9999))
        zipcode = f"{region % 10}{int(rng.integers(10000)):04d}"
        location = f"{number} {street.title()} {suffix.title()}, {city.title()}, ST{region} {zipcode}"
        records.append(CustomerRecord(cid, ev_list, demo, dense, location))
    return records


def synthetic_word_vectors(n_archetypes: int, dim: int = 32, rng_seed: int = 0):
    """A stand-in for a pretrained word-vector release.

    Cities and states of one region sit near a shared region direction, the
    way real pretrained vectors cluster geographically related names. Street
    names and suffixes are unrelated random directions.
    """
    from .features import WordVectorTable

    rng = np.random.default_rng(rng_seed)
    vocab = location_vocabulary(n_archetypes)
    region_centers = rng.normal(0.0, 1.0, size=(n_archetypes, dim))
    entries: dict[str, np.ndarray] = {}
    for i, city in enumerate(vocab["cities"]):
        region = i // _CITIES_PER_REGION
        entries[city] = region_centers[region] + 0.5 * rng.normal(size=dim)
    for r, state in enumerate(vocab["states"]):
        entries[state] = region_centers[r] + 0.5 * rng.normal(size=dim)
    for tok in vocab["streets"] + vocab["suffixes"]:
        entries[tok] = rng.normal(0.0, 1.0, size=dim)
    return WordVectorTable(dim, {k: np.round(v, 6) for k, v in entries.items()})
