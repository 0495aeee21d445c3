"""EMA cohort data handling.

Self-ratings arrive on a 1-10 scale, possibly several times per day and with
many gaps. This module normalizes ratings to [0, 1], aggregates them to daily
means, reads and writes the cohort CSV format, splits client series into
contiguous train/test/validation windows, and synthesizes cohorts from a
known ground-truth model for benchmarking.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from datetime import date, datetime
from typing import Iterable, Optional, Sequence, TextIO

import numpy as np

from .errors import ParseError, ValidationError

DEFAULT_CONCEPTS = (
    "Mood",
    "Worry",
    "Self-Esteem",
    "Sleep",
    "Activities done",
    "Enjoyed activities",
    "Social contact",
)

RAW_MIN = 1.0
RAW_MAX = 10.0


def normalize_rating(raw: float) -> float:
    """Map a raw 1-10 rating onto [0, 1]."""
    if not np.isfinite(raw) or raw < RAW_MIN or raw > RAW_MAX:
        raise ValidationError(f"rating {raw!r} outside the [1, 10] scale")
    return (raw - RAW_MIN) / (RAW_MAX - RAW_MIN)


def denormalize_rating(value: float) -> float:
    """Inverse of :func:`normalize_rating`."""
    if not np.isfinite(value) or value < 0.0 or value > 1.0:
        raise ValidationError(f"normalized value {value!r} outside [0, 1]")
    return value * (RAW_MAX - RAW_MIN) + RAW_MIN


@dataclass(frozen=True)
class ConceptCatalog:
    """Ordered set of concept labels; fixes the dimension K of everything else."""

    names: tuple[str, ...] = DEFAULT_CONCEPTS

    def __post_init__(self):
        if len(self.names) < 2:
            raise ValidationError("catalog needs at least 2 concepts")
        if any(not isinstance(n, str) or not n.strip() for n in self.names):
            raise ValidationError("concept names must be non-empty strings")
        if len(set(self.names)) != len(self.names):
            raise ValidationError("concept names must be unique")

    @property
    def k(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError(f"unknown concept {name!r}") from None


@dataclass(frozen=True)
class Observation:
    """One day of per-concept values in [0, 1]; None marks a missing entry."""

    day: int
    values: tuple[Optional[float], ...]

    def __post_init__(self):
        if self.day < 0:
            raise ValidationError(f"day index {self.day} is negative")
        for v in self.values:
            if v is not None and not (0.0 <= v <= 1.0):
                raise ValidationError(f"value {v!r} outside [0, 1] on day {self.day}")


@dataclass(frozen=True)
class ClientSeries:
    """Day-ordered observations for one client.

    Day indices must be strictly increasing; gaps are fine. Segments produced
    by splitting may be empty or fully missing, so presence of data is checked
    at ingestion (parse/aggregate/generate), not here.
    """

    client_id: str
    observations: tuple[Observation, ...]

    def __post_init__(self):
        if not self.client_id:
            raise ValidationError("client_id must be non-empty")
        days = [o.day for o in self.observations]
        if any(b <= a for a, b in zip(days, days[1:])):
            raise ValidationError(f"client {self.client_id}: days not strictly increasing")
        ks = {len(o.values) for o in self.observations}
        if len(ks) > 1:
            raise ValidationError(f"client {self.client_id}: inconsistent concept counts")

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def first_day(self) -> int:
        return self.observations[0].day

    @property
    def last_day(self) -> int:
        return self.observations[-1].day

    @property
    def span_days(self) -> int:
        """Number of calendar days covered, first to last inclusive; 0 if empty."""
        return 0 if not self.observations else self.last_day - self.first_day + 1

    def has_any_present(self) -> bool:
        return any(v is not None for o in self.observations for v in o.values)

    def to_matrix(self, k: int, first_day: int | None = None, n_days: int | None = None) -> np.ndarray:
        """Dense (n_days, k) float matrix with NaN for missing cells."""
        if first_day is None:
            first_day = self.first_day if self.observations else 0
        if n_days is None:
            n_days = self.span_days
        out = np.full((n_days, k), np.nan)
        for obs in self.observations:
            row = obs.day - first_day
            if 0 <= row < n_days:
                for j, v in enumerate(obs.values):
                    if v is not None:
                        out[row, j] = v
        return out

    def last_observed(self, k: int) -> np.ndarray:
        """Most recent present value per concept; NaN where never observed."""
        out = np.full(k, np.nan)
        for obs in self.observations:
            for j, v in enumerate(obs.values):
                if v is not None:
                    out[j] = v
        return out

    def concept_means(self, k: int) -> np.ndarray:
        """Mean of present values per concept; NaN where never observed."""
        sums = np.zeros(k)
        counts = np.zeros(k)
        for obs in self.observations:
            for j, v in enumerate(obs.values):
                if v is not None:
                    sums[j] += v
                    counts[j] += 1
        with np.errstate(invalid="ignore"):
            return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


@dataclass(frozen=True)
class Cohort:
    catalog: ConceptCatalog
    clients: tuple[ClientSeries, ...]

    def __post_init__(self):
        ids = [c.client_id for c in self.clients]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate client ids in cohort")
        for c in self.clients:
            if c.observations and len(c.observations[0].values) != self.catalog.k:
                raise ValidationError(
                    f"client {c.client_id} has {len(c.observations[0].values)} concepts, "
                    f"catalog has {self.catalog.k}"
                )

    def __len__(self) -> int:
        return len(self.clients)


@dataclass(frozen=True)
class SplitSpec:
    """Contiguous chronological train/test/validation partition, in days."""

    train_days: int = 21
    test_days: int = 14
    validation_days: int = 7

    def __post_init__(self):
        if self.train_days < 21:
            raise ValidationError("train_days must be at least 21 (three weeks)")
        if self.test_days < 1 or self.validation_days < 1:
            raise ValidationError("test_days and validation_days must be at least 1")

    @property
    def total_days(self) -> int:
        return self.train_days + self.test_days + self.validation_days


def _parse_day(stamp) -> date:
    if isinstance(stamp, datetime):
        return stamp.date()
    if isinstance(stamp, date):
        return stamp
    if isinstance(stamp, str):
        try:
            return datetime.fromisoformat(stamp).date()
        except ValueError:
            try:
                return date.fromisoformat(stamp)
            except ValueError:
                pass
    raise ValidationError(f"unparseable timestamp {stamp!r}")


def aggregate_daily(
    measurements: Iterable[tuple[object, str, float]],
    catalog: ConceptCatalog | None = None,
    client_id: str = "client",
) -> ClientSeries:
    """Bucket raw (timestamp, concept, rating) rows into daily mean observations.

    Day 0 is the earliest calendar day present. A day/concept pair with no
    measurement stays missing; multiple same-day ratings are averaged with
    equal weight after normalization.
    """
    catalog = catalog or ConceptCatalog()
    sums: dict[tuple[date, int], float] = {}
    counts: dict[tuple[date, int], int] = {}
    for row_no, row in enumerate(measurements, start=1):
        try:
            stamp, concept, raw = row
            day = _parse_day(stamp)
            j = catalog.index(str(concept))
            value = normalize_rating(float(raw))
        except (ValidationError, TypeError, ValueError) as exc:
            raise ParseError(f"bad measurement row: {exc}", line=row_no) from exc
        key = (day, j)
        sums[key] = sums.get(key, 0.0) + value
        counts[key] = counts.get(key, 0) + 1
    if not sums:
        raise ValidationError(f"client {client_id}: no measurements")
    origin = min(d for d, _ in sums)
    by_day: dict[int, list[Optional[float]]] = {}
    for (day, j), total in sums.items():
        idx = (day - origin).days
        by_day.setdefault(idx, [None] * catalog.k)[j] = total / counts[(day, j)]
    observations = tuple(
        Observation(day=idx, values=tuple(by_day[idx])) for idx in sorted(by_day)
    )
    return ClientSeries(client_id=client_id, observations=observations)


def catalog_header(catalog: ConceptCatalog) -> list[str]:
    return ["client_id", "day", *catalog.names]


def parse_cohort_csv(source: str | TextIO, catalog: ConceptCatalog | None = None) -> Cohort:
    """Read a cohort from CSV text (or a text stream).

    Expected header: ``client_id,day,<concept names...>``. Cells hold raw
    1-10 ratings; empty cells are missing. When ``catalog`` is None the
    concept names are taken from the header.
    """
    stream = io.StringIO(source) if isinstance(source, str) else source
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty input, expected a header row", line=1) from None
    if len(header) < 4 or header[0] != "client_id" or header[1] != "day":
        raise ParseError(
            f"unknown header {header!r}, expected client_id,day,<concepts...>", line=1
        )
    parsed_catalog = ConceptCatalog(names=tuple(h for h in header[2:]))
    if catalog is not None and parsed_catalog.names != catalog.names:
        raise ParseError(
            f"header concepts {parsed_catalog.names!r} do not match expected "
            f"{catalog.names!r}",
            line=1,
        )
    catalog = catalog or parsed_catalog
    k = catalog.k

    order: list[str] = []
    rows_by_client: dict[str, dict[int, tuple[Optional[float], ...]]] = {}
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != k + 2:
            raise ParseError(f"expected {k + 2} cells, got {len(row)}", line=line_no)
        client_id = row[0]
        if not client_id:
            raise ParseError("empty client_id", line=line_no, column=1)
        try:
            day = int(row[1])
        except ValueError:
            raise ParseError(f"non-integer day {row[1]!r}", line=line_no, column=2) from None
        if day < 0:
            raise ParseError(f"negative day {day}", line=line_no, column=2)
        values: list[Optional[float]] = []
        for col, cell in enumerate(row[2:], start=3):
            if cell == "":
                values.append(None)
                continue
            try:
                values.append(normalize_rating(float(cell)))
            except (ValueError, ValidationError) as exc:
                raise ParseError(f"bad rating cell {cell!r}: {exc}", line=line_no, column=col) from exc
        if client_id not in rows_by_client:
            order.append(client_id)
            rows_by_client[client_id] = {}
        if day in rows_by_client[client_id]:
            raise ParseError(f"duplicate day {day} for client {client_id!r}", line=line_no)
        rows_by_client[client_id][day] = tuple(values)

    clients = []
    for client_id in order:
        days = rows_by_client[client_id]
        series = ClientSeries(
            client_id=client_id,
            observations=tuple(Observation(day=d, values=days[d]) for d in sorted(days)),
        )
        if not series.has_any_present():
            raise ValidationError(f"client {client_id}: no present values")
        clients.append(series)
    return Cohort(catalog=catalog, clients=tuple(clients))


def write_cohort_csv(cohort: Cohort) -> str:
    """Serialize a cohort back to the CSV format read by :func:`parse_cohort_csv`."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(catalog_header(cohort.catalog))
    for client in cohort.clients:
        for obs in client.observations:
            cells = [
                "" if v is None else repr(denormalize_rating(v)) for v in obs.values
            ]
            writer.writerow([client.client_id, obs.day, *cells])
    return out.getvalue()


def split_client(series: ClientSeries, spec: SplitSpec) -> tuple[ClientSeries, ClientSeries, ClientSeries]:
    """Partition a series into contiguous (train, test, validation) windows.

    Windows are counted in calendar days from the series' first day; days past
    the end of the validation window are dropped.
    """
    needed = spec.total_days
    if not series.observations or series.span_days < needed:
        raise ValidationError(
            f"client {series.client_id}: span {series.span_days} days, "
            f"split needs {needed}"
        )
    base = series.first_day
    buckets: tuple[list[Observation], list[Observation], list[Observation]] = ([], [], [])
    for obs in series.observations:
        offset = obs.day - base
        if offset < spec.train_days:
            buckets[0].append(obs)
        elif offset < spec.train_days + spec.test_days:
            buckets[1].append(obs)
        elif offset < needed:
            buckets[2].append(obs)
    return tuple(
        ClientSeries(client_id=series.client_id, observations=tuple(b)) for b in buckets
    )  # type: ignore[return-value]


def generate_synthetic_cohort(
    truth,
    n_clients: int,
    days: int,
    noise_sd: float,
    missing_rate: float,
    seed: int,
    catalog: ConceptCatalog | None = None,
    steps_per_day: int = 10,
) -> Cohort:
    """Simulate a cohort from a known model.

    Per client: initial state uniform in [0.2, 0.8] per concept, the model's
    noiseless daily trajectory (day 0 is the initial state), additive Gaussian
    observation noise clipped to [0, 1], then independent deletion of each cell
    with probability ``missing_rate``. Deterministic given the seed.
    """
    from .model import simulate

    catalog = catalog or ConceptCatalog()
    if truth.structure.k != catalog.k:
        raise ValidationError("truth model dimension does not match catalog")
    if n_clients < 1 or days < 1:
        raise ValidationError("need at least 1 client and 1 day")
    if noise_sd < 0:
        raise ValidationError("noise_sd must be non-negative")
    if not (0.0 <= missing_rate < 1.0):
        raise ValidationError("missing_rate must be in [0, 1)")

    rng = np.random.default_rng(seed)
    k = catalog.k
    width = max(2, len(str(n_clients)))
    clients = []
    for i in range(n_clients):
        init = rng.uniform(0.2, 0.8, size=k)
        if days > 1:
            traj = np.vstack([init, simulate(truth, init, days - 1, steps_per_day)])
        else:
            traj = init[None, :]
        noisy = np.clip(traj + rng.normal(0.0, noise_sd, size=traj.shape), 0.0, 1.0)
        missing = rng.random(size=traj.shape) < missing_rate
        observations = []
        for d in range(days):
            values = tuple(
                None if missing[d, j] else float(noisy[d, j]) for j in range(k)
            )
            observations.append(Observation(day=d, values=values))
        series = ClientSeries(client_id=f"c{i + 1:0{width}d}", observations=tuple(observations))
        if not series.has_any_present():
            raise ValidationError(
                f"client {series.client_id}: all values deleted, lower missing_rate"
            )
        clients.append(series)
    return Cohort(catalog=catalog, clients=tuple(clients))
