"""Ingestion and aggregation of BRUVS deployment records.

A deployment is one baited-camera drop identified by (site, year, station).
Raw records carry one MaxN count per species per deployment; the modelled
response A is the sum of MaxN over a configured indicator-species list.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Problem with input data. The CLI maps these to exit code 3."""


class SchemaError(DataError):
    """A required column is missing or the schema map is malformed."""


class RowError(DataError):
    """A specific data row is invalid; carries the 1-based row number."""

    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class EmptyTableError(DataError):
    """Aggregation produced no usable deployments."""


# Canonical column names; a schema map may rename any of them.
DEFAULT_COLUMNS = {
    "site": "site",
    "year": "year",
    "station_id": "station_id",
    "species_code": "species_code",
    "maxn": "maxn",
    "usable": "usable",
}

_TRUE = {"true", "t", "1", "yes", "y"}
_FALSE = {"false", "f", "0", "no", "n"}

# ":" is reserved as the site:year separator in parameter names.
_FORBIDDEN_ID_CHARS = ":"


def _check_identifier(value: str, what: str, row: int | None = None) -> str:
    value = value.strip()
    if not value:
        msg = f"empty {what}"
        raise RowError(row, msg) if row is not None else DataError(msg)
    if any(c in value for c in _FORBIDDEN_ID_CHARS):
        msg = f"{what} {value!r} may not contain {_FORBIDDEN_ID_CHARS!r}"
        raise RowError(row, msg) if row is not None else DataError(msg)
    return value


@dataclass(frozen=True)
class DeploymentRecord:
    """One species count from one deployment."""

    site: str
    year: int
    station_id: str
    species_code: str
    count: int
    usable: bool = True


@dataclass(frozen=True)
class IndicatorSpecies:
    species_code: str
    common_name: str = ""
    local_name: str = ""


@dataclass(frozen=True)
class IndicatorList:
    """Ordered list of indicator species whose MaxN values are summed into A."""

    entries: tuple[IndicatorSpecies, ...]

    def __post_init__(self):
        if not self.entries:
            raise DataError("indicator list is empty")
        codes = [e.species_code for e in self.entries]
        if len(set(codes)) != len(codes):
            raise DataError("indicator list has duplicate species codes")

    @property
    def codes(self) -> frozenset[str]:
        return frozenset(e.species_code for e in self.entries)

    @classmethod
    def from_json(cls, path: str | Path) -> "IndicatorList":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"indicator file {path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, list):
            raise DataError(f"indicator file {path}: expected a JSON array")
        entries = []
        for item in raw:
            if "species_code" not in item:
                raise DataError(f"indicator file {path}: entry missing species_code")
            entries.append(
                IndicatorSpecies(
                    species_code=str(item["species_code"]),
                    common_name=str(item.get("common_name", "")),
                    local_name=str(item.get("local_name", "")),
                )
            )
        return cls(tuple(entries))

    def to_json(self, path: str | Path) -> None:
        payload = [
            {
                "species_code": e.species_code,
                "common_name": e.common_name,
                "local_name": e.local_name,
            }
            for e in self.entries
        ]
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


@dataclass(frozen=True)
class AggregatedObservation:
    """One deployment with its summed indicator response A."""

    site: str
    year: int
    station_id: str
    a: int


@dataclass(frozen=True)
class ObservationTable:
    """Immutable aggregated dataset plus the ordered index lists the model uses.

    Index lists are sorted so parameter vectors are reproducible across runs.
    Observations are sorted by (site, year, station_id).
    """

    observations: tuple[AggregatedObservation, ...]
    sites: tuple[str, ...]
    years: tuple[int, ...]
    stations: tuple[str, ...]
    site_year_pairs: tuple[tuple[str, int], ...]

    def __post_init__(self):
        for name in ("sites", "years", "stations", "site_year_pairs"):
            values = getattr(self, name)
            if len(set(values)) != len(values):
                raise DataError(f"{name} contains duplicates")
            if list(values) != sorted(values):
                raise DataError(f"{name} is not sorted")
        site_set, year_set = set(self.sites), set(self.years)
        station_set, pair_set = set(self.stations), set(self.site_year_pairs)
        seen = set()
        for obs in self.observations:
            if obs.a < 0:
                raise DataError(f"negative response for {obs.station_id}")
            key = (obs.site, obs.year, obs.station_id)
            if key in seen:
                raise DataError(f"duplicate deployment {key}")
            seen.add(key)
            if obs.site not in site_set:
                raise DataError(f"site {obs.site!r} missing from site index")
            if obs.year not in year_set:
                raise DataError(f"year {obs.year} missing from year index")
            if obs.station_id not in station_set:
                raise DataError(f"station {obs.station_id!r} missing from station index")
            if (obs.site, obs.year) not in pair_set:
                raise DataError(f"pair {(obs.site, obs.year)} missing from pair index")

    @classmethod
    def from_observations(
        cls, observations: "list[AggregatedObservation] | tuple[AggregatedObservation, ...]"
    ) -> "ObservationTable":
        obs = tuple(sorted(observations, key=lambda o: (o.site, o.year, o.station_id)))
        return cls(
            observations=obs,
            sites=tuple(sorted({o.site for o in obs})),
            years=tuple(sorted({o.year for o in obs})),
            stations=tuple(sorted({o.station_id for o in obs})),
            site_year_pairs=tuple(sorted({(o.site, o.year) for o in obs})),
        )

    def __len__(self) -> int:
        return len(self.observations)

    def counts(self) -> np.ndarray:
        return np.array([o.a for o in self.observations], dtype=np.int64)

    def design_indices(self) -> dict[str, np.ndarray]:
        """Integer index vectors into the station/site/year/pair lists."""
        station_pos = {v: i for i, v in enumerate(self.stations)}
        site_pos = {v: i for i, v in enumerate(self.sites)}
        year_pos = {v: i for i, v in enumerate(self.years)}
        pair_pos = {v: i for i, v in enumerate(self.site_year_pairs)}
        return {
            "station": np.array([station_pos[o.station_id] for o in self.observations], dtype=np.intp),
            "site": np.array([site_pos[o.site] for o in self.observations], dtype=np.intp),
            "year": np.array([year_pos[o.year] for o in self.observations], dtype=np.intp),
            "pair": np.array([pair_pos[(o.site, o.year)] for o in self.observations], dtype=np.intp),
        }

    def stations_of_site(self, site: str) -> tuple[str, ...]:
        return tuple(sorted({o.station_id for o in self.observations if o.site == site}))

    def years_of_site(self, site: str) -> tuple[int, ...]:
        return tuple(sorted({o.year for o in self.observations if o.site == site}))

    def with_counts(self, a: np.ndarray) -> "ObservationTable":
        """Same design, new response vector (used by simulation)."""
        a = np.asarray(a)
        if a.shape != (len(self.observations),):
            raise DataError(f"expected {len(self.observations)} counts, got {a.shape}")
        obs = tuple(
            AggregatedObservation(o.site, o.year, o.station_id, int(v))
            for o, v in zip(self.observations, a)
        )
        return ObservationTable(
            observations=obs,
            sites=self.sites,
            years=self.years,
            stations=self.stations,
            site_year_pairs=self.site_year_pairs,
        )

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["site", "year", "station_id", "a"])
            for o in self.observations:
                writer.writerow([o.site, o.year, o.station_id, o.a])

    @classmethod
    def from_csv(cls, path: str | Path) -> "ObservationTable":
        observations = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            required = {"site", "year", "station_id", "a"}
            if reader.fieldnames is None or not required.issubset(reader.fieldnames):
                raise SchemaError(f"aggregated CSV must have columns {sorted(required)}")
            for i, row in enumerate(reader, start=2):
                observations.append(
                    AggregatedObservation(
                        site=row["site"],
                        year=_parse_int(row["year"], "year", i),
                        station_id=row["station_id"],
                        a=_parse_count(row["a"], "a", i),
                    )
                )
        return cls.from_observations(observations)


def _parse_int(text: str, what: str, row: int) -> int:
    try:
        return int(text.strip())
    except (ValueError, AttributeError):
        raise RowError(row, f"{what} {text!r} is not an integer") from None


def _parse_count(text: str, what: str, row: int) -> int:
    value = _parse_int(text, what, row)
    if value < 0:
        raise RowError(row, f"{what} {value} is negative")
    return value


def _parse_bool(text: str, row: int) -> bool:
    lowered = text.strip().lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise RowError(row, f"usable flag {text!r} is not a boolean")


def parse_deployments(
    csv_path: str | Path, schema: dict[str, str] | None = None
) -> list[DeploymentRecord]:
    """Read per-species deployment rows from a CSV file.

    ``schema`` optionally renames the canonical columns
    (site, year, station_id, species_code, maxn, usable). The usable column
    is optional and defaults to true. Rows flagged unusable are kept but
    marked, so aggregation can exclude the whole deployment.
    """
    columns = dict(DEFAULT_COLUMNS)
    if schema:
        unknown = set(schema) - set(DEFAULT_COLUMNS)
        if unknown:
            raise SchemaError(f"schema maps unknown fields: {sorted(unknown)}")
        columns.update(schema)

    path = Path(csv_path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")

    records: list[DeploymentRecord] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for field in ("site", "year", "station_id", "species_code", "maxn"):
            if columns[field] not in header:
                raise SchemaError(f"missing column {columns[field]!r} (for {field})")
        has_usable = columns["usable"] in header
        for i, row in enumerate(reader, start=2):
            usable = _parse_bool(row[columns["usable"]], i) if has_usable else True
            records.append(
                DeploymentRecord(
                    site=_check_identifier(row[columns["site"]], "site", i),
                    year=_parse_int(row[columns["year"]], "year", i),
                    station_id=_check_identifier(row[columns["station_id"]], "station_id", i),
                    species_code=_check_identifier(row[columns["species_code"]], "species_code", i),
                    count=_parse_count(row[columns["maxn"]], "maxn", i),
                    usable=usable,
                )
            )
    return records


def load_schema(path: str | Path) -> dict[str, str]:
    """Read a JSON sidecar mapping canonical column names to file columns."""
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in raw.items()
    ):
        raise SchemaError(f"schema file {path} must map column names to column names")
    return raw


def aggregate(records: "list[DeploymentRecord]", indicators: IndicatorList) -> ObservationTable:
    """Sum indicator-species MaxN per usable deployment into the response A.

    Species absent from a deployment contribute zero (an observed absence,
    not missing data). A deployment with any row flagged unusable is
    excluded entirely.
    """
    seen_rows: set[tuple[str, int, str, str]] = set()
    deployments: dict[tuple[str, int, str], int] = {}
    unusable: set[tuple[str, int, str]] = set()
    codes = indicators.codes

    for rec in records:
        if rec.count < 0:
            raise DataError(f"negative count for {rec.species_code} at {rec.station_id}")
        row_key = (rec.site, rec.year, rec.station_id, rec.species_code)
        if row_key in seen_rows:
            raise DataError(f"duplicate record {row_key}")
        seen_rows.add(row_key)
        key = (rec.site, rec.year, rec.station_id)
        if not rec.usable:
            unusable.add(key)
        deployments.setdefault(key, 0)
        if rec.species_code in codes:
            deployments[key] += rec.count

    observations = [
        AggregatedObservation(site=k[0], year=k[1], station_id=k[2], a=total)
        for k, total in deployments.items()
        if k not in unusable
    ]
    if not observations:
        raise EmptyTableError("no usable deployments after aggregation")
    return ObservationTable.from_observations(observations)


def grid_table(
    sites: "list[str] | tuple[str, ...]",
    years: "list[int] | tuple[int, ...]",
    stations_per_site: int,
    counts: np.ndarray | None = None,
) -> ObservationTable:
    """Build a fully crossed site x year design with per-site stations.

    Convenience constructor for simulations and examples; counts default
    to zero and can be filled with :meth:`ObservationTable.with_counts`.
    """
    observations = []
    for site in sites:
        for year in years:
            for j in range(stations_per_site):
                observations.append(
                    AggregatedObservation(site, int(year), f"{site}-{j + 1:02d}", 0)
                )
    table = ObservationTable.from_observations(observations)
    if counts is not None:
        table = table.with_counts(counts)
    return table
