import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.random import default_rng

from reefgauge.data import (
    AggregatedObservation,
    DataError,
    DeploymentRecord,
    EmptyTableError,
    IndicatorList,
    IndicatorSpecies,
    ObservationTable,
    RowError,
    SchemaError,
    aggregate,
    grid_table,
    parse_deployments,
)

INDICATORS = IndicatorList(
    (
        IndicatorSpecies("sp1", "bluebone", "barrambarr"),
        IndicatorSpecies("sp2", "rabbitfish", "barrbal"),
    )
)


def write_deployment_csv(path, rows, header=None):
    header = header or ["site", "year", "station_id", "species_code", "maxn", "usable"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def test_parse_65_rows_one_unusable(tmp_path):
    # 65 deployment rows (20 + 20 + 25 across three years), one flagged
    # unusable: all 65 parsed, 64 usable
    rows = []
    sites = ["siteA", "siteB", "siteC", "siteD"]
    for year in (2018, 2019, 2020):
        for site in sites + (["siteE"] if year == 2020 else []):
            for j in range(5):
                rows.append([site, year, f"{site}-{j + 1:02d}", "sp1", j, "true"])
    assert len(rows) == 65
    rows[7][5] = "false"
    path = tmp_path / "deployments.csv"
    write_deployment_csv(path, rows)

    records = parse_deployments(path)
    assert len(records) == 65
    assert sum(1 for r in records if r.usable) == 64
    assert all(isinstance(r, DeploymentRecord) for r in records)


def test_parse_empty_file_header_only(tmp_path):
    path = tmp_path / "empty.csv"
    write_deployment_csv(path, [])
    assert parse_deployments(path) == []


def test_parse_negative_count_reports_row(tmp_path):
    path = tmp_path / "bad.csv"
    write_deployment_csv(path, [["a", 2018, "a-01", "sp1", 3, "true"],
                                ["a", 2018, "a-01", "sp2", -1, "true"]])
    with pytest.raises(RowError, match="row 3"):
        parse_deployments(path)


def test_parse_non_integer_count(tmp_path):
    path = tmp_path / "bad.csv"
    write_deployment_csv(path, [["a", 2018, "a-01", "sp1", "3.5", "true"]])
    with pytest.raises(RowError):
        parse_deployments(path)


def test_parse_missing_column_names_it(tmp_path):
    path = tmp_path / "missing.csv"
    write_deployment_csv(path, [], header=["site", "year", "station_id", "species_code"])
    with pytest.raises(SchemaError, match="maxn"):
        parse_deployments(path)


def test_parse_schema_map_and_optional_usable(tmp_path):
    path = tmp_path / "renamed.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["location", "yr", "cam", "spp", "count"])
        writer.writerow(["reef1", 2018, "cam1", "sp1", 4])
    schema = {"site": "location", "year": "yr", "station_id": "cam",
              "species_code": "spp", "maxn": "count"}
    (record,) = parse_deployments(path, schema)
    assert record.usable is True
    assert record.count == 4
    with pytest.raises(SchemaError):
        parse_deployments(path, {"nonsense": "x"})


def records_for(site, year, station, counts: dict, usable=True):
    return [
        DeploymentRecord(site, year, station, code, n, usable)
        for code, n in counts.items()
    ]


def test_aggregate_sums_indicator_species_only():
    records = records_for("a", 2018, "a-01", {"sp1": 3, "sp2": 4, "other": 9})
    table = aggregate(records, INDICATORS)
    assert table.observations[0].a == 7


def test_aggregate_no_indicator_species_gives_zero():
    records = records_for("a", 2018, "a-01", {"other": 9})
    table = aggregate(records, INDICATORS)
    assert table.observations[0].a == 0


def test_aggregate_excludes_unusable_deployments():
    records = records_for("a", 2018, "a-01", {"sp1": 3}) + records_for(
        "a", 2018, "a-02", {"sp1": 5}, usable=False
    )
    table = aggregate(records, INDICATORS)
    assert len(table) == 1
    assert table.stations == ("a-01",)


def test_aggregate_all_unusable_raises():
    records = records_for("a", 2018, "a-01", {"sp1": 3}, usable=False)
    with pytest.raises(EmptyTableError):
        aggregate(records, INDICATORS)


def test_aggregate_duplicate_rows_rejected():
    records = records_for("a", 2018, "a-01", {"sp1": 3}) * 2
    with pytest.raises(DataError, match="duplicate"):
        aggregate(records, INDICATORS)


def test_site_year_pairs_single_year_site():
    # 5 sites x 3 years, but site "e" sampled in 2020 only -> 4*3 + 1 = 13 pairs
    records = []
    for site in "abcd":
        for year in (2018, 2019, 2020):
            records += records_for(site, year, f"{site}-01", {"sp1": 1})
    records += records_for("e", 2020, "e-01", {"sp1": 1})
    table = aggregate(records, INDICATORS)
    assert len(table.site_year_pairs) == 13
    assert table.years_of_site("e") == (2020,)


@settings(max_examples=25, deadline=None)
@given(st.randoms(use_true_random=False))
def test_aggregate_permutation_invariant(random):
    rng = default_rng(0)
    records = []
    for site in ("north", "south"):
        for year in (2018, 2019):
            for j in range(3):
                counts = {f"sp{k}": int(rng.integers(0, 10)) for k in range(1, 4)}
                records += records_for(site, year, f"{site}-{j}", counts)
    shuffled = records[:]
    random.shuffle(shuffled)
    assert aggregate(records, INDICATORS) == aggregate(shuffled, INDICATORS)


def test_total_equals_sum_of_usable_indicator_counts():
    rng = default_rng(3)
    records = []
    expected = 0
    for site in ("n", "s"):
        for j in range(4):
            usable = not (site == "s" and j == 3)
            counts = {f"sp{k}": int(rng.integers(0, 7)) for k in range(1, 4)}
            if usable:
                expected += counts["sp1"] + counts["sp2"]
            records += records_for(site, 2018, f"{site}-{j}", counts, usable=usable)
    table = aggregate(records, INDICATORS)
    assert table.counts().sum() == expected


def test_table_csv_round_trip(tmp_path, tiny_table):
    path = tmp_path / "table.csv"
    tiny_table.to_csv(path)
    assert ObservationTable.from_csv(path) == tiny_table


def test_table_index_membership_enforced():
    obs = (AggregatedObservation("a", 2018, "a-01", 2),)
    with pytest.raises(DataError):
        ObservationTable(obs, sites=("b",), years=(2018,), stations=("a-01",),
                         site_year_pairs=(("a", 2018),))


def test_identifiers_reject_reserved_separator(tmp_path):
    path = tmp_path / "bad_id.csv"
    write_deployment_csv(path, [["a:b", 2018, "a-01", "sp1", 1, "true"]])
    with pytest.raises(RowError):
        parse_deployments(path)


def test_grid_table_shape():
    table = grid_table(["a", "b"], [2018, 2019, 2020], 4)
    assert len(table) == 24
    assert len(table.stations) == 8
    assert table.stations_of_site("a") == ("a-01", "a-02", "a-03", "a-04")


def test_with_counts_validates_length(tiny_table):
    with pytest.raises(DataError):
        tiny_table.with_counts(np.zeros(3))


def test_indicator_list_json_round_trip(tmp_path):
    path = tmp_path / "indicators.json"
    INDICATORS.to_json(path)
    assert IndicatorList.from_json(path) == INDICATORS


def test_indicator_list_validation():
    with pytest.raises(DataError):
        IndicatorList(())
    with pytest.raises(DataError):
        IndicatorList((IndicatorSpecies("sp1"), IndicatorSpecies("sp1")))
