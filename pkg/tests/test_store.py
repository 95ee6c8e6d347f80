import sqlite3
from dataclasses import replace

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from reprokit.errors import (
    ConflictError,
    NotFoundError,
    SchemaVersionError,
    StoreIOError,
    UsageError,
    ValidationError,
)
from reprokit.model import ArtifactRole, DataArtifact, Parameter
from reprokit.store import TABLES, ConsumeEdge, TrialRecord, init_store, open_store

from conftest import make_manifest, sha


def artifact(path, data, role=ArtifactRole.output):
    return DataArtifact(path, role, sha(data), len(data))


def trial(trial_id="T1", started="2024-03-01T10:00:00Z", finished="2024-03-01T10:00:05Z", **overrides):
    fields = dict(
        trial_id=trial_id,
        manifest=make_manifest(),
        command=("Rscript", "setup.R", "--seed", "512"),
        started_at=started,
        finished_at=finished,
        exit_code=0,
        consume_edges=(
            ConsumeEdge(artifact("occ.csv", b"occ", ArtifactRole.input), frozenset({Parameter("seed", "512")})),
        ),
        produce_edges=(artifact("out/sdmdata.txt", b"sdm"), artifact("out/log.txt", b"log")),
        notes="first run",
    )
    fields.update(overrides)
    return TrialRecord(**fields)


@pytest.fixture
def store(tmp_path):
    return init_store(tmp_path)


def test_fresh_store_has_eleven_tables(tmp_path):
    store = init_store(tmp_path)
    assert store.path == tmp_path / "provenance.db"
    assert store.path.is_file()
    assert set(store.table_names()) == set(TABLES)
    assert len(TABLES) == 11


def test_init_is_idempotent(store):
    store.record_trial(trial())
    again = init_store(store.path)
    assert again.get_trial("T1") == trial()


def test_init_unwritable_location(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(StoreIOError) as err:
        init_store(blocker / "provenance.db")
    assert err.value.exit_code == 3


def test_schema_version_mismatch(tmp_path):
    store = init_store(tmp_path)
    conn = sqlite3.connect(store.path)
    conn.execute("PRAGMA user_version = 7")
    conn.close()
    with pytest.raises(SchemaVersionError):
        init_store(store.path)


def test_open_store_requires_existing(tmp_path):
    with pytest.raises(StoreIOError):
        open_store(tmp_path / "missing.db")


def test_record_counts(store):
    store.record_trial(trial())
    counts = store.row_counts()
    assert counts["trial"] == 1
    assert counts["consume"] == 1
    assert counts["produce"] == 2


def test_record_zero_outputs(store):
    store.record_trial(trial(produce_edges=()))
    assert store.row_counts()["produce"] == 0
    assert store.list_trials()[0].produced == 0


def test_duplicate_trial_conflicts(store):
    store.record_trial(trial())
    before = store.row_counts()
    with pytest.raises(ConflictError):
        store.record_trial(trial(notes="again"))
    assert store.row_counts() == before


def test_entities_are_deduplicated(store):
    store.record_trial(trial("T1"))
    store.record_trial(trial("T2", started="2024-03-02T10:00:00Z", finished="2024-03-02T10:00:01Z"))
    counts = store.row_counts()
    assert counts["trial"] == 2
    assert counts["hardware"] == 1
    assert counts["script_package"] == 2
    # occ.csv, sdmdata, log plus the manifest input data/occ.csv
    assert counts["data_artifact"] == 4


def test_get_trial_round_trip(store):
    t = trial()
    store.record_trial(t)
    assert store.get_trial("T1") == t
    assert store.get_trial("T1").to_dict() == t.to_dict()


def test_get_trial_unknown(store):
    store.record_trial(trial("01HV3K9Q2B"))
    with pytest.raises(NotFoundError) as err:
        store.get_trial("01HV3K9Q2C")
    assert err.value.near_misses == ["01HV3K9Q2B"]


def test_lineage_lists_inputs_and_parameters(store):
    store.record_trial(trial())
    chain = store.lineage("out/sdmdata.txt")
    assert chain.trial_id == "T1"
    assert chain.output == artifact("out/sdmdata.txt", b"sdm")
    assert [e.artifact.path for e in chain.consumed] == ["occ.csv"]
    assert chain.consumed[0].parameters == {Parameter("seed", "512")}
    assert chain.script == make_manifest().script
    assert chain.os == make_manifest().os
    assert chain.hardware == make_manifest().hardware
    assert chain.script_packages == make_manifest().script_packages


def test_lineage_unknown_path_suggests(store):
    store.record_trial(trial())
    with pytest.raises(NotFoundError) as err:
        store.lineage("out/sdmdata.tx")
    assert "out/sdmdata.txt" in err.value.near_misses


def test_lineage_prefers_later_trial(store):
    store.record_trial(trial("A", produce_edges=(artifact("out/sdmdata.txt", b"old"),)))
    store.record_trial(
        trial("B", "2024-03-02T00:00:00Z", "2024-03-02T00:00:01Z", produce_edges=(artifact("out/sdmdata.txt", b"new"),))
    )
    assert store.lineage("out/sdmdata.txt").trial_id == "B"
    assert store.lineage("out/sdmdata.txt").output.content_hash == sha(b"new")
    assert store.lineage("out/sdmdata.txt", "A").output.content_hash == sha(b"old")


def test_lineage_normalizes_separators(store):
    store.record_trial(trial())
    assert store.lineage("out\\sdmdata.txt").trial_id == "T1"


def test_list_trials_empty(store):
    assert store.list_trials() == []


def test_list_trials_newest_first(store):
    for i, day in enumerate(("01", "03", "02")):
        store.record_trial(trial(f"T{i}", f"2024-03-{day}T00:00:00Z", f"2024-03-{day}T00:00:01Z"))
    assert [t.started_at for t in store.list_trials()] == [
        "2024-03-03T00:00:00Z",
        "2024-03-02T00:00:00Z",
        "2024-03-01T00:00:00Z",
    ]


def test_list_trials_filters(store):
    other_script = replace(make_manifest().script, content_hash=sha(b"other"))
    store.record_trial(trial("T1", "2024-03-01T00:00:00Z", "2024-03-01T00:00:01Z"))
    store.record_trial(trial("T2", "2024-03-02T00:00:00Z", "2024-03-02T00:00:01Z"))
    store.record_trial(
        trial("T3", "2024-03-03T00:00:00Z", "2024-03-03T00:00:01Z", manifest=make_manifest(script=other_script))
    )
    assert [t.trial_id for t in store.list_trials(script_hash=sha(b"other"))] == ["T3"]
    assert [t.trial_id for t in store.list_trials(since="2024-03-02T00:00:00Z")] == ["T3", "T2"]
    assert [
        t.trial_id
        for t in store.list_trials(script_hash=make_manifest().script.content_hash, until="2024-03-01T12:00:00+00:00")
    ] == ["T1"]


def test_list_trials_summary_fields(store):
    t = trial()
    store.record_trial(t)
    (summary,) = store.list_trials()
    assert summary.trial_id == t.trial_id
    assert summary.command == t.command
    assert (summary.started_at, summary.finished_at, summary.exit_code) == (t.started_at, t.finished_at, 0)
    assert (summary.script_path, summary.script_hash) == (t.manifest.script.path, t.manifest.script.content_hash)
    assert (summary.consumed, summary.produced) == (1, 2)


def test_list_trials_bad_filter(store):
    with pytest.raises(UsageError):
        store.list_trials(since="yesterday")


def test_trial_validation():
    with pytest.raises(ValidationError):
        trial(started="2024-03-01T10:00:05Z", finished="2024-03-01T10:00:00Z")
    with pytest.raises(ValidationError):
        trial(produce_edges=(artifact("x", b"x", ArtifactRole.input),))
    with pytest.raises(ValidationError):
        trial(started="not a time")


def test_timestamps_normalized_to_utc():
    t = trial(started="2024-03-01T12:00:00+02:00", finished="2024-03-01T10:00:01Z")
    assert t.started_at == "2024-03-01T10:00:00Z"


def test_failed_insert_leaves_counts_unchanged(store):
    store.record_trial(trial())
    before = store.row_counts()
    with pytest.raises(ConflictError):
        store.record_trial(trial())
    with pytest.raises(ValidationError):
        store.record_trial("not a trial")
    assert store.row_counts() == before


def test_referential_integrity(store):
    store.record_trial(trial())
    conn = sqlite3.connect(store.path)
    for table in ("consume", "produce"):
        orphans = conn.execute(
            f"SELECT COUNT(*) FROM {table} e LEFT JOIN trial t ON t.trial_id = e.trial_id"
            f" LEFT JOIN data_artifact a ON a.id = e.artifact_id WHERE t.trial_id IS NULL OR a.id IS NULL"
        ).fetchone()[0]
        assert orphans == 0
    assert conn.execute("PRAGMA foreign_key_check").fetchall() == []
    conn.close()


def test_export_empty_store(store):
    import json

    dump = json.loads(store.export())
    assert dump["schema_version"] == 1
    assert sorted(dump["tables"]) == sorted(TABLES)
    assert all(rows == [] for rows in dump["tables"].values())


def test_export_import_export_fixed_point(store, tmp_path):
    store.record_trial(trial())
    store.record_trial(trial("T2", "2024-03-02T00:00:00Z", "2024-03-02T00:00:01Z", exit_code=1))
    first = store.export()
    fresh = init_store(tmp_path / "copy.db")
    fresh.import_dump(first)
    assert fresh.export() == first
    assert fresh.get_trial("T2") == store.get_trial("T2")


def test_export_contains_only_that_trial(store):
    import json

    store.record_trial(trial())
    dump = json.loads(store.export())
    assert [r["trial_id"] for r in dump["tables"]["trial"]] == ["T1"]
    assert {r["trial_id"] for r in dump["tables"]["produce"]} == {"T1"}


def test_import_requires_empty_store(store):
    store.record_trial(trial())
    with pytest.raises(UsageError):
        store.import_dump(store.export())


def test_import_rejects_other_schema(tmp_path):
    with pytest.raises(SchemaVersionError):
        init_store(tmp_path).import_dump('{"schema_version": 2, "tables": {}}')


_text = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=10)


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(
    notes=st.text(st.characters(blacklist_categories=("Cs",)), max_size=20),
    exit_code=st.integers(-255, 255),
    params=st.dictionaries(_text, _text, max_size=3),
    outputs=st.lists(st.binary(max_size=8), max_size=3),
)
def test_round_trip_property(tmp_path_factory, notes, exit_code, params, outputs):
    store = init_store(tmp_path_factory.mktemp("s"))
    t = trial(
        notes=notes,
        exit_code=exit_code,
        consume_edges=(
            ConsumeEdge(
                artifact("in.csv", b"in", ArtifactRole.input),
                frozenset(Parameter(k, v) for k, v in params.items()),
            ),
        ),
        produce_edges=tuple(artifact(f"out/{i}.bin", data) for i, data in enumerate(outputs)),
    )
    store.record_trial(t)
    assert store.get_trial(t.trial_id) == t
    dump = store.export()
    copy = init_store(tmp_path_factory.mktemp("c"))
    copy.import_dump(dump)
    assert copy.export() == dump
