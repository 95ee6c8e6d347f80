import json
from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from reprokit.errors import NotFoundError
from reprokit.model import AccessFlags, ArtifactRole, DataArtifact, EntityKind, ReproLevel, ScriptPackage
from reprokit.store import TrialRecord
from reprokit.verify import (
    CHECK,
    CROSS,
    FileStatus,
    Verdict,
    compare_outputs,
    evaluate_reproduction,
    render_table,
)

from conftest import make_manifest, sha


def out(path, data):
    return DataArtifact(path, ArtifactRole.output, sha(data), len(data))


def trial(trial_id, outputs, manifest=None):
    return TrialRecord(
        trial_id=trial_id,
        manifest=manifest or make_manifest(),
        command=("Rscript", "setup.R"),
        started_at="2024-03-01T00:00:00Z",
        finished_at="2024-03-01T00:00:01Z",
        exit_code=0,
        produce_edges=tuple(out(p, d) for p, d in outputs.items()),
    )


ORIGINAL = trial("T1", {"sdmdata.txt": b"a", "plot.png": b"p"})


def test_identical_trials_repeatable():
    report = evaluate_reproduction(ORIGINAL, replace(ORIGINAL, trial_id="T2"))
    assert report.verdict is Verdict.Repeatable
    assert report.levels == set(ReproLevel)
    assert report.comparison.all_match


def test_statuses():
    cand = trial("T2", {"sdmdata.txt": b"b", "extra.csv": b"e"})
    rows = {f.path: f.status for f in compare_outputs(ORIGINAL, cand).per_file}
    assert rows == {
        "extra.csv": FileStatus.ExtraInCandidate,
        "plot.png": FileStatus.MissingInCandidate,
        "sdmdata.txt": FileStatus.Mismatch,
    }


def test_comparison_sorted_by_path():
    paths = [f.path for f in compare_outputs(ORIGINAL, ORIGINAL).per_file]
    assert paths == sorted(paths)


def test_watched_restricts_comparison():
    cand = trial("T2", {"sdmdata.txt": b"a", "plot.png": b"different"})
    report = evaluate_reproduction(ORIGINAL, cand, watched=["sdmdata.txt"])
    assert [f.path for f in report.comparison.per_file] == ["sdmdata.txt"]
    assert report.verdict is Verdict.Repeatable


def test_watched_separator_normalized():
    a = trial("T1", {"out/sdm.txt": b"a"})
    assert compare_outputs(a, a, watched=["out\\sdm.txt"]).all_match


def test_watched_unknown_path():
    with pytest.raises(NotFoundError) as err:
        compare_outputs(ORIGINAL, ORIGINAL, watched=["sdmdata.tx"])
    assert "sdmdata.txt" in err.value.near_misses


def test_matching_outputs_but_changed_environment():
    drift = make_manifest(script_packages=frozenset({ScriptPackage("raster", "3.6-0", "R")}))
    cand = trial("T2", {"sdmdata.txt": b"a", "plot.png": b"p"}, drift)
    report = evaluate_reproduction(ORIGINAL, cand)
    assert report.comparison.all_match
    assert EntityKind.ScriptPackages not in report.preserved
    assert report.verdict is Verdict.NotRepeatable


def test_access_flags_limit_levels():
    report = evaluate_reproduction(ORIGINAL, ORIGINAL, AccessFlags(script_accessible=False))
    assert report.levels == {ReproLevel.Repeatable, ReproLevel.ReRunnable, ReproLevel.Portable}


def test_render_table_marks():
    cand = trial("T2", {"sdmdata.txt": b"b", "plot.png": b"p"})
    text = render_table(evaluate_reproduction(ORIGINAL, cand))
    rows = text.splitlines()
    candidate_row = next(r for r in rows if "(candidate)" in r)
    assert candidate_row.count(CHECK) == 1 and candidate_row.count(CROSS) == 1
    assert "NotRepeatable" in candidate_row
    header = next(r for r in rows if r.startswith("| Trial"))
    assert header.index("plot.png") < header.index("sdmdata.txt")


def test_render_table_lists_changed_entities():
    drift = make_manifest(script_packages=frozenset())
    text = render_table(evaluate_reproduction(ORIGINAL, trial("T2", {}, drift)))
    assert "changed:   ScriptPackages" in text


def test_report_json_byte_stable():
    cand = trial("T2", {"sdmdata.txt": b"b"})
    first = evaluate_reproduction(ORIGINAL, cand).to_json()
    assert evaluate_reproduction(ORIGINAL, cand).to_json() == first
    data = json.loads(first)
    assert data["verdict"] == "NotRepeatable"
    assert first == json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n"


_files = st.dictionaries(st.sampled_from(["a", "b", "c", "d/e"]), st.binary(max_size=3), max_size=4)


@given(_files, _files)
def test_verdict_invariant(a, b):
    report = evaluate_reproduction(trial("T1", a), trial("T2", b))
    expected = a == b
    assert (report.verdict is Verdict.Repeatable) == expected
    assert report.comparison.all_match == expected
