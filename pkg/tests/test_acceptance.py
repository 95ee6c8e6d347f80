"""Acceptance gate: one PASS/FAIL line per criterion, printed to the terminal.

Run alone with ``pytest tests/test_acceptance.py -s -q``.  Criterion 7 times
the rest of the suite in a subprocess, so keep it last in this file.
"""

import contextlib
import json
import os
import random
import subprocess
import sys
import threading
import time
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

import httpx
import pytest

from reprokit.bundle import pack
from reprokit.canonical import sha256_file
from reprokit.capture import CaptureConfig, run_captured
from reprokit.cli import main
from reprokit.fixture import ENM_DRIFT_VAR, ENM_INPUT, ENM_OUTPUT, ENM_SCRIPT, copy_enm_fixture
from reprokit.model import AccessFlags, EntityKind, Parameter, ReproLevel, UserInfo, classify_levels
from reprokit.publish import DepositStatus, PublicationMetadata, deposit, verify_publication
from reprokit.scan import language_for_path, scan_script
from reprokit.steps import init_experiment, package_experiment, publish_experiment
from reprokit.store import init_store

from conftest import FIXTURES

SUITE_START = time.perf_counter()
ALL = frozenset(EntityKind)
L = ReproLevel


@pytest.fixture
def criterion(capsys):
    @contextlib.contextmanager
    def check(number, title, budget):
        start = time.perf_counter()
        failure = None
        try:
            yield
        except Exception as exc:
            failure = exc
        elapsed = time.perf_counter() - start
        if failure is None and elapsed >= budget:
            failure = AssertionError(f"took {elapsed:.2f} s, budget {budget} s")
        verdict = "PASS" if failure is None else "FAIL"
        detail = "" if failure is None else f": {type(failure).__name__}: {failure}"
        with capsys.disabled():
            print(f"\n{verdict} criterion {number} ({title}) in {elapsed:.2f} s{detail}")
        if failure is not None:
            raise failure

    return check


def _init_enm(work, user="Ada"):
    config = CaptureConfig(
        script=ENM_SCRIPT,
        declared_inputs=[ENM_INPUT],
        parameters={"seed": "512"},
        interpreters={"Python": sys.executable},
        include=["enmtoy.py"],
    )
    return init_experiment(work, config, UserInfo(user))


def test_criterion_1_level_table(criterion):
    with criterion(1, "level table", 1):
        cases = [
            (ALL, AccessFlags(True, True), set(ReproLevel)),
            (ALL - {EntityKind.Inputs, EntityKind.Parameters}, AccessFlags(True, True), {L.ReRunnable, L.Extendable, L.Modifiable}),
            (
                {EntityKind.Inputs, EntityKind.Script, EntityKind.Functions, EntityKind.Parameters, EntityKind.ScriptPackages},
                AccessFlags(True, True),
                {L.Portable, L.Modifiable},
            ),
            (frozenset(), AccessFlags(False, False), set()),
        ]
        for preserved, access, expected in cases:
            assert classify_levels(frozenset(preserved), access) == expected


def _cli(*argv):
    return main([str(a) for a in argv])


def test_criterion_2_enm_reproduction(criterion, tmp_path, capsys, monkeypatch):
    with criterion(2, "restored ENM workflow: Repeatable, drift NotRepeatable", 30):
        work = copy_enm_fixture(tmp_path / "w")
        store = tmp_path / "provenance.db"
        assert _cli("-C", work, "init", ENM_SCRIPT, "--input", ENM_INPUT, "--param", "seed=512",
                    "--user", "Ada", "--include", "enmtoy.py", "--interpreter", f"Python={sys.executable}") == 0
        assert _cli("-C", work, "pack") == 0
        trials = {}
        for name, drift in (("r1", False), ("r2", False), ("r3", True)):
            assert _cli("-C", work, "restore", tmp_path / name) == 0
            if drift:
                monkeypatch.setenv(ENM_DRIFT_VAR, "1")
            capsys.readouterr()
            assert _cli("-C", tmp_path / name, "--store", store, "--json", "run", "--", sys.executable, ENM_SCRIPT) == 0
            trials[name] = json.loads(capsys.readouterr().out)
        hashes = {
            n: {a["path"]: a["content_hash"] for a in t["produce_edges"]}[ENM_OUTPUT] for n, t in trials.items()
        }
        assert hashes["r1"] == hashes["r2"] != hashes["r3"]
        assert hashes["r1"] == sha256_file(tmp_path / "r2" / ENM_OUTPUT)

        code = _cli("-C", tmp_path / "r1", "--store", store, "--json", "verify",
                    trials["r1"]["trial_id"], trials["r2"]["trial_id"], "--watch", ENM_OUTPUT)
        report = json.loads(capsys.readouterr().out)
        assert (code, report["verdict"]) == (0, "Repeatable")
        assert set(report["levels"]) == {lv.value for lv in ReproLevel}

        code = _cli("-C", tmp_path / "r1", "--store", store, "--json", "verify",
                    trials["r1"]["trial_id"], trials["r3"]["trial_id"], "--watch", ENM_OUTPUT)
        report = json.loads(capsys.readouterr().out)
        assert (code, report["verdict"]) == (1, "NotRepeatable")
        assert "ScriptPackages" not in report["preserved"]


def test_criterion_3_bundle_determinism(criterion, tmp_path, monkeypatch):
    with criterion(3, "bundle determinism", 5):
        work = copy_enm_fixture(tmp_path / "w")
        manifest = _init_enm(work)
        first, _ = pack(work, ["*"], manifest)
        second, _ = pack(work, ["*"], manifest)
        assert first == second

        # same files created in a shuffled order, enumerated in a shuffled order
        other = tmp_path / "shuffled"
        files = sorted(p for p in work.rglob("*") if p.is_file())
        random.Random(7).shuffle(files)
        for src in files:
            dest = other / src.relative_to(work)
            dest.parent.mkdir(parents=True, exist_ok=True)
            dest.write_bytes(src.read_bytes())
            os.chmod(dest, src.stat().st_mode)
        real_walk = os.walk
        rnd = random.Random(11)

        def shuffled_walk(top, *args, **kwargs):
            for current, dirs, names in real_walk(top, *args, **kwargs):
                rnd.shuffle(dirs)
                names = list(names)
                rnd.shuffle(names)
                yield current, dirs, names

        monkeypatch.setattr(os, "walk", shuffled_walk)
        third, _ = pack(other, ["*"], manifest)
        assert third == first


def test_criterion_4_provenance_round_trip(criterion, tmp_path):
    with criterion(4, "provenance round trip", 5):
        work = copy_enm_fixture(tmp_path / "w")
        _init_enm(work)
        store = init_store(tmp_path / "provenance.db")
        trial = run_captured(work, [sys.executable, ENM_SCRIPT], store)
        assert store.get_trial(trial.trial_id) == trial

        chain = store.lineage(ENM_OUTPUT)
        (output,) = trial.produce_edges
        assert chain.trial_id == trial.trial_id and chain.output == output
        assert chain.consumed == trial.consume_edges
        assert chain.consumed[0].parameters == {Parameter("seed", "512")}
        m = trial.manifest
        assert (chain.script, chain.os, chain.hardware, chain.script_packages) == (
            m.script, m.os, m.hardware, m.script_packages
        )

        (summary,) = store.list_trials()
        assert (summary.trial_id, summary.command, summary.exit_code) == (trial.trial_id, trial.command, trial.exit_code)
        assert (summary.started_at, summary.finished_at) == (trial.started_at, trial.finished_at)
        assert (summary.script_path, summary.script_hash) == (m.script.path, m.script.content_hash)
        assert (summary.consumed, summary.produced) == (1, 1)

        dump = store.export()
        copy = init_store(tmp_path / "copy.db")
        copy.import_dump(dump)
        assert copy.export() == dump
        assert copy.get_trial(trial.trial_id) == trial


def test_criterion_5_scanner_corpus(criterion):
    with criterion(5, "scanner corpus", 2):
        corpus = FIXTURES / "scan"
        expected = json.loads((corpus / "expected.json").read_text(encoding="utf-8"))
        assert sum(n.endswith(".R") for n in expected) >= 6
        assert sum(n.endswith(".py") for n in expected) >= 6
        misses = []
        for name, want in sorted(expected.items()):
            result = scan_script((corpus / name).read_text(encoding="utf-8"), language_for_path(name))
            got = {
                "dependencies": sorted(result.dependencies),
                "defined": sorted(f.name for f in result.defined_functions),
                "called": sorted(
                    ([f.name, f.source_package] for f in result.called_functions), key=lambda c: (c[0], c[1] or "")
                ),
                "diagnostics": len(result.diagnostics),
            }
            if got != want:
                misses.append(name)
        assert not misses, f"mismatched: {misses}"


class _Repository(BaseHTTPRequestHandler):
    status = 201

    def do_POST(self):
        self.rfile.read(int(self.headers["Content-Length"]))
        body = b'{"id":"dep-1"}' if self.status == 201 else b"forbidden"
        self.send_response(self.status)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


def test_criterion_6_fair_publication(criterion, tmp_path, monkeypatch):
    with criterion(6, "FAIR publication and deposit", 30):
        work = copy_enm_fixture(tmp_path / "w")
        _init_enm(work)
        store = init_store(tmp_path / "provenance.db")
        run_captured(work, [sys.executable, ENM_SCRIPT], store)
        package_experiment(work)
        meta = PublicationMetadata("Toy ENM", (UserInfo("Ada"),), "CC-BY-4.0", keywords=("enm",))
        publication, fair = publish_experiment(work, store, meta)
        verify_publication(publication)
        assert len(fair.package_files) == 3

        def no_network(request):
            raise AssertionError(f"dry run touched the network: {request.url}")

        receipt = deposit(publication, "https://repo.example/api", dry_run=True, transport=httpx.MockTransport(no_network))
        assert receipt.status is DepositStatus.DryRun

        monkeypatch.setenv("REPRO_DEPOSIT_TOKEN", "secret")
        server = HTTPServer(("127.0.0.1", 0), _Repository)
        threading.Thread(target=server.serve_forever, daemon=True).start()
        try:
            url = f"http://127.0.0.1:{server.server_address[1]}/deposit"
            outcomes = {}
            for status in (201, 403):
                monkeypatch.setattr(_Repository, "status", status)
                outcomes[status] = deposit(publication, url, dry_run=False, timeout=10).status
        finally:
            server.shutdown()
            server.server_close()
        assert outcomes == {201: DepositStatus.Accepted, 403: DepositStatus.Rejected}


def test_criterion_7_suite_wall_time(criterion):
    with criterion(7, "full suite under 2 minutes", 120):
        tests = Path(__file__).parent
        start = time.perf_counter()
        proc = subprocess.run(
            [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", str(tests),
             "--ignore", str(Path(__file__))],
            cwd=tests.parent,
            capture_output=True,
            text=True,
        )
        others = time.perf_counter() - start
        own = start - SUITE_START
        assert proc.returncode == 0, proc.stdout[-2000:]
        total = others + own
        assert total < 120, f"suite took {total:.1f} s"
