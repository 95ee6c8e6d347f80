import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import httpx
import pytest

from reprokit.bundle import ARCHIVE_FILENAME, BundleManifest, pack
from reprokit.canonical import sha256_bytes
from reprokit.envspec import BaseOs, EnvSpec
from reprokit.errors import (
    ConfigurationError,
    DepositTransportError,
    IntegrityError,
    UsageError,
    ValidationError,
)
from reprokit.model import UserInfo
from reprokit.publish import (
    FAIR_FILENAME,
    REQUEST_FILENAME,
    DepositStatus,
    FairManifest,
    PublicationComponents,
    PublicationMetadata,
    assemble_publication,
    build_fair_manifest,
    deposit,
    verify_publication,
)
from reprokit.store import EXPORT_FILENAME, init_store

from conftest import make_manifest

META = PublicationMetadata(
    title="Toy niche model",
    creators=(UserInfo("Ada", "0000-0002-1825-0097"),),
    license="CC-BY-4.0",
    description="occurrence-based model",
    keywords=("enm", "reproducibility"),
)
TOKEN = "REPRO_TEST_TOKEN"


@pytest.fixture
def components(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    (src / "setup.R").write_text("library(raster)\n")
    archive, bundle_manifest = pack(src, ["*"], make_manifest())
    envspec = EnvSpec(BaseOs("Ubuntu", "22.04"))
    export = init_store(tmp_path / "store").export()
    fair = build_fair_manifest(bundle_manifest, envspec, export, META)
    return PublicationComponents(archive, envspec, export, fair)


@pytest.fixture
def publication(tmp_path, components):
    work = tmp_path / "work"
    work.mkdir()
    return assemble_publication(work, components)


def pack_manifest(components):
    # only the archive hash and size feed the FAIR record
    return BundleManifest((), sha256_bytes(components.bundle), "", len(components.bundle))


def test_fair_lists_three_files(components):
    fair = components.fair_manifest
    assert [f.name for f in fair.package_files] == sorted(
        [ARCHIVE_FILENAME, "envspec.json", EXPORT_FILENAME]
    )
    data = fair.to_dict()
    assert {"findable", "accessible", "interoperable", "reusable"} <= set(data)
    assert data["license"] == data["reusable"]["license"] == "CC-BY-4.0"
    assert fair.identifier.startswith("urn:repro:")


def test_fair_deterministic(components):
    again = build_fair_manifest(
        pack_manifest(components), components.envspec, components.store_export, META
    )
    assert again.to_json() == components.fair_manifest.to_json()
    assert FairManifest.from_dict(json.loads(again.to_json())) == again


@pytest.mark.parametrize(
    "meta, field",
    [
        (PublicationMetadata("t", (), "MIT"), "creators"),
        (PublicationMetadata("t", (UserInfo("Ada"),), ""), "license"),
        (PublicationMetadata(" ", (UserInfo("Ada"),), "MIT"), "title"),
    ],
)
def test_fair_requires_metadata(components, meta, field):
    with pytest.raises(ValidationError) as err:
        build_fair_manifest(pack_manifest(components), components.envspec, components.store_export, meta)
    assert err.value.field == field


def test_assemble_writes_four_verified_files(publication):
    assert sorted(p.name for p in publication.iterdir()) == sorted(
        [ARCHIVE_FILENAME, "envspec.json", EXPORT_FILENAME, FAIR_FILENAME]
    )
    verify_publication(publication)


def test_assemble_refuses_existing(publication, components):
    with pytest.raises(UsageError):
        assemble_publication(publication.parent, components)


def test_assemble_tampered_bundle_removed(tmp_path, components):
    from dataclasses import replace

    bad = replace(components, bundle=components.bundle[:-1] + b"\x01")
    with pytest.raises(IntegrityError):
        assemble_publication(tmp_path, bad)
    assert not (tmp_path / "publication").exists()


def test_verify_publication_detects_tamper(publication):
    (publication / "envspec.json").write_text("{}")
    with pytest.raises(IntegrityError) as err:
        verify_publication(publication)
    assert err.value.path == "envspec.json"


def _refuse(request):
    raise AssertionError(f"network call during dry run: {request.url}")


def test_dry_run_no_network(publication):
    receipt = deposit(publication, "https://repo.example/api", TOKEN, True, httpx.MockTransport(_refuse))
    assert receipt.status is DepositStatus.DryRun
    assert receipt.remote_id is None
    request = json.loads((publication.parent / REQUEST_FILENAME).read_text())
    assert request["headers"]["Authorization"] == "Bearer ${%s}" % TOKEN
    assert len(request["files"]) == 4


def test_dry_run_needs_no_token(publication, monkeypatch):
    monkeypatch.delenv(TOKEN, raising=False)
    assert deposit(publication, "https://repo.example/api", TOKEN).status is DepositStatus.DryRun


def test_mock_accepted(publication, monkeypatch):
    monkeypatch.setenv(TOKEN, "secret")
    seen = []

    def handler(request):
        seen.append(request)
        return httpx.Response(201, json={"id": "dep-1"})

    receipt = deposit(publication, "https://repo.example/api", TOKEN, False, httpx.MockTransport(handler))
    assert (receipt.status, receipt.remote_id) == (DepositStatus.Accepted, "dep-1")
    (request,) = seen
    assert request.headers["Authorization"] == "Bearer secret"
    assert request.headers["Content-Type"].startswith("multipart/form-data")
    assert request.content.count(b'name="file"') == 4


def test_missing_token(publication, monkeypatch):
    monkeypatch.delenv(TOKEN, raising=False)
    with pytest.raises(ConfigurationError):
        deposit(publication, "https://repo.example/api", TOKEN, False, httpx.MockTransport(_refuse))


def test_transport_error(publication, monkeypatch):
    monkeypatch.setenv(TOKEN, "secret")

    def boom(request):
        raise httpx.ConnectError("connection refused", request=request)

    with pytest.raises(DepositTransportError) as err:
        deposit(publication, "https://repo.example/api", TOKEN, False, httpx.MockTransport(boom))
    assert err.value.exit_code == 3


def test_bad_endpoint(publication):
    with pytest.raises(UsageError):
        deposit(publication, "ftp://repo.example/api", TOKEN)


class _Stub(BaseHTTPRequestHandler):
    status = 201
    bodies = []

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        _Stub.bodies.append((self.headers["Authorization"], self.rfile.read(length)))
        payload = json.dumps({"id": "dep-1"}).encode() if self.status == 201 else b"forbidden"
        self.send_response(self.status)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    server = HTTPServer(("127.0.0.1", 0), _Stub)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _Stub.bodies = []
    yield server
    server.shutdown()
    server.server_close()


@pytest.mark.parametrize("status, expected, remote_id", [(201, DepositStatus.Accepted, "dep-1"), (403, DepositStatus.Rejected, None)])
def test_local_stub_server(publication, monkeypatch, stub_server, status, expected, remote_id):
    monkeypatch.setattr(_Stub, "status", status)
    monkeypatch.setenv(TOKEN, "secret")
    url = f"http://127.0.0.1:{stub_server.server_address[1]}/deposit"
    receipt = deposit(publication, url, TOKEN, dry_run=False, timeout=10)
    assert (receipt.status, receipt.remote_id) == (expected, remote_id)
    assert receipt.response_summary.startswith(str(status))
    ((auth, body),) = _Stub.bodies
    assert auth == "Bearer secret"
    assert (publication / ARCHIVE_FILENAME).read_bytes() in body
