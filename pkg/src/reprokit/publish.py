"""Publication packaging with a FAIR metadata record, and repository deposit."""

import json
import os
import shutil
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Tuple

import httpx

from .bundle import ARCHIVE_FILENAME, BundleManifest
from .canonical import atomic_write, canonical_bytes, canonical_json, sha256_bytes, sha256_file
from .envspec import ENVSPEC_FILENAME, EnvSpec
from .errors import (
    ConfigurationError,
    DepositTransportError,
    IntegrityError,
    UsageError,
    ValidationError,
)
from .model import UserInfo
from .store import EXPORT_FILENAME

FAIR_FILENAME = "fair.manifest.json"
PUBLICATION_DIRNAME = "publication"
REQUEST_FILENAME = "deposit.request.json"
DEFAULT_TOKEN_ENV = "REPRO_DEPOSIT_TOKEN"

FORMATS = {
    ARCHIVE_FILENAME: "application/x-tar",
    ENVSPEC_FILENAME: "application/json",
    EXPORT_FILENAME: "application/json",
    FAIR_FILENAME: "application/json",
}


@dataclass(frozen=True)
class PackageFile:
    name: str
    content_hash: str
    size: int

    def to_dict(self):
        return {"content_hash": self.content_hash, "name": self.name, "size": self.size}


@dataclass(frozen=True)
class FairManifest:
    identifier: str
    title: str
    creators: Tuple[UserInfo, ...]
    description: str
    license: str
    keywords: Tuple[str, ...]
    package_files: Tuple[PackageFile, ...]
    retrieval_protocol: str = "https"

    def to_dict(self):
        return {
            "accessible": {
                "package_files": [f.to_dict() for f in self.package_files],
                "retrieval_protocol": self.retrieval_protocol,
            },
            "creators": [c.to_dict() for c in self.creators],
            "description": self.description,
            "findable": {"identifier": self.identifier, "keywords": list(self.keywords)},
            "identifier": self.identifier,
            "interoperable": {
                "format_ids": [
                    {"format": FORMATS.get(f.name, "application/octet-stream"), "name": f.name}
                    for f in self.package_files
                ]
            },
            "license": self.license,
            "reusable": {
                "envspec_name": ENVSPEC_FILENAME,
                "license": self.license,
                "provenance_export_name": EXPORT_FILENAME,
            },
            "title": self.title,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, data):
        return cls(
            identifier=data["identifier"],
            title=data["title"],
            creators=tuple(UserInfo.from_dict(c) for c in data["creators"]),
            description=data["description"],
            license=data["license"],
            keywords=tuple(data["findable"]["keywords"]),
            package_files=tuple(
                PackageFile(f["name"], f["content_hash"], f["size"])
                for f in data["accessible"]["package_files"]
            ),
            retrieval_protocol=data["accessible"]["retrieval_protocol"],
        )


@dataclass(frozen=True)
class PublicationMetadata:
    title: str
    creators: Tuple[UserInfo, ...]
    license: str
    description: str = ""
    keywords: Tuple[str, ...] = ()
    identifier: Optional[str] = None


def build_fair_manifest(
    bundle_manifest: BundleManifest,
    envspec: EnvSpec,
    store_export: str,
    metadata: PublicationMetadata,
) -> FairManifest:
    """FAIR record listing the bundle, environment spec and provenance export."""
    if not metadata.license or not metadata.license.strip():
        raise ValidationError("license", "a license is required for reuse")
    if not metadata.title or not metadata.title.strip():
        raise ValidationError("title", "must be non-empty")
    if not metadata.creators:
        raise ValidationError("creators", "at least one creator is required")
    envspec_bytes = canonical_bytes(envspec.to_dict())
    export_bytes = store_export.encode("utf-8")
    files = [
        PackageFile(ARCHIVE_FILENAME, bundle_manifest.bundle_hash, bundle_manifest.archive_size),
        PackageFile(ENVSPEC_FILENAME, sha256_bytes(envspec_bytes), len(envspec_bytes)),
        PackageFile(EXPORT_FILENAME, sha256_bytes(export_bytes), len(export_bytes)),
    ]
    return FairManifest(
        identifier=metadata.identifier or f"urn:repro:{bundle_manifest.bundle_hash}",
        title=metadata.title,
        creators=tuple(metadata.creators),
        description=metadata.description,
        license=metadata.license,
        keywords=tuple(metadata.keywords),
        package_files=tuple(sorted(files, key=lambda f: f.name)),
    )


@dataclass(frozen=True)
class PublicationComponents:
    bundle: bytes
    envspec: EnvSpec
    store_export: str
    fair_manifest: FairManifest


def verify_publication(publication) -> None:
    """Raise IntegrityError unless every listed file is present with its hash."""
    publication = Path(publication)
    fair_path = publication / FAIR_FILENAME
    if not fair_path.is_file():
        raise IntegrityError(f"{fair_path} missing", FAIR_FILENAME)
    fair = FairManifest.from_dict(json.loads(fair_path.read_text(encoding="utf-8")))
    for entry in fair.package_files:
        path = publication / entry.name
        if not path.is_file():
            raise IntegrityError(f"{entry.name} listed but absent", entry.name)
        if path.stat().st_size != entry.size or sha256_file(path) != entry.content_hash:
            raise IntegrityError(f"{entry.name} does not match its recorded hash", entry.name)


def assemble_publication(workdir, components: PublicationComponents) -> Path:
    """Write the four publication files under ``workdir/publication``.

    Nothing is overwritten.  The directory is re-verified after writing and
    removed again if any file disagrees with the FAIR manifest.
    """
    target = Path(workdir) / PUBLICATION_DIRNAME
    if target.exists():
        raise UsageError(f"{target} already exists; refusing to overwrite")
    target.mkdir(parents=True)
    try:
        atomic_write(target / ARCHIVE_FILENAME, components.bundle)
        atomic_write(target / ENVSPEC_FILENAME, components.envspec.to_json())
        atomic_write(target / EXPORT_FILENAME, components.store_export)
        atomic_write(target / FAIR_FILENAME, components.fair_manifest.to_json())
        verify_publication(target)
    except BaseException:
        shutil.rmtree(target, ignore_errors=True)
        raise
    return target


class DepositStatus(str, Enum):
    DryRun = "DryRun"
    Accepted = "Accepted"
    Rejected = "Rejected"


@dataclass(frozen=True)
class DepositReceipt:
    endpoint: str
    status: DepositStatus
    remote_id: Optional[str] = None
    response_summary: str = ""
    request_path: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        if self.status is DepositStatus.DryRun and self.remote_id is not None:
            raise ValidationError("remote_id", "dry-run receipts carry no remote id")

    def to_dict(self):
        return {
            "endpoint": self.endpoint,
            "remote_id": self.remote_id,
            "response_summary": self.response_summary,
            "status": self.status.value,
        }


def _package_listing(publication: Path):
    return [
        {"name": p.name, "content_hash": sha256_file(p), "size": p.stat().st_size}
        for p in sorted(publication.iterdir())
        if p.is_file()
    ]


def deposit(
    publication,
    endpoint: str,
    token_source: str = DEFAULT_TOKEN_ENV,
    dry_run: bool = True,
    transport: Optional[httpx.BaseTransport] = None,
    timeout: float = 60.0,
) -> DepositReceipt:
    """Upload the publication as one multipart POST.

    A dry run performs no network activity; it writes the request that would
    have been sent to ``deposit.request.json`` beside the publication.
    """
    publication = Path(publication)
    verify_publication(publication)
    url = httpx.URL(endpoint)
    if url.scheme not in ("http", "https") or not url.host:
        raise UsageError(f"endpoint must be an http(s) URL, got {endpoint!r}")
    listing = _package_listing(publication)
    if dry_run:
        request = {
            "method": "POST",
            "url": endpoint,
            "headers": {"Authorization": f"Bearer ${{{token_source}}}"},
            "content_type": "multipart/form-data",
            "files": [{"field": "file", **item} for item in listing],
        }
        request_path = publication.parent / REQUEST_FILENAME
        atomic_write(request_path, canonical_json(request))
        return DepositReceipt(
            endpoint=endpoint,
            status=DepositStatus.DryRun,
            response_summary=f"dry run: {len(listing)} files, request written to {REQUEST_FILENAME}",
            request_path=str(request_path),
        )
    token = os.environ.get(token_source)
    if not token:
        raise ConfigurationError(f"environment variable {token_source} is not set")
    handles = []
    try:
        files = []
        for item in listing:
            fh = open(publication / item["name"], "rb")
            handles.append(fh)
            files.append(("file", (item["name"], fh, FORMATS.get(item["name"], "application/octet-stream"))))
        with httpx.Client(transport=transport, timeout=timeout) as client:
            response = client.post(endpoint, files=files, headers={"Authorization": f"Bearer {token}"})
    except httpx.TransportError as exc:
        raise DepositTransportError(f"deposit to {endpoint} failed: {exc}") from None
    finally:
        for fh in handles:
            fh.close()
    summary = f"{response.status_code} {response.reason_phrase}".strip()
    if response.is_success:
        remote_id = None
        try:
            body = response.json()
            if isinstance(body, dict) and body.get("id") is not None:
                remote_id = str(body["id"])
        except ValueError:
            pass
        return DepositReceipt(endpoint, DepositStatus.Accepted, remote_id, summary)
    return DepositReceipt(endpoint, DepositStatus.Rejected, None, summary)
