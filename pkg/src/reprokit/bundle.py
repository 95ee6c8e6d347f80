"""Deterministic, content-addressed experiment bundles.

Archives are uncompressed POSIX ustar streams whose bytes depend only on the
included paths, their contents and whether they are executable: members are
sorted, timestamps and ownership are zeroed, modes are normalized.
"""

import fnmatch
import io
import json
import os
import shutil
import stat
import tarfile
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

from .canonical import atomic_write, canonical_json, posix_relpath, sha256_bytes
from .errors import IntegrityError, ReproError, UsageError, ValidationError
from .model import ExperimentManifest, validate_relpath

ARCHIVE_FILENAME = "experiment.bundle.tar"
SIDECAR_FILENAME = "experiment.bundle.manifest.json"

FILE_MODE = 0o644
EXEC_MODE = 0o755


@dataclass(frozen=True)
class BundleEntry:
    path: str
    size_bytes: int
    content_hash: str

    def to_dict(self):
        return {"content_hash": self.content_hash, "path": self.path, "size_bytes": self.size_bytes}


@dataclass(frozen=True)
class BundleManifest:
    entries: Tuple[BundleEntry, ...]
    bundle_hash: str
    created_from: str
    archive_size: int

    def to_dict(self):
        return {
            "archive_size": self.archive_size,
            "bundle_hash": self.bundle_hash,
            "created_from": self.created_from,
            "entries": [e.to_dict() for e in self.entries],
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, data):
        try:
            entries = tuple(
                BundleEntry(e["path"], e["size_bytes"], e["content_hash"]) for e in data["entries"]
            )
            return cls(entries, data["bundle_hash"], data["created_from"], data["archive_size"])
        except (KeyError, TypeError) as exc:
            raise ValidationError("bundle_manifest", f"malformed document: {exc}") from None


def default_include(manifest: ExperimentManifest) -> List[str]:
    """Everything the Portable level needs preserved."""
    return [
        manifest.script.path,
        *sorted(a.path for a in manifest.inputs),
        "repro.lock",
        "envspec.json",
        "experiment.manifest.json",
    ]


def _collect(root: Path, include) -> List[str]:
    matched = set()
    for current, dirnames, filenames in os.walk(root):
        dirnames.sort()
        rel_dir = posix_relpath(os.path.relpath(current, root))
        for name in filenames:
            rel = f"{rel_dir}/{name}" if rel_dir else name
            full = Path(current) / name
            if full.is_symlink() or not full.is_file():
                continue
            if any(fnmatch.fnmatchcase(rel, pattern) for pattern in include):
                matched.add(rel)
    return sorted(matched)


def _tarinfo(path, size, executable):
    info = tarfile.TarInfo(path)
    info.size = size
    info.mtime = 0
    info.mode = EXEC_MODE if executable else FILE_MODE
    info.uid = info.gid = 0
    info.uname = info.gname = ""
    info.type = tarfile.REGTYPE
    return info


def build_archive(files) -> bytes:
    """ustar bytes for ``files``: iterable of (path, data, executable)."""
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w", format=tarfile.USTAR_FORMAT) as tar:
        for path, data, executable in sorted(files, key=lambda f: f[0]):
            tar.addfile(_tarinfo(path, len(data), executable), io.BytesIO(data))
    return buf.getvalue()


def pack(directory, include, manifest: ExperimentManifest) -> Tuple[bytes, BundleManifest]:
    """Archive the files under ``directory`` matching any ``include`` glob."""
    include = list(include)
    if not include:
        raise UsageError("include list is empty")
    root = Path(directory)
    if not root.is_dir():
        raise UsageError(f"{root} is not a directory")
    paths = _collect(root, include)
    if not paths:
        raise UsageError("no files match the include patterns: " + ", ".join(include))
    files, entries = [], []
    for rel in paths:
        full = root / rel
        try:
            data = full.read_bytes()
            executable = bool(full.stat().st_mode & (stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH))
        except OSError as exc:
            raise ReproError(f"{rel} vanished or became unreadable while packing: {exc}") from None
        files.append((rel, data, executable))
        entries.append(BundleEntry(rel, len(data), sha256_bytes(data)))
    try:
        archive = build_archive(files)
    except ValueError as exc:
        raise UsageError(f"cannot represent file in a ustar archive: {exc}") from None
    return archive, BundleManifest(
        entries=tuple(entries),
        bundle_hash=sha256_bytes(archive),
        created_from=manifest.content_hash(),
        archive_size=len(archive),
    )


def _read_members(archive: bytes):
    """Yield (member, data) for every regular file; raises IntegrityError on damage."""
    try:
        tar = tarfile.open(fileobj=io.BytesIO(archive), mode="r:")
    except tarfile.TarError as exc:
        raise IntegrityError(f"archive unreadable: {exc}") from None
    name = None
    try:
        with tar:
            for member in tar:
                name = member.name
                if not member.isreg():
                    raise IntegrityError(f"unexpected non-file member {member.name}", member.name)
                fh = tar.extractfile(member)
                data = fh.read()
                if len(data) != member.size:
                    raise IntegrityError(f"member {member.name} is truncated", member.name)
                yield member, data
    except (tarfile.TarError, OSError, EOFError) as exc:
        where = f" after {name}" if name else ""
        raise IntegrityError(f"archive damaged{where}: {exc}", name) from None


@dataclass(frozen=True)
class BundleReport:
    ok: bool
    mismatches: Tuple[str, ...]
    bundle_hash_ok: bool

    def to_dict(self):
        return {"bundle_hash_ok": self.bundle_hash_ok, "mismatches": list(self.mismatches), "ok": self.ok}


def verify_bundle(archive: bytes, manifest: BundleManifest) -> BundleReport:
    """Recompute every entry hash and the archive hash against ``manifest``."""
    expected = {e.path: e for e in manifest.entries}
    seen, bad = {}, set()
    try:
        for member, data in _read_members(archive):
            seen[member.name] = sha256_bytes(data)
    except IntegrityError as exc:
        if exc.path:
            bad.add(exc.path)
    for path, entry in expected.items():
        if seen.get(path) != entry.content_hash:
            bad.add(path)
    bad.update(set(seen) - set(expected))
    hash_ok = sha256_bytes(archive) == manifest.bundle_hash
    return BundleReport(ok=hash_ok and not bad, mismatches=tuple(sorted(bad)), bundle_hash_ok=hash_ok)


def unpack(archive: bytes, dest, manifest: Optional[BundleManifest] = None) -> BundleManifest:
    """Restore ``archive`` into ``dest`` (which must be empty or absent).

    When ``manifest`` is given every restored file must match it; on any
    failure the restored files are removed again.
    """
    dest = Path(dest)
    if dest.exists() and (not dest.is_dir() or any(dest.iterdir())):
        raise UsageError(f"destination {dest} is not empty")
    created = not dest.exists()
    dest.mkdir(parents=True, exist_ok=True)
    expected = {e.path: e for e in manifest.entries} if manifest else None
    entries = []
    try:
        for member, data in _read_members(archive):
            try:
                validate_relpath(member.name, "member")
            except ValidationError:
                raise IntegrityError(f"unsafe member path {member.name!r}", member.name) from None
            digest = sha256_bytes(data)
            if expected is not None:
                want = expected.get(member.name)
                if want is None or want.content_hash != digest:
                    raise IntegrityError(f"hash mismatch for {member.name}", member.name)
            target = dest / member.name
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(data)
            os.chmod(target, EXEC_MODE if member.mode & 0o111 else FILE_MODE)
            entries.append(BundleEntry(member.name, len(data), sha256_bytes(target.read_bytes())))
        if expected is not None:
            missing = sorted(set(expected) - {e.path for e in entries})
            if missing:
                raise IntegrityError(f"archive lacks {missing[0]}", missing[0])
    except BaseException:
        if created:
            shutil.rmtree(dest, ignore_errors=True)
        else:
            for child in dest.iterdir():
                shutil.rmtree(child) if child.is_dir() else child.unlink()
        raise
    entries.sort(key=lambda e: e.path)
    return BundleManifest(
        entries=tuple(entries),
        bundle_hash=sha256_bytes(archive),
        created_from=manifest.created_from if manifest else "",
        archive_size=len(archive),
    )


def write_bundle(directory, archive: bytes, manifest: BundleManifest):
    directory = Path(directory)
    atomic_write(directory / ARCHIVE_FILENAME, archive)
    atomic_write(directory / SIDECAR_FILENAME, manifest.to_json())
    return directory / ARCHIVE_FILENAME


def read_bundle(directory):
    directory = Path(directory)
    archive = (directory / ARCHIVE_FILENAME).read_bytes()
    sidecar = json.loads((directory / SIDECAR_FILENAME).read_text(encoding="utf-8"))
    return archive, BundleManifest.from_dict(sidecar)
