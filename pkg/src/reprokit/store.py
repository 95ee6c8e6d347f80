"""Embedded relational provenance store (SQLite).

One table per experiment entity plus the ``trial`` table and the two
trial-level relations ``consume`` and ``produce``.  Entity rows are
deduplicated by a natural key: the canonical JSON of the entity (artifacts
by path and content hash, packages by ecosystem, name and version).

Parameters are an attribute of the consume relation and are stored on the
consume row.  A trial's package, function and input memberships are kept as
ordered id lists on the trial row so the schema stays at eleven tables.
"""

import difflib
import json
import os
import sqlite3
from dataclasses import dataclass
from pathlib import Path
from typing import FrozenSet, Optional, Tuple

from filelock import FileLock, Timeout

from .canonical import canonical_json, format_timestamp, parse_timestamp
from .errors import (
    ConflictError,
    NotFoundError,
    SchemaVersionError,
    StoreIOError,
    UsageError,
    ValidationError,
)
from .model import (
    ArtifactRole,
    DataArtifact,
    ExperimentManifest,
    FunctionInfo,
    HardwareInfo,
    OperatingSystemInfo,
    OsPackage,
    Parameter,
    ScriptInfo,
    ScriptPackage,
    UserInfo,
    check_unique_parameter_names,
    sorted_dicts,
)

STORE_FILENAME = "provenance.db"
EXPORT_FILENAME = "provenance.export.json"
SCHEMA_VERSION = 1
LOCK_TIMEOUT = 30

TABLES = (
    "user",
    "hardware",
    "operating_system",
    "os_package",
    "script",
    "function",
    "script_package",
    "data_artifact",
    "trial",
    "consume",
    "produce",
)

_SCHEMA = """
CREATE TABLE IF NOT EXISTS user (
    id INTEGER PRIMARY KEY,
    natural_key TEXT NOT NULL UNIQUE,
    name TEXT NOT NULL,
    identifier TEXT
);
CREATE TABLE IF NOT EXISTS hardware (
    id INTEGER PRIMARY KEY,
    natural_key TEXT NOT NULL UNIQUE,
    cpu_model TEXT NOT NULL,
    logical_cores INTEGER NOT NULL CHECK (logical_cores >= 1),
    total_memory_bytes INTEGER NOT NULL CHECK (total_memory_bytes >= 0),
    architecture TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS operating_system (
    id INTEGER PRIMARY KEY,
    natural_key TEXT NOT NULL UNIQUE,
    name TEXT NOT NULL,
    version TEXT NOT NULL,
    kernel TEXT
);
CREATE TABLE IF NOT EXISTS os_package (
    id INTEGER PRIMARY KEY,
    natural_key TEXT NOT NULL UNIQUE,
    name TEXT NOT NULL,
    version TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS script (
    id INTEGER PRIMARY KEY,
    natural_key TEXT NOT NULL UNIQUE,
    path TEXT NOT NULL,
    language TEXT NOT NULL CHECK (language IN ('R', 'Python')),
    content_hash TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS function (
    id INTEGER PRIMARY KEY,
    natural_key TEXT NOT NULL UNIQUE,
    name TEXT NOT NULL,
    kind TEXT NOT NULL CHECK (kind IN ('defined', 'called')),
    source_package TEXT
);
CREATE TABLE IF NOT EXISTS script_package (
    id INTEGER PRIMARY KEY,
    natural_key TEXT NOT NULL UNIQUE,
    ecosystem TEXT NOT NULL CHECK (ecosystem IN ('R', 'Python')),
    name TEXT NOT NULL,
    version TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS data_artifact (
    id INTEGER PRIMARY KEY,
    natural_key TEXT NOT NULL UNIQUE,
    path TEXT NOT NULL,
    content_hash TEXT NOT NULL,
    size_bytes INTEGER NOT NULL CHECK (size_bytes >= 0)
);
CREATE TABLE IF NOT EXISTS trial (
    trial_id TEXT PRIMARY KEY,
    user_id INTEGER NOT NULL REFERENCES user(id),
    hardware_id INTEGER NOT NULL REFERENCES hardware(id),
    operating_system_id INTEGER NOT NULL REFERENCES operating_system(id),
    script_id INTEGER NOT NULL REFERENCES script(id),
    command TEXT NOT NULL,
    started_at TEXT NOT NULL,
    finished_at TEXT NOT NULL,
    exit_code INTEGER NOT NULL,
    notes TEXT NOT NULL,
    os_package_ids TEXT NOT NULL,
    function_ids TEXT NOT NULL,
    script_package_ids TEXT NOT NULL,
    input_ids TEXT NOT NULL,
    parameters TEXT NOT NULL,
    CHECK (finished_at >= started_at)
);
CREATE TABLE IF NOT EXISTS consume (
    trial_id TEXT NOT NULL REFERENCES trial(trial_id),
    seq INTEGER NOT NULL,
    artifact_id INTEGER NOT NULL REFERENCES data_artifact(id),
    role TEXT NOT NULL,
    parameters TEXT NOT NULL,
    PRIMARY KEY (trial_id, seq)
);
CREATE TABLE IF NOT EXISTS produce (
    trial_id TEXT NOT NULL REFERENCES trial(trial_id),
    seq INTEGER NOT NULL,
    artifact_id INTEGER NOT NULL REFERENCES data_artifact(id),
    role TEXT NOT NULL CHECK (role IN ('output', 'intermediate')),
    PRIMARY KEY (trial_id, seq)
);
CREATE INDEX IF NOT EXISTS produce_artifact ON produce (artifact_id);
CREATE INDEX IF NOT EXISTS trial_started ON trial (started_at);
"""

_PRIMARY_KEYS = {
    "trial": ("trial_id",),
    "consume": ("trial_id", "seq"),
    "produce": ("trial_id", "seq"),
}


def _normalize_timestamp(value, field_name):
    try:
        return format_timestamp(parse_timestamp(value))
    except (TypeError, ValueError) as exc:
        raise ValidationError(field_name, str(exc)) from None


@dataclass(frozen=True)
class ConsumeEdge:
    artifact: DataArtifact
    parameters: FrozenSet[Parameter] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "parameters", frozenset(self.parameters))
        check_unique_parameter_names(self.parameters, "consume.parameters")

    def to_dict(self):
        return {"artifact": self.artifact.to_dict(), "parameters": sorted_dicts(self.parameters)}


@dataclass(frozen=True)
class TrialRecord:
    trial_id: str
    manifest: ExperimentManifest
    command: Tuple[str, ...]
    started_at: str
    finished_at: str
    exit_code: int
    consume_edges: Tuple[ConsumeEdge, ...] = ()
    produce_edges: Tuple[DataArtifact, ...] = ()
    notes: str = ""

    def __post_init__(self):
        if not isinstance(self.trial_id, str) or not self.trial_id:
            raise ValidationError("trial.trial_id", "must be a non-empty string")
        if not isinstance(self.manifest, ExperimentManifest):
            raise ValidationError("trial.manifest", "must be an ExperimentManifest")
        object.__setattr__(self, "command", tuple(self.command))
        if not all(isinstance(arg, str) for arg in self.command):
            raise ValidationError("trial.command", "arguments must be strings")
        started = _normalize_timestamp(self.started_at, "trial.started_at")
        finished = _normalize_timestamp(self.finished_at, "trial.finished_at")
        if finished < started:
            raise ValidationError("trial.finished_at", "precedes started_at")
        object.__setattr__(self, "started_at", started)
        object.__setattr__(self, "finished_at", finished)
        if not isinstance(self.exit_code, int) or isinstance(self.exit_code, bool):
            raise ValidationError("trial.exit_code", "must be an integer")
        object.__setattr__(self, "consume_edges", tuple(self.consume_edges))
        object.__setattr__(self, "produce_edges", tuple(self.produce_edges))
        for edge in self.consume_edges:
            if not isinstance(edge, ConsumeEdge):
                raise ValidationError("trial.consume_edges", "must contain ConsumeEdge")
        for artifact in self.produce_edges:
            if not isinstance(artifact, DataArtifact):
                raise ValidationError("trial.produce_edges", "must contain DataArtifact")
            if artifact.role not in (ArtifactRole.output, ArtifactRole.intermediate):
                raise ValidationError(
                    f"trial.produce_edges[{artifact.path}].role", "must be output or intermediate"
                )
        if not isinstance(self.notes, str):
            raise ValidationError("trial.notes", "must be a string")

    def to_dict(self):
        return {
            "command": list(self.command),
            "consume_edges": [edge.to_dict() for edge in self.consume_edges],
            "exit_code": self.exit_code,
            "finished_at": self.finished_at,
            "manifest": self.manifest.to_dict(),
            "notes": self.notes,
            "produce_edges": [a.to_dict() for a in self.produce_edges],
            "started_at": self.started_at,
            "trial_id": self.trial_id,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            trial_id=data["trial_id"],
            manifest=ExperimentManifest.from_dict(data["manifest"]),
            command=tuple(data["command"]),
            started_at=data["started_at"],
            finished_at=data["finished_at"],
            exit_code=data["exit_code"],
            consume_edges=tuple(
                ConsumeEdge(
                    DataArtifact.from_dict(e["artifact"]),
                    frozenset(Parameter.from_dict(p) for p in e["parameters"]),
                )
                for e in data["consume_edges"]
            ),
            produce_edges=tuple(DataArtifact.from_dict(a) for a in data["produce_edges"]),
            notes=data.get("notes", ""),
        )


@dataclass(frozen=True)
class TrialSummary:
    trial_id: str
    started_at: str
    finished_at: str
    exit_code: int
    script_path: str
    script_hash: str
    command: Tuple[str, ...]
    consumed: int
    produced: int

    def to_dict(self):
        return {
            "command": list(self.command),
            "consumed": self.consumed,
            "exit_code": self.exit_code,
            "finished_at": self.finished_at,
            "produced": self.produced,
            "script_hash": self.script_hash,
            "script_path": self.script_path,
            "started_at": self.started_at,
            "trial_id": self.trial_id,
        }


@dataclass(frozen=True)
class LineageChain:
    output: DataArtifact
    trial_id: str
    script: ScriptInfo
    consumed: Tuple[ConsumeEdge, ...]
    os: OperatingSystemInfo
    hardware: HardwareInfo
    script_packages: FrozenSet[ScriptPackage]

    def to_dict(self):
        return {
            "consumed": [edge.to_dict() for edge in self.consumed],
            "environment": {
                "hardware": self.hardware.to_dict(),
                "os": self.os.to_dict(),
                "script_packages": sorted_dicts(self.script_packages),
            },
            "output": self.output.to_dict(),
            "script": self.script.to_dict(),
            "trial_id": self.trial_id,
        }


def _key(entity):
    return canonical_json(entity.to_dict()).rstrip("\n")


def _artifact_key(artifact):
    return canonical_json({"content_hash": artifact.content_hash, "path": artifact.path}).rstrip("\n")


def _ids(text):
    return json.loads(text)


class ProvenanceStore:
    """Handle on a provenance database file.

    Writers serialize on an advisory lock file next to the database; readers
    open their own connections and never take the lock.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.lock_path = self.path.with_name(self.path.name + ".lock")

    def __repr__(self):
        return f"ProvenanceStore({str(self.path)!r})"

    def _connect(self):
        try:
            conn = sqlite3.connect(self.path, isolation_level=None)
        except sqlite3.Error as exc:
            raise StoreIOError(f"cannot open store {self.path}: {exc}") from None
        conn.row_factory = sqlite3.Row
        conn.execute("PRAGMA foreign_keys = ON")
        return conn

    def _write_lock(self):
        return FileLock(str(self.lock_path), timeout=LOCK_TIMEOUT)

    # -- schema -----------------------------------------------------------

    def _ensure_schema(self):
        try:
            with self._write_lock():
                conn = self._connect()
                try:
                    version = conn.execute("PRAGMA user_version").fetchone()[0]
                    existing = {
                        row[0]
                        for row in conn.execute("SELECT name FROM sqlite_master WHERE type='table'")
                    }
                    if existing and version != SCHEMA_VERSION:
                        raise SchemaVersionError(
                            f"store {self.path} has schema version {version}, "
                            f"expected {SCHEMA_VERSION}; refusing to migrate"
                        )
                    if existing and not set(TABLES) <= existing:
                        raise SchemaVersionError(
                            f"store {self.path} is missing tables: "
                            + ", ".join(sorted(set(TABLES) - existing))
                        )
                    conn.executescript(_SCHEMA)
                    conn.execute(f"PRAGMA user_version = {SCHEMA_VERSION}")
                finally:
                    conn.close()
        except sqlite3.DatabaseError as exc:
            raise StoreIOError(f"cannot initialize store {self.path}: {exc}") from None
        except Timeout:
            raise StoreIOError(f"store {self.path} is locked by another writer") from None
        except OSError as exc:
            raise StoreIOError(f"cannot initialize store {self.path}: {exc}") from None

    def table_names(self):
        conn = self._connect()
        try:
            rows = conn.execute(
                "SELECT name FROM sqlite_master WHERE type='table' ORDER BY name"
            ).fetchall()
            return [row[0] for row in rows]
        finally:
            conn.close()

    def row_counts(self):
        conn = self._connect()
        try:
            return {t: conn.execute(f'SELECT COUNT(*) FROM "{t}"').fetchone()[0] for t in TABLES}
        finally:
            conn.close()

    # -- writes -----------------------------------------------------------

    def _upsert(self, conn, table, natural_key, columns):
        names = ["natural_key", *columns]
        placeholders = ", ".join("?" for _ in names)
        conn.execute(
            f'INSERT OR IGNORE INTO "{table}" ({", ".join(names)}) VALUES ({placeholders})',
            [natural_key, *columns.values()],
        )
        row = conn.execute(
            f'SELECT id FROM "{table}" WHERE natural_key = ?', (natural_key,)
        ).fetchone()
        return row[0]

    def _upsert_artifact(self, conn, artifact):
        return self._upsert(
            conn,
            "data_artifact",
            _artifact_key(artifact),
            {
                "path": artifact.path,
                "content_hash": artifact.content_hash,
                "size_bytes": artifact.size_bytes,
            },
        )

    def record_trial(self, trial: TrialRecord) -> str:
        """Persist ``trial`` atomically; returns its id."""
        if not isinstance(trial, TrialRecord):
            raise ValidationError("trial", "must be a TrialRecord")
        m = trial.manifest
        try:
            with self._write_lock():
                conn = self._connect()
                try:
                    conn.execute("BEGIN IMMEDIATE")
                    try:
                        self._insert_trial(conn, trial, m)
                    except BaseException:
                        conn.execute("ROLLBACK")
                        raise
                    conn.execute("COMMIT")
                finally:
                    conn.close()
        except Timeout:
            raise StoreIOError(f"store {self.path} is locked by another writer") from None
        return trial.trial_id

    def _insert_trial(self, conn, trial, m):
        exists = conn.execute(
            "SELECT 1 FROM trial WHERE trial_id = ?", (trial.trial_id,)
        ).fetchone()
        if exists:
            raise ConflictError(f"trial {trial.trial_id} already recorded")
        try:
            user_id = self._upsert(
                conn, "user", _key(m.user), {"name": m.user.name, "identifier": m.user.identifier}
            )
            hardware_id = self._upsert(
                conn,
                "hardware",
                _key(m.hardware),
                {
                    "cpu_model": m.hardware.cpu_model,
                    "logical_cores": m.hardware.logical_cores,
                    "total_memory_bytes": m.hardware.total_memory_bytes,
                    "architecture": m.hardware.architecture,
                },
            )
            os_id = self._upsert(
                conn,
                "operating_system",
                _key(m.os),
                {"name": m.os.name, "version": m.os.version, "kernel": m.os.kernel},
            )
            script_id = self._upsert(
                conn,
                "script",
                _key(m.script),
                {
                    "path": m.script.path,
                    "language": m.script.language.value,
                    "content_hash": m.script.content_hash,
                },
            )
            os_package_ids = [
                self._upsert(conn, "os_package", _key(p), {"name": p.name, "version": p.version})
                for p in sorted(m.os_packages, key=lambda p: p.sort_key())
            ]
            function_ids = [
                self._upsert(
                    conn,
                    "function",
                    _key(f),
                    {"name": f.name, "kind": f.kind.value, "source_package": f.source_package},
                )
                for f in sorted(m.functions, key=lambda f: f.sort_key())
            ]
            script_package_ids = [
                self._upsert(
                    conn,
                    "script_package",
                    _key(p),
                    {"ecosystem": p.ecosystem.value, "name": p.name, "version": p.version},
                )
                for p in sorted(m.script_packages, key=lambda p: p.sort_key())
            ]
            input_ids = [
                self._upsert_artifact(conn, a) for a in sorted(m.inputs, key=lambda a: a.sort_key())
            ]
            conn.execute(
                "INSERT INTO trial (trial_id, user_id, hardware_id, operating_system_id, script_id,"
                " command, started_at, finished_at, exit_code, notes, os_package_ids, function_ids,"
                " script_package_ids, input_ids, parameters)"
                " VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
                (
                    trial.trial_id,
                    user_id,
                    hardware_id,
                    os_id,
                    script_id,
                    json.dumps(list(trial.command)),
                    trial.started_at,
                    trial.finished_at,
                    trial.exit_code,
                    trial.notes,
                    json.dumps(os_package_ids),
                    json.dumps(function_ids),
                    json.dumps(script_package_ids),
                    json.dumps(input_ids),
                    json.dumps(sorted_dicts(m.parameters), sort_keys=True),
                ),
            )
            for seq, edge in enumerate(trial.consume_edges):
                conn.execute(
                    "INSERT INTO consume (trial_id, seq, artifact_id, role, parameters)"
                    " VALUES (?, ?, ?, ?, ?)",
                    (
                        trial.trial_id,
                        seq,
                        self._upsert_artifact(conn, edge.artifact),
                        edge.artifact.role.value,
                        json.dumps(sorted_dicts(edge.parameters), sort_keys=True),
                    ),
                )
            for seq, artifact in enumerate(trial.produce_edges):
                conn.execute(
                    "INSERT INTO produce (trial_id, seq, artifact_id, role) VALUES (?, ?, ?, ?)",
                    (trial.trial_id, seq, self._upsert_artifact(conn, artifact), artifact.role.value),
                )
        except sqlite3.IntegrityError as exc:
            raise ValidationError("trial", f"constraint violation: {exc}") from None

    # -- reads ------------------------------------------------------------

    def _load_entities(self, conn, table, ids, factory):
        out = []
        for entity_id in ids:
            row = conn.execute(f'SELECT * FROM "{table}" WHERE id = ?', (entity_id,)).fetchone()
            out.append(factory(row))
        return out

    def _artifact(self, row, role):
        return DataArtifact(
            path=row["path"], role=role, content_hash=row["content_hash"], size_bytes=row["size_bytes"]
        )

    def _manifest(self, conn, trow):
        def one(table, entity_id):
            return conn.execute(f'SELECT * FROM "{table}" WHERE id = ?', (entity_id,)).fetchone()

        user = one("user", trow["user_id"])
        hw = one("hardware", trow["hardware_id"])
        osr = one("operating_system", trow["operating_system_id"])
        script = one("script", trow["script_id"])
        return ExperimentManifest(
            user=UserInfo(user["name"], user["identifier"]),
            hardware=HardwareInfo(
                hw["cpu_model"], hw["logical_cores"], hw["total_memory_bytes"], hw["architecture"]
            ),
            os=OperatingSystemInfo(osr["name"], osr["version"], osr["kernel"]),
            script=ScriptInfo(script["path"], script["language"], script["content_hash"]),
            os_packages=self._load_entities(
                conn, "os_package", _ids(trow["os_package_ids"]),
                lambda r: OsPackage(r["name"], r["version"]),
            ),
            functions=self._load_entities(
                conn, "function", _ids(trow["function_ids"]),
                lambda r: FunctionInfo(r["name"], r["kind"], r["source_package"]),
            ),
            script_packages=self._load_entities(
                conn, "script_package", _ids(trow["script_package_ids"]),
                lambda r: ScriptPackage(r["name"], r["version"], r["ecosystem"]),
            ),
            inputs=self._load_entities(
                conn, "data_artifact", _ids(trow["input_ids"]),
                lambda r: self._artifact(r, ArtifactRole.input),
            ),
            parameters=[Parameter.from_dict(p) for p in json.loads(trow["parameters"])],
        )

    def _consume_edges(self, conn, trial_id):
        rows = conn.execute(
            "SELECT c.role, c.parameters, a.* FROM consume c JOIN data_artifact a"
            " ON a.id = c.artifact_id WHERE c.trial_id = ? ORDER BY c.seq",
            (trial_id,),
        ).fetchall()
        return tuple(
            ConsumeEdge(
                self._artifact(r, r["role"]),
                frozenset(Parameter.from_dict(p) for p in json.loads(r["parameters"])),
            )
            for r in rows
        )

    def _produce_edges(self, conn, trial_id):
        rows = conn.execute(
            "SELECT p.role, a.* FROM produce p JOIN data_artifact a"
            " ON a.id = p.artifact_id WHERE p.trial_id = ? ORDER BY p.seq",
            (trial_id,),
        ).fetchall()
        return tuple(self._artifact(r, r["role"]) for r in rows)

    def get_trial(self, trial_id) -> TrialRecord:
        conn = self._connect()
        try:
            trow = conn.execute("SELECT * FROM trial WHERE trial_id = ?", (trial_id,)).fetchone()
            if trow is None:
                known = [r[0] for r in conn.execute("SELECT trial_id FROM trial")]
                raise NotFoundError(
                    f"no trial {trial_id!r}", difflib.get_close_matches(trial_id, known, n=3)
                )
            return TrialRecord(
                trial_id=trow["trial_id"],
                manifest=self._manifest(conn, trow),
                command=tuple(json.loads(trow["command"])),
                started_at=trow["started_at"],
                finished_at=trow["finished_at"],
                exit_code=trow["exit_code"],
                consume_edges=self._consume_edges(conn, trial_id),
                produce_edges=self._produce_edges(conn, trial_id),
                notes=trow["notes"],
            )
        finally:
            conn.close()

    def lineage(self, output_path: str, trial_id: Optional[str] = None) -> LineageChain:
        """Trace ``output_path`` back to the trial, script, inputs and environment.

        Without ``trial_id`` the most recent trial producing the path is used.
        """
        output_path = output_path.replace("\\", "/")
        conn = self._connect()
        try:
            query = (
                "SELECT p.trial_id, p.role, a.* FROM produce p"
                " JOIN data_artifact a ON a.id = p.artifact_id"
                " JOIN trial t ON t.trial_id = p.trial_id WHERE a.path = ?"
            )
            params = [output_path]
            if trial_id is not None:
                query += " AND p.trial_id = ?"
                params.append(trial_id)
            query += " ORDER BY t.started_at DESC, t.trial_id DESC LIMIT 1"
            row = conn.execute(query, params).fetchone()
            if row is None:
                produced = [r[0] for r in conn.execute(
                    "SELECT DISTINCT a.path FROM produce p JOIN data_artifact a ON a.id = p.artifact_id"
                )]
                where = f" in trial {trial_id}" if trial_id else ""
                raise NotFoundError(
                    f"no recorded output {output_path!r}{where}",
                    difflib.get_close_matches(output_path, produced, n=3, cutoff=0.5),
                )
            trow = conn.execute("SELECT * FROM trial WHERE trial_id = ?", (row["trial_id"],)).fetchone()
            manifest = self._manifest(conn, trow)
            return LineageChain(
                output=self._artifact(row, row["role"]),
                trial_id=row["trial_id"],
                script=manifest.script,
                consumed=self._consume_edges(conn, row["trial_id"]),
                os=manifest.os,
                hardware=manifest.hardware,
                script_packages=manifest.script_packages,
            )
        finally:
            conn.close()

    def list_trials(self, script_hash=None, since=None, until=None):
        """Trial summaries, newest first; filters combine conjunctively."""
        clauses, params = [], []
        if script_hash is not None:
            if not isinstance(script_hash, str) or not script_hash:
                raise UsageError("script_hash filter must be a non-empty string")
            clauses.append("s.content_hash = ?")
            params.append(script_hash)
        for label, value, op in (("since", since, ">="), ("until", until, "<=")):
            if value is None:
                continue
            try:
                normalized = format_timestamp(parse_timestamp(value))
            except (TypeError, ValueError):
                raise UsageError(f"{label} must be an RFC 3339 timestamp, got {value!r}") from None
            clauses.append(f"t.started_at {op} ?")
            params.append(normalized)
        where = (" WHERE " + " AND ".join(clauses)) if clauses else ""
        conn = self._connect()
        try:
            rows = conn.execute(
                "SELECT t.*, s.path AS script_path, s.content_hash AS script_hash,"
                " (SELECT COUNT(*) FROM consume c WHERE c.trial_id = t.trial_id) AS n_consume,"
                " (SELECT COUNT(*) FROM produce p WHERE p.trial_id = t.trial_id) AS n_produce"
                " FROM trial t JOIN script s ON s.id = t.script_id"
                + where
                + " ORDER BY t.started_at DESC, t.trial_id DESC",
                params,
            ).fetchall()
        finally:
            conn.close()
        return [
            TrialSummary(
                trial_id=r["trial_id"],
                started_at=r["started_at"],
                finished_at=r["finished_at"],
                exit_code=r["exit_code"],
                script_path=r["script_path"],
                script_hash=r["script_hash"],
                command=tuple(json.loads(r["command"])),
                consumed=r["n_consume"],
                produced=r["n_produce"],
            )
            for r in rows
        ]

    # -- dump / restore ---------------------------------------------------

    def export(self) -> str:
        """Canonical JSON dump: every table, rows sorted by primary key."""
        conn = self._connect()
        try:
            tables = {}
            for table in TABLES:
                order = ", ".join(_PRIMARY_KEYS.get(table, ("id",)))
                rows = conn.execute(f'SELECT * FROM "{table}" ORDER BY {order}').fetchall()
                tables[table] = [dict(row) for row in rows]
        finally:
            conn.close()
        return canonical_json({"schema_version": SCHEMA_VERSION, "tables": tables})

    def import_dump(self, dump: str) -> None:
        """Load a dump produced by :meth:`export` into this (empty) store."""
        try:
            data = json.loads(dump)
        except json.JSONDecodeError as exc:
            raise UsageError(f"provenance dump is not valid JSON: {exc}") from None
        if data.get("schema_version") != SCHEMA_VERSION:
            raise SchemaVersionError(
                f"dump has schema version {data.get('schema_version')}, expected {SCHEMA_VERSION}"
            )
        tables = data.get("tables", {})
        unknown = set(tables) - set(TABLES)
        if unknown:
            raise UsageError("dump contains unknown tables: " + ", ".join(sorted(unknown)))
        with self._write_lock():
            conn = self._connect()
            try:
                if any(self.row_counts().values()):
                    raise UsageError(f"store {self.path} is not empty; import needs a fresh store")
                conn.execute("BEGIN IMMEDIATE")
                try:
                    for table in TABLES:
                        for row in tables.get(table, []):
                            cols = sorted(row)
                            conn.execute(
                                f'INSERT INTO "{table}" ({", ".join(cols)})'
                                f' VALUES ({", ".join("?" for _ in cols)})',
                                [row[c] for c in cols],
                            )
                except sqlite3.Error as exc:
                    conn.execute("ROLLBACK")
                    raise ValidationError("dump", f"rejected by schema: {exc}") from None
                conn.execute("COMMIT")
            finally:
                conn.close()


def init_store(location) -> ProvenanceStore:
    """Create (or reopen) the store at ``location``.

    ``location`` may be the database file or the experiment directory, in
    which case ``provenance.db`` inside it is used.
    """
    path = Path(location)
    if path.is_dir():
        path = path / STORE_FILENAME
    parent = path.parent
    if not parent.is_dir():
        raise StoreIOError(f"cannot create store {path}: {parent} is not a directory")
    if not os.access(parent, os.W_OK):
        raise StoreIOError(f"cannot create store {path}: {parent} is not writable")
    store = ProvenanceStore(path)
    store._ensure_schema()
    return store


def open_store(location) -> ProvenanceStore:
    """Open an existing store without creating one."""
    path = Path(location)
    if path.is_dir():
        path = path / STORE_FILENAME
    if not path.is_file():
        raise StoreIOError(f"no provenance store at {path}")
    return init_store(path)
