"""Experiment entities, manifest comparison and reproducibility levels.

The entity set follows the experiment conceptual model: a user runs a script
on some hardware and operating system, the OS has packages installed, the
script defines and calls functions that may come from script packages, and
those functions consume inputs (with parameters) and produce outputs.

All types are immutable; collections that are sets in the model are
``frozenset`` here and are rendered as sorted arrays when serialized.
"""

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import FrozenSet, Optional

from .canonical import (
    atomic_write,
    canonical_bytes,
    canonical_json,
    is_sha256_hex,
    sha256_bytes,
)
from .errors import ValidationError

MANIFEST_FILENAME = "experiment.manifest.json"


class Ecosystem(str, Enum):
    R = "R"
    Python = "Python"


class FunctionKind(str, Enum):
    defined = "defined"
    called = "called"


class ArtifactRole(str, Enum):
    input = "input"
    output = "output"
    intermediate = "intermediate"


class EntityKind(str, Enum):
    Hardware = "Hardware"
    Os = "Os"
    OsPackages = "OsPackages"
    Script = "Script"
    Functions = "Functions"
    ScriptPackages = "ScriptPackages"
    Inputs = "Inputs"
    Parameters = "Parameters"


class ReproLevel(str, Enum):
    Repeatable = "Repeatable"
    ReRunnable = "ReRunnable"
    Portable = "Portable"
    Extendable = "Extendable"
    Modifiable = "Modifiable"


ALL_ENTITIES = frozenset(EntityKind)


def _require(cond, field_name, message):
    if not cond:
        raise ValidationError(field_name, message)


def _nonempty_text(value, field_name):
    _require(isinstance(value, str) and value != "", field_name, "must be a non-empty string")


def _text(value, field_name):
    _require(isinstance(value, str), field_name, "must be a string")


def _enum(cls, value, field_name):
    try:
        return cls(value)
    except ValueError:
        allowed = ", ".join(m.value for m in cls)
        raise ValidationError(field_name, f"{value!r} is not one of {{{allowed}}}") from None


def validate_relpath(path, field_name="path"):
    _nonempty_text(path, field_name)
    _require("\\" not in path, field_name, "must use forward slashes")
    _require(not path.startswith("/"), field_name, "must be relative")
    _require(
        all(seg not in ("", ".", "..") for seg in path.split("/")),
        field_name,
        "must not contain empty, '.' or '..' segments",
    )


def _sha(value, field_name):
    _require(is_sha256_hex(value), field_name, "must be 64 lowercase hex characters")


def _get(data, key, prefix):
    if not isinstance(data, dict):
        raise ValidationError(prefix or "<root>", "must be an object")
    if key not in data:
        raise ValidationError(f"{prefix}.{key}" if prefix else key, "missing")
    return data[key]


class _Nested:
    """Re-raise validation errors with the enclosing field path prepended."""

    def __init__(self, prefix):
        self.prefix = prefix

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is ValidationError and self.prefix:
            field_name = f"{self.prefix}.{exc.field}"
            raise ValidationError(field_name, str(exc).split(": ", 1)[1]) from None
        return False


@dataclass(frozen=True)
class UserInfo:
    name: str
    identifier: Optional[str] = None

    def __post_init__(self):
        _nonempty_text(self.name, "name")
        if self.identifier is not None:
            _text(self.identifier, "identifier")

    def to_dict(self):
        return {"name": self.name, "identifier": self.identifier}

    @classmethod
    def from_dict(cls, data):
        return cls(name=_get(data, "name", ""), identifier=data.get("identifier"))


@dataclass(frozen=True)
class HardwareInfo:
    cpu_model: str
    logical_cores: int
    total_memory_bytes: int
    architecture: str

    def __post_init__(self):
        _text(self.cpu_model, "cpu_model")
        _require(
            isinstance(self.logical_cores, int) and not isinstance(self.logical_cores, bool)
            and self.logical_cores >= 1,
            "logical_cores",
            "must be an integer >= 1",
        )
        _require(
            isinstance(self.total_memory_bytes, int)
            and not isinstance(self.total_memory_bytes, bool)
            and self.total_memory_bytes >= 0,
            "total_memory_bytes",
            "must be a non-negative integer",
        )
        _text(self.architecture, "architecture")

    def to_dict(self):
        return {
            "architecture": self.architecture,
            "cpu_model": self.cpu_model,
            "logical_cores": self.logical_cores,
            "total_memory_bytes": self.total_memory_bytes,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            cpu_model=_get(data, "cpu_model", ""),
            logical_cores=_get(data, "logical_cores", ""),
            total_memory_bytes=_get(data, "total_memory_bytes", ""),
            architecture=_get(data, "architecture", ""),
        )


@dataclass(frozen=True)
class OperatingSystemInfo:
    name: str
    version: str
    kernel: Optional[str] = None

    def __post_init__(self):
        _nonempty_text(self.name, "name")
        _text(self.version, "version")
        if self.kernel is not None:
            _text(self.kernel, "kernel")

    def to_dict(self):
        return {"name": self.name, "version": self.version, "kernel": self.kernel}

    @classmethod
    def from_dict(cls, data):
        return cls(
            name=_get(data, "name", ""),
            version=_get(data, "version", ""),
            kernel=data.get("kernel"),
        )


@dataclass(frozen=True)
class OsPackage:
    name: str
    version: str

    def __post_init__(self):
        _nonempty_text(self.name, "name")
        _text(self.version, "version")

    def sort_key(self):
        return (self.name, self.version)

    def to_dict(self):
        return {"name": self.name, "version": self.version}

    @classmethod
    def from_dict(cls, data):
        return cls(name=_get(data, "name", ""), version=_get(data, "version", ""))


@dataclass(frozen=True)
class ScriptPackage:
    name: str
    version: str
    ecosystem: Ecosystem

    def __post_init__(self):
        _nonempty_text(self.name, "name")
        _text(self.version, "version")
        object.__setattr__(self, "ecosystem", _enum(Ecosystem, self.ecosystem, "ecosystem"))

    def sort_key(self):
        return (self.ecosystem.value, self.name, self.version)

    def to_dict(self):
        return {"ecosystem": self.ecosystem.value, "name": self.name, "version": self.version}

    @classmethod
    def from_dict(cls, data):
        return cls(
            name=_get(data, "name", ""),
            version=_get(data, "version", ""),
            ecosystem=_get(data, "ecosystem", ""),
        )


@dataclass(frozen=True)
class ScriptInfo:
    path: str
    language: Ecosystem
    content_hash: str

    def __post_init__(self):
        validate_relpath(self.path, "path")
        object.__setattr__(self, "language", _enum(Ecosystem, self.language, "language"))
        _sha(self.content_hash, "content_hash")

    def to_dict(self):
        return {
            "content_hash": self.content_hash,
            "language": self.language.value,
            "path": self.path,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            path=_get(data, "path", ""),
            language=_get(data, "language", ""),
            content_hash=_get(data, "content_hash", ""),
        )


@dataclass(frozen=True)
class FunctionInfo:
    name: str
    kind: FunctionKind
    source_package: Optional[str] = None

    def __post_init__(self):
        _nonempty_text(self.name, "name")
        object.__setattr__(self, "kind", _enum(FunctionKind, self.kind, "kind"))
        if self.source_package is not None:
            _nonempty_text(self.source_package, "source_package")
        _require(
            not (self.kind is FunctionKind.defined and self.source_package is not None),
            "source_package",
            "defined functions have no source package",
        )

    def sort_key(self):
        return (self.name, self.kind.value, self.source_package or "")

    def to_dict(self):
        return {"kind": self.kind.value, "name": self.name, "source_package": self.source_package}

    @classmethod
    def from_dict(cls, data):
        return cls(
            name=_get(data, "name", ""),
            kind=_get(data, "kind", ""),
            source_package=data.get("source_package"),
        )


@dataclass(frozen=True)
class DataArtifact:
    path: str
    role: ArtifactRole
    content_hash: str
    size_bytes: int

    def __post_init__(self):
        validate_relpath(self.path, "path")
        object.__setattr__(self, "role", _enum(ArtifactRole, self.role, "role"))
        _sha(self.content_hash, "content_hash")
        _require(
            isinstance(self.size_bytes, int) and not isinstance(self.size_bytes, bool)
            and self.size_bytes >= 0,
            "size_bytes",
            "must be a non-negative integer",
        )

    def sort_key(self):
        return (self.path, self.content_hash, self.role.value)

    def to_dict(self):
        return {
            "content_hash": self.content_hash,
            "path": self.path,
            "role": self.role.value,
            "size_bytes": self.size_bytes,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            path=_get(data, "path", ""),
            role=_get(data, "role", ""),
            content_hash=_get(data, "content_hash", ""),
            size_bytes=_get(data, "size_bytes", ""),
        )


def render_parameter_value(value) -> str:
    """Canonical string form of a parameter value (``True`` -> ``"true"``)."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "null"
    return str(value)


@dataclass(frozen=True)
class Parameter:
    name: str
    value: str

    def __post_init__(self):
        _nonempty_text(self.name, "name")
        _text(self.value, "value")

    def sort_key(self):
        return (self.name, self.value)

    def to_dict(self):
        return {"name": self.name, "value": self.value}

    @classmethod
    def from_dict(cls, data):
        return cls(name=_get(data, "name", ""), value=_get(data, "value", ""))


def check_unique_parameter_names(parameters, field_name="parameters"):
    names = [p.name for p in parameters]
    dupes = sorted({n for n in names if names.count(n) > 1})
    _require(not dupes, field_name, f"duplicate parameter names: {', '.join(dupes)}")


def sorted_dicts(items):
    return [item.to_dict() for item in sorted(items, key=lambda item: item.sort_key())]


def _load_set(cls, data, key):
    raw = _get(data, key, "")
    _require(isinstance(raw, list), key, "must be an array")
    out = []
    for index, item in enumerate(raw):
        with _Nested(f"{key}[{index}]"):
            out.append(cls.from_dict(item))
    return frozenset(out)


@dataclass(frozen=True)
class ExperimentManifest:
    user: UserInfo
    hardware: HardwareInfo
    os: OperatingSystemInfo
    script: ScriptInfo
    os_packages: FrozenSet[OsPackage] = frozenset()
    functions: FrozenSet[FunctionInfo] = frozenset()
    script_packages: FrozenSet[ScriptPackage] = frozenset()
    inputs: FrozenSet[DataArtifact] = frozenset()
    parameters: FrozenSet[Parameter] = frozenset()

    def __post_init__(self):
        for name, cls in (
            ("user", UserInfo),
            ("hardware", HardwareInfo),
            ("os", OperatingSystemInfo),
            ("script", ScriptInfo),
        ):
            _require(isinstance(getattr(self, name), cls), name, f"must be a {cls.__name__}")
        for name, cls in (
            ("os_packages", OsPackage),
            ("functions", FunctionInfo),
            ("script_packages", ScriptPackage),
            ("inputs", DataArtifact),
            ("parameters", Parameter),
        ):
            value = frozenset(getattr(self, name))
            object.__setattr__(self, name, value)
            _require(
                all(isinstance(item, cls) for item in value), name, f"must contain {cls.__name__}"
            )
        for artifact in self.inputs:
            _require(
                artifact.role is ArtifactRole.input,
                f"inputs[{artifact.path}].role",
                "every manifest input must have role 'input'",
            )
        check_unique_parameter_names(self.parameters)

    def to_dict(self):
        return {
            "functions": sorted_dicts(self.functions),
            "hardware": self.hardware.to_dict(),
            "inputs": sorted_dicts(self.inputs),
            "os": self.os.to_dict(),
            "os_packages": sorted_dicts(self.os_packages),
            "parameters": sorted_dicts(self.parameters),
            "script": self.script.to_dict(),
            "script_packages": sorted_dicts(self.script_packages),
            "user": self.user.to_dict(),
        }

    @classmethod
    def from_dict(cls, data):
        parts = {}
        for key, sub in (
            ("user", UserInfo),
            ("hardware", HardwareInfo),
            ("os", OperatingSystemInfo),
            ("script", ScriptInfo),
        ):
            raw = _get(data, key, "")
            with _Nested(key):
                parts[key] = sub.from_dict(raw)
        parts["os_packages"] = _load_set(OsPackage, data, "os_packages")
        parts["functions"] = _load_set(FunctionInfo, data, "functions")
        parts["script_packages"] = _load_set(ScriptPackage, data, "script_packages")
        parts["inputs"] = _load_set(DataArtifact, data, "inputs")
        parts["parameters"] = _load_set(Parameter, data, "parameters")
        return cls(**parts)

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError("<document>", f"invalid JSON: {exc}") from None
        return cls.from_dict(data)

    def content_hash(self) -> str:
        return sha256_bytes(canonical_bytes(self.to_dict()))


def read_manifest(path) -> ExperimentManifest:
    return ExperimentManifest.from_json(Path(path).read_text(encoding="utf-8"))


def write_manifest(path, manifest: ExperimentManifest) -> None:
    atomic_write(path, manifest.to_json())


@dataclass(frozen=True)
class AccessFlags:
    script_accessible: bool = True
    functions_accessible: bool = True


def _artifact_keys(artifacts):
    return {(a.path, a.content_hash) for a in artifacts}


def entity_diff(original: ExperimentManifest, candidate: ExperimentManifest) -> FrozenSet[EntityKind]:
    """Return the entity kinds that ``candidate`` preserves from ``original``.

    Scripts compare by content hash only, inputs by (path, hash); every other
    entity compares on all of its fields.  The user is never compared.
    """
    for label, manifest in (("original", original), ("candidate", candidate)):
        if not isinstance(manifest, ExperimentManifest):
            raise ValidationError(label, "must be an ExperimentManifest")
    checks = {
        EntityKind.Hardware: original.hardware == candidate.hardware,
        EntityKind.Os: original.os == candidate.os,
        EntityKind.OsPackages: original.os_packages == candidate.os_packages,
        EntityKind.Script: original.script.content_hash == candidate.script.content_hash,
        EntityKind.Functions: original.functions == candidate.functions,
        EntityKind.ScriptPackages: original.script_packages == candidate.script_packages,
        EntityKind.Inputs: _artifact_keys(original.inputs) == _artifact_keys(candidate.inputs),
        EntityKind.Parameters: original.parameters == candidate.parameters,
    }
    return frozenset(kind for kind, same in checks.items() if same)


REPEATABLE_NEEDS = ALL_ENTITIES
RERUNNABLE_NEEDS = frozenset(
    {
        EntityKind.Hardware,
        EntityKind.Os,
        EntityKind.OsPackages,
        EntityKind.Script,
        EntityKind.Functions,
        EntityKind.ScriptPackages,
    }
)
PORTABLE_NEEDS = frozenset(
    {
        EntityKind.Inputs,
        EntityKind.Script,
        EntityKind.Functions,
        EntityKind.Parameters,
        EntityKind.ScriptPackages,
    }
)
EXTENDABLE_NEEDS = frozenset({EntityKind.Os, EntityKind.OsPackages, EntityKind.ScriptPackages})


def classify_levels(preserved, access: AccessFlags) -> FrozenSet[ReproLevel]:
    """Every reproducibility level whose requirements hold.

    Levels combine, so the result is a set rather than a single grade.
    """
    preserved = frozenset(EntityKind(kind) for kind in preserved)
    has_access = bool(access.script_accessible and access.functions_accessible)
    levels = set()
    if preserved >= REPEATABLE_NEEDS:
        levels.add(ReproLevel.Repeatable)
    if preserved >= RERUNNABLE_NEEDS:
        levels.add(ReproLevel.ReRunnable)
    if preserved >= PORTABLE_NEEDS:
        levels.add(ReproLevel.Portable)
    if has_access and preserved >= EXTENDABLE_NEEDS:
        levels.add(ReproLevel.Extendable)
    if has_access:
        levels.add(ReproLevel.Modifiable)
    return frozenset(levels)


def sorted_levels(levels):
    order = list(ReproLevel)
    return sorted(levels, key=order.index)


def sorted_entities(kinds):
    order = list(EntityKind)
    return sorted(kinds, key=order.index)
