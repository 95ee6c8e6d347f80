"""Declarative environment specification with an append-only change log.

An EnvSpec stands in for a VM or container recipe: a base OS pin, OS packages,
language runtimes and script packages, followed by every modification made
while validating the experiment (for example a system library installed by
hand).  ``render_provision_script`` turns it into provisioning steps.
"""

import json
import shlex
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import FrozenSet, Optional, Tuple, Union

from .canonical import atomic_write, canonical_json, format_timestamp, parse_timestamp, utc_now
from .capture import Runtime
from .errors import ConsistencyError, ValidationError
from .model import Ecosystem, ExperimentManifest, OsPackage, ScriptPackage, sorted_dicts
from .scan import ScanResult, is_runtime_bundled

ENVSPEC_FILENAME = "envspec.json"
PROVISION_FILENAME = "provision.steps"
UNPINNED = "unpinned"


class ModAction(str, Enum):
    AddOsPackage = "AddOsPackage"
    AddScriptPackage = "AddScriptPackage"
    SetRuntime = "SetRuntime"
    Note = "Note"


_PAYLOAD_TYPES = {
    ModAction.AddOsPackage: OsPackage,
    ModAction.AddScriptPackage: ScriptPackage,
    ModAction.SetRuntime: Runtime,
    ModAction.Note: str,
}


@dataclass(frozen=True)
class Modification:
    seq: int
    action: ModAction
    payload: Union[OsPackage, ScriptPackage, Runtime, str]
    recorded_at: str

    def __post_init__(self):
        try:
            action = ModAction(self.action)
        except ValueError:
            raise ValidationError("action", f"unknown modification action {self.action!r}") from None
        object.__setattr__(self, "action", action)
        if not isinstance(self.payload, _PAYLOAD_TYPES[action]):
            raise ValidationError(
                "payload", f"{action.value} expects a {_PAYLOAD_TYPES[action].__name__}"
            )
        if not isinstance(self.seq, int) or self.seq < 1:
            raise ValidationError("seq", "must be a positive integer")
        object.__setattr__(self, "recorded_at", format_timestamp(parse_timestamp(self.recorded_at)))

    def to_dict(self):
        payload = self.payload if isinstance(self.payload, str) else self.payload.to_dict()
        return {
            "action": self.action.value,
            "payload": payload,
            "recorded_at": self.recorded_at,
            "seq": self.seq,
        }

    @classmethod
    def from_dict(cls, data):
        action = ModAction(data["action"])
        raw = data["payload"]
        payload = raw if action is ModAction.Note else _PAYLOAD_TYPES[action].from_dict(raw)
        return cls(seq=data["seq"], action=action, payload=payload, recorded_at=data["recorded_at"])


@dataclass(frozen=True)
class BaseOs:
    name: str
    version: str

    def to_dict(self):
        return {"name": self.name, "version": self.version}


@dataclass(frozen=True)
class EnvSpec:
    base_os: BaseOs
    os_packages: FrozenSet[OsPackage] = frozenset()
    runtimes: FrozenSet[Runtime] = frozenset()
    script_packages: FrozenSet[ScriptPackage] = frozenset()
    modification_log: Tuple[Modification, ...] = ()
    diagnostics: Tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "os_packages", frozenset(self.os_packages))
        object.__setattr__(self, "runtimes", frozenset(self.runtimes))
        object.__setattr__(self, "script_packages", frozenset(self.script_packages))
        object.__setattr__(self, "modification_log", tuple(self.modification_log))
        for expected, mod in enumerate(self.modification_log, 1):
            if mod.seq != expected:
                raise ValidationError(
                    "modification_log", f"sequence must be contiguous from 1; found {mod.seq} at {expected}"
                )

    def to_dict(self):
        return {
            "base_os": self.base_os.to_dict(),
            "modification_log": [m.to_dict() for m in self.modification_log],
            "os_packages": sorted_dicts(self.os_packages),
            "runtimes": sorted_dicts(self.runtimes),
            "script_packages": sorted_dicts(self.script_packages),
        }

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(
                base_os=BaseOs(data["base_os"]["name"], data["base_os"]["version"]),
                os_packages=frozenset(OsPackage.from_dict(p) for p in data["os_packages"]),
                runtimes=frozenset(Runtime.from_dict(r) for r in data["runtimes"]),
                script_packages=frozenset(ScriptPackage.from_dict(p) for p in data["script_packages"]),
                modification_log=tuple(Modification.from_dict(m) for m in data["modification_log"]),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError("envspec", f"malformed document: {exc}") from None

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def effective_os_packages(self) -> FrozenSet[OsPackage]:
        """OS packages after replaying the modification log."""
        extra = {m.payload for m in self.modification_log if m.action is ModAction.AddOsPackage}
        return frozenset(self.os_packages | extra)


def read_envspec(path) -> EnvSpec:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError("envspec", f"invalid JSON: {exc}") from None
    return EnvSpec.from_dict(data)


def write_envspec(path, spec: EnvSpec) -> None:
    atomic_write(path, spec.to_json())


def generate_envspec(
    manifest: ExperimentManifest,
    scan: ScanResult,
    lockfile,
    runtimes=(),
) -> EnvSpec:
    """Environment for running ``manifest``'s script: only packages it uses.

    Locked packages the script never references are dropped.  Referenced
    packages missing from the lock are kept as ``unpinned`` with a
    diagnostic.  Packages shipped with the language runtime are skipped.
    """
    if scan.script_hash is not None and scan.script_hash != manifest.script.content_hash:
        raise ConsistencyError(
            f"scan result is for script {scan.script_hash[:12]}, "
            f"manifest names {manifest.script.content_hash[:12]}"
        )
    language = manifest.script.language
    locked = {(p.ecosystem, p.name): p for p in lockfile}
    chosen, diagnostics = set(), []
    for name in sorted(scan.dependencies):
        pinned = locked.get((language, name))
        if pinned is not None:
            chosen.add(pinned)
        elif is_runtime_bundled(name, language):
            continue
        else:
            chosen.add(ScriptPackage(name, UNPINNED, language))
            diagnostics.append(f"{language.value} package {name} is not pinned in the lockfile")
    return EnvSpec(
        base_os=BaseOs(manifest.os.name, manifest.os.version),
        os_packages=manifest.os_packages,
        runtimes=frozenset(runtimes),
        script_packages=frozenset(chosen),
        diagnostics=tuple(diagnostics),
    )


def record_modification(spec: EnvSpec, action, payload, recorded_at: Optional[str] = None) -> EnvSpec:
    """Return a copy of ``spec`` with one more log entry; ``spec`` is untouched."""
    mod = Modification(
        seq=len(spec.modification_log) + 1,
        action=action,
        payload=payload,
        recorded_at=recorded_at or format_timestamp(utc_now()),
    )
    return EnvSpec(
        base_os=spec.base_os,
        os_packages=spec.os_packages,
        runtimes=spec.runtimes,
        script_packages=spec.script_packages,
        modification_log=spec.modification_log + (mod,),
    )


def _q(text):
    return shlex.quote(text)


def _package_kind(ecosystem: Ecosystem):
    return f"{ecosystem.value.lower()}-package"


def _install_script_package(pkg: ScriptPackage):
    lines = []
    version = pkg.version
    if version == UNPINNED:
        lines.append(f"# WARNING: {pkg.ecosystem.value} package {pkg.name} is unpinned")
        version = "*"
    lines.append(f"install {_package_kind(pkg.ecosystem)} {_q(pkg.name)} {_q(version)}")
    return lines


def render_provision_script(spec: EnvSpec):
    """Provisioning steps, one declarative ``install`` statement per line."""
    lines = [f"install base-os {_q(spec.base_os.name)} {_q(spec.base_os.version)}"]
    for pkg in sorted(spec.os_packages, key=lambda p: p.sort_key()):
        lines.append(f"install os-package {_q(pkg.name)} {_q(pkg.version)}")
    for rt in sorted(spec.runtimes, key=lambda r: r.sort_key()):
        lines.append(f"install runtime {_q(rt.ecosystem.value)} {_q(rt.version)}")
    for pkg in sorted(spec.script_packages, key=lambda p: p.sort_key()):
        lines.extend(_install_script_package(pkg))
    for mod in spec.modification_log:
        p = mod.payload
        if mod.action is ModAction.AddOsPackage:
            lines.append(f"install os-package {_q(p.name)} {_q(p.version)}")
        elif mod.action is ModAction.AddScriptPackage:
            lines.extend(_install_script_package(p))
        elif mod.action is ModAction.SetRuntime:
            lines.append(f"install runtime {_q(p.ecosystem.value)} {_q(p.version)}")
        else:
            lines.append("# note: " + " ".join(p.splitlines()))
    return lines


def render_text(spec: EnvSpec) -> str:
    return "".join(line + "\n" for line in render_provision_script(spec))
