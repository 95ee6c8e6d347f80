"""Black-box execution capture.

A run is bracketed by two snapshots of the experiment directory; whatever is
new or changed afterwards was produced by the run.  Inputs are what the user
declared, since nothing here traces system calls.
"""

import fnmatch
import json
import logging
import os
import platform
import re
import subprocess
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Tuple

from .canonical import (
    atomic_write,
    canonical_json,
    format_timestamp,
    new_ulid,
    posix_relpath,
    sha256_bytes,
    sha256_file,
    utc_now,
)
from .errors import ConfigurationError, SpawnError, StoreWriteError, ValidationError
from .model import (
    MANIFEST_FILENAME,
    ArtifactRole,
    DataArtifact,
    Ecosystem,
    ExperimentManifest,
    HardwareInfo,
    OperatingSystemInfo,
    OsPackage,
    Parameter,
    ScriptPackage,
    read_manifest,
    render_parameter_value,
)
from .store import STORE_FILENAME, ConsumeEdge, ProvenanceStore, TrialRecord

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

CONFIG_FILENAME = "repro.toml"
RESCUE_FILENAME = "trial.pending.json"
RUNTIME_PREFIX = "runtime:"

# never snapshot our own bookkeeping
DEFAULT_IGNORE = (
    STORE_FILENAME,
    STORE_FILENAME + "-journal",
    STORE_FILENAME + "-wal",
    STORE_FILENAME + "-shm",
    "*.lock",
    "experiment.bundle.tar",
    "experiment.bundle.manifest.json",
    RESCUE_FILENAME,
    "publication",
    "publication/*",
    "verification.report.json",
    "deposit.request.json",
    "__pycache__",
    "*.pyc",
)

DEFAULT_INTERPRETERS = {Ecosystem.Python: "python3", Ecosystem.R: "Rscript"}

_VERSION_TOKEN = re.compile(r"\d+(?:\.\d+)+")


@dataclass(frozen=True)
class SnapshotEntry:
    content_hash: str
    size_bytes: int
    mtime: str = field(compare=False)
    link_target: Optional[str] = None
    unreadable: bool = False
    mtime_ns: int = field(default=0, compare=False)


@dataclass(frozen=True)
class FileSnapshot:
    entries: Dict[str, SnapshotEntry]
    diagnostics: Tuple[str, ...] = field(default=(), compare=False)

    def __eq__(self, other):
        if not isinstance(other, FileSnapshot):
            return NotImplemented
        return self.entries == other.entries

    def paths(self):
        return list(self.entries)


def _ignored(relpath, patterns):
    name = relpath.rsplit("/", 1)[-1]
    return any(fnmatch.fnmatchcase(relpath, p) or fnmatch.fnmatchcase(name, p) for p in patterns)


def _mtime(stat_result):
    moment = datetime.fromtimestamp(int(stat_result.st_mtime), tz=timezone.utc)
    return format_timestamp(moment)


def snapshot_tree(directory, ignore=()) -> FileSnapshot:
    """Hash every regular file under ``directory`` that no ignore glob matches.

    Globs match against the relative POSIX path and against the base name.
    Symlinks are recorded by their target text and never followed.
    """
    root = Path(directory)
    if not root.is_dir():
        raise ValidationError("dir", f"{root} is not a readable directory")
    patterns = tuple(ignore)
    found = {}
    diagnostics = []
    for current, dirnames, filenames in os.walk(root, followlinks=False):
        rel_dir = posix_relpath(os.path.relpath(current, root))
        kept = []
        for d in sorted(dirnames):
            rel = f"{rel_dir}/{d}" if rel_dir else d
            full = Path(current) / d
            if _ignored(rel, patterns):
                continue
            if full.is_symlink():
                filenames.append(d)
                continue
            kept.append(d)
        dirnames[:] = kept
        for name in sorted(filenames):
            rel = f"{rel_dir}/{name}" if rel_dir else name
            if _ignored(rel, patterns):
                continue
            full = Path(current) / name
            try:
                st = full.lstat()
            except OSError as exc:
                diagnostics.append(f"{rel}: cannot stat ({exc.strerror})")
                continue
            if full.is_symlink():
                target = os.readlink(full).replace("\\", "/")
                data = target.encode("utf-8")
                found[rel] = SnapshotEntry(sha256_bytes(data), len(data), _mtime(st), link_target=target, mtime_ns=st.st_mtime_ns)
                continue
            if not full.is_file():
                continue
            try:
                digest = sha256_file(full)
            except OSError as exc:
                diagnostics.append(f"{rel}: unreadable ({exc.strerror or exc})")
                found[rel] = SnapshotEntry("", st.st_size, _mtime(st), unreadable=True, mtime_ns=st.st_mtime_ns)
                continue
            found[rel] = SnapshotEntry(digest, st.st_size, _mtime(st), mtime_ns=st.st_mtime_ns)
    ordered = {path: found[path] for path in sorted(found)}
    return FileSnapshot(ordered, tuple(diagnostics))


@dataclass(frozen=True)
class Runtime:
    ecosystem: Ecosystem
    version: str

    def __post_init__(self):
        object.__setattr__(self, "ecosystem", Ecosystem(self.ecosystem))

    def sort_key(self):
        return (self.ecosystem.value, self.version)

    def to_dict(self):
        return {"ecosystem": self.ecosystem.value, "version": self.version}

    @classmethod
    def from_dict(cls, data):
        return cls(data["ecosystem"], data["version"])

    def as_os_package(self) -> OsPackage:
        # the language runtime is itself an installed OS package
        return OsPackage(f"{RUNTIME_PREFIX}{self.ecosystem.value}", self.version)


@dataclass(frozen=True)
class EnvironmentFingerprint:
    os: OperatingSystemInfo
    hardware: HardwareInfo
    runtimes: FrozenSet[Runtime]
    env_vars: Dict[str, str]
    diagnostics: Tuple[str, ...] = ()

    def to_dict(self):
        return {
            "diagnostics": list(self.diagnostics),
            "env_vars": dict(sorted(self.env_vars.items())),
            "hardware": self.hardware.to_dict(),
            "os": self.os.to_dict(),
            "runtimes": [r.to_dict() for r in sorted(self.runtimes, key=Runtime.sort_key)],
        }


def _probe_os():
    system = platform.system() or "unknown"
    version = platform.version() or "unknown"
    name = system
    if system == "Linux":
        try:
            release = platform.freedesktop_os_release()
            name = release.get("NAME", system)
            version = release.get("VERSION_ID", release.get("VERSION", version))
        except OSError:
            pass
    elif system == "Darwin":
        name, version = "macOS", platform.mac_ver()[0] or version
    elif system == "Windows":
        version = platform.release() or version
    return OperatingSystemInfo(name=name, version=version, kernel=platform.release() or None)


def _cpu_model():
    try:
        with open("/proc/cpuinfo", encoding="utf-8", errors="replace") as fh:
            for line in fh:
                if line.lower().startswith(("model name", "hardware", "cpu model")):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or ""


def _probe_hardware(diagnostics):
    cpu = _cpu_model()
    if not cpu:
        cpu = "unknown"
        diagnostics.append("cpu model unknown")
    cores = os.cpu_count()
    if not cores:
        cores = 1
        diagnostics.append("logical core count unknown; recorded as 1")
    try:
        memory = os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES")
    except (ValueError, OSError, AttributeError):
        memory = 0
        diagnostics.append("total memory unknown; recorded as 0")
    arch = platform.machine() or "unknown"
    if arch == "unknown":
        diagnostics.append("architecture unknown")
    return HardwareInfo(cpu_model=cpu, logical_cores=cores, total_memory_bytes=memory, architecture=arch)


def runtime_version(interpreter) -> Optional[str]:
    """First version-shaped token printed by ``interpreter --version``; None if absent."""
    try:
        proc = subprocess.run(
            [interpreter, "--version"], capture_output=True, text=True, timeout=30, check=False
        )
    except (OSError, subprocess.SubprocessError):
        return None
    match = _VERSION_TOKEN.search(proc.stdout + "\n" + proc.stderr)
    return match.group(0) if match else None


def probe_environment(allowlist=(), interpreters=None) -> EnvironmentFingerprint:
    """Fingerprint the host: OS, hardware, configured runtimes, allow-listed env vars."""
    diagnostics = []
    interpreters = dict(interpreters or {})
    runtimes = set()
    for ecosystem, command in sorted(interpreters.items(), key=lambda kv: Ecosystem(kv[0]).value):
        version = runtime_version(command)
        if version is None:
            diagnostics.append(f"{Ecosystem(ecosystem).value} interpreter {command!r} not available")
            continue
        runtimes.add(Runtime(ecosystem, version))
    env_vars = {name: os.environ[name] for name in allowlist if name in os.environ}
    return EnvironmentFingerprint(
        os=_probe_os(),
        hardware=_probe_hardware(diagnostics),
        runtimes=frozenset(runtimes),
        env_vars=env_vars,
        diagnostics=tuple(diagnostics),
    )


_PY_VERSION_PROBE = """
import importlib, importlib.metadata, json, sys
out = {}
for name in sys.argv[1:]:
    try:
        out[name] = importlib.metadata.version(name)
        continue
    except Exception:
        pass
    try:
        mod = importlib.import_module(name)
        version = getattr(mod, "__version__", None)
        if isinstance(version, str):
            out[name] = version
    except Exception:
        pass
print(json.dumps(out))
"""

_R_VERSION_PROBE = (
    "args <- commandArgs(trailingOnly=TRUE); for (p in args) "
    "{ v <- tryCatch(as.character(packageVersion(p)), error=function(e) ''); cat(p, v, '\\n') }"
)


def resolve_package_versions(
    packages, interpreters, cwd, env=None
) -> Tuple[Dict[Tuple[str, str], str], List[str]]:
    """Ask each runtime which version of every script package it would load.

    Returns ({(ecosystem, name): version}, diagnostics).  Packages a runtime
    cannot resolve are left out.
    """
    resolved, diagnostics = {}, []
    by_eco = {}
    for pkg in packages:
        by_eco.setdefault(pkg.ecosystem, []).append(pkg.name)
    for ecosystem, names in sorted(by_eco.items(), key=lambda kv: kv[0].value):
        command = interpreters.get(ecosystem)
        if command is None:
            continue
        names = sorted(set(names))
        if ecosystem is Ecosystem.Python:
            argv = [command, "-c", _PY_VERSION_PROBE, *names]
        else:
            argv = [command, "-e", _R_VERSION_PROBE, "--args", *names]
        try:
            proc = subprocess.run(
                argv, cwd=cwd, env=env, capture_output=True, text=True, timeout=120, check=False
            )
        except (OSError, subprocess.SubprocessError) as exc:
            diagnostics.append(f"cannot query {ecosystem.value} package versions: {exc}")
            continue
        if ecosystem is Ecosystem.Python:
            try:
                found = json.loads(proc.stdout.strip().splitlines()[-1])
            except (IndexError, json.JSONDecodeError):
                diagnostics.append("Python package version probe produced no result")
                continue
        else:
            found = {}
            for line in proc.stdout.splitlines():
                parts = line.split()
                if len(parts) == 2:
                    found[parts[0]] = parts[1]
        for name in names:
            if name in found:
                resolved[(ecosystem.value, name)] = found[name]
    return resolved, diagnostics


@dataclass
class CaptureConfig:
    """Settings read from ``repro.toml`` in the experiment directory."""

    script: Optional[str] = None
    ignore: List[str] = field(default_factory=list)
    declared_inputs: List[str] = field(default_factory=list)
    parameters: Dict[str, str] = field(default_factory=dict)
    env_allowlist: List[str] = field(default_factory=list)
    interpreters: Dict[Ecosystem, str] = field(default_factory=dict)
    include: List[str] = field(default_factory=list)
    publish: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        try:
            self.interpreters = {Ecosystem(k): v for k, v in self.interpreters.items()}
        except ValueError as exc:
            raise ConfigurationError(f"interpreters: {exc}") from None

    def parameter_set(self) -> FrozenSet[Parameter]:
        return frozenset(Parameter(k, v) for k, v in self.parameters.items())

    def to_toml(self) -> str:
        def s(value):
            return json.dumps(value, ensure_ascii=False)

        def arr(values):
            return "[" + ", ".join(s(v) for v in values) + "]"

        lines = []
        if self.script is not None:
            lines.append(f"script = {s(self.script)}")
        lines.append(f"declared_inputs = {arr(self.declared_inputs)}")
        lines.append(f"ignore = {arr(self.ignore)}")
        lines.append(f"env_allowlist = {arr(self.env_allowlist)}")
        if self.include:
            lines.append(f"include = {arr(self.include)}")
        for name, value in sorted(self.parameters.items()):
            lines.append(f"parameters.{_toml_key(name)} = {s(value)}")
        for eco, command in sorted(self.interpreters.items(), key=lambda kv: kv[0].value):
            lines.append(f"interpreters.{eco.value} = {s(command)}")
        for key, value in sorted(self.publish.items()):
            rendered = arr(value) if isinstance(value, list) else s(value)
            lines.append(f"publish.{_toml_key(key)} = {rendered}")
        return "\n".join(lines) + "\n"


def _toml_key(name):
    return name if re.fullmatch(r"[A-Za-z0-9_-]+", name) else json.dumps(name)


def _string_list(data, key):
    value = data.get(key, [])
    if isinstance(value, str):
        value = [value]
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ConfigurationError(f"{CONFIG_FILENAME}: {key} must be a list of strings")
    return list(value)


def parse_config(text: str) -> CaptureConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{CONFIG_FILENAME}: {exc}") from None
    params = data.get("parameters", {})
    if not isinstance(params, dict):
        raise ConfigurationError(f"{CONFIG_FILENAME}: parameters must be a table")
    interpreters = {}
    for key, value in data.get("interpreters", {}).items():
        try:
            interpreters[Ecosystem(key)] = str(value)
        except ValueError:
            raise ConfigurationError(f"{CONFIG_FILENAME}: unknown ecosystem interpreters.{key}") from None
    script = data.get("script")
    if script is not None and not isinstance(script, str):
        raise ConfigurationError(f"{CONFIG_FILENAME}: script must be a string")
    return CaptureConfig(
        script=script,
        ignore=_string_list(data, "ignore"),
        declared_inputs=[posix_relpath(p) for p in _string_list(data, "declared_inputs")],
        parameters={str(k): render_parameter_value(v) for k, v in params.items()},
        env_allowlist=_string_list(data, "env_allowlist"),
        interpreters=interpreters,
        include=_string_list(data, "include"),
        publish=dict(data.get("publish", {})),
    )


def load_config(workdir) -> CaptureConfig:
    path = Path(workdir) / CONFIG_FILENAME
    if not path.is_file():
        return CaptureConfig()
    return parse_config(path.read_text(encoding="utf-8"))


def effective_interpreters(config: CaptureConfig, language: Optional[Ecosystem]):
    interpreters = dict(config.interpreters)
    if language is not None and language not in interpreters:
        interpreters[language] = DEFAULT_INTERPRETERS[language]
    return interpreters


def _envspec_os_packages(workdir):
    from .envspec import ENVSPEC_FILENAME, read_envspec

    path = Path(workdir) / ENVSPEC_FILENAME
    if not path.is_file():
        return frozenset()
    return read_envspec(path).effective_os_packages()


def trial_manifest(workdir, base: ExperimentManifest, fingerprint, config, pre: FileSnapshot, env=None):
    """The manifest as observed at run time on this machine.

    Host-dependent entities (OS, hardware, runtimes, resolved package
    versions) come from the probe; the script and inputs are re-hashed.
    """
    workdir = Path(workdir)
    diagnostics = []
    script_entry = pre.entries.get(base.script.path)
    script = base.script
    if script_entry is not None and script_entry.content_hash != base.script.content_hash:
        script = type(base.script)(base.script.path, base.script.language, script_entry.content_hash)
        diagnostics.append(f"script {base.script.path} changed since the manifest was written")
    inputs = set()
    for path in sorted({*(a.path for a in base.inputs), *config.declared_inputs}):
        entry = pre.entries.get(path)
        if entry is None:
            raise ValidationError("declared_inputs", f"input {path} does not exist in {workdir}")
        inputs.add(DataArtifact(path, ArtifactRole.input, entry.content_hash, entry.size_bytes))
    interpreters = effective_interpreters(config, base.script.language)
    resolved, resolve_diags = resolve_package_versions(base.script_packages, interpreters, workdir, env)
    diagnostics.extend(resolve_diags)
    packages = set()
    for pkg in base.script_packages:
        version = resolved.get((pkg.ecosystem.value, pkg.name), pkg.version)
        if version != pkg.version:
            diagnostics.append(
                f"{pkg.ecosystem.value} package {pkg.name}: manifest pins {pkg.version}, runtime has {version}"
            )
        packages.add(ScriptPackage(pkg.name, version, pkg.ecosystem))
    # runtimes recorded elsewhere are replaced by what this host actually has
    os_packages = {
        p
        for p in set(base.os_packages) | set(_envspec_os_packages(workdir))
        if not p.name.startswith(RUNTIME_PREFIX)
    }
    os_packages |= {r.as_os_package() for r in fingerprint.runtimes}
    parameters = config.parameter_set() or base.parameters
    manifest = ExperimentManifest(
        user=base.user,
        hardware=fingerprint.hardware,
        os=fingerprint.os,
        script=script,
        os_packages=frozenset(os_packages),
        functions=base.functions,
        script_packages=frozenset(packages),
        inputs=frozenset(inputs),
        parameters=parameters,
    )
    return manifest, diagnostics


def _child_stream(stream):
    """(argument for subprocess, text sink to forward to afterwards)."""
    if stream is None or isinstance(stream, int):
        return stream, None
    try:
        stream.fileno()
        return stream, None
    except (AttributeError, OSError, ValueError):
        # in-memory streams have no descriptor; collect and forward
        return subprocess.PIPE, stream


def run_captured(
    workdir,
    command,
    store: ProvenanceStore,
    config: Optional[CaptureConfig] = None,
    declared_inputs=(),
    parameters=None,
    manifest: Optional[ExperimentManifest] = None,
    env=None,
    notes="",
    stdout=None,
    stderr=None,
) -> TrialRecord:
    """Run ``command`` in ``workdir`` and record what it produced.

    A non-zero exit status is recorded, not raised.  If the store rejects the
    trial it is written to ``trial.pending.json`` before the error surfaces.
    """
    workdir = Path(workdir).resolve()
    command = [str(arg) for arg in command]
    if not command:
        raise ValidationError("command", "must not be empty")
    config = config if config is not None else load_config(workdir)
    if manifest is None:
        manifest_path = workdir / MANIFEST_FILENAME
        if not manifest_path.is_file():
            raise ValidationError("manifest", f"{manifest_path} missing; run 'repro init' first")
        manifest = read_manifest(manifest_path)
    declared = sorted({*config.declared_inputs, *(posix_relpath(p) for p in declared_inputs)})
    config = replace(config, declared_inputs=declared)
    if parameters is not None:
        config = replace(config, parameters={p.name: p.value for p in parameters})

    ignore = [*DEFAULT_IGNORE, *config.ignore]
    store_name = store.path.name
    ignore += [store_name, store_name + "-journal", store_name + ".lock"]
    pre = snapshot_tree(workdir, ignore)
    fingerprint = probe_environment(
        config.env_allowlist, effective_interpreters(config, manifest.script.language)
    )
    child_env = dict(os.environ if env is None else env)
    observed, diagnostics = trial_manifest(workdir, manifest, fingerprint, config, pre, child_env)
    diagnostics = [*fingerprint.diagnostics, *pre.diagnostics, *diagnostics]
    param_set = observed.parameters
    for p in param_set:
        child_env[f"REPRO_PARAM_{re.sub(r'[^A-Za-z0-9]', '_', p.name).upper()}"] = p.value
    started = utc_now()
    try:
        out_arg, out_sink = _child_stream(stdout)
        err_arg, err_sink = _child_stream(stderr)
        proc = subprocess.run(command, cwd=workdir, env=child_env, stdout=out_arg, stderr=err_arg, check=False)
    except (FileNotFoundError, PermissionError, NotADirectoryError) as exc:
        raise SpawnError(f"cannot start {command[0]!r}: {exc.strerror or exc}") from None
    finished = utc_now()
    for sink, data in ((out_sink, proc.stdout), (err_sink, proc.stderr)):
        if sink is not None and data:
            sink.write(data.decode("utf-8", errors="replace"))
    post = snapshot_tree(workdir, ignore)
    diagnostics.extend(post.diagnostics)

    declared_set = set(declared)
    produced = []
    for path, entry in post.entries.items():
        before = pre.entries.get(path)
        # identical bytes rewritten by the run still count as produced
        if before is not None and before == entry and before.mtime_ns == entry.mtime_ns:
            continue
        if entry.unreadable:
            continue
        role = ArtifactRole.output
        if path in declared_set:
            role = ArtifactRole.intermediate
            diagnostics.append(f"declared input {path} was modified by the run")
        produced.append(DataArtifact(path, role, entry.content_hash, entry.size_bytes))

    manifest_inputs = {a.path for a in observed.inputs}
    consumed = []
    for path in sorted(declared_set | (manifest_inputs & set(pre.entries) & set(post.entries))):
        entry = pre.entries.get(path)
        if entry is None:
            raise ValidationError("declared_inputs", f"input {path} does not exist in {workdir}")
        consumed.append(
            ConsumeEdge(DataArtifact(path, ArtifactRole.input, entry.content_hash, entry.size_bytes), param_set)
        )

    note_lines = [notes] if notes else []
    note_lines += [f"env {k}={v}" for k, v in sorted(fingerprint.env_vars.items())]
    note_lines += [f"diagnostic: {d}" for d in diagnostics]
    trial = TrialRecord(
        trial_id=new_ulid(),
        manifest=observed,
        command=tuple(command),
        started_at=format_timestamp(started),
        finished_at=format_timestamp(finished),
        exit_code=proc.returncode,
        consume_edges=tuple(consumed),
        produce_edges=tuple(produced),
        notes="\n".join(note_lines),
    )
    for d in diagnostics:
        log.info("%s", d)
    try:
        store.record_trial(trial)
    except Exception as exc:
        rescue = workdir / RESCUE_FILENAME
        atomic_write(rescue, canonical_json(trial.to_dict()))
        raise StoreWriteError(f"could not record trial {trial.trial_id}: {exc}", rescue) from exc
    return trial
