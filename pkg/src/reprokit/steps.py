"""The three framework steps as library calls.

1. package: scan the script, pin its packages, write the environment spec
   and a deterministic bundle;
2. re-execute under capture, recording provenance;
3. gather bundle, environment spec and provenance export for publication.
"""

import logging
from dataclasses import replace
from pathlib import Path

from .bundle import SIDECAR_FILENAME, default_include, pack, read_bundle, verify_bundle, write_bundle
from .canonical import posix_relpath, sha256_file
from .capture import (
    CONFIG_FILENAME,
    RUNTIME_PREFIX,
    CaptureConfig,
    effective_interpreters,
    load_config,
    probe_environment,
)
from .envspec import ENVSPEC_FILENAME, generate_envspec, read_envspec, write_envspec
from .errors import IntegrityError, UsageError, ValidationError
from .model import (
    MANIFEST_FILENAME,
    ArtifactRole,
    DataArtifact,
    ExperimentManifest,
    ScriptInfo,
    UserInfo,
    read_manifest,
    write_manifest,
)
from .publish import (
    PublicationComponents,
    PublicationMetadata,
    assemble_publication,
    build_fair_manifest,
)
from .scan import LOCKFILE_NAME, LockFormat, language_for_path, read_lockfile, scan_script
from .store import ProvenanceStore

log = logging.getLogger(__name__)

def find_lockfile(workdir):
    """Locate a pin list: ``repro.lock``, ``requirements.txt`` or packrat's lock."""
    workdir = Path(workdir)
    for name, fmt in (
        (LOCKFILE_NAME, LockFormat.Canonical),
        ("requirements.txt", LockFormat.RequirementsStyle),
        ("packrat/packrat.lock", LockFormat.PackratStyle),
    ):
        path = workdir / name
        if path.is_file():
            return path, fmt
    return None, None


def load_lockfile(workdir):
    path, fmt = find_lockfile(workdir)
    if path is None:
        return frozenset()
    return read_lockfile(path.read_text(encoding="utf-8"), fmt)


def _declared_inputs(workdir, paths):
    artifacts = set()
    for rel in paths:
        full = Path(workdir) / rel
        if not full.is_file():
            raise ValidationError("declared_inputs", f"input {rel} does not exist in {workdir}")
        artifacts.add(DataArtifact(rel, ArtifactRole.input, sha256_file(full), full.stat().st_size))
    return frozenset(artifacts)


def describe_experiment(workdir, config: CaptureConfig, user: UserInfo, os_packages=frozenset()):
    """Build a fresh manifest and environment spec for the configured script."""
    workdir = Path(workdir)
    if not config.script:
        raise UsageError(f"no script configured in {CONFIG_FILENAME}")
    script_path = workdir / config.script
    if not script_path.is_file():
        raise UsageError(f"script {config.script} not found in {workdir}")
    language = language_for_path(config.script)
    source = script_path.read_text(encoding="utf-8")
    scan = scan_script(source, language)
    fingerprint = probe_environment(config.env_allowlist, effective_interpreters(config, language))
    for diag in fingerprint.diagnostics:
        log.warning("%s", diag)
    preliminary = ExperimentManifest(
        user=user,
        hardware=fingerprint.hardware,
        os=fingerprint.os,
        script=ScriptInfo(posix_relpath(config.script), language, scan.script_hash),
        os_packages=frozenset(p for p in os_packages if not p.name.startswith(RUNTIME_PREFIX)),
        functions=scan.functions,
        inputs=_declared_inputs(workdir, config.declared_inputs),
        parameters=config.parameter_set(),
    )
    envspec = generate_envspec(preliminary, scan, load_lockfile(workdir), fingerprint.runtimes)
    for diag in envspec.diagnostics:
        log.warning("%s", diag)
    manifest = replace(preliminary, script_packages=envspec.script_packages)
    return manifest, envspec, scan


def init_experiment(workdir, config: CaptureConfig, user: UserInfo, overwrite=False):
    """Write ``repro.toml`` and ``experiment.manifest.json`` for a new experiment."""
    workdir = Path(workdir)
    config_path = workdir / CONFIG_FILENAME
    if config_path.exists() and not overwrite:
        raise UsageError(f"{config_path} already exists")
    manifest, _, _ = describe_experiment(workdir, config, user)
    config_path.write_text(config.to_toml(), encoding="utf-8")
    write_manifest(workdir / MANIFEST_FILENAME, manifest)
    return manifest


def refresh_envspec(workdir, config=None):
    """Regenerate ``envspec.json`` and the manifest, keeping the modification log."""
    workdir = Path(workdir)
    config = config or load_config(workdir)
    current = read_manifest(workdir / MANIFEST_FILENAME)
    manifest, envspec, scan = describe_experiment(workdir, config, current.user, current.os_packages)
    spec_path = workdir / ENVSPEC_FILENAME
    if spec_path.is_file():
        previous = read_envspec(spec_path)
        envspec = replace(envspec, modification_log=previous.modification_log)
    write_envspec(spec_path, envspec)
    write_manifest(workdir / MANIFEST_FILENAME, manifest)
    return manifest, envspec, scan


def package_experiment(workdir, extra_include=()):
    """Step 1: scan, pin, write the environment spec and the bundle."""
    workdir = Path(workdir)
    if not (workdir / MANIFEST_FILENAME).is_file():
        raise UsageError(f"{MANIFEST_FILENAME} missing in {workdir}; run 'repro init' first")
    config = load_config(workdir)
    manifest, envspec, scan = refresh_envspec(workdir, config)
    include = [*default_include(manifest), CONFIG_FILENAME, *config.include, *extra_include]
    archive, bundle_manifest = pack(workdir, include, manifest)
    write_bundle(workdir, archive, bundle_manifest)
    return archive, bundle_manifest, envspec, scan


def publish_experiment(workdir, store: ProvenanceStore, metadata: PublicationMetadata):
    """Step 3: verify the bundle, then assemble ``publication/``."""
    workdir = Path(workdir)
    try:
        archive, bundle_manifest = read_bundle(workdir)
    except FileNotFoundError:
        raise UsageError(f"no bundle in {workdir}; run 'repro pack' first") from None
    report = verify_bundle(archive, bundle_manifest)
    if not report.ok:
        first = report.mismatches[0] if report.mismatches else SIDECAR_FILENAME
        raise IntegrityError(f"bundle does not match its manifest ({first})", first)
    envspec_path = workdir / ENVSPEC_FILENAME
    if not envspec_path.is_file():
        raise UsageError(f"{ENVSPEC_FILENAME} missing; run 'repro pack' first")
    envspec = read_envspec(envspec_path)
    export = store.export()
    fair = build_fair_manifest(bundle_manifest, envspec, export, metadata)
    components = PublicationComponents(archive, envspec, export, fair)
    return assemble_publication(workdir, components), fair
