"""``repro`` command line front end.

Exit codes: 0 success, 1 verification mismatch, 2 usage or validation
error, 3 I/O or integrity failure, 4 parse error.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .bundle import read_bundle, unpack, verify_bundle
from .canonical import atomic_write, canonical_json
from .capture import CONFIG_FILENAME, CaptureConfig, Runtime, load_config, run_captured
from .envspec import (
    ENVSPEC_FILENAME,
    PROVISION_FILENAME,
    ModAction,
    read_envspec,
    record_modification,
    render_text,
    write_envspec,
)
from .errors import (
    EXIT_MISMATCH,
    EXIT_OK,
    EXIT_USAGE,
    IntegrityError,
    ReproError,
    UsageError,
)
from .model import MANIFEST_FILENAME, AccessFlags, Ecosystem, OsPackage, Parameter, ScriptPackage, UserInfo
from .publish import DEFAULT_TOKEN_ENV, PublicationMetadata, deposit
from .scan import language_for_path, scan_script
from .steps import init_experiment, package_experiment, publish_experiment, refresh_envspec
from .store import STORE_FILENAME, init_store, open_store
from .verify import REPORT_FILENAME, Verdict, evaluate_reproduction, render_table

log = logging.getLogger("reprokit")


def _emit(args, data, text):
    if args.json:
        sys.stdout.write(canonical_json(data))
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _pairs(items, what):
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"{what} must look like NAME=VALUE, got {item!r}")
        if key in out:
            raise UsageError(f"{what} {key!r} given twice")
        out[key] = value
    return out


def _ecosystem(text):
    for eco in Ecosystem:
        if eco.value.lower() == text.lower():
            return eco
    raise UsageError(f"unknown ecosystem {text!r}; expected R or Python")


def _workdir(args):
    path = Path(args.workdir).resolve()
    if not path.is_dir():
        raise UsageError(f"working directory {path} does not exist")
    return path


def _store_path(args):
    return Path(args.store) if args.store else _workdir(args) / STORE_FILENAME


# -- commands -----------------------------------------------------------


def cmd_init(args):
    workdir = _workdir(args)
    interpreters = {_ecosystem(k): v for k, v in _pairs(args.interpreter, "--interpreter").items()}
    config = CaptureConfig(
        script=args.script.replace("\\", "/"),
        declared_inputs=[p.replace("\\", "/") for p in args.input],
        parameters=_pairs(args.param, "--param"),
        env_allowlist=list(args.env),
        interpreters=interpreters,
        include=list(args.include),
    )
    user = UserInfo(args.user or os.environ.get("USER") or "unknown", args.identifier)
    manifest = init_experiment(workdir, config, user, overwrite=args.force)
    _emit(
        args,
        manifest.to_dict(),
        f"wrote {CONFIG_FILENAME} and {MANIFEST_FILENAME} for {manifest.script.path} "
        f"({len(manifest.script_packages)} script packages, {len(manifest.functions)} functions)",
    )
    return EXIT_OK


def cmd_scan(args):
    path = Path(args.script)
    if not path.is_absolute():
        path = _workdir(args) / path
    language = _ecosystem(args.language) if args.language else language_for_path(path)
    try:
        source = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    result = scan_script(source, language)
    lines = [f"dependencies: {', '.join(sorted(result.dependencies)) or 'none'}"]
    for f in sorted(result.functions, key=lambda f: f.sort_key()):
        source_pkg = f" ({f.source_package})" if f.source_package else ""
        lines.append(f"  {f.kind.value:8} {f.name}{source_pkg}")
    for d in result.diagnostics:
        lines.append(f"warning: line {d.line}: {d.message}")
    _emit(args, result.to_dict(), "\n".join(lines))
    return EXIT_OK


def cmd_pack(args):
    workdir = _workdir(args)
    _, bundle_manifest, envspec, _ = package_experiment(workdir, args.include)
    for diag in envspec.diagnostics:
        print(f"warning: {diag}", file=sys.stderr)
    _emit(
        args,
        bundle_manifest.to_dict(),
        f"packed {len(bundle_manifest.entries)} files, bundle sha256 {bundle_manifest.bundle_hash}",
    )
    return EXIT_OK


def cmd_restore(args):
    source = Path(args.bundle).resolve() if args.bundle else _workdir(args)
    try:
        archive, bundle_manifest = read_bundle(source)
    except FileNotFoundError:
        raise UsageError(f"no bundle in {source}; run 'repro pack' first") from None
    report = verify_bundle(archive, bundle_manifest)
    if not report.ok:
        first = report.mismatches[0] if report.mismatches else None
        raise IntegrityError(f"bundle does not match its manifest ({first or 'archive hash'})", first)
    restored = unpack(archive, args.dest, bundle_manifest)
    _emit(args, restored.to_dict(), f"restored {len(restored.entries)} files into {args.dest}")
    return EXIT_OK


def cmd_run(args):
    workdir = _workdir(args)
    command = list(args.cmd)
    if command and command[0] == "--":
        command = command[1:]
    if not command:
        raise UsageError("nothing to run; usage: repro run -- COMMAND [ARGS...]")
    store = init_store(_store_path(args))
    params = _pairs(args.param, "--param")
    parameters = [Parameter(k, v) for k, v in params.items()] if params else None
    trial = run_captured(
        workdir,
        command,
        store,
        declared_inputs=args.input,
        parameters=parameters,
        notes=args.note or "",
        stdout=sys.stderr if args.json else None,
    )
    produced = ", ".join(a.path for a in trial.produce_edges) or "nothing"
    _emit(
        args,
        trial.to_dict(),
        f"trial {trial.trial_id}: exit {trial.exit_code}, produced {produced}",
    )
    return EXIT_OK


def cmd_verify(args):
    store = open_store(_store_path(args))
    original = store.get_trial(args.original)
    candidate = store.get_trial(args.candidate)
    access = AccessFlags(not args.no_script_access, not args.no_functions_access)
    report = evaluate_reproduction(original, candidate, access, args.watch or None)
    atomic_write(_workdir(args) / REPORT_FILENAME, report.to_json())
    _emit(args, report.to_dict(), render_table(report))
    return EXIT_OK if report.verdict is Verdict.Repeatable else EXIT_MISMATCH


def _load_spec(workdir):
    path = workdir / ENVSPEC_FILENAME
    if not path.is_file():
        raise UsageError(f"{ENVSPEC_FILENAME} missing; run 'repro env generate' first")
    return read_envspec(path)


def cmd_env_generate(args):
    workdir = _workdir(args)
    if not (workdir / MANIFEST_FILENAME).is_file():
        raise UsageError(f"{MANIFEST_FILENAME} missing; run 'repro init' first")
    _, spec, _ = refresh_envspec(workdir)
    for diag in spec.diagnostics:
        print(f"warning: {diag}", file=sys.stderr)
    _emit(args, spec.to_dict(), f"wrote {ENVSPEC_FILENAME} ({len(spec.script_packages)} script packages)")
    return EXIT_OK


def cmd_env_log(args):
    workdir = _workdir(args)
    spec = _load_spec(workdir)
    if args.action == "add-os-package":
        action, payload = ModAction.AddOsPackage, OsPackage(args.name, args.version)
    elif args.action == "add-script-package":
        action = ModAction.AddScriptPackage
        payload = ScriptPackage(args.name, args.version, _ecosystem(args.ecosystem))
    elif args.action == "set-runtime":
        action, payload = ModAction.SetRuntime, Runtime(_ecosystem(args.ecosystem), args.version)
    else:
        action, payload = ModAction.Note, " ".join(args.text)
    spec = record_modification(spec, action, payload)
    write_envspec(workdir / ENVSPEC_FILENAME, spec)
    entry = spec.modification_log[-1]
    _emit(args, entry.to_dict(), f"logged modification {entry.seq}: {action.value}")
    return EXIT_OK


def cmd_env_render(args):
    workdir = _workdir(args)
    text = render_text(_load_spec(workdir))
    atomic_write(workdir / PROVISION_FILENAME, text)
    _emit(args, {"path": PROVISION_FILENAME, "steps": text.splitlines()}, text)
    return EXIT_OK


def cmd_query_lineage(args):
    store = open_store(_store_path(args))
    chain = store.lineage(args.path, args.trial)
    lines = [
        f"{chain.output.path} ({chain.output.content_hash[:12]})",
        f"  produced by trial {chain.trial_id}",
        f"  script {chain.script.path} ({chain.script.content_hash[:12]})",
    ]
    for edge in chain.consumed:
        params = ", ".join(f"{p.name}={p.value}" for p in sorted(edge.parameters, key=lambda p: p.name))
        lines.append(f"  consumed {edge.artifact.path} ({edge.artifact.content_hash[:12]}) [{params}]")
    lines.append(f"  on {chain.os.name} {chain.os.version}, {chain.hardware.cpu_model}")
    for pkg in sorted(chain.script_packages, key=lambda p: p.sort_key()):
        lines.append(f"  with {pkg.ecosystem.value} {pkg.name} {pkg.version}")
    _emit(args, chain.to_dict(), "\n".join(lines))
    return EXIT_OK


def cmd_query_trials(args):
    store = open_store(_store_path(args))
    trials = store.list_trials(args.script_hash, args.since, args.until)
    lines = [
        f"{t.trial_id}  {t.started_at}  exit {t.exit_code}  {t.script_path}  "
        f"in {t.consumed} out {t.produced}"
        for t in trials
    ]
    _emit(args, [t.to_dict() for t in trials], "\n".join(lines) or "no trials")
    return EXIT_OK


def cmd_export(args):
    store = open_store(_store_path(args))
    dump = store.export()
    if args.output:
        atomic_write(args.output, dump)
        _emit(args, {"path": args.output}, f"wrote {args.output}")
    else:
        sys.stdout.write(dump)
    return EXIT_OK


def cmd_import(args):
    try:
        dump = Path(args.dump).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {args.dump}: {exc.strerror}") from None
    store = init_store(_store_path(args))
    store.import_dump(dump)
    _emit(args, store.row_counts(), f"imported into {store.path}")
    return EXIT_OK


def cmd_publish(args):
    workdir = _workdir(args)
    defaults = load_config(workdir).publish
    creators = args.creator or defaults.get("creators") or []
    if isinstance(creators, str):
        creators = [creators]
    metadata = PublicationMetadata(
        title=args.title or defaults.get("title", ""),
        creators=tuple(UserInfo(c) for c in creators),
        license=args.license or defaults.get("license", ""),
        description=args.description or defaults.get("description", ""),
        keywords=tuple(args.keyword or defaults.get("keywords", [])),
        identifier=args.identifier or defaults.get("identifier"),
    )
    store = open_store(_store_path(args))
    publication, fair = publish_experiment(workdir, store, metadata)
    result = {"fair_manifest": fair.to_dict(), "publication": str(publication)}
    lines = [f"assembled {publication} ({fair.identifier})"]
    endpoint = args.endpoint or defaults.get("endpoint")
    if endpoint:
        receipt = deposit(publication, endpoint, args.token_env, dry_run=args.dry_run)
        result["deposit"] = receipt.to_dict()
        lines.append(f"deposit: {receipt.status.value} {receipt.response_summary}")
    _emit(args, result, "\n".join(lines))
    return EXIT_OK


# -- parser -------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-C", "--workdir", default=argparse.SUPPRESS, help="experiment directory")
    common.add_argument("--store", default=argparse.SUPPRESS, help="provenance database file")
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS, help="machine-readable output")

    parser = argparse.ArgumentParser(prog="repro", description="Capture, package and verify computational experiments.")
    parser.add_argument("--version", action="version", version=f"repro {__version__}")
    parser.add_argument("-C", "--workdir", default=".", help="experiment directory (default: .)")
    parser.add_argument("--store", default=None, help=f"provenance database file (default: WORKDIR/{STORE_FILENAME})")
    parser.add_argument("--json", action="store_true", default=False, help="machine-readable output")
    parser.add_argument("-v", "--verbose", action="store_true", help="log diagnostics to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, func, help_text, parents=(common,)):
        p = sub.add_parser(name, help=help_text, parents=list(parents))
        p.set_defaults(func=func)
        return p

    p = add("init", cmd_init, "describe a new experiment")
    p.add_argument("script", help="the experiment script (.R or .py)")
    p.add_argument("--input", action="append", default=[], help="declared input file (repeatable)")
    p.add_argument("--param", action="append", default=[], help="parameter NAME=VALUE (repeatable)")
    p.add_argument("--user", help="name recorded as the experimenter")
    p.add_argument("--identifier", help="experimenter identifier such as an ORCID")
    p.add_argument("--include", action="append", default=[], help="extra bundle glob (repeatable)")
    p.add_argument("--interpreter", action="append", default=[], help="ECOSYSTEM=COMMAND")
    p.add_argument("--env", action="append", default=[], help="environment variable to record")
    p.add_argument("--force", action="store_true", help=f"overwrite an existing {CONFIG_FILENAME}")

    p = add("scan", cmd_scan, "list a script's packages and functions")
    p.add_argument("script")
    p.add_argument("--language", help="R or Python (default: from the file extension)")

    p = add("pack", cmd_pack, "step 1: scan, pin, write envspec.json and the bundle")
    p.add_argument("--include", action="append", default=[], help="extra glob (repeatable)")

    p = add("restore", cmd_restore, "unpack the bundle into an empty directory")
    p.add_argument("dest")
    p.add_argument("--bundle", help="directory holding the bundle (default: WORKDIR)")

    p = add("run", cmd_run, "step 2: run a command under provenance capture")
    p.add_argument("--input", action="append", default=[], help="declared input (repeatable)")
    p.add_argument("--param", action="append", default=[], help="parameter NAME=VALUE (repeatable)")
    p.add_argument("--note", help="free-text note stored with the trial")
    p.add_argument("cmd", nargs=argparse.REMAINDER, help="-- COMMAND [ARGS...]")

    p = add("verify", cmd_verify, "compare two trials and classify the reproduction")
    p.add_argument("original")
    p.add_argument("candidate")
    p.add_argument("--watch", action="append", default=[], help="only compare this output (repeatable)")
    p.add_argument("--no-script-access", action="store_true")
    p.add_argument("--no-functions-access", action="store_true")

    p = add("env", None, "environment specification")
    env_sub = p.add_subparsers(dest="env_command", metavar="ACTION")
    env_sub.required = True
    e = env_sub.add_parser("generate", parents=[common], help=f"write {ENVSPEC_FILENAME}")
    e.set_defaults(func=cmd_env_generate)
    e = env_sub.add_parser("render", parents=[common], help=f"write {PROVISION_FILENAME}")
    e.set_defaults(func=cmd_env_render)
    e = env_sub.add_parser("log", parents=[common], help="append to the modification log")
    log_sub = e.add_subparsers(dest="action", metavar="ACTION")
    log_sub.required = True
    a = log_sub.add_parser("add-os-package", parents=[common])
    a.add_argument("name")
    a.add_argument("version")
    a = log_sub.add_parser("add-script-package", parents=[common])
    a.add_argument("ecosystem")
    a.add_argument("name")
    a.add_argument("version")
    a = log_sub.add_parser("set-runtime", parents=[common])
    a.add_argument("ecosystem")
    a.add_argument("version")
    a = log_sub.add_parser("note", parents=[common])
    a.add_argument("text", nargs="+")
    e.set_defaults(func=cmd_env_log)

    p = add("query", None, "query the provenance store")
    q_sub = p.add_subparsers(dest="query_command", metavar="QUERY")
    q_sub.required = True
    q = q_sub.add_parser("lineage", parents=[common], help="trace an output back to its trial")
    q.add_argument("path")
    q.add_argument("--trial")
    q.set_defaults(func=cmd_query_lineage)
    q = q_sub.add_parser("trials", parents=[common], help="list recorded trials")
    q.add_argument("--script-hash")
    q.add_argument("--since")
    q.add_argument("--until")
    q.set_defaults(func=cmd_query_trials)

    p = add("export", cmd_export, "dump the provenance store as canonical JSON")
    p.add_argument("-o", "--output", help="file to write (default: stdout)")

    p = add("import", cmd_import, "load a dump into an empty store")
    p.add_argument("dump")

    p = add("publish", cmd_publish, "step 3: assemble publication/ and optionally deposit it")
    p.add_argument("--title")
    p.add_argument("--license")
    p.add_argument("--creator", action="append", default=[])
    p.add_argument("--description")
    p.add_argument("--keyword", action="append", default=[])
    p.add_argument("--identifier")
    p.add_argument("--endpoint", help="repository deposit URL")
    p.add_argument("--dry-run", action=argparse.BooleanOptionalAction, default=True,
                   help="write the request instead of sending it (default)")
    p.add_argument("--token-env", default=DEFAULT_TOKEN_ENV, help="variable holding the deposit token")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ReproError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


def run():
    sys.exit(main())
