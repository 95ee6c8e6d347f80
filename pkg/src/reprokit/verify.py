"""Output comparison between two trials and the resulting verdict."""

from dataclasses import dataclass
from enum import Enum
from typing import FrozenSet, Optional, Tuple

from .canonical import canonical_json
from .errors import NotFoundError
from .model import (
    AccessFlags,
    EntityKind,
    ReproLevel,
    classify_levels,
    entity_diff,
    sorted_entities,
    sorted_levels,
)
from .store import TrialRecord

REPORT_FILENAME = "verification.report.json"

CHECK = "✓"
CROSS = "✗"


class FileStatus(str, Enum):
    Match = "Match"
    Mismatch = "Mismatch"
    MissingInCandidate = "MissingInCandidate"
    ExtraInCandidate = "ExtraInCandidate"


class Verdict(str, Enum):
    Repeatable = "Repeatable"
    NotRepeatable = "NotRepeatable"


@dataclass(frozen=True)
class FileComparison:
    path: str
    status: FileStatus
    original_hash: Optional[str]
    candidate_hash: Optional[str]

    def to_dict(self):
        return {
            "candidate_hash": self.candidate_hash,
            "original_hash": self.original_hash,
            "path": self.path,
            "status": self.status.value,
        }


@dataclass(frozen=True)
class OutputComparison:
    per_file: Tuple[FileComparison, ...]

    @property
    def all_match(self) -> bool:
        return all(f.status is FileStatus.Match for f in self.per_file)

    def to_dict(self):
        return {"all_match": self.all_match, "per_file": [f.to_dict() for f in self.per_file]}


def _norm(path):
    return path.replace("\\", "/")


def _produced(trial):
    # a later produce edge for the same path wins
    return {_norm(a.path): a.content_hash for a in trial.produce_edges}


def compare_outputs(original: TrialRecord, candidate: TrialRecord, watched=None) -> OutputComparison:
    """Compare produced files by path and content hash.

    With ``watched`` only those paths are compared; each must have been
    produced by at least one of the two trials.
    """
    orig, cand = _produced(original), _produced(candidate)
    if watched is not None:
        paths = sorted({_norm(p) for p in watched})
        for path in paths:
            if path not in orig and path not in cand:
                raise NotFoundError(
                    f"watched path {path!r} was produced by neither trial",
                    sorted(set(orig) | set(cand))[:5],
                )
    else:
        paths = sorted(set(orig) | set(cand))
    rows = []
    for path in paths:
        a, b = orig.get(path), cand.get(path)
        if a is None:
            status = FileStatus.ExtraInCandidate
        elif b is None:
            status = FileStatus.MissingInCandidate
        elif a == b:
            status = FileStatus.Match
        else:
            status = FileStatus.Mismatch
        rows.append(FileComparison(path, status, a, b))
    return OutputComparison(tuple(rows))


@dataclass(frozen=True)
class VerificationReport:
    original_trial: str
    candidate_trial: str
    comparison: OutputComparison
    preserved: FrozenSet[EntityKind]
    levels: FrozenSet[ReproLevel]
    access: AccessFlags

    @property
    def verdict(self) -> Verdict:
        if self.comparison.all_match and ReproLevel.Repeatable in self.levels:
            return Verdict.Repeatable
        return Verdict.NotRepeatable

    def to_dict(self):
        return {
            "access": {
                "functions_accessible": self.access.functions_accessible,
                "script_accessible": self.access.script_accessible,
            },
            "candidate_trial": self.candidate_trial,
            "comparison": self.comparison.to_dict(),
            "levels": [lv.value for lv in sorted_levels(self.levels)],
            "original_trial": self.original_trial,
            "preserved": [k.value for k in sorted_entities(self.preserved)],
            "verdict": self.verdict.value,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


def evaluate_reproduction(
    original: TrialRecord,
    candidate: TrialRecord,
    access: AccessFlags = AccessFlags(),
    watched=None,
) -> VerificationReport:
    comparison = compare_outputs(original, candidate, watched)
    preserved = entity_diff(original.manifest, candidate.manifest)
    return VerificationReport(
        original_trial=original.trial_id,
        candidate_trial=candidate.trial_id,
        comparison=comparison,
        preserved=preserved,
        levels=classify_levels(preserved, access),
        access=access,
    )


def _table(header, rows):
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]

    def line(cells):
        return "| " + " | ".join(str(c).ljust(w) for c, w in zip(cells, widths)) + " |"

    rule = "+-" + "-+-".join("-" * w for w in widths) + "-+"
    return [rule, line(header), rule, *(line(r) for r in rows), rule]


def render_table(report: VerificationReport) -> str:
    """Plain-text report: one column per compared file, check or cross per trial."""
    files = report.comparison.per_file
    header = ["Trial", *(f.path for f in files), "Verdict"]
    original = [f"{report.original_trial} (original)", *(CHECK for _ in files), "reference"]
    candidate = [
        f"{report.candidate_trial} (candidate)",
        *(CHECK if f.status is FileStatus.Match else CROSS for f in files),
        report.verdict.value,
    ]
    lines = _table(header, [original, candidate])
    missing = sorted(set(EntityKind) - report.preserved, key=list(EntityKind).index)
    lines.append("preserved: " + (", ".join(k.value for k in sorted_entities(report.preserved)) or "none"))
    lines.append("changed:   " + (", ".join(k.value for k in missing) or "none"))
    lines.append("levels:    " + (", ".join(lv.value for lv in sorted_levels(report.levels)) or "none"))
    return "\n".join(lines) + "\n"
