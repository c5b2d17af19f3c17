"""Context retrieval from an error location over a frozen structure tree.

Four context sources are gathered: definitions of the functions and globals
invoked at the error location, other call sites of those entities, the
function containing the error, and the call sites of that function.
"""

from __future__ import annotations

import json
import keyword
import re
from dataclasses import dataclass, field
from typing import Mapping

from repoctx import __version__
from repoctx.tree import (
    CodeSegment,
    ContractError,
    DEFINITION_KINDS,
    EntityNode,
    ProjectStructureTree,
    segment_of,
)

BUNDLE_FORMAT = "repoctx.bundle/1"
SOURCES = ("definitions_of_eif", "callers_of_eif", "callers_of_ef")

_LOCATION_RE = re.compile(r"^(?P<path>.+):(?P<start>\d+)(?:-(?P<end>\d+))?$")
_IDENT_RE = re.compile(r"(?P<dot>\.\s*)?(?P<name>[A-Za-z_][A-Za-z0-9_]*)(?P<call>\s*\()?")


class ErrorLocationError(ValueError):
    pass


@dataclass(frozen=True)
class ErrorLocation:
    path: str
    start_line: int
    end_line: int
    note: str | None = None

    @classmethod
    def parse(cls, spec: str, note: str | None = None) -> ErrorLocation:
        """Parse ``PATH:START[-END]``."""
        m = _LOCATION_RE.match(spec.strip())
        if not m:
            raise ErrorLocationError(f"error location must look like PATH:START[-END], got {spec!r}")
        start = int(m["start"])
        end = int(m["end"]) if m["end"] else start
        return cls(m["path"], start, end, note)

    def __str__(self) -> str:
        if self.start_line == self.end_line:
            return f"{self.path}:{self.start_line}"
        return f"{self.path}:{self.start_line}-{self.end_line}"

    def contains(self, path: str, line: int) -> bool:
        return path == self.path and self.start_line <= line <= self.end_line

    def to_dict(self) -> dict:
        return {"path": self.path, "start_line": self.start_line, "end_line": self.end_line, "note": self.note}

    @classmethod
    def from_dict(cls, d: Mapping) -> ErrorLocation:
        return cls(d["path"], d["start_line"], d["end_line"], d.get("note"))


@dataclass(frozen=True)
class EIFEntry:
    name: str
    resolved: tuple[str, ...]


@dataclass
class EIFSet:
    entries: list[EIFEntry] = field(default_factory=list)
    degraded: bool = False

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def node_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for e in self.entries:
            for node_id in e.resolved:
                seen.setdefault(node_id, None)
        return list(seen)

    def to_list(self) -> list[dict]:
        return [{"name": e.name, "resolved": list(e.resolved)} for e in self.entries]


@dataclass
class SemanticInfo:
    signature: str
    summary: str
    generator: str
    failed: bool = False

    def to_dict(self) -> dict:
        return {"signature": self.signature, "summary": self.summary, "generator": self.generator,
                "failed": self.failed}

    @classmethod
    def from_dict(cls, d: Mapping) -> SemanticInfo:
        return cls(d["signature"], d["summary"], d["generator"], d.get("failed", False))


def _segments(items) -> list[dict]:
    return [s.to_dict() for s in items]


@dataclass
class ContextBundle:
    error_location: ErrorLocation
    error_function: CodeSegment | None
    error_lines: CodeSegment
    definitions_of_eif: list[CodeSegment] = field(default_factory=list)
    callers_of_eif: list[CodeSegment] = field(default_factory=list)
    callers_of_ef: list[CodeSegment] = field(default_factory=list)
    similar_segments: list[CodeSegment] = field(default_factory=list)
    eif: list[dict] = field(default_factory=list)
    enrichment: dict[str, SemanticInfo] = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    method: str = "rlce"

    @property
    def target(self) -> CodeSegment:
        """The code handed to the model for repair: the EF, else the raw error lines."""
        return self.error_function or self.error_lines

    def to_dict(self) -> dict:
        return {
            "format": BUNDLE_FORMAT,
            "method": self.method,
            "error_location": self.error_location.to_dict(),
            "error_function": self.error_function.to_dict() if self.error_function else None,
            "error_lines": self.error_lines.to_dict(),
            "definitions_of_eif": _segments(self.definitions_of_eif),
            "callers_of_eif": _segments(self.callers_of_eif),
            "callers_of_ef": _segments(self.callers_of_ef),
            "similar_segments": _segments(self.similar_segments),
            "eif": self.eif,
            "enrichment": {k: v.to_dict() for k, v in sorted(self.enrichment.items())},
            "flags": self.flags,
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> ContextBundle:
        seg = CodeSegment.from_dict
        return cls(
            error_location=ErrorLocation.from_dict(d["error_location"]),
            error_function=seg(d["error_function"]) if d.get("error_function") else None,
            error_lines=seg(d["error_lines"]),
            definitions_of_eif=[seg(s) for s in d.get("definitions_of_eif", [])],
            callers_of_eif=[seg(s) for s in d.get("callers_of_eif", [])],
            callers_of_ef=[seg(s) for s in d.get("callers_of_ef", [])],
            similar_segments=[seg(s) for s in d.get("similar_segments", [])],
            eif=list(d.get("eif", [])),
            enrichment={k: SemanticInfo.from_dict(v) for k, v in d.get("enrichment", {}).items()},
            flags=dict(d.get("flags", {})),
            provenance=dict(d.get("provenance", {})),
            method=d.get("method", "rlce"),
        )


def validate_location(tree: ProjectStructureTree, el: ErrorLocation) -> None:
    if not (tree.has_file(el.path) or tree.is_skipped(el.path)):
        raise ErrorLocationError(f"error location {el} is outside every file in the tree")
    n = tree.line_count(el.path)
    if not (1 <= el.start_line <= el.end_line <= n):
        raise ErrorLocationError(f"error location {el} is outside lines 1-{n} of {el.path}")


def _degraded_eif(tree: ProjectStructureTree, el: ErrorLocation) -> EIFSet:
    """Token-level fallback for error lines that cannot be analysed syntactically."""
    text = tree.text_of(el.path, el.start_line, el.end_line)
    skip = tree.builtins() | frozenset(keyword.kwlist)
    entries: dict[str, list[str]] = {}
    for m in _IDENT_RE.finditer(text):
        name = m["name"]
        if name in skip:
            continue
        if m["dot"]:
            if not m["call"]:
                continue
            ids = tree.methods_named(name)
        else:
            ids = tree.top_level_named(name)
            if not ids and not m["call"]:
                continue
        resolved = entries.setdefault(name, [])
        resolved.extend(i for i in ids if i not in resolved)
    return EIFSet([EIFEntry(k, tuple(v)) for k, v in entries.items()], degraded=True)


def extract_eif(tree: ProjectStructureTree, el: ErrorLocation) -> EIFSet:
    """Functions and globals invoked or read at the error location."""
    validate_location(tree, el)
    if not tree.has_file(el.path):
        return _degraded_eif(tree, el)
    entries: dict[str, list[str]] = {}
    for ref, targets in tree.resolved_references(el.path):
        if not (el.start_line <= ref.line <= el.end_line):
            continue
        if not (ref.call or targets):
            continue
        resolved = entries.setdefault(ref.name, [])
        resolved.extend(t for t in targets if t not in resolved)
    return EIFSet([EIFEntry(k, tuple(v)) for k, v in entries.items()])


def _sort_segments(segments) -> list[CodeSegment]:
    return sorted(segments, key=lambda s: (s.path, s.start_line, s.end_line))


def _merge_callers(segments) -> list[CodeSegment]:
    merged: dict[tuple, CodeSegment] = {}
    for seg in segments:
        prev = merged.get(seg.key())
        if prev is None:
            merged[seg.key()] = seg
        else:
            focus = tuple(sorted(set(prev.focus_lines) | set(seg.focus_lines)))
            merged[seg.key()] = CodeSegment(prev.path, prev.start_line, prev.end_line, prev.text,
                                            prev.source_kind, prev.node_id, focus)
    return _sort_segments(merged.values())


def find_callers(
    tree: ProjectStructureTree, target: EntityNode, exclude: ErrorLocation | None = None
) -> list[CodeSegment]:
    """Whole enclosing functions (or top-level statements) that use ``target``.

    References inside the target's own definition and inside ``exclude`` are
    ignored.
    """
    if target.kind not in DEFINITION_KINDS:
        raise ContractError(f"find_callers needs a Class, Function or GlobalVariable node, got {target.kind.value}")
    own_start, own_end = target.span
    focus: dict[tuple[str, int, int], tuple[EntityNode | None, set[int]]] = {}
    for path, line in tree.references_to(target.id):
        if path == target.path and own_start <= line <= own_end:
            continue
        if exclude is not None and exclude.contains(path, line):
            continue
        (start, end), fn = tree.region_of(path, line)
        focus.setdefault((path, start, end), (fn, set()))[1].add(line)
    out = []
    for (path, start, end), (fn, lines) in focus.items():
        out.append(CodeSegment(path, start, end, tree.text_of(path, start, end), "caller",
                               fn.id if fn else None, tuple(sorted(lines))))
    return _sort_segments(out)


def error_segments(tree: ProjectStructureTree, el: ErrorLocation) -> tuple[CodeSegment | None, CodeSegment]:
    lines = CodeSegment(el.path, el.start_line, el.end_line,
                        tree.text_of(el.path, el.start_line, el.end_line), "error-lines")
    if not tree.has_file(el.path):
        return None, lines
    fn = tree.enclosing_function(el.path, el.start_line, el.end_line)
    if fn is None:
        return None, lines
    return segment_of(tree, fn, "error-function"), lines


def provenance(tree: ProjectStructureTree) -> dict:
    return {"tool_version": __version__, "tree_hash": tree.tree_hash}


def retrieve(tree: ProjectStructureTree, el: ErrorLocation) -> ContextBundle:
    validate_location(tree, el)
    ef, lines = error_segments(tree, el)
    eif = extract_eif(tree, el)

    definitions = {}
    callers = []
    for node_id in eif.node_ids():
        node = tree.node(node_id)
        definitions[node_id] = segment_of(tree, node, "definition")
        callers.extend(find_callers(tree, node, exclude=el))
    callers_of_eif = [
        s for s in _merge_callers(callers) if not s.overlaps(el.path, el.start_line, el.end_line)
    ]
    callers_of_ef = []
    if ef is not None:
        callers_of_ef = find_callers(tree, tree.node(ef.node_id), exclude=el)

    return ContextBundle(
        error_location=el,
        error_function=ef,
        error_lines=lines,
        definitions_of_eif=_sort_segments(definitions.values()),
        callers_of_eif=callers_of_eif,
        callers_of_ef=callers_of_ef,
        eif=eif.to_list(),
        flags={"degraded": eif.degraded, "enrichment": "none"},
        provenance=provenance(tree),
        method="rlce",
    )

