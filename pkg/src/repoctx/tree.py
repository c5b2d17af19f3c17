"""Project structure tree: directories, files, classes, functions and globals.

The tree is built once from a repository checkout, frozen, and then only read.
Each definition node carries a 1-based inclusive line span so code segments can
be sliced verbatim from the stored file text.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

from repoctx import __version__
from repoctx.lang import FileFacts, LanguageAdapter, Reference, get_adapter

log = logging.getLogger(__name__)

TREE_FORMAT = "repoctx.tree/1"
DEFAULT_EXCLUDES = frozenset({"__pycache__", "node_modules", "venv", "site-packages"})

_LINE_RE = re.compile(r"[^\r\n]*(?:\r\n|\r|\n)|[^\r\n]+$")


class NoSourceFilesError(ValueError):
    pass


class ContractError(ValueError):
    """An operation was called outside its precondition."""


class EntityKind(str, Enum):
    DIRECTORY = "Directory"
    FILE = "File"
    CLASS = "Class"
    FUNCTION = "Function"
    GLOBAL_VARIABLE = "GlobalVariable"


DEFINITION_KINDS = frozenset({EntityKind.CLASS, EntityKind.FUNCTION, EntityKind.GLOBAL_VARIABLE})


@dataclass
class EntityNode:
    id: str
    kind: EntityKind
    name: str
    path: str
    span: tuple[int, int] | None = None
    children: list[str] = field(default_factory=list)
    parent: str | None = None
    qualname: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["span"] = list(self.span) if self.span else None
        return d


@dataclass(frozen=True)
class CrossFileMarker:
    file: str
    referenced_entity: str
    reference_lines: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"file": self.file, "referenced_entity": self.referenced_entity,
                "reference_lines": list(self.reference_lines)}


@dataclass(frozen=True)
class CodeSegment:
    path: str
    start_line: int
    end_line: int
    text: str
    source_kind: str  # definition | caller | error-function | error-lines | similarity-window
    node_id: str | None = None
    focus_lines: tuple[int, ...] = ()

    def key(self) -> tuple[str, int, int]:
        return (self.path, self.start_line, self.end_line)

    def overlaps(self, path: str, start: int, end: int) -> bool:
        return self.path == path and self.start_line <= end and start <= self.end_line

    def to_dict(self) -> dict:
        d = asdict(self)
        d["focus_lines"] = list(self.focus_lines)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> CodeSegment:
        return cls(d["path"], d["start_line"], d["end_line"], d["text"], d["source_kind"],
                   d.get("node_id"), tuple(d.get("focus_lines") or ()))


@dataclass
class TreeConfig:
    language: str = "python"
    builtins_file: str | None = None
    exclude_dirs: frozenset[str] = DEFAULT_EXCLUDES


def split_lines(text: str) -> list[str]:
    """Split keeping line endings; only ``\\n``, ``\\r\\n`` and ``\\r`` end a line."""
    return _LINE_RE.findall(text)


def strip_newline(text: str) -> str:
    for ending in ("\r\n", "\n", "\r"):
        if text.endswith(ending):
            return text[: -len(ending)]
    return text


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# parse results are reused across builds of the same repository (e.g. one
# tree per injected sample where only one file differs)
_PARSE_CACHE: dict[tuple[str, str, str], FileFacts] = {}
_PARSE_CACHE_LOCK = threading.Lock()
_PARSE_CACHE_MAX = 4096


class ProjectStructureTree:
    def __init__(self, repo_root: Path, adapter: LanguageAdapter):
        self.repo_root = repo_root
        self.adapter = adapter
        self.root = "."
        self.nodes: Mapping[str, EntityNode] = {}
        self.markers: tuple[CrossFileMarker, ...] = ()
        self.metadata: dict = {}
        self.frozen = False
        self._lines: dict[str, list[str]] = {}
        self._raw_lines: dict[str, list[str]] = {}
        self._facts: dict[str, FileFacts] = {}
        self._modules: dict[str, list[str]] = {}
        self._top_by_name: dict[str, list[str]] = {}
        self._any_by_name: dict[str, list[str]] = {}
        self._functions_by_file: dict[str, list[EntityNode]] = {}
        self._resolved: dict[str, list[tuple[Reference, tuple[str, ...]]]] = {}
        self._refs_by_target: dict[str, list[tuple[str, int]]] = {}

    def __setattr__(self, name, value):
        if getattr(self, "frozen", False):
            raise AttributeError("project structure tree is frozen")
        object.__setattr__(self, name, value)

    # -- basic accessors -----------------------------------------------------
    @property
    def tree_hash(self) -> str:
        return self.metadata["tree_hash"]

    @property
    def files(self) -> list[str]:
        return sorted(self._lines)

    def has_file(self, path: str) -> bool:
        return path in self._lines

    def is_skipped(self, path: str) -> bool:
        return path in self._raw_lines

    def lines(self, path: str) -> list[str]:
        if path in self._lines:
            return self._lines[path]
        if path in self._raw_lines:
            return self._raw_lines[path]
        raise KeyError(path)

    def line_count(self, path: str) -> int:
        return len(self.lines(path))

    def text_of(self, path: str, start: int, end: int) -> str:
        return strip_newline("".join(self.lines(path)[start - 1 : end]))

    def facts(self, path: str) -> FileFacts:
        return self._facts[path]

    def builtins(self) -> frozenset[str]:
        return self.adapter.builtins()

    def node(self, node_id: str) -> EntityNode:
        return self.nodes[node_id]

    def iter_nodes(self, kind: EntityKind | None = None) -> Iterable[EntityNode]:
        for node in self.nodes.values():
            if kind is None or node.kind == kind:
                yield node

    def functions_in(self, path: str) -> list[EntityNode]:
        return self._functions_by_file.get(path, [])

    def enclosing_function(self, path: str, start: int, end: int | None = None) -> EntityNode | None:
        end = start if end is None else end
        best = None
        for fn in self.functions_in(path):
            s, e = fn.span
            if s <= start and end <= e and (best is None or s >= best.span[0]):
                best = fn
        return best

    def region_of(self, path: str, line: int) -> tuple[tuple[int, int], EntityNode | None]:
        """Span of the function containing ``line``, else its top-level statement."""
        fn = self.enclosing_function(path, line)
        if fn is not None:
            return fn.span, fn
        best = None
        for s, e in self._facts[path].regions:
            if s <= line <= e and (best is None or e - s < best[1] - best[0]):
                best = (s, e)
        return (best or (line, line)), None

    # -- name resolution -------------------------------------------------------
    def module_files(self, dotted: str | None, origin: str) -> list[str]:
        if not dotted:
            return []
        package = self.adapter.package_parts(origin)
        if package:
            relative = ".".join(package + [dotted])
            if relative in self._modules:
                return self._modules[relative]
        if dotted in self._modules:
            return self._modules[dotted]
        return sorted(p for m, ps in self._modules.items() if m.endswith("." + dotted) for p in ps)

    def top_level_named(self, name: str, paths: Iterable[str] | None = None) -> list[str]:
        ids = self._top_by_name.get(name, [])
        if paths is None:
            return list(ids)
        paths = set(paths)
        return [i for i in ids if self.nodes[i].path in paths]

    def methods_named(self, name: str, owner: str | None = None, path: str | None = None) -> list[str]:
        out = []
        for i in self._any_by_name.get(name, []):
            node = self.nodes[i]
            parent = self.nodes[node.parent]
            if node.kind != EntityKind.FUNCTION or parent.kind != EntityKind.CLASS:
                continue
            if owner is not None and (parent.name != owner or (path is not None and node.path != path)):
                continue
            out.append(i)
        return out

    def _import_targets(self, name: str, module: str, origin: str, depth: int = 0) -> list[str]:
        files = self.module_files(module, origin)
        found = self.top_level_named(name, files)
        if found or depth >= 3:
            return found
        # follow one re-export hop, e.g. ``from .impl import name`` in a package __init__
        for path in files:
            facts = self._facts.get(path)
            target = facts.reexports.get(name) if facts else None
            if target is not None:
                found.extend(self._import_targets(target[1], target[0], path, depth + 1))
        return sorted(set(found), key=self._order_key)

    def _order_key(self, node_id: str) -> tuple[str, int, str]:
        node = self.nodes[node_id]
        return (node.path, node.span[0] if node.span else 0, node_id)

    def targets_of(self, ref: Reference, origin: str) -> tuple[str, ...]:
        """Entities a single reference points at, best resolution tier only."""
        if ref.kind == "name":
            if ref.binding == "module":
                found = self.top_level_named(ref.name, [origin])
            elif ref.binding == "import":
                found = self._import_targets(ref.name, ref.module, origin)
            else:
                found = [i for i in self.top_level_named(ref.name) if self.nodes[i].path != origin]
            return tuple(found)
        if ref.binding == "import":
            files = self.module_files(ref.module, origin)
            if files:
                return tuple(self._import_targets(ref.name, ref.module, origin))
            head, _, cls = ref.module.rpartition(".")
            if not (head and cls and ref.call):
                return ()
            classes = [i for i in self._import_targets(cls, head, origin)
                       if self.nodes[i].kind == EntityKind.CLASS]
            out = []
            for c in classes:
                out.extend(self.methods_named(ref.name, self.nodes[c].name, self.nodes[c].path))
            return tuple(sorted(out, key=self._order_key))
        if ref.binding in ("self", "class"):
            found = self.methods_named(ref.name, ref.owner, origin)
            if found:
                return tuple(found)
        return tuple(self.methods_named(ref.name))

    def resolved_references(self, path: str) -> list[tuple[Reference, tuple[str, ...]]]:
        return self._resolved.get(path, [])

    def references_to(self, node_id: str) -> list[tuple[str, int]]:
        return self._refs_by_target.get(node_id, [])

    def imported_files(self, origin: str) -> list[str]:
        out: set[str] = set()
        for module in self._facts[origin].imported_modules:
            out.update(self.module_files(module, origin))
        out.discard(origin)
        return sorted(out)

    # -- serialization ---------------------------------------------------------
    def _walk(self) -> Iterable[EntityNode]:
        stack = [self.root]
        while stack:
            node = self.nodes[stack.pop()]
            yield node
            stack.extend(reversed(node.children))

    def to_dict(self) -> dict:
        return {
            "format": TREE_FORMAT,
            "tool_version": __version__,
            "language": self.adapter.name,
            "root": self.root,
            "nodes": [n.to_dict() for n in self._walk()],
            "markers": [m.to_dict() for m in self.markers],
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _discover(root: Path, adapter: LanguageAdapter, excludes: frozenset[str]) -> list[str]:
    found = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = sorted(d for d in dirnames if not d.startswith(".") and d not in excludes)
        rel_dir = Path(dirpath).relative_to(root)
        for name in sorted(filenames):
            if name.endswith(adapter.extensions) and not name.startswith("."):
                found.append((rel_dir / name).as_posix())
    return sorted(found)


def _decode(data: bytes) -> str:
    text = data.decode("utf-8")
    return text[1:] if text.startswith("\ufeff") else text


def _parse_cached(adapter: LanguageAdapter, path: str, text: str, digest: str) -> FileFacts:
    key = (adapter.name, path, digest)
    with _PARSE_CACHE_LOCK:
        hit = _PARSE_CACHE.get(key)
    if hit is not None:
        return hit
    facts = adapter.parse(path, text)
    with _PARSE_CACHE_LOCK:
        if len(_PARSE_CACHE) >= _PARSE_CACHE_MAX:
            _PARSE_CACHE.clear()
        _PARSE_CACHE[key] = facts
    return facts


def build_tree(
    repo_root: str | os.PathLike,
    config: TreeConfig | None = None,
    overlay: Mapping[str, str] | None = None,
) -> ProjectStructureTree:
    """Parse every source file under ``repo_root`` into a frozen tree.

    ``overlay`` maps repository-relative paths to replacement file text; it is
    how a mutated sample is analysed without touching the snapshot on disk.
    """
    config = config or TreeConfig()
    root = Path(repo_root)
    if not root.is_dir():
        raise NoSourceFilesError(f"no source files: {root} is not a directory")
    adapter = get_adapter(config.language, config.builtins_file)
    overlay = dict(overlay or {})

    paths = sorted(set(_discover(root, adapter, config.exclude_dirs)) | set(overlay))
    tree = ProjectStructureTree(root, adapter)
    skipped = []
    digests = {}
    for path in paths:
        try:
            data = overlay[path].encode("utf-8") if path in overlay else (root / path).read_bytes()
            text = _decode(data)
        except (OSError, UnicodeDecodeError) as exc:
            log.warning("skipping unreadable file %s: %s", path, exc)
            skipped.append({"path": path, "reason": f"unreadable: {type(exc).__name__}"})
            continue
        digests[path] = _sha256(data)
        try:
            facts = _parse_cached(adapter, path, text, digests[path])
        except (SyntaxError, ValueError) as exc:
            log.warning("skipping unparseable file %s: %s", path, exc)
            reason = f"syntax error at line {getattr(exc, 'lineno', None)}"
            skipped.append({"path": path, "reason": reason})
            tree._raw_lines[path] = split_lines(text)
            continue
        tree._facts[path] = facts
        tree._lines[path] = split_lines(text)

    if not tree._facts:
        raise NoSourceFilesError(f"no source files: nothing parseable under {root}")

    _assemble(tree)
    hasher = hashlib.sha256()
    for path in sorted(digests):
        hasher.update(f"{path}\0{digests[path]}\n".encode())
    tree.metadata = {
        "skipped": skipped,
        "file_digests": digests,
        "tree_hash": hasher.hexdigest(),
        "counts": {k.value: sum(1 for n in tree.nodes.values() if n.kind == k) for k in EntityKind},
    }
    tree.frozen = True
    return tree


def _assemble(tree: ProjectStructureTree) -> None:
    nodes: dict[str, EntityNode] = {".": EntityNode(".", EntityKind.DIRECTORY, ".", ".")}

    def ensure_dir(rel: str) -> str:
        if rel in ("", "."):
            return "."
        node_id = rel + "/"
        if node_id not in nodes:
            parent = ensure_dir(rel.rpartition("/")[0])
            nodes[node_id] = EntityNode(node_id, EntityKind.DIRECTORY, rel.rpartition("/")[2], rel, parent=parent)
        return node_id

    for path, facts in sorted(tree._facts.items()):
        parent = ensure_dir(path.rpartition("/")[0])
        nodes[path] = EntityNode(path, EntityKind.FILE, path.rpartition("/")[2], path, parent=parent)
        by_qual: dict[str, str] = {}
        for d in facts.definitions:
            node_id = f"{path}::{d.qualname}"
            if node_id in nodes:
                node_id = f"{node_id}@{d.start}"
            owner = by_qual.get(d.parent, path) if d.parent else path
            nodes[node_id] = EntityNode(node_id, EntityKind(d.kind), d.name, path, (d.start, d.end),
                                        parent=owner, qualname=d.qualname)
            if d.kind == "Class":
                by_qual.setdefault(d.qualname, node_id)

    # children: directories before files, each by name; definitions by position
    for node in nodes.values():
        if node.parent is not None:
            nodes[node.parent].children.append(node.id)

    def child_key(node_id: str):
        n = nodes[node_id]
        if n.kind == EntityKind.DIRECTORY:
            return (0, n.name, 0)
        if n.kind == EntityKind.FILE:
            return (1, n.name, 0)
        return (2, "", n.span[0])

    for node in nodes.values():
        node.children.sort(key=lambda i: (child_key(i), i))

    tree.nodes = nodes
    for path, facts in tree._facts.items():
        tree._modules.setdefault(facts.module, []).append(path)
    for ps in tree._modules.values():
        ps.sort()

    for node in nodes.values():
        if node.kind in DEFINITION_KINDS:
            tree._any_by_name.setdefault(node.name, []).append(node.id)
            if nodes[node.parent].kind == EntityKind.FILE:
                tree._top_by_name.setdefault(node.name, []).append(node.id)
            if node.kind == EntityKind.FUNCTION:
                tree._functions_by_file.setdefault(node.path, []).append(node)
    for index in (tree._any_by_name, tree._top_by_name):
        for ids in index.values():
            ids.sort(key=tree._order_key)
    for fns in tree._functions_by_file.values():
        fns.sort(key=lambda n: n.span)

    marker_lines: dict[tuple[str, str], set[int]] = {}
    for path in sorted(tree._facts):
        resolved = []
        for ref in tree._facts[path].references:
            targets = tree.targets_of(ref, path)
            resolved.append((ref, targets))
            for t in targets:
                tree._refs_by_target.setdefault(t, []).append((path, ref.line))
                if nodes[t].path != path:
                    marker_lines.setdefault((path, t), set()).add(ref.line)
        tree._resolved[path] = resolved
    for refs in tree._refs_by_target.values():
        refs.sort()
    tree.markers = tuple(
        CrossFileMarker(f, t, tuple(sorted(lines))) for (f, t), lines in sorted(marker_lines.items())
    )
    tree.nodes = MappingProxyType(nodes)


def resolve_name(tree: ProjectStructureTree, name: str, origin: str) -> list[EntityNode]:
    """Every definition named ``name``, in resolution-priority order.

    Order: definitions in ``origin`` itself, then those in files ``origin``
    imports, then the rest of the repository by (path, start line).
    """
    ids = tree._any_by_name.get(name, [])
    imported = set(tree.imported_files(origin)) if tree.has_file(origin) else set()

    def tier(node_id: str) -> int:
        path = tree.nodes[node_id].path
        if path == origin:
            return 0
        return 1 if path in imported else 2

    ordered = sorted(ids, key=lambda i: (tier(i),) + tree._order_key(i))
    return [tree.nodes[i] for i in ordered]


def segment_of(tree: ProjectStructureTree, node: EntityNode, source_kind: str = "definition") -> CodeSegment:
    if node.kind not in DEFINITION_KINDS:
        raise ContractError(f"segment_of needs a Class, Function or GlobalVariable node, got {node.kind.value}")
    start, end = node.span
    return CodeSegment(node.path, start, end, tree.text_of(node.path, start, end), source_kind, node.id)
