"""Single-line interface-inconsistency mutations at cross-file call sites.

Each rule breaks the agreement between a call site (in the *main* function)
and the function it calls (the *context* function, defined in another file):

    NP   add or drop one argument
    OP   swap two positional arguments
    NRV  add or drop one unpacking target of the returned value
    ORV  swap two unpacking targets
    CP   replace one argument with another in-scope name or a literal of a
         different kind
    CRV  change how the returned value is consumed (index, attribute)

Mutations are spliced into the original line by byte offset, so everything
outside the edited span is preserved exactly.
"""

from __future__ import annotations

import ast
import hashlib
import json
import random
import shutil
import textwrap
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

from repoctx.retriever import ErrorLocation
from repoctx.tree import EntityKind, EntityNode, ProjectStructureTree, split_lines

MANIFEST = "manifest.jsonl"
_LITERAL_POOL = {"int": "0", "str": '""', "none": "None", "list": "[]", "float": "0.5", "bool": "True"}
_EXTRA_TARGETS = ("extra", "rest", "aux")
_EXTRA_ARGS = ("0", "1", "2", "4", "None")


class DisruptionRule(str, Enum):
    NRV = "NRV"
    NP = "NP"
    ORV = "ORV"
    OP = "OP"
    CRV = "CRV"
    CP = "CP"


class RuleNotApplicable(ValueError):
    def __init__(self, rule: DisruptionRule, reason: str):
        super().__init__(f"{rule.value} not applicable: {reason}")
        self.rule = rule
        self.reason = reason


@dataclass(frozen=True)
class CallSitePair:
    main_function: str  # node id of the calling function
    context_function: str  # node id of the callee
    path: str
    call_line: int
    call_col: int

    def to_dict(self) -> dict:
        return {"main_function": self.main_function, "context_function": self.context_function,
                "path": self.path, "call_line": self.call_line, "call_col": self.call_col}

    @classmethod
    def from_dict(cls, d: Mapping) -> CallSitePair:
        return cls(d["main_function"], d["context_function"], d["path"], d["call_line"], d["call_col"])


@dataclass
class BenchmarkSample:
    sample_id: str
    repo_snapshot: str
    snapshot_digest: str
    rule: DisruptionRule
    error_location: ErrorLocation
    buggy_line: str
    ground_truth_line: str
    pair: CallSitePair
    seed: int
    mutation: dict = field(default_factory=dict)

    @property
    def path(self) -> str:
        return self.error_location.path

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "repo_snapshot": self.repo_snapshot,
            "snapshot_digest": self.snapshot_digest,
            "rule": self.rule.value,
            "error_location": self.error_location.to_dict(),
            "buggy_line": self.buggy_line,
            "ground_truth_line": self.ground_truth_line,
            "pair": self.pair.to_dict(),
            "seed": self.seed,
            "mutation": self.mutation,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> BenchmarkSample:
        return cls(
            sample_id=d["sample_id"],
            repo_snapshot=d["repo_snapshot"],
            snapshot_digest=d["snapshot_digest"],
            rule=DisruptionRule(d["rule"]),
            error_location=ErrorLocation.from_dict(d["error_location"]),
            buggy_line=d["buggy_line"],
            ground_truth_line=d["ground_truth_line"],
            pair=CallSitePair.from_dict(d["pair"]),
            seed=d["seed"],
            mutation=dict(d.get("mutation", {})),
        )


# -- enumeration ---------------------------------------------------------------
def enumerate_targets(tree: ProjectStructureTree) -> list[CallSitePair]:
    """Cross-file calls from inside a function to a repository-defined function.

    Call sites whose callee resolves to more than one function are skipped:
    the ground truth of a mutation must name a single context function.
    """
    pairs = []
    for path in tree.files:
        for ref, targets in tree.resolved_references(path):
            if not ref.call:
                continue
            callees = [t for t in targets if tree.node(t).kind == EntityKind.FUNCTION]
            if len(callees) != 1 or tree.node(callees[0]).path == path:
                continue
            main = tree.enclosing_function(path, ref.line)
            if main is None:
                continue
            pairs.append(CallSitePair(main.id, callees[0], path, ref.line, ref.col))
    pairs.sort(key=lambda p: (p.path, p.call_line, p.call_col, p.context_function))
    return pairs


# -- locating the call -----------------------------------------------------------
def _name_col(func: ast.expr) -> int | None:
    if isinstance(func, ast.Name):
        return func.col_offset
    if isinstance(func, ast.Attribute):
        return func.end_col_offset - len(func.attr)
    return None


def _parents(module: ast.Module) -> dict[ast.AST, ast.AST]:
    out = {}
    for node in ast.walk(module):
        for child in ast.iter_child_nodes(node):
            out[child] = node
    return out


@dataclass
class _Site:
    line: bytes  # the original physical line, newline included
    call: ast.Call
    parent: ast.AST
    assign: ast.Assign | None
    main: ast.FunctionDef | ast.AsyncFunctionDef | None


def _locate(text: str, pair: CallSitePair, rule: DisruptionRule) -> tuple[list[str], _Site]:
    module = ast.parse(text)
    lines = split_lines(text)
    parents = _parents(module)
    site = None
    for node in ast.walk(module):
        if (isinstance(node, ast.Call) and _name_col(node.func) == pair.call_col
                and getattr(node.func, "end_lineno", None) == pair.call_line):
            site = node
            break
    if site is None:
        raise RuleNotApplicable(rule, f"no call found at {pair.path}:{pair.call_line}")
    if site.lineno != site.end_lineno:
        raise RuleNotApplicable(rule, "call spans several lines")
    parent = parents[site]
    assign = parent if isinstance(parent, ast.Assign) and parent.value is site else None
    main = parent
    while main is not None and not isinstance(main, (ast.FunctionDef, ast.AsyncFunctionDef)):
        main = parents.get(main)
    return lines, _Site(lines[pair.call_line - 1].encode("utf-8"), site, parent, assign, main)


def _src(line: bytes, node: ast.AST) -> str:
    return line[node.col_offset : node.end_col_offset].decode("utf-8")


def _splice(line: bytes, edits: Iterable[tuple[int, int, str]]) -> bytes:
    out = line
    for start, end, text in sorted(edits, reverse=True):
        out = out[:start] + text.encode("utf-8") + out[end:]
    return out


# -- callee signature ------------------------------------------------------------
@dataclass(frozen=True)
class _Signature:
    positional: tuple[str, ...]
    positional_only: int
    required: frozenset[str]
    kwonly: tuple[str, ...]
    varargs: bool
    varkw: bool

    def binds(self, n_pos: int, keywords: Iterable[str]) -> bool:
        if n_pos > len(self.positional) and not self.varargs:
            return False
        assigned = set(self.positional[:n_pos])
        for kw in keywords:
            named = kw in self.positional[self.positional_only:] or kw in self.kwonly
            if kw in assigned or (not named and not self.varkw):
                return False
            assigned.add(kw)
        return self.required <= assigned


def callee_signature(tree: ProjectStructureTree, node: EntityNode) -> _Signature | None:
    code = textwrap.dedent(tree.text_of(node.path, *node.span))
    try:
        fn = ast.parse(code).body[0]
    except (SyntaxError, IndexError):
        return None
    if not isinstance(fn, (ast.FunctionDef, ast.AsyncFunctionDef)):
        return None
    a = fn.args
    params = [p.arg for p in a.posonlyargs + a.args]
    defaults = len(a.defaults)
    required = set(params[: len(params) - defaults])
    n_posonly = len(a.posonlyargs)
    decorators = {d.id for d in fn.decorator_list if isinstance(d, ast.Name)}
    parent = tree.node(node.parent) if node.parent else None
    if parent is not None and parent.kind == EntityKind.CLASS and "staticmethod" not in decorators and params:
        required.discard(params[0])
        params = params[1:]
        n_posonly = max(0, n_posonly - 1)
    kwonly = [p.arg for p in a.kwonlyargs]
    required |= {p.arg for p, d in zip(a.kwonlyargs, a.kw_defaults) if d is None}
    return _Signature(tuple(params), n_posonly, frozenset(required), tuple(kwonly),
                      a.vararg is not None, a.kwarg is not None)


# -- candidate generation --------------------------------------------------------
@dataclass(frozen=True)
class _Candidate:
    line: bytes
    description: dict


def _literal_kind(node: ast.AST) -> str | None:
    if isinstance(node, ast.Constant):
        v = node.value
        if v is None:
            return "none"
        return {bool: "bool", int: "int", float: "float", str: "str"}.get(type(v))
    if isinstance(node, (ast.List, ast.ListComp)):
        return "list"
    return None


def _arg_items(call: ast.Call) -> list[tuple[str, ast.expr]]:
    items = [("positional", a) for a in call.args]
    items += [(f"keyword:{k.arg}", k) for k in call.keywords]
    return sorted(items, key=lambda it: it[1].col_offset)


def _has_unpacking(call: ast.Call) -> bool:
    return any(isinstance(a, ast.Starred) for a in call.args) or any(k.arg is None for k in call.keywords)


def _drop_item(line: bytes, items: list[ast.AST], i: int) -> bytes:
    node = items[i]
    if len(items) == 1:
        return _splice(line, [(node.col_offset, node.end_col_offset, "")])
    if i + 1 < len(items):
        return _splice(line, [(node.col_offset, items[i + 1].col_offset, "")])
    return _splice(line, [(items[i - 1].end_col_offset, node.end_col_offset, "")])


def _np(site: _Site, sig: _Signature | None) -> list[_Candidate]:
    call, line = site.call, site.line
    if _has_unpacking(call):
        return []
    keywords = [k.arg for k in call.keywords]
    n_pos = len(call.args)
    out = []
    nodes = [n for _, n in _arg_items(call)]
    for i, node in enumerate(nodes):
        if isinstance(node, ast.keyword):
            mutated = (n_pos, [k for k in keywords if k != node.arg])
        else:
            mutated = (n_pos - 1, keywords)
        if sig is not None and sig.binds(*mutated):
            continue
        out.append(_Candidate(_drop_item(line, nodes, i), {"action": "drop-argument", "argument": _src(line, node)}))
    for extra in _EXTRA_ARGS:
        if sig is not None and sig.binds(n_pos + 1, keywords):
            break
        if call.args:
            at = call.args[-1].end_col_offset
            edit = (at, at, f", {extra}")
        elif call.keywords:
            at = call.keywords[0].col_offset
            edit = (at, at, f"{extra}, ")
        else:
            at = call.end_col_offset - 1
            edit = (at, at, extra)
        out.append(_Candidate(_splice(line, [edit]), {"action": "add-argument", "argument": extra}))
    return out


def _swaps(line: bytes, nodes: list[ast.AST], action: str) -> list[_Candidate]:
    out = []
    for i in range(len(nodes)):
        for j in range(i + 1, len(nodes)):
            a, b = _src(line, nodes[i]), _src(line, nodes[j])
            if a == b:
                continue
            edits = [(nodes[i].col_offset, nodes[i].end_col_offset, b),
                     (nodes[j].col_offset, nodes[j].end_col_offset, a)]
            out.append(_Candidate(_splice(line, edits), {"action": action, "swapped": [a, b]}))
    return out


def _op(site: _Site) -> list[_Candidate]:
    args = [a for a in site.call.args if not isinstance(a, ast.Starred)]
    if len(args) != len(site.call.args):
        return []
    return _swaps(site.line, args, "swap-arguments")


def _unpack_target(site: _Site) -> ast.expr | None:
    if site.assign is None or len(site.assign.targets) != 1 or site.assign.lineno != site.assign.end_lineno:
        return None
    return site.assign.targets[0]


def _nrv(site: _Site) -> list[_Candidate]:
    target = _unpack_target(site)
    if target is None:
        return []
    line = site.line
    out = []
    if isinstance(target, (ast.Tuple, ast.List)):
        elts = target.elts
        if any(isinstance(e, ast.Starred) for e in elts):
            return []
        names = {_src(line, e) for e in elts}
        if len(elts) >= 2:
            for i, e in enumerate(elts):
                out.append(_Candidate(_drop_item(line, elts, i), {"action": "drop-target", "target": _src(line, e)}))
        anchor = elts[-1].end_col_offset if elts else None
    elif isinstance(target, (ast.Name, ast.Attribute, ast.Subscript)):
        names = {_src(line, target)}
        anchor = target.end_col_offset
    else:
        return []
    if anchor is not None:
        for extra in _EXTRA_TARGETS:
            if extra in names:
                continue
            out.append(_Candidate(_splice(line, [(anchor, anchor, f", {extra}")]),
                                  {"action": "add-target", "target": extra}))
    return out


def _orv(site: _Site) -> list[_Candidate]:
    target = _unpack_target(site)
    if not isinstance(target, (ast.Tuple, ast.List)) or any(isinstance(e, ast.Starred) for e in target.elts):
        return []
    return _swaps(site.line, target.elts, "swap-targets")


def _scope_names(site: _Site) -> list[str]:
    """Parameters and locals of the main function bound before the call line."""
    if site.main is None:
        return []
    a = site.main.args
    names = [p.arg for p in a.posonlyargs + a.args + a.kwonlyargs]
    for node in ast.walk(site.main):
        if isinstance(node, ast.Name) and isinstance(node.ctx, ast.Store) and node.lineno < site.call.lineno:
            names.append(node.id)
    seen: dict[str, None] = {}
    for n in names:
        if n not in ("self", "cls"):
            seen.setdefault(n, None)
    return list(seen)


def _cp(site: _Site) -> list[_Candidate]:
    line = site.line
    out = []
    scope = _scope_names(site)
    for role, node in _arg_items(site.call):
        value = node.value if isinstance(node, ast.keyword) else node
        if isinstance(value, ast.Starred):
            continue
        original = _src(line, value)
        kind = _literal_kind(value)
        replacements = []
        if kind is None:
            replacements += [(n, "name") for n in scope if n != original]
        for lit_kind, lit in _LITERAL_POOL.items():
            if lit_kind != kind and not (kind in ("int", "float", "bool") and lit_kind in ("int", "float", "bool")):
                replacements.append((lit, f"literal:{lit_kind}"))
        for text, how in replacements:
            out.append(_Candidate(_splice(line, [(value.col_offset, value.end_col_offset, text)]),
                                  {"action": "replace-argument", "role": role, "argument": original,
                                   "replacement": text, "kind": how}))
    return out


def _crv(site: _Site) -> list[_Candidate]:
    call, parent, line = site.call, site.parent, site.line
    out = []
    if isinstance(parent, ast.Subscript) and parent.value is call:
        index = parent.slice
        if isinstance(index, ast.Constant) and isinstance(index.value, int) and not isinstance(index.value, bool):
            changed = str(index.value + 1)
            out.append(_Candidate(_splice(line, [(index.col_offset, index.end_col_offset, changed)]),
                                  {"action": "change-index", "from": _src(line, index), "to": changed}))
        if isinstance(index, ast.Constant) and isinstance(index.value, str) and index.value.isidentifier():
            out.append(_Candidate(_splice(line, [(call.end_col_offset, parent.end_col_offset, "." + index.value)]),
                                  {"action": "index-to-attribute", "key": index.value}))
    elif isinstance(parent, ast.Attribute) and parent.value is call:
        out.append(_Candidate(_splice(line, [(call.end_col_offset, parent.end_col_offset, f'["{parent.attr}"]')]),
                              {"action": "attribute-to-index", "attribute": parent.attr}))
    elif not isinstance(parent, ast.Expr):
        end = call.end_col_offset
        out.append(_Candidate(_splice(line, [(end, end, "[0]")]), {"action": "add-index", "index": 0}))
    return out


_PRECONDITIONS = {
    DisruptionRule.NP: "call with explicit arguments whose changed count no longer binds to the callee",
    DisruptionRule.OP: "at least two distinct positional arguments",
    DisruptionRule.NRV: "return value assigned on the call line",
    DisruptionRule.ORV: "return value unpacked into at least two distinct targets",
    DisruptionRule.CP: "at least one argument to replace",
    DisruptionRule.CRV: "return value consumed by the surrounding expression",
}


def _candidates(rule: DisruptionRule, site: _Site, sig: _Signature | None) -> list[_Candidate]:
    if rule == DisruptionRule.NP:
        return _np(site, sig)
    if rule == DisruptionRule.OP:
        return _op(site)
    if rule == DisruptionRule.NRV:
        return _nrv(site)
    if rule == DisruptionRule.ORV:
        return _orv(site)
    if rule == DisruptionRule.CP:
        return _cp(site)
    return _crv(site)


def _sample_id(tree: ProjectStructureTree, pair: CallSitePair, rule: DisruptionRule, seed: int) -> str:
    key = json.dumps([tree.tree_hash, pair.to_dict(), rule.value, seed], sort_keys=True)
    return f"{rule.value.lower()}-{hashlib.sha256(key.encode()).hexdigest()[:12]}"


def inject(tree: ProjectStructureTree, pair: CallSitePair, rule: DisruptionRule | str, seed: int) -> BenchmarkSample:
    """Apply ``rule`` at ``pair``'s call site; the choice among fits is seeded."""
    rule = DisruptionRule(rule)
    if tree.node(pair.main_function).path == tree.node(pair.context_function).path:
        raise RuleNotApplicable(rule, "main and context function share a file")
    text = "".join(tree.lines(pair.path))
    lines, site = _locate(text, pair, rule)
    sig = callee_signature(tree, tree.node(pair.context_function))
    original = site.line
    valid = []
    for cand in _candidates(rule, site, sig):
        if cand.line == original or b"\n" in cand.line.rstrip(b"\r\n"):
            continue
        mutated = lines[:]
        mutated[pair.call_line - 1] = cand.line.decode("utf-8")
        try:
            ast.parse("".join(mutated))
        except SyntaxError:
            continue
        valid.append(cand)
    if not valid:
        raise RuleNotApplicable(rule, _PRECONDITIONS[rule])
    chosen = random.Random(seed).choice(valid)
    strip = lambda b: b.decode("utf-8").rstrip("\r\n")  # noqa: E731
    return BenchmarkSample(
        sample_id=_sample_id(tree, pair, rule, seed),
        repo_snapshot=str(tree.repo_root),
        snapshot_digest=tree.tree_hash,
        rule=rule,
        error_location=ErrorLocation(pair.path, pair.call_line, pair.call_line),
        buggy_line=strip(chosen.line),
        ground_truth_line=strip(original),
        pair=pair,
        seed=seed,
        mutation={**chosen.description, "candidates": len(valid)},
    )


def applicable_rules(tree: ProjectStructureTree, pair: CallSitePair) -> list[DisruptionRule]:
    out = []
    for rule in DisruptionRule:
        try:
            inject(tree, pair, rule, 0)
        except RuleNotApplicable:
            continue
        out.append(rule)
    return out


# -- materialization -------------------------------------------------------------
def mutated_text(original: str, sample: BenchmarkSample) -> str:
    """The sample's file with the buggy line swapped in, line endings untouched."""
    lines = split_lines(original)
    i = sample.error_location.start_line - 1
    current = lines[i]
    ending = current[len(current.rstrip("\r\n")):]
    if current[: len(current) - len(ending)] != sample.ground_truth_line:
        raise ValueError(f"{sample.sample_id}: snapshot line {i + 1} does not match the ground truth")
    lines[i] = sample.buggy_line + ending
    return "".join(lines)


def restore_text(mutated: str, sample: BenchmarkSample) -> str:
    lines = split_lines(mutated)
    i = sample.error_location.start_line - 1
    ending = lines[i][len(lines[i].rstrip("\r\n")):]
    lines[i] = sample.ground_truth_line + ending
    return "".join(lines)


def _read(path: Path) -> str:
    return path.read_bytes().decode("utf-8")


def snapshot_repo(repo: str | Path, dest: str | Path) -> Path:
    """Copy ``repo`` to ``dest`` once; samples only ever read from the copy."""
    dest = Path(dest)
    if not dest.exists():
        shutil.copytree(repo, dest, ignore=shutil.ignore_patterns(".git", "__pycache__", "*.pyc"))
    return dest


def write_sample(sample: BenchmarkSample, dataset_dir: str | Path) -> Path:
    dataset_dir = Path(dataset_dir)
    sample_dir = dataset_dir / "samples" / sample.sample_id
    overlay = sample_dir / "overlay" / sample.path
    overlay.parent.mkdir(parents=True, exist_ok=True)
    original = _read(dataset_dir / sample.repo_snapshot / sample.path)
    overlay.write_bytes(mutated_text(original, sample).encode("utf-8"))
    (sample_dir / "meta.json").write_text(json.dumps(sample.to_dict(), indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
    return sample_dir


def write_manifest(samples: Iterable[BenchmarkSample], dataset_dir: str | Path) -> Path:
    path = Path(dataset_dir) / MANIFEST
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path) -> list[BenchmarkSample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(BenchmarkSample.from_dict(json.loads(line)))
    return out


def load_overlay(sample: BenchmarkSample, dataset_dir: str | Path) -> dict[str, str]:
    path = Path(dataset_dir) / "samples" / sample.sample_id / "overlay" / sample.path
    return {sample.path: _read(path)}


def generate_dataset(
    tree: ProjectStructureTree,
    out_dir: str | Path,
    rules: Iterable[DisruptionRule | str] = tuple(DisruptionRule),
    seed: int = 0,
    per_rule: int | None = None,
) -> list[BenchmarkSample]:
    """Inject every applicable rule at every call site and write the dataset.

    With ``per_rule`` set, a seeded subset of that many samples per rule is kept.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = tree.repo_root.resolve().name or "repo"
    snapshot = snapshot_repo(tree.repo_root, out_dir / "snapshot" / name)
    rel = snapshot.relative_to(out_dir).as_posix()
    pairs = enumerate_targets(tree)
    samples = []
    for rule in (DisruptionRule(r) for r in rules):
        found = []
        for pair in pairs:
            try:
                found.append(inject(tree, pair, rule, seed))
            except RuleNotApplicable:
                continue
        if per_rule is not None and len(found) > per_rule:
            keep = sorted(random.Random(f"{seed}:{rule.value}").sample(range(len(found)), per_rule))
            found = [found[i] for i in keep]
        samples.extend(found)
    for s in samples:
        s.repo_snapshot = rel
        write_sample(s, out_dir)
    write_manifest(samples, out_dir)
    return samples


@dataclass
class Validation:
    ok: bool
    diagnostics: list[str] = field(default_factory=list)


def validate_sample(sample: BenchmarkSample, dataset_dir: str | Path) -> Validation:
    """Re-check a written sample: parses, differs from its snapshot in one line, cross-file pair."""
    dataset_dir = Path(dataset_dir)
    diags = []
    try:
        original = _read(dataset_dir / sample.repo_snapshot / sample.path)
        mutated = load_overlay(sample, dataset_dir)[sample.path]
    except (OSError, UnicodeDecodeError) as exc:
        return Validation(False, [f"missing: {exc}"])
    try:
        ast.parse(mutated)
    except SyntaxError as exc:
        diags.append(f"syntax: line {exc.lineno}: {exc.msg}")
    a, b = split_lines(original), split_lines(mutated)
    changed = [i + 1 for i, (x, y) in enumerate(zip(a, b)) if x != y]
    if len(a) != len(b) or len(changed) > 1:
        diags.append("multi-line diff")
    elif not changed:
        diags.append("no diff")
    elif changed[0] != sample.error_location.start_line:
        diags.append(f"diff at line {changed[0]}, expected {sample.error_location.start_line}")
    elif restore_text(mutated, sample) != original:
        diags.append("ground truth does not restore the snapshot")
    main_path = sample.pair.main_function.split("::", 1)[0]
    context_path = sample.pair.context_function.split("::", 1)[0]
    if main_path == context_path:
        diags.append("pair is not cross-file")
    return Validation(not diags, diags)
