"""Python adapter built on the standard ``ast`` module."""

from __future__ import annotations

import ast
import textwrap
from dataclasses import dataclass
from pathlib import Path

from repoctx.lang import Definition, FileFacts, Reference, load_name_list

_FUNC = (ast.FunctionDef, ast.AsyncFunctionDef)
_COMPREHENSIONS = (ast.ListComp, ast.SetComp, ast.DictComp, ast.GeneratorExp)
_NESTED_SCOPES = _FUNC + (ast.ClassDef, ast.Lambda) + _COMPREHENSIONS
_BLOCKS = (ast.If, ast.Try, ast.With, ast.AsyncWith, ast.For, ast.AsyncFor, ast.While)


@dataclass(frozen=True)
class _Import:
    module: str | None  # None when a relative import climbs above the repo root
    attr: str | None


def _join(*parts: str | None) -> str:
    return ".".join(p for p in parts if p)


def _start(node: ast.AST) -> int:
    decorators = getattr(node, "decorator_list", None) or []
    return min([node.lineno] + [d.lineno for d in decorators])


def target_names(target: ast.AST) -> list[ast.Name]:
    """Plain names bound by an assignment target, in source order."""
    if isinstance(target, ast.Name):
        return [target]
    if isinstance(target, (ast.Tuple, ast.List)):
        out: list[ast.Name] = []
        for elt in target.elts:
            out.extend(target_names(elt))
        return out
    if isinstance(target, ast.Starred):
        return target_names(target.value)
    return []


def _collect_definitions(stmts: list[ast.stmt], out: list[Definition], owner: Definition | None) -> None:
    for node in stmts:
        if isinstance(node, _FUNC):
            qualname = f"{owner.name}.{node.name}" if owner else node.name
            out.append(
                Definition("Function", node.name, qualname, _start(node), node.end_lineno,
                           node.col_offset, owner.qualname if owner else None)
            )
        elif isinstance(node, ast.ClassDef):
            # classes nested in a class body are flattened into the outer class
            if owner is None:
                cls = Definition("Class", node.name, node.name, _start(node), node.end_lineno, node.col_offset)
                out.append(cls)
                _collect_definitions(node.body, out, cls)
        elif isinstance(node, (ast.Assign, ast.AnnAssign)) and owner is None:
            if isinstance(node, ast.AnnAssign):
                if node.value is None:
                    continue
                targets = [node.target]
            else:
                targets = node.targets
            for target in targets:
                for name in target_names(target):
                    out.append(
                        Definition("GlobalVariable", name.id, name.id, node.lineno, node.end_lineno, name.col_offset)
                    )
        elif isinstance(node, _BLOCKS):
            blocks = [node.body, getattr(node, "orelse", []), getattr(node, "finalbody", [])]
            blocks += [h.body for h in getattr(node, "handlers", [])]
            for block in blocks:
                _collect_definitions(block, out, owner)


def _regions(body: list[ast.stmt]) -> list[tuple[int, int]]:
    out = []
    for node in body:
        if isinstance(node, _FUNC):
            continue
        if isinstance(node, ast.ClassDef):
            header_end = node.body[0].lineno - 1 if node.body else node.end_lineno
            if header_end >= _start(node):
                out.append((_start(node), header_end))
            for sub in node.body:
                if not isinstance(sub, _FUNC):
                    out.append((_start(sub), sub.end_lineno))
            continue
        out.append((_start(node), node.end_lineno))
    return sorted(out)


class _Scope:
    __slots__ = ("kind", "bound", "imports", "globals", "defs", "classes")

    def __init__(self, kind: str, bound=(), imports=None, globals_=(), defs=(), classes=()):
        self.kind = kind
        self.bound = set(bound)
        self.imports: dict[str, _Import] = dict(imports or {})
        self.globals = set(globals_)
        self.defs = set(defs)
        self.classes = set(classes)


def _absolute_module(module: str | None, level: int, package: list[str]) -> str | None:
    if level == 0:
        return module
    if level - 1 > len(package):
        return None
    base = package[: len(package) - (level - 1)]
    return _join(*base, module)


def _bindings(nodes: list[ast.AST], package: list[str]) -> tuple[set[str], dict[str, _Import], set[str]]:
    """Names bound directly in one scope, without descending into nested scopes."""
    bound: set[str] = set()
    imports: dict[str, _Import] = {}
    globals_: set[str] = set()
    stack = list(nodes)
    while stack:
        node = stack.pop()
        if isinstance(node, _FUNC + (ast.ClassDef,)):
            bound.add(node.name)
            continue
        if isinstance(node, (ast.Lambda,) + _COMPREHENSIONS):
            continue
        if isinstance(node, ast.Name) and isinstance(node.ctx, (ast.Store, ast.Del)):
            bound.add(node.id)
        elif isinstance(node, ast.Import):
            for alias in node.names:
                if alias.asname:
                    imports[alias.asname] = _Import(alias.name, None)
                else:
                    head = alias.name.split(".")[0]
                    imports[head] = _Import(head, None)
        elif isinstance(node, ast.ImportFrom):
            base = _absolute_module(node.module, node.level, package)
            for alias in node.names:
                if alias.name != "*":
                    imports[alias.asname or alias.name] = _Import(base, alias.name)
        elif isinstance(node, ast.ExceptHandler) and node.name:
            bound.add(node.name)
        elif isinstance(node, ast.Global):
            globals_.update(node.names)
        elif isinstance(node, ast.Nonlocal):
            bound.update(node.names)
        elif isinstance(node, (ast.MatchAs, ast.MatchStar)) and node.name:
            bound.add(node.name)
        elif isinstance(node, ast.MatchMapping) and node.rest:
            bound.add(node.rest)
        stack.extend(ast.iter_child_nodes(node))
    return bound, imports, globals_


def _dotted(node: ast.AST) -> list[str] | None:
    parts = []
    while isinstance(node, ast.Attribute):
        parts.append(node.attr)
        node = node.value
    if isinstance(node, ast.Name):
        parts.append(node.id)
        return parts[::-1]
    return None


def _arg_names(args: ast.arguments) -> list[str]:
    every = args.posonlyargs + args.args + args.kwonlyargs
    names = [a.arg for a in every]
    if args.vararg:
        names.append(args.vararg.arg)
    if args.kwarg:
        names.append(args.kwarg.arg)
    return names


class _ReferenceVisitor(ast.NodeVisitor):
    def __init__(self, facts: FileFacts, module_scope: _Scope, package: list[str], builtins: frozenset[str]):
        self.facts = facts
        self.stack = [module_scope]
        self.package = package
        self.builtins = builtins
        self.owner: str | None = None  # enclosing top-level class of the current method

    # -- name lookup -------------------------------------------------------
    def _lookup(self, name: str) -> tuple[str, _Import | None] | None:
        innermost = self.stack[-1]
        for scope in reversed(self.stack[1:]):
            if scope.kind == "class" and scope is not innermost:
                continue
            if name in scope.globals:
                break
            if name in scope.imports:
                return "import", scope.imports[name]
            if name in scope.bound:
                return None
        module = self.stack[0]
        if name in module.imports:
            return "import", module.imports[name]
        if name in module.defs:
            return "module", None
        if name in module.bound:
            return None
        return "free", None

    def _add(self, **kw) -> None:
        self.facts.references.append(Reference(**kw))

    def _name_ref(self, node: ast.Name, call: bool) -> None:
        found = self._lookup(node.id)
        if found is None:
            return
        binding, imp = found
        if binding == "free" and node.id in self.builtins:
            return
        if binding == "import":
            if imp.attr is None or imp.module is None:
                return  # a module object or an unresolvable relative import
            self._add(name=imp.attr, token=node.id, line=node.lineno, col=node.col_offset, kind="name",
                      call=call, binding="import", module=imp.module, attr=imp.attr)
            return
        self._add(name=node.id, token=node.id, line=node.lineno, col=node.col_offset, kind="name",
                  call=call, binding=binding)

    def _import_chain(self, chain: list[str]) -> str | None:
        found = self._lookup(chain[0])
        if not found or found[0] != "import" or found[1].module is None:
            return None
        imp = found[1]
        return _join(imp.module, imp.attr, *chain[1:])

    def _attr_ref(self, node: ast.Attribute, call: bool) -> bool:
        """Record a reference for ``node``; True when the receiver was consumed."""
        line = node.end_lineno
        col = node.end_col_offset - len(node.attr)
        chain = _dotted(node.value)
        if chain:
            module = self._import_chain(chain)
            if module is not None:
                self._add(name=node.attr, token=node.attr, line=line, col=col, kind="attr", call=call,
                          binding="import", module=module)
                return True
            if not call:
                return False
            if len(chain) == 1 and chain[0] in ("self", "cls") and self.owner:
                self._add(name=node.attr, token=node.attr, line=line, col=col, kind="attr", call=True,
                          binding="self", owner=self.owner)
                return True
            if len(chain) == 1 and chain[0] in self.stack[0].classes and self._lookup(chain[0]) == ("module", None):
                self._add(name=node.attr, token=node.attr, line=line, col=col, kind="attr", call=True,
                          binding="class", owner=chain[0])
                return True
        if call:
            self._add(name=node.attr, token=node.attr, line=line, col=col, kind="attr", call=True, binding="method")
        return False

    # -- visitors ----------------------------------------------------------
    def visit_Name(self, node: ast.Name) -> None:
        if isinstance(node.ctx, ast.Load):
            self._name_ref(node, call=False)

    def visit_Attribute(self, node: ast.Attribute) -> None:
        if isinstance(node.ctx, ast.Load) and self._attr_ref(node, call=False):
            return
        self.visit(node.value)

    def visit_Call(self, node: ast.Call) -> None:
        func = node.func
        if isinstance(func, ast.Name):
            self._name_ref(func, call=True)
        elif isinstance(func, ast.Attribute):
            if not self._attr_ref(func, call=True):
                self.visit(func.value)
        else:
            self.visit(func)
        for arg in node.args:
            self.visit(arg)
        for kw in node.keywords:
            self.visit(kw.value)

    def _visit_signature(self, args: ast.arguments, returns: ast.AST | None) -> None:
        for default in args.defaults + [d for d in args.kw_defaults if d is not None]:
            self.visit(default)
        for a in args.posonlyargs + args.args + args.kwonlyargs + [args.vararg, args.kwarg]:
            if a is not None and a.annotation is not None:
                self.visit(a.annotation)
        if returns is not None:
            self.visit(returns)

    def _visit_function(self, node) -> None:
        for d in node.decorator_list:
            self.visit(d)
        self._visit_signature(node.args, node.returns)
        bound, imports, globals_ = _bindings(node.body, self.package)
        bound.update(_arg_names(node.args))
        saved = self.owner
        if self.stack[-1].kind == "class" and len(self.stack) == 2:
            self.owner = self._class_name
        self.stack.append(_Scope("function", bound, imports, globals_))
        for stmt in node.body:
            self.visit(stmt)
        self.stack.pop()
        self.owner = saved

    visit_FunctionDef = _visit_function
    visit_AsyncFunctionDef = _visit_function

    def visit_ClassDef(self, node: ast.ClassDef) -> None:
        for d in node.decorator_list:
            self.visit(d)
        for b in node.bases:
            self.visit(b)
        for kw in node.keywords:
            self.visit(kw.value)
        bound, imports, globals_ = _bindings(node.body, self.package)
        saved = getattr(self, "_class_name", None)
        self._class_name = node.name
        self.stack.append(_Scope("class", bound, imports, globals_))
        for stmt in node.body:
            self.visit(stmt)
        self.stack.pop()
        self._class_name = saved

    def visit_Lambda(self, node: ast.Lambda) -> None:
        self._visit_signature(node.args, None)
        self.stack.append(_Scope("function", _arg_names(node.args)))
        self.visit(node.body)
        self.stack.pop()

    def _visit_comprehension(self, node) -> None:
        bound = set()
        for gen in node.generators:
            bound.update(n.id for n in target_names(gen.target))
        self.stack.append(_Scope("function", bound))
        for gen in node.generators:
            self.visit(gen.iter)
            for cond in gen.ifs:
                self.visit(cond)
        for field_name in ("elt", "key", "value"):
            child = getattr(node, field_name, None)
            if child is not None:
                self.visit(child)
        self.stack.pop()

    visit_ListComp = _visit_comprehension
    visit_SetComp = _visit_comprehension
    visit_DictComp = _visit_comprehension
    visit_GeneratorExp = _visit_comprehension

    def visit_Import(self, node) -> None:
        pass

    def visit_ImportFrom(self, node) -> None:
        pass


def _imported_modules(tree: ast.Module, package: list[str]) -> list[str]:
    out = []
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            out.extend(alias.name for alias in node.names)
        elif isinstance(node, ast.ImportFrom):
            base = _absolute_module(node.module, node.level, package)
            if base is None:
                continue
            if base:
                out.append(base)
            out.extend(_join(base, alias.name) for alias in node.names if alias.name != "*")
    return sorted(set(out))


class PythonAdapter:
    name = "python"
    extensions = (".py",)

    def __init__(self, builtins_file: str | Path | None = None):
        self._builtins = load_name_list(builtins_file, "python_builtins.txt")

    def builtins(self) -> frozenset[str]:
        return self._builtins

    def module_name(self, path: str) -> str:
        parts = path[: -len(".py")].split("/")
        if parts[-1] == "__init__":
            parts = parts[:-1]
        return ".".join(parts)

    def package_parts(self, path: str) -> list[str]:
        parts = self.module_name(path).split(".") if self.module_name(path) else []
        return parts if path.endswith("__init__.py") else parts[:-1]

    def parse(self, path: str, text: str) -> FileFacts:
        tree = ast.parse(text, filename=path)
        package = self.package_parts(path)
        facts = FileFacts(path=path, module=self.module_name(path))
        _collect_definitions(tree.body, facts.definitions, None)
        facts.definitions.sort(key=lambda d: (d.start, d.col))
        facts.regions = _regions(tree.body)
        facts.imported_modules = _imported_modules(tree, package)

        bound, imports, _ = _bindings(tree.body, package)
        facts.reexports = {
            local: (imp.module, imp.attr) for local, imp in sorted(imports.items())
            if imp.module is not None and imp.attr is not None
        }
        top = [d for d in facts.definitions if d.parent is None]
        module_scope = _Scope(
            "module", bound, imports,
            defs={d.name for d in top},
            classes={d.name for d in top if d.kind == "Class"},
        )
        _ReferenceVisitor(facts, module_scope, package, self._builtins).visit(tree)
        facts.references.sort(key=lambda r: (r.line, r.col, r.name))
        return facts


def static_signature(code: str) -> str:
    """Signature text derived from source alone, used when no model summary exists."""
    try:
        module = ast.parse(textwrap.dedent(code))
    except SyntaxError:
        return code.strip().splitlines()[0] if code.strip() else ""
    node = module.body[0] if module.body else None
    if isinstance(node, _FUNC):
        params = []
        a = node.args
        positional = a.posonlyargs + a.args
        for p in positional:
            params.append(p.arg + (f": {ast.unparse(p.annotation)}" if p.annotation else ""))
        if a.vararg:
            params.append("*" + a.vararg.arg)
        elif a.kwonlyargs:
            params.append("*")
        for p in a.kwonlyargs:
            params.append(p.arg + (f": {ast.unparse(p.annotation)}" if p.annotation else ""))
        if a.kwarg:
            params.append("**" + a.kwarg.arg)
        returns = f" -> {ast.unparse(node.returns)}" if node.returns else ""
        return f"{node.name}({', '.join(params)}){returns}"
    if isinstance(node, ast.ClassDef):
        bases = ", ".join(ast.unparse(b) for b in node.bases)
        return f"class {node.name}({bases})" if bases else f"class {node.name}"
    if node is not None:
        first = ast.unparse(node).splitlines()[0]
        return first if len(first) <= 80 else first[:77] + "..."
    return ""
