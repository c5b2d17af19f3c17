"""Subject-language adapters.

An adapter turns one source file into :class:`FileFacts`: the definitions the
structure tree needs, the references needed for cross-file markers and caller
search, and the top-level statement regions used when a reference is not
inside any function.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Protocol


@dataclass(frozen=True)
class Definition:
    kind: str  # "Class" | "Function" | "GlobalVariable"
    name: str
    qualname: str
    start: int
    end: int
    col: int
    parent: str | None = None  # qualname of the owning class, for methods


@dataclass(frozen=True)
class Reference:
    """One use of a name that may point at a repository entity.

    ``binding`` says how the name was bound at the point of use:

    - ``"module"``: defined at module level of the same file
    - ``"import"``: bound by an import; ``module`` holds the dotted module and
      ``attr`` the imported member (None for ``import x`` bindings)
    - ``"free"``: not bound anywhere visible, so a repository-wide lookup
    - ``"self"``: method call on ``self``/``cls``; ``owner`` is the class
    - ``"class"``: attribute call on a class defined in the same file
    - ``"method"``: attribute call on an unknown receiver
    """

    name: str
    token: str
    line: int
    col: int
    kind: str  # "name" | "attr"
    call: bool
    binding: str
    module: str | None = None
    attr: str | None = None
    owner: str | None = None


@dataclass
class FileFacts:
    path: str
    module: str
    definitions: list[Definition] = field(default_factory=list)
    references: list[Reference] = field(default_factory=list)
    regions: list[tuple[int, int]] = field(default_factory=list)
    imported_modules: list[str] = field(default_factory=list)
    # module-level ``from m import x as y`` bindings: y -> (m, x)
    reexports: dict[str, tuple[str, str]] = field(default_factory=dict)


class LanguageAdapter(Protocol):
    name: str
    extensions: tuple[str, ...]

    def module_name(self, path: str) -> str: ...

    def package_parts(self, path: str) -> list[str]: ...

    def parse(self, path: str, text: str) -> FileFacts: ...

    def builtins(self) -> frozenset[str]: ...


def load_name_list(path: str | Path | None, default_resource: str) -> frozenset[str]:
    """Read a one-name-per-line deny list; ``#`` starts a comment."""
    if path is None:
        text = resources.files("repoctx.data").joinpath(default_resource).read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    names = set()
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            names.add(line)
    return frozenset(names)


def get_adapter(language: str = "python", builtins_file: str | Path | None = None) -> LanguageAdapter:
    if language == "python":
        from repoctx.lang.python import PythonAdapter

        return PythonAdapter(builtins_file=builtins_file)
    raise ValueError(f"unsupported subject language: {language!r}")
