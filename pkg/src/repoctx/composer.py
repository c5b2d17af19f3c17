"""Prompt composition: slicing, semantic enrichment, templates and budgets."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
import threading
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Protocol

from repoctx.lang.python import static_signature
from repoctx.retriever import ContextBundle, SemanticInfo
from repoctx.tokenizer import ApproxTokenizer, Tokenizer
from repoctx.tree import CodeSegment, ContractError

DEFAULT_WINDOW = 5
SECTION_ORDER = ("instruction", "example", "context", "error_function")
ABLATABLE = ("summarize", "definitions_of_eif", "callers_of_eif", "callers_of_ef")
# drop first -> last; the instruction, example and error function are never dropped
TRUNCATION_ORDER = ("callers_of_ef", "callers_of_eif", "similar_segments", "summaries", "definitions_of_eif")

_SOURCE_HEADERS = {
    "definitions_of_eif": "# Definitions of functions and variables used at the error location",
    "callers_of_eif": "# Other places in the repository that call those functions",
    "callers_of_ef": "# Places in the repository that call the function to repair",
    "similar_segments": "# Repository code similar to the error location",
}
_PLACEHOLDER_RE = re.compile(r"\{(instruction|example|context|error_function)\}")


class IrreduciblePromptError(ValueError):
    """The instruction, example and error function alone exceed the budget."""


class StrategyName(str, Enum):
    ZERO_SHOT_SIMPLE = "ZeroShotSimple"
    ZERO_SHOT_DETAIL = "ZeroShotDetail"
    ONE_SHOT = "OneShot"
    COT = "CoT"

    @classmethod
    def parse(cls, text: str) -> StrategyName:
        key = re.sub(r"[^a-z]", "", text.lower())
        aliases = {
            "zeroshotsimple": cls.ZERO_SHOT_SIMPLE, "simple": cls.ZERO_SHOT_SIMPLE,
            "zeroshotdetail": cls.ZERO_SHOT_DETAIL, "detail": cls.ZERO_SHOT_DETAIL,
            "oneshot": cls.ONE_SHOT, "cot": cls.COT, "chainofthought": cls.COT,
        }
        if key not in aliases:
            raise ValueError(f"unknown prompt strategy {text!r}; choose simple, detail, one-shot or cot")
        return aliases[key]


@dataclass(frozen=True)
class PromptStrategy:
    name: StrategyName
    instruction: str
    example: str | None = None

    def __post_init__(self):
        if (self.name == StrategyName.ONE_SHOT) != (self.example is not None):
            raise ValueError("exactly the OneShot strategy carries a worked example")


def _template(name: str, template_dir: str | Path | None) -> str:
    if template_dir is not None and (Path(template_dir) / name).is_file():
        return (Path(template_dir) / name).read_text("utf-8")
    return resources.files("repoctx.templates").joinpath(name).read_text("utf-8")


def load_strategy(name: str | StrategyName, template_dir: str | Path | None = None) -> PromptStrategy:
    """Strategy from template files; ``template_dir`` overrides the shipped defaults."""
    name = name if isinstance(name, StrategyName) else StrategyName.parse(name)
    files = {
        StrategyName.ZERO_SHOT_SIMPLE: "instruction_simple.txt",
        StrategyName.ZERO_SHOT_DETAIL: "instruction_detail.txt",
        StrategyName.ONE_SHOT: "instruction_detail.txt",
        StrategyName.COT: "instruction_cot.txt",
    }
    instruction = _template(files[name], template_dir).strip()
    example = _template("oneshot_example.txt", template_dir).strip() if name == StrategyName.ONE_SHOT else None
    return PromptStrategy(name, instruction, example)


def load_layout(template_dir: str | Path | None = None) -> str:
    layout = _template("layout.txt", template_dir)
    found = tuple(_PLACEHOLDER_RE.findall(layout))
    if found != SECTION_ORDER:
        raise ValueError(f"layout template must use placeholders {SECTION_ORDER} once each, in order; got {found}")
    return layout


# -- slicing -----------------------------------------------------------------

@dataclass(frozen=True)
class Slice:
    origin: CodeSegment
    focus_lines: tuple[int, ...]
    window_before: int
    window_after: int
    start_line: int
    end_line: int
    text: str

    @property
    def focus_line(self) -> int:
        return self.focus_lines[0]


def _clip(segment: CodeSegment, start: int, end: int) -> str:
    lines = segment.text.split("\n")
    return "\n".join(lines[start - segment.start_line : end - segment.start_line + 1])


def slice_around_call(segment: CodeSegment, focus_line: int, window: int = DEFAULT_WINDOW) -> Slice:
    """Keep ``window`` lines before and after ``focus_line``, clipped to the segment."""
    if not (segment.start_line <= focus_line <= segment.end_line):
        raise ContractError(f"focus line {focus_line} outside segment {segment.start_line}-{segment.end_line}")
    start = max(segment.start_line, focus_line - window)
    end = min(segment.end_line, focus_line + window)
    return Slice(segment, (focus_line,), window, window, start, end, _clip(segment, start, end))


def slice_segment(segment: CodeSegment, focus_lines: Iterable[int], window: int = DEFAULT_WINDOW) -> list[Slice]:
    """One slice per focus line, with overlapping or touching slices merged."""
    slices = sorted((slice_around_call(segment, f, window) for f in set(focus_lines)), key=lambda s: s.start_line)
    merged: list[Slice] = []
    for s in slices:
        if merged and s.start_line <= merged[-1].end_line + 1:
            prev = merged[-1]
            end = max(prev.end_line, s.end_line)
            merged[-1] = Slice(segment, prev.focus_lines + s.focus_lines, window, window,
                               prev.start_line, end, _clip(segment, prev.start_line, end))
        else:
            merged.append(s)
    return merged


# -- semantic enrichment -------------------------------------------------------

class Summarizer(Protocol):
    name: str

    def summarize(self, prompt: str) -> tuple[str, bool]:
        """Return (reply text, failed)."""
        ...


SUMMARY_PROMPT = (
    "Describe the following Python code from a repository.\n"
    "Reply with exactly two lines:\n"
    "Signature: <name, the type of every parameter, and the return type>\n"
    "Summary: <one sentence on what it does>\n\n"
    "{code}\n"
)


def _parse_summary(reply: str) -> tuple[str, str] | None:
    signature = summary = None
    for line in reply.splitlines():
        m = re.match(r"\s*(signature|summary)\s*:\s*(.*)", line, re.IGNORECASE)
        if m:
            if m[1].lower() == "signature":
                signature = m[2].strip()
            else:
                summary = m[2].strip()
    if not signature or summary is None:
        return None
    return signature, summary


class Enricher:
    """Caches semantic info per (node id, code digest); safe to share across threads."""

    def __init__(self, summarizer: Summarizer | None):
        self.summarizer = summarizer
        self._cache: dict[tuple[str, str], SemanticInfo] = {}
        self._lock = threading.Lock()

    def info_for(self, segment: CodeSegment) -> SemanticInfo:
        key = (segment.node_id or f"{segment.path}:{segment.start_line}",
               hashlib.sha256(segment.text.encode()).hexdigest())
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        fallback = static_signature(segment.text)
        reply, failed = self.summarizer.summarize(SUMMARY_PROMPT.format(code=segment.text))
        parsed = None if failed else _parse_summary(reply)
        if parsed is None:
            info = SemanticInfo(fallback, "", self.summarizer.name, failed=True)
        else:
            info = SemanticInfo(parsed[0], parsed[1], self.summarizer.name)
        with self._lock:
            self._cache.setdefault(key, info)
        return info


def enrich_definitions(bundle: ContextBundle, summarizer: Summarizer | Enricher | None) -> ContextBundle:
    """Attach a signature and summary to every definition in the bundle.

    With no summarizer the bundle comes back unchanged apart from the
    ``enrichment`` flag. A backend failure leaves an empty summary and sets
    ``failed`` on that entry; it never raises.
    """
    if summarizer is None:
        return dataclasses.replace(bundle, flags={**bundle.flags, "enrichment": "disabled"})
    enricher = summarizer if isinstance(summarizer, Enricher) else Enricher(summarizer)
    enrichment = dict(bundle.enrichment)
    for seg in bundle.definitions_of_eif:
        enrichment[seg.node_id or f"{seg.path}:{seg.start_line}"] = enricher.info_for(seg)
    state = "enabled"
    if not bundle.definitions_of_eif:
        state = bundle.flags.get("enrichment", "none")
    elif any(i.failed for i in enrichment.values()):
        state = "partial"
    return dataclasses.replace(bundle, enrichment=enrichment, flags={**bundle.flags, "enrichment": state})


# -- drafts and budgets ---------------------------------------------------------

@dataclass
class DraftItem:
    source: str
    label: str
    header: str
    body: str
    signature: str | None = None
    summary: str | None = None

    def render(self) -> str:
        lines = [self.header]
        if self.signature:
            lines.append(f"# Signature: {self.signature}")
        if self.summary:
            lines.append(f"# Summary: {self.summary}")
        lines.append(self.body)
        return "\n".join(lines)


@dataclass
class PromptDraft:
    layout: str
    instruction: str
    example: str | None
    error_function: str
    items: list[DraftItem] = field(default_factory=list)

    def sections(self) -> dict[str, str]:
        context = ""
        if self.items:
            blocks = ["Repository context:"]
            for source in ("definitions_of_eif", "callers_of_eif", "callers_of_ef", "similar_segments"):
                chosen = [i.render() for i in self.items if i.source == source]
                if chosen:
                    blocks.append(_SOURCE_HEADERS[source] + "\n" + "\n\n".join(chosen))
            context = "\n\n".join(blocks)
        return {
            "instruction": self.instruction,
            "example": self.example or "",
            "context": context,
            "error_function": self.error_function,
        }

    def render(self) -> tuple[str, list[str]]:
        sections = self.sections()
        parts = _PLACEHOLDER_RE.split(self.layout)
        # parts = [prefix, name, literal, name, literal, ..., name, suffix]
        prefix, suffix = parts[0], parts[-1]
        names = parts[1::2]
        separators = parts[2:-1:2]
        out = []
        included = []
        pending_sep = ""
        for i, name in enumerate(names):
            text = sections[name]
            if not text:
                continue
            if included:
                out.append(pending_sep)
            out.append(text)
            included.append(name)
            pending_sep = separators[i] if i < len(separators) else ""
        return prefix + "".join(out) + suffix, included


@dataclass
class RenderedPrompt:
    text: str
    token_count: int
    sections: list[str]
    truncation_log: list[dict] = field(default_factory=list)
    budget: int | None = None
    tokenizer: str = "approx"
    strategy: str | None = None
    method: str | None = None
    ablation: list[str] = field(default_factory=list)

    def sidecar(self) -> dict:
        return {
            "sections": self.sections,
            "token_count": self.token_count,
            "truncation_log": self.truncation_log,
            "budget": self.budget,
            "tokenizer": self.tokenizer,
            "strategy": self.strategy,
            "method": self.method,
            "ablation": self.ablation,
        }

    def write(self, stem: str | Path) -> tuple[Path, Path]:
        """Write ``<stem>.txt`` and the ``<stem>.json`` sidecar."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        txt, meta = stem.with_suffix(".txt"), stem.with_suffix(".json")
        txt.write_text(self.text, "utf-8")
        meta.write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n", "utf-8")
        return txt, meta


def fit_to_budget(draft: PromptDraft, budget: int, tokenizer: Tokenizer | None = None) -> RenderedPrompt:
    """Drop context in fixed priority until the prompt fits ``budget`` tokens."""
    tokenizer = tokenizer or ApproxTokenizer()
    draft = dataclasses.replace(draft, items=[dataclasses.replace(i) for i in draft.items])
    log: list[dict] = []

    def measure() -> tuple[str, list[str], int]:
        text, included = draft.render()
        return text, included, tokenizer.count(text)

    text, included, tokens = measure()
    for stage in TRUNCATION_ORDER:
        if tokens <= budget:
            break
        if stage == "summaries":
            for item in reversed(draft.items):
                if tokens <= budget:
                    break
                if item.summary:
                    item.summary = None
                    text, included, tokens = measure()
                    log.append({"source": "definitions_of_eif", "item": item.label,
                                "action": "summary-removed", "tokens_after": tokens})
            continue
        for item in [i for i in reversed(draft.items) if i.source == stage]:
            if tokens <= budget:
                break
            draft.items.remove(item)
            text, included, tokens = measure()
            log.append({"source": stage, "item": item.label, "action": "dropped", "tokens_after": tokens})
    if tokens > budget:
        raise IrreduciblePromptError(
            f"prompt needs {tokens} tokens without any repository context; budget is {budget}"
        )
    return RenderedPrompt(text, tokens, included, log, budget, tokenizer.name)


def _location_header(seg: CodeSegment, excerpt: bool = False) -> str:
    suffix = " (excerpt)" if excerpt else ""
    return f"# File: {seg.path}, lines {seg.start_line}-{seg.end_line}{suffix}"


def _sliced_item(source: str, seg: CodeSegment, window: int) -> DraftItem:
    if not seg.focus_lines:
        return DraftItem(source, f"{seg.path}:{seg.start_line}-{seg.end_line}", _location_header(seg), seg.text)
    slices = slice_segment(seg, seg.focus_lines, window)
    excerpt = len(slices) > 1 or (slices[0].start_line, slices[0].end_line) != (seg.start_line, seg.end_line)
    if excerpt:
        body = "\n# ...\n".join(f"# lines {s.start_line}-{s.end_line}\n{s.text}" for s in slices)
    else:
        body = slices[0].text
    return DraftItem(source, f"{seg.path}:{seg.start_line}-{seg.end_line}", _location_header(seg, excerpt), body)


def error_function_section(bundle: ContextBundle) -> str:
    el = bundle.error_location
    target = bundle.target
    where = f"line {el.start_line}" if el.start_line == el.end_line else f"lines {el.start_line}-{el.end_line}"
    kind = "Function to repair" if bundle.error_function else "Code to repair"
    return f"{kind} ({target.path}, lines {target.start_line}-{target.end_line}; error at {where}):\n{target.text}"


def build_draft(
    bundle: ContextBundle,
    strategy: PromptStrategy,
    ablation: Iterable[str] = (),
    window: int = DEFAULT_WINDOW,
    layout: str | None = None,
) -> PromptDraft:
    ablation = set(ablation)
    unknown = ablation - set(ABLATABLE)
    if unknown:
        raise ValueError(f"unknown ablation source(s) {sorted(unknown)}; choose from {ABLATABLE}")
    items: list[DraftItem] = []
    if "definitions_of_eif" not in ablation:
        for seg in bundle.definitions_of_eif:
            info = None if "summarize" in ablation else bundle.enrichment.get(seg.node_id or "")
            items.append(DraftItem(
                "definitions_of_eif", f"{seg.path}:{seg.start_line}-{seg.end_line}", _location_header(seg),
                seg.text, signature=info.signature if info else None, summary=info.summary if info else None,
            ))
    for source in ("callers_of_eif", "callers_of_ef"):
        if source not in ablation:
            items.extend(_sliced_item(source, seg, window) for seg in getattr(bundle, source))
    for seg in bundle.similar_segments:
        items.append(DraftItem("similar_segments", f"{seg.path}:{seg.start_line}-{seg.end_line}",
                               _location_header(seg), seg.text))
    return PromptDraft(layout or load_layout(), strategy.instruction, strategy.example,
                       error_function_section(bundle), items)


def compose(
    bundle: ContextBundle,
    strategy: PromptStrategy,
    budget: int,
    ablation: Iterable[str] = (),
    tokenizer: Tokenizer | None = None,
    window: int = DEFAULT_WINDOW,
    layout: str | None = None,
) -> RenderedPrompt:
    tokenizer = tokenizer or ApproxTokenizer()
    ablation = sorted(set(ablation))
    draft = build_draft(bundle, strategy, ablation, window, layout)
    bare_text, _ = dataclasses.replace(draft, items=[]).render()
    bare = tokenizer.count(bare_text)
    if bare > budget:
        raise IrreduciblePromptError(
            f"instruction, example and error function need {bare} tokens; budget is {budget}"
        )
    prompt = fit_to_budget(draft, budget, tokenizer)
    prompt.strategy = strategy.name.value
    prompt.method = bundle.method
    prompt.ablation = ablation
    return prompt
