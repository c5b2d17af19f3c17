"""Comparison baselines: error-function-only context and windowed Jaccard retrieval."""

from __future__ import annotations

import re
from dataclasses import dataclass

from repoctx.retriever import ContextBundle, ErrorLocation, error_segments, provenance, validate_location
from repoctx.tree import CodeSegment, ProjectStructureTree

DEFAULT_K = 5
DEFAULT_WINDOW = 10
DEFAULT_STRIDE = 5

_WORD_RE = re.compile(r"[^\W_]+")


def _split_camel(word: str) -> list[str]:
    parts = []
    start = 0
    for i in range(1, len(word)):
        prev, ch = word[i - 1], word[i]
        nxt = word[i + 1] if i + 1 < len(word) else ""
        if (
            (prev.islower() and ch.isupper())
            or (prev.isupper() and ch.isupper() and nxt.islower())
            or (prev.isdigit() != ch.isdigit())
        ):
            parts.append(word[start:i])
            start = i
    parts.append(word[start:])
    return parts


def tokenize_bag(text: str) -> frozenset[str]:
    """Lowercased identifier pieces split on underscores and camel-case humps."""
    bag = set()
    for word in _WORD_RE.findall(text):
        for part in _split_camel(word):
            if part:
                bag.add(part.lower())
    return frozenset(bag)


def jaccard(a: frozenset[str] | set[str], b: frozenset[str] | set[str]) -> float:
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


@dataclass(frozen=True)
class SimilarityWindow:
    segment: CodeSegment
    bag: frozenset[str]
    score: float


def iter_windows(tree: ProjectStructureTree, path: str, window: int, stride: int) -> list[tuple[int, int]]:
    n = tree.line_count(path)
    spans = []
    for start in range(1, n + 1, stride):
        end = min(start + window - 1, n)
        spans.append((start, end))
        if end == n:
            break
    return spans


def query_span(n_lines: int, el: ErrorLocation, window: int) -> tuple[int, int]:
    """A ``window``-line span centred on the error location, clipped to the file."""
    centre = (el.start_line + el.end_line) // 2
    start = max(1, centre - window // 2)
    end = min(n_lines, start + window - 1)
    start = max(1, end - window + 1)
    return min(start, el.start_line), max(end, el.end_line)


def score_windows(
    tree: ProjectStructureTree, el: ErrorLocation, window: int = DEFAULT_WINDOW, stride: int = DEFAULT_STRIDE
) -> list[SimilarityWindow]:
    """Every candidate window with its score, ranked by (score desc, path, start line)."""
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    qs, qe = query_span(tree.line_count(el.path), el, window)
    query = tokenize_bag(tree.text_of(el.path, qs, qe))
    scored = []
    for path in tree.files:
        for start, end in iter_windows(tree, path, window, stride):
            if path == el.path and start <= el.end_line and el.start_line <= end:
                continue
            text = tree.text_of(path, start, end)
            bag = tokenize_bag(text)
            seg = CodeSegment(path, start, end, text, "similarity-window")
            scored.append(SimilarityWindow(seg, bag, jaccard(query, bag)))
    scored.sort(key=lambda w: (-w.score, w.segment.path, w.segment.start_line))
    return scored


def preliminary_context(tree: ProjectStructureTree, el: ErrorLocation) -> ContextBundle:
    validate_location(tree, el)
    ef, lines = error_segments(tree, el)
    return ContextBundle(el, ef, lines, flags={"degraded": False, "enrichment": "none"},
                         provenance=provenance(tree), method="preliminary")


def slice_similarity_context(
    tree: ProjectStructureTree,
    el: ErrorLocation,
    k: int = DEFAULT_K,
    window: int = DEFAULT_WINDOW,
    stride: int = DEFAULT_STRIDE,
) -> ContextBundle:
    bundle = preliminary_context(tree, el)
    top = score_windows(tree, el, window, stride)[:k]
    bundle.similar_segments = [w.segment for w in top]
    bundle.flags["similarity_scores"] = [w.score for w in top]
    bundle.flags["similarity"] = {"k": k, "window": window, "stride": stride}
    bundle.method = "slice-similarity"
    return bundle
