import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repoctx.composer import (
    ABLATABLE,
    IrreduciblePromptError,
    StrategyName,
    build_draft,
    compose,
    enrich_definitions,
    load_layout,
    load_strategy,
    slice_around_call,
    slice_segment,
)
from repoctx.retriever import ContextBundle, ErrorLocation, retrieve
from repoctx.tokenizer import ApproxTokenizer
from repoctx.tree import CodeSegment, ContractError, build_tree

HEADERS = {
    "definitions_of_eif": "# Definitions of functions",
    "callers_of_eif": "# Other places in the repository that call",
    "callers_of_ef": "# Places in the repository that call the function to repair",
}


def _segment(n_lines: int, start: int = 1, focus=()) -> CodeSegment:
    text = "\n".join(f"line{i}" for i in range(start, start + n_lines))
    return CodeSegment("x.py", start, start + n_lines - 1, text, "caller", "x.py::f", tuple(focus))


def test_strategies():
    assert StrategyName.parse("one-shot") == StrategyName.ONE_SHOT
    assert StrategyName.parse("CoT") == StrategyName.COT
    with pytest.raises(ValueError):
        StrategyName.parse("few-shot")
    assert load_strategy("OneShot").example is not None
    for name in ("simple", "detail", "cot"):
        assert load_strategy(name).example is None
    cot = load_strategy("cot").instruction
    assert "Error explanation" in cot and "Repair strategy" in cot and "Fixed code" in cot


def test_layout_placeholders_checked(tmp_path):
    assert "{context}" in load_layout()
    (tmp_path / "layout.txt").write_text("{context}\n{instruction}\n{example}\n{error_function}\n")
    with pytest.raises(ValueError, match="in order"):
        load_layout(tmp_path)


def test_slice_window_and_clipping():
    seg = _segment(30, start=10)
    s = slice_around_call(seg, 20)
    assert (s.start_line, s.end_line) == (15, 25)
    assert s.text.split("\n")[0] == "line15"
    edge = slice_around_call(seg, 11)
    assert (edge.start_line, edge.end_line) == (10, 16)
    with pytest.raises(ContractError):
        slice_around_call(seg, 5)


def test_overlapping_slices_merge():
    seg = _segment(40)
    merged = slice_segment(seg, [10, 18])
    assert [(s.start_line, s.end_line) for s in merged] == [(5, 23)]
    apart = slice_segment(seg, [5, 30])
    assert [(s.start_line, s.end_line) for s in apart] == [(1, 10), (25, 35)]


def test_fix1_prompt_section_order(fix1):
    bundle = retrieve(fix1, ErrorLocation.parse("main.py:5"))
    p = compose(bundle, load_strategy("OneShot"), 4096)
    assert p.sections == ["instruction", "example", "context", "error_function"]
    assert p.text.rstrip("\n").endswith(bundle.error_function.text)
    assert "def power(base, exp):" in p.text
    assert p.token_count == ApproxTokenizer().count(p.text)


def test_truncation_drops_callers_of_ef_first(repos):
    tree = build_tree(repos / "fix2")
    bundle = retrieve(tree, ErrorLocation.parse("app.py:17"))
    full = compose(bundle, load_strategy("detail"), 8192)
    assert full.truncation_log == []
    tight = compose(bundle, load_strategy("detail"), full.token_count - 1)
    assert tight.truncation_log[0]["source"] == "callers_of_ef"
    assert tight.token_count <= full.token_count - 1
    assert HEADERS["callers_of_ef"] not in tight.text


def test_truncation_cascade_order(repos):
    tree = build_tree(repos / "fix2")
    bundle = retrieve(tree, ErrorLocation.parse("pricing.py:17"))
    strategy = load_strategy("simple")
    bare = compose(bundle, strategy, 8192, ablation=["definitions_of_eif", "callers_of_eif", "callers_of_ef"])
    p = compose(bundle, strategy, bare.token_count)
    order = ["callers_of_ef", "callers_of_eif", "similar_segments", "summaries", "definitions_of_eif"]
    ranks = [order.index(e["source"]) for e in p.truncation_log]
    assert ranks == sorted(ranks)
    assert p.sections == ["instruction", "error_function"]


def test_irreducible_prompt(fix1):
    bundle = retrieve(fix1, ErrorLocation.parse("main.py:5"))
    with pytest.raises(IrreduciblePromptError):
        compose(bundle, load_strategy("OneShot"), 50)


def test_ablation_removes_sources(fix1):
    bundle = retrieve(fix1, ErrorLocation.parse("main.py:5"))
    p = compose(bundle, load_strategy("detail"), 4096, ablation=["callers_of_eif"])
    assert HEADERS["callers_of_eif"] not in p.text
    assert HEADERS["definitions_of_eif"] in p.text
    with pytest.raises(ValueError):
        compose(bundle, load_strategy("detail"), 4096, ablation=["bogus"])
    assert "summarize" in ABLATABLE


def test_empty_context_collapses(fix1):
    bundle = retrieve(fix1, ErrorLocation.parse("utils.py:2"))
    bundle.definitions_of_eif = bundle.callers_of_eif = bundle.callers_of_ef = []
    p = compose(bundle, load_strategy("simple"), 4096)
    assert p.sections == ["instruction", "error_function"]
    assert "Repository context" not in p.text
    assert "\n\n\n" not in p.text


class _Summarizer:
    name = "stub"

    def __init__(self, reply="Signature: power(base: int, exp: int) -> int\nSummary: Raises base to exp.",
                 failed=False):
        self.reply, self.failed, self.calls = reply, failed, 0

    def summarize(self, prompt):
        self.calls += 1
        return self.reply, self.failed


def test_enrichment_adds_signature_and_summary(fix1):
    bundle = retrieve(fix1, ErrorLocation.parse("main.py:5"))
    stub = _Summarizer()
    enriched = enrich_definitions(bundle, stub)
    assert enriched.flags["enrichment"] == "enabled"
    p = compose(enriched, load_strategy("detail"), 4096)
    assert "# Summary: Raises base to exp." in p.text
    plain = compose(enriched, load_strategy("detail"), 4096, ablation=["summarize"])
    assert "# Summary:" not in plain.text


def test_enrichment_failure_falls_back_to_static_signature(fix1):
    bundle = retrieve(fix1, ErrorLocation.parse("main.py:5"))
    enriched = enrich_definitions(bundle, _Summarizer(reply="", failed=True))
    info = enriched.enrichment["utils.py::power"]
    assert info.failed and info.summary == ""
    assert info.signature == "power(base, exp)"
    assert enriched.flags["enrichment"] == "partial"
    assert enrich_definitions(bundle, None).flags["enrichment"] == "disabled"


def test_sidecar_written(fix1, tmp_path):
    bundle = retrieve(fix1, ErrorLocation.parse("main.py:5"))
    p = compose(bundle, load_strategy("cot"), 4096)
    txt, meta = p.write(tmp_path / "p")
    assert txt.read_text() == p.text
    side = json.loads(meta.read_text())
    assert side["strategy"] == "CoT" and side["token_count"] == p.token_count


# -- property: budgets are never exceeded ----------------------------------------
_line = st.text(alphabet="abcdefgh(), =_.:", min_size=0, max_size=30)


@st.composite
def bundles(draw):
    def seg(kind, path, start, focus=False):
        n = draw(st.integers(1, 25))
        text = "\n".join(draw(st.lists(_line, min_size=n, max_size=n)))
        f = (draw(st.integers(start, start + n - 1)),) if focus else ()
        return CodeSegment(path, start, start + n - 1, text, kind, f"{path}::f{start}", f)

    ef = seg("error-function", "err.py", 100)
    lines = CodeSegment("err.py", 101, 101, ef.text.split("\n")[min(1, ef.end_line - 100)], "error-lines")
    return ContextBundle(
        error_location=ErrorLocation("err.py", 101 if ef.end_line > 100 else 100, 101 if ef.end_line > 100 else 100),
        error_function=ef,
        error_lines=lines,
        definitions_of_eif=[seg("definition", f"d{i}.py", 1) for i in range(draw(st.integers(0, 4)))],
        callers_of_eif=[seg("caller", f"c{i}.py", 1, True) for i in range(draw(st.integers(0, 4)))],
        callers_of_ef=[seg("caller", f"e{i}.py", 1, True) for i in range(draw(st.integers(0, 4)))],
        similar_segments=[seg("similarity-window", f"s{i}.py", 1) for i in range(draw(st.integers(0, 3)))],
    )


@settings(max_examples=300, deadline=None)
@given(bundles(), st.integers(1, 3000), st.sampled_from(list(StrategyName)))
def test_budget_never_exceeded(bundle, budget, strategy):
    strat = load_strategy(strategy)
    try:
        p = compose(bundle, strat, budget)
    except IrreduciblePromptError:
        draft = build_draft(bundle, strat)
        draft.items = []
        assert ApproxTokenizer().count(draft.render()[0]) > budget
        return
    assert p.token_count <= budget
    assert bundle.error_function.text in p.text
    assert p.sections[0] == "instruction" and p.sections[-1] == "error_function"
    order = ["instruction", "example", "context", "error_function"]
    assert p.sections == [s for s in order if s in p.sections]
