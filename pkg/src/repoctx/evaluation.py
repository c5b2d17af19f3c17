"""Grading records and the analyses computed from them.

Grades are human judgments; this module only stores, checks and counts them.
Proportions are kept as exact fractions and rounded half-up to four decimals
only when reported.
"""

from __future__ import annotations

import json
import threading
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, fields
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from repoctx.composer import StrategyName

METRICS = ("related_reply", "correct_format", "correct_repair", "correct_explanation")
GROUP_KEYS = ("model", "strategy", "method")
RESOLUTION_GRADER = "resolution"

_store_lock = threading.Lock()


class GradingError(ValueError):
    pass


@dataclass(frozen=True)
class GradingRecord:
    sample_id: str
    model: str
    strategy: str
    related_reply: int
    correct_format: int
    correct_repair: int
    correct_explanation: int | None = None
    grader: str = "unknown"
    exchange_ref: str | None = None
    method: str = "rlce"
    note: str | None = None

    def __post_init__(self):
        try:
            strategy = StrategyName.parse(self.strategy)
        except ValueError as exc:
            raise GradingError(f"{self.sample_id}: {exc}") from exc
        object.__setattr__(self, "strategy", strategy.value)
        for m in METRICS[:3]:
            if getattr(self, m) not in (0, 1):
                raise GradingError(f"{self.sample_id}: {m} must be 0 or 1, got {getattr(self, m)!r}")
        cot = strategy == StrategyName.COT
        if cot and self.correct_explanation not in (0, 1):
            raise GradingError(f"{self.sample_id}: CoT records need correct_explanation 0 or 1")
        if not cot and self.correct_explanation is not None:
            raise GradingError(f"{self.sample_id}: correct_explanation is only graded for CoT")
        if self.correct_repair == 1 and self.related_reply != 1:
            raise GradingError(f"{self.sample_id}: a correct repair must also be a related reply")

    @property
    def key(self) -> tuple[str, str, str, str]:
        return (self.sample_id, self.model, self.strategy, self.method)

    def metrics(self) -> dict[str, int | None]:
        return {m: getattr(self, m) for m in METRICS}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> GradingRecord:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"advisory"}
        if unknown:
            raise GradingError(f"unknown grading fields: {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in known})


def read_records(path: str | Path) -> list[GradingRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(GradingRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError, GradingError) as exc:
                raise GradingError(f"{path}:{n}: {exc}") from exc
    return out


def append_records(path: str | Path, records: Iterable[GradingRecord]) -> None:
    with _store_lock, open(path, "a", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


# -- two-grader workflow -----------------------------------------------------------
@dataclass
class Disagreement:
    key: tuple[str, str, str, str]
    metrics: list[str]
    graders: list[str]

    def to_dict(self) -> dict:
        return {"sample_id": self.key[0], "model": self.key[1], "strategy": self.key[2], "method": self.key[3],
                "metrics": self.metrics, "graders": self.graders}


def reconcile(records: Iterable[GradingRecord]) -> tuple[list[GradingRecord], list[Disagreement]]:
    """Collapse per-grader records into one final record per key.

    A ``resolution`` record always wins. Otherwise graders who agree on every
    metric yield that grade; unresolved disagreements are returned and left
    out of the final list.
    """
    groups: dict[tuple, list[GradingRecord]] = defaultdict(list)
    for r in records:
        groups[r.key].append(r)
    final, open_ = [], []
    for key in sorted(groups):
        rs = sorted(groups[key], key=lambda r: r.grader)
        resolutions = [r for r in rs if r.grader == RESOLUTION_GRADER]
        if resolutions:
            final.append(resolutions[-1])
            continue
        differing = [m for m in METRICS if len({r.metrics()[m] for r in rs}) > 1]
        if differing:
            open_.append(Disagreement(key, differing, [r.grader for r in rs]))
        else:
            final.append(rs[0])
    return final, open_


# -- aggregation -------------------------------------------------------------------
def round_half_up(value: Fraction, places: int = 4) -> Decimal:
    exact = Decimal(value.numerator) / Decimal(value.denominator)
    return exact.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


@dataclass
class MetricReport:
    group: dict[str, str]
    n: int
    counts: dict[str, int]
    proportions: dict[str, Fraction | None]
    explanation_n: int = 0

    def rounded(self, places: int = 4) -> dict[str, str | None]:
        return {m: (None if p is None else str(round_half_up(p, places))) for m, p in self.proportions.items()}

    def to_dict(self) -> dict:
        return {"group": self.group, "n": self.n, "counts": self.counts, "explanation_n": self.explanation_n,
                "proportions": self.rounded(),
                "exact": {m: (None if p is None else f"{p.numerator}/{p.denominator}")
                          for m, p in self.proportions.items()}}


def check_duplicates(records: Sequence[GradingRecord]) -> None:
    dupes = sorted(k for k, c in Counter(r.key for r in records).items() if c > 1)
    if dupes:
        listed = ", ".join("/".join(k) for k in dupes[:20])
        raise GradingError(f"{len(dupes)} duplicate grading keys (reconcile graders first): {listed}")


def aggregate(records: Iterable[GradingRecord], group_by: Sequence[str] = GROUP_KEYS) -> list[MetricReport]:
    records = list(records)
    check_duplicates(records)
    for k in group_by:
        if k not in GROUP_KEYS:
            raise GradingError(f"cannot group by {k!r}; choose from {GROUP_KEYS}")
    groups: dict[tuple, list[GradingRecord]] = defaultdict(list)
    for r in records:
        groups[tuple(getattr(r, k) for k in group_by)].append(r)
    out = []
    for gkey in sorted(groups):
        rs = groups[gkey]
        counts = {m: sum(r.metrics()[m] or 0 for r in rs) for m in METRICS}
        n = len(rs)
        graded_expl = sum(1 for r in rs if r.correct_explanation is not None)
        props: dict[str, Fraction | None] = {m: Fraction(counts[m], n) for m in METRICS[:3]}
        props["correct_explanation"] = Fraction(counts["correct_explanation"], graded_expl) if graded_expl else None
        out.append(MetricReport(dict(zip(group_by, gkey)), n, counts, props, graded_expl))
    return out


def by_error_type(
    records: Iterable[GradingRecord], rules: Mapping[str, str], group_by: Sequence[str] = GROUP_KEYS
) -> dict:
    """Repair accuracy per disruption rule; ``rules`` maps sample id to rule name."""
    records = list(records)
    check_duplicates(records)
    unknown = sorted({r.sample_id for r in records} - set(rules))
    if unknown:
        raise GradingError(f"records reference unknown samples: {unknown[:20]}")
    sample_counts = Counter(rules.values())
    buckets: dict[tuple, list[GradingRecord]] = defaultdict(list)
    for r in records:
        buckets[(rules[r.sample_id],) + tuple(getattr(r, k) for k in group_by)].append(r)
    rows = []
    for key in sorted(buckets):
        rs = buckets[key]
        correct = sum(r.correct_repair for r in rs)
        rows.append({"rule": key[0], **dict(zip(group_by, key[1:])), "n": len(rs), "correct_repair": correct,
                     "accuracy": str(round_half_up(Fraction(correct, len(rs))))})
    all_rules = sorted(set(sample_counts) | {"NRV", "NP", "ORV", "OP", "CRV", "CP"})
    return {"sample_counts": {rule: sample_counts.get(rule, 0) for rule in all_rules}, "rows": rows}


def bin_sizes(n: int, bins: int) -> list[int]:
    """Contiguous bin sizes differing by at most one, larger bins first."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    q, r = divmod(n, bins)
    return [q + 1 if i < r else q for i in range(bins)]


def by_length_bins(records: Iterable[GradingRecord], token_counts: Mapping[str, int], bins: int = 4) -> list[dict]:
    """Records ordered by prompt length and cut into ``bins`` near-equal groups.

    ``token_counts`` is keyed by exchange reference, falling back to sample id.
    """
    records = list(records)
    joined = []
    for r in records:
        if r.exchange_ref is not None and r.exchange_ref in token_counts:
            tokens = token_counts[r.exchange_ref]
        elif r.sample_id in token_counts:
            tokens = token_counts[r.sample_id]
        else:
            raise GradingError(f"{r.sample_id}: no prompt token count to bin by")
        joined.append((tokens, r.key, r))
    joined.sort(key=lambda t: (t[0], t[1]))
    out = []
    at = 0
    for i, size in enumerate(bin_sizes(len(joined), bins)):
        chunk = joined[at : at + size]
        at += size
        row = {"bin": i + 1, "n": size}
        if chunk:
            correct = sum(r.correct_repair for _, _, r in chunk)
            row.update({
                "min_tokens": chunk[0][0],
                "max_tokens": chunk[-1][0],
                "mean_tokens": str(round_half_up(Fraction(sum(t for t, _, _ in chunk), size), 2)),
                "correct_repair": correct,
                "accuracy": str(round_half_up(Fraction(correct, size))),
            })
        out.append(row)
    return out


def crosstab_strategies(records_a: Iterable[GradingRecord], records_b: Iterable[GradingRecord]) -> dict:
    """Joint outcome of two strategies on the same samples.

    Cluster names give (A correct, B correct) as T/F; each cluster is split by
    B's explanation grade, so B is normally the CoT strategy.
    """
    index_a = {(r.sample_id, r.model, r.method): r for r in records_a}
    index_b = {(r.sample_id, r.model, r.method): r for r in records_b}
    clusters = {c: {"total": 0, "explanation_correct": 0, "explanation_incorrect": 0, "explanation_missing": 0}
                for c in ("TT", "TF", "FT", "FF")}
    for key in sorted(set(index_a) & set(index_b)):
        a, b = index_a[key], index_b[key]
        name = ("T" if a.correct_repair else "F") + ("T" if b.correct_repair else "F")
        c = clusters[name]
        c["total"] += 1
        if b.correct_explanation is None:
            c["explanation_missing"] += 1
        elif b.correct_explanation:
            c["explanation_correct"] += 1
        else:
            c["explanation_incorrect"] += 1
    excluded = [{"sample_id": k[0], "model": k[1], "method": k[2], "graded_under": "A" if k in index_a else "B"}
                for k in sorted(set(index_a) ^ set(index_b))]
    return {"clusters": clusters, "jointly_graded": sum(c["total"] for c in clusters.values()),
            "excluded": excluded}


# -- grading support ---------------------------------------------------------------
def advisory_repair(reply: str, buggy_line: str, ground_truth_line: str) -> int:
    """Exact-match hint: the reply contains the fixed line and not the buggy one.

    Only ever a suggestion for a human grader; repairs that differ textually
    from the ground truth can still be correct.
    """
    fixed = ground_truth_line.strip()
    buggy = buggy_line.strip()
    lines = {ln.strip() for ln in reply.splitlines()}
    return int(fixed in lines and buggy not in lines)


def skeleton_rows(exchanges: Iterable, samples: Mapping[str, object] | None = None, grader: str = "") -> list[dict]:
    """One blank grading row per exchange, for a human to fill in."""
    rows = []
    for ex in exchanges:
        meta = ex.meta or {}
        strategy = meta.get("strategy", "")
        row = {
            "sample_id": meta.get("sample_id", ""),
            "model": ex.backend,
            "strategy": strategy,
            "method": meta.get("method", "rlce"),
            "related_reply": None,
            "correct_format": None,
            "correct_repair": None,
            "correct_explanation": None,
            "grader": grader,
            "exchange_ref": ex.request_hash,
        }
        sample = (samples or {}).get(row["sample_id"])
        if sample is not None and not ex.failed:
            row["advisory"] = {"correct_repair": advisory_repair(ex.reply, sample.buggy_line,
                                                                 sample.ground_truth_line)}
        rows.append(row)
    return rows


# -- rendering -----------------------------------------------------------------------
def format_table(rows: Sequence[Mapping], columns: Sequence[str]) -> str:
    cells = [[str(c) for c in columns]]
    for row in rows:
        cells.append(["-" if row.get(c) is None else str(row.get(c)) for c in columns])
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def metric_rows(reports: Sequence[MetricReport]) -> list[dict]:
    return [{**r.group, "n": r.n, **r.rounded()} for r in reports]


def dump_json(obj) -> str:
    def default(o):
        if isinstance(o, Fraction):
            return f"{o.numerator}/{o.denominator}"
        if isinstance(o, Decimal):
            return str(o)
        raise TypeError(type(o).__name__)

    return json.dumps(obj, indent=2, sort_keys=True, default=default) + "\n"


@dataclass
class Report:
    kind: str
    data: object
    text: str = ""
    params: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return dump_json({"kind": self.kind, "params": self.params, "data": self.data})
