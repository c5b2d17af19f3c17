import sys
from pathlib import Path

import pytest

TESTS = Path(__file__).parent
FIXTURES = TESTS / "fixtures"
REPOS = FIXTURES / "repos"
ORACLE_REPOS = ("fix1", "fix2", "fix3", "fix4", "fix5")

sys.path.insert(0, str(TESTS))


@pytest.fixture
def repos() -> Path:
    return REPOS


@pytest.fixture
def fix1():
    from repoctx.tree import build_tree

    return build_tree(REPOS / "fix1")


def write_repo(root: Path, files: dict[str, str]) -> Path:
    for rel, text in files.items():
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    return root


def table_records(n=124, related=101, fmt=74, repair=28, **kw):
    """Synthetic grades with fixed positive counts for each metric."""
    from repoctx.evaluation import GradingRecord

    base = {"model": "gpt-3.5-turbo", "strategy": "OneShot", "grader": "g1"} | kw
    return [
        GradingRecord(f"s{i:03d}", related_reply=int(i < related), correct_format=int(i < fmt),
                      correct_repair=int(i < repair), **base)
        for i in range(n)
    ]


# -- acceptance criterion reporting -------------------------------------------
CRITERIA: dict[int, tuple[str, str, float]] = {}


def record_criterion(number: int, title: str, status: str, seconds: float) -> None:
    CRITERIA[number] = (title, status, seconds)
    print(f"CRITERION {number} {status}: {title} ({seconds:.3f}s)")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        title, status, seconds = CRITERIA[number]
        terminalreporter.write_line(f"CRITERION {number} {status}: {title} ({seconds:.3f}s)")
