"""Regenerate tests/fixtures/dataset3 and its replay log.

Run from the repository root after any change that alters prompt text:

    python tests/fixtures/make_dataset.py
"""

import shutil
import tempfile
from pathlib import Path

from repoctx.gateway import CallableTransport
from repoctx.injector import DisruptionRule, generate_dataset, read_manifest
from repoctx.pipeline import RunConfig, run_experiment
from repoctx.tree import build_tree

HERE = Path(__file__).parent
DATASET = HERE / "dataset3"
REPLAY = HERE / "replay" / "dataset3-gpt-3.5-turbo.jsonl"


def main():
    shutil.rmtree(DATASET, ignore_errors=True)
    tree = build_tree(HERE / "repos" / "fix2")
    generate_dataset(tree, DATASET, [DisruptionRule.NP, DisruptionRule.ORV, DisruptionRule.CP], seed=0, per_rule=1)
    samples = read_manifest(DATASET / "manifest.jsonl")

    def reply(profile, prompt):
        for s in samples:
            if s.buggy_line in prompt:
                return f"The call no longer matches its callee.\n```python\n{s.ground_truth_line}\n```\n"
        return "No change needed."

    with tempfile.TemporaryDirectory() as out:
        run_dir = run_experiment(RunConfig(dataset=str(DATASET), out=out), transport=CallableTransport(reply),
                                 require_credential=False)
        REPLAY.parent.mkdir(parents=True, exist_ok=True)
        shutil.copy(run_dir / "exchanges" / "log.jsonl", REPLAY)
    print(f"{len(samples)} samples, replay at {REPLAY}")


if __name__ == "__main__":
    main()
