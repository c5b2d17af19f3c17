"""End-to-end experiment runs over a benchmark dataset.

A run reads a dataset manifest, rebuilds each sample's repository with its
mutated file overlaid, retrieves context with the chosen method, composes the
prompt and sends it through the gateway. Everything lands in one directory:

    <out>/<run id>/
        run.json                 config, provenance and per-sample status
        bundles/<sample>.json
        prompts/<sample>.txt     plus a .json sidecar
        exchanges/<sample>.json  plus log.jsonl, the gateway's append log
        report/summary.json
        report/grading.jsonl     blank grading rows with advisory hints
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

from repoctx import __version__
from repoctx.baselines import preliminary_context, slice_similarity_context
from repoctx.composer import ABLATABLE, Enricher, StrategyName, compose, enrich_definitions, load_strategy
from repoctx.evaluation import dump_json, skeleton_rows
from repoctx.gateway import BackendProfile, Gateway, Transport, get_profile, load_profiles
from repoctx.injector import BenchmarkSample, load_overlay, read_manifest
from repoctx.retriever import ContextBundle, retrieve
from repoctx.tokenizer import get_tokenizer
from repoctx.tree import ProjectStructureTree, build_tree

log = logging.getLogger(__name__)

METHODS = ("rlce", "preliminary", "slice-similarity")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str
    method: str = "rlce"
    strategy: str = "OneShot"
    backend: str = "gpt-3.5-turbo"
    budget: int | None = None
    ablation: list[str] = field(default_factory=list)
    out: str = "runs"
    seed: int = 0
    replay: str | None = None
    enrich: bool = False
    window: int = 5
    workers: int = 1
    profiles_file: str | None = None

    def validate(self) -> BackendProfile:
        """Check every field without touching the filesystem; returns the backend profile."""
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        try:
            self.strategy = StrategyName.parse(self.strategy).value
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.ablation = sorted(set(self.ablation))
        unknown = set(self.ablation) - set(ABLATABLE)
        if unknown:
            raise ConfigError(f"unknown ablation source(s) {sorted(unknown)}; choose from {', '.join(ABLATABLE)}")
        if self.ablation and self.method != "rlce":
            raise ConfigError("ablation only applies to the rlce method")
        if "summarize" in self.ablation and not self.enrich:
            raise ConfigError("ablating summarize needs enrichment enabled")
        if self.window < 1 or self.workers < 1:
            raise ConfigError("window and workers must be >= 1")
        extra = load_profiles(self.profiles_file) if self.profiles_file else None
        try:
            profile = get_profile(self.backend, extra)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.budget is not None and not (0 < self.budget <= profile.input_budget):
            raise ConfigError(f"budget must be in 1..{profile.input_budget} for {profile.name}")
        return profile

    def to_dict(self) -> dict:
        return asdict(self)


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_id(config: RunConfig, manifest_digest: str) -> str:
    keyed = {k: v for k, v in config.to_dict().items() if k not in ("out", "workers", "dataset", "replay")}
    key = json.dumps({"config": keyed, "manifest": manifest_digest}, sort_keys=True)
    return f"{config.method}-{config.strategy}-{config.backend}-{hashlib.sha256(key.encode()).hexdigest()[:10]}"


def build_context(tree: ProjectStructureTree, sample: BenchmarkSample, method: str) -> ContextBundle:
    el = sample.error_location
    if method == "rlce":
        return retrieve(tree, el)
    if method == "preliminary":
        return preliminary_context(tree, el)
    return slice_similarity_context(tree, el)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_json(obj), encoding="utf-8")


def run_experiment(
    config: RunConfig,
    transport: Transport | None = None,
    require_credential: bool = True,
    progress: Callable[[str, str], None] | None = None,
) -> Path:
    """Run every sample of the dataset; returns the run directory.

    One failing sample is recorded in ``run.json`` and never stops the run.
    """
    profile = config.validate()
    manifest = Path(config.dataset)
    if manifest.is_dir():
        manifest = manifest / "manifest.jsonl"
    dataset_dir = manifest.parent
    samples = sorted(read_manifest(manifest), key=lambda s: s.sample_id)
    rid = run_id(config, _digest(manifest))
    run_dir = Path(config.out) / rid
    for sub in ("prompts", "exchanges", "bundles", "report"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)

    gateway = Gateway(
        profile,
        replay=config.replay,
        log_path=run_dir / "exchanges" / "log.jsonl",
        transport=transport,
        require_credential=require_credential,
    )
    enricher = Enricher(gateway) if config.enrich else None
    strategy = load_strategy(config.strategy)
    tokenizer = get_tokenizer(profile.tokenizer)
    budget = config.budget or profile.input_budget

    def one(sample: BenchmarkSample) -> dict:
        status = {"sample_id": sample.sample_id, "rule": sample.rule.value, "status": "ok"}
        try:
            tree = build_tree(dataset_dir / sample.repo_snapshot, overlay=load_overlay(sample, dataset_dir))
            bundle = build_context(tree, sample, config.method)
            if config.method == "rlce":
                bundle = enrich_definitions(bundle, enricher)
            _write_json(run_dir / "bundles" / f"{sample.sample_id}.json", bundle.to_dict())
            prompt = compose(bundle, strategy, budget, config.ablation, tokenizer, config.window)
            prompt.write(run_dir / "prompts" / sample.sample_id)
            ex = gateway.complete(prompt, {"sample_id": sample.sample_id, "strategy": config.strategy,
                                           "method": config.method})
            _write_json(run_dir / "exchanges" / f"{sample.sample_id}.json", ex.to_dict())
            status.update(request_hash=ex.request_hash, token_count=prompt.token_count,
                          truncated=len(prompt.truncation_log))
            if ex.failed:
                status.update(status="failed", error=ex.error)
            return status | {"_exchange": ex}
        except Exception as exc:  # isolate per-sample failures
            log.exception("sample %s failed", sample.sample_id)
            return status | {"status": "error", "error": f"{type(exc).__name__}: {exc}"}
        finally:
            if progress:
                progress(sample.sample_id, status["status"])

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(one, samples))
    else:
        results = [one(s) for s in samples]

    exchanges = [r.pop("_exchange") for r in results if "_exchange" in r]
    by_id = {s.sample_id: s for s in samples}
    skeleton = skeleton_rows(exchanges, by_id)
    with open(run_dir / "report" / "grading.jsonl", "w", encoding="utf-8") as fh:
        for row in skeleton:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    counts = {k: sum(1 for r in results if r["status"] == k) for k in ("ok", "failed", "error")}
    tokens = [r["token_count"] for r in results if "token_count" in r]
    _write_json(run_dir / "report" / "summary.json", {
        "samples": len(samples),
        "status": counts,
        "by_rule": {rule: sum(1 for s in samples if s.rule.value == rule)
                    for rule in sorted({s.rule.value for s in samples})},
        "prompt_tokens": {"min": min(tokens, default=0), "max": max(tokens, default=0),
                          "total": sum(tokens)},
        "truncated_prompts": sum(1 for r in results if r.get("truncated")),
    })
    _write_json(run_dir / "run.json", {
        "run_id": rid,
        "tool_version": __version__,
        "config": {k: v for k, v in config.to_dict().items() if k != "out"},
        "manifest_digest": _digest(manifest),
        "replay_digest": _digest(Path(config.replay)) if config.replay else None,
        "budget": budget,
        "samples": results,
    })
    return run_dir


def token_counts(run_dir: str | Path) -> dict[str, int]:
    """Prompt token counts of a run keyed by request hash and by sample id."""
    data = json.loads((Path(run_dir) / "run.json").read_text(encoding="utf-8"))
    out = {}
    for s in data["samples"]:
        if "token_count" in s:
            out[s["sample_id"]] = s["token_count"]
            if s.get("request_hash"):
                out[s["request_hash"]] = s["token_count"]
    return out
