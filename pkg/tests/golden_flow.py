"""The golden run: filter -> genqa -> translate (EN to KO) -> assemble.

Shared by the fixture generator and the tests, once through the library
and once through the CLI, so both paths must produce the same manifests.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from mifc.assembly import DatasetName, DatasetManifest, assemble, load_assembly_spec
from mifc.cli import main
from mifc.config import load_config
from mifc.core import LanguageTag, read_jsonl, write_jsonl
from mifc.filtering import filter_stream
from mifc.llm_client import ChatProvider, ReplayProvider, ReplayStore
from mifc.pipeline import generate_qa, translate_with_gate

GOLDEN = Path(__file__).resolve().parent / "fixtures" / "golden"

ASSEMBLY_SPEC = {
    "inputs": [
        {"path": "genqa.jsonl", "lang": "EN", "dataset": "mmed_ift"},
        {"path": "translate.jsonl", "lang": "KO", "dataset": "mmed_ift"},
        {"path": "mc_train.jsonl", "lang": "EN", "dataset": "mmed_ift_mc", "split": "train"},
        {"path": "mc_test.jsonl", "lang": "EN", "dataset": "mmed_ift_mc", "split": "test"},
    ],
    "probes_per_language": 100,
}


@dataclass
class FlowResult:
    work: Path
    out_dir: Path
    manifests: dict[DatasetName, DatasetManifest] | None = None


def _stage_dir(fixture: Path, work: Path) -> None:
    work.mkdir(parents=True, exist_ok=True)
    for name in ("mc_train.jsonl", "mc_test.jsonl"):
        shutil.copy(fixture / name, work / name)
    (work / "assembly.json").write_text(json.dumps(ASSEMBLY_SPEC, indent=2), encoding="utf-8")


def run_flow(fixture: Path, work: Path, *, provider_factory: Callable[[str], ChatProvider]) -> FlowResult:
    cfg = load_config(fixture / "config.json")
    _stage_dir(fixture, work)
    kept, _ = filter_stream(read_jsonl(fixture / "raw.jsonl"), cfg.require_filter())
    generator = provider_factory(cfg.provider.model_name)
    judges = [provider_factory(j.model_name) for j in cfg.judge.judges]
    qa, _ = generate_qa(kept, cfg, generator=generator, judges=judges)
    write_jsonl(work / "genqa.jsonl", qa)
    records, _ = translate_with_gate(qa, LanguageTag.KO, cfg, cfg.embedding.build(), translator=generator)
    write_jsonl(work / "translate.jsonl", [r.output for r in records])
    spec = load_assembly_spec(work / "assembly.json")
    out_dir = work / "dataset"
    manifests = assemble(spec.inputs, cfg, out_dir, probes_per_language=spec.probes_per_language)
    return FlowResult(work, out_dir, manifests)


def replay_factory(path: Path) -> Callable[[str], ChatProvider]:
    store = ReplayStore.load(path)
    return lambda model: ReplayProvider(store, model)


def run_flow_cli(fixture: Path, work: Path) -> tuple[FlowResult, list[int]]:
    """Same flow through ``mifc`` subcommands; returns the exit codes."""
    _stage_dir(fixture, work)
    cfg = str(fixture / "config.json")
    replay = str(fixture / "replay.jsonl")
    codes = [
        main(["filter", "--config", cfg, "--input", str(fixture / "raw.jsonl"), "--out", str(work / "filtered")]),
        main(["genqa", "--config", cfg, "--replay", replay, "--input", str(work / "filtered.jsonl"),
              "--out", str(work / "genqa")]),
        main(["translate", "--config", cfg, "--replay", replay, "--input", str(work / "genqa.jsonl"),
              "--out", str(work / "translate"), "--target", "KO", "--threshold", "0.8"]),
        main(["assemble", "--config", cfg, "--spec", str(work / "assembly.json"), "--out", str(work / "dataset")]),
    ]
    return FlowResult(work, work / "dataset"), codes
