"""``mifc`` command-line entry point.

Exit codes: 0 success, 1 data errors (validation, format, parse, leakage
found), 2 provider/transport errors, 3 configuration or usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .assembly import (
    check_leakage,
    dedup,
    emit_training_configs,
    format_manifest_table,
    load_assembly_spec,
    load_manifest,
    assemble,
)
from .config import load_config
from .core import LanguageTag, atomic_open, dumps_line, read_jsonl, sha256_file, write_json, write_jsonl
from .errors import ConfigError, FormatError, MifcError, ParseError, TransportError, ValidationError
from .filtering import FilterConfig, filter_stream, load_keywords, summarize
from .llm_client import ChatProvider, ProviderConfig, ReplayStore, make_provider
from .metrics import TokenizerMode, bleu, embed_similarity, score_round_trip
from .pipeline import (
    expand_answers,
    generate_qa,
    generation_report,
    judge_samples,
    translate_with_gate,
    translation_report,
)

logger = logging.getLogger("mifc")

EXIT_OK = 0
EXIT_DATA = 1
EXIT_TRANSPORT = 2
EXIT_CONFIG = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 3 instead of argparse's default 2 (reserved for transport)."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


class JsonLogFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "ts": round(record.created, 3),
            "level": record.levelname.lower(),
            "logger": record.name,
            "msg": record.getMessage(),
        }
        if record.exc_info:
            payload["exc"] = self.formatException(record.exc_info)
        return json.dumps(payload, ensure_ascii=False)


def setup_logging(fmt: str, verbose: int) -> None:
    handler = logging.StreamHandler(sys.stderr)
    if fmt == "json":
        handler.setFormatter(JsonLogFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose > 1 else logging.INFO if verbose else logging.WARNING)


# ---------------------------------------------------------------- run context


@dataclasses.dataclass
class RunReport:
    command: str
    inputs: list[dict[str, str]] = dataclasses.field(default_factory=list)
    counts: dict[str, Any] = dataclasses.field(default_factory=dict)
    duration: float = 0.0
    config_digest: str = ""
    details: dict[str, Any] = dataclasses.field(default_factory=dict)

    def add_input(self, path: str | Path) -> None:
        self.inputs.append({"path": str(path), "sha256": sha256_file(path)})

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


class Run:
    """Per-invocation state: merged config, providers, and the run report."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        cfg = load_config(args.config)
        if getattr(args, "jobs", None) is not None:
            if args.jobs < 1:
                raise ConfigError("--jobs must be >= 1")
            cfg = dataclasses.replace(cfg, concurrency_limit=args.jobs)
        model = getattr(args, "model", None)
        if model:
            cfg = dataclasses.replace(cfg, provider=dataclasses.replace(cfg.provider, model_name=model))
        self.cfg = cfg
        self.report = RunReport(command=args.command, config_digest=cfg.digest())
        self.report_path: Path | None = None
        self._replay: ReplayStore | None = None
        if getattr(args, "replay", None):
            self._replay = ReplayStore.load(args.replay)
        self.started = time.monotonic()

    def read(self, path: str | Path) -> list:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"input file not found: {p}")
        self.report.add_input(p)
        return read_jsonl(p)

    def provider(self, pcfg: ProviderConfig) -> ChatProvider:
        return make_provider(pcfg, replay=self._replay, record_path=getattr(self.args, "record", None))

    def generator(self) -> ChatProvider:
        return self.provider(self.cfg.provider)

    def judges(self) -> list[ChatProvider]:
        return [self.provider(j) for j in self.cfg.judge.judges]

    def finish(self) -> None:
        self.report.duration = round(time.monotonic() - self.started, 6)
        path = self.report_path or Path(f"mifc-{self.args.command}.report.json")
        write_json(path, self.report.to_dict())


def _outputs(out: str) -> tuple[Path, Path, Path]:
    base = Path(out)
    if base.suffix == ".jsonl":
        base = base.with_suffix("")
    return (
        base.with_name(base.name + ".jsonl"),
        base.with_name(base.name + ".rejected.jsonl"),
        base.with_name(base.name + ".report.json"),
    )


def _transport_failures(rejected: Sequence, key: str) -> int:
    return sum(1 for s in rejected if s.annotations.get(key) == "transport")


# ---------------------------------------------------------------- commands


def cmd_filter(run: Run) -> int:
    a = run.args
    cfg = run.cfg.filter
    if a.keywords:
        base = cfg or FilterConfig(keywords=("_",))
        cfg = FilterConfig(keywords=tuple(load_keywords(a.keywords)), thres1=base.thres1, thres2=base.thres2, match_mode=base.match_mode)
    if cfg is None:
        raise ConfigError("no keywords: pass --keywords or set filter.keywords_file in --config")
    overrides = {k: v for k, v in (("thres1", a.thres1), ("thres2", a.thres2), ("match_mode", a.match_mode)) if v is not None}
    try:
        cfg = dataclasses.replace(cfg, **overrides)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    if not (a.out or a.kept):
        raise UsageError("one of --out or --kept is required")
    if a.out:
        kept_path, rej_path, report_path = _outputs(a.out)
    else:
        kept_path = Path(a.kept)
        rej_path = _outputs(a.kept)[1]
        report_path = _outputs(a.kept)[2]
    if a.rejected:
        rej_path = Path(a.rejected)
    run.report_path = report_path
    kept, rejected = filter_stream(run.read(a.input), cfg)
    write_jsonl(kept_path, kept)
    write_jsonl(rej_path, rejected)
    run.report.counts = summarize(kept, rejected)
    run.report.details = {"filter": cfg.to_dict()}
    return EXIT_OK


def _read_lines(path: str) -> list[str]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"input file not found: {p}") from None
    except UnicodeDecodeError as exc:
        raise FormatError(f"not UTF-8: {exc}", path=str(p)) from None
    return [line for line in text.splitlines() if line.strip()]


def cmd_score(run: Run) -> int:
    a = run.args
    left, right = _read_lines(a.a), _read_lines(a.b)
    run.report.inputs = [{"path": p, "sha256": sha256_file(p)} for p in (a.a, a.b)]
    if len(left) != len(right):
        raise ValidationError(f"--a has {len(left)} texts, --b has {len(right)}", "b")
    lang = LanguageTag.parse(a.lang) if a.lang else None
    ccfg = run.cfg.ccts
    overrides = {k: v for k, v in (("lambda1", a.lambda1), ("lambda2", a.lambda2)) if v is not None}
    if overrides:
        try:
            ccfg = dataclasses.replace(ccfg, **overrides)
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc
    mode = TokenizerMode(a.mode) if a.mode else ccfg.mode_for(lang)
    embedder = run.cfg.embedding.build() if a.metric != "bleu" else None
    rows = []
    for i, (x, x_hat) in enumerate(zip(left, right), start=1):
        row: dict[str, Any] = {"line": i}
        if a.metric == "bleu":
            s = bleu(x_hat, x, mode)
            row.update(score=s.mean, per_n=list(s.per_n), brevity_penalty=s.brevity_penalty)
        elif a.metric == "embed":
            row["score"] = embed_similarity(x_hat, x, embedder, mode)
        else:
            r = score_round_trip(x, x_hat, dataclasses.replace(ccfg, tokenizer_mode=mode), embedder, lang=lang)
            row.update(score=r.score, bleu_mean=r.bleu_mean, embed=r.embed)
        rows.append(row)
    lines = "".join(dumps_line(r) + "\n" for r in rows)
    if a.out:
        out_path, _, report_path = _outputs(a.out)
        with atomic_open(out_path) as fh:
            fh.write(lines)
        run.report_path = report_path
    else:
        sys.stdout.write(lines)
    scores = [r["score"] for r in rows]
    run.report.counts = {
        "pairs": len(rows),
        "metric": a.metric,
        "mean": sum(scores) / len(scores) if scores else 0.0,
    }
    return EXIT_OK


def _stage_io(run: Run) -> tuple[Path, Path]:
    out, rej, report = _outputs(run.args.out)
    run.report_path = report
    return out, rej


def cmd_expand(run: Run) -> int:
    out, rej = _stage_io(run)
    samples = run.read(run.args.input)
    expanded, failures = expand_answers(samples, run.cfg, chat=run.generator())
    write_jsonl(out, expanded)
    write_jsonl(rej, failures)
    transport = sum(1 for s in failures if s.annotations.get("expand.error_kind") == "transport")
    run.report.counts = {"inputs": len(samples), "expanded": len(expanded), "failed": len(failures), "transport_failures": transport}
    return EXIT_TRANSPORT if transport else EXIT_OK


def cmd_genqa(run: Run) -> int:
    out, rej = _stage_io(run)
    samples = run.read(run.args.input)
    accepted, rejected = generate_qa(samples, run.cfg, generator=run.generator(), judges=run.judges())
    write_jsonl(out, accepted)
    write_jsonl(rej, rejected)
    run.report.counts = generation_report(len(samples), accepted, rejected)
    return EXIT_TRANSPORT if _transport_failures(rejected, "gen.reject_reason") else EXIT_OK


def cmd_judge(run: Run) -> int:
    out, rej = _stage_io(run)
    samples = run.read(run.args.input)
    accepted, rejected = judge_samples(samples, run.cfg, judges=run.judges())
    write_jsonl(out, accepted)
    write_jsonl(rej, rejected)
    run.report.counts = {"inputs": len(samples), "accepted": len(accepted), "rejected": len(rejected)}
    return EXIT_TRANSPORT if _transport_failures(rejected, "judge.reject_reason") else EXIT_OK


def cmd_translate(run: Run) -> int:
    a = run.args
    out, rej = _stage_io(run)
    threshold = a.threshold if a.threshold is not None else run.cfg.ccts.accept_threshold
    samples = run.read(a.input)
    records, rejected = translate_with_gate(
        samples, a.target, run.cfg, run.cfg.embedding.build(), translator=run.generator(), threshold=threshold
    )
    write_jsonl(out, [r.output for r in records])
    write_jsonl(rej, rejected)
    run.report.counts = translation_report(records, rejected, run.cfg)
    run.report.details = {"target": LanguageTag.parse(a.target).value, "threshold": threshold}
    return EXIT_TRANSPORT if _transport_failures(rejected, "translate.reject_reason") else EXIT_OK


def cmd_dedup(run: Run) -> int:
    out, rej = _stage_io(run)
    samples = [s for path in run.args.input for s in run.read(path)]
    unique, report = dedup(samples, threshold=run.args.threshold)
    unique_ids = {s.id for s in unique}
    kept_by = {removed: (kept, kind) for removed, kept, kind in report.removed}
    dropped = [
        s.annotate({"dedup.kind": kept_by[s.id][1], "dedup.kept_id": kept_by[s.id][0]})
        for s in samples
        if s.id not in unique_ids and s.id in kept_by
    ]
    write_jsonl(out, unique)
    write_jsonl(rej, dropped)
    run.report.counts = {"inputs": len(samples), "unique": len(unique), **report.counts()}
    return EXIT_OK


def cmd_leak_check(run: Run) -> int:
    a = run.args
    ift = run.read(a.ift)
    train = run.read(a.mc_train) if a.mc_train else []
    test = run.read(a.mc_test) if a.mc_test else []
    seed = a.seed if a.seed is not None else run.cfg.seed
    report = check_leakage(ift, train, test, a.probes, seed)
    data = report.to_dict()
    if a.out:
        write_json(a.out, data)
        run.report_path = Path(a.out).with_name(Path(a.out).stem + ".run.report.json")
    else:
        print(json.dumps(data, ensure_ascii=False, indent=2))
    run.report.counts = {
        "probes": sum(len(v) for v in report.probes.values()),
        "collisions": len(report.collisions),
        "passed": report.passed,
    }
    return EXIT_OK if report.passed else EXIT_DATA


def cmd_assemble(run: Run) -> int:
    a = run.args
    spec = load_assembly_spec(a.spec)
    out_dir = Path(a.out)
    run.report_path = out_dir / "assemble.report.json"
    for item in spec.inputs:
        if not item.path.is_file():
            raise ConfigError(f"input file not found: {item.path}")
        run.report.add_input(item.path)
    manifests = assemble(
        spec.inputs,
        run.cfg,
        out_dir,
        probes_per_language=a.probes if a.probes is not None else spec.probes_per_language,
        leakage_seed=a.seed if a.seed is not None else spec.leakage_seed,
    )
    run.report.counts = {name.value: m.total for name, m in manifests.items()}
    for m in manifests.values():
        print(format_manifest_table(m))
    leak = next((m.leakage_report for m in manifests.values() if m.leakage_report), None)
    return EXIT_DATA if leak is not None and not leak["passed"] else EXIT_OK


def cmd_emit_train_config(run: Run) -> int:
    a = run.args
    manifests = []
    for path in a.manifest or ():
        run.report.add_input(path)
        manifests.append(load_manifest(path))
    out_dir = Path(a.out)
    stage1, stage2 = emit_training_configs(manifests, out_dir)
    run.report_path = out_dir / "emit-train-config.report.json"
    run.report.counts = {"configs": 2}
    run.report.details = {"stages": [stage1.stage.value, stage2.stage.value]}
    return EXIT_OK


def cmd_report(run: Run) -> int:
    for path in run.args.manifest:
        run.report.add_input(path)
        print(format_manifest_table(load_manifest(path)))
        print()
    if run.args.out:
        run.report_path = Path(run.args.out)
    run.report.counts = {"manifests": len(run.args.manifest)}
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="shared JSON config file")
    common.add_argument("--jobs", type=int, help="worker threads (overrides concurrency_limit)")
    common.add_argument("--log-format", choices=("text", "json"), default="text")
    common.add_argument("-v", "--verbose", action="count", default=0)

    llm = _Parser(add_help=False)
    llm.add_argument("--replay", help="answer LLM calls from a recorded JSONL file")
    llm.add_argument("--record", help="append every live LLM exchange to this JSONL file")
    llm.add_argument("--model", help="generator model (overrides provider.model_name)")

    parser = _Parser(prog="mifc", description="Multilingual medical instruction-tuning data pipeline.")
    parser.add_argument("--version", action="version", version=f"mifc {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name: str, fn: Callable[[Run], int], help: str, parents=(common,)) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, description=help, parents=list(parents))
        p.set_defaults(func=fn)
        return p

    p = add("filter", cmd_filter, "keep raw texts with enough medical keyword density")
    p.add_argument("--input", required=True)
    p.add_argument("--kept", help="kept samples (JSONL)")
    p.add_argument("--rejected", help="rejected samples (JSONL)")
    p.add_argument("--out", help="output prefix: <out>.jsonl, <out>.rejected.jsonl, <out>.report.json")
    p.add_argument("--keywords", help="keyword file, one per line")
    p.add_argument("--thres1", type=float)
    p.add_argument("--thres2", type=int)
    p.add_argument("--match-mode", choices=("word_boundary", "substring"))

    p = add("score", cmd_score, "score line-aligned text pairs (a = source, b = round trip)")
    p.add_argument("--metric", choices=("bleu", "embed", "ccts"), required=True)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--lang", help="language of the texts (picks the tokenizer)")
    p.add_argument("--mode", choices=("whitespace", "character"))
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--out", help="output prefix; scores go to stdout when omitted")

    for name, fn, text in (
        ("expand", cmd_expand, "rewrite keyword-style short answers as sentences"),
        ("genqa", cmd_genqa, "generate judged QA pairs from raw text"),
        ("judge", cmd_judge, "gate existing QA samples with the judge panel"),
    ):
        p = add(name, fn, text, parents=(common, llm))
        p.add_argument("--input", required=True)
        p.add_argument("--out", required=True, help="output prefix")

    p = add("translate", cmd_translate, "translate samples and keep round trips above the gate", parents=(common, llm))
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--target", required=True, help="target language tag")
    p.add_argument("--threshold", type=float, help="CCTS gate (default from config, 0.8)")

    p = add("dedup", cmd_dedup, "drop exact and near-duplicate samples")
    p.add_argument("--input", required=True, action="append", help="repeatable")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--threshold", type=float, default=0.9, help="near-duplicate Jaccard threshold")

    p = add("leak-check", cmd_leak_check, "probe IFT samples against MC train/test splits")
    p.add_argument("--ift", required=True)
    p.add_argument("--mc-train")
    p.add_argument("--mc-test")
    p.add_argument("--probes", type=int, default=100, help="probes per language")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="write the leakage report here instead of stdout")

    p = add("assemble", cmd_assemble, "dedup, shard and write dataset manifests")
    p.add_argument("--spec", required=True, help="assembly.json")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--probes", type=int)
    p.add_argument("--seed", type=int)

    p = add("emit-train-config", cmd_emit_train_config, "write the two training stage configs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--manifest", action="append", help="dataset manifest (repeatable)")

    p = add("report", cmd_report, "print per-language tables for manifests")
    p.add_argument("--manifest", required=True, action="append")
    p.add_argument("--out", help="run report path")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if isinstance(exc.code, int) else EXIT_CONFIG
    setup_logging(args.log_format, args.verbose)
    run: Run | None = None
    code = EXIT_OK
    try:
        run = Run(args)
        code = args.func(run)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mifc {args.command}: error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        code = EXIT_CONFIG
    except TransportError as exc:
        logger.error("transport error: %s", exc)
        code = EXIT_TRANSPORT
    except (ValidationError, FormatError, ParseError) as exc:
        logger.error("data error: %s", exc)
        code = EXIT_DATA
    except MifcError as exc:
        logger.error("%s", exc)
        code = EXIT_DATA
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        code = EXIT_CONFIG
    if run is not None:
        # Failed runs still leave a report behind, with the exit code.
        run.report.details.setdefault("exit_code", code)
        try:
            run.finish()
        except OSError as exc:
            logger.error("cannot write run report: %s", exc)
            code = code or EXIT_CONFIG
    return code

if __name__ == "__main__":
    sys.exit(main())
