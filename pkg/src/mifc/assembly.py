"""Dataset assembly: dedup, leakage probing, sharding, manifests, training configs.

Near-duplicates are pairs whose normalized texts have character 5-gram
Jaccard similarity >= 0.9. Candidate pairs come from a prefix-filtered
inverted index, which is exact for a Jaccard threshold: every pair at or
above the threshold shares a token in their prefixes, so nothing is missed
and each candidate is verified with the exact ratio.
"""

from __future__ import annotations

import contextlib
import datetime as _dt
import enum
import json
import logging
import math
import os
import random
import unicodedata
from collections import Counter
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

from .config import PipelineConfig
from .core import DataSample, LanguageTag, SampleKind, iter_jsonl, sha256_file, write_json, write_jsonl
from .errors import ConfigError, ValidationError

logger = logging.getLogger(__name__)

NEAR_DUP_THRESHOLD = 0.9
SHINGLE_SIZE = 5
DEFAULT_PROBES = 100


class DatasetName(str, enum.Enum):
    MMED_IFT = "mmed_ift"
    MMED_IFT_MC = "mmed_ift_mc"


# ---------------------------------------------------------------- text keys


def normalize_text(text: str) -> str:
    """NFKC, lower-case, collapse whitespace. Lower-casing is a no-op for CJK."""
    return " ".join(unicodedata.normalize("NFKC", text).lower().split())


def dedup_key(sample: DataSample) -> str:
    if sample.kind is SampleKind.RAW_TEXT:
        return normalize_text(sample.raw_text or "")
    parts = [sample.question or ""]
    if sample.kind is SampleKind.MULTIPLE_CHOICE_QA:
        # An MC answer is only a label; the options carry the content.
        parts += [f"{label}. {text}" for label, text in sample.options or ()]
    parts.append(sample.answer or "")
    return normalize_text(" ".join(parts))


def leakage_key(sample: DataSample) -> str:
    """Question stem for QA samples (a leaked stem is a leak whatever the options), else the raw text."""
    if sample.kind is SampleKind.RAW_TEXT:
        return normalize_text(sample.raw_text or "")
    return normalize_text(sample.question or "")


def shingles(text: str, size: int = SHINGLE_SIZE) -> frozenset[str]:
    if len(text) <= size:
        return frozenset([text]) if text else frozenset()
    return frozenset(text[i : i + size] for i in range(len(text) - size + 1))


def jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


class NearDupIndex:
    """Exact all-pairs Jaccard search with prefix filtering.

    ``universe`` fixes the global token order (rarest first); every set
    inserted or queried later must draw its tokens from it.
    """

    def __init__(self, universe: Iterable[frozenset[str]], threshold: float = NEAR_DUP_THRESHOLD):
        self.threshold = Fraction(str(threshold))
        if not 0 < self.threshold <= 1:
            raise ValidationError("threshold must lie in (0, 1]", "threshold")
        freq: Counter[str] = Counter()
        for s in universe:
            freq.update(s)
        self._rank = {tok: i for i, tok in enumerate(sorted(freq, key=lambda t: (freq[t], t)))}
        self._postings: dict[str, list[int]] = {}
        self._sets: list[frozenset[str]] = []
        self._ids: list[str] = []

    def _prefix(self, s: frozenset[str]) -> list[str]:
        ordered = sorted(s, key=self._rank.__getitem__)
        t = self.threshold
        overlap = math.ceil(t * len(ordered))  # exact: Fraction * int
        return ordered[: len(ordered) - overlap + 1]

    def _similar(self, a: frozenset[str], b: frozenset[str]) -> bool:
        inter = len(a & b)
        union = len(a) + len(b) - inter
        return inter * self.threshold.denominator >= self.threshold.numerator * union

    def add(self, ident: str, s: frozenset[str]) -> None:
        slot = len(self._sets)
        self._sets.append(s)
        self._ids.append(ident)
        for tok in self._prefix(s):
            self._postings.setdefault(tok, []).append(slot)

    def query(self, s: frozenset[str]) -> list[str]:
        """Ids of indexed sets with Jaccard >= threshold, in insertion order."""
        if not s:
            return []
        seen: set[int] = set()
        hits = []
        for tok in self._prefix(s):
            for slot in self._postings.get(tok, ()):
                if slot in seen:
                    continue
                seen.add(slot)
                if self._similar(s, self._sets[slot]):
                    hits.append(slot)
        return [self._ids[i] for i in sorted(hits)]


# ---------------------------------------------------------------- dedup


@dataclass(frozen=True)
class DedupReport:
    exact_dups_removed: int
    near_dups_removed: int
    removed: tuple[tuple[str, str, str], ...] = ()  # (removed id, kept id, "exact" | "near")

    def counts(self) -> dict[str, int]:
        return {"exact_dups_removed": self.exact_dups_removed, "near_dups_removed": self.near_dups_removed}


def dedup(
    samples: Sequence[DataSample],
    *,
    threshold: float = NEAR_DUP_THRESHOLD,
    shingle_size: int = SHINGLE_SIZE,
) -> tuple[list[DataSample], DedupReport]:
    """Drop exact and near duplicates; the first occurrence wins and order is kept.

    A sample is compared against the samples kept so far only.
    """
    samples = list(samples)
    keys = [dedup_key(s) for s in samples]
    sets = [shingles(k, shingle_size) for k in keys]
    index = NearDupIndex(sets, threshold)
    exact_seen: dict[str, str] = {}
    unique: list[DataSample] = []
    removed: list[tuple[str, str, str]] = []
    exact = near = 0
    for sample, key, sh in zip(samples, keys, sets):
        if key in exact_seen:
            exact += 1
            removed.append((sample.id, exact_seen[key], "exact"))
            continue
        hits = index.query(sh)
        if hits:
            near += 1
            removed.append((sample.id, hits[0], "near"))
            continue
        exact_seen[key] = sample.id
        index.add(sample.id, sh)
        unique.append(sample)
    return unique, DedupReport(exact, near, tuple(removed))


# ---------------------------------------------------------------- leakage


@dataclass(frozen=True)
class Collision:
    probe_id: str
    colliding_set: str
    colliding_id: str
    match: str  # "exact" | "near"


@dataclass(frozen=True)
class LeakageReport:
    probes_per_language: int
    seed: int
    probes: Mapping[str, tuple[str, ...]]
    shortfall: Mapping[str, int]
    collisions: tuple[Collision, ...]

    @property
    def passed(self) -> bool:
        return not self.collisions

    def to_dict(self) -> dict[str, Any]:
        return {
            "probes_per_language": self.probes_per_language,
            "seed": self.seed,
            "passed": self.passed,
            "probes": {lang: list(ids) for lang, ids in self.probes.items()},
            "shortfall": dict(self.shortfall),
            "collisions": [asdict(c) for c in self.collisions],
        }


def check_leakage(
    ift: Sequence[DataSample],
    mc_train: Sequence[DataSample],
    mc_test: Sequence[DataSample],
    probes_per_language: int = DEFAULT_PROBES,
    seed: int = 0,
    *,
    threshold: float = NEAR_DUP_THRESHOLD,
) -> LeakageReport:
    """Probe a seeded sample of IFT items per language against both MC splits."""
    if probes_per_language < 1:
        raise ValidationError("must be >= 1", "probes_per_language")
    rng = random.Random(seed)
    probes: dict[str, tuple[str, ...]] = {}
    shortfall: dict[str, int] = {}
    chosen: list[DataSample] = []
    for lang in LanguageTag:
        pool = [s for s in ift if s.lang is lang]
        if not pool:
            continue
        if len(pool) <= probes_per_language:
            picked = pool
            if len(pool) < probes_per_language:
                shortfall[lang.value] = probes_per_language - len(pool)
                logger.warning("leakage: only %d %s samples for %d probes", len(pool), lang.value, probes_per_language)
        else:
            picked = rng.sample(pool, probes_per_language)
        probes[lang.value] = tuple(s.id for s in picked)
        chosen.extend(picked)

    probe_keys = [(p, leakage_key(p)) for p in chosen]
    collisions: list[Collision] = []
    for set_name, ref in (("mc_train", mc_train), ("mc_test", mc_test)):
        ref_keys = [(r.id, leakage_key(r)) for r in ref]
        exact: dict[str, list[str]] = {}
        for rid, key in ref_keys:
            exact.setdefault(key, []).append(rid)
        ref_sets = [(rid, shingles(key)) for rid, key in ref_keys]
        probe_sets = [(p, shingles(key)) for p, key in probe_keys]
        index = NearDupIndex([s for _, s in ref_sets] + [s for _, s in probe_sets], threshold)
        for rid, s in ref_sets:
            index.add(rid, s)
        for (probe, key), (_, sh) in zip(probe_keys, probe_sets):
            exact_ids = exact.get(key, [])
            for rid in exact_ids:
                collisions.append(Collision(probe.id, set_name, rid, "exact"))
            for rid in index.query(sh):
                if rid not in exact_ids:
                    collisions.append(Collision(probe.id, set_name, rid, "near"))
    return LeakageReport(probes_per_language, seed, probes, shortfall, tuple(collisions))


# ---------------------------------------------------------------- assembly


@dataclass(frozen=True)
class AssemblyInput:
    path: Path
    lang: LanguageTag
    dataset: DatasetName
    split: str = "train"
    label: str | None = None  # path as written in the assembly spec

    def __post_init__(self) -> None:
        object.__setattr__(self, "path", Path(self.path))
        object.__setattr__(self, "lang", LanguageTag.parse(self.lang))
        try:
            object.__setattr__(self, "dataset", DatasetName(self.dataset))
        except ValueError:
            raise ConfigError(f"unknown dataset {self.dataset!r}") from None
        if self.split not in ("train", "test"):
            raise ConfigError(f"unknown split {self.split!r} (train or test)")


@dataclass(frozen=True)
class AssemblySpec:
    inputs: tuple[AssemblyInput, ...]
    probes_per_language: int = DEFAULT_PROBES
    leakage_seed: int | None = None


def load_assembly_spec(path: str | Path) -> AssemblySpec:
    """Read ``assembly.json``; input paths are relative to the spec file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read assembly spec {path}: {exc}") from exc
    if not isinstance(data, dict) or not isinstance(data.get("inputs", []), list):
        raise ConfigError("assembly spec must be an object with an 'inputs' list")
    inputs = []
    for i, entry in enumerate(data.get("inputs", [])):
        try:
            inputs.append(
                AssemblyInput(
                    path=path.parent / entry["path"],
                    lang=entry["lang"],
                    dataset=entry["dataset"],
                    split=entry.get("split", "train"),
                    label=entry["path"],
                )
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"assembly input {i} is missing {exc}") from None
        except ValidationError as exc:
            raise ConfigError(f"assembly input {i}: {exc}") from None
    return AssemblySpec(
        tuple(inputs),
        int(data.get("probes_per_language", DEFAULT_PROBES)),
        data.get("leakage_seed"),
    )


@dataclass(frozen=True)
class ShardFile:
    path: str
    split: str
    lang: str
    samples: int
    sha256: str


@dataclass(frozen=True)
class DatasetManifest:
    name: DatasetName
    per_language_counts: Mapping[str, int]
    per_split_counts: Mapping[str, int]
    files: tuple[ShardFile, ...]
    dedup_report: Mapping[str, int]
    leakage_report: Mapping[str, Any] | None
    inputs: tuple[Mapping[str, Any], ...]
    created_at: str
    config_digest: str

    def __post_init__(self) -> None:
        if sum(self.per_language_counts.values()) != sum(f.samples for f in self.files):
            raise ValidationError("per-language counts disagree with shard counts", "per_language_counts")

    @property
    def total(self) -> int:
        return sum(self.per_language_counts.values())

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name.value,
            "total": self.total,
            "per_language_counts": dict(self.per_language_counts),
            "per_split_counts": dict(self.per_split_counts),
            "files": [asdict(f) for f in self.files],
            "dedup_report": dict(self.dedup_report),
            "leakage_report": self.leakage_report,
            "inputs": [dict(i) for i in self.inputs],
            "created_at": self.created_at,
            "config_digest": self.config_digest,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DatasetManifest":
        try:
            return cls(
                name=DatasetName(data["name"]),
                per_language_counts=dict(data["per_language_counts"]),
                per_split_counts=dict(data.get("per_split_counts", {})),
                files=tuple(ShardFile(**f) for f in data["files"]),
                dedup_report=dict(data["dedup_report"]),
                leakage_report=data.get("leakage_report"),
                inputs=tuple(data.get("inputs", ())),
                created_at=data["created_at"],
                config_digest=data["config_digest"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"not a dataset manifest: {exc}", "manifest") from None


def load_manifest(path: str | Path) -> DatasetManifest:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    return DatasetManifest.from_dict(data)


def timestamp_now() -> str:
    """UTC timestamp; ``SOURCE_DATE_EPOCH`` pins it for reproducible output."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        moment = _dt.datetime.fromtimestamp(int(epoch), tz=_dt.timezone.utc)
    else:
        moment = _dt.datetime.now(tz=_dt.timezone.utc).replace(microsecond=0)
    return moment.strftime("%Y-%m-%dT%H:%M:%SZ")


@contextlib.contextmanager
def _assembly_lock(out_dir: Path) -> Iterator[None]:
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".mifc-assemble.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"{out_dir} is locked by another assembly ({lock}); remove the file if that run died") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(lock)


def _load_input(item: AssemblyInput) -> list[DataSample]:
    samples = []
    for sample in iter_jsonl(item.path):
        if sample.lang is not item.lang:
            raise ValidationError(f"{item.path}: sample {sample.id} is {sample.lang.value}, input declared {item.lang.value}", "lang")
        if item.dataset is DatasetName.MMED_IFT_MC and sample.kind is not SampleKind.MULTIPLE_CHOICE_QA:
            raise ValidationError(f"{item.path}: sample {sample.id} is {sample.kind.value}; {item.dataset.value} holds multiple-choice items only", "kind")
        samples.append(sample)
    return samples


def assemble(
    inputs: Sequence[AssemblyInput],
    cfg: PipelineConfig,
    out_dir: str | Path,
    *,
    probes_per_language: int = DEFAULT_PROBES,
    leakage_seed: int | None = None,
    created_at: str | None = None,
) -> dict[DatasetName, DatasetManifest]:
    """Validate, dedup and shard the inputs; write one manifest per dataset.

    Shards go to ``<out>/<dataset>/<split>/<LANG>.jsonl`` and manifests to
    ``<out>/<dataset>.manifest.json``. The leakage check runs when both
    datasets have samples.
    """
    out_dir = Path(out_dir)
    created_at = created_at or timestamp_now()
    seed = cfg.seed if leakage_seed is None else leakage_seed
    with _assembly_lock(out_dir):
        loaded: dict[tuple[DatasetName, str], list[DataSample]] = {}
        input_meta: dict[DatasetName, list[dict[str, Any]]] = {d: [] for d in DatasetName}
        for item in inputs:
            samples = _load_input(item)
            loaded.setdefault((item.dataset, item.split), []).extend(samples)
            input_meta[item.dataset].append(
                {
                    "path": item.label or item.path.name,
                    "lang": item.lang.value,
                    "split": item.split,
                    "samples": len(samples),
                    "sha256": sha256_file(item.path),
                }
            )

        deduped: dict[tuple[DatasetName, str], list[DataSample]] = {}
        dedup_totals = {d: Counter() for d in DatasetName}
        for key in sorted(loaded, key=lambda k: (k[0].value, k[1])):
            unique, report = dedup(loaded[key])
            deduped[key] = unique
            dedup_totals[key[0]].update(report.counts())
            logger.info("dedup %s/%s: %s", key[0].value, key[1], report.counts())

        leakage = None
        ift = [s for (d, _), v in deduped.items() if d is DatasetName.MMED_IFT for s in v]
        mc_train = deduped.get((DatasetName.MMED_IFT_MC, "train"), [])
        mc_test = deduped.get((DatasetName.MMED_IFT_MC, "test"), [])
        if ift and (mc_train or mc_test):
            leakage = check_leakage(ift, mc_train, mc_test, probes_per_language, seed).to_dict()
            if not leakage["passed"]:
                logger.warning("leakage check found %d collisions", len(leakage["collisions"]))

        manifests: dict[DatasetName, DatasetManifest] = {}
        for dataset in DatasetName:
            files: list[ShardFile] = []
            per_lang: Counter[str] = Counter()
            per_split: Counter[str] = Counter()
            for split in ("train", "test"):
                samples = deduped.get((dataset, split), [])
                for lang in LanguageTag:
                    shard = [s for s in samples if s.lang is lang]
                    if not shard:
                        continue
                    ids = [s.id for s in shard]
                    if len(set(ids)) != len(ids):
                        dup = next(i for i, c in Counter(ids).items() if c > 1)
                        raise ValidationError(f"id {dup!r} occurs twice in {dataset.value}/{split}/{lang.value}", "id")
                    rel = f"{dataset.value}/{split}/{lang.value}.jsonl"
                    write_jsonl(out_dir / rel, shard)
                    files.append(ShardFile(rel, split, lang.value, len(shard), sha256_file(out_dir / rel)))
                    per_lang[lang.value] += len(shard)
                    per_split[split] += len(shard)
            manifest = DatasetManifest(
                name=dataset,
                per_language_counts={lang.value: per_lang[lang.value] for lang in LanguageTag if per_lang[lang.value]},
                per_split_counts={s: per_split[s] for s in ("train", "test") if per_split[s]},
                files=tuple(files),
                dedup_report={
                    "exact_dups_removed": dedup_totals[dataset]["exact_dups_removed"],
                    "near_dups_removed": dedup_totals[dataset]["near_dups_removed"],
                },
                leakage_report=leakage,
                inputs=tuple(input_meta[dataset]),
                created_at=created_at,
                config_digest=cfg.digest(),
            )
            write_json(out_dir / f"{dataset.value}.manifest.json", manifest.to_dict())
            manifests[dataset] = manifest
    return manifests


def format_manifest_table(manifest: DatasetManifest) -> str:
    lines = [f"{manifest.name.value}  (total {manifest.total}, created {manifest.created_at})"]
    lines.append(f"{'lang':<6}{'train':>10}{'test':>10}{'total':>10}")
    by: dict[tuple[str, str], int] = {(f.lang, f.split): f.samples for f in manifest.files}
    for lang in LanguageTag:
        total = manifest.per_language_counts.get(lang.value, 0)
        if not total:
            continue
        lines.append(f"{lang.value:<6}{by.get((lang.value, 'train'), 0):>10}{by.get((lang.value, 'test'), 0):>10}{total:>10}")
    d = manifest.dedup_report
    lines.append(f"dedup: {d.get('exact_dups_removed', 0)} exact, {d.get('near_dups_removed', 0)} near removed")
    if manifest.leakage_report is not None:
        lr = manifest.leakage_report
        status = "pass" if lr.get("passed") else f"FAIL ({len(lr.get('collisions', []))} collisions)"
        lines.append(f"leakage: {status}")
    return "\n".join(lines)


# ---------------------------------------------------------------- training configs


class Stage(str, enum.Enum):
    STAGE1_KNOWLEDGE = "stage1_knowledge"
    STAGE2_MC = "stage2_mc"


class Adapter(str, enum.Enum):
    DORA_QUANTIZED = "dora_quantized"
    QLORA = "qlora"


@dataclass(frozen=True)
class TrainingStageConfig:
    stage: Stage
    adapter: Adapter
    rank: int
    alpha: int
    dropout: float
    epochs: int
    batch_size: int
    learning_rate: float
    lr_schedule: str
    warmup_ratio: float
    grad_accum_steps: int
    dataset: str
    merge_adapter_after: bool

    def __post_init__(self) -> None:
        if self.stage is Stage.STAGE1_KNOWLEDGE and not self.merge_adapter_after:
            raise ValidationError("stage 1 adapters are merged into the base model", "merge_adapter_after")
        if self.lr_schedule != "cosine_to_zero":
            raise ValidationError(f"unsupported schedule {self.lr_schedule!r}", "lr_schedule")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["stage"] = self.stage.value
        d["adapter"] = self.adapter.value
        return d


STAGE1 = TrainingStageConfig(
    stage=Stage.STAGE1_KNOWLEDGE,
    adapter=Adapter.DORA_QUANTIZED,
    rank=32,
    alpha=16,
    dropout=0.05,
    epochs=2,
    batch_size=1,
    learning_rate=5e-5,
    lr_schedule="cosine_to_zero",
    warmup_ratio=0.2,
    grad_accum_steps=4,
    dataset=DatasetName.MMED_IFT.value,
    merge_adapter_after=True,
)

# Same as stage 1 apart from adapter type, rank, alpha and learning rate.
STAGE2 = TrainingStageConfig(
    **{
        **asdict(STAGE1),
        "stage": Stage.STAGE2_MC,
        "adapter": Adapter.QLORA,
        "rank": 16,
        "alpha": 8,
        "learning_rate": 2e-5,
        "dataset": DatasetName.MMED_IFT_MC.value,
        "merge_adapter_after": False,
    }
)


def emit_training_configs(
    manifests: Sequence[DatasetManifest] = (),
    out_dir: str | Path | None = None,
) -> tuple[TrainingStageConfig, TrainingStageConfig]:
    """Stage configs for the two-stage run; written as JSON when ``out_dir`` is given."""
    names = {m.name for m in manifests}
    if manifests and names != set(DatasetName):
        raise ValidationError(f"need one manifest per dataset, got {sorted(n.value for n in names)}", "manifests")
    for m in manifests:
        if m.total == 0:
            logger.warning("manifest %s is empty", m.name.value)
    if out_dir is not None:
        out = Path(out_dir)
        for cfg in (STAGE1, STAGE2):
            write_json(out / f"{cfg.stage.value}.json", cfg.to_dict())
    return STAGE1, STAGE2
