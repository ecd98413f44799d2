"""Prompt-pair construction: quality split, pair synthesis, filters, statistics."""

from __future__ import annotations

import json
import math
import random
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from ..errors import UndefinedSimilarityError
from ..oracles import OracleConfig, aes_base
from .text import DEFAULT_BLOCKLIST, ModifierLexicon, contains_phrase, words

SOURCES = ("caption", "summary", "generation")


@dataclass(frozen=True)
class RawPrompt:
    text: str
    origin: str | None = None


@dataclass(frozen=True)
class PromptPair:
    low: str
    high: str
    source: str
    aes_score: float | None = None
    consistency: float | None = None

    def __post_init__(self):
        if not self.low.strip() or not self.high.strip():
            raise ValueError("both sides of a prompt pair must be non-empty")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")

    def to_json(self) -> dict:
        return {"low": self.low, "high": self.high, "source": self.source, "aes": self.aes_score, "pc": self.consistency}

    @classmethod
    def from_json(cls, d: dict) -> "PromptPair":
        return cls(d["low"], d["high"], d["source"], d.get("aes"), d.get("pc"))


@dataclass
class DataConfig:
    min_high_tokens: int = 25
    min_high_modifiers: int = 2
    caption_fallback_tokens: int = 12
    summary_max_tokens: int = 15
    gen_min_modifiers: int = 4
    gen_max_modifiers: int = 8
    ascii_ratio: float = 0.9
    aes_threshold: float = 5.5
    consistency_threshold: float = 0.5
    test_size: int = 200
    seed: int = 0


# ---------------------------------------------------------------------------
# Quality split and synthesis
# ---------------------------------------------------------------------------


def classify_quality(p: RawPrompt | str, lexicon: ModifierLexicon, cfg: DataConfig | None = None) -> str:
    cfg = cfg or DataConfig()
    text = p.text if isinstance(p, RawPrompt) else p
    if len(words(text)) >= cfg.min_high_tokens and lexicon.count(text) >= cfg.min_high_modifiers:
        return "high"
    return "low"


def _segments(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def synth_caption_pair(high: str, lexicon: ModifierLexicon, cfg: DataConfig | None = None) -> PromptPair | None:
    """Short caption-like low prompt: the clauses before the first modifier clause.

    Without commas, the first ``caption_fallback_tokens`` words stand in.
    Returns ``None`` when nothing but modifiers remains.
    """
    cfg = cfg or DataConfig()
    if not high.strip():
        return None
    if "," in high:
        head = []
        for seg in _segments(high):
            if lexicon.is_modifier(seg):
                break
            head.append(seg)
        low = lexicon.strip(", ".join(head))
    else:
        low = " ".join(lexicon.content_words(high)[: cfg.caption_fallback_tokens])
    if not low:
        return None
    return PromptPair(low, high, "caption")


def synth_summary_pair(high: str, lexicon: ModifierLexicon, cfg: DataConfig | None = None) -> PromptPair | None:
    """Subject phrase: first clause, modifiers removed, at most ``summary_max_tokens`` words."""
    cfg = cfg or DataConfig()
    segs = _segments(high)
    if not segs:
        return None
    subject = next((s for s in segs if lexicon.content_words(s)), None)
    if subject is None:
        return None
    low = " ".join(lexicon.content_words(subject)[: cfg.summary_max_tokens])
    return PromptPair(low, high, "summary")


def synth_generation_pair(low: str, lexicon: ModifierLexicon, seed: int, cfg: DataConfig | None = None) -> PromptPair:
    """Enriched high prompt: ``low`` verbatim plus 4-8 distinct modifiers it lacks."""
    cfg = cfg or DataConfig()
    rng = random.Random(f"{seed}\x1f{low}")
    present = lexicon.hits(low)
    pool = [p for p in lexicon.phrases if p not in present]
    k = min(rng.randint(cfg.gen_min_modifiers, cfg.gen_max_modifiers), len(pool))
    mods = rng.sample(pool, k)
    return PromptPair(low, ", ".join([low, *mods]), "generation")


# ---------------------------------------------------------------------------
# Filters
# ---------------------------------------------------------------------------


@dataclass
class FilterReport:
    name: str
    kept: int = 0
    removed: int = 0
    reasons: Counter = field(default_factory=Counter)


def ascii_fraction(text: str) -> float:
    data = text.encode("utf-8")
    if not data:
        return 1.0
    return sum(1 for b in data if 0x20 <= b <= 0x7E) / len(data)


def filter_blocklist(pairs: Sequence[PromptPair], blocklist: Iterable[str] = DEFAULT_BLOCKLIST,
                     ascii_ratio: float = 0.9) -> tuple[list[PromptPair], FilterReport]:
    blocklist = tuple(blocklist)
    report = FilterReport("blocklist")
    kept = []
    for p in pairs:
        reason = None
        for side in (p.low, p.high):
            if any(contains_phrase(side, term) for term in blocklist):
                reason = "blocklist"
                break
            if ascii_fraction(side) < ascii_ratio:
                reason = "non-english"
                break
        if reason:
            report.removed += 1
            report.reasons[reason] += 1
        else:
            kept.append(p)
            report.kept += 1
    return kept, report


def filter_aesthetic(pairs: Sequence[PromptPair], oracle_cfg: OracleConfig | None = None,
                     threshold: float = 5.5) -> list[PromptPair]:
    """Keep pairs whose high prompt scores at least ``threshold`` (noise-free); annotate the score."""
    oracle_cfg = oracle_cfg or OracleConfig()
    out = []
    for p in pairs:
        score = aes_base(p.high, oracle_cfg)
        if score >= threshold:
            out.append(replace(p, aes_score=score))
    return out


def embed_tf(text: str) -> Counter:
    return Counter(words(text))


def cos_sim(rx: Counter | dict, ry: Counter | dict) -> float:
    nx = math.sqrt(sum(v * v for v in rx.values()))
    ny = math.sqrt(sum(v * v for v in ry.values()))
    if nx == 0 or ny == 0:
        raise UndefinedSimilarityError("cosine similarity with a zero vector is undefined")
    if len(ry) < len(rx):
        rx, ry = ry, rx
    dot = sum(v * ry.get(k, 0) for k, v in rx.items())
    return min(1.0, dot / (nx * ny))


def consistency(low: str, high: str) -> float | None:
    try:
        return cos_sim(embed_tf(low), embed_tf(high))
    except UndefinedSimilarityError:
        return None


def filter_consistency(pairs: Sequence[PromptPair], threshold: float = 0.5) -> list[PromptPair]:
    """Keep pairs with a defined, non-zero TF cosine of at least ``threshold``; annotate it."""
    out = []
    for p in pairs:
        c = consistency(p.low, p.high)
        if c is not None and c > 0 and c >= threshold:
            out.append(replace(p, consistency=c))
    return out


# ---------------------------------------------------------------------------
# Statistics and split
# ---------------------------------------------------------------------------


@dataclass
class SourceStats:
    count: int
    mean_aes: float | None
    mean_pc: float | None
    allp: float
    alhp: float


@dataclass
class DatasetStats:
    per_source: dict[str, SourceStats]
    total: SourceStats

    def to_json(self) -> dict:
        return {"total": asdict(self.total), "per_source": {k: asdict(v) for k, v in self.per_source.items()}}

    def format_table(self) -> str:
        def fmt(x):
            return "-" if x is None else f"{x:.2f}"

        rows = [("Source", "Num", "Aesthetic", "PC", "ALLP", "ALHP")]
        for name, s in [("all", self.total), *self.per_source.items()]:
            rows.append((name, str(s.count), fmt(s.mean_aes), fmt(s.mean_pc), fmt(s.allp), fmt(s.alhp)))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in rows)


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def _source_stats(pairs: Sequence[PromptPair]) -> SourceStats:
    return SourceStats(
        count=len(pairs),
        mean_aes=_mean([p.aes_score for p in pairs if p.aes_score is not None]),
        mean_pc=_mean([p.consistency for p in pairs if p.consistency is not None]),
        allp=_mean([len(words(p.low)) for p in pairs]) or 0.0,
        alhp=_mean([len(words(p.high)) for p in pairs]) or 0.0,
    )


def compute_stats(pairs: Sequence[PromptPair]) -> DatasetStats:
    if not pairs:
        raise ValueError("cannot compute statistics of an empty dataset")
    per = {s: _source_stats([p for p in pairs if p.source == s]) for s in SOURCES if any(p.source == s for p in pairs)}
    return DatasetStats(per, _source_stats(pairs))


def split_test(items: Sequence, n: int, seed: int = 0) -> tuple[list, list[str]]:
    """Draw ``n`` test lows at random; the rest stay for training.

    ``items`` holds either prompt pairs or raw low-prompt strings.  The test
    side is always plain low-prompt text.
    """
    if n < 0 or n > len(items):
        raise ValueError(f"test size {n} outside [0, {len(items)}]")
    rng = random.Random(seed)
    chosen = set(rng.sample(range(len(items)), n))
    train = [it for i, it in enumerate(items) if i not in chosen]
    test = [(it.low if isinstance(it, PromptPair) else it) for i, it in enumerate(items) if i in chosen]
    return train, test


# ---------------------------------------------------------------------------
# End-to-end build
# ---------------------------------------------------------------------------


@dataclass
class BuildResult:
    train: list[PromptPair]
    test: list[str]
    reports: list[FilterReport]

    @property
    def all_pairs(self) -> list[PromptPair]:
        return self.train


def synthesize_pairs(raw: Sequence[RawPrompt], lexicon: ModifierLexicon, cfg: DataConfig) -> list[PromptPair]:
    pairs: list[PromptPair] = []
    for r in raw:
        if classify_quality(r, lexicon, cfg) == "high":
            for p in (synth_summary_pair(r.text, lexicon, cfg), synth_caption_pair(r.text, lexicon, cfg)):
                if p is not None and (not pairs or (p.low, p.high) != (pairs[-1].low, pairs[-1].high)):
                    pairs.append(p)
        elif r.text.strip():
            pairs.append(synth_generation_pair(r.text.strip(), lexicon, cfg.seed, cfg))
    return pairs


def build_dataset(raw: Sequence[RawPrompt], lexicon: ModifierLexicon | None = None, cfg: DataConfig | None = None,
                  oracle_cfg: OracleConfig | None = None, blocklist: Iterable[str] = DEFAULT_BLOCKLIST) -> BuildResult:
    """Raw prompts -> filtered, de-duplicated pairs -> (train pairs, test lows)."""
    lexicon = lexicon or ModifierLexicon.default()
    cfg = cfg or DataConfig()
    oracle_cfg = oracle_cfg or OracleConfig(lexicon=lexicon)
    seen: set[str] = set()
    unique = []
    for r in raw:
        if r.text.strip() and r.text not in seen:
            seen.add(r.text)
            unique.append(r)
    pairs = synthesize_pairs(unique, lexicon, cfg)
    reports = []
    pairs, rep = filter_blocklist(pairs, blocklist, cfg.ascii_ratio)
    reports.append(rep)
    n = len(pairs)
    pairs = filter_aesthetic(pairs, oracle_cfg, cfg.aes_threshold)
    reports.append(FilterReport("aesthetic", len(pairs), n - len(pairs)))
    n = len(pairs)
    pairs = filter_consistency(pairs, cfg.consistency_threshold)
    reports.append(FilterReport("consistency", len(pairs), n - len(pairs)))
    lows: set[str] = set()
    deduped = []
    for p in pairs:
        if p.low not in lows:
            lows.add(p.low)
            deduped.append(p)
    reports.append(FilterReport("dedupe-low", len(deduped), len(pairs) - len(deduped)))
    train, test = split_test(deduped, min(cfg.test_size, len(deduped)), cfg.seed)
    return BuildResult(train, test, reports)


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")


def load_raw(path: str | Path) -> list[RawPrompt]:
    return [RawPrompt(r["text"], r.get("id")) for r in read_jsonl(path)]


def load_pairs(path: str | Path) -> list[PromptPair]:
    return [PromptPair.from_json(r) for r in read_jsonl(path)]


def save_pairs(path: str | Path, pairs: Iterable[PromptPair]) -> None:
    write_jsonl(path, (p.to_json() for p in pairs))
