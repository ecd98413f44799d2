"""Word tokenization, modifier lexicon, and phrase matching shared by data and oracles."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

_WORD = re.compile(r"[a-z0-9]+(?:'[a-z]+)?")

DEFAULT_MODIFIERS = (
    "highly detailed",
    "artstation",
    "concept art",
    "sharp focus",
    "digital painting",
    "octane render",
    "unreal engine",
    "8k",
    "4k",
    "hdr",
    "cinematic lighting",
    "volumetric lighting",
    "dramatic lighting",
    "intricate",
    "elegant",
    "smooth",
    "illustration",
    "masterpiece",
    "photorealistic",
    "hyperrealistic",
    "ultra detailed",
    "matte painting",
    "trending",
    "by greg rutkowski",
    "by alphonse mucha",
    "golden hour",
    "soft light",
    "bokeh",
    "ray tracing",
    "studio quality",
    "vivid colors",
    "award winning",
    "fantasy",
    "epic",
    "beautiful",
    "ornate",
)

DEFAULT_BLOCKLIST = ("nsfw", "nude", "gore", "blood", "naked")


def words(text: str) -> list[str]:
    """Lower-cased word tokens."""
    return _WORD.findall(text.lower())


@dataclass(frozen=True)
class ModifierLexicon:
    """Ordered, unique, lower-cased modifier phrases with weights."""

    phrases: tuple[str, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.phrases) != len(self.weights):
            raise ValueError("phrases and weights differ in length")
        seen = set()
        for p in self.phrases:
            if p != p.lower() or not p.strip():
                raise ValueError(f"lexicon entries must be non-empty and lower-case: {p!r}")
            if p in seen:
                raise ValueError(f"duplicate lexicon entry {p!r}")
            seen.add(p)
        tokens = tuple(tuple(words(p)) for p in self.phrases)
        object.__setattr__(self, "_tokens", tokens)
        # longest-first order (ties keep lexicon order), indexed by first word
        ranked = sorted(range(len(tokens)), key=lambda j: -len(tokens[j]))
        by_first: dict[str, list[tuple[int, tuple[str, ...], str]]] = {}
        for rank, j in enumerate(ranked):
            if tokens[j]:
                by_first.setdefault(tokens[j][0], []).append((rank, tokens[j], self.phrases[j]))
        object.__setattr__(self, "_by_first", by_first)

    @classmethod
    def from_phrases(cls, phrases, weights=None) -> "ModifierLexicon":
        phrases = tuple(p.strip().lower() for p in phrases)
        weights = tuple(float(w) for w in weights) if weights is not None else (1.0,) * len(phrases)
        return cls(phrases, weights)

    @classmethod
    def default(cls) -> "ModifierLexicon":
        return cls.from_phrases(DEFAULT_MODIFIERS)

    @classmethod
    def load(cls, path: str | Path) -> "ModifierLexicon":
        """One phrase per line; blank lines and ``#`` comments ignored.

        An optional weight may follow a tab: ``octane render\\t2.0``.
        """
        phrases, weights = [], []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            phrase, _, weight = line.partition("\t")
            phrases.append(phrase)
            weights.append(float(weight) if weight else 1.0)
        return cls.from_phrases(phrases, weights)

    def __len__(self) -> int:
        return len(self.phrases)

    def __iter__(self):
        return iter(self.phrases)

    def spans(self, tokens: list[str]) -> list[tuple[int, int, str]]:
        """All (start, end, phrase) occurrences, longest phrase first at each start."""
        found = []
        for i, tok in enumerate(tokens):
            for rank, ptoks, phrase in self._by_first.get(tok, ()):
                n = len(ptoks)
                if tuple(tokens[i:i + n]) == ptoks:
                    found.append((rank, i, i + n, phrase))
        found.sort()
        return [(i, j, phrase) for _, i, j, phrase in found]

    def hits(self, text: str) -> set[str]:
        """Distinct lexicon phrases occurring in ``text`` (word-boundary match)."""
        return {phrase for _, _, phrase in self.spans(words(text))}

    def count(self, text: str) -> int:
        return len(self.hits(text))

    def content_words(self, text: str) -> list[str]:
        """Word tokens of ``text`` not covered by any modifier occurrence."""
        toks = words(text)
        covered = [False] * len(toks)
        for start, end, _ in self.spans(toks):
            for i in range(start, end):
                covered[i] = True
        return [t for t, c in zip(toks, covered) if not c]

    def is_modifier(self, segment: str) -> bool:
        return self.count(segment) > 0

    def strip(self, text: str) -> str:
        """``text`` with modifier phrases removed, whitespace collapsed."""
        return " ".join(self.content_words(text))


def contains_phrase(text: str, phrase: str) -> bool:
    toks, ptoks = words(text), words(phrase)
    n = len(ptoks)
    return n > 0 and any(toks[i:i + n] == ptoks for i in range(len(toks) - n + 1))
