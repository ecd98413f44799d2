"""Closed-form stand-ins for visual feedback: an aesthetic oracle and a preference oracle.

Both score text only.  The aesthetic oracle rewards distinct modifier
phrases with a saturating curve on a 1-10 scale; the preference oracle
mixes fidelity to the original prompt with that aesthetic quality on an
18-21 scale.  Seeds perturb scores through a hash so that averaging over
several seeds actually reduces variance.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

from .data.text import ModifierLexicon

DEFAULT_SEEDS = (11, 23, 37, 41, 53, 67, 79, 97)


@dataclass(frozen=True)
class OracleConfig:
    lexicon: ModifierLexicon = field(default_factory=ModifierLexicon.default)
    saturation: float = 0.25
    length_cap: int = 600
    length_penalty: float = 1.0
    aes_min: float = 1.0
    aes_max: float = 10.0
    pick_base: float = 18.0
    pick_span: float = 3.0
    aes_noise: float = 0.3
    pick_noise: float = 0.5
    noise: bool = True

    def __post_init__(self):
        if not self.aes_min < self.aes_max:
            raise ValueError("aes_min must be below aes_max")
        if self.pick_span <= 0:
            raise ValueError("pick_span must be positive")
        if self.aes_noise < 0 or self.pick_noise < 0:
            raise ValueError("noise amplitudes must be non-negative")

    def noiseless(self) -> "OracleConfig":
        return replace(self, noise=False)


@dataclass(frozen=True)
class SeedSet:
    seeds: tuple[int, ...] = DEFAULT_SEEDS

    def __post_init__(self):
        if len(self.seeds) != 8:
            raise ValueError(f"a seed set holds exactly 8 seeds, got {len(self.seeds)}")
        if len(set(self.seeds)) != 8:
            raise ValueError("seeds must be distinct")

    def __iter__(self):
        return iter(self.seeds)

    def __len__(self):
        return len(self.seeds)


def noise(text: str, seed: int, amplitude: float) -> float:
    """Hash of (text, seed) mapped uniformly onto [-amplitude, amplitude]."""
    if amplitude == 0:
        return 0.0
    digest = hashlib.blake2b(text.encode("utf-8") + b"\x00" + struct.pack("<q", seed), digest_size=8).digest()
    u = int.from_bytes(digest, "little") / float(2**64 - 1)
    return amplitude * (2.0 * u - 1.0)


def _clamp(x: float, lo: float, hi: float) -> float:
    return min(max(x, lo), hi)


def aes_base(y: str, cfg: OracleConfig) -> float:
    m = cfg.lexicon.count(y)
    penalty = cfg.length_penalty if len(y.encode("utf-8")) > cfg.length_cap else 0.0
    span = cfg.aes_max - cfg.aes_min
    return _clamp(cfg.aes_min + span * (1.0 - math.exp(-cfg.saturation * m)) - penalty, cfg.aes_min, cfg.aes_max)


def aes_oracle(y: str, seed: int, cfg: OracleConfig) -> float:
    score = aes_base(y, cfg)
    if cfg.noise:
        score += noise(y, seed, cfg.aes_noise)
    return _clamp(score, cfg.aes_min, cfg.aes_max)


def fidelity(x: str, y: str, cfg: OracleConfig) -> float:
    """Share of x's distinct content words that survive in y (1 when x has none)."""
    cx = set(cfg.lexicon.content_words(x))
    if not cx:
        return 1.0
    cy = set(cfg.lexicon.content_words(y))
    return len(cx & cy) / len(cx)


def pick_oracle(x: str, y: str, seed: int, cfg: OracleConfig) -> float:
    f = fidelity(x, y, cfg)
    quality = (aes_base(y, cfg) - cfg.aes_min) / (cfg.aes_max - cfg.aes_min)
    score = cfg.pick_base + cfg.pick_span * (0.5 * f + 0.5 * quality)
    if cfg.noise:
        score += noise(x + "\x1f" + y, seed, cfg.pick_noise)
    return score


def avg_over_seeds(oracle: Callable[..., float], args: Sequence, seeds: SeedSet | Sequence[int], cfg: OracleConfig) -> float:
    """Mean of ``oracle(*args, seed, cfg)`` over the seed set."""
    seeds = tuple(seeds)
    return sum(oracle(*args, s, cfg) for s in seeds) / len(seeds)


def composite_oracle(x: str, y: str, alpha: float, cfg: OracleConfig, seed: int = 0) -> float:
    """alpha * pick + (1 - alpha) * aes for a single seed (noise per ``cfg``)."""
    return alpha * pick_oracle(x, y, seed, cfg) + (1.0 - alpha) * aes_oracle(y, seed, cfg)
