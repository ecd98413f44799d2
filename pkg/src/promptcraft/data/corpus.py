"""Synthetic raw-prompt corpus: subjects x scenes x details x modifier bank.

Produces a DiffusionDB-like mix of short plain prompts, long modifier-rich
prompts, and a sprinkling of records the post-processing filters must
remove (non-English text, blocklisted terms).
"""

from __future__ import annotations

import random

from .text import DEFAULT_BLOCKLIST, ModifierLexicon

SUBJECTS = (
    "a red fox", "an old sailor", "a castle", "a cat", "a robot", "a dragon", "a lighthouse",
    "a little girl", "a samurai", "a wizard", "an astronaut", "a wolf", "a forest cabin",
    "a steam train", "a knight", "a mermaid", "a city street", "a mountain village",
    "a giant tree", "a white horse", "a tiger", "an owl", "a spaceship", "a ballerina",
    "a fisherman", "a temple", "a deer", "a bridge", "a young queen", "a pirate ship",
    "a waterfall", "a street musician", "a desert nomad", "a polar bear", "a windmill",
    "a monk", "a koi pond", "a clockmaker", "a hot air balloon", "a sunflower field",
)

SCENES = (
    "on a hill", "in a dark forest", "at sunset", "under the sea", "in the rain",
    "on the moon", "in a snowy valley", "by the river", "in a busy market", "at night",
    "in a field of flowers", "on a cliff", "in the clouds", "in an ancient ruin",
    "near a lake", "in the desert", "on a rooftop", "inside a library", "in the mist",
    "during a storm",
)

DETAILS = (
    "wearing a long blue cloak", "with glowing golden eyes", "surrounded by tall pine trees",
    "with birds flying overhead", "holding an old brass lantern", "under a sky full of stars",
    "with soft reflections in the water", "covered in fresh morning dew", "next to a small wooden boat",
    "with mountains in the background", "lit by warm candle light", "with petals drifting in the wind",
    "beside a crumbling stone wall", "with smoke rising from a chimney", "in front of a red door",
    "with snow falling gently", "near a field of tall grass", "with a crowd of people watching",
)

NON_ENGLISH = (
    "一只猫坐在窗边的月光下", "красивый замок на холме ночью", "夕阳下的古老城堡和飞鸟",
    "кот в лесу под дождём", "海边的灯塔和星空",
)


def _join_modifiers(rng: random.Random, lexicon: ModifierLexicon, k: int) -> list[str]:
    return rng.sample(list(lexicon.phrases), k)


def low_prompt(rng: random.Random, lexicon: ModifierLexicon) -> str:
    text = f"{rng.choice(SUBJECTS)} {rng.choice(SCENES)}"
    if rng.random() < 0.4:
        text += f" {rng.choice(DETAILS)}"
    if rng.random() < 0.15:
        text += f", {rng.choice(lexicon.phrases)}"
    return text


def high_prompt(rng: random.Random, lexicon: ModifierLexicon) -> str:
    head = f"{rng.choice(SUBJECTS)} {rng.choice(SCENES)} {rng.choice(DETAILS)}"
    details = rng.sample(DETAILS, rng.randint(2, 3))
    mods = _join_modifiers(rng, lexicon, rng.randint(2, 6))
    return ", ".join([head, *details, *mods])


def synth_corpus(n: int, seed: int = 0, lexicon: ModifierLexicon | None = None,
                 high_fraction: float = 0.5, noise_fraction: float = 0.03) -> list[dict]:
    """``n`` raw records ``{"text", "id"}``, deterministic in ``seed``."""
    lexicon = lexicon or ModifierLexicon.default()
    rng = random.Random(seed)
    out = []
    for i in range(n):
        u = rng.random()
        if u < noise_fraction / 2:
            text = rng.choice(NON_ENGLISH)
        elif u < noise_fraction:
            text = f"{high_prompt(rng, lexicon)}, {rng.choice(DEFAULT_BLOCKLIST)}"
        elif u < noise_fraction + high_fraction:
            text = high_prompt(rng, lexicon)
        else:
            text = low_prompt(rng, lexicon)
        out.append({"text": text, "id": f"syn-{seed}-{i}"})
    return out
