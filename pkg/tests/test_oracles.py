import math
import statistics

import pytest
from hypothesis import given
from hypothesis import strategies as st

from promptcraft.data.text import ModifierLexicon
from promptcraft.oracles import (DEFAULT_SEEDS, OracleConfig, SeedSet, aes_base, aes_oracle, avg_over_seeds,
                                 composite_oracle, fidelity, noise, pick_oracle)

CFG = OracleConfig()
QUIET = CFG.noiseless()
LEX = ModifierLexicon.default()
MODS = list(LEX.phrases)


def test_noise_zero_amplitude():
    assert noise("abc", 3, 0.0) == 0.0


def test_noise_deterministic_and_bounded():
    assert noise("abc", 3, 0.5) == noise("abc", 3, 0.5)
    assert all(-0.5 <= noise("t", s, 0.5) <= 0.5 for s in range(200))


def test_noise_mean_over_seeds():
    n, amp = 10_000, 1.0
    values = [noise("a cat", s, amp) for s in range(n)]
    sigma = amp / math.sqrt(3)
    assert abs(sum(values) / n) <= 3 * sigma / math.sqrt(n)


def test_aes_examples():
    assert aes_oracle("a cat", 0, QUIET) == 1.0
    y = "a cat, " + ", ".join(MODS[:4])
    assert aes_oracle(y, 0, QUIET) == pytest.approx(1 + 9 * (1 - math.exp(-1)), abs=1e-12)
    assert aes_oracle(y, 0, QUIET) == pytest.approx(6.689, abs=1e-3)


def test_aes_length_penalty():
    y = ", ".join(MODS[:4]) + " " + "x" * 700
    assert aes_base(y, QUIET) == pytest.approx(1 + 9 * (1 - math.exp(-1)) - 1.0)


@given(st.lists(st.sampled_from(MODS), max_size=12), st.text(max_size=30), st.integers(-5, 5))
def test_aes_bounds(mods, filler, seed):
    y = filler + ", " + ", ".join(mods)
    assert 1.0 <= aes_oracle(y, seed, CFG) <= 10.0


@given(st.lists(st.sampled_from(MODS), unique=True, max_size=10), st.sampled_from(MODS))
def test_aes_monotone_in_new_modifier(mods, extra):
    y = "a cat, " + ", ".join(mods)
    assert aes_base(y + ", " + extra, QUIET) >= aes_base(y, QUIET)


def test_pick_examples():
    x = "a cat on a mat"
    rich = x + ", " + ", ".join(MODS)
    assert aes_base(rich, QUIET) > 9.99
    assert pick_oracle(x, rich, 0, QUIET) == pytest.approx(18 + 3 * (0.5 + 0.5 * (aes_base(rich, QUIET) - 1) / 9))
    assert pick_oracle("a cat", "a dog", 0, QUIET) == pytest.approx(18.0 + 1.5 * 0.5)
    assert pick_oracle("cat", "dog", 0, QUIET) == 18.0


def test_pick_extremes():
    # f=1 and base=10 gives the top of the range; f=0 and base=1 the bottom
    cfg = OracleConfig(saturation=1e6, noise=False)
    assert pick_oracle("cat", "cat, 8k", 0, cfg) == pytest.approx(21.0)
    assert pick_oracle("cat", "dog", 0, QUIET) == 18.0


@given(st.text(alphabet="abcde ", max_size=20), st.text(alphabet="abcde ,", max_size=40))
def test_pick_bounds_and_superset(x, extra):
    assert 18.0 <= pick_oracle(x, extra, 0, QUIET) <= 21.0
    assert fidelity(x, x + " " + extra, QUIET) == 1.0


def test_pick_nondecreasing_in_fidelity():
    x = "red fox in a snowy forest"
    mods = ", 8k, bokeh"
    ys = ["fox" + mods, "red fox" + mods, "red fox snowy" + mods, "red fox snowy forest" + mods]
    scores = [pick_oracle(x, y, 0, QUIET) for y in ys]
    assert scores == sorted(scores)


def test_fidelity_empty_content():
    assert fidelity("8k, bokeh", "anything", QUIET) == 1.0


def test_seed_set():
    assert len(SeedSet()) == 8
    with pytest.raises(ValueError):
        SeedSet((1, 2, 3))
    with pytest.raises(ValueError):
        SeedSet((1, 1, 2, 3, 4, 5, 6, 7))


def test_avg_over_seeds():
    y = "a cat, 8k, bokeh"
    brute = sum(aes_oracle(y, s, CFG) for s in DEFAULT_SEEDS) / 8
    assert avg_over_seeds(aes_oracle, (y,), SeedSet(), CFG) == pytest.approx(brute, abs=0)
    assert avg_over_seeds(aes_oracle, (y,), SeedSet(), QUIET) == aes_oracle(y, 0, QUIET)


def test_avg_reduces_variance():
    texts = [f"prompt {i}, 8k, bokeh" for i in range(300)]
    single = [pick_oracle("prompt", t, 11, CFG) - pick_oracle("prompt", t, 0, QUIET) for t in texts]
    averaged = [avg_over_seeds(pick_oracle, ("prompt", t), SeedSet(), CFG) - pick_oracle("prompt", t, 0, QUIET)
                for t in texts]
    assert statistics.pvariance(averaged) < statistics.pvariance(single)


def test_composite():
    x, y = "a cat", "a cat, 8k"
    expected = 0.7 * pick_oracle(x, y, 0, QUIET) + 0.3 * aes_oracle(y, 0, QUIET)
    assert composite_oracle(x, y, 0.7, QUIET) == pytest.approx(expected)


def test_config_validation():
    with pytest.raises(ValueError):
        OracleConfig(aes_min=5, aes_max=5)
    with pytest.raises(ValueError):
        OracleConfig(aes_noise=-1)
