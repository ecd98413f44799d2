import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from promptcraft import numerics as nx
from promptcraft.data.pipeline import PromptPair
from promptcraft.errors import TrainingError
from promptcraft.lm import ModelConfig, TransformerParams, load_checkpoint
from promptcraft.lm.tokenizer import EOS, PAD, VOCAB_SIZE, encode
from promptcraft.sft import (TEMPLATE, SFTConfig, build_batch, encode_example, gradcheck_sft, lr_at, query_ids,
                             render_template, sft_loss, total_steps, train_sft)

TINY = ModelConfig(n_layers=1, d_model=16, n_heads=2, context=256)
PAIRS = [
    PromptPair("a cat", "a cat, 8k, trending on artstation", "generation"),
    PromptPair("a dog on a hill", "a dog on a hill, golden hour", "generation"),
    PromptPair("red car", "red car, octane render", "caption"),
]


class TestTemplate:
    def test_embeds_input(self):
        text = render_template("a cat")
        assert "Input: a cat" in text
        assert text.count("a cat") == 1

    def test_injective(self):
        assert render_template("a cat") != render_template("a dog")

    @settings(max_examples=50, deadline=None)
    @given(st.text(alphabet="abcdefgh ,", max_size=30), st.text(alphabet="abcdefgh ,", max_size=30))
    def test_injective_property(self, a, b):
        assert (render_template(a) == render_template(b)) == (a == b)

    def test_query_starts_with_bos(self):
        q = query_ids("x")
        assert q[0] == 257 and q[1:] == encode(render_template("x"))


class TestBatch:
    def test_mask_covers_target_and_eos(self):
        batch = build_batch(PAIRS[:1])
        prefix = len(query_ids(PAIRS[0].low))
        target = encode(PAIRS[0].high) + [EOS]
        mask = batch.loss_mask[0]
        assert not mask[:prefix].any()
        assert mask[prefix:prefix + len(target)].all()
        assert int(mask.sum()) == len(target)
        assert batch.tokens[0, prefix:prefix + len(target)].tolist() == target

    def test_rows_and_padding(self):
        batch = build_batch(PAIRS)
        assert len(batch) == 3
        for i in range(3):
            n = int(batch.lengths[i])
            assert (batch.tokens[i, n:] == PAD).all()
            assert not batch.loss_mask[i, n:].any()

    def test_oversized_target_truncated_to_max_len(self):
        pair = PromptPair("a cat", "a cat, " + "very " * 100, "generation")
        max_len = len(query_ids("a cat")) + 20
        ids, prefix = encode_example(pair, max_len)
        assert len(ids) == max_len
        assert ids[:prefix] == query_ids("a cat")
        assert EOS not in ids[prefix:]

    def test_template_too_long_is_skipped(self):
        batch = build_batch([PromptPair("x" * 400, "y", "caption"), PAIRS[0]], max_len=384)
        assert batch.skipped == 1 and len(batch) == 1

    def test_every_row_has_targets(self):
        batch = build_batch(PAIRS)
        assert (batch.loss_mask.sum(1) > 0).all()


class TestLoss:
    def test_uniform_logits_give_log_vocab(self):
        batch = build_batch(PAIRS)
        logits = torch.zeros(*batch.tokens.shape, VOCAB_SIZE)
        assert float(sft_loss(logits, batch)) == pytest.approx(math.log(260), abs=1e-6)

    def test_peaked_correct_logits_go_to_zero(self):
        batch = build_batch(PAIRS)
        logits = torch.full((*batch.tokens.shape, VOCAB_SIZE), -1e4)
        nxt = batch.tokens[:, 1:]
        logits[:, :-1].scatter_(-1, nxt.unsqueeze(-1), 1e4)
        assert float(sft_loss(logits, batch)) < 1e-6

    def test_matches_per_token_recomputation(self):
        batch = build_batch(PAIRS)
        g = torch.Generator().manual_seed(1)
        logits = torch.randn(*batch.tokens.shape, VOCAB_SIZE, generator=g, dtype=torch.float64)
        terms = []
        for i in range(len(batch)):
            for t in range(1, batch.tokens.shape[1]):
                if batch.loss_mask[i, t]:
                    lp = logits[i, t - 1] - torch.logsumexp(logits[i, t - 1], 0)
                    terms.append(-float(lp[batch.tokens[i, t]]))
        assert float(sft_loss(logits, batch)) == pytest.approx(sum(terms) / len(terms), abs=1e-12)

    def test_non_target_positions_do_not_matter(self):
        batch = build_batch(PAIRS)
        g = torch.Generator().manual_seed(2)
        logits = torch.randn(*batch.tokens.shape, VOCAB_SIZE, generator=g)
        base = float(sft_loss(logits, batch))
        # logits at position t predict token t+1: only rows where mask[t+1] is set matter
        predicts_target = torch.zeros_like(batch.loss_mask)
        predicts_target[:, :-1] = batch.loss_mask[:, 1:]
        perturbed = logits.clone()
        perturbed[~predicts_target] += 100 * torch.randn(int((~predicts_target).sum()), VOCAB_SIZE, generator=g)
        assert float(sft_loss(perturbed, batch)) == base

    def test_gradient_check_toy_model(self):
        report = gradcheck_sft(n_layers=1, d_model=8, n_heads=2, chunk=64)
        assert report.max_rel_error < 1e-3, report.format()


class TestSchedule:
    def test_examples(self):
        assert lr_at(0, 1e-3, 10, 110) == 0.0
        assert lr_at(10, 1e-3, 10, 110) == pytest.approx(1e-3)
        assert lr_at(60, 1e-3, 10, 110) == pytest.approx(0.5e-3)
        assert lr_at(110, 1e-3, 10, 110) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 50), st.integers(1, 200), st.integers(0, 300))
    def test_bounded_and_monotone_after_warmup(self, warmup, span, step):
        total = warmup + span
        lr = lr_at(step, 1.0, warmup, total)
        assert 0.0 <= lr <= 1.0 + 1e-12
        if warmup <= step < total:
            assert lr_at(step + 1, 1.0, warmup, total) <= lr + 1e-12

    def test_total_steps(self):
        assert total_steps(SFTConfig(epochs=4, batch_size=16), 100) == 4 * 7
        assert total_steps(SFTConfig(total_steps=5, warmup_steps=2), 100) == 5

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SFTConfig(epochs=0)
        with pytest.raises(ValueError):
            SFTConfig(total_steps=3, warmup_steps=5)


class TestTraining:
    def test_loss_decreases_and_artifacts(self, tmp_path):
        cfg = SFTConfig(epochs=20, batch_size=3, lr=3e-3, warmup_steps=2)
        res = train_sft(PAIRS, cfg, TINY, out_dir=tmp_path)
        assert len(res.history) == 20
        assert res.history[-1][2] < res.history[0][2]
        ck = load_checkpoint(res.checkpoint)
        assert ck.stage == "sft"
        assert ck.extra["template"] == TEMPLATE
        lines = res.curve.read_text().splitlines()
        assert lines[0] == "step,lr,loss" and len(lines) == 21

    def test_zero_lr_leaves_parameters(self):
        init = TransformerParams.init(TINY, seed=3)
        res = train_sft(PAIRS, SFTConfig(epochs=2, batch_size=3, lr=0.0, warmup_steps=0), init=init)
        for a, b in zip(init, res.params):
            assert torch.equal(a.tensor, b.tensor)
        losses = [h[2] for h in res.history]
        # same rows in a different order: equal up to summation order
        assert losses[0] == pytest.approx(losses[1], rel=1e-6)

    def test_deterministic(self, tmp_path):
        cfg = SFTConfig(epochs=2, batch_size=2, lr=1e-3, warmup_steps=1)
        a = train_sft(PAIRS, cfg, TINY, out_dir=tmp_path / "a")
        b = train_sft(PAIRS, cfg, TINY, out_dir=tmp_path / "b")
        assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
        assert a.curve.read_text() == b.curve.read_text()

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train_sft([], SFTConfig(), TINY)

    def test_non_finite_loss_aborts(self):
        init = TransformerParams.init(TINY, seed=0)
        with torch.no_grad():
            init["wte"].fill_(float("nan"))
        with pytest.raises(TrainingError, match="step 0"):
            train_sft(PAIRS, SFTConfig(epochs=1, batch_size=3, warmup_steps=0), init=init)

    def test_reference_unchanged_by_training(self):
        init = TransformerParams.init(TINY, seed=4)
        before = [p.tensor.clone() for p in init]
        train_sft(PAIRS, SFTConfig(epochs=1, batch_size=3, warmup_steps=0), init=init)
        assert all(torch.equal(a, p.tensor) for a, p in zip(before, init))
