"""End-to-end acceptance gate.

Each test prints one ``[criterion N] PASS|FAIL`` line (also repeated in the
terminal summary) and then asserts it.  Tolerances and budgets are fixed
constants below.  The training-based criteria share one desk-scale pipeline
run built lazily by the ``pipeline`` fixture.
"""

from __future__ import annotations

import math
import re
import time
from collections import Counter
from dataclasses import dataclass, field, replace

import pytest
import torch

from promptcraft import numerics as nx
from promptcraft import workflow
from promptcraft.config import PipelineConfig
from promptcraft.data.corpus import synth_corpus
from promptcraft.data.pipeline import (DataConfig, PromptPair, RawPrompt, build_dataset, compute_stats, cos_sim,
                                       embed_tf, filter_aesthetic, filter_blocklist, filter_consistency)
from promptcraft.data.text import ModifierLexicon
from promptcraft.evaluation import TrajectoryLog, composite_judge, evaluate, generate_rewrites, winrate
from promptcraft.lm import ModelConfig, greedy
from promptcraft.lm.checkpoint import params_digest
from promptcraft.lm.tokenizer import EOS, VOCAB_SIZE, decode
from promptcraft.oracles import SeedSet, aes_base, composite_oracle
from promptcraft.ppo import KLControllerState, update_kl_controller
from promptcraft.reward import make_rm_targets, composite_reward, train_rm
from promptcraft.sft import SFTConfig, build_batch, corpus_loss, gradcheck_sft, query_ids, sft_loss, train_sft

pytestmark = pytest.mark.slow

# Budgets and tolerances.
GRADCHECK_TOL = 1e-3
GRADCHECK_BUDGET_S = 60.0
MEMO_PAIRS = 32
MEMO_CE = 0.1
MEMO_EXACT = 0.90
MEMO_BUDGET_S = 300.0
RM_PAIRS = 500
RM_MSE_GAIN = 0.50
RM_PEARSON = 0.8
PPO_STEPS = 2000
PPO_GAIN = 0.15
PPO_BUDGET_S = 1800.0
KL_BAND = (0.5, 2.0)  # multiples of the configured target
ABLATION_SLACK = 0.01
WINRATE_PROMPTS = 200
CORPUS_RECORDS = 1000
ANALYTIC_TOL = 1e-6

# Desk-scale settings.
MEMO_MODEL = ModelConfig(n_layers=2, d_model=64, n_heads=4, context=384)
MEMO_SFT = SFTConfig(total_steps=700, lr=3e-3, warmup_steps=20, batch_size=32)
ABLATION_STEPS = 500
ABLATION_EVERY = 250
PROBE_PROMPTS = 64

RESULTS: dict[int, str] = {}


@pytest.fixture
def verdict(request):
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(n: int, ok: bool, detail: str) -> bool:
        line = f"[criterion {n:>2}] {'PASS' if ok else 'FAIL'}  {detail}"
        RESULTS[n] = line
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        return ok

    return emit


# ---------------------------------------------------------------------------
# Shared pipeline run
# ---------------------------------------------------------------------------


@dataclass
class PipelineRun:
    cfg: PipelineConfig
    root: object
    timings: dict[str, float] = field(default_factory=dict)
    _cache: dict = field(default_factory=dict)

    def _once(self, key, build):
        if key not in self._cache:
            t0 = time.perf_counter()
            self._cache[key] = build()
            self.timings[key] = time.perf_counter() - t0
        return self._cache[key]

    @property
    def data(self):
        def build():
            raw = [RawPrompt(r["text"], r["id"]) for r in synth_corpus(CORPUS_RECORDS, self.cfg.data.seed,
                                                                       self.cfg.lexicon())]
            return workflow.build(self.cfg, raw, self.root / "data")
        return self._once("data", build)

    @property
    def sft(self):
        return self._once("sft", lambda: workflow.sft(self.cfg, self.data.train, self.root / "sft"))

    def rm(self, kind: str):
        return self._once(f"rm_{kind}", lambda: workflow.reward_model(self.cfg, kind, self.data.train,
                                                                        self.sft.params, self.root / "rm"))

    @property
    def ppo(self):
        def build():
            probe = self.probe
            provider = workflow.make_provider("combined", self.cfg, self.rm("ps").model, self.rm("aes").model)
            run_cfg = replace(self.cfg, ppo=replace(self.cfg.ppo, steps=PPO_STEPS, snapshot_every=ABLATION_EVERY))
            trajectory = TrajectoryLog()
            eval_time = [0.0]
            digests = {}

            def on_snapshot(step, bundle):
                if step == 0:
                    digests["frozen"] = bundle.frozen_digest()
                    digests["reference"] = bundle.reference_digest()
                if step <= ABLATION_STEPS:
                    t0 = time.perf_counter()
                    s = evaluate(bundle.policy, probe, self.cfg.oracle.noiseless(), seeds=(0,),
                                 method="combined", max_new_tokens=self.cfg.eval.max_new_tokens)
                    trajectory.add("combined", step, s.aes, s.pick)
                    eval_time[0] += time.perf_counter() - t0

            t0 = time.perf_counter()
            result = workflow.ppo(run_cfg, self.sft.params, [p.low for p in self.data.train], provider,
                                  self.root / "ppo", on_snapshot)
            train_time = time.perf_counter() - t0 - eval_time[0]
            return result, trajectory, digests, train_time
        return self._once("ppo", build)

    @property
    def probe(self) -> list[str]:
        return self.data.test[:PROBE_PROMPTS]

    @property
    def ablation(self) -> TrajectoryLog:
        def build():
            _, combined, _, _ = self.ppo
            cfg = replace(self.cfg, eval=replace(self.cfg.eval, ablation_steps=ABLATION_STEPS),
                          ppo=replace(self.cfg.ppo, snapshot_every=ABLATION_EVERY))
            others = workflow.ablation(cfg, self.sft.params, [p.low for p in self.data.train], self.probe,
                                       self.rm("ps").model, self.rm("aes").model, self.root / "ablation",
                                       ("ps-only", "aes-only", "direct-oracle"))
            # the combined run is the main PPO run: same SFT weights, seed and reward
            merged = TrajectoryLog(list(combined.points) + list(others.points))
            merged.write_csv(self.root / "ablation" / "ablation_all.csv")
            return merged
        return self._once("ablation", build)

    def rewrites(self, which: str) -> list[str]:
        def build():
            params = self.sft.params if which == "sft" else self.ppo[0].bundle.policy
            return generate_rewrites(params, self.data.test[:WINRATE_PROMPTS], self.cfg.eval.max_new_tokens)
        return self._once(f"rewrites_{which}", build)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    nx.configure_determinism(True)
    return PipelineRun(PipelineConfig(), tmp_path_factory.mktemp("acceptance"))


# ---------------------------------------------------------------------------
# Criteria
# ---------------------------------------------------------------------------


def test_criterion_01_gradient_integrity(verdict):
    t0 = time.perf_counter()
    report = gradcheck_sft(n_layers=2, d_model=32, n_heads=2, eps=1e-4)
    elapsed = time.perf_counter() - t0
    ok = report.max_rel_error < GRADCHECK_TOL and elapsed < GRADCHECK_BUDGET_S
    verdict(1, ok, f"grad_check max rel error {report.max_rel_error:.2e} (< {GRADCHECK_TOL:g}) "
                   f"over {report.n_coordinates} coordinates in {elapsed:.1f}s (< {GRADCHECK_BUDGET_S:g}s)")
    assert ok, report.format()


def _memo_pairs() -> list[PromptPair]:
    raw = [RawPrompt(r["text"], r["id"]) for r in synth_corpus(300, 0)]
    built = build_dataset(raw, cfg=DataConfig(test_size=0))
    return [p for p in built.train if p.source == "generation"][:MEMO_PAIRS]


def test_criterion_02_sft_memorization(verdict):
    pairs = _memo_pairs()
    assert len(pairs) == MEMO_PAIRS
    t0 = time.perf_counter()
    result = train_sft(pairs, MEMO_SFT, MEMO_MODEL)
    ce = corpus_loss(result.params, pairs)
    # each prompt gets the whole remaining context as its decoding budget
    queries = [query_ids(p.low) for p in pairs]
    outs = [greedy(result.params, [q], MEMO_MODEL.context - len(q))[0] for q in queries]
    exact = sum(bool(o.ids) and o.ids[-1] == EOS and decode(o.ids[:-1]) == p.high for o, p in zip(outs, pairs))
    elapsed = time.perf_counter() - t0
    frac = exact / len(pairs)
    ok = ce < MEMO_CE and frac >= MEMO_EXACT and elapsed < MEMO_BUDGET_S
    verdict(2, ok, f"per-token CE {ce:.4f} (< {MEMO_CE}), exact {exact}/{len(pairs)} = {frac:.0%} "
                   f"(>= {MEMO_EXACT:.0%}), {elapsed:.0f}s (< {MEMO_BUDGET_S:g}s)")
    assert ok


def test_criterion_03_reward_model_fit(pipeline, verdict):
    pairs = pipeline.data.train[:RM_PAIRS]
    assert len(pairs) == RM_PAIRS
    oracle = pipeline.cfg.oracle.noiseless()
    parts = []
    ok = True
    for kind in ("ps", "aes"):
        data = make_rm_targets(pairs, kind, oracle, SeedSet())
        res = train_rm(data, kind, pipeline.cfg.rm, pipeline.sft.params)
        gain = 1.0 - res.val_mse / res.baseline_mse
        ok &= gain >= RM_MSE_GAIN and res.pearson > RM_PEARSON
        parts.append(f"{kind}: mse {res.val_mse:.4f} vs mean {res.baseline_mse:.4f} ({gain:.0%} better, "
                     f">= {RM_MSE_GAIN:.0%}), pearson {res.pearson:.3f} (> {RM_PEARSON})")
    verdict(3, ok, "; ".join(parts))
    assert ok


def _composite(prompts, outputs, cfg: PipelineConfig) -> float:
    oracle = cfg.oracle.noiseless()
    return sum(composite_oracle(x, y, cfg.composite.alpha, oracle) for x, y in zip(prompts, outputs)) / len(prompts)


def test_criterion_04_ppo_improvement(pipeline, verdict):
    result, _, _, train_time = pipeline.ppo
    prompts = pipeline.data.test[:WINRATE_PROMPTS]
    sft_score = _composite(prompts, pipeline.rewrites("sft"), pipeline.cfg)
    ppo_score = _composite(prompts, pipeline.rewrites("ppo"), pipeline.cfg)
    gain = (ppo_score - sft_score) / sft_score
    ok = gain >= PPO_GAIN and train_time < PPO_BUDGET_S and len(result.metrics) == PPO_STEPS
    verdict(4, ok, f"composite on {len(prompts)} held-out prompts: SFT {sft_score:.3f} -> PPO {ppo_score:.3f} "
                   f"({gain:+.1%}, need >= {PPO_GAIN:+.0%}); {len(result.metrics)} steps in {train_time:.0f}s "
                   f"(< {PPO_BUDGET_S:g}s)")
    assert ok


def test_criterion_05_kl_control(pipeline, verdict):
    result, _, _, _ = pipeline.ppo
    target = pipeline.cfg.ppo.kl_target
    tail = result.metrics[len(result.metrics) // 2:]
    mean_kl = sum(r["mean_kl"] for r in tail) / len(tail)
    lo, hi = KL_BAND[0] * target, KL_BAND[1] * target
    betas = [r["beta"] for r in result.metrics] + [result.kl_state.beta]
    ok = lo <= mean_kl <= hi and min(betas) > 0
    verdict(5, ok, f"mean KL over final {len(tail)} steps {mean_kl:.3f} (band [{lo:g}, {hi:g}]); "
                   f"beta range [{min(betas):.4g}, {max(betas):.4g}] (> 0)")
    assert ok


def test_criterion_06_freezing_contract(pipeline, verdict):
    result, _, digests, _ = pipeline.ppo
    bundle = result.bundle
    frozen_ok = digests["frozen"] == bundle.frozen_digest()
    reference_ok = digests["reference"] == bundle.reference_digest()
    sft_ok = params_digest(pipeline.sft.params) == bundle.reference_digest()
    ok = frozen_ok and reference_ok and sft_ok
    verdict(6, ok, f"{len(bundle.plan.frozen)} frozen tensors unchanged: {frozen_ok}; reference unchanged: "
                   f"{reference_ok}; reference equals SFT weights: {sft_ok}")
    assert ok


def test_criterion_07_ablation_directionality(pipeline, verdict):
    log = pipeline.ablation
    combined = log.series("combined")
    aes_only = log.series("aes-only")
    start, end = combined[0], combined[-1]
    slack = 1.0 - ABLATION_SLACK
    a_ok = end.aes >= start.aes * slack and end.pick >= start.pick * slack
    b_ok = aes_only[-1].pick <= end.pick * (1.0 + ABLATION_SLACK)
    same_start = len({(s[0].aes, s[0].pick) for s in (log.series(v) for v in log.variants())}) == 1
    ok = a_ok and b_ok and same_start
    verdict(7, ok, f"combined step {start.step}->{end.step}: aes {start.aes:.3f}->{end.aes:.3f}, "
                   f"pick {start.pick:.3f}->{end.pick:.3f} (a: {a_ok}); aes-only final pick "
                   f"{aes_only[-1].pick:.3f} <= combined {end.pick:.3f} +1% (b: {b_ok}); shared step 0: {same_start}")
    assert ok


def test_criterion_08_winrate(pipeline, verdict):
    prompts = pipeline.data.test[:WINRATE_PROMPTS]
    assert len(prompts) == WINRATE_PROMPTS
    judge = composite_judge(pipeline.cfg.composite.alpha, pipeline.cfg.oracle.noiseless())
    res = winrate(prompts, pipeline.rewrites("ppo"), pipeline.rewrites("sft"), judge, pipeline.cfg.eval.tie_eps)
    ok = res.win > res.lose
    verdict(8, ok, f"PPO vs SFT on {res.total} prompts: win {res.win}, lose {res.lose}, tie {res.tie}")
    assert ok


_BRUTE_WORD = re.compile(r"[a-z0-9]+(?:'[a-z]+)?")


def _brute_cos(a: str, b: str) -> float | None:
    ca, cb = Counter(_BRUTE_WORD.findall(a.lower())), Counter(_BRUTE_WORD.findall(b.lower()))
    keys = set(ca) | set(cb)
    dot = sum(ca[k] * cb[k] for k in keys)
    na = math.sqrt(sum(v * v for v in ca.values()))
    nb = math.sqrt(sum(v * v for v in cb.values()))
    return None if na == 0 or nb == 0 else min(1.0, dot / (na * nb))


def test_criterion_09_data_pipeline_exactness(verdict):
    cfg = PipelineConfig()
    lexicon = cfg.lexicon()
    raw = [RawPrompt(r["text"], r["id"]) for r in synth_corpus(CORPUS_RECORDS, 0, lexicon)]
    built = build_dataset(raw, lexicon, DataConfig(test_size=0))
    pairs = built.train
    stats = compute_stats(pairs)
    checks = []

    # statistics against a brute-force recount
    for source, s in [("all", stats.total), *stats.per_source.items()]:
        group = pairs if source == "all" else [p for p in pairs if p.source == source]
        n = len(group)
        want_aes = sum(aes_base(p.high, cfg.oracle) for p in group) / n
        want_pc = sum(_brute_cos(p.low, p.high) for p in group) / n
        want_allp = sum(len(_BRUTE_WORD.findall(p.low.lower())) for p in group) / n
        want_alhp = sum(len(_BRUTE_WORD.findall(p.high.lower())) for p in group) / n
        checks.append(s.count == n)
        checks.append(math.isclose(s.mean_aes, want_aes, rel_tol=1e-12))
        checks.append(math.isclose(s.mean_pc, want_pc, rel_tol=1e-12))
        checks.append(s.allp == want_allp and s.alhp == want_alhp)
    stats_ok = all(checks)

    # the consistency filter removes exactly the pairs below threshold
    unfiltered = filter_aesthetic(filter_blocklist(
        [PromptPair(p.low, p.high, p.source) for p in pairs] + _low_consistency_pairs(lexicon))[0], cfg.oracle)
    kept = filter_consistency(unfiltered, cfg.data.consistency_threshold)
    brute = [p for p in unfiltered if (c := _brute_cos(p.low, p.high)) is not None and c > 0
             and c >= cfg.data.consistency_threshold]
    removed = len(unfiltered) - len(kept)
    filter_ok = [(p.low, p.high) for p in kept] == [(p.low, p.high) for p in brute] and removed > 0

    # every filter is idempotent
    once_b, _ = filter_blocklist(unfiltered)
    twice_b, _ = filter_blocklist(once_b)
    once_a = filter_aesthetic(unfiltered, cfg.oracle)
    once_c = filter_consistency(unfiltered, cfg.data.consistency_threshold)
    idem_ok = (twice_b == once_b and filter_aesthetic(once_a, cfg.oracle) == once_a
               and filter_consistency(once_c, cfg.data.consistency_threshold) == once_c)

    ok = stats_ok and filter_ok and idem_ok and len(pairs) > 0
    verdict(9, ok, f"{len(raw)} records -> {len(pairs)} pairs; stats match brute force: {stats_ok}; consistency "
                   f"filter removed {removed} exactly as brute force: {filter_ok}; filters idempotent: {idem_ok}")
    assert ok


def _low_consistency_pairs(lexicon: ModifierLexicon) -> list[PromptPair]:
    # rewrites that drift off-topic, so the consistency filter has something to remove
    subjects = ["a cat on a roof", "a red car", "an old castle", "a bowl of fruit"]
    drift = ["a spaceship over a neon city", "a dragon in a volcano", "a forest at dawn", "a whale in the sky"]
    mods = ", highly detailed, octane render, trending on artstation, 8k, sharp focus"
    return [PromptPair(s, d + mods, "generation") for s in subjects for d in drift]


def test_criterion_10_analytic_unit_oracles(verdict):
    cs = cos_sim(embed_tf("a cat"), embed_tf("a dog"))
    comp = composite_reward(20.0, 6.0)
    beta = update_kl_controller(KLControllerState(beta=0.05, target=6.0), 12.0)
    batch = build_batch([PromptPair("a cat", "a cat, 8k", "generation")])
    ce = float(sft_loss(torch.zeros(*batch.tokens.shape, VOCAB_SIZE, dtype=torch.float64), batch))
    values = {"cos_sim": (cs, 0.5), "composite": (comp, 15.8), "beta": (beta, 0.051), "uniform CE": (ce, math.log(260))}
    ok = all(abs(got - want) <= ANALYTIC_TOL for got, want in values.values())
    verdict(10, ok, ", ".join(f"{k} {got:.9g} (want {want:.9g})" for k, (got, want) in values.items()))
    assert ok
