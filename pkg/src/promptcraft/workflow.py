"""Stage drivers shared by the command line and the end-to-end tests."""

from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

from .config import PipelineConfig
from .data.corpus import synth_corpus
from .data.pipeline import (BuildResult, PromptPair, RawPrompt, build_dataset, compute_stats, load_pairs, read_jsonl,
                            save_pairs, write_jsonl)
from .evaluation import VARIANTS, TrajectoryLog, ablate
from .lm.checkpoint import load_checkpoint
from .lm.model import TransformerParams
from .oracles import SeedSet
from .ppo import (OracleRewardProvider, PolicyBundle, PPOResult, RewardProvider, RMRewardProvider, train_ppo)
from .reward import RMResult, RewardModel, augment_pairs, make_rm_targets, train_rm
from .sft import SFTResult, train_sft

log = logging.getLogger(__name__)

REWARD_KINDS = ("ps", "aes", "combined", "direct")
_VARIANT_REWARD = {"ps-only": "ps", "aes-only": "aes", "combined": "combined", "direct-oracle": "direct"}


def synth_raw(cfg: PipelineConfig, path: str | Path, n: int | None = None) -> list[dict]:
    records = synth_corpus(n or cfg.corpus.n_records, cfg.data.seed, cfg.lexicon(),
                           cfg.corpus.high_fraction, cfg.corpus.noise_fraction)
    write_jsonl(path, records)
    return records


def build(cfg: PipelineConfig, raw: Sequence[RawPrompt], out_dir: str | Path) -> BuildResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = build_dataset(raw, cfg.lexicon(), cfg.data, cfg.oracle)
    save_pairs(out / "train.jsonl", result.train)
    write_jsonl(out / "test.jsonl", ({"text": t} for t in result.test))
    (out / "filter_report.json").write_text(json.dumps([r.__dict__ for r in result.reports], indent=2))
    (out / "stats.json").write_text(json.dumps(compute_stats(result.train).to_json(), indent=2))
    return result


def load_test_prompts(path: str | Path) -> list[str]:
    return [r["text"] if isinstance(r, dict) else str(r) for r in read_jsonl(path)]


def sft(cfg: PipelineConfig, pairs: Sequence[PromptPair], out_dir: str | Path | None) -> SFTResult:
    return train_sft(pairs, cfg.sft, cfg.model, out_dir=out_dir)


def reward_model(cfg: PipelineConfig, kind: str, pairs: Sequence[PromptPair], backbone: TransformerParams,
                 out_dir: str | Path | None, augment: bool = True) -> RMResult:
    """Targets are the oracle averaged over the 8 default seeds; curated pairs are augmented by default."""
    source = augment_pairs(pairs, cfg.lexicon(), cfg.rm.seed) if augment else list(pairs)
    data = make_rm_targets(source, kind, cfg.oracle, SeedSet())
    return train_rm(data, kind, cfg.rm, backbone, out_dir)


def load_params(path: str | Path) -> TransformerParams:
    return load_checkpoint(path).params


def make_provider(kind: str, cfg: PipelineConfig, rm_ps: RewardModel | None, rm_aes: RewardModel | None) -> RewardProvider:
    if kind not in REWARD_KINDS:
        raise ValueError(f"reward must be one of {REWARD_KINDS}")
    if kind == "direct":
        return OracleRewardProvider(cfg.oracle, cfg.composite, cfg.ppo.seed)
    if kind in ("ps", "combined") and rm_ps is None:
        raise ValueError("the ps reward model is required")
    if kind in ("aes", "combined") and rm_aes is None:
        raise ValueError("the aes reward model is required")
    return RMRewardProvider(rm_ps, rm_aes, cfg.composite, kind)


def ppo(cfg: PipelineConfig, sft_params: TransformerParams, prompts: Sequence[str], provider: RewardProvider,
        out_dir: str | Path | None, on_snapshot: Callable[[int, PolicyBundle], None] | None = None) -> PPOResult:
    bundle = PolicyBundle.from_sft(sft_params, cfg.ppo.freeze_fraction)
    return train_ppo(bundle, prompts, provider, cfg.ppo, cfg.oracle, out_dir, on_snapshot)


def ablation(cfg: PipelineConfig, sft_params: TransformerParams, prompts: Sequence[str], probe: Sequence[str],
             rm_ps: RewardModel | None, rm_aes: RewardModel | None, out_dir: str | Path,
             variants: Sequence[str] = VARIANTS) -> TrajectoryLog:
    """One PPO run per variant from the same SFT weights and seed; every snapshot is scored on ``probe``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_cfg = replace(cfg, ppo=replace(cfg.ppo, steps=cfg.eval.ablation_steps))

    def run_variant(variant: str, record) -> None:
        provider = make_provider(_VARIANT_REWARD[variant], run_cfg, rm_ps, rm_aes)
        ppo(run_cfg, sft_params, prompts, provider, out / variant,
            on_snapshot=lambda step, bundle: record(step, bundle.policy))

    return ablate(run_variant, probe, variants, cfg.oracle.noiseless(), cfg.eval.max_new_tokens,
                  out / "ablation.csv")
