"""PPO fine-tuning of the rewriter against a frozen reference with an adaptive KL penalty.

Per step: sample responses from the policy, teacher-force them through the
policy and the reference, shape per-token rewards with the KL penalty and
the terminal task reward, estimate advantages with GAE, then run a few
clipped-surrogate epochs on the trainable top of the network.

Because the bottom of the network is frozen in both models (and identical
between them), its activations are computed once per batch and reused by
every forward pass of that step.
"""

from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import torch

from . import numerics as nx
from .errors import TrainingError
from .lm import model as lm_model
from .lm.checkpoint import params_digest, save_checkpoint
from .lm.model import TransformerParams
from .lm.sampling import SamplerConfig, sample_batch_stream
from .lm.tokenizer import EOS, PAD, decode
from .oracles import OracleConfig, aes_oracle, pick_oracle
from .reward import CompositeConfig, RewardModel, ZNormalizer, clip_to_context, composite_reward, rm_scores
from .sft import TEMPLATE, TEMPLATE_VERSION, query_ids

log = logging.getLogger(__name__)

VALUE_W = "value.w"
VALUE_B = "value.b"
METRIC_FIELDS = ("step", "mean_reward", "mean_ps", "mean_aes", "mean_kl", "beta", "policy_loss", "value_loss")


# ---------------------------------------------------------------------------
# Configuration and KL control
# ---------------------------------------------------------------------------


@dataclass
class KLControllerState:
    beta: float = 0.05
    target: float = 6.0
    gain: float = 0.1
    clip: float = 0.2

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.target <= 0:
            raise ValueError("target KL must be positive")


def update_kl_controller(state: KLControllerState, observed_mean_kl: float) -> float:
    """Proportional update of beta toward the KL target; returns (and stores) the new beta."""
    error = min(max(observed_mean_kl / state.target - 1.0, -state.clip), state.clip)
    state.beta = state.beta * (1.0 + state.gain * error)
    return state.beta


@dataclass
class PPOConfig:
    lr: float = 5e-6
    batch_size: int = 32
    steps: int = 2000
    clip_eps: float = 0.2
    gamma: float = 1.0
    lam: float = 0.95
    ppo_epochs: int = 4
    vf_coef: float = 0.5
    max_grad_norm: float = 1.0
    freeze_fraction: float = 2.0 / 3.0
    kl_init: float = 0.05
    kl_target: float = 6.0
    kl_gain: float = 0.1
    kl_clip: float = 0.2
    temperature: float = 1.0
    top_p: float = 0.9
    max_new_tokens: int = 128
    snapshot_every: int = 1000
    init_value_bias: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("gamma and lam must lie in [0, 1]")
        if not 0.0 <= self.freeze_fraction <= 1.0:
            raise ValueError("freeze_fraction must lie in [0, 1]")

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.temperature, self.top_p, self.max_new_tokens, self.seed)

    def kl_state(self) -> KLControllerState:
        return KLControllerState(self.kl_init, self.kl_target, self.kl_gain, self.kl_clip)


# ---------------------------------------------------------------------------
# Freezing and the policy bundle
# ---------------------------------------------------------------------------


@dataclass
class FreezePlan:
    frozen_blocks: int
    frozen: list[str]
    trainable: list[str]

    @property
    def embeddings_frozen(self) -> bool:
        return "wte" in self.frozen


def freeze_partition(params: TransformerParams, fraction: float = 2.0 / 3.0) -> FreezePlan:
    """Freeze embeddings plus the bottom ceil(fraction * L) blocks.

    The final norm stays trainable while any block is; value-head
    parameters are always trainable.  The LM head is tied to the (frozen)
    token embedding.  ``fraction == 0`` freezes nothing.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    L = params.config.n_layers
    k = min(L, math.ceil(fraction * L - 1e-9)) if fraction > 0 else 0
    frozen_names = set()
    if fraction > 0:
        frozen_names |= {"wte", "wpe"}
        for layer in range(k):
            frozen_names |= set(params.block_names(layer))
        if k == L:
            frozen_names |= {"ln_f.g", "ln_f.b"}
    for p in params:
        p.trainable = p.name not in frozen_names
    return FreezePlan(k, [n for n in params.names() if n in frozen_names],
                      [n for n in params.names() if n not in frozen_names])


@dataclass
class PolicyBundle:
    policy: TransformerParams
    reference: TransformerParams
    plan: FreezePlan

    @classmethod
    def from_sft(cls, sft: TransformerParams, freeze_fraction: float = 2.0 / 3.0) -> "PolicyBundle":
        reference = sft.clone()
        reference.set_trainable(False)
        policy = sft.clone()
        if VALUE_W not in policy:
            d = policy.config.d_model
            dtype = policy["wte"].dtype
            policy.add(VALUE_W, torch.zeros(d, dtype=dtype))
            policy.add(VALUE_B, torch.zeros(1, dtype=dtype))
        plan = freeze_partition(policy, freeze_fraction)
        return cls(policy, reference, plan)

    @property
    def trunk_layers(self) -> int | None:
        """Blocks whose output is shared by policy and reference, or None without a frozen embedding."""
        return self.plan.frozen_blocks if self.plan.embeddings_frozen else None

    def frozen_digest(self) -> str:
        return params_digest(self.policy, self.plan.frozen)

    def reference_digest(self) -> str:
        return params_digest(self.reference)


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------


@dataclass
class RewardOutput:
    rewards: list[float]
    ps: list[float] | None = None
    aes: list[float] | None = None


class RewardProvider(Protocol):
    def __call__(self, xs: Sequence[str], ys: Sequence[str]) -> RewardOutput: ...


@dataclass
class RMRewardProvider:
    """Reward from trained reward models: ``mode`` is ``combined``, ``ps`` or ``aes``."""

    ps_model: RewardModel | None
    aes_model: RewardModel | None
    composite: CompositeConfig = field(default_factory=CompositeConfig)
    mode: str = "combined"
    normalizer: ZNormalizer | None = None

    def __call__(self, xs, ys) -> RewardOutput:
        ps = self._score(self.ps_model, xs, ys) if self.mode in ("combined", "ps") else None
        aes = self._score(self.aes_model, xs, ys) if self.mode in ("combined", "aes") else None
        if self.mode == "ps":
            return RewardOutput(ps, ps, None)
        if self.mode == "aes":
            return RewardOutput(aes, None, aes)
        rewards = []
        for p, a in zip(ps, aes):
            if self.composite.normalize and self.normalizer is not None:
                p, a = self.normalizer(p, a)
            rewards.append(composite_reward(p, a, self.composite))
        return RewardOutput(rewards, ps, aes)

    @staticmethod
    def _score(model: RewardModel, xs, ys) -> list[float]:
        # sampled bytes that are not valid UTF-8 can re-encode longer than they were generated
        C = model.params.config.context
        ys = [clip_to_context(model.kind, x, y, C) for x, y in zip(xs, ys)]
        return rm_scores(model, xs, ys).tolist()


@dataclass
class OracleRewardProvider:
    """Reward straight from the (noisy) oracles, one fresh seed per call."""

    oracle_cfg: OracleConfig
    composite: CompositeConfig = field(default_factory=CompositeConfig)
    seed: int = 0

    def __post_init__(self):
        self._calls = 0

    def __call__(self, xs, ys) -> RewardOutput:
        seed = self.seed * 1_000_003 + self._calls
        self._calls += 1
        ps = [pick_oracle(x, y, seed, self.oracle_cfg) for x, y in zip(xs, ys)]
        aes = [aes_oracle(y, seed, self.oracle_cfg) for y in ys]
        return RewardOutput([composite_reward(p, a, self.composite) for p, a in zip(ps, aes)], ps, aes)


@dataclass
class ConstantRewardProvider:
    value: float = 1.0

    def __call__(self, xs, ys) -> RewardOutput:
        return RewardOutput([self.value] * len(xs))


@dataclass
class Rollout:
    """One trajectory; every per-token list has one entry per response token."""

    x: str
    query: list[int]
    response: list[int]
    logp: list[float]
    logp_ref: list[float]
    values: list[float]
    reward: float
    shaped: list[float] = field(default_factory=list)
    advantages: list[float] = field(default_factory=list)
    returns: list[float] = field(default_factory=list)

    @property
    def y(self) -> str:
        return decode([t for t in self.response if t != EOS])

    @property
    def kl(self) -> float:
        return sum(a - b for a, b in zip(self.logp, self.logp_ref))


@dataclass
class RolloutBatch:
    """Tensor view of a rollout batch: [B, Q + R] ids with left-padded queries."""

    rollouts: list[Rollout]
    ids: torch.Tensor
    valid: torch.Tensor
    resp_mask: torch.Tensor  # [B, R]
    Q: int
    trunk: torch.Tensor | None
    logp_old: torch.Tensor
    logp_ref: torch.Tensor
    values_old: torch.Tensor
    rewards: torch.Tensor  # [B] terminal
    advantages: torch.Tensor | None = None
    returns: torch.Tensor | None = None


def pack(queries: Sequence[list[int]], responses: Sequence[list[int]]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, int]:
    B = len(queries)
    Q = max(len(q) for q in queries)
    R = max(len(r) for r in responses)
    ids = torch.full((B, Q + R), PAD, dtype=torch.long)
    valid = torch.zeros((B, Q + R), dtype=torch.bool)
    resp_mask = torch.zeros((B, R), dtype=torch.bool)
    for i, (q, r) in enumerate(zip(queries, responses)):
        ids[i, Q - len(q): Q] = torch.tensor(q)
        ids[i, Q: Q + len(r)] = torch.tensor(r)
        valid[i, Q - len(q): Q + len(r)] = True
        resp_mask[i, : len(r)] = True
    return ids, valid, resp_mask, Q


def trunk_hidden(bundle: PolicyBundle, ids: torch.Tensor, valid: torch.Tensor) -> torch.Tensor | None:
    k = bundle.trunk_layers
    if k is None:
        return None
    return lm_model.hidden_states(bundle.reference, ids, valid, 0, k)


def response_outputs(
    params: TransformerParams,
    ids: torch.Tensor,
    valid: torch.Tensor,
    Q: int,
    trunk: torch.Tensor | None,
    trunk_layers: int | None,
    with_values: bool = True,
) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Per-token log-probs of the response tokens and (optionally) values at the same states."""
    # Only states from the last query token on feed the response predictions.
    if trunk is not None:
        h = lm_model.hidden_states(params, ids, valid, start_layer=trunk_layers, h=trunk, query_from=Q - 1)
    else:
        h = lm_model.hidden_states(params, ids, valid, query_from=Q - 1)
    R = ids.shape[1] - Q
    hs = lm_model.final_norm(params, h[:, :R])
    logits = lm_model.lm_head(params, hs)
    logp = nx.token_log_probs(logits, ids[:, Q:])
    values = hs @ params[VALUE_W] + params[VALUE_B] if with_values else None
    return logp, values


def shape_rewards(logp: Sequence[float] | torch.Tensor, logp_ref: Sequence[float] | torch.Tensor,
                  reward: float, beta: float) -> torch.Tensor:
    """-beta * (log pi - log rho) per token, plus the task reward on the last token."""
    logp = torch.as_tensor(logp, dtype=torch.float64)
    logp_ref = torch.as_tensor(logp_ref, dtype=torch.float64)
    shaped = -beta * (logp - logp_ref)
    shaped[-1] += reward
    return shaped


def gae(values: torch.Tensor, rewards: torch.Tensor, gamma: float, lam: float,
        mask: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Generalized advantage estimates and returns along the last axis.

    Accepts [T] or [B, T]; positions outside ``mask`` are treated as
    terminal padding (zero value, zero reward).  Returns are A + V.
    """
    values = torch.as_tensor(values)
    rewards = torch.as_tensor(rewards, dtype=values.dtype)
    if mask is not None:
        m = mask.to(values.dtype)
        values, rewards = values * m, rewards * m
    T = values.shape[-1]
    adv = torch.zeros_like(values)
    running = torch.zeros_like(values[..., 0])
    for t in reversed(range(T)):
        next_v = values[..., t + 1] if t + 1 < T else torch.zeros_like(running)
        delta = rewards[..., t] + gamma * next_v - values[..., t]
        running = delta + gamma * lam * running
        adv[..., t] = running
    if mask is not None:
        adv = adv * mask.to(values.dtype)
    return adv, adv + values


def whiten(x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Zero-mean, unit-(population-)std over the masked entries; all-zero when the variance is zero."""
    m = torch.ones_like(x, dtype=torch.bool) if mask is None else mask
    vals = x[m]
    if vals.numel() == 0:
        return torch.zeros_like(x)
    mean = vals.mean()
    var = ((vals - mean) ** 2).mean()
    if float(var) <= 1e-12:
        return torch.zeros_like(x)
    out = (x - mean) / torch.sqrt(var)
    return out * m.to(x.dtype)


@torch.no_grad()
def generate_rollouts(
    bundle: PolicyBundle,
    prompts: Sequence[str],
    sampler: SamplerConfig,
    reward_provider: RewardProvider,
    generator: torch.Generator | None = None,
) -> tuple[RolloutBatch, RewardOutput]:
    queries = [query_ids(x) for x in prompts]
    k = bundle.trunk_layers
    samples, stream = sample_batch_stream(bundle.policy, queries, sampler, generator, capture_layer=k)
    responses = [s.ids if s.ids else [EOS] for s in samples]
    ids, valid, resp_mask, Q = pack(queries, responses)
    trunk = None
    if k is not None:
        # The sampler already ran the frozen trunk over every fed position; only the
        # last response column is missing, and no prediction reads it.
        missing = ids.shape[1] - stream.shape[1]
        trunk = torch.cat([stream, stream.new_zeros(stream.shape[0], missing, stream.shape[2])], dim=1)
    logp_ref, _ = response_outputs(bundle.reference, ids, valid, Q, trunk, k, with_values=False)
    logp_old, values = response_outputs(bundle.policy, ids, valid, Q, trunk, k)
    ys = [decode([t for t in r if t != EOS]) for r in responses]
    try:
        out = reward_provider(list(prompts), ys)
    except Exception as exc:  # noqa: BLE001 - any provider failure aborts the run
        raise TrainingError(f"reward provider failed: {exc}") from exc
    if len(out.rewards) != len(prompts) or not all(math.isfinite(r) for r in out.rewards):
        raise TrainingError("reward provider returned missing or non-finite rewards")
    fmask = resp_mask.to(logp_old.dtype)
    rollouts = []
    for i, x in enumerate(prompts):
        n = int(resp_mask[i].sum())
        rollouts.append(Rollout(x, queries[i], responses[i], logp_old[i, :n].tolist(), logp_ref[i, :n].tolist(),
                                values[i, :n].tolist(), float(out.rewards[i])))
    batch = RolloutBatch(rollouts, ids, valid, resp_mask, Q, trunk, logp_old * fmask, logp_ref * fmask,
                         values * fmask, torch.tensor(out.rewards, dtype=logp_old.dtype))
    return batch, out


def compute_advantages(batch: RolloutBatch, beta: float, gamma: float, lam: float) -> None:
    """Shape rewards, run GAE, whiten advantages; fills the batch and its rollouts in place."""
    B, R = batch.resp_mask.shape
    shaped = torch.zeros((B, R), dtype=batch.logp_old.dtype)
    for i, ro in enumerate(batch.rollouts):
        n = len(ro.response)
        s = shape_rewards(batch.logp_old[i, :n], batch.logp_ref[i, :n], float(batch.rewards[i]), beta)
        shaped[i, :n] = s.to(shaped.dtype)
        ro.shaped = s.tolist()
    adv, ret = gae(batch.values_old, shaped, gamma, lam, batch.resp_mask)
    batch.returns = ret
    batch.advantages = whiten(adv, batch.resp_mask)
    for i, ro in enumerate(batch.rollouts):
        n = len(ro.response)
        ro.advantages = batch.advantages[i, :n].tolist()
        ro.returns = ret[i, :n].tolist()


def clipped_surrogate(logp_new: torch.Tensor, logp_old: torch.Tensor, advantages: torch.Tensor,
                      clip_eps: float) -> torch.Tensor:
    """Per-token ``min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)`` (to be maximized)."""
    ratio = torch.exp(logp_new - logp_old)
    return torch.minimum(ratio * advantages, torch.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages)


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    clip_fraction: float


def ppo_update(bundle: PolicyBundle, batch: RolloutBatch, cfg: PPOConfig, state: nx.AdamState) -> UpdateStats:
    """``cfg.ppo_epochs`` full-batch passes of the clipped objective plus the value loss."""
    trainable = [p for p in bundle.policy if p.trainable]
    mask = batch.resp_mask
    fmask = mask.to(batch.logp_old.dtype)
    n_tok = fmask.sum()
    pl_sum = vl_sum = cf_sum = 0.0
    for _ in range(cfg.ppo_epochs):
        nx.zero_grads(trainable)
        logp, values = response_outputs(bundle.policy, batch.ids, batch.valid, batch.Q, batch.trunk,
                                         bundle.trunk_layers)
        ratio = torch.exp(logp - batch.logp_old)
        bad = (~torch.isfinite(ratio) & mask).any(dim=1)
        if bool(bad.any()):
            raise TrainingError(f"non-finite probability ratio in rollout {int(bad.nonzero()[0])}")
        surrogate = clipped_surrogate(logp, batch.logp_old, batch.advantages, cfg.clip_eps)
        policy_loss = -(surrogate * fmask).sum() / n_tok
        value_loss = 0.5 * (((values - batch.returns) ** 2) * fmask).sum() / n_tok
        loss = policy_loss + cfg.vf_coef * value_loss
        if not torch.isfinite(loss):
            raise TrainingError("non-finite PPO loss")
        loss.backward()
        if cfg.max_grad_norm > 0:
            nx.clip_grad_norm(trainable, cfg.max_grad_norm)
        nx.adam_step(trainable, state)
        pl_sum += policy_loss.item()
        vl_sum += value_loss.item()
        cf_sum += float((((ratio - 1.0).abs() > cfg.clip_eps) & mask).sum() / n_tok)
    nx.zero_grads(trainable)
    n = cfg.ppo_epochs
    return UpdateStats(pl_sum / n, vl_sum / n, cf_sum / n)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class PPOResult:
    bundle: PolicyBundle
    metrics: list[dict] = field(default_factory=list)
    snapshots: dict[int, Path] = field(default_factory=dict)
    checkpoint: Path | None = None
    kl_state: KLControllerState | None = None


def train_ppo(
    bundle: PolicyBundle,
    prompts: Sequence[str],
    reward_provider: RewardProvider,
    cfg: PPOConfig,
    oracle_cfg: OracleConfig | None = None,
    out_dir: str | Path | None = None,
    on_snapshot: Callable[[int, PolicyBundle], None] | None = None,
) -> PPOResult:
    """Run ``cfg.steps`` PPO steps; writes ``ppo_metrics.csv``, snapshots and ``ppo.ckpt`` under ``out_dir``.

    ``mean_ps``/``mean_aes`` in the metrics are noise-free oracle scores of
    the sampled responses, whatever the reward provider.
    """
    if not prompts:
        raise ValueError("empty prompt pool")
    oracle_cfg = (oracle_cfg or OracleConfig()).noiseless()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    sampler = cfg.sampler()
    kl = cfg.kl_state()
    trainable = [p for p in bundle.policy if p.trainable]
    state = nx.AdamState(lr=cfg.lr)
    result = PPOResult(bundle, kl_state=kl)
    pool = list(prompts)
    order: list[int] = []

    metrics_file = None
    writer = None
    if out is not None:
        metrics_file = open(out / "ppo_metrics.csv", "w", newline="")
        writer = csv.DictWriter(metrics_file, fieldnames=METRIC_FIELDS)
        writer.writeheader()
    if on_snapshot is not None:
        on_snapshot(0, bundle)
    nx.track_grads(trainable, True)
    try:
        for step in range(cfg.steps):
            if len(order) < cfg.batch_size:
                perm = list(range(len(pool)))
                rng.shuffle(perm)
                order.extend(perm)
            chosen, order = order[: cfg.batch_size], order[cfg.batch_size:]
            xs = [pool[i] for i in chosen]
            batch, rew = generate_rollouts(bundle, xs, sampler, reward_provider, gen)
            if step == 0 and cfg.init_value_bias:
                with torch.no_grad():
                    shift = float(batch.rewards.mean())
                    bundle.policy[VALUE_B].add_(shift)
                    batch.values_old = (batch.values_old + shift) * batch.resp_mask.to(batch.values_old.dtype)
            compute_advantages(batch, kl.beta, cfg.gamma, cfg.lam)
            stats = ppo_update(bundle, batch, cfg, state)
            mean_kl = sum(ro.kl for ro in batch.rollouts) / len(batch.rollouts)
            beta_used = kl.beta
            update_kl_controller(kl, mean_kl)
            ys = [ro.y for ro in batch.rollouts]
            row = {
                "step": step,
                "mean_reward": float(batch.rewards.mean()),
                "mean_ps": sum(pick_oracle(x, y, 0, oracle_cfg) for x, y in zip(xs, ys)) / len(xs),
                "mean_aes": sum(aes_oracle(y, 0, oracle_cfg) for y in ys) / len(ys),
                "mean_kl": mean_kl,
                "beta": beta_used,
                "policy_loss": stats.policy_loss,
                "value_loss": stats.value_loss,
            }
            result.metrics.append(row)
            if writer is not None:
                writer.writerow(row)
            if step % 50 == 0 or step == cfg.steps - 1:
                log.info("ppo step %d reward %.3f ps %.3f aes %.3f kl %.3f beta %.4f", step, row["mean_reward"],
                         row["mean_ps"], row["mean_aes"], mean_kl, beta_used)
            done = step + 1
            if cfg.snapshot_every and done % cfg.snapshot_every == 0:
                if out is not None:
                    result.snapshots[done] = save_checkpoint(bundle.policy, out / f"ppo_step{done}.ckpt", "ppo",
                                                             _ckpt_extra(done, kl))
                if on_snapshot is not None:
                    on_snapshot(done, bundle)
    finally:
        nx.zero_grads(trainable)
        nx.track_grads(trainable, False)
        if metrics_file is not None:
            metrics_file.close()
    if out is not None:
        result.checkpoint = save_checkpoint(bundle.policy, out / "ppo.ckpt", "ppo", _ckpt_extra(cfg.steps, kl))
    return result


def _ckpt_extra(step: int, kl: KLControllerState) -> dict:
    return {"step": step, "beta": kl.beta, "template": TEMPLATE, "template_version": TEMPLATE_VERSION}
