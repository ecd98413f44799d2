"""Reward models: a scalar head on the LM backbone, regressed onto seed-averaged oracle scores."""

from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch

from . import numerics as nx
from .data.pipeline import PromptPair, write_jsonl
from .errors import ContextOverflowError, TrainingError
from .lm import model as lm_model
from .lm.checkpoint import load_checkpoint, save_checkpoint
from .lm.model import TransformerParams
from .lm.tokenizer import BOS, EOS, PAD, SEP, encode
from .oracles import OracleConfig, SeedSet, aes_oracle, avg_over_seeds, pick_oracle

log = logging.getLogger(__name__)

KINDS = ("ps", "aes")
HEAD_W = "rm.w"
HEAD_B = "rm.b"


@dataclass
class RMDatum:
    x: str
    y: str
    target: float
    kind: str

    def to_json(self) -> dict:
        return {"x": self.x, "y": self.y, "kind": self.kind, "target": self.target}


@dataclass
class RewardModel:
    """Backbone plus linear head read at the last non-pad position.

    ``offset``/``scale`` fix the head's output units so an untrained head
    starts at the training-target mean.
    """

    params: TransformerParams
    kind: str
    offset: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if HEAD_W not in self.params:
            d = self.params.config.d_model
            dtype = self.params["wte"].dtype
            self.params.add(HEAD_W, torch.zeros(d, dtype=dtype))
            self.params.add(HEAD_B, torch.zeros(1, dtype=dtype))

    @classmethod
    def from_backbone(cls, backbone: TransformerParams, kind: str, offset: float = 0.0, scale: float = 1.0) -> "RewardModel":
        params = backbone.clone()
        for name in [n for n in params.names() if not n.startswith(("wte", "wpe", "h.", "ln_f."))]:
            params._params.pop(name)
        return cls(params, kind, offset, scale)

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(self.params, path, "rm", {"kind": self.kind, "offset": self.offset, "scale": self.scale})

    @classmethod
    def load(cls, path: str | Path) -> "RewardModel":
        ck = load_checkpoint(path)
        if ck.stage != "rm":
            raise ValueError(f"{path} is a {ck.stage!r} checkpoint, not a reward model")
        return cls(ck.params, ck.extra["kind"], float(ck.extra["offset"]), float(ck.extra["scale"]))


def encode_rm_input(kind: str, x: str, y: str) -> list[int]:
    """``BOS x SEP y EOS`` for ps, ``BOS y EOS`` for aes (x is ignored)."""
    if kind == "ps":
        return [BOS, *encode(x), SEP, *encode(y), EOS]
    return [BOS, *encode(y), EOS]


def clip_to_context(kind: str, x: str, y: str, context: int) -> str:
    """``y`` cut (at a byte boundary) so that the encoded reward-model input fits ``context``."""
    excess = len(encode_rm_input(kind, x, y)) - context
    if excess <= 0:
        return y
    raw = y.encode("utf-8")
    return raw[: max(len(raw) - excess, 0)].decode("utf-8", errors="ignore")


def rm_predict(model: RewardModel, xs: Sequence[str], ys: Sequence[str]) -> torch.Tensor:
    """Scores for a batch of (x, y) pairs; differentiable w.r.t. the model parameters."""
    seqs = [encode_rm_input(model.kind, x, y) for x, y in zip(xs, ys)]
    C = model.params.config.context
    for s in seqs:
        if len(s) > C:
            raise ContextOverflowError(f"reward-model input of {len(s)} tokens exceeds context {C}")
    # Left padding puts every final token in the last column, so the top block
    # only needs that one query row.
    T = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), T), PAD, dtype=torch.long)
    valid = torch.zeros((len(seqs), T), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, T - len(s):] = torch.tensor(s)
        valid[i, T - len(s):] = True
    h = lm_model.hidden_states(model.params, ids, valid, query_from=T - 1)
    last = lm_model.final_norm(model.params, h[:, -1])
    raw = last @ model.params[HEAD_W] + model.params[HEAD_B]
    return model.offset + model.scale * raw


@torch.no_grad()
def rm_scores(model: RewardModel, xs: Sequence[str], ys: Sequence[str], batch_size: int = 64) -> torch.Tensor:
    out = [rm_predict(model, xs[i:i + batch_size], ys[i:i + batch_size]) for i in range(0, len(xs), batch_size)]
    return torch.cat(out) if out else torch.zeros(0)


def rm_forward(model: RewardModel, x: str, y: str) -> float:
    return float(rm_scores(model, [x], [y])[0])


def rm_loss(preds: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean squared error, minimized."""
    if preds.shape != targets.shape:
        raise ValueError(f"shape mismatch {tuple(preds.shape)} vs {tuple(targets.shape)}")
    if preds.numel() == 0:
        raise ValueError("rm_loss of an empty batch")
    diff = preds - targets
    return (diff * diff).mean()


def make_rm_targets(pairs: Sequence[PromptPair], kind: str, oracle_cfg: OracleConfig, seeds: SeedSet) -> list[RMDatum]:
    """One datum per pair; the target is the oracle averaged over the 8 seeds."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    out = []
    for p in pairs:
        if kind == "ps":
            target = avg_over_seeds(pick_oracle, (p.low, p.high), seeds, oracle_cfg)
            out.append(RMDatum(p.low, p.high, target, kind))
        else:
            target = avg_over_seeds(aes_oracle, (p.high,), seeds, oracle_cfg)
            out.append(RMDatum("", p.high, target, kind))
    return out


def augment_pairs(pairs: Sequence[PromptPair], lexicon, seed: int = 0) -> list[PromptPair]:
    """Widen reward-model coverage beyond the curated pairs.

    Adds, per source pair: a mismatched pair (another pair's high), the
    identity rewrite (low as high), and a copy of the high with a random
    subset of its modifiers removed.  Targets then span low fidelity and low
    modifier counts, which curated pairs alone never show.
    """
    rng = random.Random(seed)
    out = list(pairs)
    highs = [p.high for p in pairs]
    for p in pairs:
        other = rng.choice(highs)
        if other != p.high:
            out.append(PromptPair(p.low, other, p.source))
        out.append(PromptPair(p.low, p.low, p.source))
        segs = [s.strip() for s in p.high.split(",")]
        kept = [s for s in segs if not lexicon.is_modifier(s) or rng.random() < 0.5]
        if kept and ", ".join(kept) != p.high:
            out.append(PromptPair(p.low, ", ".join(kept), p.source))
    return out


@dataclass
class RMConfig:
    lr: float = 1e-4
    batch_size: int = 32
    steps: int = 600
    warmup_steps: int = 20
    weight_decay: float = 0.0
    val_fraction: float = 0.2
    seed: int = 0


@dataclass
class RMResult:
    model: RewardModel
    history: list[tuple[int, float, float]] = field(default_factory=list)  # (step, lr, train mse)
    val_mse: float = float("nan")
    baseline_mse: float = float("nan")
    pearson: float = float("nan")
    checkpoint: Path | None = None


def pearson(a: Sequence[float], b: Sequence[float]) -> float:
    ta = torch.tensor(a, dtype=torch.float64)
    tb = torch.tensor(b, dtype=torch.float64)
    ta, tb = ta - ta.mean(), tb - tb.mean()
    denom = math.sqrt(float((ta * ta).sum()) * float((tb * tb).sum()))
    return float((ta * tb).sum()) / denom if denom > 0 else 0.0


def train_rm(
    data: Sequence[RMDatum],
    kind: str,
    cfg: RMConfig,
    backbone: TransformerParams,
    out_dir: str | Path | None = None,
    schedule: Callable[[int], float] | None = None,
) -> RMResult:
    """Regress a scalar head (and the backbone) onto the data targets by MSE.

    A seeded ``val_fraction`` of the data is held out; the result reports its
    MSE next to the predict-the-training-mean baseline.
    """
    from .sft import lr_at

    data = [d for d in data if d.kind == kind]
    if len(data) < 2:
        raise ValueError("reward-model training needs at least two examples")
    rng = random.Random(cfg.seed)
    idx = list(range(len(data)))
    rng.shuffle(idx)
    n_val = int(round(cfg.val_fraction * len(data)))
    val = [data[i] for i in idx[:n_val]]
    train = [data[i] for i in idx[n_val:]]
    targets = [d.target for d in train]
    mean = sum(targets) / len(targets)
    std = math.sqrt(sum((t - mean) ** 2 for t in targets) / len(targets)) or 1.0

    model = RewardModel.from_backbone(backbone, kind, offset=mean, scale=std)
    params = [p for p in model.params if p.trainable]
    lr_fn = schedule or (lambda s: lr_at(s, cfg.lr, min(cfg.warmup_steps, cfg.steps), cfg.steps))
    state = nx.AdamState(lr=lr_fn, weight_decay=cfg.weight_decay)
    nx.track_grads(params, True)
    history = []
    order: list[int] = []
    for step in range(cfg.steps):
        if len(order) < cfg.batch_size:
            perm = list(range(len(train)))
            rng.shuffle(perm)
            order.extend(perm)
        chosen, order = order[: cfg.batch_size], order[cfg.batch_size:]
        batch = [train[i] for i in chosen]
        nx.zero_grads(params)
        preds = rm_predict(model, [d.x for d in batch], [d.y for d in batch])
        loss = rm_loss(preds, torch.tensor([d.target for d in batch], dtype=preds.dtype))
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite reward-model loss at step {step}")
        loss.backward()
        lr = nx.adam_step(params, state)
        history.append((step, lr, value))
        if step % 50 == 0 or step == cfg.steps - 1:
            log.info("rm[%s] step %d/%d mse %.4f", kind, step, cfg.steps, value)
    nx.zero_grads(params)
    nx.track_grads(params, False)

    result = RMResult(model, history)
    if val:
        preds = rm_scores(model, [d.x for d in val], [d.y for d in val]).tolist()
        tv = [d.target for d in val]
        result.val_mse = sum((p - t) ** 2 for p, t in zip(preds, tv)) / len(tv)
        result.baseline_mse = sum((mean - t) ** 2 for t in tv) / len(tv)
        result.pearson = pearson(preds, tv)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint = model.save(out / f"rm_{kind}.ckpt")
        with open(out / f"rm_{kind}_mse.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "lr", "mse"])
            w.writerows((s, repr(l), repr(v)) for s, l, v in history)
        write_jsonl(out / f"rm_{kind}_targets.jsonl", (d.to_json() for d in data))
    return result


# ---------------------------------------------------------------------------
# Composite reward
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CompositeConfig:
    alpha: float = 0.7
    normalize: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


def composite_reward(ps: float, aes: float, cfg: CompositeConfig = CompositeConfig()) -> float:
    return cfg.alpha * ps + (1.0 - cfg.alpha) * aes


@dataclass
class ZNormalizer:
    """Optional per-component standardization fitted on a reference batch."""

    ps_mean: float
    ps_std: float
    aes_mean: float
    aes_std: float

    @classmethod
    def fit(cls, ps: Sequence[float], aes: Sequence[float]) -> "ZNormalizer":
        def stats(v):
            m = sum(v) / len(v)
            s = math.sqrt(sum((x - m) ** 2 for x in v) / len(v)) or 1.0
            return m, s

        return cls(*stats(ps), *stats(aes))

    def __call__(self, ps: float, aes: float) -> tuple[float, float]:
        return (ps - self.ps_mean) / self.ps_std, (aes - self.aes_mean) / self.aes_std
