"""Supervised fine-tuning: instruction template, masked batches, LR schedule, training loop."""

from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from . import numerics as nx
from .data.pipeline import PromptPair
from .errors import TrainingError
from .lm import model as lm_model
from .lm.checkpoint import save_checkpoint
from .lm.model import ModelConfig, TransformerParams
from .lm.tokenizer import BOS, EOS, PAD, SEP, encode

log = logging.getLogger(__name__)

TEMPLATE = "Instruction: Give a simple description of the image to generate a drawing prompt.\nInput: {x}\nOutput: "
TEMPLATE_VERSION = 1


def render_template(x: str) -> str:
    return TEMPLATE.format(x=x)


def query_ids(x: str) -> list[int]:
    """BOS followed by the rendered template: the prompt the policy continues."""
    return [BOS, *encode(render_template(x))]


@dataclass
class SFTConfig:
    epochs: int = 4
    weight_decay: float = 0.0
    lr: float = 1e-3
    warmup_steps: int = 10
    total_steps: int | None = None  # None: epochs * ceil(N / batch_size)
    batch_size: int = 16
    max_len: int = 384
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.max_len <= 0:
            raise ValueError("epochs, batch_size and max_len must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")
        if self.total_steps is not None and self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps exceeds total_steps")


@dataclass
class SFTBatch:
    tokens: torch.Tensor  # [B, T] right-padded with PAD
    loss_mask: torch.Tensor  # [B, T] True where the token belongs to y or is the closing EOS
    lengths: torch.Tensor  # [B]
    skipped: int = 0

    def __len__(self) -> int:
        return self.tokens.shape[0]


def encode_example(pair: PromptPair, max_len: int) -> tuple[list[int], int] | None:
    """Token ids and prefix length, or ``None`` when the template alone fills ``max_len``."""
    prefix = query_ids(pair.low)
    target = [*encode(pair.high), EOS]
    if len(prefix) >= max_len:
        return None
    if len(prefix) + len(target) > max_len:
        # right-truncate y; the EOS goes with it
        target = target[: max_len - len(prefix)]
    return prefix + target, len(prefix)


def build_batch(pairs: Sequence[PromptPair], max_len: int = 384) -> SFTBatch:
    rows, prefixes, skipped = [], [], 0
    for p in pairs:
        enc = encode_example(p, max_len)
        if enc is None:
            skipped += 1
            continue
        rows.append(enc[0])
        prefixes.append(enc[1])
    if not rows:
        return SFTBatch(torch.zeros(0, 0, dtype=torch.long), torch.zeros(0, 0, dtype=torch.bool),
                        torch.zeros(0, dtype=torch.long), skipped)
    T = max(len(r) for r in rows)
    tokens = torch.full((len(rows), T), PAD, dtype=torch.long)
    mask = torch.zeros((len(rows), T), dtype=torch.bool)
    for i, (r, n) in enumerate(zip(rows, prefixes)):
        tokens[i, : len(r)] = torch.tensor(r)
        mask[i, n: len(r)] = True
    lengths = torch.tensor([len(r) for r in rows])
    return SFTBatch(tokens, mask, lengths, skipped)


def sft_loss(logits: torch.Tensor, batch: SFTBatch) -> torch.Tensor:
    """Mean NLL of y tokens (and EOS) given everything before them.

    ``logits`` are the model outputs for ``batch.tokens`` ([B, T, V]).
    """
    return nx.cross_entropy(logits[:, :-1], batch.tokens[:, 1:], batch.loss_mask[:, 1:])


def batch_logits(params: TransformerParams, batch: SFTBatch) -> torch.Tensor:
    valid = torch.arange(batch.tokens.shape[1]).unsqueeze(0) < batch.lengths.unsqueeze(1)
    return lm_model.forward(params, batch.tokens, valid)


def lr_at(step: int, peak: float, warmup: int, total: int) -> float:
    """Linear warmup to ``peak`` then cosine decay to zero at ``total``."""
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if step >= total:
        return 0.0
    span = max(total - warmup, 1)
    progress = (step - warmup) / span
    return 0.5 * peak * (1.0 + math.cos(math.pi * progress))


def schedule(cfg: SFTConfig, n_examples: int):
    total = total_steps(cfg, n_examples)
    return lambda step: lr_at(step, cfg.lr, min(cfg.warmup_steps, total), total)


def total_steps(cfg: SFTConfig, n_examples: int) -> int:
    if cfg.total_steps is not None:
        return cfg.total_steps
    return cfg.epochs * math.ceil(n_examples / cfg.batch_size)


@dataclass
class SFTResult:
    params: TransformerParams
    history: list[tuple[int, float, float]] = field(default_factory=list)  # (step, lr, loss)
    checkpoint: Path | None = None
    curve: Path | None = None


def train_sft(
    pairs: Sequence[PromptPair],
    cfg: SFTConfig,
    model_cfg: ModelConfig | None = None,
    init: TransformerParams | None = None,
    out_dir: str | Path | None = None,
) -> SFTResult:
    """Fit the rewriter on (low -> high) pairs; returns the reference policy.

    Runs ``total_steps`` optimizer steps over seeded per-epoch permutations.
    When ``out_dir`` is given, writes ``sft.ckpt`` and ``sft_loss.csv``.
    """
    if not pairs:
        raise ValueError("SFT needs a non-empty dataset")
    if init is None:
        if model_cfg is None:
            raise ValueError("pass either model_cfg or init")
        params = TransformerParams.init(model_cfg, seed=cfg.seed)
    else:
        params = init.clone()
    max_len = min(cfg.max_len, params.config.context)
    encoded = [p for p in pairs if encode_example(p, max_len) is not None]
    if not encoded:
        raise ValueError("every example is longer than max_len")
    n_steps = total_steps(cfg, len(encoded))
    state = nx.AdamState(lr=schedule(cfg, len(encoded)), weight_decay=cfg.weight_decay)
    rng = random.Random(cfg.seed)
    history: list[tuple[int, float, float]] = []
    order: list[int] = []
    trainable = [p for p in params if p.trainable]
    nx.track_grads(trainable, True)

    for step in range(n_steps):
        if len(order) < cfg.batch_size:
            perm = list(range(len(encoded)))
            rng.shuffle(perm)
            order.extend(perm)
        idx, order = order[: cfg.batch_size], order[cfg.batch_size:]
        batch = build_batch([encoded[i] for i in idx], max_len)
        nx.zero_grads(trainable)
        loss = sft_loss(batch_logits(params, batch), batch)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite SFT loss at step {step}")
        loss.backward()
        lr = nx.adam_step(trainable, state)
        history.append((step, lr, value))
        if step % 50 == 0 or step == n_steps - 1:
            log.info("sft step %d/%d lr %.2e loss %.4f", step, n_steps, lr, value)
    nx.zero_grads(trainable)
    nx.track_grads(trainable, False)

    result = SFTResult(params, history)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint = save_checkpoint(params, out / "sft.ckpt", "sft",
                                            {"template": TEMPLATE, "template_version": TEMPLATE_VERSION})
        result.curve = write_curve(out / "sft_loss.csv", history)
    return result


def write_curve(path: Path, history: Sequence[tuple[int, float, float]]) -> Path:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in history:
            w.writerow([step, repr(lr), repr(loss)])
    return path


@torch.no_grad()
def corpus_loss(params: TransformerParams, pairs: Sequence[PromptPair], max_len: int = 384, batch_size: int = 32) -> float:
    """Token-weighted mean NLL over a whole corpus."""
    max_len = min(max_len, params.config.context)
    total, count = 0.0, 0
    for start in range(0, len(pairs), batch_size):
        batch = build_batch(pairs[start:start + batch_size], max_len)
        if not len(batch):
            continue
        n = int(batch.loss_mask[:, 1:].sum())
        total += float(sft_loss(batch_logits(params, batch), batch)) * n
        count += n
    return total / count


def toy_batch(pairs: Sequence[PromptPair]) -> SFTBatch:
    """Batch with a bare ``BOS x SEP`` prefix instead of the template.

    Same loss masking as ``build_batch``; sized for finite-difference
    sweeps, where the template would dominate the cost.
    """
    rows = [([BOS, *encode(p.low), SEP], [*encode(p.high), EOS]) for p in pairs]
    T = max(len(a) + len(b) for a, b in rows)
    tokens = torch.full((len(rows), T), PAD, dtype=torch.long)
    mask = torch.zeros((len(rows), T), dtype=torch.bool)
    for i, (a, b) in enumerate(rows):
        tokens[i, : len(a) + len(b)] = torch.tensor(a + b)
        mask[i, len(a): len(a) + len(b)] = True
    return SFTBatch(tokens, mask, torch.tensor([len(a) + len(b) for a, b in rows]))


TOY_PAIRS = (PromptPair("cat", "a cat, 8k", "generation"), PromptPair("dog", "dog", "generation"))


def gradcheck_sft(n_layers: int = 2, d_model: int = 32, n_heads: int = 2, seed: int = 0,
                  pairs: Sequence[PromptPair] = TOY_PAIRS, eps: float = 1e-4, chunk: int = 256) -> nx.GradCheckReport:
    """Finite-difference check of every parameter of a small f64 model against the SFT loss."""
    batch = toy_batch(pairs)
    mc = ModelConfig(n_layers=n_layers, d_model=d_model, n_heads=n_heads, context=batch.tokens.shape[1])
    params = TransformerParams.init(mc, seed=seed, dtype=torch.float64)
    return nx.grad_check(lambda: sft_loss(batch_logits(params, batch), batch), params.parameters(), eps, chunk)
