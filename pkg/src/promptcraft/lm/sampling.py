"""Autoregressive sampling with temperature and nucleus (top-p) truncation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ContextOverflowError
from .. import numerics as nx
from .model import TransformerParams, model_forward_cached
from .tokenizer import EOS, PAD


@dataclass
class SamplerConfig:
    temperature: float = 1.0
    top_p: float = 0.9
    max_new_tokens: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


@dataclass
class Sample:
    """Generated ids (EOS included when emitted) and their base-model log-probs."""

    ids: list[int]
    logprobs: list[float]

    @property
    def finished(self) -> bool:
        return bool(self.ids) and self.ids[-1] == EOS


def _pick(logits: torch.Tensor, cfg: SamplerConfig, gen: torch.Generator) -> torch.Tensor:
    if cfg.temperature == 0:
        return logits.argmax(-1)
    probs = nx.softmax(logits.double() / cfg.temperature, -1)
    order = None
    if cfg.top_p < 1.0:
        # numpy's argsort is several times faster than torch.sort for small rows
        order = torch.from_numpy(np.argsort(-probs.numpy(), axis=-1))
        probs = probs.gather(-1, order)
        cum = probs.cumsum(-1)
        # keep the smallest prefix whose mass reaches top_p (always at least one token)
        probs = probs.masked_fill((cum - probs) >= cfg.top_p, 0.0)
    # inverse-CDF draw; zero-mass entries have a flat CDF and are never chosen
    cdf = probs.cumsum(-1)
    u = torch.rand(probs.shape[0], 1, generator=gen, dtype=cdf.dtype) * cdf[:, -1:]
    idx = torch.searchsorted(cdf, u, right=True).clamp_max(probs.shape[-1] - 1)
    return (idx if order is None else order.gather(-1, idx)).squeeze(-1)


def sample_batch(
    params: TransformerParams,
    prompts: list[list[int]],
    cfg: SamplerConfig,
    generator: torch.Generator | None = None,
) -> list[Sample]:
    """Sample continuations for several prompts at once.

    Prompts are left-padded so every row decodes in lockstep; each row stops
    at EOS, at ``max_new_tokens``, or when it reaches the context length.
    """
    if not prompts:
        return []
    return sample_batch_stream(params, prompts, cfg, generator)[0]


@torch.no_grad()
def sample_batch_stream(
    params: TransformerParams,
    prompts: list[list[int]],
    cfg: SamplerConfig,
    generator: torch.Generator | None = None,
    capture_layer: int | None = None,
) -> tuple[list[Sample], torch.Tensor | None]:
    """``sample_batch`` that also returns the residual stream entering block ``capture_layer``.

    The stream is [B, Q + n - 1, d] for left-padded prompts of width Q and n
    decoding steps: it covers every position fed to the model, which is the
    packed prompt-plus-response layout minus its final column.
    """
    if not prompts:
        return [], None
    C = params.config.context
    for p in prompts:
        if not p:
            raise ValueError("prompt must be non-empty")
        if len(p) >= C:
            raise ContextOverflowError(f"prompt of length {len(p)} leaves no room in context {C}")
    gen = generator if generator is not None else torch.Generator().manual_seed(cfg.seed)
    B = len(prompts)
    Q = max(len(p) for p in prompts)
    ids = torch.full((B, Q), PAD, dtype=torch.long)
    valid = torch.zeros((B, Q), dtype=torch.bool)
    for i, p in enumerate(prompts):
        ids[i, Q - len(p):] = torch.tensor(p, dtype=torch.long)
        valid[i, Q - len(p):] = True
    lengths = torch.tensor([len(p) for p in prompts])
    limits = torch.clamp(C - lengths, max=cfg.max_new_tokens)
    positions = (valid.long().cumsum(-1) - 1).clamp_min(0)

    caches = [{"capacity": Q + int(limits.max())} for _ in range(params.config.n_layers)]
    captured: list[torch.Tensor] = []
    logits = model_forward_cached(params, ids, positions, valid, caches, capture_layer, captured)
    max_new = int(limits.max())
    toks = torch.full((B, max_new), PAD, dtype=torch.long)
    lps = torch.zeros((B, max_new), dtype=logits.dtype)
    n_out = torch.zeros(B, dtype=torch.long)
    done = torch.zeros(B, dtype=torch.bool)
    step = 0
    while True:
        tok = _pick(logits, cfg, gen)
        live = ~done
        toks[live, step] = tok[live]
        lps[live, step] = nx.token_log_probs(logits, tok)[live]
        n_out += live.long()
        done = done | (tok == EOS) | (n_out >= limits)
        step += 1
        if bool(done.all()):
            break
        feed = torch.where(done, torch.full_like(tok, PAD), tok).unsqueeze(1)
        valid = torch.cat([valid, (~done).unsqueeze(1)], dim=1)
        pos = (lengths + step - 1).clamp(max=C - 1).unsqueeze(1)
        logits = model_forward_cached(params, feed, pos, valid, caches, capture_layer, captured)
    counts = n_out.tolist()
    out_ids = [row[:n] for row, n in zip(toks.tolist(), counts)]
    out_lp = [row[:n] for row, n in zip(lps.tolist(), counts)]
    stream = torch.cat(captured, dim=1) if captured else None
    return [Sample(i, l) for i, l in zip(out_ids, out_lp)], stream


def sample(params: TransformerParams, prompt_ids: list[int], cfg: SamplerConfig) -> Sample:
    return sample_batch(params, [list(prompt_ids)], cfg)[0]


def greedy(params: TransformerParams, prompts: list[list[int]], max_new_tokens: int, batch_size: int = 64) -> list[Sample]:
    """Temperature-0 decoding in fixed-size chunks."""
    cfg = SamplerConfig(temperature=0.0, top_p=1.0, max_new_tokens=max_new_tokens)
    out: list[Sample] = []
    for start in range(0, len(prompts), batch_size):
        out.extend(sample_batch(params, prompts[start:start + batch_size], cfg))
    return out
