"""Decoder-only transformer over named parameters.

Pre-norm blocks, learned positions, and an LM head tied to the token
embedding.  Every function is pure in the parameters: the model is a
``TransformerParams`` (an ordered name -> Parameter map plus its config)
and the forward pass is a set of functions over it.

Parameter order (also the checkpoint payload order)::

    wte, wpe,
    h.{i}.ln1.g, h.{i}.ln1.b,
    h.{i}.attn.wq, h.{i}.attn.bq, h.{i}.attn.wk, h.{i}.attn.bk,
    h.{i}.attn.wv, h.{i}.attn.bv, h.{i}.attn.wo, h.{i}.attn.bo,
    h.{i}.ln2.g, h.{i}.ln2.b,
    h.{i}.mlp.w1, h.{i}.mlp.b1, h.{i}.mlp.w2, h.{i}.mlp.b2,   for i in 0..L-1
    ln_f.g, ln_f.b,
    <head parameters appended by callers, e.g. value.w / value.b>
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Iterator

import torch

from .. import numerics as nx
from ..errors import ContextOverflowError, DimensionError
from ..numerics import Parameter
from .tokenizer import VOCAB_SIZE

NEG_INF = -1e9

_BLOCK_FIELDS = (
    ("ln1.g", "d"), ("ln1.b", "d"),
    ("attn.wq", "dd"), ("attn.bq", "d"), ("attn.wk", "dd"), ("attn.bk", "d"),
    ("attn.wv", "dd"), ("attn.bv", "d"), ("attn.wo", "dd"), ("attn.bo", "d"),
    ("ln2.g", "d"), ("ln2.b", "d"),
    ("mlp.w1", "d4d"), ("mlp.b1", "4d"), ("mlp.w2", "4dd"), ("mlp.b2", "d"),
)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    context: int = 256
    vocab: int = VOCAB_SIZE

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "context", "vocab"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.context < 2:
            raise ValueError("context must be at least 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(d[k]) for k in ("n_layers", "d_model", "n_heads", "context", "vocab")})


def param_shapes(config: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    d = config.d_model
    dims = {"d": (d,), "dd": (d, d), "d4d": (d, 4 * d), "4d": (4 * d,), "4dd": (4 * d, d)}
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["wte"] = (config.vocab, d)
    shapes["wpe"] = (config.context, d)
    for i in range(config.n_layers):
        for field, kind in _BLOCK_FIELDS:
            shapes[f"h.{i}.{field}"] = dims[kind]
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    return shapes


class TransformerParams:
    """Ordered collection of named parameters plus the config that shaped them."""

    def __init__(self, config: ModelConfig, params: "OrderedDict[str, Parameter]"):
        self.config = config
        self._params = params
        expected = param_shapes(config)
        for name, shape in expected.items():
            if name not in params:
                raise DimensionError(f"missing parameter {name}")
            if tuple(params[name].tensor.shape) != shape:
                raise DimensionError(f"{name} has shape {tuple(params[name].tensor.shape)}, expected {shape}")

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype: torch.dtype | None = None) -> "TransformerParams":
        dtype = dtype or nx.get_dtype()
        gen = torch.Generator().manual_seed(seed)
        out_std = 0.02 / math.sqrt(2 * config.n_layers)
        params: OrderedDict[str, Parameter] = OrderedDict()
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                t = torch.ones(shape, dtype=dtype)
            elif len(shape) == 1:
                t = torch.zeros(shape, dtype=dtype)
            else:
                std = out_std if leaf in ("wo", "w2") else 0.02
                t = torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype) * std
            params[name] = Parameter(name, t)
        return cls(config, params)

    # mapping-ish access -------------------------------------------------
    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def parameter(self, name: str) -> Parameter:
        return self._params[name]

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def names(self) -> list[str]:
        return list(self._params)

    def add(self, name: str, tensor: torch.Tensor, trainable: bool = True) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name}")
        p = Parameter(name, tensor, trainable)
        self._params[name] = p
        return p

    def block_names(self, layer: int) -> list[str]:
        return [f"h.{layer}.{field}" for field, _ in _BLOCK_FIELDS]

    def clone(self) -> "TransformerParams":
        params = OrderedDict(
            (n, Parameter(n, p.tensor.detach().clone(), p.trainable)) for n, p in self._params.items()
        )
        return TransformerParams(self.config, params)

    def to(self, dtype: torch.dtype) -> "TransformerParams":
        params = OrderedDict(
            (n, Parameter(n, p.tensor.detach().to(dtype).clone(), p.trainable)) for n, p in self._params.items()
        )
        return TransformerParams(self.config, params)

    def set_trainable(self, flag: bool) -> None:
        for p in self._params.values():
            p.trainable = flag

    def num_parameters(self) -> int:
        return sum(p.tensor.numel() for p in self._params.values())


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def layout(ids: torch.Tensor, valid: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Positions and validity for a (possibly padded) [B, T] id matrix.

    Positions count valid tokens only, so left padding shifts nothing.
    """
    if valid is None:
        valid = torch.ones_like(ids, dtype=torch.bool)
    positions = (valid.long().cumsum(-1) - 1).clamp_min(0)
    return positions, valid


def attention_bias(valid_keys: torch.Tensor, n_queries: int, dtype: torch.dtype) -> torch.Tensor:
    """Additive [B, 1, Tq, Tk] mask: causal over the last ``n_queries`` columns, pads hidden.

    A query may always see itself, which keeps rows made entirely of padding finite.
    """
    B, Tk = valid_keys.shape
    if n_queries == 1:
        bias = torch.zeros(B, 1, 1, Tk, dtype=dtype).masked_fill_(~valid_keys[:, None, None, :], NEG_INF)
        bias[..., -1] = 0.0
        return bias
    q_cols = torch.arange(Tk - n_queries, Tk).unsqueeze(1)
    k_cols = torch.arange(Tk).unsqueeze(0)
    allowed = (k_cols <= q_cols).unsqueeze(0) & valid_keys.unsqueeze(1)
    allowed = allowed | (k_cols == q_cols).unsqueeze(0)
    bias = torch.zeros(B, n_queries, Tk, dtype=dtype)
    bias.masked_fill_(~allowed, NEG_INF)
    return bias.unsqueeze(1)


def embed(params: TransformerParams, ids: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    if int(positions.max()) >= params.config.context:
        raise ContextOverflowError(
            f"position {int(positions.max())} exceeds context length {params.config.context}"
        )
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= params.config.vocab):
        raise DimensionError("token id out of vocabulary")
    return params["wte"][ids] + params["wpe"][positions]


def _cache_append(cache: dict, k: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Write new keys/values into a preallocated buffer and return views of the filled prefix.

    ``cache["capacity"]`` (optional) sizes the buffer; without it the buffer grows by concatenation.
    """
    n = cache.get("len", 0)
    T = k.shape[2]
    if "k" not in cache or n + T > cache["k"].shape[2]:
        cap = max(cache.get("capacity", 0), n + T)
        kb = k.new_empty(k.shape[0], k.shape[1], cap, k.shape[3])
        vb = torch.empty_like(kb)
        if n:
            kb[:, :, :n] = cache["k"][:, :, :n]
            vb[:, :, :n] = cache["v"][:, :, :n]
        cache["k"], cache["v"] = kb, vb
    cache["k"][:, :, n:n + T] = k
    cache["v"][:, :, n:n + T] = v
    cache["len"] = n + T
    return cache["k"][:, :, :n + T], cache["v"][:, :, :n + T]


def block(
    params: TransformerParams,
    layer: int,
    h: torch.Tensor,
    bias: torch.Tensor,
    cache: dict | None = None,
    query_from: int = 0,
) -> torch.Tensor:
    """One pre-norm block.  With ``cache`` the new keys/values are appended to it.

    With ``query_from > 0`` only rows from that index on are computed (keys and
    values still cover every row); the result has ``T - query_from`` rows and
    ``bias`` holds just those query rows.
    """
    cfg = params.config
    B, T, d = h.shape
    H = cfg.n_heads
    hd = d // H
    p = f"h.{layer}."
    x = nx.layer_norm(h, params[p + "ln1.g"], params[p + "ln1.b"])
    k = nx.linear(x, params[p + "attn.wk"], params[p + "attn.bk"]).view(B, T, H, hd).transpose(1, 2)
    v = nx.linear(x, params[p + "attn.wv"], params[p + "attn.bv"]).view(B, T, H, hd).transpose(1, 2)
    if query_from:
        h, x = h[:, query_from:], x[:, query_from:]
        T = T - query_from
    q = nx.linear(x, params[p + "attn.wq"], params[p + "attn.bq"]).view(B, T, H, hd).transpose(1, 2)
    if cache is not None:
        k, v = _cache_append(cache, k, v)
    y = nx.attention(q, k, v, bias).transpose(1, 2).reshape(B, T, d)
    h = h + nx.linear(y, params[p + "attn.wo"], params[p + "attn.bo"])
    x = nx.layer_norm(h, params[p + "ln2.g"], params[p + "ln2.b"])
    x = nx.gelu(nx.linear(x, params[p + "mlp.w1"], params[p + "mlp.b1"]))
    return h + nx.linear(x, params[p + "mlp.w2"], params[p + "mlp.b2"])


def _batched(ids: torch.Tensor, valid: torch.Tensor | None) -> tuple[torch.Tensor, torch.Tensor | None, bool]:
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.dim() == 1:
        return ids.unsqueeze(0), (None if valid is None else valid.unsqueeze(0)), True
    return ids, valid, False


def hidden_states(
    params: TransformerParams,
    ids,
    valid: torch.Tensor | None = None,
    start_layer: int = 0,
    stop_layer: int | None = None,
    h: torch.Tensor | None = None,
    query_from: int = 0,
) -> torch.Tensor:
    """Residual stream after blocks ``[start_layer, stop_layer)``.

    With ``start_layer > 0`` the caller passes ``h``, the stream entering that
    block (e.g. cached output of a frozen trunk).  Returns [B, T, d], or
    [B, T - query_from, d] when the last block is restricted to later rows.
    """
    ids, valid, _ = _batched(ids, valid)
    if ids.shape[1] == 0:
        raise DimensionError("empty token sequence")
    if ids.shape[1] > params.config.context and valid is None:
        raise ContextOverflowError(f"sequence length {ids.shape[1]} exceeds context {params.config.context}")
    positions, valid = layout(ids, valid)
    stop_layer = params.config.n_layers if stop_layer is None else stop_layer
    if start_layer == 0:
        h = embed(params, ids, positions)
    elif h is None:
        raise ValueError("h is required when start_layer > 0")
    T = ids.shape[1]
    full = attention_bias(valid, T, h.dtype) if stop_layer - start_layer > (1 if query_from else 0) else None
    for layer in range(start_layer, stop_layer):
        if layer == stop_layer - 1 and query_from:
            rows = full[:, :, query_from:] if full is not None else attention_bias(valid, T - query_from, h.dtype)
            h = block(params, layer, h, rows, query_from=query_from)
        else:
            h = block(params, layer, h, full)
    return h


def final_norm(params: TransformerParams, h: torch.Tensor) -> torch.Tensor:
    return nx.layer_norm(h, params["ln_f.g"], params["ln_f.b"])


def lm_head(params: TransformerParams, h_normed: torch.Tensor) -> torch.Tensor:
    return h_normed @ params["wte"].T


def forward(params: TransformerParams, ids, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Causal logits: [T, V] for a 1-D id sequence, [B, T, V] for a batch."""
    ids_b, valid_b, squeeze = _batched(ids, valid)
    h = hidden_states(params, ids_b, valid_b)
    logits = lm_head(params, final_norm(params, h))
    return logits[0] if squeeze else logits


def model_forward_cached(
    params: TransformerParams,
    ids: torch.Tensor,
    positions: torch.Tensor,
    valid_keys: torch.Tensor,
    caches: list[dict],
    capture_layer: int | None = None,
    captured: list[torch.Tensor] | None = None,
) -> torch.Tensor:
    """Incremental forward for decoding; returns final-position logits [B, V].

    With ``capture_layer`` the stream entering that block is appended to ``captured``.
    """
    h = embed(params, ids, positions)
    bias = attention_bias(valid_keys, ids.shape[1], h.dtype)
    for layer in range(params.config.n_layers):
        if layer == capture_layer and captured is not None:
            captured.append(h)
        h = block(params, layer, h, bias, caches[layer])
    return lm_head(params, final_norm(params, h[:, -1]))
