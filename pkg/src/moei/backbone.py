"""Tiny decoder-only transformer used as the frozen backbone.

Pre-LayerNorm blocks with learned absolute positions and an output head tied
to the token embedding. Every linear layer is addressable by a :class:`SiteId`
so adapter sets can replace its plain matmul with an adapted forward.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError

LINEAR_KINDS = ("q", "k", "v", "o", "ffn_up", "ffn_down")
ADAPTABLE_KINDS = ("q", "v", "ffn_down")
MASK_VALUE = -1e9


@dataclass
class ModelConfig:
    vocab_size: int = 512
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 128

    def __post_init__(self):
        for key, value in asdict(self).items():
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigError(f"model.{key} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"model.d_model ({self.d_model}) must be divisible by model.n_heads ({self.n_heads})"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class SiteId(NamedTuple):
    """Stable address of one backbone linear layer."""

    layer: int
    kind: str

    def __str__(self) -> str:
        return f"layers.{self.layer}.{self.kind}"

    @classmethod
    def parse(cls, text: str) -> "SiteId":
        try:
            prefix, layer, kind = text.split(".", 2)
            if prefix != "layers":
                raise ValueError
            return cls(int(layer), kind)
        except ValueError:
            raise ConfigError(f"malformed site id {text!r}; expected 'layers.<i>.<kind>'") from None


class Backbone:
    """Parameter container for the transformer (the backbone parameter set).

    Args:
        config: Architecture hyperparameters.
        rng: Generator used for weight initialization.
        dtype: Storage precision; float64 is only used by gradient checks.
    """

    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None, dtype=np.float32):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        c = config
        p: Dict[str, Tensor] = {}

        def normal(*shape, std=0.02):
            return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)

        def const(value, n):
            return Tensor(np.full(n, value, dtype=dtype), requires_grad=True)

        p["tok_emb"] = normal(c.vocab_size, c.d_model, std=1.0 / math.sqrt(c.d_model))
        p["pos_emb"] = normal(c.max_seq_len, c.d_model)
        out_std = 0.02 / math.sqrt(2 * c.n_layers)
        shapes = {
            "q": (c.d_model, c.d_model),
            "k": (c.d_model, c.d_model),
            "v": (c.d_model, c.d_model),
            "o": (c.d_model, c.d_model),
            "ffn_up": (c.d_ff, c.d_model),
            "ffn_down": (c.d_model, c.d_ff),
        }
        for i in range(c.n_layers):
            p[f"layers.{i}.ln1.gain"] = const(1.0, c.d_model)
            p[f"layers.{i}.ln1.bias"] = const(0.0, c.d_model)
            p[f"layers.{i}.ln2.gain"] = const(1.0, c.d_model)
            p[f"layers.{i}.ln2.bias"] = const(0.0, c.d_model)
            for kind in LINEAR_KINDS:
                std = out_std if kind in ("o", "ffn_down") else 0.02
                p[f"layers.{i}.{kind}.weight"] = normal(*shapes[kind], std=std)
                p[f"layers.{i}.{kind}.bias"] = const(0.0, shapes[kind][0])
        p["ln_f.gain"] = const(1.0, c.d_model)
        p["ln_f.bias"] = const(0.0, c.d_model)
        for name, tensor in p.items():
            tensor.name = name
        self.params = p

    # -------------------------------------------------------------- plumbing
    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def site_ids(self) -> List[SiteId]:
        return [SiteId(i, kind) for i in range(self.config.n_layers) for kind in LINEAR_KINDS]

    def linear(self, site: SiteId) -> Tuple[Tensor, Tensor]:
        """Return ``(weight, bias)`` for a site; weight is ``[out, in]``."""
        key = f"layers.{site.layer}.{site.kind}"
        if f"{key}.weight" not in self.params:
            raise ConfigError(f"unknown site {site}")
        return self.params[f"{key}.weight"], self.params[f"{key}.bias"]

    @property
    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self.params.values())

    def astype(self, dtype) -> "Backbone":
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        return self

    def snapshot(self) -> bytes:
        """Little-endian float32 bytes of every parameter, in manifest order."""
        return b"".join(t.data.astype("<f4").tobytes() for t in self.params.values())

    def __call__(self, tokens, sites=None) -> Tensor:
        return forward(self, tokens, sites)


def freeze(model: Backbone) -> None:
    """Stop gradient flow into every backbone parameter."""
    for t in model.params.values():
        t.requires_grad = False
        t.grad = None


def unfreeze(model: Backbone) -> None:
    for t in model.params.values():
        t.requires_grad = True


def apply_linear(model: Backbone, site: SiteId, x: Tensor, sites=None) -> Tensor:
    """Plain ``x W^T + b``, or the adapted forward when ``sites`` covers ``site``."""
    weight, bias = model.linear(site)
    if sites is not None and site in sites:
        return sites[site](x)
    return ad.add(ad.matmul(x, ad.transpose(weight)), bias)


def _causal_mask(T: int, dtype) -> Tensor:
    mask = np.triu(np.full((T, T), MASK_VALUE, dtype=dtype), k=1)
    return Tensor(mask)


def attention(model: Backbone, layer: int, x: Tensor, sites=None, return_weights: bool = False):
    """Multi-head causal self-attention on an already-normalized ``[B, T, d]`` input.

    The query and value projections are adapter sites. A ``[T, d]`` input is
    treated as a batch of one.
    """
    if x.ndim == 2:
        res = attention(model, layer, ad.reshape(x, (1,) + x.shape), sites, return_weights)
        if return_weights:
            return ad.reshape(res[0], x.shape), res[1]
        return ad.reshape(res, x.shape)
    c = model.config
    B, T, _ = x.shape
    H, dh = c.n_heads, c.head_dim

    def heads(t):
        return ad.transpose(ad.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

    q = heads(apply_linear(model, SiteId(layer, "q"), x, sites))
    k = heads(apply_linear(model, SiteId(layer, "k"), x, sites))
    v = heads(apply_linear(model, SiteId(layer, "v"), x, sites))
    scores = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dh))
    weights = ad.softmax(ad.add(scores, _causal_mask(T, x.dtype)), axis=-1)
    ctx = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (B, T, c.d_model))
    out = apply_linear(model, SiteId(layer, "o"), ctx, sites)
    return (out, weights) if return_weights else out


def ffn(model: Backbone, layer: int, x: Tensor, sites=None) -> Tensor:
    """up-linear, GELU, down-linear; the down projection is an adapter site."""
    hidden = ad.gelu(apply_linear(model, SiteId(layer, "ffn_up"), x, sites))
    return apply_linear(model, SiteId(layer, "ffn_down"), hidden, sites)


def _check_tokens(model: Backbone, tokens) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim not in (1, 2):
        raise ContractError(f"tokens must be 1-D or 2-D, got shape {arr.shape}")
    if arr.shape[-1] > model.config.max_seq_len:
        raise ContractError(
            f"sequence length {arr.shape[-1]} exceeds max_seq_len {model.config.max_seq_len}"
        )
    if arr.size and (arr.min() < 0 or arr.max() >= model.config.vocab_size):
        raise IndexError(f"token id out of range for vocab_size {model.config.vocab_size}")
    return arr


def forward(model: Backbone, tokens, sites=None) -> Tensor:
    """Next-token logits ``[T, V]`` (or ``[B, T, V]`` for batched tokens)."""
    arr = _check_tokens(model, tokens)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[None, :]
    p = model.params
    T = arr.shape[1]
    h = ad.add(ad.embedding(p["tok_emb"], arr), ad.embedding(p["pos_emb"], np.arange(T)))
    for i in range(model.config.n_layers):
        a = ad.layer_norm(h, p[f"layers.{i}.ln1.gain"], p[f"layers.{i}.ln1.bias"])
        h = ad.add(h, attention(model, i, a, sites))
        f = ad.layer_norm(h, p[f"layers.{i}.ln2.gain"], p[f"layers.{i}.ln2.bias"])
        h = ad.add(h, ffn(model, i, f, sites))
    h = ad.layer_norm(h, p["ln_f.gain"], p["ln_f.bias"])
    logits = ad.matmul(h, ad.transpose(p["tok_emb"]))
    if squeeze:
        logits = ad.reshape(logits, logits.shape[1:])
    return logits


def generate(model: Backbone, prompt: Sequence[int], max_new: int, sites=None, eos_id: Optional[int] = None) -> List[int]:
    """Greedy continuation of one prompt; returns prompt plus new tokens.

    Stops after emitting ``eos_id`` (which is kept), after ``max_new`` tokens,
    or when the context is full. Ties go to the lowest token id.
    """
    out = generate_batch(model, [list(prompt)], max_new, sites, eos_id)[0]
    return list(prompt) + out


def generate_batch(model: Backbone, prompts, max_new: int, sites=None, eos_id: Optional[int] = None) -> List[List[int]]:
    """Greedy decoding for equal-length prompts; returns only the new tokens."""
    arr = _check_tokens(model, prompts)
    if arr.ndim == 1:
        arr = arr[None, :]
    n = arr.shape[0]
    new: List[List[int]] = [[] for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    seq = arr
    with ad.no_grad():
        for _ in range(max_new):
            if seq.shape[1] >= model.config.max_seq_len or done.all():
                break
            logits = forward(model, seq, sites).data[:, -1, :]
            nxt = logits.argmax(axis=-1)
            for i in np.nonzero(~done)[0]:
                new[i].append(int(nxt[i]))
                if eos_id is not None and nxt[i] == eos_id:
                    done[i] = True
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return new
