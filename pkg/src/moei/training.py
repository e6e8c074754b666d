"""Backbone pretraining and adapter (or full) fine-tuning loops."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import AdapterSet, AdapterSpec, inject
from .backbone import Backbone, freeze, unfreeze
from .data import TaskSample, collate
from .errors import ConfigError
from .objectives import AdamW, combined_loss, lm_loss, modulation_loss, replay_loss, task_loss
from .rng import stream

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Optimization knobs for pretraining and adaptation."""

    lr: float = 3e-4
    ft_lr: float = 5e-5
    batch_size: int = 32
    epochs: int = 5
    lam: float = 0.1
    replay_interval: int = 10
    replay_size: int = 500
    seed: int = 0
    weight_decay: float = 0.0
    max_grad_norm: Optional[float] = 1.0
    pretrain_epochs: int = 3
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 32

    def __post_init__(self):
        for name in ("lr", "ft_lr", "pretrain_lr"):
            if not float(getattr(self, name)) > 0:
                raise ConfigError(f"train.{name} must be > 0, got {getattr(self, name)}")
        for name in ("batch_size", "epochs", "replay_interval", "pretrain_batch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"train.{name} must be >= 1, got {getattr(self, name)}")
        if int(self.pretrain_epochs) < 0:
            raise ConfigError("train.pretrain_epochs must be >= 0")
        if int(self.replay_size) < 0:
            raise ConfigError("train.replay_size must be >= 0")
        if float(self.lam) < 0:
            raise ConfigError(f"train.lambda must be >= 0, got {self.lam}")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            self.max_grad_norm = None


@dataclass(frozen=True)
class MethodSpec:
    """How one named method maps onto adapters, freezing and losses."""

    name: str
    adapters: Optional[AdapterSpec]
    frozen: bool = True
    modulation: bool = False
    replay_lm: bool = False


def method_spec(name: str, base: Optional[AdapterSpec] = None) -> MethodSpec:
    """Resolve a method name to its configuration.

    ``base`` supplies dropout, scaling, site list and the MoLoRA ``N``/``r``.
    """
    base = base or AdapterSpec()
    common = dict(alpha_scaling=base.alpha_scaling, dropout_p=base.dropout_p, sites=base.sites)
    n, r = (base.N, base.r) if base.mode == "molora" else (8, 4)
    molora = AdapterSpec(mode="molora", N=n, r=r, router=True, **common)
    lora = AdapterSpec(mode="lora", N=1, r=n * r, **common)
    table = {
        "FT": MethodSpec("FT", None, frozen=False),
        "LoRA": MethodSpec("LoRA", lora),
        "LoRA+Replay": MethodSpec("LoRA+Replay", lora, replay_lm=True),
        "MoEI": MethodSpec("MoEI", molora, modulation=True),
        "MoEI-ModularExpansion": MethodSpec(
            "MoEI-ModularExpansion", AdapterSpec(mode="molora", N=1, r=n * r, router=True, **common), modulation=True
        ),
        "MoEI-IntraModulation": MethodSpec(
            "MoEI-IntraModulation", AdapterSpec(mode="molora", N=n, r=r, router=False, **common)
        ),
        "MoEI-InterModulation": MethodSpec("MoEI-InterModulation", molora),
        "MoEI+Replay": MethodSpec("MoEI+Replay", molora, modulation=True, replay_lm=True),
    }
    key = canonical_method(name)
    return table[key]


METHODS = (
    "FT",
    "LoRA",
    "LoRA+Replay",
    "MoEI",
    "MoEI-ModularExpansion",
    "MoEI-IntraModulation",
    "MoEI-InterModulation",
    "MoEI+Replay",
)


def canonical_method(name: str) -> str:
    key = name.replace("–", "-").replace("−", "-").replace(" ", "")
    for m in METHODS:
        if key.lower() == m.lower():
            return m
    raise ConfigError(f"unknown method {name!r}; expected one of {', '.join(METHODS)}")


def _batches(rng: np.random.Generator, n: int, size: int):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start : start + size]


def pretrain(model: Backbone, samples: Sequence[TaskSample], cfg: TrainConfig, log_every: int = 0) -> List[float]:
    """Full-parameter language-model training of the backbone on GI samples."""
    unfreeze(model)
    opt = AdamW(model.named_parameters(), lr=cfg.pretrain_lr, weight_decay=cfg.weight_decay,
                max_grad_norm=cfg.max_grad_norm)
    rng = stream(cfg.seed, "pretrain", "order")
    losses = []
    step = 0
    for epoch in range(cfg.pretrain_epochs):
        for idx in _batches(rng, len(samples), cfg.pretrain_batch_size):
            loss = lm_loss(model, None, collate([samples[i] for i in idx]))
            ad.backward(loss)
            opt.step()
            losses.append(loss.item())
            step += 1
            if log_every and step % log_every == 0:
                logger.info("pretrain epoch %d step %d loss %.4f", epoch, step, np.mean(losses[-log_every:]))
    freeze(model)
    return losses


def adapt(
    model: Backbone,
    method: MethodSpec,
    ei_train: Sequence[TaskSample],
    replay_set: Sequence[TaskSample],
    cfg: TrainConfig,
    log_every: int = 0,
) -> Optional[AdapterSet]:
    """Train one method on EI data; returns the adapter set (``None`` for FT).

    Data order, adapter initialization and replay draws depend on the seed
    only, so methods differ solely in what the method table switches.

    Every ``replay_interval`` steps a GI batch from ``replay_set`` joins the
    step: through the gate modulation loss (weighted by ``lam``) and/or the
    language-model loss, depending on the method.
    """
    rng = stream(cfg.seed, "adapt", "order")
    if method.frozen:
        freeze(model)
    else:
        unfreeze(model)
    sites = None
    if method.adapters is not None:
        sites = inject(model, method.adapters, stream(cfg.seed, "adapters"))
        sites.train()
        params = list(sites.named_parameters())
        lr = cfg.lr
    else:
        params = list(model.named_parameters())
        lr = cfg.ft_lr
    opt = AdamW(params, lr=lr, weight_decay=cfg.weight_decay, max_grad_norm=cfg.max_grad_norm)
    use_modulation = method.modulation and cfg.lam > 0 and sites is not None and sites.gated
    replay_rng = stream(cfg.seed, "replay_batches")
    step = 0
    history = []
    for epoch in range(cfg.epochs):
        for idx in _batches(rng, len(ei_train), cfg.batch_size):
            step += 1
            loss_t = task_loss(model, sites, collate([ei_train[i] for i in idx]))
            mod = None
            total = loss_t
            if replay_set and step % cfg.replay_interval == 0 and (use_modulation or method.replay_lm):
                pick = replay_rng.choice(len(replay_set), size=min(cfg.batch_size, len(replay_set)), replace=False)
                gi_batch = collate([replay_set[i] for i in pick])
                if use_modulation:
                    mod = modulation_loss(model, sites, gi_batch)
                if method.replay_lm:
                    total = ad.add(total, replay_loss(model, sites, gi_batch))
            parts = combined_loss(total, mod, cfg.lam if mod is not None else 0.0)
            ad.backward(parts.tensor)
            opt.step()
            history.append(parts.total)
            if log_every and step % log_every == 0:
                logger.info("%s epoch %d step %d loss %.4f", method.name, epoch, step, np.mean(history[-log_every:]))
    if sites is not None:
        sites.eval()
    freeze(model)
    return sites
