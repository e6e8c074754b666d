"""Task loss, gate modulation loss, their weighted sum, and AdamW."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .adapters import AdapterSet
from .autodiff import Tensor
from .backbone import Backbone, forward
from .data import IGNORE_INDEX, Batch, TaskSample, collate
from .errors import ConfigError, ContractError, NumericError

BatchLike = Union[Batch, Sequence[TaskSample]]


def _as_batch(batch: BatchLike) -> Batch:
    return batch if isinstance(batch, Batch) else collate(list(batch))


def _require_domain(batch: Batch, domain: str, what: str) -> None:
    bad = [d for d in batch.domains if d != domain]
    if bad:
        raise ContractError(f"{what} expects only {domain} samples, found {bad[0]}")


def lm_loss(model: Backbone, sites: Optional[AdapterSet], batch: BatchLike) -> Tensor:
    """Mean NLL of the scored (target + EOS) tokens, any domain."""
    batch = _as_batch(batch)
    return ad.cross_entropy(forward(model, batch.inputs, sites), batch.targets, IGNORE_INDEX)


def task_loss(model: Backbone, sites: Optional[AdapterSet], batch: BatchLike) -> Tensor:
    """Target-token NLL on EI samples under the (adapted) model."""
    batch = _as_batch(batch)
    _require_domain(batch, "EI", "task_loss")
    return lm_loss(model, sites, batch)


def replay_loss(model: Backbone, sites: Optional[AdapterSet], batch: BatchLike) -> Tensor:
    """Target-token NLL on replayed GI samples (multi-task replay baselines)."""
    batch = _as_batch(batch)
    _require_domain(batch, "GI", "replay_loss")
    return lm_loss(model, sites, batch)


def modulation_loss(model: Backbone, sites: AdapterSet, batch: BatchLike) -> Tensor:
    """Mean over routers and non-padding tokens of ``-log G(x)[alpha]``.

    This is the cross-entropy from the one-hot alpha target to the gate, i.e.
    ``KL(onehot || G(x))``; its gradient w.r.t. the gate logits is ``G(x) - onehot``.
    """
    batch = _as_batch(batch)
    _require_domain(batch, "GI", "modulation_loss")
    if sites is None or not sites.gated:
        raise ContractError("modulation_loss needs adapter sites with routers")
    sites.clear_gates()
    forward(model, batch.inputs, sites)
    target = np.where(batch.token_mask, 0, IGNORE_INDEX)
    per_site = [ad.cross_entropy(g.logits, target, IGNORE_INDEX) for g in sites.gates().values()]
    return ad.mul(_stack_sum(per_site), 1.0 / len(per_site))


def _stack_sum(terms: List[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


@dataclass
class LossBreakdown:
    task_loss: float
    modulation_loss: float
    total: float
    lam: float
    tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)


def combined_loss(task, modulation, lam: float) -> LossBreakdown:
    """``total = task + lam * modulation``; accepts tensors or plain floats."""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    if modulation is None:
        modulation = 0.0
    t_val = task.item() if isinstance(task, Tensor) else float(task)
    m_val = modulation.item() if isinstance(modulation, Tensor) else float(modulation)
    tensor = None
    if isinstance(task, Tensor) or isinstance(modulation, Tensor):
        tensor = task if lam == 0 or not isinstance(modulation, Tensor) else ad.add(task, ad.mul(modulation, lam))
    total = t_val + lam * m_val
    for name, value in (("task", t_val), ("modulation", m_val), ("total", total)):
        if not np.isfinite(value):
            raise NumericError(f"{name} loss is not finite ({value})")
    return LossBreakdown(t_val, m_val, total, lam, tensor)


# ---------------------------------------------------------------- optimizer
@dataclass
class OptimizerState:
    lr: float = 3e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(state: OptimizerState, params: Iterable[Tuple[str, Tensor]]) -> None:
    """One decoupled-weight-decay Adam update; gradients are cleared afterwards.

    Parameters without a gradient are skipped. Any non-finite gradient aborts
    the step before a single parameter is touched.
    """
    params = [(n, p) for n, p in params if p.grad is not None]
    for name, p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params:
        g = p.grad.astype(p.data.dtype, copy=False)
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = np.zeros_like(p.data)
            state.exp_avg_sq[name] = np.zeros_like(p.data)
        v = state.exp_avg_sq[name]
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.grad = None


class AdamW:
    """Thin stateful wrapper around :func:`adamw_step` for a fixed parameter list."""

    def __init__(self, named_params, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, max_grad_norm: Optional[float] = None):
        self.params = list(named_params)
        self.state = OptimizerState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)
        self.max_grad_norm = max_grad_norm

    def step(self) -> None:
        if self.max_grad_norm is not None:
            clip_grad_norm([p for _, p in self.params], self.max_grad_norm)
        adamw_step(self.state, self.params)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm
