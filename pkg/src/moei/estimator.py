"""Scikit-learn style wrappers around pretraining and adapter training.

``X`` is a sequence of :class:`~moei.data.TaskSample` (or their record dicts);
there is no separate ``y`` because each sample carries its own target.
"""

from __future__ import annotations

import copy
from typing import List, Optional, Sequence

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .adapters import AdapterSpec
from .backbone import Backbone, ModelConfig
from .bench.experiment import RouterStats, router_stats
from .bench.metrics import predict, score_predictions
from .data import TaskSample
from .errors import ConfigError, ContractError
from .rng import stream
from .training import TrainConfig, adapt, canonical_method, method_spec, pretrain


def check_samples(X, domain: Optional[str] = None, name: str = "X") -> List[TaskSample]:
    """Coerce ``X`` to a non-empty list of TaskSample, optionally of one domain."""
    if X is None:
        raise ContractError(f"{name} must be a sequence of task samples, got None")
    out = []
    for i, item in enumerate(X):
        if isinstance(item, dict):
            item = TaskSample.from_record(item)
        if not isinstance(item, TaskSample):
            raise ContractError(f"{name}[{i}] is {type(item).__name__}, expected TaskSample or record dict")
        if domain is not None and item.domain != domain:
            raise ContractError(f"{name}[{i}] is a {item.domain} sample; {domain} samples are required")
        out.append(item)
    if not out:
        raise ContractError(f"{name} is empty")
    return out


def check_is_fitted(est, attr: str) -> None:
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


def _metric_for(samples: Sequence[TaskSample]) -> str:
    return "accuracy" if all(s.options is not None or s.domain == "GI" for s in samples) else "rouge_l"


class BackbonePretrainer(BaseEstimator):
    """Language-model pretraining of a fresh backbone on GI samples.

    After ``fit`` the frozen model is available as ``backbone_``.
    """

    def __init__(self, vocab_size=512, d_model=64, n_layers=2, n_heads=4, d_ff=256, max_seq_len=128,
                 epochs=3, lr=1e-3, batch_size=32, max_grad_norm=1.0, seed=0):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.max_seq_len = max_seq_len
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.max_grad_norm = max_grad_norm
        self.seed = seed

    def fit(self, X, y=None):
        samples = check_samples(X, "GI")
        config = ModelConfig(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.d_ff, self.max_seq_len)
        cfg = TrainConfig(pretrain_epochs=self.epochs, pretrain_lr=self.lr, pretrain_batch_size=self.batch_size,
                          max_grad_norm=self.max_grad_norm, seed=self.seed)
        model = Backbone(config, stream(self.seed, "init"))
        self.loss_curve_ = pretrain(model, samples, cfg)
        self.backbone_ = model
        return self

    def predict(self, X) -> List[List[int]]:
        check_is_fitted(self, "backbone_")
        return predict(self.backbone_, None, check_samples(X))

    def score(self, X, y=None) -> float:
        samples = check_samples(X)
        return score_predictions(self.predict(samples), samples, _metric_for(samples))


class MoEIEnhancer(BaseEstimator):
    """Adapt a frozen backbone to new-domain samples with one of the method-table methods.

    ``fit(X, replay=...)`` trains on EI samples ``X`` with optional GI replay
    samples; the input backbone is copied, never modified.
    """

    def __init__(self, backbone=None, method="MoEI", N=8, r=4, lam=0.1, lr=3e-4, ft_lr=5e-5, epochs=5,
                 batch_size=32, replay_interval=10, dropout_p=0.1, alpha_scaling=1.0, max_grad_norm=1.0,
                 seed=0):
        self.backbone = backbone
        self.method = method
        self.N = N
        self.r = r
        self.lam = lam
        self.lr = lr
        self.ft_lr = ft_lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.replay_interval = replay_interval
        self.dropout_p = dropout_p
        self.alpha_scaling = alpha_scaling
        self.max_grad_norm = max_grad_norm
        self.seed = seed

    def _validate_params(self) -> None:
        if not isinstance(self.backbone, Backbone):
            raise ConfigError("backbone must be a pretrained Backbone instance")
        canonical_method(self.method)
        for name in ("lr", "ft_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")

    def fit(self, X, y=None, replay=None):
        self._validate_params()
        ei = check_samples(X, "EI")
        replay_set = check_samples(replay, "GI", "replay") if replay is not None else []
        base = AdapterSpec(mode="molora", N=self.N, r=self.r, alpha_scaling=self.alpha_scaling,
                           dropout_p=self.dropout_p)
        self.method_ = method_spec(self.method, base)
        cfg = TrainConfig(lr=self.lr, ft_lr=self.ft_lr, batch_size=self.batch_size, epochs=self.epochs,
                          lam=self.lam, replay_interval=self.replay_interval, replay_size=len(replay_set),
                          max_grad_norm=self.max_grad_norm, seed=self.seed)
        self.model_ = copy.deepcopy(self.backbone)
        self.sites_ = adapt(self.model_, self.method_, ei, replay_set, cfg)
        return self

    def predict(self, X) -> List[List[int]]:
        check_is_fitted(self, "model_")
        return predict(self.model_, self.sites_, check_samples(X))

    def score(self, X, y=None) -> float:
        """Accuracy for option-bearing (classification) samples, Rouge-L F otherwise."""
        samples = check_samples(X)
        return score_predictions(self.predict(samples), samples, _metric_for(samples))

    def router_stats(self, datasets) -> RouterStats:
        check_is_fitted(self, "model_")
        if self.sites_ is None or not self.sites_.gated:
            raise ContractError(f"method {self.method_.name} has no routers")
        return router_stats(self.model_, self.sites_, {k: check_samples(v, name=k) for k, v in datasets.items()})
