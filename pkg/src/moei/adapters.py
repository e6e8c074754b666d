"""LoRA, mixture-of-LoRA and the gated (intra/inter modulated) adapter forward.

Each adapted backbone linear ``h = W0 x + b`` gets ``N`` low-rank pairs
``(B_i, A_i)`` of rank ``r``. The pairs are stored concatenated: ``A`` is
``[N*r, k]`` and ``B`` is ``[d, N*r]``, so block ``i`` is the row/column slice
``i*r:(i+1)*r``. A router ``W`` of shape ``[N+1, k]`` produces a per-token
softmax whose slot 0 is the backbone weight (alpha) and slots ``1..N`` are the
block weights (betas). In the forward pass alpha is replaced by the constant 1;
only the betas scale their blocks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import ADAPTABLE_KINDS, Backbone, SiteId
from .errors import ConfigError, ContractError, ShapeError

MODES = ("none", "lora", "molora")


@dataclass
class AdapterSpec:
    """What to attach and where.

    ``N`` and ``r`` default per mode: 8 blocks of rank 4 for ``molora`` and a
    single rank-32 block for ``lora``. ``router`` only applies to ``molora``;
    disabling it gives the ungated, equally weighted sum of blocks.
    """

    mode: str = "molora"
    N: Optional[int] = None
    r: Optional[int] = None
    alpha_scaling: float = 1.0
    dropout_p: float = 0.1
    router: bool = True
    sites: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"adapters.mode must be one of {MODES}, got {self.mode!r}")
        if self.N is None:
            self.N = 1 if self.mode == "lora" else 8
        if self.r is None:
            self.r = 32 if self.mode == "lora" else 4
        if int(self.N) < 1:
            raise ConfigError(f"adapters.N must satisfy N >= 1, got {self.N}")
        if int(self.r) < 1:
            raise ConfigError(f"adapters.r must satisfy r >= 1, got {self.r}")
        if self.mode == "lora" and self.N != 1:
            raise ConfigError(f"adapters.mode=lora requires N = 1, got {self.N}")
        if not 0.0 <= float(self.dropout_p) < 1.0:
            raise ConfigError(f"adapters.dropout_p must be in [0, 1), got {self.dropout_p}")
        self.N, self.r = int(self.N), int(self.r)
        if self.sites is not None:
            self.sites = tuple(str(s) for s in self.sites)

    @property
    def gated(self) -> bool:
        return self.mode == "molora" and self.router

    def site_ids(self, model: Backbone) -> List[SiteId]:
        if self.sites is None:
            return [SiteId(i, k) for i in range(model.config.n_layers) for k in ADAPTABLE_KINDS]
        return [SiteId.parse(s) for s in self.sites]


@dataclass
class GateOutput:
    """Router softmax for every token: slot 0 is alpha, slots 1..N are betas."""

    full: Tensor
    logits: Tensor

    @property
    def alpha_soft(self) -> np.ndarray:
        return self.full.data[..., 0]

    @property
    def betas(self) -> np.ndarray:
        return self.full.data[..., 1:]


class AdapterSite:
    """Low-rank blocks (and optionally a router) attached to one backbone linear."""

    def __init__(
        self,
        site_id: SiteId,
        weight: Tensor,
        bias: Tensor,
        spec: AdapterSpec,
        rng: np.random.Generator,
        owner: Optional["AdapterSet"] = None,
    ):
        self.site_id = site_id
        self.weight = weight
        self.bias = bias
        self.spec = spec
        self.owner = owner
        d, k = weight.shape
        dtype = weight.dtype
        N, r = spec.N, spec.r
        bound = 1.0 / np.sqrt(k)
        name = str(site_id)
        self.A = Tensor(rng.uniform(-bound, bound, (N * r, k)).astype(dtype), requires_grad=True, name=f"{name}.A")
        self.B = Tensor(np.zeros((d, N * r), dtype=dtype), requires_grad=True, name=f"{name}.B")
        self.router_W: Optional[Tensor] = None
        if spec.gated:
            self.router_W = Tensor(np.zeros((N + 1, k), dtype=dtype), requires_grad=True, name=f"{name}.router")
        # maps the N+1 gate slots onto the N*r concatenated rank channels; slot 0 maps to nothing
        expand = np.zeros((N + 1, N * r), dtype=dtype)
        for i in range(N):
            expand[i + 1, i * r : (i + 1) * r] = 1.0
        self._expand = expand
        self.last_gate: Optional[GateOutput] = None

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @property
    def k_in(self) -> int:
        return self.weight.shape[1]

    @property
    def blocks(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """``[(B_i, A_i), ...]`` as views into the concatenated storage."""
        r = self.spec.r
        return [
            (self.B.data[:, i * r : (i + 1) * r], self.A.data[i * r : (i + 1) * r])
            for i in range(self.spec.N)
        ]

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield self.A.name, self.A
        yield self.B.name, self.B
        if self.router_W is not None:
            yield self.router_W.name, self.router_W

    def theta_E(self) -> List[Tensor]:
        return [self.A, self.B]

    def theta_G(self) -> List[Tensor]:
        return [] if self.router_W is None else [self.router_W]

    def astype(self, dtype) -> None:
        for _, t in self.named_parameters():
            t.data = t.data.astype(dtype)
        self._expand = self._expand.astype(dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if self.spec.mode == "lora":
            return lora_forward(self, x)
        if self.spec.gated:
            return modulated_forward(self, x)
        return molora_forward(self, x)

    # -- internals shared by the forwards
    def _check(self, x: Tensor) -> None:
        if x.shape[-1] != self.k_in:
            raise ShapeError(f"site {self.site_id}: input width {x.shape[-1]} does not match weight {self.weight.shape}")

    def _base(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, ad.transpose(self.weight)), self.bias)

    def _adapter_input(self, x: Tensor) -> Tensor:
        owner = self.owner
        if owner is not None and owner.training and self.spec.dropout_p > 0:
            return ad.dropout(x, self.spec.dropout_p, owner.rng)
        return x


def lora_forward(site: AdapterSite, x: Tensor) -> Tensor:
    """``W0 x + b + s * B A x``."""
    site._check(x)
    low = ad.matmul(site._adapter_input(x), ad.transpose(site.A))
    delta = ad.matmul(low, ad.transpose(site.B))
    return ad.add(site._base(x), ad.mul(delta, site.spec.alpha_scaling))


def molora_forward(site: AdapterSite, x: Tensor) -> Tensor:
    """Ungated mixture: every block contributes with weight 1."""
    # with concatenated storage the ungated sum of N rank-r blocks is one rank N*r product
    return lora_forward(site, x)


def route(site: AdapterSite, x: Tensor) -> GateOutput:
    """Per-token router softmax over ``N + 1`` slots."""
    if site.router_W is None:
        raise ContractError(f"site {site.site_id} has no router")
    site._check(x)
    logits = ad.matmul(x, ad.transpose(site.router_W))
    return GateOutput(full=ad.softmax(logits, axis=-1), logits=logits)


def modulated_forward(site: AdapterSite, x: Tensor) -> Tensor:
    """``1 * (W0 x + b) + s * sum_i beta_i(x) B_i A_i x`` per token.

    The alpha slot takes part in the softmax but the backbone branch is always
    weighted by exactly 1. On this path the alpha row of the router is held
    constant (its logit stays differentiable in ``x``), so that row is trained
    by the modulation loss alone.
    """
    gate = route(site, x)
    site.last_gate = gate
    W = site.router_W
    rows = np.ones((W.shape[0], 1), dtype=W.data.dtype)
    rows[0] = 0.0
    w_task = ad.add(ad.mul(W, Tensor(rows)), Tensor(W.data * (1.0 - rows)))
    probs = ad.softmax(ad.matmul(x, ad.transpose(w_task)), axis=-1)
    low = ad.matmul(site._adapter_input(x), ad.transpose(site.A))
    beta_per_channel = ad.matmul(probs, Tensor(site._expand))
    delta = ad.matmul(ad.mul(low, beta_per_channel), ad.transpose(site.B))
    return ad.add(site._base(x), ad.mul(delta, site.spec.alpha_scaling))


def effective_matrix(site: AdapterSite, betas: Optional[np.ndarray] = None) -> np.ndarray:
    """Dense ``W0 + s * sum_i w_i B_i A_i`` for given block weights (default all 1)."""
    N = site.spec.N
    w = np.ones(N) if betas is None else np.asarray(betas, dtype=np.float64)
    total = site.weight.data.astype(np.float64).copy()
    for wi, (B, A) in zip(w, site.blocks):
        total += site.spec.alpha_scaling * wi * (B.astype(np.float64) @ A.astype(np.float64))
    return total


class AdapterSet:
    """All adapter sites attached to one backbone, keyed by :class:`SiteId`."""

    def __init__(self, spec: AdapterSpec, sites: Dict[SiteId, AdapterSite], rng: np.random.Generator):
        self.spec = spec
        self.sites = sites
        self.rng = rng
        self.training = False
        for s in sites.values():
            s.owner = self

    def __contains__(self, site_id) -> bool:
        return site_id in self.sites

    def __getitem__(self, site_id) -> AdapterSite:
        return self.sites[site_id]

    def __iter__(self):
        return iter(self.sites.values())

    def __len__(self) -> int:
        return len(self.sites)

    def train(self, mode: bool = True) -> "AdapterSet":
        self.training = mode
        return self

    def eval(self) -> "AdapterSet":
        return self.train(False)

    @property
    def gated(self) -> bool:
        return any(s.router_W is not None for s in self.sites.values())

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for s in self.sites.values():
            yield from s.named_parameters()

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def theta_E(self) -> List[Tensor]:
        return [t for s in self.sites.values() for t in s.theta_E()]

    def theta_G(self) -> List[Tensor]:
        return [t for s in self.sites.values() for t in s.theta_G()]

    def gates(self) -> Dict[SiteId, GateOutput]:
        """Gate outputs recorded by the most recent forward pass."""
        return {k: s.last_gate for k, s in self.sites.items() if s.last_gate is not None}

    def clear_gates(self) -> None:
        for s in self.sites.values():
            s.last_gate = None

    def astype(self, dtype) -> "AdapterSet":
        for s in self.sites.values():
            s.astype(dtype)
        return self


def inject(model: Backbone, spec: AdapterSpec, rng: Optional[np.random.Generator] = None) -> AdapterSet:
    """Attach one adapter site (with its own router when gated) per listed site."""
    rng = rng if rng is not None else np.random.default_rng(0)
    sites: Dict[SiteId, AdapterSite] = {}
    if spec.mode != "none":
        for site_id in spec.site_ids(model):
            weight, bias = model.linear(site_id)
            sites[site_id] = AdapterSite(site_id, weight, bias, spec, rng)
    return AdapterSet(spec, sites, rng)


def trainable_param_count(adapters: AdapterSet) -> Dict[str, int]:
    return {
        "theta_E": int(sum(t.size for t in adapters.theta_E())),
        "theta_G": int(sum(t.size for t in adapters.theta_G())),
    }


def site_param_count(site: AdapterSite) -> Dict[str, int]:
    return {
        "theta_E": int(sum(t.size for t in site.theta_E())),
        "theta_G": int(sum(t.size for t in site.theta_G())),
    }
