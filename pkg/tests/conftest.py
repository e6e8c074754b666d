import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from moei.adapters import AdapterSpec, inject
from moei.backbone import Backbone, ModelConfig, freeze
from moei.bench.tasks import BenchSizes
from moei.rng import stream
from moei.training import TrainConfig

settings.register_profile("moei", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("moei")

# vocabulary small enough for dense finite differences
TINY = ModelConfig(vocab_size=40, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_seq_len=16)
# full benchmark vocabulary, minimal width: for end-to-end plumbing tests
SMALL = ModelConfig(vocab_size=512, d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq_len=40)
SMALL_SIZES = BenchSizes(gi_train=40, gi_eval=6, ei_train=24, ei_eval=6)
SMALL_TRAIN = TrainConfig(epochs=1, pretrain_epochs=1, replay_interval=2, replay_size=16, batch_size=8,
                          pretrain_batch_size=16)


def tiny_model(seed=0, dtype=np.float64, config=TINY):
    return Backbone(config, stream(seed, "tiny"), dtype=dtype)


def randomize(sites, seed, scale=0.3):
    """Give every adapter tensor non-trivial values (B is zero at init)."""
    rng = np.random.default_rng(seed)
    for _, t in sites.named_parameters():
        t.data = (rng.normal(size=t.shape) * scale).astype(t.data.dtype)
    return sites


def tiny_sites(model, seed=0, scale=0.3, **spec):
    spec.setdefault("dropout_p", 0.0)
    sites = inject(model, AdapterSpec(**spec), stream(seed, "tiny-adapters"))
    if scale:
        randomize(sites, seed, scale)
    return sites.eval()


@pytest.fixture
def tiny():
    m = tiny_model()
    freeze(m)
    return m


class _Backbones:
    """Default-configuration backbones pretrained on the reference bench, built on first use."""

    def __init__(self):
        from moei.bench.experiment import build_bench

        self.bench = build_bench(0)
        self._cache = {}

    def __getitem__(self, seed):
        from dataclasses import replace

        from moei.bench.experiment import pretrain_backbone

        if seed not in self._cache:
            self._cache[seed] = pretrain_backbone(ModelConfig(), replace(TrainConfig(), seed=seed), self.bench)
        return self._cache[seed]


@pytest.fixture(scope="session")
def pretrained():
    return _Backbones()


# one "PASS/FAIL criterion n: ..." line per acceptance criterion, echoed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
