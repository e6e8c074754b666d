import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moei import autodiff as ad
from moei.adapters import (
    AdapterSpec,
    effective_matrix,
    inject,
    lora_forward,
    modulated_forward,
    molora_forward,
    route,
    site_param_count,
    trainable_param_count,
)
from moei.autodiff import Tensor, finite_diff_check
from moei.backbone import ModelConfig, SiteId, forward
from moei.data import TaskSample, collate
from moei.errors import ConfigError, ShapeError
from moei.objectives import modulation_loss
from moei.rng import stream

from conftest import TINY, tiny_model, tiny_sites


def beta_rows(site):
    # the alpha logit is a constant on the adapter path (stop-gradient by design)
    mask = np.ones(site.router_W.shape, dtype=bool)
    mask[0] = False
    return mask


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.sampled_from(["lora", "molora", "gated"]))
def test_no_op_at_init(seed, kind):
    m = tiny_model(seed % 4)
    spec = {"lora": AdapterSpec(mode="lora", r=8), "molora": AdapterSpec(router=False),
            "gated": AdapterSpec()}[kind]
    sites = inject(m, spec, stream(seed, "a")).eval()
    tokens = np.random.default_rng(seed).integers(0, TINY.vocab_size, size=(2, 7))
    assert np.max(np.abs(forward(m, tokens, sites).data - forward(m, tokens).data)) < 1e-6


def test_lora_forward_matches_dense_oracle():
    m = tiny_model()
    sites = tiny_sites(m, mode="lora", r=3)
    site = sites[SiteId(0, "v")]
    x = np.random.default_rng(1).normal(size=(5, TINY.d_model))
    out = lora_forward(site, Tensor(x)).data
    w = site.weight.data + site.B.data @ site.A.data
    np.testing.assert_allclose(out, x @ w.T + site.bias.data, atol=1e-12)


def test_molora_forward_is_sum_of_blocks():
    m = tiny_model()
    sites = tiny_sites(m, router=False, N=3, r=2)
    site = sites[SiteId(1, "ffn_down")]
    x = np.random.default_rng(2).normal(size=(4, TINY.d_ff))
    out = molora_forward(site, Tensor(x)).data
    np.testing.assert_allclose(out, x @ effective_matrix(site).T + site.bias.data, atol=1e-12)
    manual = site.weight.data + sum(B @ A for B, A in site.blocks)
    np.testing.assert_allclose(effective_matrix(site), manual, atol=1e-12)


def test_uniform_router_scales_every_block_by_one_ninth():
    m = tiny_model()
    sites = tiny_sites(m)
    site = sites[SiteId(0, "q")]
    site.router_W.data[:] = 0.0
    x = np.random.default_rng(3).normal(size=(6, TINY.d_model))
    out = modulated_forward(site, Tensor(x)).data
    oracle = effective_matrix(site, np.full(8, 1.0 / 9.0))
    np.testing.assert_allclose(out, x @ oracle.T + site.bias.data, atol=1e-12)


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_clamped_forward_equals_beta_substitution_oracle(seed):
    m = tiny_model(seed % 3)
    sites = tiny_sites(m, seed=seed, scale=0.5, N=4, r=2)
    site = sites[SiteId(1, "v")]
    x = np.random.default_rng(seed).normal(size=(5, TINY.d_model))
    out = modulated_forward(site, Tensor(x)).data
    betas = _softmax(x @ site.router_W.data.T)[:, 1:]
    for t in range(5):
        oracle = effective_matrix(site, betas[t])
        np.testing.assert_allclose(out[t], oracle @ x[t] + site.bias.data, atol=1e-10)


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.integers(1, 9))
def test_gate_rows_sum_to_one(seed, N):
    m = tiny_model()
    sites = tiny_sites(m, seed=seed, scale=2.0, N=N, r=1)
    x = Tensor(np.random.default_rng(seed).normal(scale=3.0, size=(2, 5, TINY.d_model)))
    gate = route(sites[SiteId(0, "q")], x)
    np.testing.assert_allclose(gate.full.data.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(gate.alpha_soft + gate.betas.sum(axis=-1), 1.0, atol=1e-6)


def test_zero_router_gives_uniform_gate():
    m = tiny_model()
    sites = inject(m, AdapterSpec(), stream(0, "a"))
    gate = route(sites[SiteId(0, "v")], Tensor(np.random.default_rng(0).normal(size=(3, TINY.d_model))))
    np.testing.assert_allclose(gate.full.data, 1.0 / 9.0, rtol=0, atol=1e-15)


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_modulated_site_grad_check(seed):
    m = tiny_model(seed % 3)
    sites = tiny_sites(m, seed=seed, scale=0.5, N=3, r=2)
    site = sites[SiteId(0, "v")]
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(4, TINY.d_model)))
    w = Tensor(rng.normal(size=(4, TINY.d_model)))
    f = lambda _: ad.sum(ad.mul(modulated_forward(site, x), w))  # noqa: E731
    assert finite_diff_check(f, site.router_W, where=beta_rows(site)) < 1e-4
    for p in (site.A, site.B):
        assert finite_diff_check(f, p) < 1e-4
    assert finite_diff_check(lambda xx: ad.sum(ad.mul(modulated_forward(site, xx), w)), x) < 1e-4


def test_alpha_row_gets_no_gradient_from_adapter_path():
    m = tiny_model()
    sites = tiny_sites(m, scale=0.5)
    tokens = np.array([[1, 5, 9, 3]])
    ad.backward(ad.cross_entropy(forward(m, tokens, sites), np.array([[5, 9, 3, 2]])))
    for site in sites:
        assert not site.router_W.grad[0].any()
        assert site.router_W.grad[1:].any()


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_alpha_row_grad_check_through_modulation_loss(seed):
    m = tiny_model(seed % 3)
    sites = tiny_sites(m, seed=seed, scale=1.0, N=2, r=2)
    batch = collate([TaskSample((16,), (20, 21, 22), (30,), "GI")])
    f = lambda _: modulation_loss(m, sites, batch)  # noqa: E731
    # no gate lies downstream of the last site, so its whole router gradient is exact
    assert finite_diff_check(f, sites[SiteId(1, "ffn_down")].router_W, h=1e-3) < 1e-4


def test_parameter_parity_between_molora_and_lora():
    m = tiny_model(config=ModelConfig())
    molora = inject(m, AdapterSpec(mode="molora", N=8, r=4), stream(0, "a"))
    lora = inject(m, AdapterSpec(mode="lora", r=32), stream(0, "b"))
    for site_id in molora.sites:
        assert site_param_count(molora[site_id])["theta_E"] == site_param_count(lora[site_id])["theta_E"]
    assert trainable_param_count(molora)["theta_E"] == trainable_param_count(lora)["theta_E"]
    assert trainable_param_count(lora)["theta_G"] == 0


def test_spec_validation():
    with pytest.raises(ConfigError, match="N >= 1"):
        AdapterSpec(mode="molora", N=0)
    with pytest.raises(ConfigError):
        AdapterSpec(mode="lora", N=2)
    with pytest.raises(ConfigError):
        AdapterSpec(mode="bogus")
    assert (AdapterSpec().N, AdapterSpec().r) == (8, 4)
    assert (AdapterSpec(mode="lora").N, AdapterSpec(mode="lora").r) == (1, 32)


def test_site_rejects_wrong_width():
    m = tiny_model()
    site = tiny_sites(m)[SiteId(0, "q")]
    with pytest.raises(ShapeError, match="layers.0.q"):
        modulated_forward(site, Tensor(np.zeros((2, TINY.d_model + 1))))


def test_default_sites_are_q_v_ffn_down_of_every_layer():
    m = tiny_model()
    sites = inject(m, AdapterSpec(), stream(0, "a"))
    assert [str(s) for s in sites.sites] == [
        "layers.0.q", "layers.0.v", "layers.0.ffn_down", "layers.1.q", "layers.1.v", "layers.1.ffn_down"]


@settings(max_examples=10)
@given(st.integers(0, 10_000))
def test_full_modulated_transformer_grad_check(seed):
    m = tiny_model(seed % 3)
    # unit-scale adapters keep router gradients well above the 1e-8 floor; through
    # the whole network round-off at h=1e-5 is ~1e-11 absolute, so use h=1e-3
    sites = tiny_sites(m, seed=seed, scale=1.0, N=2, r=2)
    tokens = np.random.default_rng(seed).integers(0, TINY.vocab_size, size=(1, 5))
    targets = np.roll(tokens, -1)
    f = lambda _: ad.cross_entropy(forward(m, tokens, sites), targets)  # noqa: E731
    site = sites[SiteId(1, "q")]
    assert finite_diff_check(f, site.router_W, h=1e-3, where=beta_rows(site)) < 1e-4
    for p in (site.A, site.B):
        assert finite_diff_check(f, p, h=1e-3) < 1e-4


def test_identity_low_rank_product_adds_the_input():
    m = tiny_model()
    k = TINY.d_model
    sites = tiny_sites(m, scale=0, mode="lora", r=k)
    site = sites[SiteId(0, "q")]
    site.A.data[:] = np.eye(k)
    site.B.data[:] = np.eye(k)
    x = np.random.default_rng(4).normal(size=(3, k))
    base = x @ site.weight.data.T + site.bias.data
    np.testing.assert_allclose(lora_forward(site, Tensor(x)).data, base + x, atol=1e-12)


def test_single_block_molora_is_lora():
    m = tiny_model()
    molora = tiny_sites(m, seed=5, router=False, N=1, r=3)
    lora = tiny_sites(m, seed=5, scale=0, mode="lora", r=3)
    x = Tensor(np.random.default_rng(5).normal(size=(4, TINY.d_model)))
    for site_id in molora.sites:
        a, b = molora[site_id], lora[site_id]
        b.A.data[:] = a.A.data
        b.B.data[:] = a.B.data
        if site_id.kind != "ffn_down":
            np.testing.assert_array_equal(molora_forward(a, x).data, lora_forward(b, x).data)


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_gate_argmax_matches_logit_argmax(seed):
    m = tiny_model()
    site = tiny_sites(m, seed=seed, scale=1.0)[SiteId(1, "v")]
    x = np.random.default_rng(seed).normal(size=(6, TINY.d_model))
    gate = route(site, Tensor(x))
    assert np.array_equal(gate.full.data.argmax(-1), (x @ site.router_W.data.T).argmax(-1))
