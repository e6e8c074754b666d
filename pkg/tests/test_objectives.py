import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moei import autodiff as ad
from moei.adapters import AdapterSpec, inject
from moei.autodiff import Tensor
from moei.bench.metrics import predict
from moei.backbone import Backbone, ModelConfig, forward, freeze, unfreeze
from moei.data import TaskSample, collate
from moei.errors import ConfigError, ContractError, NumericError
from moei.objectives import AdamW, OptimizerState, adamw_step, combined_loss, modulation_loss, task_loss
from moei.rng import stream

from conftest import tiny_model


def gi(*toks, target=(30,)):
    return TaskSample((16,), toks, target, "GI")


def ei(*toks, target=(31,)):
    return TaskSample((17,), toks, target, "EI", "cognition")


GI_BATCH = [gi(20, 21), gi(22, 23, 24), gi(25)]
EI_BATCH = [ei(20, 21), ei(26, 27), ei(28, 29, 32, target=(33, 34)), ei(35)]


def test_modulation_loss_is_ln9_at_uniform_gate(tiny):
    sites = inject(tiny, AdapterSpec(), stream(0, "a")).eval()
    assert abs(modulation_loss(tiny, sites, GI_BATCH).item() - math.log(9)) < 1e-5


@pytest.mark.parametrize("N", [1, 3, 8])
def test_modulation_loss_is_ln_n_plus_one_for_any_n(tiny, N):
    sites = inject(tiny, AdapterSpec(N=N, r=2), stream(0, "a")).eval()
    assert abs(modulation_loss(tiny, sites, GI_BATCH).item() - math.log(N + 1)) < 1e-5


def test_modulation_loss_vanishes_as_alpha_saturates():
    # per token the loss is -log G[alpha]; it tends to 0 as the alpha logit grows
    prev = math.inf
    for big in (1.0, 5.0, 20.0, 60.0):
        z = Tensor(np.array([[big] + [0.0] * 8]))
        loss = ad.cross_entropy(z, np.array([0])).item()
        assert 0.0 <= loss < prev
        assert abs(loss - math.log1p(8 * math.exp(-big))) < 1e-12
        prev = loss


def test_modulation_gradient_pushes_alpha_up_and_betas_down():
    logits = Tensor(np.zeros((1, 9)), requires_grad=True)
    ad.backward(ad.cross_entropy(logits, np.array([0])))
    assert logits.grad[0, 0] < 0 and np.all(logits.grad[0, 1:] > 0)
    np.testing.assert_allclose(logits.grad[0], np.full(9, 1 / 9) - np.eye(9)[0])


def test_router_gradient_for_one_token_batch(tiny):
    # with gate G and router input x, dL/dW = (G - onehot) outer x (mean over sites)
    sites = inject(tiny, AdapterSpec(), stream(0, "a")).train()
    batch = collate([gi(20, 21)])
    ad.backward(modulation_loss(tiny, sites, batch))
    for site in sites:
        g = site.router_W.grad
        # the alpha row moves opposite to the beta rows and all beta rows agree at a uniform gate
        np.testing.assert_allclose(g[0], -8 * g[1], atol=1e-12)
        for i in range(2, 9):
            np.testing.assert_allclose(g[i], g[1], atol=1e-12)
        assert g.any()


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_modulation_gradient_matches_closed_form(seed):
    # on a single-token gate the router-logit gradient is G - onehot(alpha)
    rng = np.random.default_rng(seed)
    z = Tensor(rng.normal(size=(5, 9)), requires_grad=True)
    ad.backward(ad.cross_entropy(z, np.zeros(5, dtype=int)))
    p = np.exp(z.data - z.data.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(z.grad, (p - np.eye(9)[0]) / 5, atol=1e-12)


def test_modulation_step_raises_alpha_mass():
    m = tiny_model(config=ModelConfig(vocab_size=40, d_model=8, n_layers=1, n_heads=2, d_ff=16, max_seq_len=16))
    freeze(m)
    sites = inject(m, AdapterSpec(dropout_p=0.0), stream(0, "a")).train()
    opt = AdamW(sites.named_parameters(), lr=0.05)
    before = modulation_loss(m, sites, GI_BATCH).item()
    for _ in range(20):
        ad.backward(modulation_loss(m, sites, GI_BATCH))
        opt.step()
    after = modulation_loss(m, sites, GI_BATCH).item()
    assert after < before
    alpha = np.concatenate([g.alpha_soft.ravel() for g in sites.gates().values()])
    assert alpha.mean() > 1 / 9


def test_modulation_loss_needs_routers(tiny):
    with pytest.raises(ContractError):
        modulation_loss(tiny, None, GI_BATCH)
    lora = inject(tiny, AdapterSpec(mode="lora", r=4), stream(0, "a"))
    with pytest.raises(ContractError):
        modulation_loss(tiny, lora, GI_BATCH)


def test_losses_reject_the_wrong_domain(tiny):
    sites = inject(tiny, AdapterSpec(), stream(0, "a"))
    with pytest.raises(ContractError):
        task_loss(tiny, sites, GI_BATCH)
    with pytest.raises(ContractError):
        modulation_loss(tiny, sites, EI_BATCH)


def test_uniform_logits_give_ln_vocab():
    m = Backbone(ModelConfig(), stream(0, "u"))
    for name, t in m.named_parameters():
        if not name.endswith("_gain"):
            t.data[:] = 0.0
    assert abs(task_loss(m, None, EI_BATCH).item() - math.log(512)) < 1e-5


def test_task_loss_ignores_masked_instruction_tokens(tiny):
    # a detached-logit probe: unscored positions can change arbitrarily
    a = collate([ei(20, 21)])
    b = collate([TaskSample((18,), (20, 21), (31,), "EI", "cognition")])
    assert np.array_equal(a.targets, b.targets)
    scored = a.targets != -100
    assert not scored[:, : a.inputs.shape[1] - 2].any()
    logits = forward(tiny, a.inputs).data
    probe = logits.copy()
    probe[~scored] += 100.0  # perturb every unscored position
    la = ad.cross_entropy(Tensor(logits), a.targets).item()
    lb = ad.cross_entropy(Tensor(probe), a.targets).item()
    assert la == lb


@pytest.mark.parametrize("lam,task,mod,total", [(0.0, 2.0, 1.0, 2.0), (0.1, 2.0, 1.0, 2.1), (2.0, 2.0, 1.0, 4.0)])
def test_combined_loss_values(lam, task, mod, total):
    out = combined_loss(task, mod, lam)
    assert abs(out.total - total) < 1e-12
    assert out.task_loss == task and out.modulation_loss == mod and out.lam == lam


@settings(max_examples=100)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 5), st.floats(0, 5), st.floats(0, 5))
def test_combined_loss_is_linear_in_lambda(task, mod, l1, l2, l3):
    totals = [combined_loss(task, mod, lam).total for lam in (l1, l2, l3)]
    for lam, tot in zip((l1, l2, l3), totals):
        assert abs(tot - (task + lam * mod)) <= 1e-6 * max(1.0, abs(tot))


def test_combined_loss_tensor_matches_total(tiny):
    sites = inject(tiny, AdapterSpec(), stream(0, "a")).eval()
    out = combined_loss(task_loss(tiny, sites, EI_BATCH), modulation_loss(tiny, sites, GI_BATCH), 0.1)
    assert abs(out.tensor.item() - out.total) < 1e-6


def test_combined_loss_errors():
    with pytest.raises(ConfigError):
        combined_loss(1.0, 1.0, -0.1)
    with pytest.raises(NumericError):
        combined_loss(float("nan"), 1.0, 0.1)


def test_adamw_two_hand_rolled_steps():
    p = Tensor(np.zeros(1), requires_grad=True)
    state = OptimizerState(lr=0.1)
    expected = []
    m = v = 0.0
    x = 0.0
    for t in (1, 2):
        m = 0.9 * m + 0.1
        v = 0.999 * v + 0.001
        x -= 0.1 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        expected.append(x)
    for t in range(2):
        p.grad = np.ones(1)
        adamw_step(state, [("p", p)])
        assert abs(p.data[0] - expected[t]) < 1e-12
        assert p.grad is None
    assert abs(expected[0] + 0.1) < 1e-6 and abs(expected[1] + 0.2) < 1e-6


def test_adamw_zero_gradient_is_a_no_op_without_decay():
    p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    state = OptimizerState(lr=0.1)
    for _ in range(3):
        p.grad = np.zeros(2)
        adamw_step(state, [("p", p)])
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_adamw_decoupled_decay_shrinks_geometrically():
    p = Tensor(np.array([2.0]), requires_grad=True)
    state = OptimizerState(lr=0.1, weight_decay=0.5)
    for k in range(1, 4):
        p.grad = np.zeros(1)
        adamw_step(state, [("p", p)])
        assert abs(p.data[0] - 2.0 * (1 - 0.05) ** k) < 1e-12


def test_adamw_aborts_on_nan_before_touching_anything():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    a.grad = np.ones(2)
    b.grad = np.array([np.nan, 1.0])
    state = OptimizerState(lr=0.1)
    with pytest.raises(NumericError, match="'b'"):
        adamw_step(state, [("a", a), ("b", b)])
    np.testing.assert_array_equal(a.data, 1.0)
    assert state.step == 0


def test_frozen_backbone_survives_many_steps(tiny):
    snap = tiny.snapshot()
    sites = inject(tiny, AdapterSpec(), stream(0, "a")).train()
    opt = AdamW(sites.named_parameters(), lr=1e-2)
    for _ in range(5):
        parts = combined_loss(task_loss(tiny, sites, EI_BATCH), modulation_loss(tiny, sites, GI_BATCH), 0.1)
        ad.backward(parts.tensor)
        opt.step()
    assert tiny.snapshot() == snap


def _overfit_model():
    return Backbone(ModelConfig(vocab_size=64, d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq_len=16),
                    stream(0, "overfit"))


def test_overfits_four_samples():
    m = _overfit_model()
    unfreeze(m)
    opt = AdamW(m.named_parameters(), lr=1e-2)
    for _ in range(500):
        ad.backward(task_loss(m, None, EI_BATCH))
        opt.step()
    assert task_loss(m, None, EI_BATCH).item() < 0.01


def test_adapters_alone_memorize_four_samples():
    # the head is tied to a frozen embedding behind a frozen layer norm, which caps
    # the logit margin on an untrained backbone; greedy answers must still be exact
    m = _overfit_model()
    freeze(m)
    sites = inject(m, AdapterSpec(dropout_p=0.0), stream(0, "a")).train()
    opt = AdamW(sites.named_parameters(), lr=1e-2)
    for _ in range(300):
        ad.backward(task_loss(m, sites, EI_BATCH))
        opt.step()
    assert predict(m, sites, EI_BATCH) == [list(s.target) for s in EI_BATCH]
