import hashlib
import math

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from aejoint.enhancer import batch_wsdr, build_unet, enhance_tensor
from aejoint.errors import ConfigError, InvalidInput
from aejoint.strategies import (
    Batch,
    OptimizerConfig,
    StepContext,
    StrategyConfig,
    TaskData,
    cat_losses,
    iterative_step,
    make_optimizer,
    mtl_loss,
    normalize_weights,
    run_strategy,
    weight_entropy,
    weighted_ae_loss,
)
from aejoint.tasks import build_task_model

from conftest import TINY_AE, TINY_CAT

# per-sample task losses: zero or within [1e-12, 1e6] (subnormals would underflow under scaling)
loss_values = st.one_of(st.just(0.0), st.floats(1e-12, 1e6))
loss_vectors = st.lists(loss_values, min_size=1, max_size=32).filter(lambda v: sum(v) > 0)


def state_hash(model):
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class TestWeights:
    def test_examples(self):
        np.testing.assert_array_equal(normalize_weights([1, 1, 1, 1]), [0.25] * 4)
        np.testing.assert_array_equal(normalize_weights([3, 1]), [0.75, 0.25])
        np.testing.assert_array_equal(normalize_weights([6, 2]), [0.75, 0.25])

    def test_all_zero_falls_back_to_uniform(self):
        np.testing.assert_array_equal(normalize_weights([0, 0, 0]), [1 / 3] * 3)

    def test_negative_rejected(self):
        with pytest.raises(InvalidInput):
            normalize_weights([1.0, -0.1])
        with pytest.raises(InvalidInput):
            normalize_weights([])

    @settings(max_examples=300, deadline=None)
    @given(v=loss_vectors)
    def test_simplex(self, v):
        w = normalize_weights(v)
        assert abs(w.sum() - 1) <= 1e-9
        assert np.all((w >= 0) & (w <= 1))

    @settings(max_examples=300, deadline=None)
    @given(v=loss_vectors, k=st.integers(-20, 20))
    def test_scale_invariance_exact_for_binary_scales(self, v, k):
        np.testing.assert_array_equal(normalize_weights(np.asarray(v) * 2.0 ** k), normalize_weights(v))

    @settings(max_examples=300, deadline=None)
    @given(v=loss_vectors, c=st.floats(1e-3, 1e3))
    def test_scale_invariance_general(self, v, c):
        np.testing.assert_allclose(normalize_weights(np.asarray(v) * c), normalize_weights(v), rtol=1e-14, atol=1e-300)

    @settings(max_examples=300, deadline=None)
    @given(v=st.lists(st.floats(0.01, 100), min_size=2, max_size=16), i=st.integers(0, 15), d=st.floats(0.1, 10))
    def test_monotonicity(self, v, i, d):
        i %= len(v)
        base = normalize_weights(v)
        bumped = list(v)
        bumped[i] += d
        after = normalize_weights(bumped)
        assert after[i] > base[i]
        others = [j for j in range(len(v)) if j != i]
        assert np.all(after[others] <= base[others])

    def test_order_preserving(self):
        v = [0.3, 2.0, 2.0, 0.1]
        w = normalize_weights(v)
        assert w[1] == w[2] > w[0] > w[3]

    def test_entropy(self):
        assert weight_entropy([0.25] * 4) == pytest.approx(math.log(4))
        assert weight_entropy([1.0, 0.0]) == 0.0


class TestWeightedLoss:
    def test_examples(self):
        assert float(weighted_ae_loss(torch.tensor([-0.8]), [1.0])) == pytest.approx(-0.8)
        assert float(weighted_ae_loss(torch.full((4,), -0.5), [0.25] * 4)) == pytest.approx(-0.125)
        assert float(weighted_ae_loss(torch.tensor([-1.0, 0.0]), [0.75, 0.25])) == pytest.approx(-0.375)

    def test_optimum(self):
        w = normalize_weights([0.2, 1.5, 0.7])
        assert float(weighted_ae_loss(torch.full((3,), -1.0), w)) == pytest.approx(-1 / 3)

    def test_length_mismatch(self):
        with pytest.raises(InvalidInput):
            weighted_ae_loss(torch.zeros(3), [0.5, 0.5])

    def test_heavy_sample_dominates_gradient(self):
        torch.manual_seed(0)
        theta = torch.randn(20, dtype=torch.float64, requires_grad=True)
        xa, xb = torch.randn(20, dtype=torch.float64), torch.randn(20, dtype=torch.float64)

        def per(t):
            return torch.stack([((t - xa) ** 2).mean(), ((t - xb) ** 2).mean()])

        w = normalize_weights([10.0, 1.0])
        assert w[0] == pytest.approx(10 / 11)
        g_w = torch.autograd.grad(weighted_ae_loss(per(theta), w), theta)[0]
        g_u = torch.autograd.grad(weighted_ae_loss(per(theta), [0.5, 0.5]), theta)[0]
        g_a = torch.autograd.grad(per(theta)[0], theta)[0]
        g_b = torch.autograd.grad(per(theta)[1], theta)[0]
        torch.testing.assert_close(g_w, (w[0] * g_a + w[1] * g_b) / 2)
        cos = lambda a, b: float(a @ b / (a.norm() * b.norm()))
        assert cos(g_w, g_a) > cos(g_u, g_a)


class TestMtl:
    def test_examples(self):
        assert mtl_loss(-1.0, 0.0) == -1.0
        assert mtl_loss(0.0, math.log(35)) == pytest.approx(math.log(35))
        assert mtl_loss(-0.4, 2.1) == pytest.approx(1.7)

    def test_gradient_contract(self, toy_data):
        ae = build_unet(TINY_AE, 0).train()
        cat = build_task_model("scr", toy_data.label_space, TINY_CAT, seed=0).train()
        batch = Batch.from_mixtures(toy_data.mixtures(0)[:4], toy_data)

        def grads(use_ae, use_ca):
            ae.zero_grad(set_to_none=True)
            cat.zero_grad(set_to_none=True)
            torch.manual_seed(0)
            est = enhance_tensor(ae, batch.noisy)
            l_ae = batch_wsdr(batch.clean, est, batch.noisy, batch.lengths).mean()
            l_ca = cat_losses(cat, est, batch.lengths, batch.targets)[0].mean()
            total = mtl_loss(l_ae if use_ae else 0.0 * l_ae.detach(), l_ca if use_ca else l_ca.detach())
            total.backward()
            snap = lambda m: [None if p.grad is None else p.grad.clone() for p in m.parameters()]
            return snap(ae), snap(cat)

        ae_both, cat_both = grads(True, True)
        _, cat_ca_only = grads(False, True)
        ae_ae_only, _ = grads(True, False)
        for a, b in zip(cat_both, cat_ca_only):
            assert torch.equal(a, b)
        assert any(not torch.equal(a, b) for a, b in zip(ae_both, ae_ae_only))


class TestIterativeStep:
    def _setup(self, data, seed=0):
        ae = build_unet(TINY_AE, seed)
        cat = build_task_model("scr", data.label_space, TINY_CAT, seed=seed)
        ctx = StepContext(make_optimizer(ae, OptimizerConfig(1e-3)), make_optimizer(cat, OptimizerConfig(1e-3)), data)
        return ae, cat, ctx

    def test_freeze_contract_over_fifty_steps(self, toy_data):
        ae, cat, ctx = self._setup(toy_data)
        trace = {}
        real_step = ctx.cat_opt.step

        def observed_step(*a, **k):
            out = real_step(*a, **k)
            trace["ae_after_phase1"] = state_hash(ae)
            trace["cat_after_phase1"] = state_hash(cat)
            return out

        ctx.cat_opt.step = observed_step
        mixes = toy_data.mixtures(0)
        for step in range(50):
            items = [mixes[(4 * step + j) % len(mixes)] for j in range(4)]
            ae_before, cat_before = state_hash(ae), state_hash(cat)
            iterative_step(ae, cat, items, ctx)
            assert trace["ae_after_phase1"] == ae_before
            assert trace["cat_after_phase1"] != cat_before
            assert state_hash(cat) == trace["cat_after_phase1"]
            assert state_hash(ae) != ae_before

    def test_report(self, toy_data):
        ae, cat, ctx = self._setup(toy_data)
        rep = iterative_step(ae, cat, toy_data.mixtures(0)[:5], ctx)
        assert len(rep.weights) == 5 and sum(rep.weights) == pytest.approx(1.0)
        np.testing.assert_allclose(rep.weights, normalize_weights(rep.weight_losses))
        assert rep.ae_loss == pytest.approx(np.dot(rep.weights, rep.ae_losses) / 5, abs=1e-6)

    def test_empty_batch(self, toy_data):
        ae, cat, ctx = self._setup(toy_data)
        with pytest.raises(InvalidInput):
            iterative_step(ae, cat, [], ctx)


class ToyCat(nn.Module):
    """Linear classifier over 9 spectral band energies: 100 parameters."""

    def __init__(self):
        super().__init__()
        self.fc = nn.Linear(9, 10).double()

    def forward(self, wave):
        spec = torch.fft.rfft(wave).abs() ** 2
        bands = torch.stack([b.sum(-1) for b in spec.chunk(9, dim=-1)], -1)
        return self.fc(torch.log1p(bands))


def test_stop_gradient_contract():
    torch.manual_seed(0)
    cat = ToyCat()
    assert sum(p.numel() for p in cat.parameters()) == 100
    theta = torch.randn(4, 64, dtype=torch.float64, requires_grad=True)  # stand-in enhancer output
    clean = torch.randn(4, 64, dtype=torch.float64)
    noisy = clean + torch.randn(4, 64, dtype=torch.float64)
    targets = torch.tensor([1, 3, 5, 7])

    def eq3(params):
        with torch.no_grad():
            torch.nn.utils.vector_to_parameters(params, cat.parameters())
        losses = F.cross_entropy(cat(theta), targets, reduction="none")
        per_ae = batch_wsdr(clean, theta, noisy, torch.full((4,), 64))
        return weighted_ae_loss(per_ae, normalize_weights(losses))

    p0 = torch.nn.utils.parameters_to_vector(cat.parameters()).detach().clone()
    loss = eq3(p0)
    loss.backward()
    assert all(p.grad is None or torch.all(p.grad == 0) for p in cat.parameters())
    assert theta.grad is not None and torch.any(theta.grad != 0)
    # the loss value still depends on the CAT through the weights, but only as a constant:
    # perturbing CAT parameters after the weights are fixed leaves the weighted loss unchanged
    w = normalize_weights(F.cross_entropy(cat(theta), targets, reduction="none"))
    per_ae = batch_wsdr(clean, theta, noisy, torch.full((4,), 64))
    h = 1e-6
    for i in range(100):
        e = torch.zeros(100, dtype=torch.float64)
        e[i] = h
        with torch.no_grad():
            torch.nn.utils.vector_to_parameters(p0 + e, cat.parameters())
            plus = float(weighted_ae_loss(per_ae, w))
            torch.nn.utils.vector_to_parameters(p0 - e, cat.parameters())
            minus = float(weighted_ae_loss(per_ae, w))
        assert abs((plus - minus) / (2 * h)) <= 1e-8


class TestRunStrategy:
    def test_baseline_separable_task(self, toy_data):
        cfg = StrategyConfig("baseline", "scr", cat_optimizer=OptimizerConfig(1e-2), epochs=15, batch_size=4)
        res = run_strategy(cfg, toy_data, cat_config=TINY_CAT)
        epochs = [r for r in res.log if r["record"] == "epoch"]
        assert epochs[-1]["train_metric"] >= 0.95
        assert res.ae is None

    def test_cold_cascade_improves_enhancer_and_freezes_it(self, toy_data):
        cfg = StrategyConfig("cold_cascade", "scr", ae_optimizer=OptimizerConfig(3e-3), epochs=1, ae_epochs=8,
                             batch_size=4, ae_batch_size=4)
        untrained = build_unet(TINY_AE, cfg.seed + 7919).eval()
        mixes = toy_data.mixtures(0)
        batch = Batch.from_mixtures(mixes, toy_data)
        with torch.no_grad():
            before = float(batch_wsdr(batch.clean, enhance_tensor(untrained, batch.noisy), batch.noisy, batch.lengths).mean())
        res = run_strategy(cfg, toy_data, TINY_AE, TINY_CAT)
        with torch.no_grad():
            after = float(batch_wsdr(batch.clean, enhance_tensor(res.ae, batch.noisy), batch.noisy, batch.lengths).mean())
        assert after < before
        assert not any(p.requires_grad for p in res.ae.parameters())

    @pytest.mark.parametrize("strategy", ["da", "cold_cascade_da", "mtl", "iterative"])
    def test_logs_and_determinism(self, toy_data, strategy):
        cfg = StrategyConfig(strategy, "scr", epochs=1, ae_epochs=1, batch_size=8, ae_batch_size=8)
        a = run_strategy(cfg, toy_data, TINY_AE, TINY_CAT)
        b = run_strategy(cfg, toy_data, TINY_AE, TINY_CAT)
        assert a.log == b.log
        batch_rec = [r for r in a.log if r["record"] == "batch" and r["phase"] == "train"]
        assert batch_rec and set(batch_rec[0]) >= {"epoch", "batch", "strategy", "ae_loss", "ca_loss",
                                                   "mean_weight_entropy"}
        if strategy == "iterative":
            assert all(r["mean_weight_entropy"] is not None for r in batch_rec)

    def test_missing_noise(self, toy_data):
        data = TaskData("scr", toy_data.label_space, toy_data.train_clean, [], toy_data.plan)
        with pytest.raises(ConfigError):
            run_strategy(StrategyConfig("da", "scr", epochs=1), data)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            StrategyConfig("joint", "scr")
        with pytest.raises(ConfigError):
            StrategyConfig("da", "scr", batch_size=0)
        with pytest.raises(ConfigError):
            StrategyConfig("da", "scr", snr_train_range=(10, 0))

    def test_task_defaults(self):
        assert StrategyConfig("da", "scr").cat_optimizer.lr_at(0) == 1e-2
        assert StrategyConfig("da", "scr").cat_optimizer.lr_at(20) == 1e-3
        assert StrategyConfig("da", "ser").cat_optimizer.lr == 1e-3
        assert StrategyConfig("da", "asr").cat_optimizer.lr == 1e-4
        assert StrategyConfig("da", "asc").cat_optimizer.weight_decay > 0
        assert StrategyConfig("da", "scr").cat_optimizer.weight_decay > 0
        cfg = StrategyConfig("iterative", "scr")
        assert cfg.ae_batch_size == 16 and cfg.ae_optimizer.lr == 1e-4
