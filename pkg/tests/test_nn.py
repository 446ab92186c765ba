import math

import numpy as np
import pytest
import torch

from hiercad import nn as hnn


def small_config(dropout=0.0):
    return hnn.BlockConfig(d_model=8, d_ff=16, heads=2, dropout=dropout)


def grad_check_module(module, *inputs, h=1e-5):
    module = module.double().eval()
    tensors = [t.double().requires_grad_(True) for t in inputs]

    def fn(*ts):
        return module(*ts).pow(2).sum()

    return hnn.central_difference_check(fn, tensors, h=h)


class TestSelfAttention:
    def test_zero_output_projections_identity(self):
        torch.manual_seed(0)
        block = hnn.SelfAttentionBlock(small_config())
        with torch.no_grad():
            block.attn.o_proj.weight.zero_()
            block.attn.o_proj.bias.zero_()
            block.ff.fc2.weight.zero_()
            block.ff.fc2.bias.zero_()
        x = torch.randn(1, 5, 8)
        assert torch.allclose(block.eval()(x), x)

    def test_causal_mask_blocks_future(self):
        torch.manual_seed(1)
        block = hnn.SelfAttentionBlock(small_config()).eval()
        x = torch.randn(1, 6, 8)
        mask = hnn.causal_mask(6)
        base = block(x, mask)
        x2 = x.clone()
        x2[0, 4] += 10.0  # perturb position 4; outputs at < 4 must not move
        pert = block(x2, mask)
        assert torch.allclose(base[0, :4], pert[0, :4], atol=1e-6)
        assert not torch.allclose(base[0, 4:], pert[0, 4:], atol=1e-6)

    def test_gradient_finite_differences(self):
        torch.manual_seed(2)
        block = hnn.SelfAttentionBlock(small_config())
        err = grad_check_module(block, torch.randn(1, 4, 8))
        assert err < 1e-3

    def test_attention_rows_sum_to_one(self):
        torch.manual_seed(3)
        attn = hnn.MultiHeadAttention(8, 2).eval()
        x = torch.randn(1, 5, 8)
        q = attn.q_proj(x).view(1, 5, 2, 4).transpose(1, 2)
        k = attn.k_proj(x).view(1, 5, 2, 4).transpose(1, 2)
        rows = torch.softmax(q @ k.transpose(-2, -1) / 2.0, dim=-1)
        assert torch.allclose(rows.sum(-1), torch.ones(1, 2, 5), atol=1e-6)


class TestCrossAttention:
    def test_singleton_memory(self):
        torch.manual_seed(4)
        block = hnn.CrossAttentionBlock(small_config()).eval()
        x = torch.randn(1, 3, 8)
        mem = torch.randn(1, 1, 8)
        # softmax over a single key is 1: output = x + o_proj(v(mem))
        out = block(x, mem)
        v = block.attn.v_proj(block.ln_m(mem))
        expected = x + block.attn.o_proj(v).expand(1, 3, 8)
        assert torch.allclose(out, expected, atol=1e-6)

    def test_memory_permutation_invariant(self):
        torch.manual_seed(5)
        block = hnn.CrossAttentionBlock(small_config()).eval()
        x = torch.randn(1, 3, 8)
        mem = torch.randn(1, 6, 8)
        perm = torch.randperm(6)
        assert torch.allclose(block(x, mem), block(x, mem[:, perm]), atol=1e-6)

    def test_gradient_finite_differences(self):
        torch.manual_seed(6)
        block = hnn.CrossAttentionBlock(small_config())
        err = grad_check_module(block, torch.randn(1, 3, 8), torch.randn(1, 4, 8))
        assert err < 1e-3


class TestOptimizer:
    def test_zero_grad_no_decay_unchanged(self):
        p = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
        opt = hnn.WarmupAdamW([p], lr=0.1, warmup=10, weight_decay=0.0)
        p.grad = torch.zeros_like(p)
        opt.step()
        assert torch.allclose(p, torch.tensor([1.0, -2.0]))

    def test_warmup_lr_at_step_1000(self):
        p = torch.nn.Parameter(torch.zeros(1))
        opt = hnn.WarmupAdamW([p], lr=0.001, warmup=2000)
        for _ in range(1000):
            p.grad = torch.zeros_like(p)
            opt.step()
        assert opt.current_lr == pytest.approx(0.0005)

    def test_quadratic_bowl_convergence(self):
        torch.manual_seed(7)
        p = torch.nn.Parameter(torch.tensor([3.0, -4.0]))
        target = torch.tensor([1.0, 2.0])
        opt = hnn.WarmupAdamW([p], lr=0.01, warmup=100, weight_decay=0.0)
        for _ in range(5000):
            opt.zero_grad()
            ((p - target) ** 2).sum().backward()
            opt.step()
        assert (p - target).abs().max().item() < 1e-3


class TestSquaredEmd:
    def test_one_hot_at_target_zero(self):
        p = torch.zeros(5)
        p[2] = 1.0
        assert hnn.squared_emd_from_probs(p, torch.tensor(2)).item() == 0.0

    def test_delta_vs_delta_distance(self):
        for j in range(6):
            for k in range(6):
                p = torch.zeros(6)
                p[j] = 1.0
                loss = hnn.squared_emd_from_probs(p, torch.tensor(k)).item()
                assert loss == abs(j - k)

    def test_matches_brute_force_cdf(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            k = int(rng.integers(2, 10))
            logits = torch.tensor(rng.normal(size=k))
            target = int(rng.integers(0, k))
            p = torch.softmax(logits, -1).numpy()
            cdf = np.cumsum(p)
            tgt = (np.arange(k) >= target).astype(float)
            expected = ((cdf - tgt) ** 2).sum()
            got = hnn.squared_emd_loss(logits, torch.tensor(target)).item()
            assert got == pytest.approx(expected, abs=1e-10)

    def test_monotone_in_distance_3class(self):
        # moving mass one bin farther from the target never decreases loss
        for target in range(3):
            for a in np.linspace(0, 1, 21):
                for b in np.linspace(0, 1 - a, 21):
                    p = np.array([a, b, 1 - a - b])
                    dist = np.abs(np.arange(3) - target)
                    for src in range(3):
                        for dst in range(3):
                            if dist[dst] <= dist[src] or p[src] < 0.05:
                                continue
                            q = p.copy()
                            q[src] -= 0.05
                            q[dst] += 0.05
                            l_p = hnn.squared_emd_from_probs(
                                torch.tensor(p), torch.tensor(target)
                            ).item()
                            l_q = hnn.squared_emd_from_probs(
                                torch.tensor(q), torch.tensor(target)
                            ).item()
                            assert l_q >= l_p - 1e-12

    def test_gradient_finite_differences(self):
        torch.manual_seed(9)
        logits = torch.randn(7, dtype=torch.float64, requires_grad=True)

        def fn(lg):
            return hnn.squared_emd_loss(lg, torch.tensor(3))

        assert hnn.central_difference_check(fn, [logits]) < 1e-3


class TestCrossEntropy:
    def test_uniform_is_log_k(self):
        logits = torch.zeros(1, 10)
        loss = hnn.cross_entropy_loss(logits, torch.tensor([4]))
        assert loss.item() == pytest.approx(math.log(10))

    def test_one_hot_near_zero(self):
        logits = torch.zeros(1, 10)
        logits[0, 4] = 100.0
        assert hnn.cross_entropy_loss(logits, torch.tensor([4])).item() < 1e-6

    def test_gradient_finite_differences(self):
        torch.manual_seed(10)
        logits = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)

        def fn(lg):
            return hnn.cross_entropy_loss(lg, torch.tensor([0, 2, 4, 5]))

        assert hnn.central_difference_check(fn, [logits]) < 1e-3


class TestNucleusSample:
    def test_p_one_full_support(self):
        probs = np.array([0.5, 0.3, 0.15, 0.05])
        seen = {hnn.nucleus_sample(probs, 1.0, np.random.default_rng(s)) for s in range(200)}
        assert seen == {0, 1, 2, 3}

    def test_p_08_truncates(self):
        probs = np.array([0.5, 0.3, 0.15, 0.05])
        counts = np.zeros(4)
        rng = np.random.default_rng(11)
        for _ in range(4000):
            counts[hnn.nucleus_sample(probs, 0.8, rng)] += 1
        assert counts[2] == 0 and counts[3] == 0
        assert counts[0] / counts.sum() == pytest.approx(0.625, abs=0.03)

    def test_tiny_p_is_argmax(self):
        probs = np.array([0.2, 0.5, 0.3])
        for s in range(20):
            assert hnn.nucleus_sample(probs, 1e-9, np.random.default_rng(s)) == 1


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        torch.manual_seed(12)
        block = hnn.SelfAttentionBlock(small_config())
        path = tmp_path / "block.ckpt"
        hnn.save_checkpoint(path, block, config={"kind": "test"})
        clone = hnn.SelfAttentionBlock(small_config())
        state, config = hnn.load_checkpoint(path, clone)
        assert config == {"kind": "test"}
        x = torch.randn(1, 4, 8)
        assert torch.allclose(block.eval()(x), clone.eval()(x))
