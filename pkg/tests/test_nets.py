import numpy as np
import pytest
import torch

from dpr.losses import bc_loss
from dpr.nets import (
    CrossAttention,
    Encoder,
    EncoderConfig,
    Policy,
    PolicyHead,
    PretrainModel,
    ProprioEncoder,
    momentum_update,
)
from oracles import mlp_forward_oracle

TABLE_SCHEMA = [
    ("joint_position", 7),
    ("gripper_position", 2),
    ("joint_velocity", 7),
    ("gripper_velocity", 2),
    ("tcp_position", 3),
    ("tcp_rotation", 4),
    ("goal_position", 3),
    ("tcp_to_goal", 3),
]


class TestEncoder:
    def test_resnet_224_gives_7x7_grid(self):
        enc = Encoder(EncoderConfig(variant="resnet18"))
        grid, pooled = enc(torch.randn(1, 3, 224, 224))
        assert grid.shape[-2:] == (7, 7)
        assert pooled.shape == (1, 512)

    def test_tiny_112_gives_7x7_grid(self):
        enc = Encoder(EncoderConfig(variant="tiny"))
        grid, pooled = enc(torch.randn(1, 3, 112, 112))
        assert grid.shape == (1, 128, 7, 7)

    def test_bad_resolution_names_divisibility(self):
        enc = Encoder(EncoderConfig(variant="tiny"))
        with pytest.raises(ValueError, match="divisible"):
            enc(torch.randn(1, 3, 100, 100))
        with pytest.raises(ValueError, match="divisible"):
            Encoder(EncoderConfig(variant="resnet18"))(torch.randn(1, 3, 112, 112))

    def test_duplicate_inputs_identical_in_eval(self):
        enc = Encoder(EncoderConfig(variant="tiny")).eval()
        x = torch.randn(1, 3, 64, 64)
        grid, pooled = enc(torch.cat([x, x]))
        assert torch.equal(grid[0], grid[1])
        assert torch.equal(pooled[0], pooled[1])


class TestMomentumUpdate:
    def _pair(self):
        torch.manual_seed(0)
        a = torch.nn.Linear(3, 3)
        torch.manual_seed(1)
        b = torch.nn.Linear(3, 3)
        return a, b

    def test_m_one_keeps_momentum_params(self):
        online, target = self._pair()
        before = [p.clone() for p in target.parameters()]
        momentum_update(online, target, 1.0)
        for p, q in zip(target.parameters(), before):
            assert torch.equal(p, q)

    def test_m_zero_copies_online(self):
        online, target = self._pair()
        momentum_update(online, target, 0.0)
        for p, q in zip(target.parameters(), online.parameters()):
            assert torch.equal(p, q)

    def test_arithmetic(self):
        online, target = self._pair()
        with torch.no_grad():
            for p in online.parameters():
                p.fill_(0.0)
            for p in target.parameters():
                p.fill_(1.0)
        momentum_update(online, target, 0.9)
        for p in target.parameters():
            assert torch.allclose(p, torch.full_like(p, 0.9))

    def test_shape_mismatch_rejected(self):
        online = torch.nn.Linear(3, 3)
        target = torch.nn.Linear(4, 4)
        with pytest.raises(ValueError):
            momentum_update(online, target, 0.5)

    def test_convex_combination_bound(self):
        online, target = self._pair()
        before = [p.clone() for p in target.parameters()]
        momentum_update(online, target, 0.7)
        for p, prev, q in zip(target.parameters(), before, online.parameters()):
            lo = torch.minimum(prev, q) - 1e-7
            hi = torch.maximum(prev, q) + 1e-7
            assert torch.all(p >= lo) and torch.all(p <= hi)

    def test_momentum_branch_receives_no_gradients(self):
        model = PretrainModel(EncoderConfig(variant="tiny"))
        x = torch.randn(2, 3, 32, 32)
        pix, k = model.forward_online(x)
        (pix.mean() + k.mean()).backward()
        for mod in model.momentum_branches():
            for p in mod.parameters():
                assert not p.requires_grad and p.grad is None


class TestProprioEncoder:
    def test_table_schema_gives_8x8_sequence(self):
        enc = ProprioEncoder(TABLE_SCHEMA)
        states = {name: torch.randn(2, dim) for name, dim in TABLE_SCHEMA}
        out = enc(states)
        assert out.shape == (2, 8, 8)

    def test_zero_parameters_give_zero_output(self):
        enc = ProprioEncoder(TABLE_SCHEMA)
        with torch.no_grad():
            for p in enc.parameters():
                p.zero_()
        states = {name: torch.randn(1, dim) for name, dim in TABLE_SCHEMA}
        assert torch.allclose(enc(states), torch.zeros(1, 8, 8))

    def test_heads_are_state_specific(self):
        schema = [("a", 2), ("b", 2)]
        enc = ProprioEncoder(schema).eval()
        sa, sb = torch.randn(1, 2), torch.randn(1, 2)
        out = enc({"a": sa, "b": sb})
        swapped = enc({"a": sb, "b": sa})
        assert not torch.allclose(out, swapped)

    def test_layernorm_statistics(self):
        enc = ProprioEncoder(TABLE_SCHEMA)
        states = {name: torch.randn(3, dim) for name, dim in TABLE_SCHEMA}
        out = enc(states)
        # zero mean / unit variance along the 8-dim feature axis, within eps
        assert torch.allclose(out.mean(dim=-1), torch.zeros(3, 8), atol=1e-5)
        assert torch.allclose(out.var(dim=-1, unbiased=False), torch.ones(3, 8), atol=1e-3)

    def test_schema_errors(self):
        enc = ProprioEncoder([("a", 2)])
        with pytest.raises(ValueError, match="missing"):
            enc({})
        with pytest.raises(ValueError, match="width"):
            enc({"a": torch.randn(1, 3)})


class TestCrossAttention:
    def test_single_key_copies_value_row(self):
        attn = CrossAttention(d_vis=16, d=8)
        z = torch.randn(1, 5, 16)
        o = torch.randn(1, 1, 8)
        out = attn(z, o)
        expected = attn.v_proj(o)[0, 0]
        for t in range(5):
            assert torch.allclose(out[0, t], expected, atol=1e-6)

    def test_equal_logits_average_values(self):
        attn = CrossAttention(d_vis=4, d=8)
        with torch.no_grad():
            attn.q_proj.weight.zero_()
            attn.q_proj.bias.zero_()
        z = torch.randn(1, 3, 4)
        o = torch.randn(1, 6, 8)
        out = attn(z, o)
        expected = attn.v_proj(o).mean(dim=1)
        assert torch.allclose(out[0, 0], expected[0], atol=1e-6)

    def test_rows_sum_to_one_under_query_scaling(self):
        attn = CrossAttention(d_vis=4, d=8)
        z = torch.randn(1, 3, 4)
        o = torch.randn(1, 5, 8)
        for scale in (1.0, 3.0):
            q = attn.q_proj(z * scale)
            k = attn.k_proj(o)
            w = torch.softmax(q @ k.transpose(-1, -2) / attn.d**0.5, dim=-1)
            assert torch.allclose(w.sum(dim=-1), torch.ones(1, 3), atol=1e-6)

    def test_token_permutation_invariance(self):
        attn = CrossAttention(d_vis=6, d=8)
        z = torch.randn(2, 4, 6)
        o = torch.randn(2, 5, 8)
        perm = torch.randperm(5)
        assert torch.allclose(attn(z, o), attn(z, o[:, perm]), atol=1e-6)

    def test_empty_states_rejected(self):
        attn = CrossAttention(d_vis=4, d=8)
        with pytest.raises(ValueError):
            attn(torch.randn(1, 2, 4), torch.randn(1, 0, 8))


class TestPolicyHead:
    def test_zero_parameters_give_zero_action(self):
        head = PolicyHead(10, 3)
        with torch.no_grad():
            for p in head.parameters():
                p.zero_()
        assert torch.equal(head(torch.randn(2, 10)), torch.zeros(2, 3))

    def test_deterministic(self):
        head = PolicyHead(6, 2).eval()
        x = torch.randn(1, 6)
        assert torch.equal(head(x), head(x))

    def test_matches_matrix_arithmetic_oracle(self, rng):
        head = PolicyHead(5, 3).eval()
        layers = []
        linears = [m for m in head.net if isinstance(m, torch.nn.Linear)]
        for i, lin in enumerate(linears):
            layers.append((lin.weight.detach().numpy(), lin.bias.detach().numpy(),
                           i < len(linears) - 1))
        x = rng.standard_normal((4, 5)).astype(np.float32)
        expected = mlp_forward_oracle(layers, x)
        out = head(torch.tensor(x)).detach().numpy()
        np.testing.assert_allclose(out, expected, atol=1e-6)


class TestPolicy:
    def _policy(self, use_proprio=True):
        enc = Encoder(EncoderConfig(variant="tiny"))
        return Policy(enc, [("a", 2), ("b", 3)], goal_dim=2, action_dim=3,
                      use_proprio=use_proprio)

    def test_forward_shapes(self):
        policy = self._policy().eval()
        out = policy(torch.randn(2, 3, 32, 32), {"a": torch.randn(2, 2),
                                                 "b": torch.randn(2, 3)}, torch.randn(2, 2))
        assert out.shape == (2, 3)

    def test_proprio_off_excludes_fusion(self):
        policy = self._policy(use_proprio=False).eval()
        out = policy(torch.randn(2, 3, 32, 32), None, torch.randn(2, 2))
        assert out.shape == (2, 3)
        assert not hasattr(policy, "attn")

    def test_gradients_reach_every_component(self):
        policy = self._policy()
        obs = torch.randn(2, 3, 32, 32)
        states = {"a": torch.randn(2, 2), "b": torch.randn(2, 3)}
        loss = bc_loss(policy(obs, states, torch.randn(2, 2)), torch.randn(2, 3))
        loss.backward()
        groups = {
            "proprio": policy.proprio.parameters(),
            "attn": policy.attn.parameters(),
            "head": policy.head.parameters(),
            "encoder": policy.encoder.parameters(),
        }
        for name, params in groups.items():
            norms = [p.grad.norm().item() for p in params if p.grad is not None]
            assert norms and max(norms) > 0, f"no gradient reached {name}"
