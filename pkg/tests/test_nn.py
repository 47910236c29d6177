import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hitdvae.nn import (CouplingFlow, GcnBlock, GruCell, LayerNorm, Linear,
                        Module, MultiHeadAttention, causal_mask,
                        shifted_causal_mask, sinusoidal_encoding)
from hitdvae.tensor import ShapeError, Tensor, grad_check, no_grad


def rng_for(seed=0):
    return np.random.default_rng(seed)


def set_identity_projections(mha: MultiHeadAttention):
    d = mha.dim
    for proj in (mha.q_proj, mha.k_proj, mha.v_proj, mha.out_proj):
        proj.weight.data = np.eye(d)
        proj.bias.data = np.zeros(d)


def attention_oracle(q, k, v, wq, bq, wk, bk, wv, bv, wo, bo, heads, mask):
    """Per-row, per-head masked softmax attention with explicit loops."""
    tq, d = q.shape
    tk = k.shape[0]
    dk = d // heads
    qp, kp, vp = q @ wq + bq, k @ wk + bk, v @ wv + bv
    out = np.zeros((tq, d))
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        for i in range(tq):
            logits = np.array([qp[i, sl] @ kp[j, sl] / math.sqrt(dk) for j in range(tk)])
            if mask is not None:
                logits = np.where(mask[i], logits, -1e30)
            e = np.exp(logits - logits.max())
            weights = e / e.sum()
            assert np.all(weights >= 0) and abs(weights.sum() - 1) < 1e-12
            if mask is not None:
                assert np.all(weights[~mask[i]] == 0.0)
            out[i, sl] = sum(weights[j] * vp[j, sl] for j in range(tk))
    return out @ wo + bo


class TestMasks:
    def test_causal_strictly_lower(self):
        m = causal_mask(4)
        for t in range(4):
            for j in range(4):
                assert m[t, j] == (j < t)

    def test_shifted_rows_see_past(self):
        m = shifted_causal_mask(3, 4)  # rows = frames 2..4, keys = frames 1..4
        assert m.tolist() == [[True, False, False, False],
                              [True, True, False, False],
                              [True, True, True, False]]


class TestAttention:
    def test_width_not_divisible(self):
        with pytest.raises(ShapeError, match="divisible"):
            MultiHeadAttention(6, 4, 8, rng_for())

    def test_single_visible_key_returns_that_value(self):
        mha = MultiHeadAttention(4, 2, 8, rng_for(1))
        set_identity_projections(mha)
        q = Tensor(rng_for(2).standard_normal((1, 4)))
        kv = Tensor(rng_for(3).standard_normal((3, 4)))
        mask = np.array([[False, True, False]])
        out = mha.attend(q, kv, kv, mask)
        np.testing.assert_allclose(out.data[0], kv.data[1], atol=1e-12)

    def test_equal_logits_give_mean_of_values(self):
        mha = MultiHeadAttention(4, 1, 8, rng_for(1))
        set_identity_projections(mha)
        q = Tensor(np.zeros((2, 4)))  # zero query => all logits equal
        kv = Tensor(rng_for(4).standard_normal((5, 4)))
        out = mha.attend(q, kv, kv, None)
        np.testing.assert_allclose(out.data, np.tile(kv.data.mean(axis=0), (2, 1)),
                                   atol=1e-12)

    def test_matches_loop_oracle(self):
        rng = rng_for(5)
        mha = MultiHeadAttention(4, 1, 8, rng)
        q = Tensor(rng.standard_normal((4, 4)))
        kv = Tensor(rng.standard_normal((4, 4)))
        mask = shifted_causal_mask(4, 4)[:, :4] | np.eye(4, dtype=bool)
        out = mha.attend(q, kv, kv, mask)
        oracle = attention_oracle(
            q.data, kv.data, kv.data,
            mha.q_proj.weight.data, mha.q_proj.bias.data,
            mha.k_proj.weight.data, mha.k_proj.bias.data,
            mha.v_proj.weight.data, mha.v_proj.bias.data,
            mha.out_proj.weight.data, mha.out_proj.bias.data,
            heads=1, mask=mask)
        np.testing.assert_allclose(out.data, oracle, atol=1e-12)

    def test_multihead_matches_oracle(self):
        rng = rng_for(6)
        mha = MultiHeadAttention(8, 4, 8, rng)
        q = Tensor(rng.standard_normal((3, 8)))
        kv = Tensor(rng.standard_normal((5, 8)))
        out = mha.attend(q, kv, kv, None)
        oracle = attention_oracle(
            q.data, kv.data, kv.data,
            mha.q_proj.weight.data, mha.q_proj.bias.data,
            mha.k_proj.weight.data, mha.k_proj.bias.data,
            mha.v_proj.weight.data, mha.v_proj.bias.data,
            mha.out_proj.weight.data, mha.out_proj.bias.data,
            heads=4, mask=None)
        np.testing.assert_allclose(out.data, oracle, atol=1e-12)

    def test_fully_masked_row_rejected(self):
        mha = MultiHeadAttention(4, 2, 8, rng_for(1))
        q = Tensor(np.zeros((2, 4)))
        kv = Tensor(np.zeros((3, 4)))
        mask = np.array([[True, False, False], [False, False, False]])
        with pytest.raises(ShapeError, match=r"rows \[1\]"):
            mha.attend(q, kv, kv, mask)

    def test_causal_rows_bit_identical_under_future_perturbation(self):
        rng = rng_for(7)
        mha = MultiHeadAttention(4, 2, 16, rng)
        q = Tensor(rng.standard_normal((3, 4)))
        kv = rng.standard_normal((4, 4))
        mask = shifted_causal_mask(3, 4)
        base = mha(q, Tensor(kv), mask).data
        for row in range(3):
            bumped = kv.copy()
            bumped[row + 1:] += rng.standard_normal(bumped[row + 1:].shape)
            out = mha(q, Tensor(bumped), mask).data
            assert np.array_equal(out[: row + 1], base[: row + 1])

    def test_block_grad_check(self):
        rng = rng_for(8)
        mha = MultiHeadAttention(4, 2, 8, rng)
        q = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        kv = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        mask = shifted_causal_mask(3, 4)
        params = mha.parameters() + [q, kv]
        err = grad_check(lambda: (mha(q, kv, mask) ** 2.0).sum(), params)
        assert err < 1e-5

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_rows_are_convex_combinations(self, seed):
        rng = np.random.default_rng(seed)
        tq, tk = 3, 5
        mask = rng.random((tq, tk)) < 0.6
        mask[np.arange(tq), rng.integers(0, tk, tq)] = True  # >=1 visible per row
        logits = rng.standard_normal((tq, tk))
        masked = np.where(mask, logits, -1e30)
        e = np.exp(masked - masked.max(axis=1, keepdims=True))
        w = e / e.sum(axis=1, keepdims=True)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(w[~mask] == 0.0)


class TestGcn:
    def test_identity_passthrough(self):
        block = GcnBlock(3, 2, 2, rng_for(1), activation="identity")
        block.adjacency.data = np.eye(3)
        block.weight.data = np.eye(2)
        x = rng_for(2).standard_normal((3, 2))
        np.testing.assert_array_equal(block(Tensor(x)).data, x)

    def test_mean_aggregation(self):
        block = GcnBlock(2, 1, 1, rng_for(1), activation="identity")
        block.adjacency.data = np.full((2, 2), 0.5)
        block.weight.data = np.eye(1)
        out = block(Tensor([[1.0], [3.0]]))
        np.testing.assert_allclose(out.data, [[2.0], [2.0]], atol=1e-15)

    def test_matches_triple_loop_oracle(self):
        rng = rng_for(3)
        block = GcnBlock(3, 4, 5, rng)
        x = rng.standard_normal((3, 4))
        out = block(Tensor(x)).data
        a, w = block.adjacency.data, block.weight.data
        oracle = np.zeros((3, 5))
        for i in range(3):
            for f in range(5):
                acc = 0.0
                for j in range(3):
                    for g in range(4):
                        acc += a[i, j] * x[j, g] * w[g, f]
                oracle[i, f] = math.tanh(acc)
        np.testing.assert_allclose(out, oracle, atol=1e-12)

    def test_node_count_mismatch(self):
        block = GcnBlock(3, 2, 2, rng_for(1))
        with pytest.raises(ShapeError, match="3 nodes"):
            block(Tensor(np.zeros((4, 2))))

    def test_batched_frames_match_per_frame(self):
        rng = rng_for(4)
        block = GcnBlock(3, 2, 4, rng)
        x = rng.standard_normal((5, 3, 2))
        batched = block(Tensor(x)).data
        for t in range(5):
            np.testing.assert_allclose(batched[t], block(Tensor(x[t])).data, atol=1e-12)

    def test_grad_check(self):
        rng = rng_for(5)
        block = GcnBlock(3, 2, 2, rng)
        x = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        err = grad_check(lambda: (block(x) ** 2.0).sum(), block.parameters() + [x])
        assert err < 1e-5

    def test_positive_width_required(self):
        with pytest.raises(ShapeError):
            GcnBlock(3, 2, 0, rng_for(1))


class TestGru:
    def test_zero_weights_halve_hidden(self):
        cell = GruCell(2, 3, rng_for(1))
        for p in cell.parameters():
            p.data = np.zeros_like(p.data)
        h = rng_for(2).standard_normal((1, 3))
        out = cell(Tensor(np.zeros((1, 2))), Tensor(h))
        np.testing.assert_allclose(out.data, 0.5 * h, atol=1e-15)

    def test_small_weights_contract_to_fixed_point(self):
        rng = rng_for(3)
        cell = GruCell(2, 3, rng)
        for p in cell.parameters():
            p.data = 0.1 * p.data
        x = Tensor(np.zeros((1, 2)))
        h = Tensor(rng.standard_normal((1, 3)))
        prev = None
        for _ in range(100):
            h = cell(x, h)
            if prev is not None:
                step = np.abs(h.data - prev).max()
            prev = h.data
        assert step < 1e-10

    def test_matches_gate_equation_oracle(self):
        rng = rng_for(4)
        cell = GruCell(3, 4, rng)
        x = rng.standard_normal((2, 3))
        h = rng.standard_normal((2, 4))
        out = cell(Tensor(x), Tensor(h)).data

        def sig(v):
            return 1.0 / (1.0 + np.exp(-v))

        r = sig(x @ cell.w_r.data + h @ cell.u_r.data + cell.b_r.data)
        u = sig(x @ cell.w_u.data + h @ cell.u_u.data + cell.b_u.data)
        c = np.tanh(x @ cell.w_c.data + (r * h) @ cell.u_c.data + cell.b_c.data)
        np.testing.assert_allclose(out, u * h + (1 - u) * c, atol=1e-12)

    def test_width_mismatch(self):
        cell = GruCell(2, 3, rng_for(1))
        with pytest.raises(ShapeError, match="input width"):
            cell(Tensor(np.zeros((1, 5))), Tensor(np.zeros((1, 3))))
        with pytest.raises(ShapeError, match="hidden width"):
            cell(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 5))))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_gates_in_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        cell = GruCell(2, 3, rng)
        x, h = rng.standard_normal((1, 2)), rng.standard_normal((1, 3))
        with no_grad():
            r = (Tensor(x) @ cell.w_r + Tensor(h) @ cell.u_r + cell.b_r).sigmoid()
            u = (Tensor(x) @ cell.w_u + Tensor(h) @ cell.u_u + cell.b_u).sigmoid()
        assert np.all((r.data > 0) & (r.data < 1))
        assert np.all((u.data > 0) & (u.data < 1))

    def test_grad_check(self):
        rng = rng_for(6)
        cell = GruCell(2, 3, rng)
        x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        h = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        err = grad_check(lambda: (cell(x, h) ** 2.0).sum(), cell.parameters() + [x, h])
        assert err < 1e-5


class TestFlow:
    def test_identity_init_log_prob_at_origin(self):
        flow = CouplingFlow(6, rng_for(1))
        lp = flow.log_prob(Tensor(np.zeros((1, 6)))).data[0]
        assert abs(lp - (-3.0 * math.log(2 * math.pi))) < 1e-12
        assert abs(lp - (-5.5136)) < 1e-3

    def test_round_trip(self):
        rng = rng_for(2)
        flow = CouplingFlow(6, rng)
        # give the flow non-trivial scales/shifts
        for layer in flow.layers:
            layer.scale_net.outer.weight.data = 0.3 * rng.standard_normal(
                layer.scale_net.outer.weight.shape)
            layer.shift_net.outer.weight.data = 0.3 * rng.standard_normal(
                layer.shift_net.outer.weight.shape)
        x = rng.standard_normal((20, 6))
        with no_grad():
            z, _ = flow.forward(Tensor(x))
            back = flow.inverse(z)
        assert np.abs(back.data - x).max() < 1e-9

    def test_log_det_matches_finite_difference_jacobian(self):
        rng = rng_for(3)
        flow = CouplingFlow(2, rng, layers=4, hidden_dim=8)
        for layer in flow.layers:
            layer.scale_net.outer.weight.data = 0.4 * rng.standard_normal(
                layer.scale_net.outer.weight.shape)
            layer.shift_net.outer.weight.data = 0.4 * rng.standard_normal(
                layer.shift_net.outer.weight.shape)
        x = rng.standard_normal(2)
        step = 1e-6
        jac = np.zeros((2, 2))
        with no_grad():
            for i in range(2):
                up, down = x.copy(), x.copy()
                up[i] += step
                down[i] -= step
                fu, _ = flow.forward(Tensor(up[None]))
                fd, _ = flow.forward(Tensor(down[None]))
                jac[:, i] = (fu.data[0] - fd.data[0]) / (2 * step)
            _, log_det = flow.forward(Tensor(x[None]))
        assert abs(log_det.data[0] - math.log(abs(np.linalg.det(jac)))) < 1e-4

    def test_dim_mismatch(self):
        flow = CouplingFlow(6, rng_for(1))
        with pytest.raises(ShapeError, match="dim"):
            flow.log_prob(Tensor(np.zeros((1, 5))))

    def test_grad_check(self):
        rng = rng_for(4)
        flow = CouplingFlow(4, rng, layers=2, hidden_dim=8)
        for layer in flow.layers:
            layer.scale_net.outer.weight.data = 0.3 * rng.standard_normal(
                layer.scale_net.outer.weight.shape)
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        err = grad_check(lambda: flow.log_prob(x).sum(), flow.parameters() + [x])
        assert err < 1e-5


class TestLayerNormAndPositional:
    def test_layernorm_normalizes(self):
        ln = LayerNorm(8)
        x = rng_for(1).standard_normal((4, 8)) * 5 + 3
        out = ln(Tensor(x)).data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.std(axis=1), 1.0, atol=1e-3)

    def test_layernorm_grad(self):
        ln = LayerNorm(5)
        x = Tensor(rng_for(2).standard_normal((3, 5)), requires_grad=True)
        err = grad_check(lambda: (ln(x) ** 2.0).sum(), ln.parameters() + [x])
        assert err < 1e-5

    def test_positional_shapes_and_range(self):
        enc = sinusoidal_encoding(range(1, 11), 8)
        assert enc.shape == (10, 8)
        assert np.abs(enc).max() <= 1.0
        assert not np.array_equal(enc[0], enc[1])

    def test_linear_grad(self):
        lin = Linear(3, 4, rng_for(3))
        x = Tensor(rng_for(4).standard_normal((2, 3)), requires_grad=True)
        err = grad_check(lambda: (lin(x) ** 2.0).sum(), lin.parameters() + [x])
        assert err < 1e-5


class TestModule:
    def test_named_parameters_deterministic_and_complete(self):
        class Net(Module):
            def __init__(self):
                self.a = Linear(2, 3, rng_for(1))
                self.blocks = [Linear(3, 3, rng_for(2)), Linear(3, 1, rng_for(3))]

        net = Net()
        names = list(net.named_parameters())
        assert names == ["a.weight", "a.bias", "blocks.0.weight", "blocks.0.bias",
                         "blocks.1.weight", "blocks.1.bias"]

    def test_state_dict_round_trip(self):
        lin = Linear(2, 3, rng_for(1))
        state = lin.state_dict()
        lin2 = Linear(2, 3, rng_for(9))
        lin2.load_state_dict(state)
        np.testing.assert_array_equal(lin.weight.data, lin2.weight.data)

    def test_state_dict_mismatch(self):
        lin = Linear(2, 3, rng_for(1))
        state = lin.state_dict()
        state["extra"] = np.zeros(1)
        with pytest.raises(ShapeError, match="unexpected"):
            Linear(2, 3, rng_for(2)).load_state_dict(state)
