import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowarm import tensor as T
from flowarm.errors import ContractError, NumericsError, ShapeError
from flowarm.tensor import Tensor

from conftest import fd_agreement, finite_difference


def t64(arr, rg=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=rg, dtype=np.float64)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(a, b)
        assert np.array_equal(out.data, np.array([[1, 2], [3, 4]], dtype=np.float32))

    def test_projector(self):
        a = Tensor([[1.0, 0.0], [0.0, 0.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        out = T.matmul(a, b)
        assert np.array_equal(out.data, np.array([[5, 6], [0, 0]], dtype=np.float32))

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((4, 3)).astype(np.float32)
        b = rng.standard_normal((3, 5)).astype(np.float32)
        out = T.matmul(Tensor(a), Tensor(b)).data
        # brute-force scalar oracle in float64
        ref = np.zeros((4, 5), dtype=np.float64)
        for i in range(4):
            for j in range(5):
                for k in range(3):
                    ref[i, j] += float(a[i, k]) * float(b[k, j])
        rel = np.abs(out - ref) / (np.abs(ref) + 1e-12)
        assert rel.max() <= 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_batched_weight_grad(self):
        rng = np.random.default_rng(1)
        a = t64(rng.standard_normal((2, 3, 4)))
        w = t64(rng.standard_normal((4, 5)))
        loss = T.sum_all(T.matmul(a, w))
        T.backward(loss)
        assert a.grad.shape == (2, 3, 4)
        assert w.grad.shape == (4, 5)

    def test_determinism(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((8, 8)).astype(np.float32)
        b = rng.standard_normal((8, 8)).astype(np.float32)
        out1 = T.matmul(Tensor(a), Tensor(b)).data
        out2 = T.matmul(Tensor(a), Tensor(b)).data
        assert np.array_equal(out1, out2)


class TestBackward:
    def test_sum_gives_ones(self):
        x = t64([1.0, 2.0, 3.0])
        T.backward(T.sum_all(x))
        assert np.array_equal(x.grad, np.ones(3))

    def test_quadratic(self):
        x = t64([1.0, 2.0])
        T.backward(T.sum_all(T.mul(x, x)))
        assert np.allclose(x.grad, [2.0, 4.0])

    def test_loss_must_be_scalar(self):
        x = t64([1.0, 2.0])
        with pytest.raises(ContractError):
            T.backward(T.mul(x, x))

    def test_non_finite_loss_rejected(self):
        x = t64([np.inf])
        with pytest.raises(NumericsError):
            T.backward(T.sum_all(x))

    def test_branch_accumulation(self):
        x = t64([3.0])
        y = T.add(T.mul(x, x), x)  # x^2 + x -> grad 2x + 1
        T.backward(T.sum_all(y))
        assert np.allclose(x.grad, [7.0])

    def test_composed_loss_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        w1 = rng.standard_normal((6, 4))
        w2 = rng.standard_normal((4, 2))
        x = rng.standard_normal((3, 6))

        def forward(t1, t2):
            h = T.gelu(T.matmul(Tensor(x, dtype=np.float64), t1))
            out = T.tanh(T.matmul(h, t2))
            return T.mean_all(T.mul(out, out))

        tw1, tw2 = t64(w1), t64(w2)
        T.backward(forward(tw1, tw2))
        analytic = [tw1.grad, tw2.grad]

        def f():
            T.clear_tape()
            return forward(t64(w1, rg=False), t64(w2, rg=False)).item()

        numeric = finite_difference(f, [w1, w2])
        assert fd_agreement(analytic, numeric) >= 0.95


class TestOps:
    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((5, 7)).astype(np.float32))
        p = T.softmax_last(x).data
        assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-5)

    def test_softmax_backward_fd(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((3, 4))
        xt = t64(x)
        out = T.softmax_last(xt)
        T.backward(T.mean_all(T.mul(out, out)))

        def f():
            T.clear_tape()
            o = T.softmax_last(t64(x, rg=False))
            return T.mean_all(T.mul(o, o)).item()

        numeric = finite_difference(f, [x])
        assert fd_agreement([xt.grad], numeric) >= 0.95

    def test_layer_norm_backward_fd(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((4, 8))
        g = rng.standard_normal(8)
        b = rng.standard_normal(8)

        xt, gt, bt = t64(x), t64(g), t64(b)
        T.backward(T.mean_all(T.mul(T.layer_norm(xt, gt, bt), T.layer_norm(xt, gt, bt))))

        def f():
            T.clear_tape()
            o = T.layer_norm(t64(x, rg=False), t64(g, rg=False), t64(b, rg=False))
            return T.mean_all(T.mul(o, o)).item()

        numeric = finite_difference(f, [x, g, b])
        assert fd_agreement([xt.grad, gt.grad, bt.grad], numeric) >= 0.95

    def test_embedding_backward_scatter(self):
        table = t64(np.arange(12, dtype=np.float64).reshape(4, 3))
        ids = np.array([1, 1, 3])
        out = T.embedding(table, ids)
        T.backward(T.sum_all(out))
        expected = np.zeros((4, 3))
        expected[1] = 2.0
        expected[3] = 1.0
        assert np.array_equal(table.grad, expected)

    def test_repeat_axis_backward(self):
        x = t64(np.array([[1.0], [2.0]])[None])  # (1, 2, 1)
        out = T.repeat_axis(x, 2, 3)
        assert out.data.shape == (1, 2, 3)
        T.backward(T.sum_all(out))
        assert np.array_equal(x.grad, np.full((1, 2, 1), 3.0))

    def test_narrow_and_concat_roundtrip(self):
        x = t64(np.arange(12, dtype=np.float64).reshape(2, 6))
        a = T.narrow(x, 1, 0, 2)
        b = T.narrow(x, 1, 2, 4)
        back = T.concat([a, b], axis=1)
        assert np.array_equal(back.data, x.data)
        T.backward(T.sum_all(back))
        assert np.array_equal(x.grad, np.ones((2, 6)))


class TestHuber:
    def test_zero_residual(self):
        assert T.huber(Tensor(np.zeros(5)), 1.0).item() == 0.0

    def test_boundary_continuity(self):
        delta = 0.7
        quad = T.huber(Tensor([delta]), delta).item()
        assert quad == pytest.approx(0.5 * delta * delta, rel=1e-6)

    def test_linear_branch(self):
        assert T.huber(Tensor([3.0]), 1.0).item() == pytest.approx(2.5, rel=1e-6)

    def test_invalid_delta(self):
        with pytest.raises(ContractError):
            T.huber(Tensor([1.0]), 0.0)

    def test_backward_clip(self):
        r = t64([-3.0, 0.5, 2.0])
        T.backward(T.huber(r, 1.0))
        assert np.allclose(r.grad, np.array([-1.0, 0.5, 1.0]) / 3)


class TestRoundSte:
    def test_below_threshold(self):
        out = T.round_ste(Tensor(np.full(4, 0.4)), 0.5)
        assert np.array_equal(out.data, np.zeros(4, dtype=np.float32))

    def test_threshold_inclusive(self):
        out = T.round_ste(Tensor(np.full(4, 0.5)), 0.5)
        assert np.array_equal(out.data, np.ones(4, dtype=np.float32))

    def test_straight_through_gradient(self):
        rng = np.random.default_rng(7)
        x = rng.random((3, 3))
        m = t64(rng.random((3, 3)))
        out = T.mul(T.round_ste(m, 0.5), Tensor(x, dtype=np.float64))
        T.backward(T.sum_all(out))
        assert np.array_equal(m.grad, x)


class TestCausalAttention:
    def _oracle(self, q, k, v, block):
        """Row-by-row softmax attention with explicit block masking, float64."""
        tq, d = q.shape
        out = np.zeros_like(q, dtype=np.float64)
        for i in range(tq):
            limit = ((i // block) + 1) * block
            scores = (q[i].astype(np.float64) @ k[:limit].astype(np.float64).T) / np.sqrt(d)
            scores -= scores.max()
            w = np.exp(scores)
            w /= w.sum()
            out[i] = w @ v[:limit].astype(np.float64)
        return out

    def test_single_frame_equals_full_attention(self):
        rng = np.random.default_rng(8)
        q, k, v = (rng.standard_normal((4, 8)).astype(np.float32) for _ in range(3))
        out = T.causal_attention(Tensor(q), Tensor(k), Tensor(v), block=4).data
        ref = self._oracle(q, k, v, block=4)
        assert np.abs(out - ref).max() <= 1e-5

    def test_causality_first_frame_unchanged(self):
        rng = np.random.default_rng(9)
        block = 4
        q1, k1, v1 = (rng.standard_normal((block, 8)).astype(np.float32) for _ in range(3))
        out_single = T.causal_attention(Tensor(q1), Tensor(k1), Tensor(v1), block).data
        q2 = np.concatenate([q1, np.zeros((block, 8), dtype=np.float32)])
        k2 = np.concatenate([k1, rng.standard_normal((block, 8)).astype(np.float32)])
        v2 = np.concatenate([v1, rng.standard_normal((block, 8)).astype(np.float32)])
        out_double = T.causal_attention(Tensor(q2), Tensor(k2), Tensor(v2), block).data
        assert np.array_equal(out_double[:block], out_single)

    def test_three_frames_vs_row_oracle(self):
        rng = np.random.default_rng(10)
        block = 3
        q, k, v = (rng.standard_normal((3 * block, 6)).astype(np.float32) for _ in range(3))
        out = T.causal_attention(Tensor(q), Tensor(k), Tensor(v), block).data
        ref = self._oracle(q, k, v, block)
        assert np.abs(out - ref).max() <= 1e-5

    def test_non_multiple_block_rejected(self):
        z = Tensor(np.zeros((5, 4)))
        with pytest.raises(ShapeError):
            T.causal_attention(z, z, z, block=2)

    @settings(max_examples=25, deadline=None)
    @given(frames=st.integers(1, 4), block=st.integers(1, 5), seed=st.integers(0, 999))
    def test_property_perturbing_later_frames_exact(self, frames, block, seed):
        """Perturbing tokens of frame j never changes outputs for frames < j."""
        rng = np.random.default_rng(seed)
        t = frames * block
        q, k, v = (rng.standard_normal((t, 4)).astype(np.float32) for _ in range(3))
        base = T.causal_attention(Tensor(q), Tensor(k), Tensor(v), block).data
        j = frames - 1
        k2, v2, q2 = k.copy(), v.copy(), q.copy()
        k2[j * block:] += 1.5
        v2[j * block:] -= 2.0
        q2[j * block:] *= -1.0
        pert = T.causal_attention(Tensor(q2), Tensor(k2), Tensor(v2), block).data
        assert np.array_equal(pert[: j * block], base[: j * block])


class TestNoGrad:
    def test_no_recording(self):
        x = t64([1.0, 2.0])
        with T.no_grad():
            y = T.mul(x, x)
        assert not y.requires_grad
        assert len(T.tape()) == 0
