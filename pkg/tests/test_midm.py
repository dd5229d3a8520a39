import math

import numpy as np
import pytest

from flowarm import tensor as T
from flowarm.env import EnvConfig, Frame, generate_dataset
from flowarm.errors import ContractError
from flowarm.midm import Midm, MidmConfig
from flowarm.tensor import Tensor

from conftest import fd_agreement, finite_difference

CFG = MidmConfig()


def rand_frames(rng, n=3):
    return rng.random((n, CFG.frame_hw, CFG.frame_hw)).astype(np.float32)


class TestMask:
    def test_range(self):
        rng = np.random.default_rng(0)
        midm = Midm(CFG, seed=0)
        m = midm.predict_mask(rand_frames(rng))
        assert m.shape == (3, 32, 32)
        assert np.all(m >= 0.0) and np.all(m <= 1.0)

    def test_purity(self):
        rng = np.random.default_rng(1)
        midm = Midm(CFG, seed=1)
        x = rand_frames(rng, 1)[0]
        assert np.array_equal(midm.predict_mask(x), midm.predict_mask(x))

    def test_round_threshold_inclusive(self):
        midm = Midm(CFG, seed=2)
        m = np.full((4, 4), 0.5, dtype=np.float32)
        assert np.all(midm.round_mask(m) == 1.0)
        assert np.all(midm.round_mask(np.full((4, 4), 0.4, dtype=np.float32)) == 0.0)

    def test_round_threshold_validation(self):
        midm = Midm(CFG, seed=3)
        with pytest.raises(ContractError):
            midm.round_mask(np.zeros((2, 2), dtype=np.float32), threshold=1.0)


class TestAction:
    def test_zero_input_well_defined(self):
        midm = Midm(CFG, seed=4)
        a = midm.predict_action(np.zeros((32, 32), dtype=np.float32))
        assert a.shape == (2,)
        assert np.isfinite(a).all()

    def test_range_squash(self):
        rng = np.random.default_rng(5)
        midm = Midm(CFG, seed=5)
        for x in rand_frames(rng, 5):
            a = midm.predict_action(x)
            assert np.all(a >= -math.pi) and np.all(a < math.pi)

    def test_statelessness(self):
        rng = np.random.default_rng(6)
        midm = Midm(CFG, seed=6)
        x = rand_frames(rng, 1)[0]
        a1 = midm.predict_action(x)
        midm.predict_action(rand_frames(rng, 1)[0])  # unrelated call between
        a2 = midm.predict_action(x)
        assert np.array_equal(a1, a2)


class TestDecodeChunk:
    def test_singleton(self):
        rng = np.random.default_rng(7)
        midm = Midm(CFG, seed=7)
        f = Frame(pixels=rand_frames(rng, 1)[0], step_index=0)
        out = midm.decode_chunk([f])
        assert len(out) == 1
        assert np.array_equal(out[0].q_target, midm.predict_action(f.pixels))

    def test_chunk_equals_independent_calls_bitwise(self):
        rng = np.random.default_rng(8)
        midm = Midm(CFG, seed=8)
        frames = [Frame(pixels=p, step_index=i) for i, p in enumerate(rand_frames(rng, 4))]
        chunk = midm.decode_chunk(frames)
        singles = [midm.decode_chunk([f])[0] for f in frames]
        for a, b in zip(chunk, singles):
            assert np.array_equal(a.q_target, b.q_target)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(9)
        midm = Midm(CFG, seed=9)
        frames = [Frame(pixels=p, step_index=i) for i, p in enumerate(rand_frames(rng, 4))]
        perm = [2, 0, 3, 1]
        out = midm.decode_chunk(frames)
        out_perm = midm.decode_chunk([frames[i] for i in perm])
        for j, i in enumerate(perm):
            assert np.array_equal(out_perm[j].q_target, out[i].q_target)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            Midm(CFG, seed=10).decode_chunk([])


class TestLoss:
    def test_pure_penalty_with_perfect_stub(self):
        """lam > 0, mask everywhere 1, perfect action stub -> loss == lam."""
        cfg = MidmConfig(lam=0.01)
        rng = np.random.default_rng(11)
        x = rand_frames(rng, 2)
        target = rng.uniform(-1, 1, size=(2, 2))

        # stub: force mask to saturate at 1 and regressor to echo the target
        class Stub(Midm):
            def action_graph(self, pixels):
                b = pixels.shape[0]
                m = Tensor(np.ones((b, cfg.frame_hw, cfg.frame_hw), dtype=np.float32))
                return Tensor(np.asarray(target, dtype=np.float32)), m

        loss = Stub(cfg, seed=11).midm_loss(x, target)
        assert loss.item() == pytest.approx(cfg.lam, rel=1e-6)

    def test_lambda_zero_perfect_stub_zero(self):
        cfg = MidmConfig(lam=0.0)
        rng = np.random.default_rng(12)
        x = rand_frames(rng, 2)
        target = rng.uniform(-1, 1, size=(2, 2))

        class Stub(Midm):
            def action_graph(self, pixels):
                b = pixels.shape[0]
                m = Tensor(np.zeros((b, cfg.frame_hw, cfg.frame_hw), dtype=np.float32))
                return Tensor(np.asarray(target, dtype=np.float32)), m

        assert Stub(cfg, seed=12).midm_loss(x, target).item() == 0.0

    def test_loss_matches_scalar_oracle(self):
        cfg = MidmConfig(lam=3e-3)
        midm = Midm(cfg, seed=13)
        rng = np.random.default_rng(13)
        x = rand_frames(rng, 3)
        a = rng.uniform(-2, 2, size=(3, 2))
        with T.no_grad():
            loss = midm.midm_loss(x, a).item()
            a_hat, m = midm.action_graph(x)
        r = a_hat.data.astype(np.float64) - a
        r = (r + np.pi) % (2 * np.pi) - np.pi  # angular residual
        absr = np.abs(r)
        hub = np.where(absr <= 1.0, 0.5 * r * r, absr - 0.5).mean()
        ref = hub + cfg.lam * np.abs(m.data.astype(np.float64)).mean()
        assert loss == pytest.approx(ref, rel=1e-6)

    def test_straight_through_fd_oracle(self):
        """Analytic grads of the real loss match finite differences of a
        surrogate whose rounding offset is frozen as a constant."""
        cfg = MidmConfig(lam=3e-3, frame_hw=16, u_patch=8, u_hidden=8,
                         r_patch=4, r_feat=4, r_hidden=8)
        midm = Midm(cfg, seed=14, dtype=np.float64)
        rng = np.random.default_rng(14)
        x = rng.random((2, 16, 16)).astype(np.float64)
        a = rng.uniform(-1, 1, size=(2, 2))

        loss = midm.midm_loss(x, a)
        T.backward(loss)
        names = list(midm.params)
        analytic = [midm.params[n].grad for n in names]

        with T.no_grad():
            _, m0 = midm.action_graph(x)
        offset = (m0.data >= cfg.round_threshold).astype(np.float64) - m0.data

        def surrogate():
            T.clear_tape()
            xt = Tensor(x, dtype=np.float64)
            m = midm._mask_pixels(xt)
            shifted = T.add(m, Tensor(offset, dtype=np.float64))  # frozen rounding offset
            masked = T.mul(shifted, xt)
            a_hat = midm._regress(masked)
            resid = T.wrap_pi(T.sub(a_hat, Tensor(a, dtype=np.float64)))
            l = T.huber(resid, cfg.huber_delta)
            l = T.add(l, T.scale(T.mean_all(T.absolute(m)), cfg.lam))
            return l.item()

        numeric = finite_difference(surrogate, [midm.params[n].data for n in names], h=1e-5)
        assert fd_agreement(analytic, numeric) >= 0.95
