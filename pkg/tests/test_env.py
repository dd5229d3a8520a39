import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowarm import env as E
from flowarm.env import (Action, ArmEnv, ArmState, EnvConfig, Perturbation, Task,
                         arm_mask_gt, expert_action, expert_horizon,
                         forward_kinematics, generate_dataset, inverse_kinematics,
                         render, sample_task, step, within_success_radius, wrap_angle)
from flowarm.errors import DomainError

CFG = EnvConfig()


def bresenham_oracle(r0, c0, r1, c1):
    """Independent integer line walk (DDA over the dominant axis, rounded)."""
    points = set()
    n = max(abs(r1 - r0), abs(c1 - c0))
    if n == 0:
        return {(r0, c0)}
    for i in range(n + 1):
        t = i / n
        points.add((round(r0 + t * (r1 - r0)), round(c0 + t * (c1 - c0))))
    return points


def make_task(target, iid=0):
    return Task(target=np.asarray(target, dtype=np.float64), instruction_id=iid)


class TestWrap:
    @settings(max_examples=50, deadline=None)
    @given(st.floats(-50, 50))
    def test_range(self, a):
        w = float(wrap_angle(a))
        assert -math.pi <= w < math.pi

    def test_pi_maps_to_minus_pi(self):
        assert float(wrap_angle(math.pi)) == pytest.approx(-math.pi)


class TestRender:
    def test_straight_arm_row(self):
        state = ArmState(q=np.zeros(2))
        task = make_task([4.0, -4.0])
        frame = render(state, task, CFG)
        cy, cx = CFG.anchor
        row = frame.pixels[cy]
        assert (row == 1.0).sum() >= CFG.l1 + CFG.l2

    def test_purity_bit_identical(self):
        state = ArmState(q=np.array([0.3, -0.8]))
        task = make_task([5.0, 2.0])
        f1 = render(state, task, CFG)
        f2 = render(state, task, CFG)
        assert np.array_equal(f1.pixels, f2.pixels)
        assert f1.pixels.tobytes() == f2.pixels.tobytes()

    def test_vertical_arm_against_line_oracle(self):
        state = ArmState(q=np.array([math.pi / 2, 0.0]))
        task = make_task([4.0, -4.0])
        frame = render(state, task, CFG)
        cy, cx = CFG.anchor
        lit = {tuple(p) for p in np.argwhere(frame.pixels == 1.0)}
        expected = bresenham_oracle(cy, cx, cy - int(CFG.l1 + CFG.l2), cx)
        assert lit == expected

    def test_target_block_rendered(self):
        state = ArmState(q=np.array([0.0, -2.0]))
        task = make_task([-6.0, -6.0])
        frame = render(state, task, CFG)
        assert (frame.pixels == CFG.target_intensity).sum() >= 2

    def test_perturbed_target_after_step(self):
        pert = Perturbation(step=3, target=np.array([-6.0, 6.0]))
        task = Task(target=np.array([6.0, -6.0]), instruction_id=2, perturbation=pert)
        state = ArmState(q=np.array([0.5, 0.5]))
        before = render(state, task, CFG, step_index=3)
        after = render(state, task, CFG, step_index=4)
        r_new, c_new = CFG.anchor[0] - 6, CFG.anchor[1] - 6
        assert after.pixels[r_new, c_new] == CFG.target_intensity
        assert before.pixels[r_new, c_new] != CFG.target_intensity


class TestStep:
    def test_fixed_point(self):
        state = ArmState(q=np.array([0.4, -1.2]))
        out = step(state, Action(q_target=state.q.copy()), CFG)
        assert np.allclose(out.q, state.q)

    def test_within_limit_snap(self):
        state = ArmState(q=np.array([0.4, -1.2]))
        target = state.q + np.array([0.1, -0.12])
        out = step(state, Action(q_target=target), CFG)
        assert np.allclose(out.q, target, atol=1e-12)

    def test_clamped_step(self):
        state = ArmState(q=np.zeros(2))
        out = step(state, Action(q_target=np.array([1.0, -1.0])), CFG)
        assert np.allclose(out.q, [0.15, -0.15])

    def test_wraps_shortest_way(self):
        state = ArmState(q=np.array([math.pi - 0.05, 0.0]))
        out = step(state, Action(q_target=np.array([-math.pi + 0.05, 0.0])), CFG)
        # shortest path crosses the wrap boundary
        assert float(out.q[0]) == pytest.approx(wrap_angle(math.pi - 0.05 + 0.1), abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_never_leaves_valid_range(self, seed):
        rng = np.random.default_rng(seed)
        state = ArmState(q=rng.uniform(-math.pi, math.pi, 2))
        action = Action(q_target=rng.uniform(-math.pi, math.pi, 2))
        out = step(state, action, CFG)
        assert np.all(out.q >= -math.pi) and np.all(out.q < math.pi)
        assert np.isfinite(out.q).all()


class TestExpert:
    def test_full_extension(self):
        task = make_task([CFG.l1 + CFG.l2, 0.0])
        a = expert_action(ArmState(q=np.array([1.0, 1.0])), task, CFG)
        assert np.allclose(a.q_target, [0.0, 0.0], atol=1e-9)

    def test_fk_ik_roundtrip(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            iid = int(rng.integers(4))
            target = E.sample_target(rng, CFG, iid)
            q = inverse_kinematics(target, CFG)
            _, ee = forward_kinematics(q, CFG)
            assert np.linalg.norm(ee - target) <= 1e-6

    def test_unreachable_rejected(self):
        with pytest.raises(DomainError):
            inverse_kinematics([CFG.reach_max + 1.0, 0.0], CFG)

    def test_expert_holds_success(self):
        task = make_task([8.0, 3.0])
        q = inverse_kinematics(task.target, CFG)
        state = ArmState(q=q)
        a = expert_action(state, task, CFG)
        nxt = step(state, a, CFG)
        assert within_success_radius(nxt, task, CFG)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_expert_closes_loop_within_horizon(self, seed):
        rng = np.random.default_rng(seed)
        task = sample_task(rng, CFG)
        state = E.sample_start_state(rng, CFG, task)
        env = ArmEnv(CFG)
        env.reset(task, state)
        for _ in range(expert_horizon(CFG)):
            if env.succeeded:
                break
            cmd = expert_action(env.state, task, CFG, env.step_count)
            env.step(cmd)
        assert env.succeeded


class TestSuccess:
    def test_two_consecutive_hits(self):
        task = make_task([8.0, 3.0])
        q = inverse_kinematics(task.target, CFG)
        env = ArmEnv(CFG)
        env.reset(task, ArmState(q=q))
        assert not env.succeeded
        env.step(Action(q_target=q))
        assert env.succeeded

    def test_twice_radius_fails(self):
        task = make_task([8.0, 0.0])
        # place end-effector 2 * r_succ away from the target
        q = inverse_kinematics([8.0 + 2 * CFG.success_radius, 0.0], CFG)
        state = ArmState(q=q)
        assert not within_success_radius(state, task, CFG)

    def test_boundary_is_closed_ball(self):
        task = make_task([8.0, 0.0])
        q = inverse_kinematics([8.0 - CFG.success_radius + 1e-9, 0.0], CFG)
        env = ArmEnv(CFG)
        env.reset(task, ArmState(q=q))
        env.step(Action(q_target=q))
        assert env.succeeded


class TestMask:
    def test_mask_subset_of_lit_pixels(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            state = ArmState(q=rng.uniform(-math.pi, math.pi, 2))
            task = sample_task(rng, CFG)
            mask = arm_mask_gt(state, CFG)
            frame = render(state, task, CFG)
            assert np.all(frame.pixels[mask == 1.0] > 0.0)
            # arm pixels in the render are exactly intensity 1.0
            assert np.all(frame.pixels[mask == 1.0] == 1.0)

    def test_straight_arm_mask(self):
        state = ArmState(q=np.zeros(2))
        mask = arm_mask_gt(state, CFG)
        cy, cx = CFG.anchor
        assert mask[cy, cx:cx + int(CFG.l1 + CFG.l2) + 1].sum() == CFG.l1 + CFG.l2 + 1
        assert mask.sum() == CFG.l1 + CFG.l2 + 1

    def test_iou_with_render_arm_pixels_is_one(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            state = ArmState(q=rng.uniform(-math.pi, math.pi, 2))
            task = sample_task(rng, CFG)
            mask = arm_mask_gt(state, CFG) == 1.0
            arm = render(state, task, CFG).pixels == 1.0
            inter = np.logical_and(mask, arm).sum()
            union = np.logical_or(mask, arm).sum()
            assert inter / union == 1.0


class TestDataset:
    def test_deterministic(self):
        eps1 = generate_dataset(5, 64, seed=7, cfg=CFG, perturb_prob=0.5)
        eps2 = generate_dataset(5, 64, seed=7, cfg=CFG, perturb_prob=0.5)
        for a, b in zip(eps1, eps2):
            assert len(a.frames) == len(b.frames)
            for fa, fb in zip(a.frames, b.frames):
                assert np.array_equal(fa.pixels, fb.pixels)
            for aa, ab in zip(a.actions, b.actions):
                assert np.array_equal(aa.q_target, ab.q_target)

    def test_expert_always_succeeds(self):
        eps = generate_dataset(30, 64, seed=3, cfg=CFG, perturb_prob=0.5)
        assert all(ep.success for ep in eps)

    def test_cardinality_and_length(self):
        eps = generate_dataset(100, 64, seed=5, cfg=CFG)
        assert len(eps) == 100
        assert all(len(ep.frames) <= 64 for ep in eps)

    def test_records_aligned_and_consistent(self):
        eps = generate_dataset(5, 64, seed=9, cfg=CFG, perturb_prob=0.5)
        for ep in eps:
            assert len(ep.frames) == len(ep.actions) == len(ep.success_flags)
            # frames[i+1] renders step(state_i, action_i); poses carry the state
            for i in range(len(ep.frames) - 1):
                state = ArmState(q=ep.frames[i].pose)
                nxt = step(state, ep.actions[i], CFG)
                expected = render(nxt, ep.task, CFG, step_index=i + 1)
                assert np.array_equal(expected.pixels, ep.frames[i + 1].pixels)


class TestPerturbation:
    def test_success_evaluated_against_new_target(self):
        pert = Perturbation(step=2, target=np.array([-8.0, 3.0]))
        task = Task(target=np.array([8.0, 3.0]), instruction_id=0, perturbation=pert)
        q_old = inverse_kinematics([8.0, 3.0], CFG)
        env = ArmEnv(CFG)
        env.reset(task, ArmState(q=q_old))
        for _ in range(4):
            env.step(Action(q_target=q_old))  # hold at the old target
        assert not env.succeeded  # target moved away at step 2
