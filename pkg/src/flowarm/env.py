"""Deterministic 2-link planar arm with pixel rendering.

World coordinates are centered on the shoulder anchor, x to the right and y
up; pixels map as (row = cy - round(y), col = cx + round(x)). Rendering is a
pure function of (state, task): background 0.0, target as a 2x2 block at 0.6,
arm links as 1-px Bresenham segments at 1.0 (links drawn last).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, DomainError

TWO_PI = 2.0 * math.pi

# instruction vocabulary: sector of the workspace the target lies in
INSTRUCTIONS = ("reach-right", "reach-up", "reach-left", "reach-down")
SECTOR_CENTERS = (0.0, math.pi / 2, math.pi, -math.pi / 2)
SECTOR_HALF_WIDTH = math.pi / 4


def wrap_angle(a):
    """Wrap to [-pi, pi)."""
    return (np.asarray(a) + math.pi) % TWO_PI - math.pi


@dataclass(frozen=True)
class EnvConfig:
    height: int = 32
    width: int = 32
    l1: float = 8.0
    l2: float = 7.0
    delta_max: float = 0.15
    success_radius: float = 1.5
    horizon: int = 64
    target_intensity: float = 0.6
    # sampled targets stay this far inside the reachable annulus
    radius_margin: float = 1.5

    @property
    def anchor(self):
        return (self.height // 2, self.width // 2)

    @property
    def reach_min(self) -> float:
        return abs(self.l1 - self.l2)

    @property
    def reach_max(self) -> float:
        return self.l1 + self.l2


@dataclass(frozen=True)
class ArmState:
    q: np.ndarray  # two joint angles, wrapped to [-pi, pi)

    def __post_init__(self):
        object.__setattr__(self, "q", wrap_angle(np.asarray(self.q, dtype=np.float64)))


@dataclass(frozen=True)
class Action:
    q_target: np.ndarray  # absolute joint angles

    def __post_init__(self):
        object.__setattr__(self, "q_target", wrap_angle(np.asarray(self.q_target, dtype=np.float64)))


@dataclass(frozen=True)
class Perturbation:
    step: int
    target: np.ndarray


@dataclass(frozen=True)
class Task:
    target: np.ndarray  # 2D point, world coordinates relative to the anchor
    instruction_id: int
    perturbation: Optional[Perturbation] = None

    def target_at(self, step_index: int) -> np.ndarray:
        """Target in effect for a frame with the given step index."""
        p = self.perturbation
        if p is not None and step_index > p.step:
            return p.target
        return self.target


@dataclass
class Frame:
    pixels: np.ndarray  # (H, W) float32 in [0, 1]
    step_index: int
    pose: Optional[np.ndarray] = None    # joint angles rendered, when known
    origin: str = "env"                  # "env" or "sampled"


@dataclass
class Episode:
    frames: list
    actions: list
    success_flags: list
    task: Task
    success: bool
    seed: int


def forward_kinematics(q, cfg: EnvConfig):
    """Return (elbow, end-effector) world positions."""
    q = np.asarray(q, dtype=np.float64)
    elbow = np.array([cfg.l1 * math.cos(q[0]), cfg.l1 * math.sin(q[0])])
    ee = elbow + np.array([cfg.l2 * math.cos(q[0] + q[1]), cfg.l2 * math.sin(q[0] + q[1])])
    return elbow, ee


def end_effector(state: ArmState, cfg: EnvConfig) -> np.ndarray:
    return forward_kinematics(state.q, cfg)[1]


def _px(point, cfg: EnvConfig):
    cy, cx = cfg.anchor
    col = int(math.floor(cx + point[0] + 0.5))
    row = int(math.floor(cy - point[1] + 0.5))
    return row, col


def _draw_line(img: np.ndarray, r0: int, c0: int, r1: int, c1: int, value: float):
    """Integer Bresenham; clips to the canvas."""
    h, w = img.shape
    dr = abs(r1 - r0)
    dc = abs(c1 - c0)
    sr = 1 if r0 < r1 else -1
    sc = 1 if c0 < c1 else -1
    err = dc - dr
    r, c = r0, c0
    while True:
        if 0 <= r < h and 0 <= c < w:
            img[r, c] = value
        if r == r1 and c == c1:
            break
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr
    return img


def render(state: ArmState, task: Task, cfg: EnvConfig, step_index: int = 0) -> Frame:
    img = np.zeros((cfg.height, cfg.width), dtype=np.float32)
    tr, tc = _px(task.target_at(step_index), cfg)
    img[max(tr, 0):tr + 2, max(tc, 0):tc + 2] = cfg.target_intensity
    elbow, ee = forward_kinematics(state.q, cfg)
    ar, ac = cfg.anchor
    er, ec = _px(elbow, cfg)
    wr, wc = _px(ee, cfg)
    _draw_line(img, ar, ac, er, ec, 1.0)
    _draw_line(img, er, ec, wr, wc, 1.0)
    return Frame(pixels=img, step_index=step_index, pose=state.q.copy(), origin="env")


def arm_mask_gt(state: ArmState, cfg: EnvConfig) -> np.ndarray:
    """Binary map of arm-link pixels (same rasterizer as render)."""
    img = np.zeros((cfg.height, cfg.width), dtype=np.float32)
    elbow, ee = forward_kinematics(state.q, cfg)
    ar, ac = cfg.anchor
    er, ec = _px(elbow, cfg)
    wr, wc = _px(ee, cfg)
    _draw_line(img, ar, ac, er, ec, 1.0)
    _draw_line(img, er, ec, wr, wc, 1.0)
    return img


def step(state: ArmState, action: Action, cfg: EnvConfig) -> ArmState:
    """Each joint slews toward its target by at most delta_max radians."""
    d = wrap_angle(action.q_target - state.q)
    d = np.clip(d, -cfg.delta_max, cfg.delta_max)
    return ArmState(q=state.q + d)


def expert_action(state: ArmState, task: Task, cfg: EnvConfig, step_index: int = 0) -> Action:
    """Analytic inverse kinematics (elbow-up branch) for the current target."""
    return Action(q_target=inverse_kinematics(task.target_at(step_index), cfg))


def inverse_kinematics(target, cfg: EnvConfig) -> np.ndarray:
    x, y = float(target[0]), float(target[1])
    r2 = x * x + y * y
    c2 = (r2 - cfg.l1 ** 2 - cfg.l2 ** 2) / (2.0 * cfg.l1 * cfg.l2)
    if c2 > 1.0 + 1e-9 or c2 < -1.0 - 1e-9:
        raise DomainError(f"target {(x, y)} outside the reachable annulus")
    c2 = min(1.0, max(-1.0, c2))
    q2 = -math.acos(c2)  # elbow-up branch
    q1 = math.atan2(y, x) - math.atan2(cfg.l2 * math.sin(q2), cfg.l1 + cfg.l2 * math.cos(q2))
    return wrap_angle(np.array([q1, q2]))


def within_success_radius(state: ArmState, task: Task, cfg: EnvConfig, step_index: int = 0) -> bool:
    ee = end_effector(state, cfg)
    return float(np.linalg.norm(ee - task.target_at(step_index))) <= cfg.success_radius


def sample_target(rng: np.random.Generator, cfg: EnvConfig, instruction_id: int) -> np.ndarray:
    center = SECTOR_CENTERS[instruction_id]
    ang = center + rng.uniform(-SECTOR_HALF_WIDTH, SECTOR_HALF_WIDTH)
    lo = cfg.reach_min + cfg.radius_margin
    hi = cfg.reach_max - cfg.radius_margin
    r = rng.uniform(lo, hi)
    return np.array([r * math.cos(ang), r * math.sin(ang)])


def sample_task(rng: np.random.Generator, cfg: EnvConfig, perturb_prob: float = 0.0,
                perturb_window: tuple[int, int] = (8, 24), min_jump: float = 6.0) -> Task:
    iid = int(rng.integers(len(INSTRUCTIONS)))
    target = sample_target(rng, cfg, iid)
    perturbation = None
    if rng.random() < perturb_prob:
        step_idx = int(rng.integers(perturb_window[0], perturb_window[1] + 1))
        for _ in range(64):
            new_target = sample_target(rng, cfg, iid)
            if np.linalg.norm(new_target - target) >= min_jump:
                break
        perturbation = Perturbation(step=step_idx, target=new_target)
    return Task(target=target, instruction_id=iid, perturbation=perturbation)


def sample_start_state(rng: np.random.Generator, cfg: EnvConfig, task: Task,
                       min_start_dist: float = 4.0) -> ArmState:
    for _ in range(256):
        state = ArmState(q=rng.uniform(-math.pi, math.pi, size=2))
        if np.linalg.norm(end_effector(state, cfg) - task.target) >= min_start_dist:
            return state
    return state


class ArmEnv:
    """Stateful wrapper: perturbation schedule, debounced success, step count."""

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self.task: Optional[Task] = None
        self.state: Optional[ArmState] = None
        self.step_count = 0
        self._hit_streak = 0

    def reset(self, task: Task, state: ArmState) -> Frame:
        self.task = task
        self.state = state
        self.step_count = 0
        self._hit_streak = 1 if within_success_radius(state, task, self.cfg, 0) else 0
        return render(state, task, self.cfg, step_index=0)

    def step(self, action: Action) -> Frame:
        if self.task is None:
            raise ContractError("env.step before reset")
        self.state = step(self.state, action, self.cfg)
        self.step_count += 1
        if within_success_radius(self.state, self.task, self.cfg, self.step_count):
            self._hit_streak += 1
        else:
            self._hit_streak = 0
        return render(self.state, self.task, self.cfg, step_index=self.step_count)

    @property
    def succeeded(self) -> bool:
        return self._hit_streak >= 2

    @property
    def current_target(self) -> np.ndarray:
        return self.task.target_at(self.step_count)


def expert_horizon(cfg: EnvConfig) -> int:
    return math.ceil(math.pi / cfg.delta_max) + 5


def generate_episode(task: Task, start: ArmState, cfg: EnvConfig, seed: int,
                     horizon: Optional[int] = None) -> Episode:
    """Roll the scripted expert; actions record the realized next pose.

    The stored action for step i is the pose rendered in frame i+1 (an exact
    fixed point of the step function), and a terminal hold record keeps the
    final observation in the episode.
    """
    horizon = horizon or cfg.horizon
    env = ArmEnv(cfg)
    frame = env.reset(task, start)
    frames, actions, flags = [frame], [], [env.succeeded]
    while len(frames) < horizon and not env.succeeded:
        cmd = expert_action(env.state, task, cfg, env.step_count)
        nxt = step(env.state, cmd, cfg)
        realized = Action(q_target=nxt.q)
        frame = env.step(realized)
        actions.append(realized)
        flags.append(env.succeeded)
        frames.append(frame)
    # terminal hold record so actions align 1:1 with frames
    actions.append(Action(q_target=env.state.q))
    return Episode(frames=frames, actions=actions, success_flags=flags,
                   task=task, success=env.succeeded, seed=seed)


def generate_dataset(n_episodes: int, horizon: int, seed: int, cfg: EnvConfig,
                     perturb_prob: float = 0.0) -> list[Episode]:
    if n_episodes <= 0 or horizon <= 0:
        raise ContractError("n_episodes and horizon must be positive")
    episodes = []
    for i in range(n_episodes):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        task = sample_task(rng, cfg, perturb_prob=perturb_prob)
        start = sample_start_state(rng, cfg, task)
        episodes.append(generate_episode(task, start, cfg, seed=i, horizon=horizon))
    return episodes
