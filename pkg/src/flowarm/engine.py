"""Closed-loop inference engine: KV-cache lifecycle and rollout modes.

The cache window anchors on an environment frame, grows by generated chunks,
and is re-grounded by popping each generated chunk and chunk-prefilling the
ground-truth observations collected while executing its decoded actions. When
the window reaches capacity it is reset and re-anchored on the latest
observation. Open-loop mode never re-grounds: past the first observation the
model conditions only on its own generations.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import env as E
from .env import Action, ArmEnv, ArmState, EnvConfig, Frame, Task
from .errors import CapacityError, ContractError
from .midm import Midm
from .model import (ModelConfig, WorldModel, patchify, sample_frame_tokens,
                    tokens_to_pixels)


@dataclass
class RolloutConfig:
    chunk_size: int = 4
    max_frames: int = 16
    sampling_steps: int = 5
    mode: str = "closed_loop"          # or "open_loop"
    timeout: int = 64
    seed: int = 0
    guidance_scale: float = 1.0
    reprefill: str = "chunked"         # or "full" (forced full re-prefill)
    run_to_horizon: bool = False       # ignore success; fixed-length benchmark runs

    def __post_init__(self):
        if not (1 <= self.chunk_size <= self.max_frames):
            raise ContractError("chunk_size must lie in [1, max_frames]")
        if self.mode not in ("closed_loop", "open_loop"):
            raise ContractError(f"unknown rollout mode {self.mode!r}")
        if self.reprefill not in ("chunked", "full"):
            raise ContractError(f"unknown reprefill mode {self.reprefill!r}")


class KVCache:
    """Per-layer key/value store with a shared valid-length counter (tokens)."""

    def __init__(self, n_layers: int, max_frames: int, tokens_per_frame: int,
                 dim: int, cond_tokens: int = 1, dtype=np.float32):
        self.max_frames = max_frames
        self.tokens_per_frame = tokens_per_frame
        self.cond_tokens = cond_tokens
        capacity = cond_tokens + max_frames * tokens_per_frame
        self.k = [np.zeros((capacity, dim), dtype=dtype) for _ in range(n_layers)]
        self.v = [np.zeros((capacity, dim), dtype=dtype) for _ in range(n_layers)]
        self.valid = 0
        self.frame_count = 0
        self.frame_origins: list[str] = []

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Read-only views of the valid region."""
        return [(k[: self.valid], v[: self.valid]) for k, v in zip(self.k, self.v)]

    def append(self, kv: list[tuple[np.ndarray, np.ndarray]], origins: list[str]):
        n_frames = len(origins)
        n_tokens = kv[0][0].shape[0]
        if self.frame_count + n_frames > self.max_frames:
            raise CapacityError("cache frame capacity exceeded")
        for layer, (k, v) in enumerate(kv):
            self.k[layer][self.valid:self.valid + n_tokens] = k
            self.v[layer][self.valid:self.valid + n_tokens] = v
        self.valid += n_tokens
        self.frame_count += n_frames
        self.frame_origins.extend(origins)

    def pop_frames(self, n: int):
        if n == 0:
            return
        if n < 0 or n > self.frame_count - 1:
            raise ContractError(
                f"cannot pop {n} of {self.frame_count} frames (first frame is protected)")
        n_tokens = n * self.tokens_per_frame
        for layer in range(len(self.k)):
            self.k[layer][self.valid - n_tokens:self.valid] = 0.0
            self.v[layer][self.valid - n_tokens:self.valid] = 0.0
        self.valid -= n_tokens
        self.frame_count -= n
        del self.frame_origins[len(self.frame_origins) - n:]

    def reset(self):
        for layer in range(len(self.k)):
            self.k[layer][:] = 0.0
            self.v[layer][:] = 0.0
        self.valid = 0
        self.frame_count = 0
        self.frame_origins.clear()

    def equals(self, other: "KVCache") -> bool:
        return (self.valid == other.valid and self.frame_count == other.frame_count
                and all(np.array_equal(a, b) for a, b in zip(self.k, other.k))
                and all(np.array_equal(a, b) for a, b in zip(self.v, other.v)))


class TransformerGenerator:
    """World-model-backed generator with an owned KV cache.

    With guidance enabled, a twin cache whose conditioning token is the null
    instruction is mirrored through every operation (prefix K/V at deeper
    layers depend on the conditioning token, so the unconditional branch
    needs its own prefix).
    """

    def __init__(self, model: WorldModel, rollout_cfg: RolloutConfig, rng: np.random.Generator):
        self.model = model
        self.cfg = rollout_cfg
        self.rng = rng
        mc = model.cfg
        self.cache = KVCache(mc.n_layers, rollout_cfg.max_frames, mc.tokens_per_frame,
                             mc.embed_dim, dtype=model.dtype)
        self.null_cache = None
        if rollout_cfg.guidance_scale != 1.0:
            self.null_cache = KVCache(mc.n_layers, rollout_cfg.max_frames,
                                      mc.tokens_per_frame, mc.embed_dim, dtype=model.dtype)
        self.cond_id: Optional[int] = None
        self.last_tokens: Optional[np.ndarray] = None  # latest clean frame, tokenized
        self.prefill_tokens = 0   # token-count accounting for prefill passes
        self.sample_tokens = 0

    @property
    def frame_count(self) -> int:
        return self.cache.frame_count

    def reset(self):
        self.cache.reset()
        if self.null_cache is not None:
            self.null_cache.reset()
        self.cond_id = None
        self.last_tokens = None

    def prefill(self, frame: Frame, cond_id: int):
        if self.cache.frame_count != 0:
            raise ContractError("prefill requires an empty cache")
        self.cond_id = cond_id
        tokens = patchify(frame.pixels, self.model.cfg.patch_size)
        kv = self.model.encode_prefill(tokens, cond_id)
        self.cache.append(kv, [frame.origin])
        self.last_tokens = tokens
        self.prefill_tokens += 1 + self.model.cfg.tokens_per_frame
        if self.null_cache is not None:
            kvn = self.model.encode_prefill(tokens, self.model.cfg.null_cond_id)
            self.null_cache.append(kvn, [frame.origin])

    def chunk_prefill(self, frames: list[Frame]):
        if not frames:
            return
        if self.cache.frame_count + len(frames) > self.cfg.max_frames:
            raise CapacityError("chunk_prefill would exceed cache capacity")
        tokens = np.stack([patchify(f.pixels, self.model.cfg.patch_size) for f in frames])
        slot = self.cache.frame_count
        kv = self.model.encode_append(tokens, slot, self.cache.layers())
        self.cache.append(kv, [f.origin for f in frames])
        self.last_tokens = tokens[-1]
        self.prefill_tokens += len(frames) * self.model.cfg.tokens_per_frame
        if self.null_cache is not None:
            kvn = self.model.encode_append(tokens, slot, self.null_cache.layers())
            self.null_cache.append(kvn, [f.origin for f in frames])

    def generate_next(self) -> Frame:
        if self.cache.frame_count >= self.cfg.max_frames:
            raise CapacityError("cache at capacity; cannot generate")
        slot = self.cache.frame_count
        tokens = sample_frame_tokens(
            self.model, self.cache.layers(), slot, self.rng,
            self.cfg.sampling_steps, self.cfg.guidance_scale,
            None if self.null_cache is None else self.null_cache.layers(),
            prev_last=self.last_tokens)
        pixels = tokens_to_pixels(tokens, self.model.cfg).astype(np.float32)
        frame = Frame(pixels=pixels, step_index=-1, pose=None, origin="sampled")
        ptoks = patchify(pixels, self.model.cfg.patch_size)
        kv = self.model.encode_append(ptoks[None], slot, self.cache.layers())
        self.cache.append(kv, ["sampled"])
        self.last_tokens = ptoks
        if self.null_cache is not None:
            kvn = self.model.encode_append(ptoks[None], slot, self.null_cache.layers())
            self.null_cache.append(kvn, ["sampled"])
        self.sample_tokens += self.cfg.sampling_steps * self.model.cfg.tokens_per_frame
        return frame

    def pop_back(self, n: int):
        self.cache.pop_frames(n)
        if self.null_cache is not None:
            self.null_cache.pop_frames(n)

    def cached_origins(self) -> list[str]:
        return list(self.cache.frame_origins)


class OracleGenerator:
    """Environment-backed stand-in for the world model (plumbing validation).

    Generates frames by simulating the scripted expert from the last synced
    snapshot; syncs happen only at prefill/chunk_prefill, so in open-loop
    mode the oracle imagines from the initial observation alone and never
    sees a perturbation.
    """

    def __init__(self, arm_env: ArmEnv, rollout_cfg: RolloutConfig):
        self.env = arm_env
        self.cfg = rollout_cfg
        self.frame_count = 0
        self.sim_state: Optional[ArmState] = None
        self.sim_target: Optional[np.ndarray] = None
        self.origins: list[str] = []
        self.prefill_tokens = 0
        self.sample_tokens = 0

    def reset(self):
        self.frame_count = 0
        self.origins = []

    def _sync(self):
        self.sim_state = self.env.state
        self.sim_target = self.env.current_target.copy()

    def prefill(self, frame: Frame, cond_id: int):
        if self.frame_count != 0:
            raise ContractError("prefill requires an empty cache")
        if frame.origin == "env":
            self._sync()
        elif frame.pose is not None:
            # sampled anchor (open-loop window reset): continue the imagination
            self.sim_state = ArmState(q=frame.pose)
        self.frame_count = 1
        self.origins = [frame.origin]

    def chunk_prefill(self, frames: list[Frame]):
        if self.frame_count + len(frames) > self.cfg.max_frames:
            raise CapacityError("chunk_prefill would exceed cache capacity")
        if frames:
            if frames[-1].origin == "env":
                self._sync()
            self.frame_count += len(frames)
            self.origins.extend(f.origin for f in frames)

    def generate_next(self) -> Frame:
        if self.frame_count >= self.cfg.max_frames:
            raise CapacityError("cache at capacity; cannot generate")
        task = Task(target=self.sim_target, instruction_id=self.env.task.instruction_id)
        cmd = E.expert_action(self.sim_state, task, self.env.cfg)
        self.sim_state = E.step(self.sim_state, cmd, self.env.cfg)
        frame = E.render(self.sim_state, task, self.env.cfg)
        frame.origin = "sampled"
        self.frame_count += 1
        self.origins.append("sampled")
        return frame

    def pop_back(self, n: int):
        if n < 0 or n > self.frame_count - 1:
            raise ContractError("cannot pop more frames than the cache holds")
        self.frame_count -= n
        del self.origins[len(self.origins) - n:]

    def cached_origins(self) -> list[str]:
        return list(self.origins)


class OracleDecoder:
    """Reads the ground-truth pose carried by rendered frames."""

    def decode_chunk(self, frames: list[Frame]) -> list[Action]:
        if not frames:
            raise ContractError("decode_chunk requires a non-empty chunk")
        actions = []
        for f in frames:
            if f.pose is None:
                raise ContractError("oracle decoder needs pose-tagged frames")
            actions.append(Action(q_target=f.pose))
        return actions


@dataclass
class ChunkTiming:
    latency_s: float     # chunk generation start -> first action executable
    prefill_s: float     # re-prefill attributable to this chunk
    sample_s: float      # frame generation only


@dataclass
class LatencyReport:
    chunks: list = field(default_factory=list)
    prefill_cost: float = 0.0
    sampling_cost: float = 0.0
    end_to_end: float = 0.0

    @property
    def chunk_latencies(self) -> list:
        return [c.latency_s for c in self.chunks]

    def latency_median(self) -> float:
        return float(np.median(self.chunk_latencies)) if self.chunks else 0.0

    def latency_p90(self) -> float:
        return float(np.percentile(self.chunk_latencies, 90)) if self.chunks else 0.0


@dataclass
class StepRecord:
    generated: Frame
    ground_truth: Frame
    action: Action


@dataclass
class RolloutResult:
    success: bool
    steps: int
    records: list
    latency: LatencyReport
    seed: int
    mode: str
    aborted: bool = False
    diagnostic: str = ""

    def frame_hashes(self) -> dict:
        import hashlib
        gen = hashlib.sha256()
        gt = hashlib.sha256()
        for r in self.records:
            gen.update(r.generated.pixels.tobytes())
            gt.update(r.ground_truth.pixels.tobytes())
        return {"generated": gen.hexdigest(), "ground_truth": gt.hexdigest()}

    def to_metrics(self) -> dict:
        """Deterministic metrics only; timing lives in the latency report."""
        return {
            "success": bool(self.success),
            "steps": int(self.steps),
            "seed": int(self.seed),
            "mode": self.mode,
            "aborted": bool(self.aborted),
            "diagnostic": self.diagnostic,
            "actions": [[round(float(a), 6) for a in r.action.q_target] for r in self.records],
            "frames": self.frame_hashes(),
        }


def _run_rollout(arm_env: ArmEnv, task: Task, start: ArmState, generator, decoder,
                 cfg: RolloutConfig) -> RolloutResult:
    """Shared rollout skeleton for closed-loop and open-loop modes."""
    closed = cfg.mode == "closed_loop"
    report = LatencyReport()
    records: list[StepRecord] = []
    steps = 0
    t_start = time.perf_counter()

    obs = arm_env.reset(task, start)
    if cfg.timeout <= 0:
        return RolloutResult(False, 0, [], report, cfg.seed, cfg.mode)

    def done() -> bool:
        if steps >= cfg.timeout:
            return True
        return (not cfg.run_to_horizon) and arm_env.succeeded

    window_frames: list[Frame] = []   # env frames retained in the current window
    anchor = obs
    try:
        generator.reset()
        t0 = time.perf_counter()
        generator.prefill(anchor, task.instruction_id)
        report.prefill_cost += time.perf_counter() - t0
        while not done():
            if generator.frame_count >= cfg.max_frames:
                # window exhausted: re-anchor (env frame when closed, own frame when open)
                anchor = obs if closed else records[-1].generated
                window_frames = []
                generator.reset()
                t0 = time.perf_counter()
                generator.prefill(anchor, task.instruction_id)
                report.prefill_cost += time.perf_counter() - t0
                continue
            n = min(cfg.chunk_size, cfg.max_frames - generator.frame_count,
                    cfg.timeout - steps)
            chunk_t0 = time.perf_counter()
            gen_frames = [generator.generate_next() for _ in range(n)]
            t_gen_end = time.perf_counter()
            actions = decoder.decode_chunk(gen_frames)
            latency_s = time.perf_counter() - chunk_t0  # first action now executable
            sample_s = t_gen_end - chunk_t0
            report.sampling_cost += sample_s
            gt_frames = []
            for frame, action in zip(gen_frames, actions):
                obs = arm_env.step(action)
                steps += 1
                gt_frames.append(obs)
                records.append(StepRecord(generated=frame, ground_truth=obs, action=action))
            prefill_s = 0.0
            if closed:
                t0 = time.perf_counter()
                if cfg.reprefill == "chunked":
                    generator.pop_back(n)
                    generator.chunk_prefill(gt_frames)
                else:
                    # forced full re-prefill of the entire retained window
                    generator.reset()
                    generator.prefill(anchor, task.instruction_id)
                    generator.chunk_prefill(window_frames + gt_frames)
                prefill_s = time.perf_counter() - t0
                report.prefill_cost += prefill_s
                window_frames = window_frames + gt_frames
                origins = generator.cached_origins()
                assert all(o == "env" for o in origins), "sampled frame retained after re-prefill"
            report.chunks.append(ChunkTiming(latency_s, prefill_s, sample_s))
    except (ContractError, CapacityError):
        raise
    except Exception as exc:  # environment fault -> aborted result with diagnostic
        report.end_to_end = time.perf_counter() - t_start
        return RolloutResult(False, steps, records, report, cfg.seed, cfg.mode,
                             aborted=True, diagnostic=f"{type(exc).__name__}: {exc}")

    report.end_to_end = time.perf_counter() - t_start
    success = arm_env.succeeded
    return RolloutResult(success, steps, records, report, cfg.seed, cfg.mode)


def closed_loop_rollout(arm_env: ArmEnv, task: Task, start: ArmState, generator,
                        decoder, cfg: RolloutConfig) -> RolloutResult:
    if cfg.mode != "closed_loop":
        raise ContractError("config mode must be closed_loop")
    return _run_rollout(arm_env, task, start, generator, decoder, cfg)


def open_loop_rollout(arm_env: ArmEnv, task: Task, start: ArmState, generator,
                      decoder, cfg: RolloutConfig) -> RolloutResult:
    if cfg.mode != "open_loop":
        raise ContractError("config mode must be open_loop")
    return _run_rollout(arm_env, task, start, generator, decoder, cfg)


def rollout(arm_env: ArmEnv, task: Task, start: ArmState, generator, decoder,
            cfg: RolloutConfig) -> RolloutResult:
    if cfg.mode == "closed_loop":
        return closed_loop_rollout(arm_env, task, start, generator, decoder, cfg)
    return open_loop_rollout(arm_env, task, start, generator, decoder, cfg)


def measure_latency(rollout_fn: Callable[[int], RolloutResult], runs: int = 5) -> dict:
    """Run >=5 repetitions; aggregate robust latency statistics."""
    if runs < 1:
        raise ContractError("need at least one run")
    results = [rollout_fn(i) for i in range(runs)]
    lat = [l for r in results for l in r.latency.chunk_latencies]
    return {
        "runs": runs,
        "latency_median_s": float(np.median(lat)),
        "latency_p90_s": float(np.percentile(lat, 90)),
        "prefill_median_s": float(np.median([r.latency.prefill_cost for r in results])),
        "sampling_median_s": float(np.median([r.latency.sampling_cost for r in results])),
        "end_to_end_median_s": float(np.median([r.latency.end_to_end for r in results])),
        "results": results,
    }
