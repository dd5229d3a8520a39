"""Training loops and evaluation helpers for the world model and the MIDM."""

from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import env as E
from . import tensor as T
from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .engine import (OracleDecoder, OracleGenerator, RolloutConfig,
                     TransformerGenerator, rollout)
from .env import ArmEnv, ArmState, Episode, EnvConfig, wrap_angle
from .episodes import load_dataset
from .errors import ContractError, DependencyError
from .midm import Midm, MidmConfig
from .model import (FlowBatch, ModelConfig, WorldModel, drop_condition,
                    embodiment_weights, interpolate_path, patchify,
                    velocity_target, weighted_flow_loss)
from .optim import AdamW


# ---------------------------------------------------------------------------
# batch construction
# ---------------------------------------------------------------------------

def episode_frame_arrays(episodes: list[Episode]) -> list[np.ndarray]:
    return [np.stack([f.pixels for f in ep.frames]) for ep in episodes]


def make_flow_batch(frame_arrays: list[np.ndarray], instruction_ids: list[int],
                    rng: np.random.Generator, batch_size: int, prefix_len: int,
                    mcfg: ModelConfig, drop_prob: float, dtype=np.float32) -> FlowBatch:
    """Sample (prefix, next frame) windows with a shared prefix length."""
    eligible = [i for i, fr in enumerate(frame_arrays) if len(fr) > prefix_len]
    while not eligible:
        prefix_len -= 1
        eligible = [i for i, fr in enumerate(frame_arrays) if len(fr) > prefix_len]
    patch = mcfg.patch_size
    x1, prev, pix, cond = [], [], [], []
    for _ in range(batch_size):
        ei = eligible[rng.integers(len(eligible))]
        fr = frame_arrays[ei]
        j = int(rng.integers(prefix_len, len(fr)))
        pix.append(fr[j])
        x1.append(patchify(fr[j], patch))
        prev.append(patchify(fr[j - prefix_len:j], patch))
        cond.append(instruction_ids[ei])
    x1 = np.stack(x1).astype(dtype)
    prev = (np.stack(prev) if prefix_len else
            np.zeros((batch_size, 0, mcfg.tokens_per_frame, mcfg.patch_dim))).astype(dtype)
    cond_ids = drop_condition(np.asarray(cond), drop_prob, rng, mcfg.null_cond_id)
    return FlowBatch(
        x1_tokens=x1,
        x0_tokens=rng.standard_normal(x1.shape).astype(dtype),
        t=rng.random(batch_size).astype(dtype),
        cond_ids=cond_ids,
        prev_tokens=prev,
        x1_pixels=np.stack(pix).astype(dtype),
    )


def midm_pairs(episodes: list[Episode]) -> tuple[np.ndarray, np.ndarray]:
    """Frames paired with the action that produced them."""
    xs, ys = [], []
    for ep in episodes:
        for i in range(1, len(ep.frames)):
            xs.append(ep.frames[i].pixels)
            ys.append(ep.actions[i - 1].q_target)
    return np.stack(xs), np.stack(ys)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _write_csv(path: Path, header: list[str], rows: list[list]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(str(c) for c in row) + "\n")


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def train_world_model(cfg: ExperimentConfig, episodes: list[Episode], run_dir: Path,
                      seed: Optional[int] = None, eta: Optional[float] = None,
                      midm: Optional[Midm] = None, steps: Optional[int] = None) -> dict:
    """Train the flow world model; returns a summary dict (also written to disk).

    With eta > 0 the embodiment-aware objective reweights residuals by the
    MIDM mask (required); the unweighted causal loss is logged alongside.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    mcfg = cfg.model_config()
    eta = mcfg.eta if eta is None else eta
    seed = cfg.training.seed if seed is None else seed
    steps = cfg.training.steps if steps is None else steps
    if eta > 0 and midm is None:
        raise DependencyError(
            "embodiment-aware training (eta > 0) requires a trained MIDM checkpoint; "
            "train the inverse dynamics model first or set model.eta = 0")

    model = WorldModel(mcfg, seed=seed)
    opt = AdamW(model.params, lr=cfg.training.lr, weight_decay=cfg.training.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    frames = episode_frame_arrays(episodes)
    iids = [ep.task.instruction_id for ep in episodes]
    bs = cfg.training.batch_size
    patch = mcfg.patch_size

    probe_rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
    probe = make_flow_batch(frames, iids, probe_rng, min(64, 4 * bs), 1, mcfg, 0.0)

    def probe_causal() -> float:
        with T.no_grad():
            x_t = interpolate_path(probe.x0_tokens, probe.x1_tokens, probe.t)
            v = model.forward_velocity(x_t, probe.t, probe.cond_ids, probe.prev_tokens)
            resid = v.data - velocity_target(probe.x0_tokens, probe.x1_tokens)
        return float(np.mean(resid.astype(np.float64) ** 2))

    causal_initial = probe_causal()
    rows = []
    t_start = time.perf_counter()
    log_interval = max(1, cfg.training.log_interval)
    for it in range(1, steps + 1):
        prefix_len = int(rng.integers(0, mcfg.max_frames))
        batch = make_flow_batch(frames, iids, rng, bs, prefix_len, mcfg,
                                mcfg.cfg_drop_prob)
        x_t = interpolate_path(batch.x0_tokens, batch.x1_tokens, batch.t)
        target = velocity_target(batch.x0_tokens, batch.x1_tokens)
        weights = None
        if eta > 0:
            with T.no_grad():
                masks = midm.predict_mask(batch.x1_pixels)
            weights = embodiment_weights(masks.astype(np.float32), eta, patch)
        v = model.forward_velocity(x_t, batch.t, batch.cond_ids, batch.prev_tokens)
        causal_val = float(np.mean((v.data - target).astype(np.float64) ** 2))
        loss = weighted_flow_loss(v, target, weights)
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        T.clear_tape()
        if it % log_interval == 0:
            wall_ms = (time.perf_counter() - t_start) * 1000.0
            rows.append([it, _fmt(loss.item()), _fmt(causal_val), f"{wall_ms:.1f}"])

    causal_final = probe_causal()
    _write_csv(run_dir / "train_wm.csv", ["step", "loss", "causal_loss", "wall_ms"], rows)
    save_checkpoint(run_dir / "wm.vdrc", model.param_arrays())
    summary = {
        "component": "wm",
        "steps": steps,
        "seed": seed,
        "eta": eta,
        "causal_loss_initial": causal_initial,
        "causal_loss_final": causal_final,
        "config_hash": cfg.config_hash(),
    }
    with open(run_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
        f.write("\n")
    return summary


def train_midm(cfg: ExperimentConfig, episodes: list[Episode], run_dir: Path,
               seed: Optional[int] = None, lam: Optional[float] = None,
               steps: Optional[int] = None) -> dict:
    """Train the masked inverse dynamics model on (frame, producing action) pairs."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    icfg = cfg.midm_config()
    if lam is not None:
        icfg = dataclasses.replace(icfg, lam=lam)
    seed = cfg.training.seed if seed is None else seed
    steps = cfg.training.midm_steps if steps is None else steps
    midm = Midm(icfg, seed=seed)
    mask_params = {k: v for k, v in midm.params.items() if k.startswith("u_")}
    reg_params = {k: v for k, v in midm.params.items() if not k.startswith("u_")}
    opts = [AdamW(mask_params, lr=cfg.training.midm_mask_lr,
                  weight_decay=cfg.training.weight_decay),
            AdamW(reg_params, lr=cfg.training.midm_lr,
                  weight_decay=cfg.training.weight_decay)]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 55]))
    xs, ys = midm_pairs(episodes)
    noise = cfg.midm.noise_std
    rows = []
    final_loss = None
    t_start = time.perf_counter()
    log_interval = max(1, cfg.training.log_interval)
    for it in range(1, steps + 1):
        idx = rng.integers(0, len(xs), size=cfg.training.batch_size)
        x = xs[idx]
        if noise > 0:
            x = np.clip(x + rng.normal(0, noise, x.shape), 0.0, 1.0).astype(np.float32)
        loss = midm.midm_loss(x, ys[idx])
        for opt in opts:
            opt.zero_grad()
        T.backward(loss)
        for opt in opts:
            opt.step()
        T.clear_tape()
        final_loss = loss.item()
        if it % log_interval == 0:
            wall_ms = (time.perf_counter() - t_start) * 1000.0
            rows.append([it, _fmt(final_loss), _fmt(final_loss), f"{wall_ms:.1f}"])
    _write_csv(run_dir / "train_midm.csv", ["step", "loss", "causal_loss", "wall_ms"], rows)
    save_checkpoint(run_dir / "midm.vdrc", midm.param_arrays())
    summary = {
        "component": "midm",
        "steps": steps,
        "seed": seed,
        "lambda": icfg.lam,
        "final_loss": final_loss,
        "config_hash": cfg.config_hash(),
    }
    with open(run_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
        f.write("\n")
    return summary


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def eval_midm(midm: Midm, episodes: list[Episode], env_cfg: EnvConfig) -> dict:
    """Held-out mask IoU vs the renderer ground truth, plus action error."""
    ious, errs, l1s = [], [], []
    for ep in episodes:
        for i in range(1, len(ep.frames)):
            pose = ep.actions[i - 1].q_target
            x = ep.frames[i].pixels
            m = midm.predict_mask(x)
            l1s.append(float(np.abs(m).mean()))
            rounded = midm.round_mask(m) > 0
            gt = E.arm_mask_gt(ArmState(q=pose), env_cfg) > 0
            union = np.logical_or(rounded, gt).sum()
            inter = np.logical_and(rounded, gt).sum()
            ious.append(float(inter / union) if union else 1.0)
            a_hat = midm.predict_action(x)
            errs.append(float(np.abs(wrap_angle(a_hat - pose)).mean()))
    return {
        "mask_iou": float(np.mean(ious)),
        "action_mae_rad": float(np.mean(errs)),
        "mask_l1": float(np.mean(l1s)),
    }


def eval_arm_region_mse(model: WorldModel, episodes: list[Episode], env_cfg: EnvConfig,
                        rcfg: RolloutConfig, seed: int = 0,
                        n_samples: int = 64) -> float:
    """Arm-region pixel MSE of one-step sampled predictions on held-out data.

    Prefixes are teacher-forced ground truth; per-sample noise is seeded so
    different models integrate the same draws (paired comparison).
    """
    mcfg = model.cfg
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    errors = []
    count = 0
    while count < n_samples:
        ep = episodes[int(rng.integers(len(episodes)))]
        if len(ep.frames) < 2:
            continue
        j = int(rng.integers(1, len(ep.frames)))
        k = min(j, rcfg.max_frames - 1)
        prefix = ep.frames[j - k:j]
        gen = TransformerGenerator(model, rcfg, np.random.default_rng(
            np.random.SeedSequence([seed, count])))
        gen.prefill(prefix[0], ep.task.instruction_id)
        if len(prefix) > 1:
            gen.chunk_prefill(list(prefix[1:]))
        pred = gen.generate_next()
        true_next = ep.frames[j].pixels
        pose = ep.actions[j - 1].q_target
        region = E.arm_mask_gt(ArmState(q=pose), env_cfg) > 0
        diff = pred.pixels[region].astype(np.float64) - true_next[region].astype(np.float64)
        errors.append(float(np.mean(diff ** 2)))
        count += 1
    return float(np.mean(errors))


# ---------------------------------------------------------------------------
# policy evaluation (rollout sweeps)
# ---------------------------------------------------------------------------

def sample_eval_task(rng: np.random.Generator, env_cfg: EnvConfig, scenario: str):
    if scenario == "static":
        task = E.sample_task(rng, env_cfg, perturb_prob=0.0)
        start = E.sample_start_state(rng, env_cfg, task, min_start_dist=4.0)
    elif scenario == "dynamic":
        # early jump + far start so the perturbation lands mid-flight
        task = E.sample_task(rng, env_cfg, perturb_prob=1.0, perturb_window=(4, 10))
        start = E.sample_start_state(rng, env_cfg, task, min_start_dist=8.0)
    else:
        raise ContractError(f"unknown scenario {scenario!r}")
    return task, start


def evaluate_policy(cfg: ExperimentConfig, model: Optional[WorldModel],
                    midm: Optional[Midm], mode: str, scenario: str,
                    n_episodes: int, base_seed: int = 0, oracle: bool = False,
                    reprefill: str = "chunked", run_to_horizon: bool = False) -> dict:
    """Run n episodes with distinct seeds; aggregate success and latency.

    Episode seeds are derived from base_seed + index, so sweeps across modes
    with the same base_seed are paired.
    """
    env_cfg = cfg.env_config()
    results = []
    for i in range(n_episodes):
        ep_seed = base_seed + i
        srng = np.random.default_rng(np.random.SeedSequence([ep_seed, 13]))
        task, start = sample_eval_task(srng, env_cfg, scenario)
        rcfg = RolloutConfig(chunk_size=cfg.rollout.chunk_size,
                             max_frames=cfg.model.max_frames,
                             sampling_steps=cfg.rollout.sampling_steps,
                             mode=mode, timeout=cfg.rollout.timeout, seed=ep_seed,
                             guidance_scale=cfg.model.guidance_scale,
                             reprefill=reprefill, run_to_horizon=run_to_horizon)
        arm_env = ArmEnv(env_cfg)
        if oracle:
            gen = OracleGenerator(arm_env, rcfg)
            dec = OracleDecoder()
        else:
            gen = TransformerGenerator(model, rcfg, np.random.default_rng(
                np.random.SeedSequence([ep_seed, 29])))
            dec = midm
        results.append(rollout(arm_env, task, start, gen, dec, rcfg))
    successes = sum(1 for r in results if r.success)
    steps_success = [r.steps for r in results if r.success]
    return {
        "episodes": n_episodes,
        "successes": successes,
        "success_rate": successes / n_episodes,
        "mean_steps_to_success": (float(np.mean(steps_success)) if steps_success else None),
        "mode": mode,
        "scenario": scenario,
        "seeds": [base_seed + i for i in range(n_episodes)],
        "results": results,
    }


def load_episodes_or_fail(cfg: ExperimentConfig, which: str = "dataset") -> list[Episode]:
    dirpath = cfg.resolve(cfg.paths.dataset_dir if which == "dataset" else cfg.paths.heldout_dir)
    if not (dirpath / "index.json").exists():
        raise DependencyError(f"no dataset at {dirpath}; run gen-data first")
    return load_dataset(dirpath)
