"""Episode persistence: binary per-episode files plus a JSON index.

Binary layout (little-endian):
  magic "VDEP" | version u32 | H u32 | W u32 | horizon u32 | n_records u32 | seed u64
  per record: frame f32[H*W] | action f32[2] | success u8
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .env import Action, Episode, EnvConfig, Frame, Perturbation, Task
from .errors import ContractError

MAGIC = b"VDEP"
VERSION = 1


def save_episode(path, ep: Episode, cfg: EnvConfig):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(ep.frames)
    if len(ep.actions) != n or len(ep.success_flags) != n:
        raise ContractError("episode records are misaligned")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIIII", VERSION, cfg.height, cfg.width, cfg.horizon, n))
        f.write(struct.pack("<Q", ep.seed))
        for frame, action, flag in zip(ep.frames, ep.actions, ep.success_flags):
            f.write(frame.pixels.astype("<f4").tobytes())
            f.write(np.asarray(action.q_target, dtype="<f4").tobytes())
            f.write(struct.pack("<B", 1 if flag else 0))


def load_episode(path, task: Task | None = None) -> Episode:
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ContractError(f"{path}: bad magic, not an episode file")
        version, h, w, horizon, n = struct.unpack("<IIIII", f.read(20))
        if version != VERSION:
            raise ContractError(f"{path}: unsupported episode version {version}")
        (seed,) = struct.unpack("<Q", f.read(8))
        frames, actions, flags = [], [], []
        rec = 4 * h * w + 8 + 1
        for i in range(n):
            buf = f.read(rec)
            pixels = np.frombuffer(buf, dtype="<f4", count=h * w).astype(np.float32).reshape(h, w)
            q = np.frombuffer(buf, dtype="<f4", count=2, offset=4 * h * w).astype(np.float64)
            flag = buf[-1] != 0
            frames.append(Frame(pixels=pixels, step_index=i, pose=None, origin="env"))
            actions.append(Action(q_target=q))
            flags.append(flag)
    # pose of frame i+1 is the realized action of step i
    for i in range(1, n):
        frames[i].pose = actions[i - 1].q_target.copy()
    return Episode(frames=frames, actions=actions, success_flags=flags,
                   task=task, success=bool(flags[-1]), seed=seed)


def _task_meta(task: Task) -> dict:
    meta = {
        "instruction_id": task.instruction_id,
        "target": [float(task.target[0]), float(task.target[1])],
        "perturbation": None,
    }
    if task.perturbation is not None:
        meta["perturbation"] = {
            "step": task.perturbation.step,
            "target": [float(task.perturbation.target[0]), float(task.perturbation.target[1])],
        }
    return meta


def _task_from_meta(meta: dict) -> Task:
    pert = None
    if meta.get("perturbation"):
        pert = Perturbation(step=int(meta["perturbation"]["step"]),
                            target=np.asarray(meta["perturbation"]["target"], dtype=np.float64))
    return Task(target=np.asarray(meta["target"], dtype=np.float64),
                instruction_id=int(meta["instruction_id"]), perturbation=pert)


def save_dataset(dirpath, episodes: list[Episode], cfg: EnvConfig) -> Path:
    """Write episode files and the JSON index; returns the index path."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, ep in enumerate(episodes):
        name = f"episode_{i:05d}.vdep"
        save_episode(dirpath / name, ep, cfg)
        entries.append({
            "path": name,
            "seed": ep.seed,
            "length": len(ep.frames),
            "success": bool(ep.success),
            "task": _task_meta(ep.task),
        })
    index = {
        "env": {"height": cfg.height, "width": cfg.width, "horizon": cfg.horizon,
                "l1": cfg.l1, "l2": cfg.l2, "delta_max": cfg.delta_max,
                "success_radius": cfg.success_radius},
        "episodes": entries,
    }
    index_path = dirpath / "index.json"
    with open(index_path, "w") as f:
        json.dump(index, f, indent=1, sort_keys=True)
        f.write("\n")
    return index_path


def load_dataset(dirpath) -> list[Episode]:
    dirpath = Path(dirpath)
    with open(dirpath / "index.json") as f:
        index = json.load(f)
    episodes = []
    for entry in index["episodes"]:
        task = _task_from_meta(entry["task"])
        episodes.append(load_episode(dirpath / entry["path"], task=task))
    return episodes
