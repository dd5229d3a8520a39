"""Command-line front end: data generation, training, rollouts, ablations,
latency benchmarks, and artifact inspection.

Every run directory receives the resolved config, its hash, the package
version, and the seeds involved. Deterministic metrics (frames, losses,
success counts) are written to files that contain no wall-clock values, so
identical config + seed reruns are byte-identical; timing goes to separate
CSV files.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, apply_overrides, load_config
from .engine import RolloutConfig, measure_latency
from .env import generate_dataset
from .episodes import save_dataset
from .errors import DependencyError, FlowArmError
from .midm import Midm
from .model import WorldModel
from .train import (eval_arm_region_mse, eval_midm, evaluate_policy,
                    load_episodes_or_fail, train_midm, train_world_model)


def _run_dir(cfg: ExperimentConfig, out: str | None, kind: str) -> Path:
    if out:
        p = Path(out)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        p = cfg.resolve(cfg.paths.runs_dir) / f"{stamp}-{kind}-{cfg.config_hash()}"
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_provenance(cfg: ExperimentConfig, run_dir: Path, seeds: list[int]):
    with open(run_dir / "provenance.json", "w") as f:
        json.dump({
            "config": cfg.to_dict(),
            "config_hash": cfg.config_hash(),
            "version": __version__,
            "seeds": seeds,
        }, f, indent=1, sort_keys=True)
        f.write("\n")


def _load_midm(cfg: ExperimentConfig, path: Path | None = None) -> Midm:
    path = path or cfg.resolve(cfg.paths.midm_checkpoint)
    if not Path(path).exists():
        raise DependencyError(f"missing MIDM checkpoint at {path}; run train-idm first")
    midm = Midm(cfg.midm_config(), seed=cfg.training.seed)
    midm.load_arrays(load_checkpoint(path))
    return midm


def _load_wm(cfg: ExperimentConfig, path: Path | None = None) -> WorldModel:
    path = path or cfg.resolve(cfg.paths.wm_checkpoint)
    if not Path(path).exists():
        raise DependencyError(f"missing world-model checkpoint at {path}; run train-wm first")
    model = WorldModel(cfg.model_config(), seed=cfg.training.seed)
    model.load_arrays(load_checkpoint(path))
    return model


def _write_latency_csv(path: Path, rows: list[dict]):
    with open(path, "w") as f:
        f.write("run_id,chunk_idx,latency_s,prefill_s,sample_s,end_to_end_s\n")
        for r in rows:
            f.write(f"{r['run_id']},{r['chunk_idx']},{r['latency_s']:.6f},"
                    f"{r['prefill_s']:.6f},{r['sample_s']:.6f},{r['end_to_end_s']:.6f}\n")


def _latency_rows(results) -> list[dict]:
    rows = []
    for rid, res in enumerate(results):
        for ci, chunk in enumerate(res.latency.chunks):
            rows.append({"run_id": rid, "chunk_idx": ci, "latency_s": chunk.latency_s,
                         "prefill_s": chunk.prefill_s, "sample_s": chunk.sample_s,
                         "end_to_end_s": res.latency.end_to_end})
    return rows


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    env_cfg = cfg.env_config()
    train_dir = cfg.resolve(cfg.paths.dataset_dir)
    held_dir = cfg.resolve(cfg.paths.heldout_dir)
    eps = generate_dataset(cfg.data.n_episodes, env_cfg.horizon, cfg.data.seed,
                           env_cfg, cfg.data.perturb_prob)
    save_dataset(train_dir, eps, env_cfg)
    held = generate_dataset(cfg.data.heldout_episodes, env_cfg.horizon,
                            cfg.data.seed + 1, env_cfg, cfg.data.perturb_prob)
    save_dataset(held_dir, held, env_cfg)
    print(f"wrote {len(eps)} training episodes to {train_dir}")
    print(f"wrote {len(held)} held-out episodes to {held_dir}")
    return 0


def cmd_train_wm(cfg: ExperimentConfig, args) -> int:
    episodes = load_episodes_or_fail(cfg, "dataset")
    run_dir = _run_dir(cfg, args.out, "train-wm")
    midm = None
    eta = cfg.model.eta if args.eta is None else args.eta
    if eta > 0:
        midm = _load_midm(cfg)
    seed = cfg.training.seed if args.seed is None else args.seed
    summary = train_world_model(cfg, episodes, run_dir, seed=seed, eta=eta, midm=midm)
    _write_provenance(cfg, run_dir, [seed])
    ckpt = cfg.resolve(cfg.paths.wm_checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    ckpt.write_bytes((run_dir / "wm.vdrc").read_bytes())
    print(f"trained wm for {summary['steps']} steps (eta={eta}); "
          f"causal loss {summary['causal_loss_initial']:.4f} -> {summary['causal_loss_final']:.4f}")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_train_idm(cfg: ExperimentConfig, args) -> int:
    episodes = load_episodes_or_fail(cfg, "dataset")
    run_dir = _run_dir(cfg, args.out, "train-idm")
    seed = cfg.training.seed if args.seed is None else args.seed
    summary = train_midm(cfg, episodes, run_dir, seed=seed, lam=args.lam)
    _write_provenance(cfg, run_dir, [seed])
    ckpt = cfg.resolve(cfg.paths.midm_checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    ckpt.write_bytes((run_dir / "midm.vdrc").read_bytes())
    final = summary["final_loss"]
    print(f"trained midm for {summary['steps']} steps"
          + (f"; final loss {final:.4f}" if final is not None else ""))
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_rollout(cfg: ExperimentConfig, args) -> int:
    run_dir = _run_dir(cfg, args.out, "rollout")
    n = args.episodes or cfg.rollout.episodes
    base_seed = cfg.training.seed if args.seed is None else args.seed
    model = midm = None
    if not args.oracle:
        model = _load_wm(cfg)
        midm = _load_midm(cfg)
    report = evaluate_policy(cfg, model, midm, cfg.rollout.mode, cfg.rollout.scenario,
                             n, base_seed=base_seed, oracle=args.oracle,
                             reprefill=cfg.rollout.reprefill)
    results = report.pop("results")
    report["episodes_detail"] = [r.to_metrics() for r in results]
    report["config_hash"] = cfg.config_hash()
    report["version"] = __version__
    report["oracle"] = bool(args.oracle)
    with open(run_dir / "results.json", "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
        f.write("\n")
    _write_latency_csv(run_dir / "latency.csv", _latency_rows(results))
    _write_provenance(cfg, run_dir, report["seeds"])
    print(f"{cfg.rollout.mode} / {cfg.rollout.scenario}: "
          f"success rate {report['success_rate']:.2f} over {n} episodes")
    print(f"results: {run_dir / 'results.json'}")
    return 0


def cmd_ablate(cfg0: ExperimentConfig, args) -> int:
    """Train (if needed) and evaluate one cell per --cell override set."""
    if not args.cell:
        raise DependencyError("ablate requires at least one --cell override set")
    run_dir = _run_dir(cfg0, args.out, "ablate")
    episodes = load_episodes_or_fail(cfg0, "dataset")
    n = args.episodes or cfg0.rollout.episodes
    base_seed = cfg0.training.seed if args.seed is None else args.seed
    table = []
    for cell_spec in args.cell:
        overrides = {}
        for assignment in cell_spec.split(","):
            key, _, value = assignment.partition("=")
            overrides[key.strip()] = value.strip()
        cfg = load_config(args.config, overrides=overrides) if args.config else \
            apply_overrides(ExperimentConfig(), overrides)
        cfg.base_dir = cfg0.base_dir
        cell_id = "_".join(f"{k.split('.')[-1]}={v}" for k, v in overrides.items())
        cell_dir = run_dir / f"cell_{cell_id}"
        midm = _load_midm(cfg0)
        wm_ckpt = cell_dir / "wm.vdrc"
        if not wm_ckpt.exists():
            train_world_model(cfg, episodes, cell_dir, eta=cfg.model.eta,
                              midm=midm if cfg.model.eta > 0 else None)
        model = WorldModel(cfg.model_config(), seed=cfg.training.seed)
        model.load_arrays(load_checkpoint(wm_ckpt))
        report = evaluate_policy(cfg, model, midm, cfg.rollout.mode,
                                 cfg.rollout.scenario, n, base_seed=base_seed,
                                 reprefill=cfg.rollout.reprefill)
        results = report.pop("results")
        row = {
            "cell": cell_id,
            "overrides": overrides,
            "success_rate": report["success_rate"],
            "successes": report["successes"],
            "episodes": n,
            "mean_steps_to_success": report["mean_steps_to_success"],
            "seeds": report["seeds"],
        }
        table.append(row)
        _write_latency_csv(cell_dir / "latency.csv", _latency_rows(results))
        print(f"cell {cell_id}: success rate {row['success_rate']:.2f}")
    out = {
        "cells": table,
        "config_hash": cfg0.config_hash(),
        "version": __version__,
        "episodes_per_cell": n,
    }
    with open(run_dir / "ablation.json", "w") as f:
        json.dump(out, f, indent=1, sort_keys=True)
        f.write("\n")
    with open(run_dir / "ablation.csv", "w") as f:
        f.write("cell,success_rate,successes,episodes,mean_steps_to_success\n")
        for row in table:
            ms = row["mean_steps_to_success"]
            f.write(f"{row['cell']},{row['success_rate']:.4f},{row['successes']},"
                    f"{row['episodes']},{'' if ms is None else f'{ms:.2f}'}\n")
    _write_provenance(cfg0, run_dir, [base_seed + i for i in range(n)])
    print(f"ablation table: {run_dir / 'ablation.csv'}")
    return 0


def cmd_bench_latency(cfg: ExperimentConfig, args) -> int:
    run_dir = _run_dir(cfg, args.out, "bench")
    model = _load_wm(cfg)
    midm = _load_midm(cfg)
    reps = max(5, args.repetitions)
    rows_all = {}
    medians = {}
    for mode in ("chunked", "full"):
        report = evaluate_policy(cfg, model, midm, "closed_loop", "static", reps,
                                 base_seed=cfg.training.seed, reprefill=mode,
                                 run_to_horizon=True)
        results = report.pop("results")
        rows_all[mode] = _latency_rows(results)
        lat = [c.latency_s for r in results for c in r.latency.chunks]
        medians[mode] = {
            "latency_median_s": float(np.median(lat)),
            "latency_p90_s": float(np.percentile(lat, 90)),
            "prefill_total_median_s": float(np.median([r.latency.prefill_cost for r in results])),
            "sampling_total_median_s": float(np.median([r.latency.sampling_cost for r in results])),
            "end_to_end_median_s": float(np.median([r.latency.end_to_end for r in results])),
        }
    _write_latency_csv(run_dir / "latency_chunked.csv", rows_all["chunked"])
    _write_latency_csv(run_dir / "latency_full_reprefill.csv", rows_all["full"])
    saving = 1.0 - (medians["chunked"]["prefill_total_median_s"]
                    / max(medians["full"]["prefill_total_median_s"], 1e-12))
    summary = {
        "repetitions": reps,
        "chunked": medians["chunked"],
        "full_reprefill": medians["full"],
        "prefill_saving_pct": 100.0 * saving,
        "version": __version__,
        "config_hash": cfg.config_hash(),
    }
    with open(run_dir / "bench.json", "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
        f.write("\n")
    print(f"latency median {medians['chunked']['latency_median_s']:.3f}s, "
          f"end-to-end median {medians['chunked']['end_to_end_median_s']:.3f}s, "
          f"re-prefill saving {summary['prefill_saving_pct']:.1f}%")
    print(f"bench report: {run_dir / 'bench.json'}")
    return 0


def _write_pgm(path: Path, img: np.ndarray):
    arr = np.clip(img, 0.0, 1.0)
    data = (arr * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        f.write(data.tobytes())


def cmd_inspect(cfg: ExperimentConfig, args) -> int:
    from .episodes import load_episode
    run_dir = _run_dir(cfg, args.out, "inspect")
    ep = load_episode(args.episode)
    midm = None
    midm_path = cfg.resolve(cfg.paths.midm_checkpoint)
    if midm_path.exists():
        midm = _load_midm(cfg, midm_path)
    count = 0
    for i, frame in enumerate(ep.frames):
        if args.stride and i % args.stride:
            continue
        _write_pgm(run_dir / f"frame_{i:03d}.pgm", frame.pixels)
        if midm is not None:
            _write_pgm(run_dir / f"mask_{i:03d}.pgm", midm.predict_mask(frame.pixels))
        count += 1
    print(f"wrote {count} frame dumps{' + masks' if midm else ''} to {run_dir}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowarm",
                                description="flow-matching pixel world model with closed-loop arm control")
    p.add_argument("--config", help="TOML experiment config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set model.eta=0")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", help="generate expert datasets")

    sp = sub.add_parser("train-wm", help="train the world model")
    sp.add_argument("--out", help="run directory")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--eta", type=float, help="embodiment loss strength override")

    sp = sub.add_parser("train-idm", help="train the masked inverse dynamics model")
    sp.add_argument("--out", help="run directory")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--lam", type=float, help="mask sparsity weight override")

    sp = sub.add_parser("rollout", help="evaluate the policy over episodes")
    sp.add_argument("--out", help="run directory")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--oracle", action="store_true",
                    help="substitute the environment-backed oracle generator/decoder")

    sp = sub.add_parser("ablate", help="run an ablation sweep")
    sp.add_argument("--out", help="run directory")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--cell", action="append", default=[],
                    metavar="KEY=VALUE[,KEY=VALUE...]",
                    help="one sweep cell as config overrides (repeatable)")

    sp = sub.add_parser("bench-latency", help="latency benchmark with re-prefill comparison")
    sp.add_argument("--out", help="run directory")
    sp.add_argument("--repetitions", type=int, default=5)

    sp = sub.add_parser("inspect", help="dump frames (and masks) from an episode file as PGM")
    sp.add_argument("episode", help="path to a .vdep episode file")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--stride", type=int, default=1)
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-wm": cmd_train_wm,
    "train-idm": cmd_train_idm,
    "rollout": cmd_rollout,
    "ablate": cmd_ablate,
    "bench-latency": cmd_bench_latency,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = {}
        for item in args.set:
            key, _, value = item.partition("=")
            if not _:
                raise DependencyError(f"malformed --set (expected KEY=VALUE): {item}")
            overrides[key.strip()] = value.strip()
        cfg = load_config(args.config, overrides=overrides)
        return COMMANDS[args.command](cfg, args)
    except FlowArmError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
