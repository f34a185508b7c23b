"""Command-line interface.

Subcommands: ``train``, ``eval``, ``diagnose {conflict,probe,bounds}``, and
``verify-bounds``. The artifact root directory comes from the
``DREAMSIAM_ARTIFACTS`` env var (default ``./runs``). Exit code is 0 on
success; failures print a single JSON error line to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .config import Config, load_config
from .diagnostics import (masked_reconstruction_error, probe_decode,
                          train_probe_decoder)
from .infotheory import run_all_fuzz
from .toyenv import DistractedPointMassEnv, EpisodeRecorder, ReplayBuffer
from .trainer import (Trainer, build_agent, evaluate_checkpoint, load_checkpoint,
                      train_run)


def artifact_root() -> Path:
    return Path(os.environ.get("DREAMSIAM_ARTIFACTS", "runs"))


def _default_run_dir(prefix: str, seed: int) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return artifact_root() / f"{prefix}-{stamp}-seed{seed}"


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.resume:
        run_dir = Path(args.run_dir) if args.run_dir else None
        if run_dir is None:
            raise ValueError("--resume requires --run-dir")
        trainer = Trainer.resume(run_dir)
    else:
        run_dir = Path(args.run_dir) if args.run_dir else _default_run_dir("train", cfg.seed)
        trainer = Trainer(cfg, run_dir)
    artifacts = trainer.run()
    print(f"run complete: {artifacts.run_dir}")
    print(f"metrics: {artifacts.metrics_path}")
    print(f"summary: {artifacts.summary_path}")
    return 0


def cmd_eval(args) -> int:
    modes = [args.mode] if args.mode else ["distracted", "clean"]
    for mode in modes:
        summary = evaluate_checkpoint(args.checkpoint, args.episodes, mode, args.seed)
        print(json.dumps(summary))
    return 0


def cmd_verify_bounds(args) -> int:
    reports = run_all_fuzz(args.trials, args.seed)
    ok = True
    for report in reports:
        print(report.line())
        ok = ok and report.passed
    print(f"bound verification: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_diagnose_conflict(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",")]
    out_dir = Path(args.out) if args.out else _default_run_dir("conflict", seeds[0])
    out_dir.mkdir(parents=True, exist_ok=True)
    results: dict = {}
    for variant in ("contrastive", "reconstruction"):
        results[variant] = {}
        for seed in seeds:
            overrides = list(args.set or []) + [
                f"seed={seed}",
                f"objective.variant={variant}",
                "diagnostics.conflict=true",
                f"loop.total_env_steps={args.env_steps}",
            ]
            cfg = load_config(args.config, overrides)
            run_dir = out_dir / f"{variant}-seed{seed}"
            train_run(cfg, run_dir)
            summary = json.loads((run_dir / "summary.json").read_text())
            results[variant][seed] = summary["conflict"]
    report_path = out_dir / "conflict_report.json"
    report_path.write_text(json.dumps(results, indent=2))
    print(json.dumps(results, indent=2))
    print(f"report: {report_path}")
    return 0


def _collect_episodes(cfg: Config, wm, actor, episodes: int, seed: int) -> ReplayBuffer:
    buffer = ReplayBuffer(capacity_steps=10_000_000)
    gen = torch.Generator().manual_seed(seed)
    for ep in range(episodes):
        env = DistractedPointMassEnv(cfg.env.episode_length, cfg.env.action_repeat,
                                     "distracted", seed=seed * 131 + ep)
        obs = env.reset()
        recorder = EpisodeRecorder(obs)
        state = wm.rssm.initial_state(1)
        prev = torch.zeros(1, wm.rssm.action_dim, dtype=wm.dtype)
        done = False
        while not done:
            with torch.no_grad():
                embed = wm.encode(obs[None])
                pair = wm.rssm.posterior_step(state, prev, embed, gen)
                state = pair.state
                action = actor.act(state.feature, "eval")
            obs, reward, done = env.step(action[0].numpy())
            recorder.append(obs, action[0].numpy(), reward)
            prev = action
        buffer.add_episode(recorder.finish())
    return buffer


def cmd_diagnose_probe(args) -> int:
    payload = load_checkpoint(args.checkpoint)
    cfg, wm, actor, _ = build_agent(payload)
    out_dir = Path(args.out) if args.out else _default_run_dir("probe", cfg.seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    buffer = _collect_episodes(cfg, wm, actor, args.episodes, args.seed)
    rng = np.random.default_rng(args.seed)
    gen = torch.Generator().manual_seed(args.seed)
    batch_fn = lambda: buffer.sample(rng, args.batch, args.length)
    result = train_probe_decoder(wm, batch_fn, args.steps, generator=gen)

    batch = batch_fn()
    with torch.no_grad():
        embeds = wm.encode(batch.obs)
        actions = torch.as_tensor(batch.actions, dtype=wm.dtype)
        pairs = wm.observe(embeds, actions, gen)
        features = torch.stack([p.state.feature for p in pairs], dim=1)
    recon = probe_decode(result.decoder, features)
    grid_path = out_dir / "probe_grid.png"
    _save_grid(grid_path, batch.obs[0], recon[0])

    # The sprite is the only pure-white content (background is clipped below
    # 255), so its mask can be read off the original frames.
    sprite_err, background_err = [], []
    for b in range(batch.obs.shape[0]):
        for t in range(batch.obs.shape[1]):
            mask = (batch.obs[b, t] == 255).all(axis=-1)
            if not mask.any():
                continue
            inside, outside = masked_reconstruction_error(recon[b, t], batch.obs[b, t], mask)
            sprite_err.append(inside)
            background_err.append(outside)
    report = {
        "probe_steps": args.steps,
        "first_loss": result.losses[0],
        "last_loss": result.losses[-1],
        "sprite_mse": float(np.mean(sprite_err)) if sprite_err else None,
        "background_mse": float(np.mean(background_err)) if background_err else None,
        "grid": str(grid_path),
    }
    (out_dir / "probe_report.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report, indent=2))
    return 0


def _save_grid(path: Path, originals: np.ndarray, recons: np.ndarray,
               max_cols: int = 8) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = min(max_cols, originals.shape[0])
    fig, axes = plt.subplots(2, n, figsize=(1.2 * n, 2.6))
    for i in range(n):
        axes[0][i].imshow(originals[i])
        axes[1][i].imshow(recons[i])
        for ax in (axes[0][i], axes[1][i]):
            ax.set_xticks([])
            ax.set_yticks([])
    axes[0][0].set_ylabel("input")
    axes[1][0].set_ylabel("probe")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dreamsiam",
                                     description="Distraction-robust world-model RL")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training job")
    p_train.add_argument("--config", default=None, help="YAML config file")
    p_train.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p_train.add_argument("--run-dir", default=None)
    p_train.add_argument("--resume", action="store_true",
                         help="continue from the latest checkpoint in --run-dir")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--episodes", type=int, required=True)
    p_eval.add_argument("--mode", choices=["clean", "distracted"], default=None)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.set_defaults(func=cmd_eval)

    p_diag = sub.add_parser("diagnose", help="diagnostics")
    diag_sub = p_diag.add_subparsers(dest="diagnostic", required=True)

    p_conf = diag_sub.add_parser("conflict", help="gradient-alignment comparison")
    p_conf.add_argument("--config", default=None)
    p_conf.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p_conf.add_argument("--seeds", default="0,1,2")
    p_conf.add_argument("--env-steps", type=int, default=30_000)
    p_conf.add_argument("--out", default=None)
    p_conf.set_defaults(func=cmd_diagnose_conflict)

    p_probe = diag_sub.add_parser("probe", help="train a probe decoder on frozen latents")
    p_probe.add_argument("--checkpoint", required=True)
    p_probe.add_argument("--episodes", type=int, default=4)
    p_probe.add_argument("--steps", type=int, default=500)
    p_probe.add_argument("--batch", type=int, default=8)
    p_probe.add_argument("--length", type=int, default=8)
    p_probe.add_argument("--seed", type=int, default=0)
    p_probe.add_argument("--out", default=None)
    p_probe.set_defaults(func=cmd_diagnose_probe)

    p_bounds = diag_sub.add_parser("bounds", help="verify information bounds")
    p_bounds.add_argument("--trials", type=int, default=1000)
    p_bounds.add_argument("--seed", type=int, default=0)
    p_bounds.set_defaults(func=cmd_verify_bounds)

    p_verify = sub.add_parser("verify-bounds", help="alias of `diagnose bounds`")
    p_verify.add_argument("--trials", type=int, default=1000)
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.set_defaults(func=cmd_verify_bounds)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surfaced as a machine-readable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
