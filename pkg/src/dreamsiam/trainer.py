"""Training harness: data collection, alternating model/policy updates,
metrics, evaluation, checkpoints, and plots.

The loop is single-threaded and deterministic per seed: collection with the
current policy alternates with blocks of gradient steps, each gradient step
pairing one model update with one policy update on imagined rollouts.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import Config, config_from_dict, save_config
from .diagnostics import ConflictRecord, conflict_ratio, gradient_conflict_sample
from .nets import freeze_parameters, global_grad_norm_clip
from .objectives import OBJECTIVES, WorldModel
from .policy import Actor, Critic, actor_loss, critic_loss, imagine_rollout
from .toyenv import (ACTION_DIM, DistractedPointMassEnv, EpisodeRecorder,
                     NotReadyError, ReplayBuffer)

CHECKPOINT_VERSION = 1

METRIC_COLUMNS = [
    "train_step", "env_steps", "beta", "simsiam", "reward", "tvd", "c_inv",
    "recon", "kl", "kl_value", "total", "actor_loss", "critic_loss",
    "value_mean", "episode_return", "conflict_inner",
]


@dataclass
class RunArtifacts:
    run_dir: Path
    config_path: Path
    metrics_path: Path
    eval_path: Path
    summary_path: Path
    checkpoints: list[Path] = field(default_factory=list)
    plots: list[Path] = field(default_factory=list)


class MetricsWriter:
    """Append-only CSV with one self-describing header and one row per step."""

    def __init__(self, path: Path, resume: bool = False):
        self.path = path
        exists = path.exists()
        if resume and not exists:
            raise FileNotFoundError(f"cannot resume: {path} missing")
        self._fh = open(path, "a" if resume else "w", newline="")
        self._writer = csv.writer(self._fh)
        if not resume:
            self._writer.writerow(METRIC_COLUMNS)
            self._fh.flush()

    def write(self, row: dict) -> None:
        self._writer.writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Trainer:
    def __init__(self, cfg: Config, run_dir: str | Path, resume: bool = False):
        cfg.validate()
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)

        torch.manual_seed(cfg.seed)
        self.wm = WorldModel(cfg)
        self.actor = Actor(self.wm.feature_dim, ACTION_DIM, cfg.model.hidden,
                           cfg.model.head_hidden_layers)
        self.critic = Critic(self.wm.feature_dim, cfg.model.hidden,
                             cfg.model.head_hidden_layers)
        self.model_opt = torch.optim.Adam(self.wm.parameters(), lr=cfg.optim.model_lr)
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=cfg.optim.actor_lr)
        self.critic_opt = torch.optim.Adam(self.critic.parameters(), lr=cfg.optim.critic_lr)

        self.env = DistractedPointMassEnv(cfg.env.episode_length, cfg.env.action_repeat,
                                          cfg.env.mode, seed=cfg.seed * 7919 + 1)
        self.buffer = ReplayBuffer(cfg.loop.buffer_capacity)
        self.torch_gen = torch.Generator().manual_seed(cfg.seed + 101)
        self.aug_rng = np.random.default_rng(cfg.seed + 202)
        self.sample_rng = np.random.default_rng(cfg.seed + 303)
        self.prefill_rng = np.random.default_rng(cfg.seed + 404)

        self.env_steps = 0
        self.train_steps = 0
        self.episodes_done = 0
        self.last_return: Optional[float] = None
        self.conflict_records: list[ConflictRecord] = []
        self.conflict_undefined = 0

        self._agent_state = None
        self._prev_action = np.zeros(ACTION_DIM, dtype=np.float32)
        self._recorder: Optional[EpisodeRecorder] = None
        self._obs: Optional[np.ndarray] = None

        self.config_path = self.run_dir / "config.yaml"
        self.metrics_path = self.run_dir / "metrics.csv"
        self.eval_path = self.run_dir / "eval.csv"
        if not resume:
            save_config(cfg, self.config_path)  # resolved snapshot before any step
        self.metrics = MetricsWriter(self.metrics_path, resume=resume)
        self._eval_fh = open(self.eval_path, "a" if resume else "w", newline="")
        self._eval_writer = csv.writer(self._eval_fh)
        if not resume:
            self._eval_writer.writerow(["env_steps", "mode", "mean", "std", "episodes"])
            self._eval_fh.flush()

    # ------------------------------------------------------------------
    # Interaction
    # ------------------------------------------------------------------

    def _policy_action(self, obs: np.ndarray, mode: str) -> np.ndarray:
        with torch.no_grad():
            embed = self.wm.encode(obs[None])
            if self._agent_state is None:
                self._agent_state = self.wm.rssm.initial_state(1)
            action = torch.as_tensor(self._prev_action, dtype=self.wm.dtype)[None]
            pair = self.wm.rssm.posterior_step(self._agent_state, action, embed,
                                               self.torch_gen)
            self._agent_state = pair.state
            out = self.actor.act(pair.state.feature, mode, self.torch_gen)
        return out[0].numpy().astype(np.float32)

    def _begin_episode(self) -> None:
        self._obs = self.env.reset()
        self._agent_state = None
        self._prev_action = np.zeros(ACTION_DIM, dtype=np.float32)
        self._recorder = EpisodeRecorder(self._obs)

    def collect(self, env_step_budget: int, random_actions: bool) -> None:
        """Advance the environment by at least `env_step_budget` env steps,
        storing completed episodes in the replay buffer."""
        target = self.env_steps + env_step_budget
        if self._obs is None:
            self._begin_episode()
        while self.env_steps < target:
            if random_actions:
                action = self.prefill_rng.uniform(-1.0, 1.0, ACTION_DIM).astype(np.float32)
            else:
                action = self._policy_action(self._obs, "explore")
            obs, reward, done = self.env.step(action)
            self.env_steps += self.cfg.env.action_repeat
            self._recorder.append(obs, action, reward)
            self._obs = obs
            self._prev_action = action
            if done:
                self.last_return = self._recorder.episode_return
                self.buffer.add_episode(self._recorder.finish())
                self.episodes_done += 1
                self._begin_episode()

    # ------------------------------------------------------------------
    # Updates
    # ------------------------------------------------------------------

    def _schedule_t(self) -> float:
        if self.cfg.schedule.t_unit == "train_steps":
            return float(self.train_steps)
        return float(self.env_steps)

    def train_step(self) -> dict:
        cfg = self.cfg
        batch = self.buffer.sample(self.sample_rng, cfg.batch.size, cfg.batch.length)
        row: dict = {}

        diag = cfg.diagnostics
        if diag.conflict and self.train_steps % diag.conflict_every == 0:
            record = gradient_conflict_sample(
                self.wm, batch, cfg.objective.variant, self.train_steps, cfg,
                self.torch_gen, self.aug_rng)
            if record is None:
                self.conflict_undefined += 1
            else:
                self.conflict_records.append(record)
                row["conflict_inner"] = record.inner_product

        objective = OBJECTIVES[cfg.objective.variant]
        out = objective(self.wm, batch, self._schedule_t(), cfg, self.torch_gen,
                        self.aug_rng)
        loss = -out.breakdown.total
        if not torch.isfinite(loss):
            self._dump_failure(out.breakdown.scalars())
            raise RuntimeError(f"non-finite model loss at train step {self.train_steps}")
        self.model_opt.zero_grad()
        loss.backward()
        global_grad_norm_clip(self.wm.parameters(), cfg.optim.grad_clip)
        self.model_opt.step()

        start = out.posterior_states.detach()
        with freeze_parameters(self.wm, self.critic):
            rollout = imagine_rollout(self.wm, self.actor, self.critic, start,
                                      cfg.policy.horizon, cfg.policy.gamma,
                                      self.torch_gen)
            a_loss = actor_loss(rollout, cfg.policy.gamma, cfg.policy.lam)
            self.actor_opt.zero_grad()
            a_loss.backward()
        global_grad_norm_clip(self.actor.parameters(), cfg.optim.grad_clip)
        self.actor_opt.step()

        c_loss = critic_loss(self.critic, rollout, cfg.policy.gamma, cfg.policy.lam)
        self.critic_opt.zero_grad()
        c_loss.backward()
        global_grad_norm_clip(self.critic.parameters(), cfg.optim.grad_clip)
        self.critic_opt.step()

        self.train_steps += 1
        row.update(out.breakdown.scalars())
        row.update({
            "train_step": self.train_steps,
            "env_steps": self.env_steps,
            "actor_loss": float(a_loss.detach()),
            "critic_loss": float(c_loss.detach()),
            "value_mean": float(rollout.values.mean().detach()),
            "episode_return": self.last_return,
        })
        self.metrics.write(row)
        return row

    def _dump_failure(self, scalars: dict) -> None:
        payload = {"train_step": self.train_steps, "env_steps": self.env_steps,
                   "terms": scalars}
        (self.run_dir / "failure_dump.json").write_text(json.dumps(payload, indent=2))

    # ------------------------------------------------------------------
    # Evaluation
    # ------------------------------------------------------------------

    def evaluate(self, episodes: int, mode: str, seed: int) -> dict:
        if episodes < 1:
            raise ValueError(f"episodes must be >= 1, got {episodes}")
        returns = run_eval_episodes(self.cfg, self.wm, self.actor, episodes, mode, seed)
        return {"mean": float(np.mean(returns)), "std": float(np.std(returns)),
                "returns": returns}

    def _periodic_eval(self) -> None:
        for mode in ("distracted", "clean"):
            summary = self.evaluate(self.cfg.loop.eval_episodes, mode,
                                    seed=self.cfg.seed + 505)
            self._eval_writer.writerow([self.env_steps, mode,
                                        repr(summary["mean"]), repr(summary["std"]),
                                        self.cfg.loop.eval_episodes])
        self._eval_fh.flush()

    # ------------------------------------------------------------------
    # Persistence
    # ------------------------------------------------------------------

    def save_checkpoint(self, path: Optional[Path] = None) -> Path:
        path = path or (self.run_dir / "checkpoints" / f"step_{self.env_steps:09d}.pt")
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "counters": {"env_steps": self.env_steps, "train_steps": self.train_steps,
                         "episodes_done": self.episodes_done,
                         "last_return": self.last_return,
                         "conflict_undefined": self.conflict_undefined},
            "conflict_records": [(r.step, r.inner_product) for r in self.conflict_records],
            "world_model": self.wm.state_dict(),
            "actor": self.actor.state_dict(),
            "critic": self.critic.state_dict(),
            "model_opt": self.model_opt.state_dict(),
            "actor_opt": self.actor_opt.state_dict(),
            "critic_opt": self.critic_opt.state_dict(),
            "torch_gen": self.torch_gen.get_state(),
            "clip_warnings": self.env.clip_warnings,
        }
        torch.save(payload, path)
        torch.save(payload, self.run_dir / "checkpoints" / "latest.pt")
        return path

    @classmethod
    def resume(cls, run_dir: str | Path) -> "Trainer":
        run_dir = Path(run_dir)
        payload = load_checkpoint(run_dir / "checkpoints" / "latest.pt")
        cfg = config_from_dict(payload["config"])
        trainer = cls(cfg, run_dir, resume=True)
        trainer.wm.load_state_dict(payload["world_model"])
        trainer.actor.load_state_dict(payload["actor"])
        trainer.critic.load_state_dict(payload["critic"])
        trainer.model_opt.load_state_dict(payload["model_opt"])
        trainer.actor_opt.load_state_dict(payload["actor_opt"])
        trainer.critic_opt.load_state_dict(payload["critic_opt"])
        trainer.torch_gen.set_state(payload["torch_gen"])
        counters = payload["counters"]
        trainer.env_steps = counters["env_steps"]
        trainer.train_steps = counters["train_steps"]
        trainer.episodes_done = counters["episodes_done"]
        trainer.last_return = counters["last_return"]
        trainer.conflict_undefined = counters["conflict_undefined"]
        trainer.conflict_records = [ConflictRecord(s, v)
                                    for s, v in payload["conflict_records"]]
        return trainer

    # ------------------------------------------------------------------
    # Main loop
    # ------------------------------------------------------------------

    def run(self) -> RunArtifacts:
        cfg = self.cfg
        artifacts = RunArtifacts(self.run_dir, self.config_path, self.metrics_path,
                                 self.eval_path, self.run_dir / "summary.json")
        if self.env_steps < cfg.loop.prefill:
            self.collect(cfg.loop.prefill - self.env_steps, random_actions=True)
        last_eval = self.env_steps
        last_ckpt = self.env_steps
        while self.env_steps < cfg.loop.total_env_steps:
            chunk = min(cfg.loop.collect_interval,
                        cfg.loop.total_env_steps - self.env_steps)
            self.collect(chunk, random_actions=False)
            try:
                for _ in range(cfg.loop.train_iters):
                    self.train_step()
            except NotReadyError:
                continue  # not enough stored segments yet; keep collecting
            if cfg.loop.eval_every and self.env_steps - last_eval >= cfg.loop.eval_every:
                self._periodic_eval()
                last_eval = self.env_steps
            if self.env_steps - last_ckpt >= cfg.loop.checkpoint_every:
                artifacts.checkpoints.append(self.save_checkpoint())
                last_ckpt = self.env_steps
        artifacts.checkpoints.append(self.save_checkpoint())
        self._write_summary(artifacts)
        artifacts.plots = make_plots(self.run_dir)
        self.metrics.close()
        self._eval_fh.close()
        return artifacts

    def _write_summary(self, artifacts: RunArtifacts) -> None:
        final_eval = {}
        for mode in ("distracted", "clean"):
            final_eval[mode] = self.evaluate(self.cfg.loop.eval_episodes, mode,
                                             seed=self.cfg.seed + 606)
        warm = [r for r in self.conflict_records
                if r.step >= self.cfg.diagnostics.conflict_warmup]
        summary = {
            "env_steps": self.env_steps,
            "train_steps": self.train_steps,
            "episodes": self.episodes_done,
            "clip_warnings": self.env.clip_warnings,
            "eval": final_eval,
            "conflict": {
                "records": len(self.conflict_records),
                "undefined": self.conflict_undefined,
                "ratio_after_warmup": conflict_ratio(warm) if warm else None,
            },
        }
        artifacts.summary_path.write_text(json.dumps(summary, indent=2))


# ----------------------------------------------------------------------
# Standalone evaluation and checkpoint loading
# ----------------------------------------------------------------------

def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"incompatible checkpoint version {payload.get('version')!r}; "
            f"this build reads version {CHECKPOINT_VERSION}")
    return payload


def build_agent(payload: dict) -> tuple[Config, WorldModel, Actor, Critic]:
    cfg = config_from_dict(payload["config"])
    wm = WorldModel(cfg)
    wm.load_state_dict(payload["world_model"])
    actor = Actor(wm.feature_dim, ACTION_DIM, cfg.model.hidden,
                  cfg.model.head_hidden_layers)
    actor.load_state_dict(payload["actor"])
    critic = Critic(wm.feature_dim, cfg.model.hidden, cfg.model.head_hidden_layers)
    critic.load_state_dict(payload["critic"])
    return cfg, wm, actor, critic


def run_eval_episodes(cfg: Config, wm: WorldModel, actor: Actor, episodes: int,
                      mode: str, seed: int) -> list[float]:
    """Deterministic eval rollouts: mean (tanh-squashed) actions, seeded
    state-filtering noise, one env seed per episode."""
    gen = torch.Generator().manual_seed(seed)
    returns = []
    for ep in range(episodes):
        env = DistractedPointMassEnv(cfg.env.episode_length, cfg.env.action_repeat,
                                     mode, seed=seed * 9973 + ep)
        obs = env.reset()
        state = wm.rssm.initial_state(1)
        prev_action = torch.zeros(1, ACTION_DIM, dtype=wm.dtype)
        total = 0.0
        done = False
        while not done:
            with torch.no_grad():
                embed = wm.encode(obs[None])
                pair = wm.rssm.posterior_step(state, prev_action, embed, gen)
                state = pair.state
                action = actor.act(state.feature, "eval")
            obs, reward, done = env.step(action[0].numpy())
            total += reward
            prev_action = action
        returns.append(total)
    return returns


def evaluate_checkpoint(path: str | Path, episodes: int, mode: str, seed: int = 0) -> dict:
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    cfg, wm, actor, _ = build_agent(load_checkpoint(path))
    returns = run_eval_episodes(cfg, wm, actor, episodes, mode, seed)
    return {"mode": mode, "mean": float(np.mean(returns)),
            "std": float(np.std(returns)), "returns": returns}


def train_run(cfg: Config, run_dir: str | Path) -> RunArtifacts:
    return Trainer(cfg, run_dir).run()


# ----------------------------------------------------------------------
# Plots
# ----------------------------------------------------------------------

def make_plots(run_dir: str | Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    out = []
    metrics = _read_csv(run_dir / "metrics.csv")

    eval_rows = _read_csv(run_dir / "eval.csv")
    if eval_rows:
        fig, ax = plt.subplots(figsize=(6, 4))
        for mode in ("distracted", "clean"):
            xs = [float(r["env_steps"]) for r in eval_rows if r["mode"] == mode]
            ys = [float(r["mean"]) for r in eval_rows if r["mode"] == mode]
            if xs:
                ax.plot(xs, ys, marker="o", label=mode)
        ax.set_xlabel("env steps")
        ax.set_ylabel("eval return")
        ax.legend()
        fig.tight_layout()
        path = run_dir / "returns.png"
        fig.savefig(path)
        plt.close(fig)
        out.append(path)

    if metrics:
        xs = [float(r["env_steps"]) for r in metrics if r["beta"]]
        ys = [float(r["beta"]) for r in metrics if r["beta"]]
        if xs:
            fig, ax = plt.subplots(figsize=(6, 4))
            ax.plot(xs, ys)
            ax.set_yscale("log")
            ax.set_xlabel("env steps")
            ax.set_ylabel("dynamics weight")
            fig.tight_layout()
            path = run_dir / "beta.png"
            fig.savefig(path)
            plt.close(fig)
            out.append(path)

        inner = [float(r["conflict_inner"]) for r in metrics if r["conflict_inner"]]
        if inner:
            fig, ax = plt.subplots(figsize=(6, 4))
            ax.hist(inner, bins=40, range=(-1, 1))
            ax.axvline(0.0, color="k", linewidth=1)
            ax.set_xlabel("normalized gradient inner product")
            ax.set_ylabel("count")
            fig.tight_layout()
            path = run_dir / "conflict_hist.png"
            fig.savefig(path)
            plt.close(fig)
            out.append(path)
    return out


def _read_csv(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path) as fh:
        return list(csv.DictReader(fh))
