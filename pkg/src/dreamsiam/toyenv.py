"""Synthetic distracted visual control task and the sequence replay buffer.

A point mass moves on [-1, 1]^2 under damped velocity control and is rewarded
for sitting on a goal. Observations are 64x64x3 frames: an animated
multi-wave background (or flat gray in clean mode), a goal marker, and the
agent sprite. The background evolves on its own clock every inner physics
step, independent of actions, so pixels change heavily even when the task
state does not.
"""

from __future__ import annotations

import dataclasses
import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ._render import IMG_SIZE, render_background

ACTION_DIM = 2
SPRITE_SIZE = 8
GOAL_RADIUS = 5
SPRITE_COLOR = (255, 255, 255)
GOAL_COLOR = (40, 230, 70)
CLEAN_GRAY = 128
VEL_DECAY = 0.8
MAX_SPEED = 0.1  # steady-state distance per inner step at full action
N_WAVES = 3


@dataclass(frozen=True)
class DistractorState:
    """Per-episode wave table plus the animation clock."""

    params: np.ndarray  # float64 [3, N_WAVES, 5]: kx, ky, omega, phi0, amp
    phase: int


@dataclass(frozen=True)
class EnvState:
    agent_pos: np.ndarray  # float64 [2] in [-1, 1]^2
    agent_vel: np.ndarray
    goal_pos: np.ndarray
    distractor: DistractorState
    step_index: int


def _sample_distractor(rng: np.random.Generator) -> DistractorState:
    params = np.empty((3, N_WAVES, 5))
    params[:, :, 0] = rng.uniform(0.1, 0.55, size=(3, N_WAVES)) * rng.choice([-1, 1], size=(3, N_WAVES))
    params[:, :, 1] = rng.uniform(0.1, 0.55, size=(3, N_WAVES)) * rng.choice([-1, 1], size=(3, N_WAVES))
    params[:, :, 2] = rng.uniform(0.25, 0.8, size=(3, N_WAVES))
    params[:, :, 3] = rng.uniform(0.0, 2 * np.pi, size=(3, N_WAVES))
    params[:, :, 4] = rng.uniform(18.0, 36.0, size=(3, N_WAVES))
    return DistractorState(params, phase=0)


def _to_pixel(pos: np.ndarray) -> tuple[int, int]:
    px = np.clip(np.round((pos + 1.0) / 2.0 * (IMG_SIZE - 1)), 0, IMG_SIZE - 1).astype(int)
    return int(px[1]), int(px[0])  # row, col


def sprite_mask(state: EnvState) -> np.ndarray:
    """Boolean [64, 64] mask of the agent sprite pixels."""
    mask = np.zeros((IMG_SIZE, IMG_SIZE), dtype=bool)
    row, col = _to_pixel(state.agent_pos)
    half = SPRITE_SIZE // 2
    r0, r1 = max(0, row - half), min(IMG_SIZE, row + half)
    c0, c1 = max(0, col - half), min(IMG_SIZE, col + half)
    mask[r0:r1, c0:c1] = True
    return mask


def render_frame(state: EnvState, mode: str) -> np.ndarray:
    """Pure renderer: background, then goal marker, then agent sprite."""
    if mode == "distracted":
        frame = render_background(state.distractor.params, state.distractor.phase)
    elif mode == "clean":
        frame = np.full((IMG_SIZE, IMG_SIZE, 3), CLEAN_GRAY, dtype=np.uint8)
    else:
        raise ValueError(f"unknown render mode {mode!r}")
    row, col = _to_pixel(state.goal_pos)
    ys = np.arange(IMG_SIZE)[:, None]
    xs = np.arange(IMG_SIZE)[None, :]
    goal = (ys - row) ** 2 + (xs - col) ** 2 <= GOAL_RADIUS ** 2
    frame[goal] = GOAL_COLOR
    frame[sprite_mask(state)] = SPRITE_COLOR
    return frame


class DistractedPointMassEnv:
    """Goal-reaching point mass with an action-independent animated background.

    Each `step` applies the action for `action_repeat` inner physics steps;
    reward per inner step is exp(-4 * dist^2) to the goal, so it lies in
    (0, 1] and peaks exactly on the goal. The distractor clock advances every
    inner step regardless of the action.
    """

    def __init__(self, episode_length: int = 250, action_repeat: int = 2,
                 mode: str = "distracted", seed: int = 0):
        if mode not in ("distracted", "clean"):
            raise ValueError(f"unknown render mode {mode!r}")
        self.episode_length = episode_length
        self.action_repeat = action_repeat
        self.mode = mode
        self._rng = np.random.default_rng(seed)
        self._state: Optional[EnvState] = None
        self.clip_warnings = 0

    @property
    def state(self) -> EnvState:
        if self._state is None:
            raise RuntimeError("environment not reset")
        return self._state

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        agent = self._rng.uniform(-0.9, 0.9, size=2)
        while True:
            goal = self._rng.uniform(-0.9, 0.9, size=2)
            if np.linalg.norm(goal - agent) >= 0.5:
                break
        self._state = EnvState(agent, np.zeros(2), goal, _sample_distractor(self._rng), 0)
        return self.render()

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool]:
        s = self.state
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (ACTION_DIM,):
            raise ValueError(f"expected action shape ({ACTION_DIM},), got {action.shape}")
        if np.any(np.abs(action) > 1.0):
            self.clip_warnings += 1
            action = np.clip(action, -1.0, 1.0)
        pos, vel, phase = s.agent_pos.copy(), s.agent_vel.copy(), s.distractor.phase
        reward = 0.0
        for _ in range(self.action_repeat):
            vel = VEL_DECAY * vel + (1.0 - VEL_DECAY) * action * MAX_SPEED
            pos = np.clip(pos + vel, -1.0, 1.0)
            reward += float(np.exp(-4.0 * np.sum((pos - s.goal_pos) ** 2)))
            phase += 1
        self._state = EnvState(pos, vel, s.goal_pos,
                               DistractorState(s.distractor.params, phase),
                               s.step_index + 1)
        done = self._state.step_index >= self.episode_length
        return self.render(), reward, done

    def render(self, mode: Optional[str] = None) -> np.ndarray:
        return render_frame(self.state, mode or self.mode)


class NotReadyError(RuntimeError):
    """Raised when the buffer does not yet hold enough data; retry later."""


@dataclass(frozen=True)
class Episode:
    """Aligned arrays of length N: obs[t] with, for t >= 1, the action that
    led to it and the reward received with it (index 0 is the reset frame,
    its action and reward are zero)."""

    obs: np.ndarray      # uint8 [N, H, W, C]
    actions: np.ndarray  # float32 [N, action_dim]
    rewards: np.ndarray  # float32 [N]

    def __post_init__(self):
        n = self.obs.shape[0]
        if self.actions.shape[0] != n or self.rewards.shape[0] != n:
            raise ValueError("episode arrays must share their first dimension")

    def __len__(self) -> int:
        return self.obs.shape[0]

    @property
    def continues(self) -> np.ndarray:
        """1.0 everywhere except the terminal frame (episodes have fixed length)."""
        flags = np.ones(len(self), dtype=np.float32)
        flags[-1] = 0.0
        return flags


@dataclass(frozen=True)
class TrajectoryBatch:
    obs: np.ndarray        # uint8 [B, L, H, W, C]
    actions: np.ndarray    # float32 [B, L, action_dim]
    rewards: np.ndarray    # float32 [B, L]
    continues: np.ndarray  # float32 [B, L]; 0 marks an episode's final frame


class ReplayBuffer:
    """FIFO episode store; samples length-L segments that never cross
    episode boundaries, uniformly over all valid (episode, offset) pairs."""

    def __init__(self, capacity_steps: int):
        self.capacity_steps = capacity_steps
        self._episodes: deque[Episode] = deque()
        self._steps = 0

    @property
    def num_steps(self) -> int:
        return self._steps

    @property
    def num_episodes(self) -> int:
        return len(self._episodes)

    def add_episode(self, episode: Episode) -> None:
        self._episodes.append(episode)
        self._steps += len(episode)
        while self._steps > self.capacity_steps and len(self._episodes) > 1:
            self._steps -= len(self._episodes.popleft())

    def sample(self, rng: np.random.Generator, batch: int, length: int) -> TrajectoryBatch:
        counts = np.array([max(0, len(ep) - length + 1) for ep in self._episodes])
        total = int(counts.sum())
        if total < 1 or batch < 1:
            raise NotReadyError(
                f"no stored segment of length {length} (episodes: {len(self._episodes)})")
        cumulative = np.cumsum(counts)
        picks = rng.integers(0, total, size=batch)
        obs, actions, rewards, continues = [], [], [], []
        for pick in picks:
            ep_idx = int(np.searchsorted(cumulative, pick, side="right"))
            offset = int(pick - (cumulative[ep_idx - 1] if ep_idx > 0 else 0))
            ep = self._episodes[ep_idx]
            obs.append(ep.obs[offset:offset + length])
            actions.append(ep.actions[offset:offset + length])
            rewards.append(ep.rewards[offset:offset + length])
            continues.append(ep.continues[offset:offset + length])
        return TrajectoryBatch(np.stack(obs), np.stack(actions), np.stack(rewards),
                               np.stack(continues))

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, ep in enumerate(self._episodes):
            name = f"episode_{i:06d}.npz"
            np.savez_compressed(directory / name, obs=ep.obs, actions=ep.actions,
                                rewards=ep.rewards)
            entries.append({"file": name, "length": len(ep)})
        lengths = {len(ep) for ep in self._episodes}
        index = {
            "version": 1,
            "episode_length": lengths.pop() if len(lengths) == 1 else None,
            "episodes": entries,
            "shapes": {"obs": list(self._episodes[0].obs.shape[1:]) if self._episodes else [],
                       "actions": list(self._episodes[0].actions.shape[1:]) if self._episodes else []},
            "dtypes": {"obs": "uint8", "actions": "float32", "rewards": "float32"},
        }
        (directory / "index.json").write_text(json.dumps(index, indent=2))

    @classmethod
    def load(cls, directory: str | Path, capacity_steps: int) -> "ReplayBuffer":
        directory = Path(directory)
        index = json.loads((directory / "index.json").read_text())
        if index.get("version") != 1:
            raise ValueError(f"unsupported episode store version: {index.get('version')}")
        buffer = cls(capacity_steps)
        for entry in index["episodes"]:
            data = np.load(directory / entry["file"])
            buffer.add_episode(Episode(data["obs"], data["actions"], data["rewards"]))
        return buffer


class EpisodeRecorder:
    """Accumulates one episode in the buffer's aligned-array layout."""

    def __init__(self, first_obs: np.ndarray, action_dim: int = ACTION_DIM):
        self._obs = [first_obs]
        self._actions = [np.zeros(action_dim, dtype=np.float32)]
        self._rewards = [0.0]

    def append(self, obs: np.ndarray, action: np.ndarray, reward: float) -> None:
        self._obs.append(obs)
        self._actions.append(np.asarray(action, dtype=np.float32))
        self._rewards.append(float(reward))

    @property
    def episode_return(self) -> float:
        return float(sum(self._rewards))

    def finish(self) -> Episode:
        return Episode(np.stack(self._obs).astype(np.uint8),
                       np.stack(self._actions).astype(np.float32),
                       np.asarray(self._rewards, dtype=np.float32))


def replace_state(state: EnvState, **changes) -> EnvState:
    return dataclasses.replace(state, **changes)
