"""Visual gridworld with hidden grid state and noisy pixel observations.

The hidden chain is a deterministic grid walk; observations render the agent
cell as a bright 3x3 pixel block plus additive Gaussian noise clipped to
[0, 1]. Observations are a function of (state, noise seed) only, so the
block-MDP property holds by construction.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .rng import make_rng
from .validation import ContractError, ShapeError

ACTIONS = ("up", "down", "left", "right")
CELL_PX = 3

DATASET_MAGIC = b"TASKVQDS"
DATASET_VERSION = 1


@dataclass(frozen=True)
class GridState:
    row: int
    col: int
    size: int = 10

    def __post_init__(self):
        if not (0 <= self.row < self.size and 0 <= self.col < self.size):
            raise ContractError(f"state ({self.row},{self.col}) outside {self.size}x{self.size}")


def obs_dim(grid_size):
    return (CELL_PX * grid_size) ** 2


def step(state, action):
    """Move one cell; moves into a wall clamp to the current cell."""
    if action not in (0, 1, 2, 3):
        raise ContractError(f"invalid action {action!r}")
    dr, dc = ((-1, 0), (1, 0), (0, -1), (0, 1))[action]
    r = min(max(state.row + dr, 0), state.size - 1)
    c = min(max(state.col + dc, 0), state.size - 1)
    return GridState(r, c, state.size)


def render(state, seed, noise_std=0.1):
    """30x30 image for a 10x10 grid (3px per cell); agent block at 1.0.

    Additive N(0, noise_std) per pixel, then clipped back to [0, 1]; the same
    (state, seed) pair always yields the identical image.
    """
    side = CELL_PX * state.size
    img = np.zeros((side, side), dtype=np.float32)
    r0, c0 = CELL_PX * state.row, CELL_PX * state.col
    img[r0 : r0 + CELL_PX, c0 : c0 + CELL_PX] = 1.0
    if noise_std > 0:
        rng = make_rng(seed, "render")
        img += rng.normal(0.0, noise_std, size=img.shape).astype(np.float32)
        np.clip(img, 0.0, 1.0, out=img)
    return img


def decode_cell(pixels, grid_size):
    """Recover the agent cell from an observation by the brightest 3x3 block."""
    side = CELL_PX * grid_size
    img = np.asarray(pixels, dtype=np.float32).reshape(side, side)
    sums = img.reshape(grid_size, CELL_PX, grid_size, CELL_PX).sum(axis=(1, 3))
    flat = int(np.argmax(sums))
    return flat // grid_size, flat % grid_size


@dataclass
class EpisodeConfig:
    goal: GridState
    max_steps: int = 200
    step_reward: float = -1.0
    noise_std: float = 0.1
    noise_bounds: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.max_steps < 1:
            raise ContractError("max_steps must be >= 1")


@dataclass
class TransitionBatch:
    """Offline transitions: flattened observations, actions, successors, done flags."""

    x: np.ndarray
    a: np.ndarray
    x_next: np.ndarray
    done: np.ndarray
    grid_size: int = 10
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.a = np.asarray(self.a, dtype=np.int32)
        self.x_next = np.asarray(self.x_next, dtype=np.float32)
        self.done = np.asarray(self.done, dtype=np.uint8)
        n = self.x.shape[0]
        if not (self.a.shape == (n,) and self.x_next.shape == self.x.shape and self.done.shape == (n,)):
            raise ShapeError("transition arrays disagree on length")
        if n and (self.a.min() < 0 or self.a.max() > 3):
            raise ContractError("actions must be in {0,1,2,3}")

    def __len__(self):
        return self.x.shape[0]


def collect_random_walk(seed, n_steps, reset_prob=0.05, grid_size=10, noise_std=0.1):
    """Uniform-random actions with random resets; reward-free by design.

    Each recorded row is a genuine (x, a, x') transition; done marks that the
    walk teleported afterwards (an episode boundary). reset_prob=1 therefore
    yields length-1 episodes. Bitwise reproducible for a fixed seed.
    """
    if n_steps < 1:
        raise ContractError("n_steps must be >= 1")
    if not 0.0 <= reset_prob <= 1.0:
        raise ContractError("reset_prob must be in [0, 1]")
    act_rng = make_rng(seed, "walk-actions")
    reset_rng = make_rng(seed, "walk-resets")
    start_rng = make_rng(seed, "walk-starts")
    noise_rng = make_rng(seed, "walk-noise")

    def random_cell():
        return GridState(int(start_rng.integers(grid_size)), int(start_rng.integers(grid_size)), grid_size)

    d = obs_dim(grid_size)
    xs = np.empty((n_steps, d), dtype=np.float32)
    acts = np.empty(n_steps, dtype=np.int32)
    xns = np.empty((n_steps, d), dtype=np.float32)
    dones = np.empty(n_steps, dtype=np.uint8)

    state = random_cell()
    img = render(state, int(noise_rng.integers(2**62)), noise_std).reshape(-1)
    for t in range(n_steps):
        a = int(act_rng.integers(4))
        nxt = step(state, a)
        nxt_img = render(nxt, int(noise_rng.integers(2**62)), noise_std).reshape(-1)
        done = reset_rng.random() < reset_prob
        xs[t], acts[t], xns[t], dones[t] = img, a, nxt_img, done
        if done:
            state = random_cell()
            img = render(state, int(noise_rng.integers(2**62)), noise_std).reshape(-1)
        else:
            state, img = nxt, nxt_img
    return TransitionBatch(xs, acts, xns, dones, grid_size, noise_std, seed)


class GridworldEnv:
    """Online episodic wrapper used by the reward-driven stage."""

    def __init__(self, config, grid_size=10, seed=0):
        self.config = config
        self.grid_size = grid_size
        self._rng = make_rng(seed, "env")
        self._state = None
        self._steps = 0

    def _observe(self):
        return render(self._state, int(self._rng.integers(2**62)), self.config.noise_std).reshape(-1)

    def reset(self):
        goal = self.config.goal
        while True:
            s = GridState(int(self._rng.integers(self.grid_size)),
                          int(self._rng.integers(self.grid_size)), self.grid_size)
            if (s.row, s.col) != (goal.row, goal.col):
                break
        self._state = s
        self._steps = 0
        return self._observe()

    def step(self, action):
        self._state = step(self._state, action)
        self._steps += 1
        goal = self.config.goal
        reached = (self._state.row, self._state.col) == (goal.row, goal.col)
        done = reached or self._steps >= self.config.max_steps
        return self._observe(), self.config.step_reward, done, {"success": reached}


def run_episode(policy, config, seed, grid_size=10):
    """Roll one episode; returns (undiscounted return, steps, success)."""
    env = GridworldEnv(config, grid_size, seed)
    obs = env.reset()
    total = 0.0
    for t in range(config.max_steps):
        obs, reward, done, info = env.step(policy(obs))
        total += reward
        if done:
            return total, t + 1, info["success"]
    return total, config.max_steps, False


# -- dataset persistence ------------------------------------------------------


def save_dataset(path, batch):
    header = {
        "grid_size": batch.grid_size,
        "noise_std": batch.noise_std,
        "count": len(batch),
        "seed": batch.seed,
        "obs_dim": batch.x.shape[1],
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<II", DATASET_VERSION, len(payload)))
        fh.write(payload)
        fh.write(np.ascontiguousarray(batch.x, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(batch.a, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(batch.x_next, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(batch.done, dtype="<u1").tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        if fh.read(8) != DATASET_MAGIC:
            raise ContractError(f"{path}: not a transition dataset")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != DATASET_VERSION:
            raise ContractError(f"{path}: unsupported dataset version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        n, d = header["count"], header["obs_dim"]
        x = np.frombuffer(fh.read(4 * n * d), dtype="<f4").reshape(n, d).copy()
        a = np.frombuffer(fh.read(4 * n), dtype="<i4").copy()
        x_next = np.frombuffer(fh.read(4 * n * d), dtype="<f4").reshape(n, d).copy()
        done = np.frombuffer(fh.read(n), dtype="<u1").copy()
    return TransitionBatch(x, a, x_next, done, header["grid_size"], header["noise_std"],
                           header["seed"])
