"""Deterministic 2D push-block environment with rendered RGB observations.

A point gripper moves in the unit square; when it overlaps the block with the
grip engaged, the block moves with it. Success: block within 0.05 of the goal.
Proprioception mirrors the usual robot-state roles (position, velocity,
aperture, goal, gripper-to-goal) as named vectors.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import zip_write

TOY_PROPRIO_SCHEMA: list[tuple[str, int]] = [
    ("gripper_position", 2),
    ("gripper_velocity", 2),
    ("gripper_aperture", 1),
    ("goal_position", 2),
    ("gripper_to_goal", 2),
]

GOAL_DIM = 2
ACTION_DIM = 3
DEMO_SCHEMA_VERSION = 1


@dataclass
class EnvConfig:
    render_size: int = 112
    max_steps: int = 200
    success_eps: float = 0.05
    engage_radius: float = 0.06   # gripper-block distance that counts as overlap
    action_clip: float = 0.05
    min_separation: float = 0.2
    spawn_margin: float = 0.15


@dataclass
class EnvState:
    gripper: np.ndarray       # (2,)
    gripper_vel: np.ndarray   # (2,)
    aperture: float
    block: np.ndarray         # (2,)
    goal: np.ndarray          # (2,)


def _clip_pos(p: np.ndarray) -> np.ndarray:
    return np.clip(p, 0.0, 1.0)


def clip_action(action: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64).copy()
    a[:2] = np.clip(a[:2], -cfg.action_clip, cfg.action_clip)
    a[2] = np.clip(a[2], 0.0, 1.0)
    return a


def reset(seed: int, cfg: EnvConfig | None = None) -> EnvState:
    cfg = cfg or EnvConfig()
    rng = np.random.default_rng(seed)
    lo, hi = cfg.spawn_margin, 1.0 - cfg.spawn_margin
    block = rng.uniform(lo, hi, size=2)
    while True:
        goal = rng.uniform(lo, hi, size=2)
        if np.linalg.norm(goal - block) >= cfg.min_separation:
            break
    gripper = rng.uniform(lo, hi, size=2)
    return EnvState(
        gripper=gripper,
        gripper_vel=np.zeros(2),
        aperture=0.0,
        block=block,
        goal=goal,
    )


def is_success(state: EnvState, cfg: EnvConfig) -> bool:
    return bool(np.linalg.norm(state.block - state.goal) <= cfg.success_eps)


def step(state: EnvState, action: np.ndarray, cfg: EnvConfig | None = None):
    """Pure transition: returns (next_state, success)."""
    cfg = cfg or EnvConfig()
    a = clip_action(action, cfg)
    new_gripper = _clip_pos(state.gripper + a[:2])
    delta = new_gripper - state.gripper
    overlapping = np.linalg.norm(state.gripper - state.block) <= cfg.engage_radius
    block = state.block
    if overlapping and a[2] > 0.5:
        block = _clip_pos(state.block + delta)
    nxt = EnvState(
        gripper=new_gripper,
        gripper_vel=delta.copy(),
        aperture=float(a[2]),
        block=block,
        goal=state.goal.copy(),
    )
    return nxt, is_success(nxt, cfg)


def proprio_state(state: EnvState) -> dict[str, np.ndarray]:
    return {
        "gripper_position": state.gripper.astype(np.float32),
        "gripper_velocity": state.gripper_vel.astype(np.float32),
        "gripper_aperture": np.array([state.aperture], dtype=np.float32),
        "goal_position": state.goal.astype(np.float32),
        "gripper_to_goal": (state.goal - state.gripper).astype(np.float32),
    }


def _disk_mask(xs, ys, center, radius):
    return (xs - center[0]) ** 2 + (ys - center[1]) ** 2 <= radius**2


def render(state: EnvState, cfg: EnvConfig | None = None) -> np.ndarray:
    """RGB observation in [0,1], a deterministic function of the state."""
    cfg = cfg or EnvConfig()
    s = cfg.render_size
    ys, xs = (np.mgrid[0:s, 0:s] + 0.5) / s
    # static procedural texture so the encoder sees non-trivial background
    tex = 0.08 * np.sin(14.0 * xs) * np.cos(11.0 * ys)
    img = np.empty((s, s, 3), dtype=np.float64)
    img[:, :, 0] = 0.50 + tex
    img[:, :, 1] = 0.52 + tex
    img[:, :, 2] = 0.55 + tex

    # goal: hollow green square outline
    half = 0.05
    gx, gy = state.goal
    outer = (np.abs(xs - gx) <= half) & (np.abs(ys - gy) <= half)
    inner = (np.abs(xs - gx) <= half - 0.018) & (np.abs(ys - gy) <= half - 0.018)
    ring = outer & ~inner
    img[ring] = (0.1, 0.8, 0.2)

    # block: filled orange square
    bx, by = state.block
    block = (np.abs(xs - bx) <= 0.04) & (np.abs(ys - by) <= 0.04)
    img[block] = (0.9, 0.45, 0.1)

    # gripper: blue disk; engaged grip shows a darker core
    grip = _disk_mask(xs, ys, state.gripper, 0.035)
    img[grip] = (0.15, 0.3, 0.85)
    if state.aperture > 0.5:
        core = _disk_mask(xs, ys, state.gripper, 0.018)
        img[core] = (0.05, 0.1, 0.4)

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def expert_action(state: EnvState, cfg: EnvConfig | None = None) -> np.ndarray:
    """Proportional controller: approach the block, engage, carry to the goal."""
    cfg = cfg or EnvConfig()
    if is_success(state, cfg):
        return np.zeros(ACTION_DIM)
    to_block = state.block - state.gripper
    if np.linalg.norm(to_block) > 0.8 * cfg.engage_radius:
        target = state.block
        grip = 0.0
    else:
        # aim so the *block* (offset from the gripper) lands on the goal
        target = state.goal + (state.gripper - state.block)
        grip = 1.0
    raw = np.concatenate([target - state.gripper, [grip]])
    return clip_action(raw, cfg)


@dataclass
class Demo:
    observations: np.ndarray            # T x S x S x 3 uint8
    proprio: dict[str, np.ndarray]      # name -> T x dim float32
    goal: np.ndarray                    # (2,) float32
    actions: np.ndarray                 # T x 3 float32
    success: bool
    seed: int

    def __len__(self):
        return self.actions.shape[0]


def run_episode(policy_fn, seed: int, cfg: EnvConfig | None = None, record: bool = False):
    """Roll one episode; policy_fn(obs[0,1]-float, proprio dict, goal) -> action."""
    cfg = cfg or EnvConfig()
    state = reset(seed, cfg)
    obs_list, prop_list, act_list = [], [], []
    success = False
    for _ in range(cfg.max_steps):
        obs = render(state, cfg)
        prop = proprio_state(state)
        action = np.asarray(policy_fn(obs, prop, state.goal.astype(np.float32)))
        if record:
            obs_list.append(np.round(obs * 255).astype(np.uint8))
            prop_list.append(prop)
            act_list.append(action.astype(np.float32))
        state, success = step(state, action, cfg)
        if success:
            break
    demo = None
    if record:
        demo = Demo(
            observations=np.stack(obs_list) if obs_list else np.zeros((0, cfg.render_size, cfg.render_size, 3), np.uint8),
            proprio={
                name: np.stack([p[name] for p in prop_list]).astype(np.float32)
                for name, _ in TOY_PROPRIO_SCHEMA
            } if prop_list else {},
            goal=state.goal.astype(np.float32),
            actions=np.stack(act_list).astype(np.float32) if act_list else np.zeros((0, 3), np.float32),
            success=success,
            seed=seed,
        )
    return success, demo


def collect_demos(n: int, seed: int, cfg: EnvConfig | None = None) -> list[Demo]:
    """Run the scripted expert until ``n`` successful trajectories are stored."""
    cfg = cfg or EnvConfig()
    demos = []
    attempt = 0
    while len(demos) < n:
        if attempt > 5 * n + 100:
            raise RuntimeError(f"expert could not collect {n} demos (got {len(demos)})")
        ep_seed = seed + attempt
        attempt += 1
        state = reset(ep_seed, cfg)
        obs_list, prop_list, act_list = [], [], []
        success = False
        for _ in range(cfg.max_steps):
            action = expert_action(state, cfg)
            obs_list.append(np.round(render(state, cfg) * 255).astype(np.uint8))
            prop_list.append(proprio_state(state))
            act_list.append(action.astype(np.float32))
            state, success = step(state, action, cfg)
            if success:
                break
        if not success:
            continue
        demos.append(
            Demo(
                observations=np.stack(obs_list),
                proprio={
                    name: np.stack([p[name] for p in prop_list]).astype(np.float32)
                    for name, _ in TOY_PROPRIO_SCHEMA
                },
                goal=state.goal.astype(np.float32),
                actions=np.stack(act_list).astype(np.float32),
                success=True,
                seed=ep_seed,
            )
        )
    return demos


def evaluate_policy(policy_fn, n_episodes: int, seed: int, cfg: EnvConfig | None = None) -> float:
    """Mean success over episodes seeded seed..seed+n-1."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    cfg = cfg or EnvConfig()
    wins = 0
    for i in range(n_episodes):
        success, _ = run_episode(policy_fn, seed + i, cfg)
        wins += int(success)
    return wins / n_episodes


def save_demos(path: Path, demos: list[Demo]) -> Path:
    """Archive: per-demo 8-bit observation PNGs plus one JSON record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        index = {"schema_version": DEMO_SCHEMA_VERSION, "count": len(demos)}
        zip_write(zf, "index.json", json.dumps(index))
        for d_idx, demo in enumerate(demos):
            base = f"demo_{d_idx:05d}"
            record = {
                "seed": demo.seed,
                "success": demo.success,
                "goal": demo.goal.tolist(),
                "actions": demo.actions.tolist(),
                "proprio": {k: v.tolist() for k, v in demo.proprio.items()},
                "n_steps": len(demo),
            }
            zip_write(zf, f"{base}/record.json", json.dumps(record))
            for t in range(len(demo)):
                buf = io.BytesIO()
                Image.fromarray(demo.observations[t]).save(buf, format="PNG")
                zip_write(zf, f"{base}/obs_{t:04d}.png", buf.getvalue())
    return path


def load_demos(path: Path) -> list[Demo]:
    demos = []
    with zipfile.ZipFile(Path(path), "r") as zf:
        index = json.loads(zf.read("index.json"))
        if index["schema_version"] != DEMO_SCHEMA_VERSION:
            raise ValueError(f"unsupported demo schema {index['schema_version']}")
        for d_idx in range(index["count"]):
            base = f"demo_{d_idx:05d}"
            record = json.loads(zf.read(f"{base}/record.json"))
            obs = np.stack(
                [
                    np.asarray(Image.open(io.BytesIO(zf.read(f"{base}/obs_{t:04d}.png"))))
                    for t in range(record["n_steps"])
                ]
            )
            demos.append(
                Demo(
                    observations=obs,
                    proprio={k: np.asarray(v, np.float32) for k, v in record["proprio"].items()},
                    goal=np.asarray(record["goal"], np.float32),
                    actions=np.asarray(record["actions"], np.float32),
                    success=record["success"],
                    seed=record["seed"],
                )
            )
    return demos
