"""Left-right symmetry augmentation.

The workspace is symmetric about x = 0.5: reflecting every world x
coordinate, swapping the two arms' channels, and swapping the spatial
instruction maps any valid episode onto another valid episode. The
coordinate map is x -> 1-x computed at the carrier's dtype; at float32 it
is exactly involutive on the 2**-24 grid that uniform draws live on (a
reflection cannot be bitwise involutive on arbitrary floats because the
float grid itself is not symmetric about 0.5).

Grippers here are oriented-less points, so the usual world-frame round trip
for wrist poses reduces to the reflection plus arm swap; a richer
environment would reinstate the frame transforms in these functions.
"""

from __future__ import annotations

import numpy as np

from .env import (
    ACTION_DIM,
    OBS_EYELETS,
    OBS_GRIPPERS,
    OBS_GRIPS,
    OBS_INSTRUCTION,
    OBS_NODES,
    OBS_THREADED,
    PROPRIO_DIM,
    EnvState,
)
from .trajectory import Trajectory


def _reflect_x(coords: np.ndarray) -> np.ndarray:
    """coords (..., 2) with x at [..., 0]; returns reflected copy."""
    out = coords.copy()
    out[..., 0] = out.dtype.type(1.0) - out[..., 0]
    return out


def _swap_pairs(block: np.ndarray) -> np.ndarray:
    """Swap the two per-arm (or per-eyelet) halves of a flat block."""
    half = block.shape[-1] // 2
    out = block.copy()
    out[..., :half], out[..., half:] = block[..., half:], block[..., :half]
    return out


def mirror_observation(obs: np.ndarray) -> np.ndarray:
    """Reflect a flat observation (or a (T, dim) stack of them)."""
    obs = np.asarray(obs)
    out = obs.copy()
    nodes = out[..., OBS_NODES].reshape(*obs.shape[:-1], -1, 2)
    out[..., OBS_NODES] = _reflect_x(nodes).reshape(*obs.shape[:-1], -1)
    eyelets = _reflect_x(out[..., OBS_EYELETS].reshape(*obs.shape[:-1], 2, 2))
    out[..., OBS_EYELETS] = eyelets[..., ::-1, :].reshape(*obs.shape[:-1], -1)
    grippers = _reflect_x(out[..., OBS_GRIPPERS].reshape(*obs.shape[:-1], 2, 2))
    out[..., OBS_GRIPPERS] = grippers[..., ::-1, :].reshape(*obs.shape[:-1], -1)
    out[..., OBS_GRIPS] = _swap_pairs(out[..., OBS_GRIPS])
    out[..., OBS_THREADED] = _swap_pairs(out[..., OBS_THREADED])
    out[..., OBS_INSTRUCTION] = _swap_pairs(out[..., OBS_INSTRUCTION])
    return out


def mirror_proprio(proprio: np.ndarray) -> np.ndarray:
    """Per-arm (x, y, grip): reflect x, keep y and grip, swap arms."""
    p = np.asarray(proprio)
    out = p.copy()
    arms = out.reshape(*p.shape[:-1], 2, 3)
    arms = arms[..., ::-1, :].copy()
    arms[..., 0] = arms.dtype.type(1.0) - arms[..., 0]
    return arms.reshape(*p.shape[:-1], PROPRIO_DIM)


def mirror_action(action: np.ndarray) -> np.ndarray:
    """Per-arm (dx, dy, grip): negate dx, keep dy and grip, swap arms."""
    a = np.asarray(action)
    arms = a.reshape(*a.shape[:-1], 2, 3)[..., ::-1, :].copy()
    arms[..., 0] = -arms[..., 0]
    return arms.reshape(*a.shape[:-1], ACTION_DIM)


def mirror_chunk(chunk: np.ndarray) -> np.ndarray:
    """Mirror every action of a (k, action_dim) chunk (or batch thereof)."""
    return mirror_action(chunk)


def mirror_instruction(instruction: int) -> int:
    return 1 - int(instruction)


def mirror_env_state(state: EnvState) -> EnvState:
    out = state.copy()
    out.nodes = _reflect_x(state.nodes)
    out.grippers = _reflect_x(state.grippers)[::-1].copy()
    out.grips = state.grips[::-1].copy()
    out.held = state.held[::-1].copy()
    out.threaded = state.threaded[::-1].copy()
    out.instruction = mirror_instruction(state.instruction)
    if state.thread_holder >= 0:
        out.thread_holder = 1 - state.thread_holder
    return out


def mirror_trajectory(traj: Trajectory) -> Trajectory:
    return Trajectory(
        episode_id=traj.episode_id + "-mirror",
        instruction=mirror_instruction(traj.instruction),
        observations=mirror_observation(traj.observations),
        proprio=mirror_proprio(traj.proprio),
        actions=mirror_action(traj.actions),
        success=traj.success,
        retry_keyframes=list(traj.retry_keyframes),
        source=traj.source,
        suboptimal_labels=None if traj.suboptimal_labels is None
        else traj.suboptimal_labels.copy(),
        mirrored=not traj.mirrored,
    )


def augment_dataset(trajs) -> list:
    """Original episodes followed by their mirrored copies."""
    out = list(trajs)
    out.extend(mirror_trajectory(t) for t in trajs)
    return out
