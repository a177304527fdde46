"""Deterministic 2D bimanual lace-threading environment.

A deformable chain of beads lies below a horizontal wall that has two narrow
eyelet gaps. Two point grippers move by bounded per-step deltas, grab the
nearest bead within reach when they close, and drag the chain, which relaxes
under position-based distance constraints and is projected out of the walls.
An episode succeeds when the chain tip has crossed the instructed eyelet's
wall line inside its gap, at least `pull_through_nodes` beads sit beyond the
line, and both grips are open.

Internal state is float64 so the dynamics are mirror-equivariant to ~1e-15;
observations are float32 snapshots. All numeric constants in `EnvConfig` are
implementation choices for this benchmark, not measured quantities.

Unit conventions: world coordinates in [0,1]^2, the wall line at y=0.5, the
chain starting below it; threading is an upward crossing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .keyval import read_keyval, write_keyval
from .numcore.rng import SeededRng

# Flat observation layout.
N_NODES = 12
OBS_NODES = slice(0, 24)
OBS_EYELETS = slice(24, 28)
OBS_GRIPPERS = slice(28, 32)
OBS_GRIPS = slice(32, 34)
OBS_THREADED = slice(34, 36)
OBS_INSTRUCTION = slice(36, 38)
OBS_DIM = 38

PROPRIO_DIM = 6  # per arm: x, y, grip
ACTION_DIM = 6   # per arm: dx, dy, grip command

STAGES = ("pick", "thread", "handover", "pull", "none")


@dataclass
class EnvConfig:
    chain_nodes: int = N_NODES
    segment_rest: float = 0.02
    chain_radius: float = 0.005
    solver_iterations: int = 10
    gap_width: float = 0.015
    eyelet_left_x: float = 0.35
    eyelet_right_x: float = 0.65
    wall_y: float = 0.5
    wall_half_width: float = 0.12
    wall_thickness: float = 0.01
    max_steps: int = 200
    max_gripper_step: float = 0.02
    grasp_radius: float = 0.012
    pull_through_nodes: int = 3
    # reset randomization (start pose jitter)
    tip_x_range: tuple = (0.28, 0.52)
    tip_y_range: tuple = (0.24, 0.36)
    chain_angle_range: tuple = (-0.25, 0.25)
    gripper_home_y: float = 0.18
    gripper_home_inset: float = 0.22
    home_jitter: float = 0.03

    def __post_init__(self):
        if not self.gap_width > 2 * self.chain_radius:
            raise ValueError("gap must admit the chain: gap_width <= 2*chain_radius")
        if abs((self.eyelet_left_x + self.eyelet_right_x) - 1.0) > 1e-12:
            raise ValueError("eyelet centers must be symmetric about x=0.5")

    @property
    def eyelet_centers(self):
        return np.array([[self.eyelet_left_x, self.wall_y],
                         [self.eyelet_right_x, self.wall_y]], dtype=np.float64)

    def wall_rects(self, dilation: float = 0.0):
        """Axis-aligned wall rectangles (x0, x1, y0, y1), dilated for a disk
        of the given radius. Each eyelet contributes two segments around its
        gap.

        Bounds are snapped to the 2**-20 grid, on which 1-x is exactly
        representable, and the right wall is then the exact float mirror of
        the left wall. Collision ejection parks beads exactly on these
        bounds, so a contact state reflects onto the opposite wall's contact
        state bit-for-bit; without the snapping, 1-x round trips can drift
        by one ulp and flip face-selection branches between mirrored runs.
        """
        snap = 2.0 ** 20

        def grid(v: float) -> float:
            return round(v * snap) / snap

        half_gap = self.gap_width / 2.0
        y0 = grid(self.wall_y - self.wall_thickness / 2.0 - dilation)
        y1 = grid(self.wall_y + self.wall_thickness / 2.0 + dilation)
        cx = self.eyelet_left_x
        left = [
            (grid(cx - self.wall_half_width - dilation),
             grid(cx - half_gap + dilation), y0, y1),
            (grid(cx + half_gap - dilation),
             grid(cx + self.wall_half_width + dilation), y0, y1),
        ]
        right = [(1.0 - x1, 1.0 - x0, y0, y1) for (x0, x1, y0, y1) in left]
        return left + right

    def to_file(self, path) -> None:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        write_keyval(path, out)

    @classmethod
    def from_file(cls, path) -> "EnvConfig":
        raw = read_keyval(path)
        kwargs = {}
        for f in fields(cls):
            if f.name in raw:
                v = raw[f.name]
                kwargs[f.name] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)


@dataclass
class EnvState:
    nodes: np.ndarray          # (L, 2) float64
    grippers: np.ndarray       # (2, 2) float64
    grips: np.ndarray          # (2,) bool
    held: np.ndarray           # (2,) int, node index or -1
    threaded: np.ndarray       # (2,) bool, per eyelet
    instruction: int           # 0 = left eyelet, 1 = right eyelet
    t: int = 0
    done: bool = False
    picked: bool = False
    handed: bool = False
    pulled: bool = False
    thread_holder: int = -1    # arm holding the tip when it crossed, -1 if none

    def copy(self) -> "EnvState":
        return EnvState(
            nodes=self.nodes.copy(), grippers=self.grippers.copy(),
            grips=self.grips.copy(), held=self.held.copy(),
            threaded=self.threaded.copy(), instruction=self.instruction,
            t=self.t, done=self.done, picked=self.picked, handed=self.handed,
            pulled=self.pulled, thread_holder=self.thread_holder)


@dataclass(frozen=True)
class EpisodeOutcome:
    success: bool
    steps: int
    failure_stage: str  # one of STAGES; "none" iff success

    def __post_init__(self):
        if self.success and self.failure_stage != "none":
            raise ValueError("successful episodes have no failure stage")


class LaceEnv:
    """Stateful environment instance. Single-threaded; copy states to share."""

    def __init__(self, config: EnvConfig | None = None):
        self.cfg = config or EnvConfig()
        self.state: EnvState | None = None
        self._rects = self.cfg.wall_rects(dilation=self.cfg.chain_radius)

    # -- lifecycle -----------------------------------------------------------

    def reset(self, rng: SeededRng, instruction: int) -> np.ndarray:
        cfg = self.cfg
        tip = np.array([rng.uniform(*cfg.tip_x_range), rng.uniform(*cfg.tip_y_range)])
        angle = rng.uniform(*cfg.chain_angle_range)
        direction = np.array([math.cos(angle), math.sin(angle)])
        idx = np.arange(cfg.chain_nodes, dtype=np.float64)[:, None]
        nodes = tip[None, :] + idx * cfg.segment_rest * direction[None, :]
        nodes = nodes + np.asarray(rng.uniform(-0.002, 0.002, shape=(cfg.chain_nodes, 2),
                                               dtype=np.float64))
        grippers = np.array([
            [cfg.gripper_home_inset, cfg.gripper_home_y],
            [1.0 - cfg.gripper_home_inset, cfg.gripper_home_y],
        ])
        grippers = grippers + np.asarray(
            rng.uniform(-cfg.home_jitter, cfg.home_jitter, shape=(2, 2), dtype=np.float64))
        state = EnvState(
            nodes=nodes.astype(np.float64), grippers=grippers.astype(np.float64),
            grips=np.zeros(2, dtype=bool), held=np.full(2, -1, dtype=np.int64),
            threaded=np.zeros(2, dtype=bool), instruction=int(instruction))
        # settle the chain so segment lengths start satisfied
        for _ in range(3 * self.cfg.solver_iterations):
            self._distance_sweep(state)
            self._collide(state)
        self.state = state
        return self.observe()

    def get_state(self) -> EnvState:
        return self.state.copy()

    def set_state(self, state: EnvState) -> None:
        self.state = state.copy()

    # -- observation ----------------------------------------------------------

    def observe(self) -> np.ndarray:
        s = self.state
        obs = np.empty(OBS_DIM, dtype=np.float32)
        obs[OBS_NODES] = s.nodes.astype(np.float32).ravel()
        obs[OBS_EYELETS] = self.cfg.eyelet_centers.astype(np.float32).ravel()
        obs[OBS_GRIPPERS] = s.grippers.astype(np.float32).ravel()
        obs[OBS_GRIPS] = s.grips.astype(np.float32)
        obs[OBS_THREADED] = s.threaded.astype(np.float32)
        one_hot = np.zeros(2, dtype=np.float32)
        one_hot[s.instruction] = 1.0
        obs[OBS_INSTRUCTION] = one_hot
        return obs

    def proprio(self) -> np.ndarray:
        s = self.state
        out = np.empty(PROPRIO_DIM, dtype=np.float32)
        for arm in range(2):
            out[3 * arm:3 * arm + 2] = s.grippers[arm].astype(np.float32)
            out[3 * arm + 2] = np.float32(s.grips[arm])
        return out

    # -- dynamics ---------------------------------------------------------------

    def step(self, action: np.ndarray):
        """Apply one action. Returns (observation, outcome-or-None).

        Actions are clipped, never rejected; calling after termination is a
        caller bug.
        """
        s = self.state
        assert not s.done, "episode already terminated"
        cfg = self.cfg
        a = np.asarray(action, dtype=np.float64).reshape(2, 3)
        tip_before = s.nodes[0].copy()

        # gripper motion
        delta = np.clip(a[:, :2], -cfg.max_gripper_step, cfg.max_gripper_step)
        s.grippers = np.clip(s.grippers + delta, 0.0, 1.0)

        # grip transitions and grasp acquisition
        want = a[:, 2] >= 0.5
        for arm in range(2):
            if want[arm] and not s.grips[arm]:
                s.grips[arm] = True
                d2 = ((s.nodes - s.grippers[arm]) ** 2).sum(axis=1)
                nearest = int(np.argmin(d2))
                if d2[nearest] <= cfg.grasp_radius ** 2:
                    s.held[arm] = nearest
            elif not want[arm] and s.grips[arm]:
                s.grips[arm] = False
                s.held[arm] = -1

        # relaxation: pin, distance constraints, wall projection; ejection is
        # directional (back toward each bead's pre-step position) so a bead
        # dragged deep into a wall in one hop cannot pop out the far side
        nodes_prev = s.nodes.copy()
        for _ in range(cfg.solver_iterations):
            self._pin(s)
            self._distance_sweep(s)
            self._collide(s, nodes_prev)

        # grasp slips if the held bead could not follow
        for arm in range(2):
            n = s.held[arm]
            if n >= 0:
                d2 = ((s.nodes[n] - s.grippers[arm]) ** 2).sum()
                if d2 > cfg.grasp_radius ** 2:
                    s.held[arm] = -1

        # threading: tip path crossing the wall line upward inside a gap
        tip_after = s.nodes[0]
        if tip_before[1] <= cfg.wall_y < tip_after[1]:
            span = tip_after[1] - tip_before[1]
            frac = (cfg.wall_y - tip_before[1]) / span if span > 0 else 0.0
            cross_x = tip_before[0] + frac * (tip_after[0] - tip_before[0])
            half_gap = cfg.gap_width / 2.0
            for e, cx in enumerate((cfg.eyelet_left_x, cfg.eyelet_right_x)):
                if abs(cross_x - cx) < half_gap and not s.threaded[e]:
                    s.threaded[e] = True
                    if e == s.instruction:
                        holder = [arm for arm in range(2) if s.held[arm] == 0]
                        s.thread_holder = holder[0] if holder else -1

        # milestones
        if (s.held == 0).any():
            s.picked = True
        if s.threaded[s.instruction] and s.thread_holder >= 0:
            other = 1 - s.thread_holder
            if s.held[other] == 0 and s.held[s.thread_holder] != 0:
                s.handed = True
        beyond = int((s.nodes[:, 1] > cfg.wall_y).sum())
        if s.threaded[s.instruction] and beyond >= cfg.pull_through_nodes:
            s.pulled = True

        s.t += 1
        outcome = None
        success = (s.threaded[s.instruction] and beyond >= cfg.pull_through_nodes
                   and not s.grips[0] and not s.grips[1])
        if success:
            s.done = True
            outcome = EpisodeOutcome(True, s.t, "none")
        elif s.t >= cfg.max_steps:
            s.done = True
            outcome = EpisodeOutcome(False, s.t, self._failure_stage(s))
        return self.observe(), outcome

    def finish_failed(self) -> EpisodeOutcome:
        """Terminate the episode early as a failure (e.g. demonstrator gave up)."""
        s = self.state
        s.done = True
        return EpisodeOutcome(False, s.t, self._failure_stage(s))

    def _failure_stage(self, s: EnvState) -> str:
        if not s.picked:
            return "pick"
        if not s.threaded[s.instruction]:
            return "thread"
        if not s.handed:
            return "handover"
        return "pull"

    # -- solver pieces ------------------------------------------------------------

    def _pin(self, s: EnvState) -> None:
        a0, a1 = s.held[0], s.held[1]
        if a0 >= 0 and a0 == a1:
            s.nodes[a0] = 0.5 * (s.grippers[0] + s.grippers[1])
        else:
            if a0 >= 0:
                s.nodes[a0] = s.grippers[0]
            if a1 >= 0:
                s.nodes[a1] = s.grippers[1]

    def _pinned_mask(self, s: EnvState):
        pinned = np.zeros(self.cfg.chain_nodes, dtype=bool)
        for arm in range(2):
            if s.held[arm] >= 0:
                pinned[s.held[arm]] = True
        return pinned

    def _distance_sweep(self, s: EnvState) -> None:
        rest = self.cfg.segment_rest
        pinned = self._pinned_mask(s)
        nodes = s.nodes
        for i in range(self.cfg.chain_nodes - 1):
            dx = nodes[i + 1, 0] - nodes[i, 0]
            dy = nodes[i + 1, 1] - nodes[i, 1]
            dist = math.sqrt(dx * dx + dy * dy)
            if dist <= 1e-12:
                continue
            w0 = 0.0 if pinned[i] else 1.0
            w1 = 0.0 if pinned[i + 1] else 1.0
            wsum = w0 + w1
            if wsum == 0.0:
                continue
            scale = (dist - rest) / (dist * wsum)
            cx, cy = scale * dx, scale * dy
            nodes[i, 0] += w0 * cx
            nodes[i, 1] += w0 * cy
            nodes[i + 1, 0] -= w1 * cx
            nodes[i + 1, 1] -= w1 * cy

    def _collide(self, s: EnvState, nodes_prev: np.ndarray | None = None) -> None:
        nodes = s.nodes
        for (x0, x1, y0, y1) in self._rects:
            for i in range(self.cfg.chain_nodes):
                x, y = nodes[i, 0], nodes[i, 1]
                if not (x0 < x < x1 and y0 < y < y1):
                    continue
                if nodes_prev is not None:
                    px, py = nodes_prev[i, 0], nodes_prev[i, 1]
                    if py <= y0:
                        nodes[i, 1] = y0
                        continue
                    if py >= y1:
                        nodes[i, 1] = y1
                        continue
                    if px <= x0:
                        nodes[i, 0] = x0
                        continue
                    if px >= x1:
                        nodes[i, 0] = x1
                        continue
                pens = (x - x0, x1 - x, y - y0, y1 - y)
                face = pens.index(min(pens))
                if face == 0:
                    nodes[i, 0] = x0
                elif face == 1:
                    nodes[i, 0] = x1
                elif face == 2:
                    nodes[i, 1] = y0
                else:
                    nodes[i, 1] = y1

    # -- diagnostics ------------------------------------------------------------

    def constraint_residual(self) -> float:
        """Max per-segment deviation from the rest length."""
        seg = np.diff(self.state.nodes, axis=0)
        lengths = np.hypot(seg[:, 0], seg[:, 1])
        return float(np.abs(lengths - self.cfg.segment_rest).max())


def mirror_env_invariance_probe(env: LaceEnv, state: EnvState, action: np.ndarray,
                                tol: float = 1e-6) -> bool:
    """Check step(M(state), M(action)) == M(step(state, action)) within tol."""
    from .mirror import mirror_action, mirror_env_state  # local import to avoid a cycle

    env.set_state(state)
    env.state.done = False
    env.step(np.asarray(action, dtype=np.float32))
    forward_mirrored = mirror_env_state(env.get_state())

    env.set_state(mirror_env_state(state))
    env.state.done = False
    env.step(mirror_action(np.asarray(action, dtype=np.float32)))
    mirrored_forward = env.get_state()

    a, b = forward_mirrored, mirrored_forward
    return (
        np.allclose(a.nodes, b.nodes, atol=tol)
        and np.allclose(a.grippers, b.grippers, atol=tol)
        and np.array_equal(a.grips, b.grips)
        and np.array_equal(a.held, b.held)
        and np.array_equal(a.threaded, b.threaded)
    )
