"""Scripted demonstrator producing deliberately imperfect episodes.

A waypoint controller runs pick -> thread -> handover -> pull -> release
with two kinds of injected suboptimality: hesitation pauses (a few steps of
positional jitter at waypoint entry) and threading misses (the ascent aims
off-center, hits the wall, backs off, and retries). The step at which each
retry begins is recorded as a retry keyframe, and every suboptimal step gets
a ground-truth label (pause or miss) that downstream code may use only for
evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import ACTION_DIM, EnvConfig, LaceEnv
from .numcore.rng import SeededRng
from .trajectory import LABEL_MISS, LABEL_OK, LABEL_PAUSE, Trajectory

# Waypoints where the demonstrator may hesitate. The threading alignment is
# deliberately not one of them: hesitations there would stretch failed
# attempts past the chunk horizon and blur their onset.
PAUSABLE = {"pick_approach", "carry_low", "recv_approach",
            "recv_descend", "ta_retreat", "pull"}


@dataclass
class TeleopConfig:
    p_hesitate: float = 0.3
    p_miss: float = 0.25
    pause_min: int = 5
    pause_max: int = 15
    jitter_sigma: float = 0.004
    miss_offset: float = 0.02
    retry_budget: int = 3
    waypoint_tol: float = 0.002
    grasp_tol: float = 0.006     # close distance; must stay under the grasp radius
    phase_timeout: int = 80
    ascend_speed: float = 0.004  # demonstrators slow down for the precise insert
    # waypoint heights around the wall at y=0.5
    carry_y: float = 0.44
    align_y: float = 0.48
    above_y: float = 0.52
    hover_y: float = 0.56
    retreat_y: float = 0.43
    pull_y: float = 0.60


class _Give_up(Exception):
    pass


class _Script:
    """Phase machine; reads privileged env state, emits one action per step."""

    def __init__(self, env: LaceEnv, rng: SeededRng, cfg: TeleopConfig):
        self.env = env
        self.rng = rng
        self.cfg = cfg
        instr = env.state.instruction
        self.ta = instr            # threading arm on the instructed side
        self.ra = 1 - instr
        self.cx = env.cfg.eyelet_left_x if instr == 0 else env.cfg.eyelet_right_x
        self.grip_cmd = [0.0, 0.0]
        self.phase = None
        self.phase_steps = 0
        self.pause_left = 0
        self.offset = 0.0
        self.pending_miss = False
        self.miss_onset = None
        self.misses = 0
        self.keyframes = []
        self.labels_patch = []     # (start, end) spans to re-label as MISS
        self._enter("pick_approach")

    # -- phase bookkeeping --------------------------------------------------

    def _enter(self, phase: str) -> None:
        self.phase = phase
        self.phase_steps = 0
        if phase in PAUSABLE and self.rng.bernoulli(self.cfg.p_hesitate):
            self.pause_left = int(self.rng.integers(self.cfg.pause_min,
                                                    self.cfg.pause_max + 1))
        if phase == "align":
            self.offset = self.cfg.miss_offset if self.rng.bernoulli(self.cfg.p_miss) else 0.0
            self.pending_miss = self.offset != 0.0

    def _arrived(self, arm: int, target, tol: float | None = None) -> bool:
        g = self.env.state.grippers[arm]
        tol = self.cfg.waypoint_tol if tol is None else tol
        return float(np.hypot(g[0] - target[0], g[1] - target[1])) < tol

    def _move(self, arm: int, target, speed: float | None = None) -> np.ndarray:
        a = np.zeros(ACTION_DIM, dtype=np.float32)
        g = self.env.state.grippers[arm]
        step = self.env.cfg.max_gripper_step if speed is None else speed
        a[3 * arm + 0] = np.clip(target[0] - g[0], -step, step)
        a[3 * arm + 1] = np.clip(target[1] - g[1], -step, step)
        a[3 * arm + 2] = self.grip_cmd[arm]
        a[3 * (1 - arm) + 2] = self.grip_cmd[1 - arm]
        return a

    def _hold(self) -> np.ndarray:
        a = np.zeros(ACTION_DIM, dtype=np.float32)
        a[2] = self.grip_cmd[0]
        a[5] = self.grip_cmd[1]
        return a

    def _jitter(self, arm: int) -> np.ndarray:
        a = self._hold()
        a[3 * arm + 0] = self.rng.normal(scale=self.cfg.jitter_sigma)
        a[3 * arm + 1] = self.rng.normal(scale=self.cfg.jitter_sigma)
        return a

    # -- decision per step ----------------------------------------------------

    def decide(self, step_index: int):
        """Return (action, label) for this step; raises _Give_up on abort."""
        cfg, env = self.cfg, self.env
        s = env.state
        self.phase_steps += 1
        if self.phase_steps > cfg.phase_timeout:
            raise _Give_up

        if self.pause_left > 0:
            self.pause_left -= 1
            active = self.ra if self.phase.startswith("recv") or self.phase == "pull" \
                else self.ta
            return self._jitter(active), LABEL_PAUSE

        if self.phase == "pick_approach":
            tip = s.nodes[0]
            if self._arrived(self.ta, tip, self.cfg.grasp_tol):
                self.phase = "pick_settle"
                self.phase_steps = 0
            else:
                return self._move(self.ta, tip), LABEL_OK
        if self.phase == "pick_settle":
            # one stationary step so closures happen at rest in the data
            self.phase = "pick_grasp"
            return self._hold(), LABEL_OK
        if self.phase == "pick_grasp":
            self.grip_cmd[self.ta] = 1.0
            self.phase = "pick_check"
            self.phase_steps = 0
            return self._hold(), LABEL_OK
        if self.phase == "pick_check":
            if s.held[self.ta] == 0:
                self._enter("carry_low")
            else:
                self.grip_cmd[self.ta] = 0.0
                self._enter("pick_approach")
                return self._hold(), LABEL_OK
        if self.phase == "carry_low":
            target = (self.cx, cfg.carry_y)
            if self._arrived(self.ta, target):
                self._enter("align")
            else:
                return self._move(self.ta, target), LABEL_OK
        if self.phase == "align":
            target = (self.cx + self.offset, cfg.align_y)
            if self._arrived(self.ta, target):
                self.phase = "ascend"
                self.phase_steps = 0
            else:
                if self.pending_miss and self.miss_onset is None:
                    self.miss_onset = step_index
                return self._move(self.ta, target), LABEL_OK
        if self.phase == "ascend":
            if s.threaded[s.instruction]:
                self.phase = "push_through"
                self.phase_steps = 0
            else:
                gy = s.grippers[self.ta][1]
                tip_y = s.nodes[0][1]
                if gy >= 0.494 and tip_y < gy - 0.003:
                    # bead is jammed against the wall: abandon this attempt
                    self.phase = "backoff"
                    self.phase_steps = 0
                else:
                    if self.pending_miss and self.miss_onset is None:
                        self.miss_onset = step_index
                    return self._move(self.ta, (self.cx + self.offset, 0.515),
                                      speed=cfg.ascend_speed), LABEL_OK
        if self.phase == "backoff":
            target = (self.cx + self.offset, cfg.align_y - 0.01)
            if self._arrived(self.ta, target):
                self.misses += 1
                if self.misses > cfg.retry_budget:
                    raise _Give_up
                self.keyframes.append(step_index)
                if self.miss_onset is not None:
                    self.labels_patch.append((self.miss_onset, step_index))
                self.miss_onset = None
                self._enter("align")
                return self.decide_continue(step_index)
            return self._move(self.ta, target), LABEL_OK
        if self.phase == "push_through":
            target = (self.cx, cfg.above_y)
            if self._arrived(self.ta, target):
                self._enter("recv_approach")
            else:
                return self._move(self.ta, target), LABEL_OK
        if self.phase == "recv_approach":
            target = (self.cx, cfg.hover_y)
            if self._arrived(self.ra, target):
                self._enter("recv_descend")
            else:
                return self._move(self.ra, target), LABEL_OK
        if self.phase == "recv_descend":
            tip = s.nodes[0]
            if self._arrived(self.ra, tip, self.cfg.grasp_tol):
                self.phase = "recv_settle"
                self.phase_steps = 0
            else:
                return self._move(self.ra, tip), LABEL_OK
        if self.phase == "recv_settle":
            self.phase = "recv_grasp"
            return self._hold(), LABEL_OK
        if self.phase == "recv_grasp":
            self.grip_cmd[self.ra] = 1.0
            self.phase = "recv_check"
            self.phase_steps = 0
            return self._hold(), LABEL_OK
        if self.phase == "recv_check":
            if s.held[self.ra] == 0:
                self._enter("handover_release")
            else:
                self.grip_cmd[self.ra] = 0.0
                self._enter("recv_descend")
                return self._hold(), LABEL_OK
        if self.phase == "handover_release":
            self.grip_cmd[self.ta] = 0.0
            self._enter("ta_retreat")
            return self._hold(), LABEL_OK
        if self.phase == "ta_retreat":
            target = (self.cx, cfg.retreat_y)
            if self._arrived(self.ta, target):
                self._enter("pull")
            else:
                return self._move(self.ta, target), LABEL_OK
        if self.phase == "pull":
            beyond = int((s.nodes[:, 1] > env.cfg.wall_y).sum())
            gy = s.grippers[self.ra][1]
            if beyond >= env.cfg.pull_through_nodes and gy >= cfg.pull_y - cfg.waypoint_tol:
                self.phase = "release"
                self.phase_steps = 0
            else:
                # keep ascending until enough beads are through (slack chains
                # need a little extra travel)
                target_y = cfg.pull_y if beyond < env.cfg.pull_through_nodes \
                    else max(cfg.pull_y, gy)
                return self._move(self.ra, (self.cx, max(target_y, gy + 0.02))), LABEL_OK
        if self.phase == "release":
            self.grip_cmd[self.ra] = 0.0
            return self._hold(), LABEL_OK
        raise AssertionError(f"unhandled phase {self.phase}")

    def decide_continue(self, step_index: int):
        """Re-dispatch after an internal phase switch consumed no step."""
        self.phase_steps -= 1
        return self.decide(step_index)


def scripted_teleoperator(env_cfg: EnvConfig, seed: int, instruction: int,
                          teleop_cfg: TeleopConfig | None = None) -> Trajectory:
    """Run one scripted episode; returns the full demo trajectory."""
    cfg = teleop_cfg or TeleopConfig()
    env = LaceEnv(env_cfg)
    root = SeededRng(seed)
    env.reset(root.split("reset"), instruction)
    script = _Script(env, root.split("script"), cfg)

    obs_rows, prop_rows, act_rows, labels = [], [], [], []
    outcome = None
    while not env.state.done:
        obs = env.observe()
        prop = env.proprio()
        try:
            action, label = script.decide(len(act_rows))
        except _Give_up:
            outcome = env.finish_failed()
            break
        obs_rows.append(obs)
        prop_rows.append(prop)
        act_rows.append(action)
        labels.append(label)
        _, outcome = env.step(action)
        if outcome is not None:
            break

    label_arr = np.asarray(labels, dtype=np.uint8)
    for start, end in script.labels_patch:
        label_arr[start:end] = LABEL_MISS
    keyframes = [m for m in script.keyframes if m < len(act_rows)]
    side = "L" if instruction == 0 else "R"
    return Trajectory(
        episode_id=f"demo-{seed:06d}-{side}",
        instruction=instruction,
        observations=np.asarray(obs_rows, dtype=np.float32),
        proprio=np.asarray(prop_rows, dtype=np.float32),
        actions=np.asarray(act_rows, dtype=np.float32),
        success=outcome is not None and outcome.success,
        retry_keyframes=keyframes,
        source="demo",
        suboptimal_labels=label_arr,
    )


def generate_demos(env_cfg: EnvConfig, episodes: int, seed_base: int = 0,
                   teleop_cfg: TeleopConfig | None = None) -> list:
    """Demo set with alternating left/right instructions, seeds seed_base+i."""
    return [scripted_teleoperator(env_cfg, seed_base + i, i % 2, teleop_cfg)
            for i in range(episodes)]
