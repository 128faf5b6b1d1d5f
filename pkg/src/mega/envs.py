"""Desk-scale multi-task point-mass suite.

Every task shares the same observation and action space: a point mass in
the [-1, 1]^2 arena integrates clipped actions (pos += clip(a) * dt) and
must visit its waypoints in order. Reward is dense negative distance to the
current waypoint, plus a capture bonus and an obstacle-penetration penalty.
Task difficulty is graded by waypoint count, leg length, and obstacles.

The mt4 suites are the training target; mt8 adds four harder variants.
"fixed" suites freeze the course at construction, "rand" suites resample
it from the reset rng every episode.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

OBS_DIM = 8
ACTION_DIM = 2
ARENA = 1.0  # arena is [-ARENA, ARENA]^2
COURSE_BOX = 0.9  # waypoints stay inside [-COURSE_BOX, COURSE_BOX]^2
DT = 0.1
CAPTURE_BONUS = 5.0
OBSTACLE_PENALTY = 1.0
DEFAULT_EPS_SUCCESS = 0.1

SUITE_NAMES = ("mt4-fixed", "mt4-rand", "mt8-fixed", "mt8-rand")


class EnvError(ValueError):
    """Unknown suite or malformed environment input."""


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    action_dim: int
    episode_length: int
    goal_mode: str  # "fixed" | "rand"


@dataclass(frozen=True)
class Obstacle:
    center: tuple[float, float]
    radius: float


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    success: bool
    task_id: int


@dataclass
class EnvState:
    """Full episode state; the network only ever sees observe(state)."""

    pos: np.ndarray
    wp_index: int
    t: int
    done: bool
    success: bool
    waypoints: tuple
    obstacles: tuple


# Task templates: (name, leg length ranges, legs that carry an obstacle,
# obstacle radius, success tolerance). Ranges are sized so the scripted
# controller's steps-to-success strictly order the mt4 tasks.
_TEMPLATES = {
    "reach": ([(0.45, 0.55)], (), 0.0, DEFAULT_EPS_SUCCESS),
    "reach-obstacle": ([(0.85, 0.95)], (0,), 0.15, DEFAULT_EPS_SUCCESS),
    "tour-2": ([(0.65, 0.75)] * 2, (), 0.0, DEFAULT_EPS_SUCCESS),
    "tour-3": ([(0.55, 0.65)] * 3, (), 0.0, DEFAULT_EPS_SUCCESS),
    "reach-far": ([(1.1, 1.2)], (), 0.0, DEFAULT_EPS_SUCCESS),
    "slalom": ([(0.6, 0.7)] * 2, (0, 1), 0.12, DEFAULT_EPS_SUCCESS),
    "tour-4": ([(0.5, 0.6)] * 4, (), 0.0, DEFAULT_EPS_SUCCESS),
    "pin-reach": ([(0.75, 0.85)], (), 0.0, 0.05),
}
_MT4 = ("reach", "reach-obstacle", "tour-2", "tour-3")
_MT8 = _MT4 + ("reach-far", "slalom", "tour-4", "pin-reach")


def _sample_course(rng, legs, obstacle_legs, obstacle_radius):
    """Waypoints leg by leg, rejection-sampled into the course box."""
    waypoints = []
    prev = np.zeros(2)
    for lo, hi in legs:
        cand = None
        for _ in range(64):
            theta = rng.uniform(0.0, 2.0 * math.pi)
            dist = rng.uniform(lo, hi)
            trial = prev + dist * np.array([math.cos(theta), math.sin(theta)])
            if np.abs(trial).max() <= COURSE_BOX:
                cand = trial
                break
        if cand is None:
            # aim back toward the arena center; always lands inside
            dist = rng.uniform(lo, hi)
            norm = np.linalg.norm(prev)
            direction = -prev / norm if norm > 1e-9 else np.array([math.sqrt(0.5)] * 2)
            cand = prev + dist * direction
        waypoints.append(cand)
        prev = cand
    obstacles = []
    for k in obstacle_legs:
        a = np.zeros(2) if k == 0 else waypoints[k - 1]
        b = waypoints[k]
        mid = 0.5 * (a + b)
        seg = b - a
        norm = np.linalg.norm(seg)
        perp = np.array([-seg[1], seg[0]]) / max(norm, 1e-9)
        center = mid + perp * rng.uniform(-0.05, 0.05)
        obstacles.append(Obstacle(center=(float(center[0]), float(center[1])), radius=obstacle_radius))
    return tuple(np.asarray(w, dtype=np.float64) for w in waypoints), tuple(obstacles)


@dataclass
class TaskInstance:
    task_id: int
    name: str
    spec: EnvSpec
    legs: tuple
    obstacle_legs: tuple
    obstacle_radius: float
    eps_success: float
    fixed_waypoints: tuple | None = None
    fixed_obstacles: tuple | None = None

    def reset(self, rng) -> EnvState:
        if self.spec.goal_mode == "fixed":
            waypoints, obstacles = self.fixed_waypoints, self.fixed_obstacles
        else:
            waypoints, obstacles = _sample_course(
                rng, self.legs, self.obstacle_legs, self.obstacle_radius
            )
        return EnvState(
            pos=np.zeros(2),
            wp_index=0,
            t=0,
            done=False,
            success=False,
            waypoints=waypoints,
            obstacles=obstacles,
        )

    def observe(self, state: EnvState) -> np.ndarray:
        obs = np.zeros(OBS_DIM)
        obs[0:2] = state.pos
        wp = state.waypoints[min(state.wp_index, len(state.waypoints) - 1)]
        obs[2:4] = wp
        obs[4] = len(state.waypoints) - state.wp_index
        if state.obstacles:
            nearest = min(
                state.obstacles,
                key=lambda ob: float(np.linalg.norm(state.pos - np.asarray(ob.center))),
            )
            obs[5:7] = nearest.center
            obs[7] = nearest.radius
        return obs

    def step(self, state: EnvState, action) -> tuple[EnvState, Transition]:
        if state.done:
            raise EnvError("step called on a finished episode")
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        if a.shape != (ACTION_DIM,):
            raise EnvError(f"action shape {a.shape} != ({ACTION_DIM},)")
        obs_before = self.observe(state)
        new_pos = np.clip(state.pos + a * DT, -ARENA, ARENA)
        wp = state.waypoints[state.wp_index]
        dist = float(np.linalg.norm(new_pos - wp))
        captured = dist <= self.eps_success
        penetrating = any(
            float(np.linalg.norm(new_pos - np.asarray(ob.center))) < ob.radius
            for ob in state.obstacles
        )
        reward = -dist + CAPTURE_BONUS * captured - OBSTACLE_PENALTY * penetrating
        wp_index = state.wp_index + (1 if captured else 0)
        success = captured and wp_index == len(state.waypoints)
        t = state.t + 1
        done = success or t >= self.spec.episode_length
        next_state = EnvState(
            pos=new_pos,
            wp_index=min(wp_index, len(state.waypoints) - 1) if not success else wp_index,
            t=t,
            done=done,
            success=success,
            waypoints=state.waypoints,
            obstacles=state.obstacles,
        )
        transition = Transition(
            state=obs_before,
            action=a,
            reward=float(reward),
            next_state=self.observe(next_state),
            done=done,
            success=success,
            task_id=self.task_id,
        )
        return next_state, transition

    def reward_bound(self) -> float:
        """|reward per step| never exceeds this (arena diameter + bonuses)."""
        diag = 2.0 * ARENA * math.sqrt(2.0)
        return diag + CAPTURE_BONUS + OBSTACLE_PENALTY * max(1, len(self.obstacle_legs))

    def to_json(self) -> dict:
        d = {
            "task_id": self.task_id,
            "name": self.name,
            "goal_mode": self.spec.goal_mode,
            "episode_length": self.spec.episode_length,
            "eps_success": self.eps_success,
            "legs": [list(r) for r in self.legs],
            "obstacle_legs": list(self.obstacle_legs),
            "obstacle_radius": self.obstacle_radius,
        }
        if self.fixed_waypoints is not None:
            d["waypoints"] = [[float(x) for x in w] for w in self.fixed_waypoints]
            d["obstacles"] = [
                {"center": list(ob.center), "radius": ob.radius} for ob in self.fixed_obstacles
            ]
        return d


def make_suite(name: str, seed: int, episode_length: int = 200) -> list[TaskInstance]:
    """Build one of mt4-fixed / mt4-rand / mt8-fixed / mt8-rand."""
    if name not in SUITE_NAMES:
        raise EnvError(f"unknown suite {name!r}; expected one of {SUITE_NAMES}")
    family, goal_mode = name.split("-")
    task_names = _MT4 if family == "mt4" else _MT8
    spec = EnvSpec(
        obs_dim=OBS_DIM, action_dim=ACTION_DIM, episode_length=episode_length, goal_mode=goal_mode
    )
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 9021]))
    tasks = []
    for task_id, task_name in enumerate(task_names):
        legs, obstacle_legs, radius, eps = _TEMPLATES[task_name]
        task = TaskInstance(
            task_id=task_id,
            name=task_name,
            spec=spec,
            legs=tuple(legs),
            obstacle_legs=tuple(obstacle_legs),
            obstacle_radius=radius,
            eps_success=eps,
        )
        if goal_mode == "fixed":
            wps, obs = _sample_course(rng, legs, obstacle_legs, radius)
            task.fixed_waypoints = wps
            task.fixed_obstacles = obs
        tasks.append(task)
    return tasks


def suite_to_json(tasks) -> dict:
    return {"tasks": [t.to_json() for t in tasks]}


# --- scripted reference controller -------------------------------------------


def _segment_blocked(pos, target, obstacle, margin):
    c = np.asarray(obstacle.center)
    d = target - pos
    dd = float(d @ d)
    if dd < 1e-12:
        return False
    t = float(np.clip((c - pos) @ d / dd, 0.0, 1.0))
    if t <= 0.0 or t >= 1.0:
        return False
    closest = pos + t * d
    return float(np.linalg.norm(closest - c)) < obstacle.radius + margin


def scripted_action(task: TaskInstance, state: EnvState, margin: float = 0.06) -> np.ndarray:
    """Greedy waypoint chaser with a tangent detour around blocking obstacles.

    Moves at full speed toward the current waypoint; if the straight
    segment passes through an (inflated) obstacle disk, it aims at a point
    offset perpendicular from the obstacle center on its own side.
    """
    pos = state.pos
    wp = state.waypoints[min(state.wp_index, len(state.waypoints) - 1)]
    target = wp
    for ob in state.obstacles:
        if _segment_blocked(pos, wp, ob, margin):
            c = np.asarray(ob.center)
            seg = wp - pos
            perp = np.array([-seg[1], seg[0]])
            perp /= max(float(np.linalg.norm(perp)), 1e-9)
            side = float(np.sign((pos - c) @ perp))
            if side == 0.0:
                side = 1.0
            target = c + perp * side * (ob.radius + margin + 0.02)
            break
    direction = target - pos
    dist = float(np.linalg.norm(direction))
    if dist < 1e-12:
        return np.zeros(ACTION_DIM)
    return direction / max(dist, DT)


def steps_to_success(task: TaskInstance, rng, max_steps=None) -> int | None:
    """Scripted-controller episode length; None if it never succeeds."""
    state = task.reset(rng)
    limit = max_steps or task.spec.episode_length
    for step in range(1, limit + 1):
        state, tr = task.step(state, scripted_action(task, state))
        if tr.success:
            return step
        if tr.done:
            return None
    return None


def write_trajectory_csv(path, transitions):
    """Dump one episode: step, state..., action..., reward, done, success."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        header = (
            ["step"]
            + [f"s{i}" for i in range(OBS_DIM)]
            + [f"a{i}" for i in range(ACTION_DIM)]
            + ["reward", "done", "success"]
        )
        writer.writerow(header)
        for step, tr in enumerate(transitions):
            writer.writerow(
                [step]
                + [repr(float(x)) for x in tr.state]
                + [repr(float(x)) for x in tr.action]
                + [repr(tr.reward), int(tr.done), int(tr.success)]
            )
