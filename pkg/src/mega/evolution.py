"""Per-task stage tracking and network growth.

A task's stage is its module budget. It increases only when the task looks
genuinely stuck: the recent-success window is full and nearly all failures,
and the population's best fitness has stopped improving across generations.
A cooldown then suppresses further growth while the purged population and
the newly grown network settle.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from mega.ga import TaskPopulation
from mega.genotype import genotype_length, random_genotype


@dataclass(frozen=True)
class StageConfig:
    start_stage: int = 3
    stage_cap: int = 8
    success_window: int = 50  # episodes of history per task
    success_min_rate: float = 0.05  # below this the task counts as failing
    fitness_window_gens: int = 3  # generations over which improvement is measured
    fitness_eps: float = 1.0  # minimum best-fitness improvement that counts
    cooldown_episodes: int = 100

    def validate(self):
        if not 1 <= self.start_stage <= self.stage_cap:
            raise ValueError("need 1 <= start_stage <= stage_cap")
        if self.success_window < 1 or self.cooldown_episodes < 0:
            raise ValueError("bad stage-trigger windows")
        if self.fitness_window_gens < 1:
            raise ValueError("fitness_window_gens must be >= 1")


@dataclass
class _TaskStage:
    stage: int
    window: deque
    best_fitness_history: list = field(default_factory=list)
    cooldown_remaining: int = 0


class StageTracker:
    def __init__(self, task_ids, cfg: StageConfig):
        cfg.validate()
        self.cfg = cfg
        self._tasks = {
            t: _TaskStage(stage=cfg.start_stage, window=deque(maxlen=cfg.success_window))
            for t in task_ids
        }

    def stage(self, task_id) -> int:
        return self._tasks[task_id].stage

    @property
    def stages(self) -> dict:
        return {t: ts.stage for t, ts in self._tasks.items()}

    def max_stage(self) -> int:
        return max(ts.stage for ts in self._tasks.values())

    def update_stage(self, task_id, episode_success, generation_best_fitness=None) -> str:
        """Fold one episode in; returns "incremented" or "unchanged".

        generation_best_fitness should be passed whenever a generation
        boundary was reached this episode, so the improvement test sees
        one entry per generation.
        """
        ts = self._tasks[task_id]
        cfg = self.cfg
        if generation_best_fitness is not None:
            ts.best_fitness_history.append(float(generation_best_fitness))
        ts.window.append(bool(episode_success))
        if ts.cooldown_remaining > 0:
            ts.cooldown_remaining -= 1
            return "unchanged"
        if ts.stage >= cfg.stage_cap:
            return "unchanged"
        if len(ts.window) < cfg.success_window:
            return "unchanged"
        if sum(ts.window) / len(ts.window) >= cfg.success_min_rate:
            return "unchanged"
        hist = ts.best_fitness_history
        if len(hist) <= cfg.fitness_window_gens:
            return "unchanged"
        if hist[-1] - hist[-1 - cfg.fitness_window_gens] >= cfg.fitness_eps:
            return "unchanged"
        ts.stage += 1
        ts.cooldown_remaining = cfg.cooldown_episodes
        ts.window.clear()
        return "incremented"

    def sync_network(self, net, rng) -> int:
        """Grow the shared network to the max task stage; returns modules added."""
        added = 0
        while net.module_count < self.max_stage():
            net.add_module(rng)
            added += 1
        return added

    def state_dict(self):
        return {
            str(t): {
                "stage": ts.stage,
                "window": [int(x) for x in ts.window],
                "best_fitness_history": ts.best_fitness_history,
                "cooldown_remaining": ts.cooldown_remaining,
            }
            for t, ts in self._tasks.items()
        }

    def load_state_dict(self, state):
        for t_str, d in state.items():
            ts = self._tasks[int(t_str)]
            ts.stage = int(d["stage"])
            ts.window = deque((bool(x) for x in d["window"]), maxlen=self.cfg.success_window)
            ts.best_fitness_history = [float(x) for x in d["best_fitness_history"]]
            ts.cooldown_remaining = int(d["cooldown_remaining"])


def purge_stale(pop: TaskPopulation, stage: int, p_w: int, rng) -> int:
    """Replace members whose length does not match the given stage.

    Population-local by construction; returns the replacement count.
    """
    pop.stage = stage
    target_len = genotype_length(p_w, stage)
    replaced = 0
    for i, m in enumerate(pop.members):
        if len(m.bits) != target_len:
            pop.members[i] = random_genotype(p_w, stage, rng)
            replaced += 1
    return replaced
