"""Per-task genotype populations and the genetic optimization cycle.

Each task owns a small population of genotypes; all populations together
form the community. Rollouts evaluate members (unevaluated ones first);
once every member has been evaluated max_eval times the population evolves:
the worst floor(N_P * r_a) members are dropped and replaced pairwise by one
crossover child and one mutation child per iteration. Parents occasionally
come from the whole community, which is what lets routing patterns migrate
between tasks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from mega.genotype import (
    GenotypePolicy,
    genotype_length,
    random_genotype,
    with_recorded_reward,
)


class GaError(ValueError):
    """Configuration or protocol violation in the genetic cycle."""


@dataclass(frozen=True)
class GaConfig:
    pop_size: int = 4
    abandon_rate: float = 0.5
    crossover_rate: float = 0.5
    mutate_rate: float = 0.15
    cross_pop_crossover: float = 0.9  # above this, crossover parent 2 is community-wide
    cross_pop_mutate: float = 0.95  # above this, the mutation parent is community-wide
    mutate_best: float = 0.5  # at or below this, the mutation parent is the local best
    max_eval: int = 2
    p_best_select: float = 0.5

    def n_abandon(self) -> int:
        return int(self.pop_size * self.abandon_rate)

    def validate(self) -> None:
        if self.pop_size < 1:
            raise GaError("pop_size must be >= 1")
        if not 0.0 < self.abandon_rate < 1.0:
            raise GaError("abandon_rate must be in (0, 1)")
        if not 0.0 < self.cross_pop_crossover < 1.0:
            raise GaError("cross_pop_crossover must be in (0, 1)")
        if not 0.0 < self.mutate_best < self.cross_pop_mutate < 1.0:
            raise GaError("need 0 < mutate_best < cross_pop_mutate < 1")
        n_ab = self.n_abandon()
        if n_ab < 2 or n_ab % 2 != 0:
            raise GaError(
                f"pop_size * abandon_rate must floor to an even count >= 2, got {n_ab}"
            )
        if n_ab > self.pop_size - 1:
            raise GaError("abandonment would not spare the best member")
        if self.max_eval < 1:
            raise GaError("max_eval must be >= 1")
        if not 0.0 <= self.p_best_select <= 1.0:
            raise GaError("p_best_select must be in [0, 1]")


@dataclass
class TaskPopulation:
    task_id: int
    stage: int
    precision: int
    members: list[GenotypePolicy]

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def best_index(self) -> int | None:
        """Index of the highest-fitness member among evaluated ones."""
        best, best_f = None, None
        for i, m in enumerate(self.members):
            if m.eval_count >= 1 and (best_f is None or m.fitness > best_f):
                best, best_f = i, m.fitness
        return best

    @property
    def best_fitness(self) -> float | None:
        i = self.best_index
        return None if i is None else self.members[i].fitness


@dataclass
class Community:
    populations: dict[int, TaskPopulation] = field(default_factory=dict)

    def all_members(self) -> list[GenotypePolicy]:
        out = []
        for task_id in sorted(self.populations):
            out.extend(self.populations[task_id].members)
        return out


def init_population(task_id, stage, p_w, pop_size, rng) -> TaskPopulation:
    members = [random_genotype(p_w, stage, rng) for _ in range(pop_size)]
    return TaskPopulation(task_id=task_id, stage=stage, precision=p_w, members=members)


def init_community(task_ids, stage, p_w, pop_size, rngs) -> Community:
    pops = {t: init_population(t, stage, p_w, pop_size, rngs[t]) for t in task_ids}
    return Community(populations=pops)


def select_for_episode(pop: TaskPopulation, cfg: GaConfig, rng) -> int:
    """Pick the member to roll out: unevaluated ones first, then best-biased."""
    if not pop.members:
        raise GaError(f"population {pop.task_id} is empty")
    for i, m in enumerate(pop.members):
        if m.eval_count < cfg.max_eval:
            return i
    best = pop.best_index
    if best is not None and rng.random() < cfg.p_best_select:
        return best
    return int(rng.integers(len(pop.members)))


def record_fitness(pop: TaskPopulation, idx: int, episode_reward: float) -> None:
    """Fold one episode return into the member's running-mean fitness."""
    pop.members[idx] = with_recorded_reward(pop.members[idx], episode_reward)


def choose_crossover_parents(community, pop, cfg, rng):
    """Either two local parents, or (local best, community-wide random)."""
    n = rng.random()
    if n > cfg.cross_pop_crossover:
        best = pop.best_index
        if best is None:
            raise GaError("cannot pick crossover parents before any evaluation")
        everyone = community.all_members()
        return pop.members[best], everyone[int(rng.integers(len(everyone)))]
    p1 = pop.members[int(rng.integers(len(pop.members)))]
    p2 = pop.members[int(rng.integers(len(pop.members)))]
    return p1, p2


def crossover(g1: GenotypePolicy, g2: GenotypePolicy, r_c: float, rng) -> GenotypePolicy:
    """Overwrite floor(len(short) * r_c) positions of the longer parent."""
    long_g, short_g = (g1, g2) if len(g1.bits) >= len(g2.bits) else (g2, g1)
    l = len(short_g.bits)
    n_c = int(l * r_c)
    bits = list(long_g.bits)
    if n_c > 0:
        for p in rng.choice(l, size=n_c, replace=False):
            bits[p] = short_g.bits[p]
    return GenotypePolicy(bits=tuple(bits), precision=long_g.precision, stage=long_g.stage)


def choose_mutate_parent(community, pop, cfg, rng) -> GenotypePolicy:
    """Community-wide above cross_pop_mutate, local above mutate_best, else best."""
    n = rng.random()
    if n > cfg.cross_pop_mutate:
        everyone = community.all_members()
        return everyone[int(rng.integers(len(everyone)))]
    if n > cfg.mutate_best:
        return pop.members[int(rng.integers(len(pop.members)))]
    best = pop.best_index
    if best is None:
        raise GaError("cannot pick a mutation parent before any evaluation")
    return pop.members[best]


def mutate(g: GenotypePolicy, r_m: float, rng) -> GenotypePolicy:
    """Flip floor(len * r_m) distinct bits."""
    l = len(g.bits)
    n_m = int(l * r_m)
    bits = list(g.bits)
    if n_m > 0:
        for p in rng.choice(l, size=n_m, replace=False):
            bits[p] = 1 - bits[p]
    return GenotypePolicy(bits=tuple(bits), precision=g.precision, stage=g.stage)


def _fitness_key(m: GenotypePolicy) -> float:
    return -np.inf if m.fitness is None else m.fitness


def evolve_population(community: Community, pop: TaskPopulation, cfg: GaConfig, rng) -> None:
    """One generation: abandon the worst, refill with crossover/mutation children.

    Members whose length no longer matches the population stage are replaced
    by fresh random genotypes before ranking (they could only have arrived
    via cross-population parents).
    """
    if any(m.eval_count < cfg.max_eval for m in pop.members):
        raise GaError("evolve_population called before all members reached max_eval")
    n_ab = cfg.n_abandon()
    if n_ab > len(pop.members) - 1:
        raise GaError("abandonment count would not spare the best member")
    target_len = genotype_length(pop.precision, pop.stage)
    for i, m in enumerate(pop.members):
        if len(m.bits) != target_len:
            pop.members[i] = random_genotype(pop.precision, pop.stage, rng)
    order = sorted(range(len(pop.members)), key=lambda i: (_fitness_key(pop.members[i]), -i))
    abandoned = set(order[:n_ab])
    pop.members = [m for i, m in enumerate(pop.members) if i not in abandoned]
    for _ in range(n_ab // 2):
        p1, p2 = choose_crossover_parents(community, pop, cfg, rng)
        pop.members.append(crossover(p1, p2, cfg.crossover_rate, rng))
        pm = choose_mutate_parent(community, pop, cfg, rng)
        pop.members.append(mutate(pm, cfg.mutate_rate, rng))


def randomize_population(pop: TaskPopulation, rng) -> None:
    """GA-off ablation: resample every member instead of breeding."""
    pop.members = [random_genotype(pop.precision, pop.stage, rng) for _ in pop.members]
