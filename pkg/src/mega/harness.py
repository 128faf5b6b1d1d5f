"""Experiment harness: run configuration, the training loop, evaluation.

The loop is round-robin over tasks. Each episode: pick the task's genotype
(unevaluated first), decode it into a plan, roll out, record fitness and
transitions, then run one SAC update per collected step (after warm-up),
update the task's stage, evolve its population at generation boundaries,
and grow the shared network to the max stage.

Determinism contract: everything is driven by named rng streams derived
from the run seed, so two runs with the same config produce bitwise
identical metrics files. Episode wall times go to a separate timing file
precisely so the metrics stream stays reproducible.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from mega import kernels
from mega.envs import ACTION_DIM, OBS_DIM, SUITE_NAMES, make_suite, suite_to_json
from mega.evolution import StageConfig, StageTracker, purge_stale
from mega.ga import (
    Community,
    GaConfig,
    evolve_population,
    init_population,
    randomize_population,
    record_fitness,
    select_for_episode,
)
from mega.genotype import (
    DECODE_MODES,
    GenotypePolicy,
    decode_to_weights,
    from_csv_line,
    to_csv_line,
)
from mega.nets import (
    ActorDims,
    MlpActorNet,
    ModularActorNet,
    actor_from_state_dict,
    greedy_action,
    sample_action,
)
from mega.sac import CriticNet, ReplayBuffer, SacConfig, SacTrainer

CHECKPOINT_VERSION = 1
BASELINES = ("mega", "mtsac", "fixed-K")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # experiment
    suite: str = "mt4-fixed"
    seed: int = 0
    episodes_per_task: int = 2000
    episode_length: int = 200
    out_dir: str = "runs/dev"
    # SAC
    gamma: float = 0.99
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    alpha_lr: float = 1e-4
    batch_size: int = 128
    buffer_capacity: int = 200_000
    tau: float = 0.005
    reward_scale: float = 0.1
    alpha_init: float = 0.1
    target_entropy: float | None = None
    warmup_transitions: int = 1000
    # network dims (desk scale; full-scale values from the config file)
    embed_hidden: int = 32
    module_io: int = 32
    module_hidden: int = 16
    critic_hidden: tuple = (64, 64)
    mtsac_hidden: tuple = (128, 128)
    log_std_min: float = -20.0
    log_std_max: float = 2.0
    # genetic algorithm
    pop_size: int = 4
    precision: int = 2
    abandon_rate: float = 0.5
    crossover_rate: float = 0.5
    mutate_rate: float = 0.15
    cross_pop_crossover: float = 0.9
    cross_pop_mutate: float = 0.95
    mutate_best: float = 0.5
    max_eval: int = 2
    p_best_select: float = 0.5
    # stage evolution
    start_stage: int = 3
    stage_cap: int = 8
    success_window: int = 50
    success_min_rate: float = 0.05
    fitness_window_gens: int = 3
    fitness_eps: float | None = None  # auto: 1% of the per-episode reward range
    cooldown_episodes: int = 100
    # modes
    evolution: str = "on"  # "on" | "off"
    decode_mode: str = "halfsoftmax"
    ga: str = "on"  # "on" | "off" (off: populations are resampled randomly)
    baseline: str = "mega"  # "mega" | "mtsac" | "fixed-K"
    fixed_k: int = 16
    # logging / evaluation
    eval_episodes: int = 25
    checkpoint_interval: int = 0  # episodes; 0 = final checkpoint only
    sac_metrics_interval: int = 0  # updates; 0 = do not write sac step metrics

    def ga_config(self) -> GaConfig:
        return GaConfig(
            pop_size=self.pop_size,
            abandon_rate=self.abandon_rate,
            crossover_rate=self.crossover_rate,
            mutate_rate=self.mutate_rate,
            cross_pop_crossover=self.cross_pop_crossover,
            cross_pop_mutate=self.cross_pop_mutate,
            mutate_best=self.mutate_best,
            max_eval=self.max_eval,
            p_best_select=self.p_best_select,
        )

    def sac_config(self) -> SacConfig:
        return SacConfig(
            gamma=self.gamma,
            actor_lr=self.actor_lr,
            critic_lr=self.critic_lr,
            alpha_lr=self.alpha_lr,
            batch_size=self.batch_size,
            buffer_capacity=self.buffer_capacity,
            tau=self.tau,
            reward_scale=self.reward_scale,
            alpha_init=self.alpha_init,
            target_entropy=self.target_entropy,
            critic_hidden=tuple(self.critic_hidden),
        )

    def stage_config(self, tasks) -> StageConfig:
        eps = self.fitness_eps
        if eps is None:
            width = max(t.reward_bound() for t in tasks) * self.episode_length
            eps = 0.01 * width
        start = self.fixed_k if self.baseline == "fixed-K" else self.start_stage
        cap = max(self.stage_cap, start)
        return StageConfig(
            start_stage=start,
            stage_cap=cap,
            success_window=self.success_window,
            success_min_rate=self.success_min_rate,
            fitness_window_gens=self.fitness_window_gens,
            fitness_eps=eps,
            cooldown_episodes=self.cooldown_episodes,
        )

    def validate(self) -> None:
        if self.suite not in SUITE_NAMES:
            raise ConfigError(f"unknown suite {self.suite!r}")
        if self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES}")
        if self.decode_mode not in DECODE_MODES:
            raise ConfigError(f"decode_mode must be one of {DECODE_MODES}")
        if self.evolution not in ("on", "off") or self.ga not in ("on", "off"):
            raise ConfigError("evolution and ga must be 'on' or 'off'")
        if self.baseline == "fixed-K" and self.fixed_k < self.start_stage:
            raise ConfigError("fixed-K requires K >= start_stage")
        if self.episodes_per_task < 1 or self.episode_length < 1:
            raise ConfigError("episode budgets must be positive")
        if self.warmup_transitions < self.batch_size:
            raise ConfigError("warmup must cover at least one batch")
        self.ga_config().validate()
        self.sac_config().validate()
        if not 1 <= self.start_stage <= self.stage_cap:
            raise ConfigError("need 1 <= start_stage <= stage_cap")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["critic_hidden"] = list(self.critic_hidden)
        d["mtsac_hidden"] = list(self.mtsac_hidden)
        return d


def config_from_dict(data: dict, **overrides) -> RunConfig:
    merged = dict(data)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in RunConfig.__dataclass_fields__.values()}
    unknown = set(merged) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "critic_hidden" in merged:
        merged["critic_hidden"] = tuple(merged["critic_hidden"])
    if "mtsac_hidden" in merged:
        merged["mtsac_hidden"] = tuple(merged["mtsac_hidden"])
    return RunConfig(**merged)


def load_config(path, **overrides) -> RunConfig:
    with open(path) as f:
        data = json.load(f)
    return config_from_dict(data, **overrides)


def _jsonl_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


class _Writers:
    def __init__(self, out: Path):
        self.metrics = open(out / "metrics.jsonl", "w")
        self.stages = open(out / "stages.jsonl", "w")
        self.timing = open(out / "timing.jsonl", "w")
        self.sac = None
        self.out = out

    def sac_writer(self):
        if self.sac is None:
            self.sac = open(self.out / "sac_metrics.jsonl", "w")
        return self.sac

    def close(self):
        for f in (self.metrics, self.stages, self.timing, self.sac):
            if f is not None:
                f.close()


def run_training(cfg: RunConfig) -> dict:
    """Train one run to completion; returns the summary report."""
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)

    tasks = make_suite(cfg.suite, cfg.seed, cfg.episode_length)
    n_tasks = len(tasks)
    with open(out / "suite.json", "w") as f:
        json.dump(suite_to_json(tasks), f, indent=2, sort_keys=True)

    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    action_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 22]))
    update_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 33]))
    env_rngs = [np.random.default_rng(np.random.SeedSequence([cfg.seed, 44, t])) for t in range(n_tasks)]
    pop_rngs = [np.random.default_rng(cfg.seed + t) for t in range(n_tasks)]

    uses_genotypes = cfg.baseline in ("mega", "fixed-K")
    ga_cfg = cfg.ga_config()
    stage_cfg = cfg.stage_config(tasks)
    evolution_active = cfg.baseline == "mega" and cfg.evolution == "on"

    if uses_genotypes:
        dims = ActorDims(
            state_dim=OBS_DIM,
            action_dim=ACTION_DIM,
            embed_hidden=cfg.embed_hidden,
            module_io=cfg.module_io,
            module_hidden=cfg.module_hidden,
        )
        actor = ModularActorNet(
            dims,
            init_rng,
            n_modules=stage_cfg.start_stage,
            log_std_bounds=(cfg.log_std_min, cfg.log_std_max),
        )
        community = Community(
            populations={
                t: init_population(t, stage_cfg.start_stage, cfg.precision, cfg.pop_size, pop_rngs[t])
                for t in range(n_tasks)
            }
        )
    else:
        actor = MlpActorNet(
            OBS_DIM + n_tasks,
            ACTION_DIM,
            hidden=cfg.mtsac_hidden,
            rng=init_rng,
            log_std_bounds=(cfg.log_std_min, cfg.log_std_max),
        )
        community = None

    critic = CriticNet(OBS_DIM, ACTION_DIM, n_tasks, cfg.critic_hidden, init_rng)
    trainer = SacTrainer(
        actor, critic, n_tasks, ACTION_DIM, cfg.sac_config(), actor_onehot=not uses_genotypes
    )
    buffer = ReplayBuffer(cfg.buffer_capacity, OBS_DIM, ACTION_DIM, cfg.reward_scale)
    tracker = StageTracker(range(n_tasks), stage_cfg) if evolution_active else None
    onehot = np.eye(n_tasks)
    plans = {t: None for t in range(n_tasks)}
    generations = [0] * n_tasks

    writers = _Writers(out)
    t0 = time.perf_counter()
    total_steps = 0
    total_updates = 0
    total = cfg.episodes_per_task * n_tasks

    def current_stage(t):
        if tracker is not None:
            return tracker.stage(t)
        if cfg.baseline == "fixed-K":
            return cfg.fixed_k
        return stage_cfg.start_stage if uses_genotypes else 0

    try:
        for ep in range(total):
            t = ep % n_tasks
            task = tasks[t]
            genotype_idx = None
            genotype_len = None
            stage_used = 0
            if uses_genotypes:
                pop = community.populations[t]
                genotype_idx = select_for_episode(pop, ga_cfg, pop_rngs[t])
                g = pop.members[genotype_idx]
                genotype_len = g.length
                # adopted cross-population genotypes may carry another stage;
                # the episode genuinely runs at the genotype's own stage
                stage_used = g.stage
                plans[t] = decode_to_weights(g, cfg.decode_mode)

            state = task.reset(env_rngs[t])
            ep_return = 0.0
            steps = 0
            success = False
            while True:
                obs = task.observe(state)
                if len(buffer) < cfg.warmup_transitions:
                    act = action_rng.uniform(-1.0, 1.0, size=ACTION_DIM)
                else:
                    if uses_genotypes:
                        mean, log_std, _ = actor.forward(obs[None, :], plans[t])
                    else:
                        aug = np.concatenate([obs, onehot[t]])
                        mean, log_std, _ = actor.forward(aug[None, :])
                    act = sample_action(mean, log_std, action_rng)[0][0]
                state, tr = task.step(state, act)
                buffer.add_transition(tr)
                ep_return += tr.reward
                steps += 1
                if tr.done:
                    success = tr.success
                    break
            total_steps += steps

            if uses_genotypes:
                record_fitness(pop, genotype_idx, ep_return)

            if len(buffer) >= cfg.warmup_transitions:
                for _ in range(steps):
                    m = trainer.train_step(buffer, plans, update_rng)
                    if m is None:
                        break
                    total_updates += 1
                    if cfg.sac_metrics_interval and m["step"] % cfg.sac_metrics_interval == 0:
                        writers.sac_writer().write(
                            _jsonl_line({"task_id": t, **m}) + "\n"
                        )

            gen_ready = uses_genotypes and all(
                m.eval_count >= ga_cfg.max_eval for m in pop.members
            )
            gen_best = pop.best_fitness if gen_ready else None

            if tracker is not None:
                old_stage = tracker.stage(t)
                if tracker.update_stage(t, success, gen_best) == "incremented":
                    new_stage = tracker.stage(t)
                    purge_stale(pop, new_stage, cfg.precision, pop_rngs[t])
                    writers.stages.write(
                        _jsonl_line(
                            {
                                "episode": ep,
                                "task_id": t,
                                "old_stage": old_stage,
                                "new_stage": new_stage,
                                "reason": "stalled",
                            }
                        )
                        + "\n"
                    )
                    # purge resets eval counts, so the generation is no longer ready
                    gen_ready = all(m.eval_count >= ga_cfg.max_eval for m in pop.members)

            if gen_ready:
                if cfg.ga == "on":
                    evolve_population(community, pop, ga_cfg, pop_rngs[t])
                else:
                    randomize_population(pop, pop_rngs[t])
                generations[t] += 1

            if tracker is not None:
                tracker.sync_network(actor, init_rng)

            record = {
                "episode": ep,
                "task_id": t,
                "return": ep_return,
                "success": bool(success),
                "genotype_id": None if genotype_idx is None else f"{t}:{genotype_idx}",
                "genotype_len": genotype_len,
                "stage": stage_used if uses_genotypes else None,
                "task_stage": current_stage(t) if uses_genotypes else None,
                "module_count": actor.module_count if uses_genotypes else None,
            }
            writers.metrics.write(_jsonl_line(record) + "\n")
            writers.timing.write(
                json.dumps({"episode": ep, "wall_time": time.perf_counter() - t0}) + "\n"
            )

            if cfg.checkpoint_interval and (ep + 1) % cfg.checkpoint_interval == 0:
                save_checkpoint(out / f"checkpoint_{ep + 1}.json", cfg, tasks, actor, trainer,
                                community, tracker, ep + 1)
    finally:
        writers.close()

    ckpt_path = out / "checkpoint_final.json"
    save_checkpoint(ckpt_path, cfg, tasks, actor, trainer, community, tracker, total)
    table = evaluate(str(ckpt_path), episodes_per_task=cfg.eval_episodes, seed=cfg.seed)
    summary = {
        "suite": cfg.suite,
        "seed": cfg.seed,
        "baseline": cfg.baseline,
        "decode_mode": cfg.decode_mode,
        "ga": cfg.ga,
        "evolution": cfg.evolution,
        "episodes_per_task": cfg.episodes_per_task,
        "final_stages": {str(t): current_stage(t) for t in range(n_tasks)} if uses_genotypes else None,
        "module_count": actor.module_count if uses_genotypes else None,
        "generations": generations,
        "task_names": {str(t.task_id): t.name for t in tasks},
        "success_by_task": {str(r["task_id"]): r["success_rate"] for r in table["rows"]},
        "suite_success": table["suite_success"],
        "total_env_steps": total_steps,
        "total_updates": total_updates,
        "wall_time_s": time.perf_counter() - t0,
        "kernel_backend": kernels.BACKEND,
        "checkpoint": str(ckpt_path),
    }
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return summary


# --- checkpoint bundles ------------------------------------------------------


def save_checkpoint(path, cfg, tasks, actor, trainer, community, tracker, episode):
    bundle = {
        "version": CHECKPOINT_VERSION,
        "episode": episode,
        "config": cfg.to_dict(),
        "task_names": [t.name for t in tasks],
        "actor": actor.state_dict(),
        "critic": trainer.critic.state_dict(),
        "critic_target": {
            "q1": trainer.critic_target.q1.params.data.tolist(),
            "q2": trainer.critic_target.q2.params.data.tolist(),
        },
        "alpha": trainer.alpha_state.state_dict(),
        "populations": None,
        "stages": None,
        "tracker": tracker.state_dict() if tracker is not None else None,
    }
    if community is not None:
        bundle["populations"] = {
            str(t): [to_csv_line(t, g) for g in pop.members]
            for t, pop in sorted(community.populations.items())
        }
        bundle["stages"] = {str(t): pop.stage for t, pop in sorted(community.populations.items())}
        csv_path = Path(path).with_suffix(".populations.csv")
        with open(csv_path, "w") as f:
            for t, pop in sorted(community.populations.items()):
                for g in pop.members:
                    f.write(to_csv_line(t, g) + "\n")
    with open(path, "w") as f:
        json.dump(bundle, f, sort_keys=True)


@dataclass
class Bundle:
    version: int
    config: RunConfig
    actor: object
    populations: dict | None
    stages: dict | None
    task_names: list


def load_checkpoint(path) -> Bundle:
    with open(path) as f:
        raw = json.load(f)
    if raw.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {raw.get('version')!r}")
    cfg = config_from_dict(raw["config"])
    actor = actor_from_state_dict(raw["actor"])
    populations = None
    stages = None
    if raw["populations"] is not None:
        populations = {}
        for t_str, lines in raw["populations"].items():
            members = [from_csv_line(line)[1] for line in lines]
            populations[int(t_str)] = members
        stages = {int(t): int(s) for t, s in raw["stages"].items()}
    return Bundle(
        version=raw["version"],
        config=cfg,
        actor=actor,
        populations=populations,
        stages=stages,
        task_names=raw["task_names"],
    )


def best_genotype(members, stage=None) -> GenotypePolicy:
    """Highest-fitness evaluated member, preferring ones at the given stage.

    Populations can briefly hold cross-population adoptees at another
    stage; evaluation wants the population's own representative.
    """
    pool = members
    if stage is not None:
        matching = [m for m in members if m.stage == stage]
        if matching:
            pool = matching
    evaluated = [m for m in pool if m.eval_count >= 1]
    if not evaluated:
        return pool[0]
    return max(evaluated, key=lambda m: m.fitness)


# --- evaluation ---------------------------------------------------------------


def evaluate(checkpoint_path, suite=None, episodes_per_task=25, seed=0) -> dict:
    """Greedy success rates per task for a checkpoint.

    Uses the mean action and each task's best genotype. Returns a dict with
    one row per task plus the suite average.
    """
    bundle = load_checkpoint(checkpoint_path)
    cfg = bundle.config
    suite_name = suite or cfg.suite
    tasks = make_suite(suite_name, cfg.seed, cfg.episode_length)
    n_tasks = len(tasks)
    actor = bundle.actor
    uses_genotypes = bundle.populations is not None
    if uses_genotypes:
        if isinstance(actor, MlpActorNet):
            raise ConfigError("checkpoint mixes genotype populations with a flat actor")
        plans = {}
        for t in range(n_tasks):
            g = best_genotype(bundle.populations[t], stage=bundle.stages[t])
            if g.stage > actor.module_count:
                raise ConfigError(
                    f"task {t}: stage {g.stage} exceeds checkpoint module count {actor.module_count}"
                )
            plans[t] = decode_to_weights(g, cfg.decode_mode)
    onehot = np.eye(n_tasks)
    rows = []
    for t, task in enumerate(tasks):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 55, t]))
        wins = 0
        for _ in range(episodes_per_task):
            state = task.reset(rng)
            while True:
                obs = task.observe(state)
                if uses_genotypes:
                    mean, _, _ = actor.forward(obs[None, :], plans[t])
                else:
                    aug = np.concatenate([obs, onehot[t]])
                    mean, _, _ = actor.forward(aug[None, :])
                act = greedy_action(mean)[0]
                state, tr = task.step(state, act)
                if tr.done:
                    wins += tr.success
                    break
        rows.append(
            {
                "task_id": t,
                "task": task.name,
                "success_rate": wins / episodes_per_task,
                "episodes": episodes_per_task,
            }
        )
    return {
        "rows": rows,
        "suite_success": float(np.mean([r["success_rate"] for r in rows])),
        "suite": suite_name,
    }


def success_table_csv(table) -> str:
    lines = ["task_id,task,success_rate,episodes"]
    for r in table["rows"]:
        lines.append(f"{r['task_id']},{r['task']},{repr(r['success_rate'])},{r['episodes']}")
    return "\n".join(lines) + "\n"


# --- run comparison -----------------------------------------------------------


def compare_module_usage(run_a, run_b) -> dict:
    """Per-task final-stage difference between two run directories."""
    with open(Path(run_a) / "summary.json") as f:
        sa = json.load(f)
    with open(Path(run_b) / "summary.json") as f:
        sb = json.load(f)
    stages_a = sa.get("final_stages")
    stages_b = sb.get("final_stages")
    if stages_a is None or stages_b is None:
        raise ConfigError("both runs must have logged per-task stages")
    if set(stages_a) != set(stages_b):
        raise ConfigError("runs cover different task sets")
    rows = []
    for t in sorted(stages_a, key=int):
        rows.append(
            {
                "task_id": int(t),
                "stage_a": stages_a[t],
                "stage_b": stages_b[t],
                "difference": stages_a[t] - stages_b[t],
            }
        )
    return {"rows": rows, "mean_difference": float(np.mean([r["difference"] for r in rows]))}


def dump_genotypes(checkpoint_path) -> str:
    """All genotypes of a checkpoint in the one-per-line CSV format."""
    bundle = load_checkpoint(checkpoint_path)
    if bundle.populations is None:
        raise ConfigError("checkpoint has no genotype populations")
    lines = []
    for t in sorted(bundle.populations):
        for g in bundle.populations[t]:
            lines.append(to_csv_line(t, g))
    return "\n".join(lines) + "\n"
