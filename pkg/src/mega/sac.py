"""Soft actor-critic machinery: replay, critics, temperatures, update step.

The actor is whichever network the harness provides (modular with per-task
genotype plans, or the flat baseline). The critic is a pair of task-one-hot
conditioned Q MLPs with target copies; the temperature alpha is learned per
task against a fixed entropy target. All gradients are manual and flow
through the nets' own backward passes; genotype plans are constants.

Batches mix tasks, so policy evaluations are grouped by task id (each task
has its own plan) in sorted order to keep rng consumption deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mega import kernels
from mega.nets import Mlp, squash_with_noise, squashed_backward


class SacError(ValueError):
    pass


@dataclass(frozen=True)
class SacConfig:
    gamma: float = 0.99
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    alpha_lr: float = 1e-4
    batch_size: int = 128
    buffer_capacity: int = 200_000
    tau: float = 0.005
    reward_scale: float = 0.1
    alpha_init: float = 0.1
    target_entropy: float | None = None  # defaults to -action_dim
    critic_hidden: tuple = (64, 64)

    def validate(self):
        if not 0.0 <= self.gamma < 1.0:
            raise SacError("gamma must be in [0, 1)")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise SacError("buffer must hold at least one batch")
        if not 0.0 < self.tau <= 1.0:
            raise SacError("tau must be in (0, 1]")
        if self.alpha_init <= 0.0:
            raise SacError("alpha_init must be positive")


class Adam:
    """Adam on one flat parameter array."""

    def __init__(self, size, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params, grads):
        if params.shape != self.m.shape:
            raise SacError(f"optimizer built for {self.m.shape}, got {params.shape}")
        self.t += 1
        kernels.adam_step(
            params, grads, self.m, self.v, self.t, self.lr, self.beta1, self.beta2, self.eps
        )

    def grow(self, new_size):
        """Keep moments for existing entries, zero-init the appended tail."""
        if new_size < self.m.size:
            raise SacError("optimizer state never shrinks")
        m = np.zeros(new_size)
        v = np.zeros(new_size)
        m[: self.m.size] = self.m
        v[: self.v.size] = self.v
        self.m, self.v = m, v


@dataclass
class Batch:
    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray
    task_id: np.ndarray


class ReplayBuffer:
    """Uniform-sampling FIFO ring buffer; rewards are scaled at insertion."""

    def __init__(self, capacity, obs_dim, action_dim, reward_scale=0.1):
        self.capacity = int(capacity)
        self.reward_scale = float(reward_scale)
        self.obs = np.zeros((capacity, obs_dim))
        self.action = np.zeros((capacity, action_dim))
        self.reward = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.task_id = np.zeros(capacity, dtype=np.int64)
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def add(self, obs, action, reward, next_obs, done, task_id):
        i = self._next
        self.obs[i] = obs
        self.action[i] = action
        self.reward[i] = self.reward_scale * float(reward)
        self.next_obs[i] = next_obs
        self.done[i] = 1.0 if done else 0.0
        self.task_id[i] = task_id
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def add_transition(self, tr):
        self.add(tr.state, tr.action, tr.reward, tr.next_state, tr.done, tr.task_id)

    def sample(self, batch_size, rng) -> Batch:
        if self._size < batch_size:
            raise SacError(f"buffer holds {self._size} < batch {batch_size}")
        idx = rng.integers(0, self._size, size=batch_size)
        return Batch(
            obs=self.obs[idx],
            action=self.action[idx],
            reward=self.reward[idx],
            next_obs=self.next_obs[idx],
            done=self.done[idx],
            task_id=self.task_id[idx],
        )


class CriticNet:
    """Twin Q networks on (obs ++ task one-hot ++ action)."""

    def __init__(self, obs_dim, action_dim, n_tasks, hidden, rng):
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.n_tasks = n_tasks
        self.hidden = tuple(hidden)
        in_dim = obs_dim + n_tasks + action_dim
        self.q1 = Mlp([in_dim, *hidden, 1], rng)
        self.q2 = Mlp([in_dim, *hidden, 1], rng)
        self._eye = np.eye(n_tasks)

    def build_input(self, obs, task_ids, actions):
        return np.concatenate([obs, self._eye[task_ids], actions], axis=1)

    def q_values(self, x):
        q1, t1 = self.q1.forward(x)
        q2, t2 = self.q2.forward(x)
        return q1[:, 0], q2[:, 0], t1, t2

    def clone(self):
        other = CriticNet.__new__(CriticNet)
        other.obs_dim = self.obs_dim
        other.action_dim = self.action_dim
        other.n_tasks = self.n_tasks
        other.hidden = self.hidden
        other._eye = self._eye
        other.q1 = _clone_mlp(self.q1)
        other.q2 = _clone_mlp(self.q2)
        return other

    def state_dict(self):
        return {
            "obs_dim": self.obs_dim,
            "action_dim": self.action_dim,
            "n_tasks": self.n_tasks,
            "hidden": list(self.hidden),
            "q1": self.q1.params.data.tolist(),
            "q2": self.q2.params.data.tolist(),
        }

    def load_params(self, state):
        self.q1.params.data[...] = np.asarray(state["q1"])
        self.q2.params.data[...] = np.asarray(state["q2"])


def _clone_mlp(mlp):
    other = Mlp.__new__(Mlp)
    other.sizes = mlp.sizes
    other.activation = mlp.activation
    other.params = mlp.params.copy()
    return other


class AlphaState:
    """Per-task log temperature with per-task Adam moments."""

    def __init__(self, n_tasks, alpha_init, target_entropy):
        self.log_alpha = np.full(n_tasks, np.log(alpha_init))
        self.target_entropy = float(target_entropy)
        self._m = np.zeros(n_tasks)
        self._v = np.zeros(n_tasks)
        self._t = np.zeros(n_tasks, dtype=np.int64)

    @property
    def alphas(self):
        return np.exp(self.log_alpha)

    def alpha(self, task_id):
        return float(np.exp(self.log_alpha[task_id]))

    def adam_step(self, task_id, grad, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self._t[task_id] += 1
        t = self._t[task_id]
        self._m[task_id] = beta1 * self._m[task_id] + (1 - beta1) * grad
        self._v[task_id] = beta2 * self._v[task_id] + (1 - beta2) * grad * grad
        mhat = self._m[task_id] / (1 - beta1**t)
        vhat = self._v[task_id] / (1 - beta2**t)
        self.log_alpha[task_id] -= lr * mhat / (np.sqrt(vhat) + eps)

    def state_dict(self):
        return {"log_alpha": self.log_alpha.tolist(), "target_entropy": self.target_entropy}


def alpha_loss(batch_log_probs, alpha_state: AlphaState, task_id):
    """J(alpha) = mean(-alpha * (log_pi + target)); gradient w.r.t. log_alpha."""
    a = alpha_state.alpha(task_id)
    excess = np.mean(batch_log_probs + alpha_state.target_entropy)
    loss = -a * excess
    grad = -a * excess
    return float(loss), float(grad)


def soft_update(online_flat, target_flat, tau):
    """target <- (1 - tau) * target + tau * online, in place."""
    if online_flat.shape != target_flat.shape:
        raise SacError("soft_update shape mismatch")
    kernels.soft_update(target_flat, online_flat, tau)


def group_by_task(task_ids):
    """Deterministic per-task index groups, ascending task id."""
    order = []
    for t in np.unique(task_ids):
        order.append((int(t), np.nonzero(task_ids == t)[0]))
    return order


def policy_forward(actor, obs, task_ids, plans, rng, onehot=None, with_grad_info=False):
    """Sample actions for a mixed-task batch, grouped by task.

    plans maps task id to that task's current WeightPlan (or None for the
    flat actor, in which case `onehot` must supply the task encoding to
    append). Returns (actions, log_probs, groups); groups carry what the
    backward pass needs when with_grad_info is set.
    """
    B = obs.shape[0]
    actions = None
    log_probs = np.empty(B)
    groups = []
    for t, idx in group_by_task(task_ids):
        x = obs[idx]
        if onehot is not None:
            x = np.concatenate([x, np.repeat(onehot[t][None, :], len(idx), axis=0)], axis=1)
        mean, log_std, trace = actor.forward(x, plans[t])
        xi = rng.standard_normal(mean.shape)
        a, logp = squash_with_noise(mean, log_std, xi)
        if actions is None:
            actions = np.empty((B, a.shape[1]))
        actions[idx] = a
        log_probs[idx] = logp
        if with_grad_info:
            groups.append((t, idx, trace, xi, a, log_std))
    return actions, log_probs, groups


def critic_loss(batch, critic, target_critic, actor, plans, alpha_state, gamma, rng, onehot=None):
    """Soft Bellman MSE for both twins plus parameter gradients.

    y = r + gamma * (1 - done) * (min target-Q(s', a') - alpha * log pi(a'|s'))
    with a' freshly sampled; rewards were already scaled at insertion.
    """
    next_a, next_logp, _ = policy_forward(actor, batch.next_obs, batch.task_id, plans, rng, onehot)
    tx = target_critic.build_input(batch.next_obs, batch.task_id, next_a)
    tq1, tq2, _, _ = target_critic.q_values(tx)
    alpha_b = alpha_state.alphas[batch.task_id]
    y = batch.reward + gamma * (1.0 - batch.done) * (np.minimum(tq1, tq2) - alpha_b * next_logp)
    x = critic.build_input(batch.obs, batch.task_id, batch.action)
    q1, q2, t1, t2 = critic.q_values(x)
    B = len(y)
    loss = float(np.mean((q1 - y) ** 2) + np.mean((q2 - y) ** 2))
    g1, _ = critic.q1.backward(t1, (2.0 / B) * (q1 - y)[:, None])
    g2, _ = critic.q2.backward(t2, (2.0 / B) * (q2 - y)[:, None])
    return loss, g1, g2


def actor_loss(batch_obs, task_ids, actor, critic, plans, alpha_state, rng, onehot=None):
    """mean(alpha * log pi - min Q) with reparameterized actions.

    Returns (loss, actor grads, per-sample log probs). Gradients flow into
    the actor only; the critic supplies action sensitivities.
    """
    B = batch_obs.shape[0]
    actions, log_probs, groups = policy_forward(
        actor, batch_obs, task_ids, plans, rng, onehot, with_grad_info=True
    )
    x = critic.build_input(batch_obs, task_ids, actions)
    q1, q2, t1, t2 = critic.q_values(x)
    take_q1 = q1 <= q2
    min_q = np.where(take_q1, q1, q2)
    alpha_b = alpha_state.alphas[task_ids]
    loss = float(np.mean(alpha_b * log_probs - min_q))
    # dL/da via the critic inputs; critic parameters are not touched here
    w1 = take_q1.astype(np.float64)
    _, dx1 = critic.q1.backward(t1, (-w1 / B)[:, None], need_dx=True, need_dparams=False)
    _, dx2 = critic.q2.backward(t2, ((w1 - 1.0) / B)[:, None], need_dx=True, need_dparams=False)
    d_action = (dx1 + dx2)[:, -critic.action_dim :]
    grads = actor.params.zeros_like()
    for t, idx, trace, xi, a, log_std in groups:
        d_logp = np.full(len(idx), alpha_state.alpha(t) / B)
        d_mean, d_ls = squashed_backward(a, log_std, xi, d_action[idx], d_logp)
        actor.backward(trace, np.concatenate([d_mean, d_ls], axis=1), into=grads)
    return loss, grads, log_probs


class SacTrainer:
    """Owns critic targets and optimizers; one call per gradient step."""

    def __init__(self, actor, critic, n_tasks, action_dim, cfg: SacConfig, actor_onehot=False):
        cfg.validate()
        self.cfg = cfg
        self.actor = actor
        self.critic = critic
        self.critic_target = critic.clone()
        target_entropy = cfg.target_entropy if cfg.target_entropy is not None else -float(action_dim)
        self.alpha_state = AlphaState(n_tasks, cfg.alpha_init, target_entropy)
        self.opt_actor = Adam(actor.params.size, cfg.actor_lr)
        self.opt_q1 = Adam(critic.q1.params.size, cfg.critic_lr)
        self.opt_q2 = Adam(critic.q2.params.size, cfg.critic_lr)
        self.onehot = np.eye(n_tasks) if actor_onehot else None
        self.step_count = 0

    def sync_actor_optimizer(self):
        """Call after the actor grew; Adam state for old entries persists."""
        if self.actor.params.size != self.opt_actor.m.size:
            self.opt_actor.grow(self.actor.params.size)

    def train_step(self, buffer: ReplayBuffer, plans, rng):
        """One critic, actor, per-task alpha, and soft-update pass.

        Returns the metrics dict, or None (skip) while the buffer holds
        fewer than batch_size transitions.
        """
        cfg = self.cfg
        if len(buffer) < cfg.batch_size:
            return None
        self.sync_actor_optimizer()
        batch = buffer.sample(cfg.batch_size, rng)
        c_loss, g1, g2 = critic_loss(
            batch, self.critic, self.critic_target, self.actor, plans,
            self.alpha_state, cfg.gamma, rng, self.onehot,
        )
        self.opt_q1.step(self.critic.q1.params.data, g1.data)
        self.opt_q2.step(self.critic.q2.params.data, g2.data)
        a_loss, a_grads, log_probs = actor_loss(
            batch.obs, batch.task_id, self.actor, self.critic, plans,
            self.alpha_state, rng, self.onehot,
        )
        self.opt_actor.step(self.actor.params.data, a_grads.data)
        for t, idx in group_by_task(batch.task_id):
            _, grad = alpha_loss(log_probs[idx], self.alpha_state, t)
            self.alpha_state.adam_step(t, grad, cfg.alpha_lr)
        soft_update(self.critic.q1.params.data, self.critic_target.q1.params.data, cfg.tau)
        soft_update(self.critic.q2.params.data, self.critic_target.q2.params.data, cfg.tau)
        self.step_count += 1
        return {
            "step": self.step_count,
            "critic_loss": c_loss,
            "actor_loss": a_loss,
            "alpha": float(np.mean(self.alpha_state.alphas)),
            "entropy": float(-np.mean(log_probs)),
        }
