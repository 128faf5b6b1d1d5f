"""Actor networks with manual forward/backward passes.

ModularActorNet is the growable module-level model: a two-layer embedding
produces m_0, module i consumes the plan-weighted sum of m_0..m_{i-1}, and
a linear head maps the last module output to (mean, log_std) of a squashed
Gaussian. Gradients are computed by hand through the weighted DAG; plan
weights are constants and receive no gradient.

MlpActorNet is the flat single-network baseline actor (state plus task
one-hot in, same head out). Both share the ParamVector flat-parameter
storage so optimizers and checkpoints can treat parameters as one array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from mega import kernels
from mega.genotype import WeightPlan

DEFAULT_LOG_STD_BOUNDS = (-20.0, 2.0)
_LOG2 = math.log(2.0)
_LOG_2PI = math.log(2.0 * math.pi)


class NetError(ValueError):
    """Structural misuse: shape mismatch, plan deeper than the module list."""


class ParamVector:
    """Flat float64 parameter buffer with named reshaped views.

    Keeping every parameter in one contiguous array makes Adam, soft
    updates, and checkpointing single-array operations; layers see their
    weights through views, so in-place updates are visible everywhere.
    """

    def __init__(self, layout, data=None):
        self.layout = tuple((name, tuple(shape)) for name, shape in layout)
        size = sum(int(np.prod(shape)) for _, shape in self.layout)
        if data is None:
            self.data = np.zeros(size, dtype=np.float64)
        else:
            if data.shape != (size,):
                raise NetError(f"flat data has shape {data.shape}, layout needs ({size},)")
            self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.views = {}
        offset = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            self.views[name] = self.data[offset : offset + n].reshape(shape)
            offset += n

    def __getitem__(self, name):
        return self.views[name]

    def __setitem__(self, name, value):
        view = self.views[name]
        if value is not view:
            view[...] = value

    @property
    def size(self):
        return self.data.size

    def zeros_like(self):
        return ParamVector(self.layout)

    def copy(self):
        return ParamVector(self.layout, data=self.data.copy())

    def check_finite(self):
        if not np.isfinite(self.data).all():
            raise NetError("non-finite parameter values")


def _init_dense(params, w_name, b_name, rng):
    W = params[w_name]
    b = params[b_name]
    bound = 1.0 / math.sqrt(W.shape[0])
    W[...] = rng.uniform(-bound, bound, size=W.shape)
    b[...] = rng.uniform(-bound, bound, size=b.shape)


def _dense_layout(name, n_in, n_out):
    return [(f"{name}_W", (n_in, n_out)), (f"{name}_b", (n_out,))]


# --- plain MLP (critics, baseline actor trunk) ------------------------------


@dataclass
class MlpTrace:
    xs: list  # input to each layer
    pres: list  # pre-activation of each layer
    out: np.ndarray


class Mlp:
    """Dense layers with ReLU on all but the last (linear) layer."""

    def __init__(self, sizes, rng, activation="relu"):
        if len(sizes) < 2:
            raise NetError("an Mlp needs at least one layer")
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        layout = []
        for k in range(len(sizes) - 1):
            layout += _dense_layout(f"l{k}", sizes[k], sizes[k + 1])
        self.params = ParamVector(layout)
        for k in range(len(sizes) - 1):
            _init_dense(self.params, f"l{k}_W", f"l{k}_b", rng)

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def _relu_at(self, k):
        return self.activation == "relu" and k < self.n_layers - 1

    def forward(self, x):
        x = np.ascontiguousarray(x, dtype=np.float64)
        xs, pres = [], []
        for k in range(self.n_layers):
            xs.append(x)
            x, pre = kernels.dense_fwd(x, self.params[f"l{k}_W"], self.params[f"l{k}_b"], self._relu_at(k))
            pres.append(pre)
        return x, MlpTrace(xs=xs, pres=pres, out=x)

    def backward(self, trace, dy, into=None, need_dx=False, need_dparams=True):
        """Returns (grads, dx). grads is None when need_dparams is False."""
        grads = None
        if need_dparams:
            grads = into if into is not None else self.params.zeros_like()
        d = np.ascontiguousarray(dy, dtype=np.float64)
        for k in reversed(range(self.n_layers)):
            want_dx = need_dx or k > 0
            d, dW, db = kernels.dense_bwd(
                trace.xs[k],
                trace.pres[k],
                self.params[f"l{k}_W"],
                d,
                self._relu_at(k),
                want_dx,
                need_dparams,
            )
            if need_dparams:
                grads[f"l{k}_W"] += dW
                grads[f"l{k}_b"] += db
        return grads, d


# --- modular actor -----------------------------------------------------------


@dataclass(frozen=True)
class ActorDims:
    state_dim: int
    action_dim: int
    embed_hidden: int = 32
    module_io: int = 32
    module_hidden: int = 16


@dataclass
class ForwardTrace:
    """Everything the manual backward pass needs from one forward pass."""

    states: np.ndarray
    emb_pre0: np.ndarray
    emb_h0: np.ndarray
    emb_pre1: np.ndarray
    ms: np.ndarray  # (K+1, B, D) cached module outputs, ms[0] = embedding
    mod_inputs: np.ndarray  # (K, B, D) plan-weighted module inputs
    mod_pres: list  # hidden pre-activations per module
    mod_hs: list  # hidden activations per module
    plan: WeightPlan
    head_out: np.ndarray  # raw (B, 2*action_dim) head output


class ModularActorNet:
    def __init__(
        self,
        dims: ActorDims,
        rng,
        n_modules=0,
        activation="relu",
        log_std_bounds=DEFAULT_LOG_STD_BOUNDS,
    ):
        if activation not in ("relu", "identity"):
            raise NetError(f"unknown activation {activation!r}")
        self.dims = dims
        self.activation = activation
        self.log_std_bounds = (float(log_std_bounds[0]), float(log_std_bounds[1]))
        self._module_count = 0
        self.params = ParamVector(self._layout(0))
        _init_dense(self.params, "emb0_W", "emb0_b", rng)
        _init_dense(self.params, "emb1_W", "emb1_b", rng)
        _init_dense(self.params, "head_W", "head_b", rng)
        for _ in range(n_modules):
            self.add_module(rng)

    def _layout(self, n_modules):
        d = self.dims
        layout = []
        layout += _dense_layout("emb0", d.state_dim, d.embed_hidden)
        layout += _dense_layout("emb1", d.embed_hidden, d.module_io)
        layout += _dense_layout("head", d.module_io, 2 * d.action_dim)
        for k in range(n_modules):
            layout += _dense_layout(f"mod{k}_h", d.module_io, d.module_hidden)
            layout += _dense_layout(f"mod{k}_o", d.module_hidden, d.module_io)
        return layout

    @property
    def module_count(self):
        return self._module_count

    def add_module(self, rng):
        """Append one freshly initialized module; existing bytes unchanged.

        The new parameters live at the tail of the flat buffer, so the old
        region is copied verbatim and all prior views keep their values
        bit for bit.
        """
        k = self._module_count
        new = ParamVector(self._layout(k + 1))
        new.data[: self.params.size] = self.params.data
        self.params = new
        self._module_count = k + 1
        _init_dense(self.params, f"mod{k}_h_W", f"mod{k}_h_b", rng)
        _init_dense(self.params, f"mod{k}_o_W", f"mod{k}_o_b", rng)
        return self

    def forward(self, states, plan: WeightPlan):
        """Run Eqs.-style weighted module chain; returns (mean, log_std, trace)."""
        K = plan.stage
        if K > self._module_count:
            raise NetError(
                f"plan addresses {K} modules but the network has {self._module_count}; "
                "grow the network before decoding this genotype"
            )
        states = np.ascontiguousarray(states, dtype=np.float64)
        if states.ndim != 2 or states.shape[1] != self.dims.state_dim:
            raise NetError(f"states shape {states.shape} does not match state_dim {self.dims.state_dim}")
        relu = self.activation == "relu"
        B = states.shape[0]
        D = self.dims.module_io
        p = self.params
        h0, pre0 = kernels.dense_fwd(states, p["emb0_W"], p["emb0_b"], relu)
        m0, pre1 = kernels.dense_fwd(h0, p["emb1_W"], p["emb1_b"], relu)
        ms = np.empty((K + 1, B, D), dtype=np.float64)
        ms[0] = m0
        mod_inputs = np.empty((K, B, D), dtype=np.float64)
        mod_pres, mod_hs = [], []
        for i in range(1, K + 1):
            w = np.ascontiguousarray(plan.rows[i - 1], dtype=np.float64)
            mod_inputs[i - 1] = kernels.weighted_sum(ms[:i], w)
            h, hpre = kernels.dense_fwd(
                mod_inputs[i - 1], p[f"mod{i-1}_h_W"], p[f"mod{i-1}_h_b"], relu
            )
            out, _ = kernels.dense_fwd(h, p[f"mod{i-1}_o_W"], p[f"mod{i-1}_o_b"], False)
            ms[i] = out
            mod_pres.append(hpre)
            mod_hs.append(h)
        head_out, _ = kernels.dense_fwd(ms[K], p["head_W"], p["head_b"], False)
        A = self.dims.action_dim
        mean = head_out[:, :A]
        log_std = np.clip(head_out[:, A:], *self.log_std_bounds)
        trace = ForwardTrace(
            states=states,
            emb_pre0=pre0,
            emb_h0=h0,
            emb_pre1=pre1,
            ms=ms,
            mod_inputs=mod_inputs,
            mod_pres=mod_pres,
            mod_hs=mod_hs,
            plan=plan,
            head_out=head_out,
        )
        return mean, log_std, trace

    def backward(self, trace: ForwardTrace, grad_out, into=None):
        """Gradient of (head_out . grad_out) w.r.t. every parameter.

        grad_out is (B, 2*action_dim) against the raw head output; the
        log-std clamp zeroes the gradient where it saturated. Plan weights
        are treated as constants.
        """
        p = self.params
        grads = into if into is not None else p.zeros_like()
        A = self.dims.action_dim
        lo, hi = self.log_std_bounds
        raw_std = trace.head_out[:, A:]
        gout = np.ascontiguousarray(grad_out, dtype=np.float64)
        if gout.shape != trace.head_out.shape:
            raise NetError(f"grad_out shape {gout.shape} != head output {trace.head_out.shape}")
        if gout is grad_out:
            gout = gout.copy()
        gout[:, A:][(raw_std < lo) | (raw_std > hi)] = 0.0
        relu = self.activation == "relu"
        K = trace.plan.stage
        dmK, dW, db = kernels.dense_bwd(trace.ms[K], trace.head_out, p["head_W"], gout, False)
        grads["head_W"] += dW
        grads["head_b"] += db
        dms = np.zeros((K + 1,) + trace.ms.shape[1:], dtype=np.float64)
        dms[K] = dmK
        for i in range(K, 0, -1):
            dh, dW, db = kernels.dense_bwd(
                trace.mod_hs[i - 1], trace.ms[i], p[f"mod{i-1}_o_W"], dms[i], False
            )
            grads[f"mod{i-1}_o_W"] += dW
            grads[f"mod{i-1}_o_b"] += db
            dinp, dW, db = kernels.dense_bwd(
                trace.mod_inputs[i - 1], trace.mod_pres[i - 1], p[f"mod{i-1}_h_W"], dh, relu
            )
            grads[f"mod{i-1}_h_W"] += dW
            grads[f"mod{i-1}_h_b"] += db
            w = trace.plan.rows[i - 1]
            for j in range(i):
                kernels.scaled_add(dms[j], dinp, float(w[j]))
        dh0, dW, db = kernels.dense_bwd(trace.emb_h0, trace.emb_pre1, p["emb1_W"], dms[0], relu)
        grads["emb1_W"] += dW
        grads["emb1_b"] += db
        _, dW, db = kernels.dense_bwd(
            trace.states, trace.emb_pre0, p["emb0_W"], dh0, relu, need_dx=False
        )
        grads["emb0_W"] += dW
        grads["emb0_b"] += db
        return grads

    # --- checkpointing -------------------------------------------------------

    def state_dict(self):
        return {
            "kind": "modular",
            "dims": {
                "state_dim": self.dims.state_dim,
                "action_dim": self.dims.action_dim,
                "embed_hidden": self.dims.embed_hidden,
                "module_io": self.dims.module_io,
                "module_hidden": self.dims.module_hidden,
            },
            "activation": self.activation,
            "log_std_bounds": list(self.log_std_bounds),
            "module_count": self._module_count,
            "params": self.params.data.tolist(),
        }

    @classmethod
    def from_state_dict(cls, state):
        dims = ActorDims(**state["dims"])
        net = cls.__new__(cls)
        net.dims = dims
        net.activation = state["activation"]
        net.log_std_bounds = tuple(state["log_std_bounds"])
        net._module_count = int(state["module_count"])
        layout = net._layout(net._module_count)
        net.params = ParamVector(layout, data=np.asarray(state["params"], dtype=np.float64))
        return net


# --- flat baseline actor -----------------------------------------------------


class MlpActorNet:
    """Single-MLP actor for the flat multi-task baseline.

    Consumes whatever the caller feeds it (state with a task one-hot
    appended); the plan argument is accepted and ignored so the training
    code can treat both actors uniformly.
    """

    def __init__(self, input_dim, action_dim, hidden=(128, 128), rng=None,
                 log_std_bounds=DEFAULT_LOG_STD_BOUNDS):
        self.input_dim = int(input_dim)
        self.action_dim = int(action_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.log_std_bounds = (float(log_std_bounds[0]), float(log_std_bounds[1]))
        self.mlp = Mlp([input_dim, *self.hidden, 2 * action_dim], rng)

    @property
    def params(self):
        return self.mlp.params

    def forward(self, states, plan=None):
        states = np.ascontiguousarray(states, dtype=np.float64)
        out, trace = self.mlp.forward(states)
        A = self.action_dim
        mean = out[:, :A]
        log_std = np.clip(out[:, A:], *self.log_std_bounds)
        return mean, log_std, trace

    def backward(self, trace, grad_out, into=None):
        A = self.action_dim
        lo, hi = self.log_std_bounds
        raw_std = trace.out[:, A:]
        gout = np.ascontiguousarray(grad_out, dtype=np.float64)
        if gout is grad_out:
            gout = gout.copy()
        gout[:, A:][(raw_std < lo) | (raw_std > hi)] = 0.0
        grads, _ = self.mlp.backward(trace, gout, into=into)
        return grads

    def state_dict(self):
        return {
            "kind": "mlp",
            "input_dim": self.input_dim,
            "action_dim": self.action_dim,
            "hidden": list(self.hidden),
            "log_std_bounds": list(self.log_std_bounds),
            "params": self.mlp.params.data.tolist(),
        }

    @classmethod
    def from_state_dict(cls, state):
        net = cls.__new__(cls)
        net.input_dim = int(state["input_dim"])
        net.action_dim = int(state["action_dim"])
        net.hidden = tuple(state["hidden"])
        net.log_std_bounds = tuple(state["log_std_bounds"])
        net.mlp = Mlp.__new__(Mlp)
        net.mlp.sizes = (net.input_dim, *net.hidden, 2 * net.action_dim)
        net.mlp.activation = "relu"
        layout = []
        for k in range(len(net.mlp.sizes) - 1):
            layout += _dense_layout(f"l{k}", net.mlp.sizes[k], net.mlp.sizes[k + 1])
        net.mlp.params = ParamVector(layout, data=np.asarray(state["params"], dtype=np.float64))
        return net


def actor_from_state_dict(state):
    if state["kind"] == "modular":
        return ModularActorNet.from_state_dict(state)
    if state["kind"] == "mlp":
        return MlpActorNet.from_state_dict(state)
    raise NetError(f"unknown actor kind {state['kind']!r}")


# --- squashed-Gaussian head math ---------------------------------------------


def _log1m_tanh2(u):
    # log(1 - tanh(u)^2), stable for large |u|
    return 2.0 * (_LOG2 - u - np.logaddexp(0.0, -2.0 * u))


def sample_action(mean, log_std, rng, return_noise=False):
    """Reparameterized tanh-Gaussian sample with its exact log-density.

    action = tanh(mean + std * xi) with xi ~ N(0, I); log_prob includes
    the tanh change-of-variables correction.
    """
    xi = rng.standard_normal(mean.shape)
    return squash_with_noise(mean, log_std, xi, return_noise=return_noise)


def squash_with_noise(mean, log_std, xi, return_noise=False):
    std = np.exp(log_std)
    u = mean + std * xi
    action = np.tanh(u)
    log_prob = (-0.5 * xi * xi - 0.5 * _LOG_2PI - log_std - _log1m_tanh2(u)).sum(axis=-1)
    if return_noise:
        return action, log_prob, xi
    return action, log_prob


def greedy_action(mean):
    return np.tanh(mean)


def squashed_backward(action, log_std, xi, d_action, d_log_prob):
    """Chain upstream (dL/da, dL/dlogp) into (dL/dmean, dL/dlog_std).

    With u = mean + std * xi and fixed noise xi, the Gaussian density term
    depends on mean only through the squash, giving
      dlogp/dmean    = 2 a
      dlogp/dlog_std = 2 a * std * xi - 1
      da/dmean       = 1 - a^2
      da/dlog_std    = (1 - a^2) * std * xi.
    """
    sxi = np.exp(log_std) * xi
    one_m_a2 = 1.0 - action * action
    dlp = d_log_prob[:, None]
    d_mean = d_action * one_m_a2 + dlp * (2.0 * action)
    d_ls = d_action * one_m_a2 * sxi + dlp * (2.0 * action * sxi - 1.0)
    return d_mean, d_ls
