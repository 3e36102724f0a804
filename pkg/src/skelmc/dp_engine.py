"""Backward dynamic-programming solver over the skeleton stages.

Training data are drawn once under the product reference law (noise times
proxy states); the recursion alternates a control ERM step and a clipped
value regression, either on directly simulated model increments or on the
fixed proxies reweighted by importance-sampling densities.  Both entry
points share the same per-stage code path, so reweighting at the original
parameter reproduces a reference run exactly.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .nets import (MLP, AdamW, ShallowNet, StructuredLqControl,
                   StructuredLqValue, lr_schedule, softplus)
from .skeleton import sample_increment_1d, sample_increment_2d


@dataclass
class TrainingSet:
    """Product-law training draws: stage noise and proxy increments.

    ``dts``/``das``: (M, m) skeleton noise, ``proxies``: (M, m, q) draws
    from the dominating reference.  All coordinates are mutually
    independent; regeneration from the seed is bitwise reproducible.
    """

    dts: np.ndarray
    das: np.ndarray
    proxies: np.ndarray
    seed: int

    @property
    def n_paths(self):
        return self.dts.shape[0]

    @property
    def n_stages(self):
        return self.dts.shape[1]


def generate_training_data(reference, config, m, n_paths, seed, table=None):
    """Draw a TrainingSet under noise x reference (Assumption-style product law)."""
    rng = np.random.default_rng(seed)
    if config.dim == 1:
        dt, da = sample_increment_1d(rng, config, n=n_paths * m, table=table)
        da = da.reshape(n_paths, m)
    else:
        dt, da, _ = sample_increment_2d(rng, config, n=n_paths * m, table=table)
        da = da.reshape(n_paths, m, 2)
    dts = dt.reshape(n_paths, m)
    raw = reference.sample(rng, n_paths * m)
    if isinstance(raw, tuple):
        proxies = np.stack(raw, axis=-1).reshape(n_paths, m, -1)
    else:
        proxies = np.asarray(raw).reshape(n_paths, m, 1)
    return TrainingSet(dts=dts, das=da, proxies=proxies, seed=seed)


def terminal_value(payoff, history):
    """phi evaluated at the terminal state x0 + sum of increments."""
    return payoff(history.state_sum())


@dataclass
class ScalarLqProblem:
    """Scalar controlled state x' = x + drift(theta, x, a) dt + vol(...) da.

    ``drift``/``vol`` and their action derivatives are vectorized
    callables; the terminal loss is ``payoff(x_m)``.  The control is
    affine in x, the value quadratic in x, with coefficients produced by
    small networks of normalized stage time.
    """

    drift: callable
    vol: callable
    ddrift_da: callable
    dvol_da: callable
    payoff: callable
    m: int
    x0: float
    action_lo: float = -1.0
    action_hi: float = 1.0
    hidden: int = 64
    terminal_coeffs: tuple = None   # quadratic terminal (A, B, C) for init
    slope_scale: float = 1.0        # natural units of the feedback slope
    policy_leak: float = 0.0        # extra bound-side gradient fraction
    policy_init: tuple = None       # output-bias initialization of the head
    policy_slope_bound: float = 2.0   # max |slope| in scale units
    policy_level_bound: float = None  # tanh bound of the level coefficient

    def stage_feature(self, j):
        return np.array([[j / max(self.m - 1, 1)]])

    def control_state(self, x):
        """State passed to the affine control; the scale puts the optimal
        feedback slope at O(1) so the coefficient nets can reach it."""
        return self.slope_scale * x

    def make_policy(self, seed):
        net = MLP((1, self.hidden, self.hidden, 2),
                  rng=np.random.default_rng(seed), out_bias=self.policy_init)
        level = self.policy_level_bound
        if level is None and self.policy_slope_bound is not None:
            level = 4.0 * self.policy_slope_bound * self.slope_scale
        return StructuredLqControl(net, self.action_lo, self.action_hi,
                                   leak=self.policy_leak, mode="affine",
                                   scale=self.slope_scale,
                                   slope_bound=self.policy_slope_bound,
                                   level_bound=level)

    def make_value(self, seed):
        net = MLP((1, self.hidden, self.hidden, 3),
                  rng=np.random.default_rng(seed),
                  out_bias=self.terminal_coeffs)
        return StructuredLqValue(net, nonneg_quad=False)

    def build_state_cloud(self, data, theta, seed):
        """Exploratory state cloud under the reference parameter.

        Controls are uniform on the action interval; the cloud is a pure
        function of (data, theta, seed) and shared by every update mode.
        """
        rng = np.random.default_rng(seed)
        n, m = data.n_paths, data.n_stages
        x = np.empty((n, m + 1))
        x[:, 0] = self.x0
        for j in range(m):
            a = rng.uniform(self.action_lo, self.action_hi, n)
            x[:, j + 1] = (x[:, j]
                           + self.drift(theta, x[:, j], a) * data.dts[:, j]
                           + self.vol(theta, x[:, j], a) * data.das[:, j])
        return x

    def propagate(self, theta, x, a, dt, da):
        return x + self.drift(theta, x, a) * dt + self.vol(theta, x, a) * da

    def dnext_da(self, theta, x, a, dt, da):
        return self.ddrift_da(theta, x, a) * dt + self.dvol_da(theta, x, a) * da


@dataclass
class DpArtifacts:
    """Per-stage trained control and value functions plus diagnostics.

    ``control_params``/``value_params`` hold one parameter snapshot per
    stage (the state of the coefficient networks right after that stage
    was trained); warm starts copy them stage by stage.
    """

    control_coeffs: np.ndarray        # (m, 2): alpha_j, beta_j
    value_coeffs: np.ndarray          # (m, 3): A_j, B_j, C_j
    clip_bound: float
    action_lo: float
    action_hi: float
    slope_scale: float = 1.0
    control_params: list = None       # per stage: list of arrays
    value_params: list = None
    diagnostics: dict = field(default_factory=dict)

    def control(self, j, x):
        a = self.control_coeffs[j, 0] * self.slope_scale * x \
            + self.control_coeffs[j, 1]
        return np.clip(a, self.action_lo, self.action_hi)

    def value(self, j, x):
        co = self.value_coeffs[j]
        v = co[0] * x**2 + co[1] * x + co[2]
        return np.clip(v, -self.clip_bound, self.clip_bound)


@dataclass
class TrainConfig:
    iters_control: int = 60
    iters_value: int = 60
    lr_lo: float = 5e-5
    lr_hi: float = 1e-4
    lr_policy_mult: float = 1.0   # extra control-step rate (coeff mobility)
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    clip_quantile: float = 0.999
    clip_enabled: bool = True
    seed: int = 0


def stage_lr(j, m, cfg):
    """Schedule value clamped into the configured interval."""
    return float(np.clip(lr_schedule(j, m), cfg.lr_lo, cfg.lr_hi))


def weighted_continuation(values_next, weights, dweights_da=None):
    """Monte Carlo continuation under importance weights.

    Returns the scalar loss (1/M) sum w_p V_p and, when the weight
    derivative is supplied, the per-sample dLoss/da_p vector feeding the
    policy backward pass.
    """
    m = values_next.size
    if not np.all(np.isfinite(weights)):
        bad = int(np.flatnonzero(~np.isfinite(weights))[0])
        raise FloatingPointError("non-finite IS weight at sample %d" % bad)
    loss = float(np.mean(weights * values_next))
    if dweights_da is None:
        return loss
    return loss, dweights_da * values_next / m


def control_erm_step(problem, j, data, vhat_next, policy, optimizer, iters,
                     lr, theta, state_cloud, weight_fn=None):
    """One control ERM stage; returns the loss trace.

    Direct mode propagates model increments with the stage noise; weighted
    mode evaluates the continuation at the stored proxies and pushes
    gradients through the weights (the drift carries the action).
    """
    x = state_cloud[:, j]
    xs = problem.control_state(x)
    feat = problem.stage_feature(j)
    dt, da = data.dts[:, j], data.das[:, j]
    proxy = data.proxies[:, j, 0]
    losses = np.empty(iters)
    n = x.size
    if weight_fn is not None:
        v_next, dv_next = vhat_next(x + proxy, grad=True)
        pathwise = getattr(weight_fn, "pathwise", False)
        # E[dw/da] = 0, so a constant baseline leaves the direct-derivative
        # gradient unbiased while removing most of the weight noise
        v_base = float(np.mean(v_next))
    for it in range(iters):
        a = policy.act(feat, xs)
        if weight_fn is None:
            x_next = problem.propagate(theta, x, a, dt, da)
            v, dvdx = vhat_next(x_next, grad=True)
            loss = float(np.mean(v))
            dl_da = dvdx * problem.dnext_da(theta, x, a, dt, da) / n
        elif pathwise:
            w, gfac = weight_fn(a, proxy, mode="pathwise")
            loss = weighted_continuation(v_next, w)
            dl_da = gfac * dv_next / n
        else:
            w, dw_da = weight_fn(a, proxy, grad=True)
            loss, _ = weighted_continuation(v_next, w, dw_da)
            dl_da = dw_da * (v_next - v_base) / n
        grads = policy.backward(dl_da)
        optimizer.step(policy.params, grads, lr=lr)
        losses[it] = loss
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite control loss at stage %d" % j)
    return losses


def value_regression_step(problem, j, data, vhat_next, policy, value,
                          optimizer, iters, lr, theta, state_cloud,
                          weight_fn=None):
    """One clipped value-regression stage; returns the loss trace."""
    x = state_cloud[:, j]
    feat = problem.stage_feature(j)
    n = x.size
    a_hat = policy.act(feat, problem.control_state(x))
    if weight_fn is None:
        x_next = problem.propagate(theta, x, a_hat, data.dts[:, j], data.das[:, j])
        targets = vhat_next(x_next)
        weights = np.ones(n)
    else:
        proxy = data.proxies[:, j, 0]
        targets = vhat_next(x + proxy)
        weights = weight_fn(a_hat, proxy)
        if not np.all(np.isfinite(weights)):
            bad = int(np.flatnonzero(~np.isfinite(weights))[0])
            raise FloatingPointError("non-finite IS weight at sample %d" % bad)
    losses = np.empty(iters)
    for it in range(iters):
        phi = value.value(feat, x)
        resid = phi - targets
        losses[it] = float(np.mean(weights * resid**2))
        grads = value.backward(2.0 * weights * resid / n)
        optimizer.step(value.params, grads, lr=lr)
    return losses


def make_weight_fn(weight_eval, theta):
    """Bind an IS evaluator and parameter into the stage weight callable.

    Evaluators exposing the change-of-variables gradient advertise it via
    the ``pathwise`` attribute, which the control step prefers.
    """
    def weight_fn(a, proxy, grad=False, mode=None):
        if mode == "pathwise":
            return weight_eval.weights_grad_pathwise(theta, a, proxy)
        if grad:
            return weight_eval.weights_and_grad_a(theta, a, proxy)
        return weight_eval.weights(theta, a, proxy)
    weight_fn.pathwise = hasattr(weight_eval, "weights_grad_pathwise")
    return weight_fn


def run_backward(problem, data, cfg, theta, weight_eval=None,
                 warm_start=None, state_cloud=None, cloud_theta=None,
                 cloud_seed=None, warm_mode="carry"):
    """Backward recursion over all stages; returns DpArtifacts.

    ``weight_eval`` switches every stage to the reweighted objectives on
    the stored proxies; ``warm_start`` initializes networks from a
    previous run (adaptive update rule).  ``warm_mode='carry'`` loads the
    source's last-trained-stage snapshot once and lets parameters flow
    backward exactly as in a fresh run; ``'stage'`` reloads the source's
    stage-j snapshot before every stage.
    """
    m = problem.m
    t0 = time.perf_counter()
    if state_cloud is None:
        state_cloud = problem.build_state_cloud(
            data, theta if cloud_theta is None else cloud_theta,
            cfg.seed if cloud_seed is None else cloud_seed)
    terminal = problem.payoff(state_cloud[:, m])
    if cfg.clip_enabled:
        clip_bound = float(np.quantile(np.abs(terminal), cfg.clip_quantile))
        clip_bound = max(clip_bound, 1e-12)
    else:
        clip_bound = np.inf

    policy = problem.make_policy(cfg.seed + 1)
    value = problem.make_value(cfg.seed + 2)
    opt_c = AdamW(policy.params, weight_decay=cfg.weight_decay,
                  clip_norm=cfg.clip_norm)
    opt_v = AdamW(value.params, weight_decay=cfg.weight_decay,
                  clip_norm=cfg.clip_norm)
    weight_fn = make_weight_fn(weight_eval, theta) if weight_eval is not None else None

    control_coeffs = np.zeros((m, 2))
    value_coeffs = np.zeros((m, 3))
    control_params = [None] * m
    value_params = [None] * m
    stage_losses = []
    stage_times = []

    def load_params(net_params, snapshot):
        for p, src in zip(net_params, snapshot):
            if p.shape != src.shape:
                raise ValueError("warm-start architecture mismatch")
            p[...] = src

    def vhat_factory(j_next):
        if j_next == m:
            def vhat(xq, grad=False):
                if grad:
                    v, g = problem.payoff(xq, grad=True)
                    return v, g
                return problem.payoff(xq)
            return vhat
        co = value_coeffs[j_next]

        def vhat(xq, grad=False):
            v = co[0] * xq**2 + co[1] * xq + co[2]
            inside = np.abs(v) < clip_bound
            v = np.clip(v, -clip_bound, clip_bound)
            if grad:
                return v, (2.0 * co[0] * xq + co[1]) * inside
            return v
        return vhat

    if warm_start is not None and warm_mode == "carry":
        load_params(policy.params, warm_start.control_params[m - 1])
        load_params(value.params, warm_start.value_params[m - 1])
    for j in range(m - 1, -1, -1):
        s0 = time.perf_counter()
        if warm_start is not None and warm_mode == "stage":
            # per-stage initialization from the source run's stage snapshot
            load_params(policy.params, warm_start.control_params[j])
            load_params(value.params, warm_start.value_params[j])
        vhat_next = vhat_factory(j + 1)
        lr = stage_lr(j, m, cfg)
        closs = control_erm_step(problem, j, data, vhat_next, policy, opt_c,
                                 cfg.iters_control, lr * cfg.lr_policy_mult,
                                 theta, state_cloud, weight_fn)
        feat = problem.stage_feature(j)
        control_coeffs[j] = policy.coefficients(feat)
        vloss = value_regression_step(problem, j, data, vhat_next, policy,
                                      value, opt_v, cfg.iters_value, lr,
                                      theta, state_cloud, weight_fn)
        a_v, b_v, c_v, _ = value.coeffs(feat)
        value_coeffs[j] = (float(a_v[0]), float(b_v[0]), float(c_v[0]))
        control_params[j] = [p.copy() for p in policy.params]
        value_params[j] = [p.copy() for p in value.params]
        stage_losses.append({"stage": j, "control": closs[-1] if len(closs) else np.nan,
                             "value": vloss[-1] if len(vloss) else np.nan})
        stage_times.append(time.perf_counter() - s0)

    return DpArtifacts(
        control_coeffs=control_coeffs,
        value_coeffs=value_coeffs,
        clip_bound=clip_bound,
        action_lo=problem.action_lo,
        action_hi=problem.action_hi,
        control_params=control_params,
        value_params=value_params,
        diagnostics={
            "stage_losses": stage_losses,
            "stage_times": stage_times,
            "wall_time": time.perf_counter() - t0,
            "theta": theta,
            "weighted": weight_eval is not None,
            "seed": cfg.seed,
        },
    )


@dataclass
class NoiseBank:
    """Shared forward evaluation noise, regenerated identically from its seed."""

    dts: np.ndarray
    das: np.ndarray
    seed: int

    @classmethod
    def generate(cls, config, n_eval, m, seed, table=None):
        rng = np.random.default_rng(seed)
        dt, da = sample_increment_1d(rng, config, n=n_eval * m, table=table)
        return cls(dts=dt.reshape(n_eval, m), das=da.reshape(n_eval, m), seed=seed)


def evaluate_policy(artifacts, problem, theta, bank):
    """Propagate the trained controls on the shared bank; loss statistics."""
    n, m = bank.dts.shape
    x = np.full(n, problem.x0)
    for j in range(m):
        a = artifacts.control(j, x)
        x = problem.propagate(theta, x, a, bank.dts[:, j], bank.das[:, j])
    losses = problem.payoff(x)
    return loss_stats(losses)


def loss_stats(losses):
    losses = np.asarray(losses, dtype=float)
    return {
        "mean": float(np.mean(losses)),
        "var": float(np.var(losses, ddof=1)) if losses.size > 1 else 0.0,
        "q5": float(np.quantile(losses, 0.05)),
        "q1": float(np.quantile(losses, 0.01)),
        "n": int(losses.size),
        "losses": losses,
    }


class PolicyMixture:
    """State-dependent mixture of primitive action densities.

    ``primitives``: list of (density callable, sampler or None); weight
    networks produce nonnegative mixture weights through softplus.
    """

    def __init__(self, primitives, weight_nets):
        if len(primitives) != len(weight_nets):
            raise ValueError("one weight net per primitive")
        self.primitives = primitives
        self.weight_nets = weight_nets

    def weights(self, o):
        o = np.atleast_2d(o)
        w = np.stack([softplus(net.forward(o)[:, 0]) for net in self.weight_nets],
                     axis=-1)
        return w / w.sum(axis=-1, keepdims=True)

    def density(self, o, a):
        w = self.weights(o)
        f = np.stack([phi(np.asarray(a, dtype=float)) for phi, _ in self.primitives],
                     axis=-1)
        return (w * f).sum(axis=-1)

    def sup_bound(self, a_grid):
        return max(float(np.max(phi(a_grid))) for phi, _ in self.primitives)


def randomized_continuation(problem, j, x_state, mixture, o_feat, vhat_next,
                            theta, noise_dt, noise_da, n_action_nodes=64):
    """Mixture-bracket continuation: quadrature over actions, MC over noise.

    Evaluates <E[Vhat(x + increment(a))], h(o, .)> by Gauss-Legendre over
    the compact action interval crossed with the supplied noise draws.
    """
    gl_x, gl_w = np.polynomial.legendre.leggauss(n_action_nodes)
    lo, hi = problem.action_lo, problem.action_hi
    a_nodes = 0.5 * (gl_x + 1.0) * (hi - lo) + lo
    w_nodes = 0.5 * gl_w * (hi - lo)
    h_vals = mixture.density(o_feat, a_nodes)
    inner = np.empty(n_action_nodes)
    for q, a in enumerate(a_nodes):
        x_next = problem.propagate(theta, x_state, np.full_like(noise_dt, a),
                                   noise_dt, noise_da)
        inner[q] = float(np.mean(vhat_next(x_next)))
    return float(np.sum(w_nodes * h_vals * inner))
