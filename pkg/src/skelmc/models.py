"""Controlled-increment generators for the three model classes.

A history holds the realized noise/state pairs (w_1, y_1, ..., w_n, y_n);
increments at step n+1 are pure functions of (history, action, fresh noise)
and never read past the current step, which the test suite fuzzes.
"""

from dataclasses import dataclass, field

import numpy as np

from .fractional import (FouParams, RlKernel, VolterraKernels, fbm_volterra,
                         fluctuation_bound, fou_path, phi_bc,
                         rl_increment_past)


class ModelValidationError(ValueError):
    """A declared coefficient band failed on Monte Carlo probes."""


@dataclass
class History:
    """Realized skeleton history o_n = (w_1, y_1, ..., w_n, y_n).

    ``dts``: (n,) waiting times, ``das``: (n, d) noise increments,
    ``ys``: (n, q) state increments, ``x0``: (q,) initial state.
    """

    x0: np.ndarray
    dts: np.ndarray = field(default_factory=lambda: np.zeros(0))
    das: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))
    ys: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))

    def __post_init__(self):
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        self.dts = np.asarray(self.dts, dtype=float)
        self.das = np.atleast_2d(np.asarray(self.das, dtype=float))
        self.ys = np.atleast_2d(np.asarray(self.ys, dtype=float))
        if self.dts.size == 0:
            self.das = self.das.reshape(0, self.das.shape[-1] if self.das.size else 1)
            self.ys = self.ys.reshape(0, self.ys.shape[-1] if self.ys.size else len(self.x0))

    def __len__(self):
        return self.dts.size

    def times(self):
        return np.concatenate([[0.0], np.cumsum(self.dts)])

    def state_sum(self):
        return self.x0 + self.ys.sum(axis=0)

    def pi2(self):
        """Drop the noise directions, keep (dt, y) pairs."""
        return self.dts, self.ys

    def pi3(self):
        """Keep the noise coordinates (dt, da) only."""
        return self.dts, self.das

    def step_path(self):
        """Piecewise-constant cadlag reconstruction of the state path."""
        times = self.times()
        vals = np.vstack([self.x0, self.x0 + np.cumsum(self.ys, axis=0)])
        return times, vals

    def appended(self, dt, da, y):
        return History(
            x0=self.x0,
            dts=np.append(self.dts, dt),
            das=np.vstack([self.das, np.atleast_1d(da)]),
            ys=np.vstack([self.ys, np.atleast_1d(y)]),
        )


@dataclass
class PdSdeModel:
    """Path-dependent SDE increments alpha dt + sigma da.

    ``alpha``/``sigma`` are non-anticipative callables of
    (t, (times, values), a); the declared constants are Monte Carlo
    checked by ``validate_pdsde`` before the model feeds density formulas.
    """

    alpha: callable
    sigma: callable
    c_min: float
    c_max: float
    v_max: float
    k_lip: float = np.inf
    theta: float = 0.0

    def coefficients(self, history, a):
        t_prev = float(history.times()[-1])
        path = history.step_path()
        return self.alpha(t_prev, path, a), self.sigma(t_prev, path, a)

    def increment(self, history, a, dt, da):
        c, v = self.coefficients(history, a)
        return c * dt + v * float(np.asarray(da).reshape(-1)[0])


@dataclass
class FbmDriftModel:
    """Drift-controlled state driven by Riemann-Liouville fractional noise."""

    varrho: callable
    sigma: float
    hurst: float
    c_min: float
    c_max: float
    varrho_norm: float = np.inf
    theta: float = 0.0
    kernel: RlKernel = None

    def __post_init__(self):
        if self.kernel is None:
            self.kernel = RlKernel(self.hurst)

    def drift_slope(self, history, a):
        return self.varrho(float(history.state_sum()[0]), a)

    def increment(self, history, a, j_step):
        c = self.drift_slope(history, a)
        ell = rl_increment_past(self.kernel, history.dts, history.das[:, 0],
                                len(history) + 1, j_step)
        return c * j_step + self.sigma * ell

    def increment_via_phi(self, history, a, j_step):
        """Same increment through phi_{b,c}; used as a cross-check."""
        c = self.drift_slope(history, a)
        return c * j_step + self.sigma * phi_bc(
            self.kernel, history.dts, history.das[:, 0], 0.0, j_step
        )


def trunc_T(y_first, s_min, s_max, s0):
    """Truncated price level used by the rough-volatility coefficients.

    ``y_first`` are the realized first-coordinate increments; the initial
    price enters the running sum (delta x_0 = S0) and the level is clamped
    to [s_min, s_max].  The empty history returns the clamped S0.
    """
    total = s0 + float(np.sum(y_first))
    return min(max(abs(total), s_min), s_max)


@dataclass
class RoughVolModel:
    """Rough stochastic volatility asset/wealth pair (dS, dY = a dS)."""

    mu_drift: float
    fou: FouParams
    rho: float
    vartheta: callable
    theta_min: float
    theta_max: float
    s_min: float
    s_max: float
    s0: float
    hurst: float = 0.1
    kernels: VolterraKernels = None

    def __post_init__(self):
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [-1, 1]")
        if not 0.0 < self.s_min < self.s_max:
            raise ValueError("need 0 < s_min < s_max")
        if self.kernels is None:
            self.kernels = VolterraKernels(self.hurst)

    def vol_state(self, history):
        """V_{n-1} from the history's noise via the discrete fractional OU."""
        if len(history) == 0:
            return float(np.exp(np.clip(self.fou.z0, self.fou.clip_lo, self.fou.clip_hi)))
        rho_bar = np.sqrt(max(0.0, 1.0 - self.rho**2))
        da1 = history.das[:, 0]
        da2 = history.das[:, 1] if history.das.shape[1] > 1 else np.zeros_like(da1)
        dw = self.rho * da1 + rho_bar * da2
        wh = fbm_volterra(history.dts, dw, self.kernels)
        times = history.times()
        z, v = fou_path(self.fou, wh, times)
        return float(v[-1])

    def level(self, history):
        return trunc_T(history.ys[:, 0] if len(history) else [], self.s_min,
                       self.s_max, self.s0)

    def coefficients(self, history):
        """(c1, v1): drift and noise loadings of the dS coordinate."""
        lvl = self.level(history)
        return self.mu_drift * lvl, lvl * self.vartheta(self.vol_state(history))

    def increment(self, history, a, dt, da):
        c1, v1 = self.coefficients(history)
        da1 = float(np.atleast_1d(da)[0])
        ds = c1 * dt + v1 * da1
        return np.array([ds, a * ds])


def validate_pdsde(model, rng, n_probes=256, horizon=1.0, action_lo=-1.0,
                   action_hi=1.0, state_scale=1.0):
    """Monte Carlo check of the drift/vol bands (bounded-away drift).

    Probes random short histories and actions; raises
    ``ModelValidationError`` when a declared band fails.
    """
    for _ in range(n_probes):
        n = rng.integers(0, 4)
        hist = History(
            x0=np.array([rng.normal(0.0, state_scale)]),
            dts=rng.uniform(0.0, horizon / 4.0, n),
            das=rng.normal(0.0, state_scale, (n, 1)),
            ys=rng.normal(0.0, state_scale, (n, 1)),
        )
        a = rng.uniform(action_lo, action_hi)
        c, v = model.coefficients(hist, a)
        if not (model.c_min - 1e-12 <= abs(c) <= model.c_max + 1e-12):
            raise ModelValidationError(
                "drift %g escapes [%g, %g]" % (c, model.c_min, model.c_max))
        if abs(v) > model.v_max + 1e-12:
            raise ModelValidationError("vol %g exceeds %g" % (v, model.v_max))
    return True


def validate_fbm(model, epsilon, m, trunc_lo, rng, n_probes=256,
                 action_lo=-1.0, action_hi=1.0, state_scale=1.0):
    """Checks the drift band and the separation condition C1 <= c_min / 2."""
    c1 = fluctuation_bound(model.kernel, epsilon, m, trunc_lo)
    if c1 > 0.5 * model.c_min:
        raise ModelValidationError(
            "separation violated: C1=%g > c_min/2=%g" % (c1, 0.5 * model.c_min))
    for _ in range(n_probes):
        y = rng.normal(0.0, state_scale)
        a = rng.uniform(action_lo, action_hi)
        c = model.varrho(y, a)
        if not (model.c_min - 1e-12 <= abs(c) <= model.c_max + 1e-12):
            raise ModelValidationError(
                "varrho %g escapes [%g, %g]" % (c, model.c_min, model.c_max))
    return True


def validate_roughvol(model, rng, n_probes=256, v_scale=1.0):
    """Checks the volatility-function band of the incomplete-market case."""
    probes = np.exp(rng.normal(np.log(max(v_scale, 1e-12)), 1.0, n_probes))
    vals = np.array([model.vartheta(v) for v in probes])
    if np.any(np.abs(vals) < model.theta_min - 1e-12) or np.any(
            np.abs(vals) > model.theta_max + 1e-12):
        raise ModelValidationError("vartheta escapes its declared band")
    return True
