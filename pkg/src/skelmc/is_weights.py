"""Dominating training measures and importance-sampling weight evaluators.

Each controlled increment has an explicit conditional density against a
fixed reference law; weights are ratios of those densities, so a single
training sample serves every model parameter.  Three families:

* drift/vol increments c J + v B     -> ``density_R``     (Bernoulli branch)
* fractional pathwise increments     -> ``density_fphi``  (monotone warp)
* pinned-coordinate increments c J + v L -> ``density_RL``

plus the cone pushforward used when no measure dominates all control rays.
"""

import math
from dataclasses import dataclass

import numpy as np

from .fractional import invert_phi, phi_bc, phi_prime
from .skeleton import _pinned_numerator, survival_prob

# Leading spectral decay rate of the unit-barrier exit time.
GAMMA_UNIT = math.pi**2 / 8.0


def fit_tail_constant(density, t_lo=2.0, t_hi=20.0, n=200):
    """Least-squares fit of C in f(t) ~ C exp(-gamma t) on [t_lo, t_hi]."""
    t = np.linspace(t_lo, t_hi, n)
    f = density.pdf(t)
    logc = np.mean(np.log(f) + GAMMA_UNIT * t)
    return float(np.exp(logc))


def tail_constants(law):
    """(C_J, gamma_J) with f_J(u) <= C_J exp(-gamma_J u) on the tail, J units."""
    eps2 = law.eps2
    gamma_j = GAMMA_UNIT / eps2 * law.config.dim
    c_unit = fit_tail_constant(law.density)
    c_j = law.config.dim * c_unit / (eps2 * law.window_mass)
    return c_j, gamma_j


class UniformRef:
    """Uniform reference density on a compact interval K."""

    def __init__(self, lo, hi):
        if not lo < hi:
            raise ValueError("need lo < hi")
        self.lo, self.hi = float(lo), float(hi)
        self.q_k = 1.0 / (self.hi - self.lo)

    def density(self, x):
        x = np.asarray(x, dtype=float)
        return np.where((x >= self.lo) & (x <= self.hi), self.q_k, 0.0)

    def sample(self, rng, n):
        return rng.uniform(self.lo, self.hi, n)


class MixtureUniformRef:
    """Half-wide, half-narrow uniform mixture on the compact support K.

    The wide component guarantees the lower bound Q_K = w/|K| required of
    a dominating density; the narrow component concentrates samples at the
    scale the increments actually live on, which is what keeps the
    effective sample size workable when K is sized by a loose support
    bound.
    """

    def __init__(self, lo, hi, core_half_width, wide_weight=0.5):
        if not lo < hi:
            raise ValueError("need lo < hi")
        if not 0.0 < wide_weight < 1.0:
            raise ValueError("wide_weight must lie in (0, 1)")
        self.lo, self.hi = float(lo), float(hi)
        half = min(core_half_width, 0.5 * (hi - lo))
        mid = 0.5 * (lo + hi)
        self.core_lo, self.core_hi = mid - half, mid + half
        self.w = float(wide_weight)
        self.q_k = self.w / (self.hi - self.lo)   # lower bound on K

    def density(self, x):
        x = np.asarray(x, dtype=float)
        wide = np.where((x >= self.lo) & (x <= self.hi),
                        self.w / (self.hi - self.lo), 0.0)
        core = np.where((x >= self.core_lo) & (x <= self.core_hi),
                        (1.0 - self.w) / (self.core_hi - self.core_lo), 0.0)
        return wide + core

    def sample(self, rng, n):
        pick = rng.random(n) < self.w
        wide = rng.uniform(self.lo, self.hi, n)
        core = rng.uniform(self.core_lo, self.core_hi, n)
        return np.where(pick, wide, core)


class LaplaceRef:
    """Two-sided Laplace reference q(y) = (beta/2) exp(-beta |y|)."""

    def __init__(self, beta_rate):
        if beta_rate <= 0.0:
            raise ValueError("beta_rate must be positive")
        self.beta_rate = float(beta_rate)

    def density(self, y):
        y = np.asarray(y, dtype=float)
        return 0.5 * self.beta_rate * np.exp(-self.beta_rate * np.abs(y))

    def sample(self, rng, n):
        u = rng.random(n) - 0.5
        return -np.sign(u) * np.log1p(-2.0 * np.abs(u)) / self.beta_rate


class ConePushforward:
    """Training law on the cone {(z, a z)} = Z_#(G lambda q).

    ``action`` and ``radial`` are reference objects with sample/density;
    the coupling G defaults to 1 (product law) and must be bounded below.
    """

    def __init__(self, action, radial, coupling=None, sup_g=1.0, inf_g=1.0):
        self.action = action
        self.radial = radial
        self.coupling = coupling
        self.sup_g = float(sup_g)
        self.inf_g = float(inf_g)
        if self.inf_g <= 0.0:
            raise ValueError("coupling must be bounded below by a positive constant")
        if coupling is not None:
            self._check_coupling_mass()

    def _check_coupling_mass(self, tol=1e-8):
        """G lambda q must be a probability measure (uniform refs only)."""
        if not (isinstance(self.action, UniformRef) and isinstance(self.radial, UniformRef)):
            return
        x, w = np.polynomial.legendre.leggauss(128)
        a = 0.5 * (x + 1.0) * (self.action.hi - self.action.lo) + self.action.lo
        z = 0.5 * (x + 1.0) * (self.radial.hi - self.radial.lo) + self.radial.lo
        wa = 0.5 * w  # times interval length times uniform density = w/2
        mass = wa @ self.g(a[:, None], z[None, :]) @ wa
        if abs(mass - 1.0) > tol:
            raise ValueError("coupling mass %.10f != 1; normalize G" % mass)

    def g(self, a, z):
        if self.coupling is None:
            return np.ones_like(np.asarray(a, dtype=float))
        return self.coupling(a, z)

    def sample(self, rng, n):
        """Draw (x1, x2) = (z, a z); rejection against sup G when G != 1."""
        if self.coupling is None:
            a = self.action.sample(rng, n)
            z = self.radial.sample(rng, n)
            return z, a * z
        a_out = np.empty(n)
        z_out = np.empty(n)
        filled = 0
        while filled < n:
            m = max(2 * (n - filled), 64)
            a = self.action.sample(rng, m)
            z = self.radial.sample(rng, m)
            acc = rng.random(m) * self.sup_g <= self.g(a, z)
            a, z = a[acc], z[acc]
            take = min(a.size, n - filled)
            a_out[filled:filled + take] = a[:take]
            z_out[filled:filled + take] = z[:take]
            filled += take
        return z_out, a_out * z_out


def density_R(c, v, x, law, c_min=None):
    """Density of c J + v B at x, with B = ±epsilon symmetric Bernoulli.

    ``law`` carries the truncated waiting-time density f_J and epsilon.
    Raises when a drift is below the declared separation level.
    """
    c = np.asarray(c, dtype=float)
    v = np.asarray(v, dtype=float)
    x = np.asarray(x, dtype=float)
    if c_min is not None and np.any(np.abs(c) < c_min):
        raise ValueError("drift magnitude below the declared c_min")
    if np.any(c == 0.0):
        raise ValueError("degenerate Jacobian: c = 0")
    eps = law.config.epsilon
    total = 0.0
    for s in (1.0, -1.0):
        u = (x - s * v * eps) / c
        total = total + law.pdf(u)
    return total / (2.0 * np.abs(c))


def density_R_with_dc(c, v, x, law):
    """(density, d density / d c) for the Bernoulli-branch increment law."""
    c = np.asarray(c, dtype=float)
    v = np.asarray(v, dtype=float)
    x = np.asarray(x, dtype=float)
    eps = law.config.epsilon
    val = 0.0
    grad = 0.0
    for s in (1.0, -1.0):
        u = (x - s * v * eps) / c
        f = law.pdf(u)
        fp = law.dpdf(u)
        val = val + f / (2.0 * np.abs(c))
        grad = grad - np.sign(c) * f / (2.0 * c**2) - fp * u / (2.0 * np.abs(c) * c)
    return val, grad


def density_fphi(kernel, dts, das, c, y, law, sigma=1.0):
    """Conditional density of the fractional pathwise increment phi_{b,c}(J).

    ``das`` are the history's driving increments; ``sigma`` scales the
    fluctuation part (the map is c u + sigma psi_b(u)).  Vanishes off the
    range of phi over the truncation window.
    """
    das_s = sigma * np.asarray(das, dtype=float)
    lo, hi = law.config.trunc_lo, law.config.trunc_hi
    y_arr = np.atleast_1d(np.asarray(y, dtype=float))
    out = np.zeros_like(y_arr)
    for i, yi in enumerate(y_arr):
        u = invert_phi(kernel, dts, das_s, c, yi, lo, hi)
        if u is None:
            continue
        out[i] = law.pdf(u) / abs(phi_prime(kernel, dts, das_s, c, u))
    return out if np.ndim(y) else float(out[0])


class _SurvivalInterp:
    """Cached survival probabilities p(t, eps) on the truncation window."""

    def __init__(self, law, n_grid=512, n_terms=50):
        lo, hi = law.config.trunc_lo, law.config.trunc_hi
        self.t_grid = np.geomspace(lo * 0.999, hi * 1.001, n_grid)
        self.p_grid = survival_prob(self.t_grid, law.config.epsilon, n_terms)
        self.eps = law.config.epsilon

    def __call__(self, t):
        return np.interp(t, self.t_grid, self.p_grid)


def density_RL(c, v, z, law, n_panels=128, v_min=None, survival_cache=None,
               n_terms=50):
    """Density of c J + v L with L the conditional non-hitting coordinate.

    Integrates (1/|v|) f_{L|t}((z - c t)/v) f_J(t) over the part of the
    truncation window where the argument stays inside (-eps, eps); the
    composite Gauss-Legendre rule uses ``n_panels`` panels on that exact
    support interval, so the integrand is smooth on every panel.
    """
    if v_min is not None and np.any(np.abs(np.asarray(v)) < v_min):
        raise ValueError("noise loading below the declared v_min")
    c = np.broadcast_to(np.asarray(c, dtype=float), np.shape(z)).astype(float)
    v = np.broadcast_to(np.asarray(v, dtype=float), np.shape(z)).astype(float)
    z_arr = np.atleast_1d(np.asarray(z, dtype=float))
    c_arr = np.atleast_1d(c)
    v_arr = np.atleast_1d(v)
    if np.any(v_arr == 0.0) or np.any(c_arr == 0.0):
        raise ValueError("density_RL requires nonzero c and v")
    eps = law.config.epsilon
    lo, hi = law.config.trunc_lo, law.config.trunc_hi
    # image terms decay like exp(-(4m-3)^2 eps^2 / (2 t)); keep only the
    # ones above double precision at the largest waiting time
    n_terms = int(np.clip(np.ceil((np.sqrt(80.0 * hi) / eps + 3.0) / 4.0),
                          10, n_terms))
    if survival_cache is None:
        survival_cache = _SurvivalInterp(law, n_terms=n_terms)
    ends = np.sort(np.stack([(z_arr - eps * v_arr) / c_arr,
                             (z_arr + eps * v_arr) / c_arr]), axis=0)
    a = np.maximum(ends[0], lo)
    b = np.minimum(ends[1], hi)
    width = np.maximum(b - a, 0.0)
    gl_x, gl_w = np.polynomial.legendre.leggauss(4)
    # panel nodes: t = a + width * (k + (x+1)/2)/n_panels
    offs = (np.arange(n_panels)[:, None] + 0.5 * (gl_x + 1.0)[None, :]) / n_panels
    out = np.zeros_like(z_arr)
    chunk = max(1, int(2e6 / (n_panels * 4)))
    for start in range(0, z_arr.size, chunk):
        sl = slice(start, min(start + chunk, z_arr.size))
        t = a[sl, None, None] + width[sl, None, None] * offs[None, :, :]
        x = (z_arr[sl, None, None] - c_arr[sl, None, None] * t) / v_arr[sl, None, None]
        inside = np.abs(x) < eps
        num = _pinned_numerator(t, np.where(inside, x, 0.0), eps, n_terms)
        dens_l = np.where(inside, num, 0.0) / survival_cache(t)
        fj = law.pdf(t)
        w = width[sl, None, None] / (2.0 * n_panels) * gl_w[None, None, :]
        out[sl] = (dens_l * fj * w).sum(axis=(1, 2)) / np.abs(v_arr[sl])
    return out if np.ndim(z) else float(out[0])


def sample_cone(reference, rng, n):
    """Draw (x1, x2) pairs from a cone pushforward reference."""
    return reference.sample(rng, n)


@dataclass
class PdSdeISWeights:
    """Weights for drift/vol increments against a scalar reference density.

    ``coeff`` maps (theta, a, history summary) to the (c, v) loadings;
    ``dcoeff_da`` optionally supplies their action derivatives for the
    gradient path used inside training.  ``c_floor`` clamps the Jacobian
    in the degenerate-drift regime and reports how often it fired.
    """

    coeff: callable
    reference: object
    law: object
    dcoeff_da: callable = None
    c_floor: float = 1e-3
    clamp_factor: float = 1.5

    def __post_init__(self):
        self.clamp_events = 0
        self._sup_fj = self.law.sup_pdf()

    def _clamped(self, c):
        return np.where(np.abs(c) < self.c_floor,
                        np.where(c < 0, -self.c_floor, self.c_floor), c)

    def weights(self, theta, a, y, hist=None, clamp=True):
        c, v = self.coeff(theta, np.asarray(a, dtype=float), hist)
        c_eff = self._clamped(np.asarray(c, dtype=float))
        r = density_R(c_eff, v, y, self.law) / self.reference.density(y)
        if clamp:
            bound = self.clamp_factor * self._sup_fj / (
                self.reference.q_k * np.abs(c_eff))
            over = r > bound
            self.clamp_events += int(np.count_nonzero(over))
            r = np.where(over, bound, r)
        return r

    def weights_and_grad_a(self, theta, a, y, hist=None, clamp=True):
        """Weights and their derivative in the action (drift chain rule)."""
        if self.dcoeff_da is None:
            raise ValueError("dcoeff_da is required for the gradient path")
        c, v = self.coeff(theta, np.asarray(a, dtype=float), hist)
        dc_da, _ = self.dcoeff_da(theta, np.asarray(a, dtype=float), hist)
        c_eff = self._clamped(np.asarray(c, dtype=float))
        frozen = np.abs(np.asarray(c)) < self.c_floor
        val, grad_c = density_R_with_dc(c_eff, v, y, self.law)
        q = self.reference.density(y)
        r = val / q
        dr_da = np.where(frozen, 0.0, grad_c * dc_da / q)
        if clamp:
            bound = self.clamp_factor * self._sup_fj / (
                self.reference.q_k * np.abs(c_eff))
            over = r > bound
            self.clamp_events += int(np.count_nonzero(over))
            r = np.where(over, bound, r)
            dr_da = np.where(over, 0.0, dr_da)
        return r, dr_da

    def weights_grad_pathwise(self, theta, a, y, hist=None):
        """Weights plus the change-of-variables gradient factor.

        Substituting u = (y - s v eps)/c inside the continuation integral
        gives d/da E_q[r V] = dc/da * E_q[S (dV/dy)] with the per-sample
        factor S = sum_s f_J(u_s) u_s / (2 |c| q); unlike the direct
        derivative of r this involves no density derivative, so the
        estimator is far less heavy-tailed.
        """
        if self.dcoeff_da is None:
            raise ValueError("dcoeff_da is required for the gradient path")
        a = np.asarray(a, dtype=float)
        y = np.asarray(y, dtype=float)
        c, v = self.coeff(theta, a, hist)
        dc_da, _ = self.dcoeff_da(theta, a, hist)
        c_eff = self._clamped(np.asarray(c, dtype=float))
        frozen = np.abs(np.asarray(c)) < self.c_floor
        eps = self.law.config.epsilon
        q = self.reference.density(y)
        r = 0.0
        s_factor = 0.0
        for s in (1.0, -1.0):
            u = (y - s * np.asarray(v) * eps) / c_eff
            fj = self.law.pdf(u)
            r = r + fj / (2.0 * np.abs(c_eff) * q)
            s_factor = s_factor + fj * u / (2.0 * np.abs(c_eff) * q)
        grad_factor = np.where(frozen, 0.0, s_factor * dc_da)
        return r, grad_factor

    def sup_bound(self):
        return self._sup_fj / (self.reference.q_k * self.c_floor)


@dataclass
class FbmISWeights:
    """Weights for the fractional pathwise increment against a Laplace law."""

    model: object
    reference: LaplaceRef
    law: object

    def __post_init__(self):
        _, gamma_j = tail_constants(self.law)
        if self.reference.beta_rate > gamma_j / self.model.c_max:
            raise ValueError(
                "Laplace rate %g exceeds gamma/c_max = %g"
                % (self.reference.beta_rate, gamma_j / self.model.c_max))

    def weight(self, a, y, history):
        c = self.model.drift_slope(history, a)
        f = density_fphi(self.model.kernel, history.dts, history.das[:, 0],
                         c, y, self.law, sigma=self.model.sigma)
        return f / self.reference.density(y)


@dataclass
class RoughVolISWeights:
    """Cone weights for the rough-volatility wealth increment.

    Complete-market mode keeps only the Bernoulli branch; the incomplete
    case mixes it equally with the conditional-coordinate branch.
    """

    reference: ConePushforward
    law: object
    complete: bool = True
    v_min: float = None
    n_terms: int = 50

    def __post_init__(self):
        self._survival = None

    def weight(self, h_policy, history_or_coeffs, x1, x2, model=None):
        """Weight at cone points (x1, x2); actions a = x2 / x1 must be valid.

        ``history_or_coeffs`` is either a (c1, v1) pair or a History handed
        to ``model.coefficients``.
        """
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        if np.any(x1 == 0.0):
            raise ValueError("cone weight undefined at x1 = 0")
        if model is not None:
            c1, v1 = model.coefficients(history_or_coeffs)
        else:
            c1, v1 = history_or_coeffs
        a = x2 / x1
        q = self.reference.radial.density(x1)
        r_bar = density_R(c1, v1, x1, self.law) / q
        h_vals = h_policy(a)
        g_vals = self.reference.g(a, x1)
        if self.complete:
            return h_vals * r_bar / g_vals
        if self._survival is None:
            self._survival = _SurvivalInterp(self.law, n_terms=self.n_terms)
        m_bar = density_RL(c1, v1, x1, self.law, v_min=self.v_min,
                           survival_cache=self._survival,
                           n_terms=self.n_terms) / q
        return 0.5 * h_vals * (r_bar + m_bar) / g_vals


def reweight_for_theta(evaluator, new_theta, stored):
    """Recompute stored-sample weights at a new parameter; no resampling.

    ``stored`` carries (a, y) arrays plus whatever history summary the
    evaluator's coefficient map expects; the result at the original theta
    is bitwise identical to the original weights.
    """
    a, y, hist = stored
    return evaluator.weights(new_theta, a, y, hist)
