"""Brownian discrete skeleton: exit-time law, noise increments, step counts.

The simulation clock is the sequence of first exit times of a Brownian
motion from a centered box of half-width ``epsilon`` (max norm).  Everything
here is expressed through the unit-barrier exit time

    tau = inf{t > 0 : |W(t)| = 1},

whose density has the alternating image representation

    f(t) = sum_k (-1)^k y_k / sqrt(2 pi t^3) * exp(-y_k^2 / (2 t)),
    y_k = 2k + 1,  k in Z,

and a barrier of size ``epsilon`` rescales time by ``epsilon**2``.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc

# The image series converges fast for small t, the spectral series for
# large t; both are accurate to ~1e-15 on [1.0, 100].
_BRANCH_T = 2.0


class ExitTimeDensity:
    """Density of the unit-barrier two-sided exit time.

    Parameters
    ----------
    n_terms : int
        Number of image (and spectral) terms kept in the series.
        Values >= 10 give full double precision for t >= 0.01.
    """

    def __init__(self, n_terms=50):
        if n_terms < 10:
            raise ValueError("n_terms must be >= 10")
        self.n_terms = int(n_terms)
        self.barrier = 1.0
        k = np.arange(self.n_terms + 1)
        self._y = 2.0 * k + 1.0          # odd image points
        self._sign = (-1.0) ** k
        self._lam = (self._y * np.pi) ** 2 / 8.0   # spectral rates

    def pdf(self, t):
        """Exit-time density f(t); t may be scalar or array, t > 0."""
        t = np.asarray(t, dtype=float)
        if np.any(t <= 0.0):
            raise ValueError("exit-time density requires t > 0")
        out = np.empty(np.shape(t), dtype=float)
        small = t < _BRANCH_T
        if np.any(small):
            ts = np.atleast_1d(t[small] if t.ndim else t)[..., None]
            terms = self._sign * self._y * np.exp(-self._y**2 / (2.0 * ts))
            vals = 2.0 / np.sqrt(2.0 * np.pi) * ts[..., 0] ** (-1.5) * terms.sum(axis=-1)
            if t.ndim:
                out[small] = vals
            else:
                return float(vals[0])
        if np.any(~small):
            tl = np.atleast_1d(t[~small] if t.ndim else t)[..., None]
            terms = self._sign * self._y * np.exp(-self._lam * tl)
            vals = (np.pi / 2.0) * terms.sum(axis=-1)
            if t.ndim:
                out[~small] = vals
            else:
                return float(vals[0])
        return out

    def dpdf(self, t):
        """Derivative f'(t) of the exit-time density."""
        t = np.asarray(t, dtype=float)
        if np.any(t <= 0.0):
            raise ValueError("exit-time density requires t > 0")
        out = np.empty(np.shape(t), dtype=float)
        small = t < _BRANCH_T
        if np.any(small):
            ts = np.atleast_1d(t[small] if t.ndim else t)[..., None]
            expf = np.exp(-self._y**2 / (2.0 * ts))
            terms = self._sign * self._y * expf * (
                -1.5 * ts ** (-2.5) + 0.5 * self._y**2 * ts ** (-3.5)
            )
            vals = 2.0 / np.sqrt(2.0 * np.pi) * terms.sum(axis=-1)
            if t.ndim:
                out[small] = vals
            else:
                return float(vals[0])
        if np.any(~small):
            tl = np.atleast_1d(t[~small] if t.ndim else t)[..., None]
            terms = self._sign * self._y * (-self._lam) * np.exp(-self._lam * tl)
            vals = (np.pi / 2.0) * terms.sum(axis=-1)
            if t.ndim:
                out[~small] = vals
            else:
                return float(vals[0])
        return out

    def cdf(self, t):
        """P(tau <= t)."""
        t = np.asarray(t, dtype=float)
        out = np.zeros(np.shape(t), dtype=float)
        pos = t > 0.0
        small = pos & (t < _BRANCH_T)
        if np.any(small):
            ts = np.atleast_1d(t[small] if t.ndim else t)[..., None]
            vals = 2.0 * (self._sign * erfc(self._y / np.sqrt(2.0 * ts))).sum(axis=-1)
            if t.ndim:
                out[small] = vals
            else:
                return float(vals[0])
        large = pos & ~small
        if np.any(large):
            tl = np.atleast_1d(t[large] if t.ndim else t)[..., None]
            vals = 1.0 - (4.0 / np.pi) * (
                self._sign / self._y * np.exp(-self._lam * tl)
            ).sum(axis=-1)
            if t.ndim:
                out[large] = vals
            else:
                return float(vals[0])
        return out if t.ndim else float(out)

    def survival(self, t):
        return 1.0 - self.cdf(t)


class ExitTimeTable:
    """Tabulated inverse CDF of the unit exit time on a log-spaced grid.

    Built once from the series CDF; sampling and quantile evaluation are
    linear interpolation, so runs are reproducible under a seeded RNG.
    """

    def __init__(self, density=None, n_grid=4096, t_lo=1e-3, t_hi=60.0):
        self.density = density if density is not None else ExitTimeDensity()
        self.t_grid = np.geomspace(t_lo, t_hi, n_grid)
        cdf = self.density.cdf(self.t_grid)
        # enforce strict monotonicity for interpolation
        cdf = np.maximum.accumulate(cdf)
        self.cdf_grid = cdf
        self._pdf_grid = self.density.pdf(self.t_grid)
        self._dpdf_grid = self.density.dpdf(self.t_grid)

    def quantile(self, u):
        return np.interp(u, self.cdf_grid, self.t_grid)

    def sample(self, rng, n):
        return self.quantile(rng.random(n))

    def pdf_interp(self, t):
        out = np.interp(t, self.t_grid, self._pdf_grid)
        return np.where((t < self.t_grid[0]) | (t > self.t_grid[-1]), 0.0, out)

    def dpdf_interp(self, t):
        out = np.interp(t, self.t_grid, self._dpdf_grid)
        return np.where((t < self.t_grid[0]) | (t > self.t_grid[-1]), 0.0, out)


@dataclass
class SkeletonConfig:
    """Skeleton refinement and truncation parameters.

    ``epsilon`` is the exit barrier (2**-k), ``trunc_lo < trunc_hi`` the
    truncation window for the waiting time J = epsilon**2 * tau, and
    ``dim`` the driving Brownian dimension (1 or 2).
    """

    epsilon: float
    trunc_lo: float
    trunc_hi: float
    dim: int = 1
    n_terms: int = 50

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if not (0.0 < self.trunc_lo < self.trunc_hi):
            raise ValueError("need 0 < trunc_lo < trunc_hi")
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")

    @classmethod
    def from_level(cls, k, trunc_lo=None, trunc_hi=None, dim=1, n_terms=50):
        eps = 2.0 ** (-k)
        lo = trunc_lo if trunc_lo is not None else 1e-4 * eps**2
        hi = trunc_hi if trunc_hi is not None else 50.0 * eps**2
        return cls(epsilon=eps, trunc_lo=lo, trunc_hi=hi, dim=dim, n_terms=n_terms)


class TruncatedExitLaw:
    """Law of the waiting time J = epsilon**2 * tau_min conditioned to a window.

    ``dim`` selects the law of the minimum of ``dim`` independent unit exit
    times (the skeleton waiting time in dimension d); its density is
    d * f * S**(d-1) with S the unit survival function.

    ``use_table`` switches density evaluation between exact series (slow,
    test-grade) and interpolation on the cached grid (fast, training-grade).
    """

    def __init__(self, config, use_table=False, table=None):
        self.config = config
        self.eps2 = config.epsilon ** 2
        self.density = ExitTimeDensity(config.n_terms)
        self.table = table if table is not None else ExitTimeTable(self.density)
        self.use_table = use_table
        d = config.dim
        lo, hi = config.trunc_lo / self.eps2, config.trunc_hi / self.eps2
        s_lo = self.density.survival(lo)
        s_hi = self.density.survival(hi)
        # P(min of d in window) = S(lo)^d - S(hi)^d
        self.window_mass = s_lo**d - s_hi**d
        if self.window_mass < 1e-6:
            raise ValueError(
                "truncation window [%g, %g] carries mass %.3g < 1e-6 at epsilon=%g"
                % (config.trunc_lo, config.trunc_hi, self.window_mass, config.epsilon)
            )
        self._tau_lo, self._tau_hi = lo, hi

    def _unit_min_pdf(self, tau, derivative=False):
        d = self.config.dim
        if self.use_table:
            f = self.table.pdf_interp(tau)
        else:
            f = self.density.pdf(np.maximum(tau, 1e-300))
        if d == 1:
            base = f
        else:
            s = self.density.survival(tau)
            base = d * f * s ** (d - 1)
        if not derivative:
            return base
        fp = self.table.dpdf_interp(tau) if self.use_table else self.density.dpdf(tau)
        if d == 1:
            dbase = fp
        else:
            s = self.density.survival(tau)
            dbase = d * fp * s ** (d - 1) - d * (d - 1) * f**2 * s ** (d - 2)
        return base, dbase

    def pdf(self, u):
        """Truncated, renormalized density of J at u (J units)."""
        u = np.asarray(u, dtype=float)
        tau = u / self.eps2
        inside = (u >= self.config.trunc_lo) & (u <= self.config.trunc_hi)
        vals = np.where(inside, self._unit_min_pdf(np.where(inside, tau, 1.0)), 0.0)
        return vals / (self.eps2 * self.window_mass)

    def dpdf(self, u):
        """Derivative of the truncated density of J (zero off the window)."""
        u = np.asarray(u, dtype=float)
        tau = u / self.eps2
        inside = (u >= self.config.trunc_lo) & (u <= self.config.trunc_hi)
        _, dv = self._unit_min_pdf(np.where(inside, tau, 1.0), derivative=True)
        return np.where(inside, dv, 0.0) / (self.eps2**2 * self.window_mass)

    def sup_pdf(self):
        """Numerical sup of the truncated density over its support."""
        grid = np.geomspace(self.config.trunc_lo, self.config.trunc_hi, 2048)
        return float(np.max(self.pdf(grid)))

    def quad_nodes(self, n=64):
        """Gauss-Legendre nodes/weights in CDF space for E[g(J)] integrals.

        Returns (j_nodes, weights) with sum(w * g(j)) ~ E[g(J)] under the
        truncated law.
        """
        x, w = np.polynomial.legendre.leggauss(n)
        d = self.config.dim
        s_lo = self.density.survival(self._tau_lo)
        s_hi = self.density.survival(self._tau_hi)
        # CDF of the d-min: F_d(t) = 1 - S(t)^d, restricted to the window
        f_lo, f_hi = 1.0 - s_lo**d, 1.0 - s_hi**d
        u = 0.5 * (x + 1.0) * (f_hi - f_lo) + f_lo
        # invert 1 - S^d = u through the one-dimensional table
        tau = self.table.quantile(1.0 - (1.0 - u) ** (1.0 / d))
        w = w * 0.5  # weights on the conditioned window integrate to 1
        return tau * self.eps2, w

    def moment(self, p, n=256):
        j, w = self.quad_nodes(n)
        return float(np.sum(w * j**p))

    def sample(self, rng, n):
        """Rejection-sample J in the window via the inverse-CDF table."""
        if self.config.dim == 1:
            draw = lambda m: self.table.sample(rng, m) * self.eps2
        else:
            d = self.config.dim
            draw = lambda m: self.table.sample(rng, (m, d)).min(axis=1) * self.eps2
        out = np.empty(n)
        filled = 0
        while filled < n:
            need = n - filled
            batch = draw(max(int(need / max(self.window_mass, 1e-6) * 1.2), 64))
            good = batch[(batch >= self.config.trunc_lo) & (batch <= self.config.trunc_hi)]
            take = min(good.size, need)
            out[filled:filled + take] = good[:take]
            filled += take
        return out


def sample_exit_time(rng, config, n=1, table=None, truncate=True):
    """Sample the waiting time J = epsilon^2 * tau (d = 1).

    With ``truncate`` the law is conditioned to [trunc_lo, trunc_hi] by
    rejection; a window of acceptance probability below 1e-6 raises.
    """
    law = TruncatedExitLaw(config, table=table)
    if truncate:
        return law.sample(rng, n)
    return law.table.sample(rng, n) * config.epsilon**2


def sample_increment_1d(rng, config, n=1, table=None, truncate=True):
    """One-dimensional skeleton increment: (dt, da) with da = ±epsilon.

    The sign is symmetric Bernoulli and independent of dt.
    """
    dt = sample_exit_time(rng, config, n=n, table=table, truncate=truncate)
    da = config.epsilon * (2.0 * (rng.random(n) < 0.5) - 1.0)
    return dt, da


def _gauss_phi(t, x):
    return np.exp(-x**2 / (2.0 * t)) / np.sqrt(2.0 * np.pi * t)


def _pinned_numerator(t, x, epsilon, n_terms):
    """phi_t(x) + Y(t, x, eps): density of B(t) on the no-exit event."""
    t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
    m = np.arange(1, n_terms + 1)
    te = t[..., None]
    xe = x[..., None]
    y = (
        _gauss_phi(te, xe + 4.0 * m * epsilon)
        - _gauss_phi(te, xe + 2.0 * epsilon + 4.0 * (m - 1) * epsilon)
        + _gauss_phi(te, xe - 4.0 * m * epsilon)
        - _gauss_phi(te, xe - 2.0 * epsilon - 4.0 * (m - 1) * epsilon)
    ).sum(axis=-1)
    out = _gauss_phi(t, x) + y
    return out if out.ndim else float(out)


_GL_X, _GL_W = np.polynomial.legendre.leggauss(128)


def survival_prob(t, epsilon, n_terms=50):
    """P(sup_{s<=t} |B(s)| < epsilon) by quadrature of the image series.

    The integration window shrinks to ±40 standard deviations when t is
    tiny, otherwise the Gaussian spike falls between quadrature nodes.
    """
    if np.any(np.asarray(t) <= 0.0):
        raise ValueError("survival_prob requires t > 0")
    t = np.asarray(t, dtype=float)
    half = np.minimum(epsilon, 40.0 * np.sqrt(t))
    x = half[..., None] * _GL_X if t.ndim else half * _GL_X
    w = half[..., None] * _GL_W if t.ndim else half * _GL_W
    num = _pinned_numerator(t[..., None] if t.ndim else t, x, epsilon, n_terms)
    return (num * w).sum(axis=-1) if t.ndim else float(np.dot(num, w))


def conditional_L_density(t, x, epsilon, n_terms=50):
    """Density at x of the non-hitting coordinate given waiting time t.

    This is the law of a Brownian coordinate at time t conditioned on not
    having left (-epsilon, epsilon); it vanishes for |x| >= epsilon.
    """
    if np.any(np.asarray(t) <= 0.0):
        raise ValueError("conditional_L_density requires t > 0")
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    p = survival_prob(t, epsilon, n_terms)
    num = _pinned_numerator(t, x, epsilon, n_terms)
    dens = num / p
    return np.where(np.abs(x) < epsilon, dens, 0.0)


class ConditionalLSampler:
    """Inverse-CDF sampler for the non-hitting coordinate at unit barrier.

    Quantile functions are tabulated on a log-spaced grid of waiting-time
    buckets and interpolated bilinearly in (t, u); memory stays bounded and
    the inter-bucket interpolation keeps the binning bias small.
    """

    def __init__(self, tau_lo, tau_hi, n_buckets=64, n_x=513, n_u=257, n_terms=50):
        self.t_centers = np.geomspace(max(tau_lo, 1e-4), tau_hi, n_buckets)
        self.u_grid = np.linspace(0.0, 1.0, n_u)
        x = np.linspace(-1.0, 1.0, n_x)
        self.quantiles = np.empty((n_buckets, n_u))
        for i, t in enumerate(self.t_centers):
            dens = _pinned_numerator(np.full_like(x, t), x, 1.0, n_terms)
            cdf = np.concatenate([[0.0], np.cumsum((dens[1:] + dens[:-1]) * 0.5 * np.diff(x))])
            cdf /= cdf[-1]
            cdf = np.maximum.accumulate(cdf)
            # collapse flat segments so interp picks the left edge
            self.quantiles[i] = np.interp(self.u_grid, cdf, x)

    def sample(self, rng, tau):
        """Draw L given unit-barrier waiting times tau (array)."""
        tau = np.asarray(tau, dtype=float)
        u = rng.random(tau.shape)
        logt = np.log(np.clip(tau, self.t_centers[0], self.t_centers[-1]))
        logc = np.log(self.t_centers)
        idx = np.clip(np.searchsorted(logc, logt) - 1, 0, len(logc) - 2)
        frac = (logt - logc[idx]) / (logc[idx + 1] - logc[idx])
        q_lo = self._interp_u(idx, u)
        q_hi = self._interp_u(idx + 1, u)
        return (1.0 - frac) * q_lo + frac * q_hi

    def _interp_u(self, bucket_idx, u):
        nu = len(self.u_grid)
        ju = np.clip((u * (nu - 1)).astype(int), 0, nu - 2)
        fu = u * (nu - 1) - ju
        q = self.quantiles[bucket_idx, ju]
        q1 = self.quantiles[bucket_idx, ju + 1]
        return (1.0 - fu) * q + fu * q1


def sample_increment_2d(rng, config, n=1, table=None, sampler=None, truncate=True):
    """Two-dimensional skeleton increment.

    Draws two independent normalized exit times, takes the minimum as the
    waiting time, assigns ±epsilon to the hitting coordinate and draws the
    other one from the conditional pinned law.  Returns (dt, da, hit_index)
    with da of shape (n, 2); ties break toward index 0.
    """
    if config.dim != 2:
        raise ValueError("sample_increment_2d requires dim = 2")
    table = table if table is not None else ExitTimeTable(ExitTimeDensity(config.n_terms))
    lo, hi = config.trunc_lo / config.epsilon**2, config.trunc_hi / config.epsilon**2
    if sampler is None:
        sampler = ConditionalLSampler(lo, hi)
    dt = np.empty(n)
    da = np.empty((n, 2))
    hit = np.empty(n, dtype=int)
    filled = 0
    while filled < n:
        need = n - filled
        m = max(int(need * 1.3), 64)
        taus = table.sample(rng, (m, 2))
        tmin = taus.min(axis=1)
        if truncate:
            ok = (tmin >= lo) & (tmin <= hi)
        else:
            ok = np.ones(m, dtype=bool)
        taus, tmin = taus[ok], tmin[ok]
        take = min(tmin.size, need)
        taus, tmin = taus[:take], tmin[:take]
        which = np.argmin(taus, axis=1)
        signs = 2.0 * (rng.random(take) < 0.5) - 1.0
        lvals = sampler.sample(rng, tmin) * config.epsilon
        block = np.empty((take, 2))
        block[np.arange(take), which] = signs * config.epsilon
        block[np.arange(take), 1 - which] = lvals
        sl = slice(filled, filled + take)
        dt[sl] = tmin * config.epsilon**2
        da[sl] = block
        hit[sl] = which
        filled += take
    return dt, da, hit


def num_steps(epsilon, horizon, chi_d, mode="ceil"):
    """Number of dynamic-programming stages for a horizon.

    ``ceil`` follows the definition; ``floor`` reproduces the experiment
    tables (see module notes on the ambiguity).
    """
    if epsilon <= 0 or horizon <= 0 or chi_d <= 0:
        raise ValueError("num_steps requires positive arguments")
    x = horizon / (epsilon**2 * chi_d)
    if mode == "ceil":
        return int(math.ceil(x - 1e-12))
    if mode == "floor":
        return int(math.floor(x + 1e-12))
    raise ValueError("mode must be 'ceil' or 'floor'")


def estimate_chi_d(d, n_samples, rng, table=None):
    """Monte Carlo estimate of E[min of d unit exit times] with its SE."""
    table = table if table is not None else ExitTimeTable()
    mins = np.empty(n_samples)
    chunk = 1 << 18
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        mins[done:done + m] = table.sample(rng, (m, d)).min(axis=1)
        done += m
    est = float(mins.mean())
    se = float(mins.std(ddof=1) / math.sqrt(n_samples))
    return est, se
