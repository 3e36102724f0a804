"""Volterra and Riemann-Liouville machinery for fractional noise on the skeleton.

Two kernel families appear:

* the Volterra pair (K1, K2) representing fractional Brownian motion with
  Hurst H in (0, 1/2), used by the rough volatility dynamics;
* the Riemann-Liouville kernel sqrt(2H) (t-s)^(H-1/2) driving the
  fractional-noise controlled state, together with the pathwise maps
  psi_b / phi_{b,c} whose inverse underlies the increment density.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.special import betainc, beta as beta_fn, gamma as gamma_fn


def molchan_golosov_constant(hurst):
    """Standard normalization for the Volterra representation of fBm."""
    return math.sqrt(
        2.0 * hurst * gamma_fn(1.5 - hurst)
        / (gamma_fn(hurst + 0.5) * gamma_fn(2.0 - 2.0 * hurst))
    )


class VolterraKernels:
    """Kernels K1, K2 of the fBm Volterra representation, H in (0, 1/2).

    ``k2`` uses the closed incomplete-beta form; ``k2_quad`` is the
    adaptive-quadrature route kept as an independent cross-check.
    """

    def __init__(self, hurst, c_h=None):
        if not 0.0 < hurst < 0.5:
            raise ValueError("Volterra kernels require 0 < H < 1/2")
        self.hurst = hurst
        self.c_h = c_h if c_h is not None else molchan_golosov_constant(hurst)
        h = hurst
        self._beta_full = beta_fn(1.0 - 2.0 * h, h + 0.5)

    def k1(self, t, s):
        """K1(t, s) = c_H t^(H-1/2) s^(1/2-H) (t-s)^(H-1/2), 0 < s < t."""
        t = np.asarray(t, dtype=float)
        s = np.asarray(s, dtype=float)
        if np.any(s <= 0.0) or np.any(s >= t):
            raise ValueError("k1 requires 0 < s < t")
        h = self.hurst
        return self.c_h * t ** (h - 0.5) * s ** (0.5 - h) * (t - s) ** (h - 0.5)

    def k2(self, t, s):
        """K2(t, s) via the incomplete-beta closed form (vectorized)."""
        t = np.asarray(t, dtype=float)
        s = np.asarray(s, dtype=float)
        if np.any(s <= 0.0) or np.any(s > t):
            raise ValueError("k2 requires 0 < s <= t")
        h = self.hurst
        z = np.clip(s / t, 0.0, 1.0)
        tail = self._beta_full * (1.0 - betainc(1.0 - 2.0 * h, h + 0.5, z))
        return self.c_h * (0.5 - h) * s ** (h - 0.5) * tail

    def k2_quad(self, t, s, tol=1e-10):
        """K2(t, s) by adaptive quadrature with the singularity substituted away.

        The inner integral int_s^t u^(H-3/2) (u-s)^(H-1/2) du is mapped with
        v = u - s = w^(1/(H+1/2)) so the integrand is smooth at w = 0.
        """
        if not (0.0 < s < t):
            raise ValueError("k2_quad requires 0 < s < t")
        h = self.hurst
        p = 1.0 / (h + 0.5)
        w_max = (t - s) ** (1.0 / p)
        val, _ = quad(lambda w: p * (s + w**p) ** (h - 1.5), 0.0, w_max,
                      epsabs=tol, epsrel=tol, limit=400)
        return self.c_h * (0.5 - h) * s ** (0.5 - h) * val


def fbm_volterra(dts, das, kernels):
    """Discrete fBm values along one skeleton path via the Volterra kernels.

    Parameters
    ----------
    dts, das : arrays of shape (m,)
        Waiting times and signed increments of the driving coordinate.
    kernels : VolterraKernels

    Returns
    -------
    Array of shape (m + 1,) with the fBm value at each hitting time
    (entries 0 and 1 vanish by construction).
    """
    dts = np.asarray(dts, dtype=float)
    das = np.asarray(das, dtype=float)
    m = dts.size
    times = np.concatenate([[0.0], np.cumsum(dts)])
    out = np.zeros(m + 1)
    for n in range(2, m + 1):
        tn = times[n]
        j1 = np.arange(2, n + 1)              # K1 pairs (T_n, T_{j-1})
        j2 = np.arange(1, n)                  # K2 pairs (T_n, T_j)
        out[n] = (
            das[j1 - 1] @ kernels.k1(tn, times[j1 - 1])
            + das[j2 - 1] @ kernels.k2(tn, times[j2])
        )
    return out


def fbm_volterra_batch(dts, das, kernels):
    """Vectorized ``fbm_volterra`` for a batch of paths.

    ``dts``, ``das`` have shape (P, m); returns (P, m + 1).  Builds the
    full lower-triangular kernel matrices, so memory is O(P m^2); callers
    chunk over paths.
    """
    dts = np.asarray(dts, dtype=float)
    das = np.asarray(das, dtype=float)
    p_sz, m = dts.shape
    times = np.concatenate([np.zeros((p_sz, 1)), np.cumsum(dts, axis=1)], axis=1)
    h = kernels.hurst
    out = np.zeros((p_sz, m + 1))
    # for target n >= 2: K1 over j = 2..n (node T_{j-1}), K2 over
    # j = 1..n-1 (node T_j); both reduce to s-index 1..n-1
    for n in range(2, m + 1):
        t_here = times[:, n][:, None]
        s1 = times[:, 1:n]                     # T_1 .. T_{n-1}
        diff = np.maximum(t_here - s1, 1e-300)
        k1 = kernels.c_h * t_here ** (h - 0.5) * s1 ** (0.5 - h) * diff ** (h - 0.5)
        z = np.clip(s1 / t_here, 0.0, 1.0)
        k2 = (kernels.c_h * (0.5 - h) * s1 ** (h - 0.5)
              * kernels._beta_full * (1.0 - betainc(1.0 - 2.0 * h, h + 0.5, z)))
        out[:, n] = np.einsum("pj,pj->p", das[:, 1:n], k1) + \
                    np.einsum("pj,pj->p", das[:, 0:n - 1], k2)
    return out


class RlKernel:
    """Riemann-Liouville kernel sqrt(2H) (t-s)^(H-1/2), H != 1/2.

    Both regimes are supported; the controlled-state example uses
    H in (1/2, 1) where K(t, t) = 0.
    """

    def __init__(self, hurst):
        if hurst == 0.5 or not (0.0 < hurst < 1.0):
            raise ValueError("RL kernel requires H in (0,1), H != 1/2")
        self.hurst = hurst
        self._c = math.sqrt(2.0 * hurst)

    def k(self, t, s):
        diff = np.asarray(t, dtype=float) - np.asarray(s, dtype=float)
        if np.any(diff < 0.0):
            raise ValueError("RL kernel requires s <= t")
        return self._c * np.maximum(diff, 0.0) ** (self.hurst - 0.5)

    def dk_dt(self, t, s):
        diff = np.asarray(t, dtype=float) - np.asarray(s, dtype=float)
        return self._c * (self.hurst - 0.5) * diff ** (self.hurst - 1.5)


def rl_increment_past(kernel, dts, das, n, j_step):
    """Past contribution l_n(J) of the RL fBm increment at step n.

    l_n = sum_{i<=n-1} da_i [K(T_{n-1}, T_i) - K(T_{n-1} + J, T_i)] and
    l_1 = 0.  ``dts``/``das`` cover steps 1..n-1 at least.
    """
    if n <= 1:
        return 0.0
    dts = np.asarray(dts, dtype=float)
    das = np.asarray(das, dtype=float)
    times = np.concatenate([[0.0], np.cumsum(dts[: n - 1])])
    t_prev = times[-1]
    ti = times[1:n]
    return float(das[: n - 1] @ (kernel.k(t_prev, ti) - kernel.k(t_prev + j_step, ti)))


def discrete_fbm_rl(kernel, dts, das, n):
    """RL fBm value at step n from its telescoped increment form.

    Equals -sum_{i<=n-1} da_i K(T_n, T_i); computed by accumulating the
    per-step increments l_j so the code path matches the sampler's.
    """
    total = 0.0
    for j in range(1, n + 1):
        total += rl_increment_past(kernel, dts, das, j, dts[j - 1])
    return total


def psi_b(kernel, dts, das, u):
    """Pathwise fluctuation map psi_b(u) for a realized history.

    ``dts``/``das`` are the history's waiting times and increments
    (steps 1..j-1); u >= 0 is the candidate next waiting time.
    """
    dts = np.asarray(dts, dtype=float)
    das = np.asarray(das, dtype=float)
    if dts.size == 0:
        return np.zeros_like(np.asarray(u, dtype=float)) if np.ndim(u) else 0.0
    times = np.concatenate([[0.0], np.cumsum(dts)])
    t_prev = times[-1]
    ti = times[1:]
    u = np.asarray(u, dtype=float)
    kd = kernel.k(t_prev, ti) - kernel.k(t_prev + u[..., None], ti) if u.ndim \
        else kernel.k(t_prev, ti) - kernel.k(t_prev + u, ti)
    return kd @ das


def psi_prime(kernel, dts, das, u):
    """d/du psi_b(u) = -sum da_i dK/dt(T_{j-1} + u, T_i)."""
    dts = np.asarray(dts, dtype=float)
    das = np.asarray(das, dtype=float)
    if dts.size == 0:
        return np.zeros_like(np.asarray(u, dtype=float)) if np.ndim(u) else 0.0
    times = np.concatenate([[0.0], np.cumsum(dts)])
    t_prev = times[-1]
    ti = times[1:]
    u = np.asarray(u, dtype=float)
    dk = kernel.dk_dt(t_prev + (u[..., None] if u.ndim else u), ti)
    return -(dk @ das)


def phi_bc(kernel, dts, das, c, u):
    """phi_{b,c}(u) = c u + psi_b(u)."""
    return c * np.asarray(u, dtype=float) + psi_b(kernel, dts, das, u)


def phi_prime(kernel, dts, das, c, u):
    return c + psi_prime(kernel, dts, das, u)


def fluctuation_bound(kernel, epsilon, m, trunc_lo):
    """Uniform bound C1 on |psi'_b| over u >= trunc_lo, any history length <= m."""
    return (math.sqrt(2.0 * kernel.hurst) * abs(kernel.hurst - 0.5)
            * epsilon * m * trunc_lo ** (kernel.hurst - 1.5))


def invert_phi(kernel, dts, das, c, y, trunc_lo, trunc_hi, tol=1e-12):
    """Solve phi_{b,c}(u) = y on [trunc_lo, trunc_hi].

    Requires phi strictly monotone on the window (|c| above the validated
    separation level).  Returns None when y lies outside the range, which
    callers map to a vanishing density.
    """
    f_lo = phi_bc(kernel, dts, das, c, trunc_lo) - y
    f_hi = phi_bc(kernel, dts, das, c, trunc_hi) - y
    if f_lo == 0.0:
        return trunc_lo
    if f_hi == 0.0:
        return trunc_hi
    if f_lo * f_hi > 0.0:
        return None
    lo, hi = trunc_lo, trunc_hi
    flo = f_lo
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = phi_bc(kernel, dts, das, c, mid) - y
        if flo * fm <= 0.0:
            hi = mid
        else:
            lo, flo = mid, fm
        if hi - lo < 1e-9 * max(1.0, abs(mid)):
            break
    u = 0.5 * (lo + hi)
    for _ in range(30):
        f = phi_bc(kernel, dts, das, c, u) - y
        if abs(f) <= tol:
            break
        fp = phi_prime(kernel, dts, das, c, u)
        step = f / fp
        u_new = u - step
        if not (trunc_lo <= u_new <= trunc_hi):
            u_new = min(max(u_new, trunc_lo), trunc_hi)
        u = u_new
    return u


@dataclass
class FouParams:
    """Fractional Ornstein-Uhlenbeck parameters for the log-volatility."""

    kappa: float
    beta: float
    zeta: float
    z0: float
    clip_lo: float = -3e3
    clip_hi: float = 3e3

    def __post_init__(self):
        if self.beta < 0.0 or self.zeta < 0.0:
            raise ValueError("beta and zeta must be nonnegative")
        if not self.clip_lo < self.clip_hi:
            raise ValueError("clip_lo must be below clip_hi")


def fou_path(params, wh, times):
    """Discrete fractional OU log-vol and vol along hitting times.

    Parameters
    ----------
    params : FouParams
    wh : array (..., m+1)
        Fractional Brownian values at the hitting times, wh[..., 0] = 0.
    times : array (..., m+1)
        Hitting times, times[..., 0] = 0.

    Returns
    -------
    (z, v) arrays of shape (..., m+1); z is clipped, v = exp(z).

    The Riemann term uses the left endpoint on each interval, which is
    exact because the discrete fBm is constant between hitting times.
    """
    wh = np.asarray(wh, dtype=float)
    times = np.asarray(times, dtype=float)
    kap, bet, zet = params.kappa, params.beta, params.zeta
    dts = np.diff(times, axis=-1)
    riemann_terms = wh[..., :-1] * np.exp(bet * times[..., :-1]) * dts
    riemann = np.concatenate(
        [np.zeros(wh.shape[:-1] + (1,)), np.cumsum(riemann_terms, axis=-1)], axis=-1
    )
    z = kap + np.exp(-bet * times) * (params.z0 - kap) + zet * wh \
        - bet * zet * np.exp(-bet * times) * riemann
    z = np.clip(z, params.clip_lo, params.clip_hi)
    return z, np.exp(z)
