"""Rough-volatility mean-variance hedging experiments on the skeleton.

The asset follows the embedded rough stochastic volatility dynamics; the
hedge is trained backward with off-model wealth exploration (cone-sampled
position/increment proxies) and evaluated on fresh model paths.  Reports
are P&L statistics of an at-the-money put.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dp_engine import loss_stats
from .fractional import FouParams, VolterraKernels, fbm_volterra_batch, fou_path
from .is_weights import ConePushforward, UniformRef
from .nets import (MLP, AdamW, StructuredLqControl, StructuredLqValue,
                   lr_schedule, softplus_prime)
from .skeleton import ExitTimeTable, SkeletonConfig, TruncatedExitLaw, num_steps


@dataclass
class MvhConfig:
    """Rough-volatility hedging setup (complete-market short-maturity put)."""

    maturity: float = 1.0 / 12.0
    strike: float = 100.0
    mu_drift: float = 0.08
    beta: float = 3.0
    hurst: float = 0.1
    s0: float = 100.0
    zeta: float = 1.5
    z0: float = float(np.log(0.2))
    rho: float = 1.0
    vol_target: float = 0.2
    r_train: float = 0.5
    n_train: int = 4096
    n_eval: int = 4000
    n_pilot: int = 512
    n_calib: int = 4096
    iters_control: int = 120
    iters_value: int = 40
    warmup_iters: int = 1500   # terminal-coefficient pre-fit of the value net
    first_stage_boost: int = 8  # extra control budget at the first trained stage
    hidden: int = 64
    action_lo: float = -1.0
    action_hi: float = 1.0
    steps_mode: str = "ceil"
    seed: int = 2024
    feat_clip: float = 5.0          # moneyness input clip (std moves)
    trunc_lo_factor: float = 1e-3   # window in units of epsilon^2
    trunc_hi_factor: float = 30.0
    clip_z: tuple = (-3e3, 3e3)

    def skeleton(self, k):
        eps = 2.0 ** (-k)
        return SkeletonConfig(epsilon=eps, trunc_lo=self.trunc_lo_factor * eps**2,
                              trunc_hi=self.trunc_hi_factor * eps**2, dim=1)

    def n_steps(self, k):
        return num_steps(2.0 ** (-k), self.maturity, 1.0, mode=self.steps_mode)


def rough_noise_paths(cfg, k, n, seed, table=None, kappa=None):
    """Skeleton noise plus the induced volatility path (complete market).

    Returns dict with dts/das (n, m), times/wh/v (n, m+1).  The single
    driving coordinate feeds both the asset and the fractional OU factor
    when |rho| = 1.
    """
    skel = cfg.skeleton(k)
    m = cfg.n_steps(k)
    law = TruncatedExitLaw(skel, table=table)
    rng = np.random.default_rng(seed)
    dts = law.sample(rng, n * m).reshape(n, m)
    das = skel.epsilon * (2.0 * (rng.random((n, m)) < 0.5) - 1.0)
    times = np.concatenate([np.zeros((n, 1)), np.cumsum(dts, axis=1)], axis=1)
    kernels = VolterraKernels(cfg.hurst)
    sign = 1.0 if cfg.rho >= 0 else -1.0
    wh = np.empty((n, m + 1))
    chunk = max(1, int(4e6 / (m * m + 1)))
    for s in range(0, n, chunk):
        sl = slice(s, min(s + chunk, n))
        wh[sl] = fbm_volterra_batch(dts[sl], sign * das[sl], kernels)
    fou = FouParams(kappa=kappa if kappa is not None else 0.0, beta=cfg.beta,
                    zeta=cfg.zeta, z0=cfg.z0, clip_lo=cfg.clip_z[0],
                    clip_hi=cfg.clip_z[1])
    _, v = fou_path(fou, wh, times)
    return {"dts": dts, "das": das, "times": times, "wh": wh, "v": v, "m": m,
            "skel": skel}


def asset_paths(cfg, noise, mu_drift=None):
    """Embedded asset recursion S_{n+1} = S_n (1 + mu dt + theta(V_n) da)."""
    mu = cfg.mu_drift if mu_drift is None else mu_drift
    dts, das, v = noise["dts"], noise["das"], noise["v"]
    n, m = dts.shape
    s = np.empty((n, m + 1))
    s[:, 0] = cfg.s0
    for j in range(m):
        ds = mu * s[:, j] * dts[:, j] + s[:, j] * v[:, j] * das[:, j]
        s[:, j + 1] = s[:, j] + ds
    return s


def calibrate_kappa(cfg, k, seed=None, table=None, n_paths=None):
    """Long-run mean of log-vol targeting E[V_T] = vol_target.

    sigma_T^2 is the Monte Carlo variance of the fractional OU noise part
    at maturity; the affine formula then pins the mean of Z_T.
    """
    seed = cfg.seed + 101 if seed is None else seed
    n_paths = cfg.n_calib if n_paths is None else n_paths
    noise = rough_noise_paths(cfg, k, n_paths, seed, table=table, kappa=0.0)
    wh, times, dts = noise["wh"], noise["times"], noise["dts"]
    bet = cfg.beta
    # noise part of Z_T: zeta * (W^H_T - beta e^{-beta T} int W^H e^{beta s} ds)
    integ = np.sum(wh[:, :-1] * np.exp(bet * times[:, :-1]) * dts, axis=1)
    z_noise = cfg.zeta * (wh[:, -1] - bet * np.exp(-bet * times[:, -1]) * integ)
    sigma_t2 = float(np.var(z_noise, ddof=1))
    se = sigma_t2 * np.sqrt(2.0 / (n_paths - 1))
    t = cfg.maturity
    kappa = (np.log(cfg.vol_target) - 0.5 * sigma_t2
             - np.exp(-bet * t) * cfg.z0) / (1.0 - np.exp(-bet * t))
    return float(kappa), sigma_t2, float(se)


def calibrate_ds_max(cfg, k, kappa, seed=None, table=None):
    """Pilot-run exploration bound: 1.10 x the largest observed |dS|."""
    seed = cfg.seed + 202 if seed is None else seed
    noise = rough_noise_paths(cfg, k, cfg.n_pilot, seed, table=table, kappa=kappa)
    s = asset_paths(cfg, noise)
    ds = np.diff(s, axis=1)
    return 1.10 * float(np.max(np.abs(ds)))


def offmodel_reference(r_train, ds_max):
    """Exploration law on the wealth cone: (dS proxy, a dS proxy) pairs."""
    return ConePushforward(UniformRef(-r_train, r_train),
                           UniformRef(-ds_max, ds_max))


def price_put_mc(cfg, k, kappa, n_paths=None, seed=None, table=None):
    """Put price under the drift-removed skeleton dynamics, with its SE."""
    n_paths = cfg.n_eval if n_paths is None else n_paths
    seed = cfg.seed + 303 if seed is None else seed
    noise = rough_noise_paths(cfg, k, n_paths, seed, table=table, kappa=kappa)
    s = asset_paths(cfg, noise, mu_drift=0.0)
    payoff = np.maximum(cfg.strike - s[:, -1], 0.0)
    return float(payoff.mean()), float(payoff.std(ddof=1) / np.sqrt(n_paths))


@dataclass
class MvhArtifacts:
    """Per-stage hedging nets: u = clip(a(s) + b(s) y~), V quadratic in y~."""

    control_params: list
    value_params: list
    clip_bound: float
    feat_scale: float
    cfg: MvhConfig
    c0: float = 0.0
    y_scale: float = 1.0


def _mvh_nets(cfg, seed):
    ctrl_net = MLP((1, cfg.hidden, cfg.hidden, 2),
                   rng=np.random.default_rng(seed))
    # softplus bias so the quadratic wealth coefficient starts near 1
    val_net = MLP((1, cfg.hidden, cfg.hidden, 3),
                  rng=np.random.default_rng(seed + 1),
                  out_bias=(float(np.log(np.e - 1.0)), 0.0, 0.0))
    ctrl = StructuredLqControl(ctrl_net, cfg.action_lo, cfg.action_hi)
    val = StructuredLqValue(val_net, nonneg_quad=True)
    return ctrl, val


def mvh_train(cfg, k, s_paths, proxies, c0, dts=None, vols=None, seed=None):
    """Backward hedging recursion with off-model wealth exploration.

    ``s_paths``: model asset paths (M, m+1); ``proxies``: cone draws
    (M, m, 2) whose second coordinate a dS accumulates into the wealth
    cloud.  Controls and values are per-stage snapshots of shared
    coefficient nets trained backward.

    The wealth input and regression targets are standardized (the cloud
    spans tens of currency units while the optimizer moves coordinates at
    the learning-rate scale); all reported quantities stay natural.
    """
    seed = cfg.seed if seed is None else seed
    n, m = proxies.shape[0], proxies.shape[1]
    # moneyness in units of one terminal standard move; the clip keeps
    # vol-spike outliers from stretching the input range (flat
    # extrapolation is the right behavior for a put far from the strike)
    feat_scale = cfg.s0 * cfg.vol_target * np.sqrt(cfg.maturity)
    s_feat = np.clip((s_paths - cfg.s0) / feat_scale, -cfg.feat_clip, cfg.feat_clip)
    # wealth exploration cloud: cumulative cone increments
    y_cloud = np.concatenate(
        [np.full((n, 1), c0), c0 + np.cumsum(proxies[:, :, 1], axis=1)], axis=1)
    ds = np.diff(s_paths, axis=1)
    payoff = np.maximum(cfg.strike - s_paths[:, -1], 0.0)
    y_scale = max(float(np.std(y_cloud[:, -1])), 1.0)

    terminal = (y_cloud[:, -1] - payoff) ** 2
    clip_bound = max(float(np.quantile(np.abs(terminal), 0.999)), 1e-12)

    ctrl, val = _mvh_nets(cfg, seed + 11)
    val_next = _mvh_nets(cfg, seed + 11)[1]
    opt_c = AdamW(ctrl.params, weight_decay=1e-4, clip_norm=1.0)
    opt_v = AdamW(val.params, weight_decay=1e-4, clip_norm=1.0)

    control_params = [None] * m
    value_params = [None] * m
    ds_std = ds / y_scale
    yt_cloud = (y_cloud - c0) / y_scale

    # The wealth proxy is independent of the asset path and the value is
    # quadratic in wealth, so the proxy coordinate integrates out in
    # closed form: each path contributes exact coefficient targets
    # (A', B', C' pulled through y' = alpha + kappa y~), and the hedge
    # gradient is the marginal d/du of the same expression.  The cloud
    # enters through its centering c0 and per-stage second moment only,
    # which removes the exploration-noise channel from the recursion.
    def next_coeffs(j_next, sf_next_col):
        if j_next == m:
            pay = np.maximum(cfg.strike - (sf_next_col * feat_scale + cfg.s0), 0.0)
            t1 = (c0 - pay) / y_scale
            return np.ones_like(pay), 2.0 * t1, t1**2
        for p_, src in zip(val_next.params, value_params[j_next]):
            p_[...] = src
        a2, b1, c_0, _ = val_next.coeffs(sf_next_col[:, None])
        return a2, b1, c_0

    zero = np.zeros(n)
    # pre-fit the value head on the exact terminal coefficients so the
    # first trained stages start from a faithful continuation (the
    # backward recursion never recovers from a cold-start transient)
    t2w, t1w, t0w = next_coeffs(m, s_feat[:, m])
    sf_m = s_feat[:, m]
    for _ in range(cfg.warmup_iters):
        a2, b1, c_0, raw_v = val.coeffs(sf_m[:, None])
        draw = np.zeros_like(raw_v)
        draw[:, 0] = 2.0 * (a2 - t2w) * softplus_prime(raw_v[:, 0]) / n
        draw[:, 1] = 2.0 * (b1 - t1w) / n
        draw[:, 2] = 2.0 * (c_0 - t0w) / n
        opt_v.step(val.params, val.net.backward(draw), lr=1e-4)

    # the +/- epsilon branch of each increment averages out exactly given
    # (S, V, dt): both branches are evaluated and mixed 50/50, leaving
    # only the path-state sampling noise in the stage gradients
    if dts is not None and vols is not None:
        eps = cfg.skeleton(k).epsilon
        drift = cfg.mu_drift * s_paths[:, :-1] * dts
        swing = s_paths[:, :-1] * vols[:, :-1] * eps
        ds_branch = [(drift + sgn * swing) / y_scale for sgn in (1.0, -1.0)]
        sf_branch = [np.clip((s_paths[:, :-1] + b * y_scale - cfg.s0) / feat_scale,
                             -cfg.feat_clip, cfg.feat_clip) for b in ds_branch]
    else:
        ds_branch = [ds_std, ds_std]
        sf_branch = [s_feat[:, 1:], s_feat[:, 1:]]

    for j in range(m - 1, -1, -1):
        lr = float(np.clip(lr_schedule(j, m), 5e-5, 1e-4))
        sf_j = s_feat[:, j]
        sig2 = float(np.var(yt_cloud[:, j]))
        branches = []
        for ds_b, sf_b in zip(ds_branch, sf_branch):
            a2n, b1n, c0n = next_coeffs(j + 1, sf_b[:, j])
            branches.append((ds_b[:, j], a2n, b1n, c0n))
        iters_c = cfg.iters_control * (cfg.first_stage_boost if j == m - 1 else 1)
        for _ in range(iters_c):
            u0 = ctrl.act(sf_j[:, None], zero)
            co = ctrl._cache[1]
            raw = ctrl._cache[2]
            b_co = co[:, 0]
            d_a = 0.0
            d_b = 0.0
            for ds_j, a2n, b1n, _ in branches:
                alpha = u0 * ds_j
                kappa = 1.0 + b_co * ds_j
                d_a = d_a + 0.5 * (2.0 * a2n * alpha + b1n) * ds_j
                d_b = d_b + 0.5 * 2.0 * a2n * kappa * ds_j * sig2
            inside = (raw > cfg.action_lo) & (raw < cfg.action_hi)
            unbind = (((raw >= cfg.action_hi) & (d_a > 0))
                      | ((raw <= cfg.action_lo) & (d_a < 0)))
            live = (inside | unbind).astype(float)
            draw = np.stack([d_b * live, d_a * live], axis=1) / n
            grads = ctrl.net.backward(draw)
            opt_c.step(ctrl.params, grads, lr=lr)
        control_params[j] = [p_.copy() for p_ in ctrl.params]
        u0 = ctrl.act(sf_j[:, None], zero)
        b_co = ctrl._cache[1][:, 0]
        t2 = 0.0
        t1 = 0.0
        t0 = 0.0
        for ds_j, a2n, b1n, c0n in branches:
            alpha = u0 * ds_j
            kappa = 1.0 + b_co * ds_j
            t2 = t2 + 0.5 * a2n * kappa**2
            t1 = t1 + 0.5 * (2.0 * a2n * kappa * alpha + b1n * kappa)
            t0 = t0 + 0.5 * (a2n * alpha**2 + b1n * alpha + c0n)
        for _ in range(cfg.iters_value):
            a2, b1, c_0, raw_v = val.coeffs(sf_j[:, None])
            draw = np.zeros_like(raw_v)
            draw[:, 0] = 2.0 * (a2 - t2) * softplus_prime(raw_v[:, 0]) / n
            draw[:, 1] = 2.0 * (b1 - t1) / n
            draw[:, 2] = 2.0 * (c_0 - t0) / n
            grads = val.net.backward(draw)
            opt_v.step(val.params, grads, lr=lr)
        value_params[j] = [p_.copy() for p_ in val.params]

    return MvhArtifacts(control_params=control_params,
                        value_params=value_params, clip_bound=clip_bound,
                        feat_scale=feat_scale, cfg=cfg, c0=c0, y_scale=y_scale)


def mvh_evaluate(arts, cfg, s_paths, c0, zero_control=False):
    """Propagate the hedge along fresh model paths; P&L statistics."""
    n, mp1 = s_paths.shape
    m = mp1 - 1
    ds = np.diff(s_paths, axis=1)
    s_feat = np.clip((s_paths - cfg.s0) / arts.feat_scale,
                     -arts.cfg.feat_clip, arts.cfg.feat_clip)
    ctrl, _ = _mvh_nets(cfg, 0)
    y = np.full(n, c0)
    for j in range(m):
        if zero_control:
            u = np.zeros(n)
        else:
            for p, src in zip(ctrl.params, arts.control_params[j]):
                p[...] = src
            u = ctrl.act(s_feat[:, j][:, None], (y - arts.c0) / arts.y_scale)
        y = y + u * ds[:, j]
    payoff = np.maximum(cfg.strike - s_paths[:, -1], 0.0)
    return loss_stats(y - payoff)


def run_mvh(cfg, k, table=None, kappa=None, progress=None):
    """Full hedging experiment at one refinement level; returns the report."""
    t0 = time.perf_counter()
    table = table if table is not None else ExitTimeTable()
    if kappa is None:
        kappa, sigma_t2, _ = calibrate_kappa(cfg, k, table=table)
    ds_max = calibrate_ds_max(cfg, k, kappa, table=table)
    m = cfg.n_steps(k)
    if progress:
        progress("k=%d m=%d kappa=%.4f ds_max=%.3f" % (k, m, kappa, ds_max))
    reference = offmodel_reference(cfg.r_train, ds_max)
    rng = np.random.default_rng(cfg.seed + 404)
    x1, x2 = reference.sample(rng, cfg.n_train * m)
    proxies = np.stack([x1, x2], axis=-1).reshape(cfg.n_train, m, 2)

    noise_tr = rough_noise_paths(cfg, k, cfg.n_train, cfg.seed + 505,
                                 table=table, kappa=kappa)
    s_train = asset_paths(cfg, noise_tr)
    c0, c0_se = price_put_mc(cfg, k, kappa, table=table)
    arts = mvh_train(cfg, k, s_train, proxies, c0,
                     dts=noise_tr["dts"], vols=noise_tr["v"])

    noise_ev = rough_noise_paths(cfg, k, cfg.n_eval, cfg.seed + 606,
                                 table=table, kappa=kappa)
    s_eval = asset_paths(cfg, noise_ev)
    hedged = mvh_evaluate(arts, cfg, s_eval, c0)
    unhedged = mvh_evaluate(arts, cfg, s_eval, c0, zero_control=True)
    return {
        "k": k, "m": m, "r_train": cfg.r_train,
        "kappa": kappa, "ds_max": ds_max, "price": c0, "price_se": c0_se,
        "mean": hedged["mean"], "var": hedged["var"],
        "q5": hedged["q5"], "q1": hedged["q1"], "n_eval": hedged["n"],
        "unhedged_var": unhedged["var"], "unhedged_mean": unhedged["mean"],
        "wall_time": time.perf_counter() - t0,
        "losses": hedged["losses"],
    }


def pnl_sweep(cfg, k_list, table=None, progress=None):
    """Refinement sweep; returns reports plus the log-variance fit slope."""
    table = table if table is not None else ExitTimeTable()
    reports = [run_mvh(cfg, k, table=table, progress=progress) for k in k_list]
    ks = np.array([r["k"] for r in reports], dtype=float)
    log_var = np.log([r["var"] for r in reports])
    slope = float(np.polyfit(ks, log_var, 1)[0]) if len(ks) > 1 else 0.0
    return reports, slope


def rtrain_sweep(cfg, r_list, k, table=None, progress=None):
    """Exploration-radius sweep at fixed refinement; flags the best row."""
    table = table if table is not None else ExitTimeTable()
    reports = []
    for r in r_list:
        cfg_r = replace(cfg, r_train=r)
        reports.append(run_mvh(cfg_r, k, table=table, progress=progress))
    best = int(np.argmin([r["var"] for r in reports]))
    for i, rep in enumerate(reports):
        rep["best"] = (i == best)
    return reports
