"""Constrained feedforward networks, residual nets, structured LQ heads,
and a decoupled-weight-decay adaptive-moment optimizer.

All architectures are plain numpy with handwritten backward passes; each
exposes ``params`` (a list of arrays the optimizer mutates in place),
``forward`` and ``backward``, and every gradient is exact, which the test
suite verifies by central differences.
"""

import json

import numpy as np


def lr_schedule(n, m):
    """Stage-dependent learning rate 1e-4 (1 - n/m) + 1e-6."""
    return 1e-4 * (1.0 - n / m) + 1e-6


def relu(z):
    return np.maximum(z, 0.0)


def softplus(z):
    return np.logaddexp(0.0, z)


def softplus_prime(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))


_ACTS = {
    "relu": (relu, lambda z: (z > 0.0).astype(float), 1.0),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2, 1.0),
}


class ShallowNet:
    """One-hidden-layer network with kernel and total-variation constraints.

    f(x) = out_map( c0 + sum_i c_i psi(<a_i, x> + b_i) ) with ||a_i|| <= eta
    and sum_i |c_i| <= delta, making f globally (delta * eta * ||psi||)-
    Lipschitz before the output map.  ``project`` restores the constraint
    set after an optimizer step.
    """

    def __init__(self, input_dim, n_neurons, eta, delta, activation="tanh",
                 out_map="identity", out_lo=-1.0, out_hi=1.0, rng=None,
                 zero_init=False):
        self.input_dim = input_dim
        self.n_neurons = n_neurons
        self.eta = float(eta)
        self.delta = float(delta)
        self.activation = activation
        self.out_map = out_map
        self.out_lo, self.out_hi = out_lo, out_hi
        rng = rng if rng is not None else np.random.default_rng(0)
        if zero_init:
            self.W = np.zeros((n_neurons, input_dim))
            self.b = np.zeros(n_neurons)
            self.c = np.zeros(n_neurons)
        else:
            scale = min(eta, 1.0) / np.sqrt(input_dim)
            self.W = rng.normal(0.0, scale, (n_neurons, input_dim))
            self.b = rng.normal(0.0, 0.1, n_neurons)
            self.c = rng.normal(0.0, min(delta, 1.0) / n_neurons, n_neurons)
        self.c0 = np.zeros(1)
        self.project()
        self._cache = None

    @property
    def params(self):
        return [self.W, self.b, self.c, self.c0]

    def lipschitz_bound(self):
        return self.delta * self.eta * _ACTS[self.activation][2]

    def _pre_out(self, x):
        z = x @ self.W.T + self.b
        h = _ACTS[self.activation][0](z)
        return z, h, h @ self.c + self.c0[0]

    def forward(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z, h, raw = self._pre_out(x)
        if self.out_map == "identity":
            out = raw
        elif self.out_map == "clip":
            out = np.clip(raw, self.out_lo, self.out_hi)
        elif self.out_map == "softplus":
            out = softplus(raw)
        else:
            raise ValueError("unknown output map %r" % self.out_map)
        self._cache = (x, z, h, raw)
        return out

    def _dout_draw(self, raw, dout):
        if self.out_map == "identity":
            return dout
        if self.out_map == "clip":
            return dout * ((raw > self.out_lo) & (raw < self.out_hi))
        return dout * softplus_prime(raw)

    def backward(self, dout):
        """Parameter gradients of sum(dout * f(x)) for the cached batch."""
        x, z, h, raw = self._cache
        draw = self._dout_draw(raw, np.asarray(dout, dtype=float))
        dc = h.T @ draw
        dc0 = np.array([draw.sum()])
        dh = np.outer(draw, self.c)
        dz = dh * _ACTS[self.activation][1](z)
        dW = dz.T @ x
        db = dz.sum(axis=0)
        return [dW, db, dc, dc0]

    def input_grad(self):
        """d f / d x for the cached batch, shape (M, input_dim)."""
        x, z, h, raw = self._cache
        draw = self._dout_draw(raw, np.ones(x.shape[0]))
        dz = np.outer(draw, self.c) * _ACTS[self.activation][1](z)
        return dz @ self.W

    def project(self):
        norms = np.linalg.norm(self.W, axis=1)
        over = norms > self.eta
        if np.any(over):
            self.W[over] *= (self.eta / norms[over])[:, None]
        total = np.abs(self.c).sum()
        if total > self.delta:
            self.c *= self.delta / total

    def to_config(self):
        return {
            "kind": "shallow", "input_dim": self.input_dim,
            "n_neurons": self.n_neurons, "eta": self.eta, "delta": self.delta,
            "activation": self.activation, "out_map": self.out_map,
            "out_lo": self.out_lo, "out_hi": self.out_hi,
        }

    @classmethod
    def from_config(cls, cfg):
        cfg = dict(cfg)
        cfg.pop("kind")
        return cls(rng=np.random.default_rng(0), **cfg)


class MLP:
    """Plain multilayer perceptron used for coefficient maps.

    ``widths`` is the full layer list, e.g. (1, 64, 64, 3).  The final
    layer is affine; hidden activations are tanh by default.
    """

    def __init__(self, widths, activation="tanh", rng=None, out_bias=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.widths = tuple(int(w) for w in widths)
        self.activation = activation
        self.Ws = []
        self.bs = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.Ws.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            self.bs.append(np.zeros(fan_out))
        if out_bias is not None:
            self.bs[-1] = np.asarray(out_bias, dtype=float).copy()
        self._cache = None

    @property
    def params(self):
        out = []
        for w, b in zip(self.Ws, self.bs):
            out.extend([w, b])
        return out

    def forward(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        act = _ACTS[self.activation][0]
        hs = [x]
        zs = []
        h = x
        for i, (w, b) in enumerate(zip(self.Ws, self.bs)):
            z = h @ w + b
            zs.append(z)
            h = act(z) if i < len(self.Ws) - 1 else z
            hs.append(h)
        self._cache = (hs, zs)
        return h

    def backward(self, dout):
        hs, zs = self._cache
        dact = _ACTS[self.activation][1]
        grads = [None] * (2 * len(self.Ws))
        delta = np.asarray(dout, dtype=float)
        for i in range(len(self.Ws) - 1, -1, -1):
            grads[2 * i] = hs[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.Ws[i].T) * dact(zs[i - 1])
        return grads

    def to_config(self):
        return {"kind": "mlp", "widths": list(self.widths),
                "activation": self.activation}

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg["widths"], activation=cfg["activation"],
                   rng=np.random.default_rng(0))


class _LayerNorm:
    def __init__(self, dim):
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + 1e-6)
        xhat = (x - mu) * inv
        cache = (xhat, inv)
        return self.gamma * xhat + self.beta, cache

    def backward(self, dout, cache):
        xhat, inv = cache
        dgamma = (dout * xhat).sum(axis=0)
        dbeta = dout.sum(axis=0)
        dxhat = dout * self.gamma
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta


class ResidualNet:
    """Skip-connected feedforward net: per-block norm, two affines, dropout.

    Dropout masks are drawn from a seeded generator in training mode and
    disabled in eval mode, so evaluation is deterministic.
    """

    def __init__(self, input_dim, out_dim, width=256, n_blocks=6, dropout=0.2,
                 activation="relu", rng=None, seed=0):
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.input_dim, self.out_dim = input_dim, out_dim
        self.width, self.n_blocks, self.dropout = width, n_blocks, dropout
        self.activation = activation
        self._drop_rng = np.random.default_rng(seed + 1)
        self.training = False

        def init(fan_in, fan_out):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-bound, bound, (fan_in, fan_out))

        self.W_in, self.b_in = init(input_dim, width), np.zeros(width)
        self.blocks = []
        for _ in range(n_blocks):
            self.blocks.append({
                "ln": _LayerNorm(width),
                "W1": init(width, width), "b1": np.zeros(width),
                "W2": init(width, width), "b2": np.zeros(width),
            })
        self.W_out, self.b_out = init(width, out_dim), np.zeros(out_dim)
        self._cache = None

    @property
    def params(self):
        out = [self.W_in, self.b_in]
        for blk in self.blocks:
            out.extend([blk["ln"].gamma, blk["ln"].beta, blk["W1"], blk["b1"],
                        blk["W2"], blk["b2"]])
        out.extend([self.W_out, self.b_out])
        return out

    def train(self):
        self.training = True

    def eval(self):
        self.training = False

    def forward(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        act = _ACTS[self.activation][0]
        h = x @ self.W_in + self.b_in
        caches = []
        for blk in self.blocks:
            normed, ln_cache = blk["ln"].forward(h)
            z1 = normed @ blk["W1"] + blk["b1"]
            a1 = act(z1)
            if self.training and self.dropout > 0.0:
                mask = (self._drop_rng.random(a1.shape) >= self.dropout) / (1.0 - self.dropout)
            else:
                mask = None
            a1d = a1 * mask if mask is not None else a1
            z2 = a1d @ blk["W2"] + blk["b2"]
            caches.append((h, normed, ln_cache, z1, a1, mask, a1d))
            h = h + z2
        out = h @ self.W_out + self.b_out
        self._cache = (x, caches, h)
        return out

    def backward(self, dout):
        x, caches, h_last = self._cache
        dact = _ACTS[self.activation][1]
        dout = np.atleast_2d(np.asarray(dout, dtype=float))
        dW_out = h_last.T @ dout
        db_out = dout.sum(axis=0)
        dh = dout @ self.W_out.T
        block_grads = []
        for blk, cache in zip(reversed(self.blocks), reversed(caches)):
            h_in, normed, ln_cache, z1, a1, mask, a1d = cache
            dz2 = dh  # residual: d h_out/d z2 = 1
            dW2 = a1d.T @ dz2
            db2 = dz2.sum(axis=0)
            da1d = dz2 @ blk["W2"].T
            da1 = da1d * mask if mask is not None else da1d
            dz1 = da1 * dact(z1)
            dW1 = normed.T @ dz1
            db1 = dz1.sum(axis=0)
            dnormed = dz1 @ blk["W1"].T
            dh_norm, dgamma, dbeta = blk["ln"].backward(dnormed, ln_cache)
            dh = dh + dh_norm  # skip path plus normalized path
            block_grads.append([dgamma, dbeta, dW1, db1, dW2, db2])
        dW_in = x.T @ dh
        db_in = dh.sum(axis=0)
        out = [dW_in, db_in]
        for g in reversed(block_grads):
            out.extend(g)
        out.extend([dW_out, db_out])
        return out

    def to_config(self):
        return {"kind": "residual", "input_dim": self.input_dim,
                "out_dim": self.out_dim, "width": self.width,
                "n_blocks": self.n_blocks, "dropout": self.dropout,
                "activation": self.activation}

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg["input_dim"], cfg["out_dim"], width=cfg["width"],
                   n_blocks=cfg["n_blocks"], dropout=cfg["dropout"],
                   activation=cfg["activation"])


class StructuredLqControl:
    """Affine-in-state control with net-produced coefficients.

    The realized map is a(x) = clip(alpha(feat) x + beta(feat)); ``feat``
    is the scalar stage feature (normalized time or spot) and the state
    passed to ``act`` is pre-scaled by the problem's slope unit.  Two
    internal parameterizations of the same family:

    * ``affine``:    net -> (alpha~, beta), raw = alpha~ x_s + beta
    * ``threshold``: net -> (alpha~, tau, abar),
                     raw = alpha~ (x_s - scale tau) + abar,
      which gives the optimizer direct leverage on the switching location
      when the natural slope unit is large.

    ``leak`` keeps a fraction of the gradient alive on saturated samples
    (their one-sided objective information would otherwise vanish); the
    forward clip is always exact.
    """

    def __init__(self, net, action_lo=-1.0, action_hi=1.0, leak=0.0,
                 mode="affine", scale=1.0, slope_bound=None, level_bound=None):
        self.net = net
        self.action_lo, self.action_hi = action_lo, action_hi
        self.leak = leak
        self.mode = mode
        self.scale = scale
        self.slope_bound = slope_bound
        self.level_bound = level_bound
        self._cache = None

    @property
    def params(self):
        return self.net.params

    def _squash(self, raw_coeffs):
        """Optionally tanh-bound the slope and level coefficients.

        Unbounded heads let the slope run away until the policy is a razor
        that gradient steps can rescale but never translate.
        """
        if self.slope_bound is None and self.level_bound is None:
            return raw_coeffs, None
        co = raw_coeffs.copy()
        jac = np.ones_like(raw_coeffs)
        if self.slope_bound is not None:
            t = np.tanh(raw_coeffs[:, 0] / self.slope_bound)
            co[:, 0] = self.slope_bound * t
            jac[:, 0] = 1.0 - t**2
        if self.level_bound is not None:
            t = np.tanh(raw_coeffs[:, 1] / self.level_bound)
            co[:, 1] = self.level_bound * t
            jac[:, 1] = 1.0 - t**2
        return co, jac

    def _raw(self, coeffs, x):
        if self.mode == "affine":
            return coeffs[:, 0] * x + coeffs[:, 1]
        return coeffs[:, 0] * (x - self.scale * coeffs[:, 1]) + coeffs[:, 2]

    def act(self, feat, x):
        raw_coeffs = self.net.forward(np.atleast_2d(feat))
        coeffs, jac = self._squash(raw_coeffs)
        raw = self._raw(coeffs, x)
        out = np.clip(raw, self.action_lo, self.action_hi)
        self._cache = (x, coeffs, raw, jac)
        return out

    def coefficients(self, feat):
        """Natural-unit (alpha, beta) of the realized affine map."""
        co, _ = self._squash(self.net.forward(np.atleast_2d(feat)))
        co = co[0]
        if self.mode == "affine":
            return float(co[0] * self.scale), float(co[1])
        return (float(co[0] * self.scale),
                float(co[2] - co[0] * self.scale * co[1]))

    def backward(self, dout):
        """Gradients of sum(dout * a) in the coefficient-net parameters.

        Saturated samples follow projected-gradient semantics: the
        gradient passes only when it points back into the action interval
        (a binding constraint contributes nothing), which is what keeps
        thresholds identifiable without letting the level run away.
        """
        x, coeffs, raw, jac = self._cache
        dout = np.asarray(dout, dtype=float)
        inside = (raw > self.action_lo) & (raw < self.action_hi)
        unbind = (((raw >= self.action_hi) & (dout > 0.0))
                  | ((raw <= self.action_lo) & (dout < 0.0)))
        live = np.where(inside | unbind, 1.0, self.leak)
        d = dout * live
        if self.mode == "affine":
            cols = (d * x, d)
        else:
            cols = (d * (x - self.scale * coeffs[:, 1]),
                    d * (-coeffs[:, 0] * self.scale),
                    d)
        dcoeffs = np.zeros_like(coeffs)
        if dcoeffs.shape[0] == 1:  # shared feature row
            for i, col in enumerate(cols):
                dcoeffs[0, i] = np.sum(col)
        else:
            for i, col in enumerate(cols):
                dcoeffs[:, i] = col
        if jac is not None:
            dcoeffs = dcoeffs * jac
        return self.net.backward(dcoeffs)


class StructuredLqValue:
    """Quadratic-in-state value with net-produced coefficients.

    V(x) = A(feat) x^2 + B(feat) x + C(feat); the quadratic coefficient can
    be reparameterized through softplus so V stays convex in x.
    """

    def __init__(self, net, nonneg_quad=False):
        self.net = net
        self.nonneg_quad = nonneg_quad
        self._cache = None

    @property
    def params(self):
        return self.net.params

    def coeffs(self, feat):
        raw = self.net.forward(np.atleast_2d(feat))
        a = softplus(raw[:, 0]) if self.nonneg_quad else raw[:, 0]
        return a, raw[:, 1], raw[:, 2], raw

    def value(self, feat, x):
        a, b, c, raw = self.coeffs(feat)
        self._cache = (x, raw, a)
        return a * x**2 + b * x + c

    def value_and_xgrad(self, feat, x):
        a, b, c, raw = self.coeffs(feat)
        self._cache = (x, raw, a)
        return a * x**2 + b * x + c, 2.0 * a * x + b

    def backward(self, dout):
        x, raw, a = self._cache
        d_a = dout * x**2
        if self.nonneg_quad:
            d_a = d_a * softplus_prime(raw[:, 0] if raw.shape[0] > 1 else raw[0, 0])
        draw = np.zeros_like(raw)
        if raw.shape[0] == 1:
            draw[0, 0] = np.sum(d_a)
            draw[0, 1] = np.sum(dout * x)
            draw[0, 2] = np.sum(dout)
        else:
            draw[:, 0] = d_a
            draw[:, 1] = dout * x
            draw[:, 2] = dout
        return self.net.backward(draw)


class AdamW:
    """Adaptive moments with decoupled weight decay and global-norm clipping."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-4, clip_norm=1.0):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        if self.clip_norm is not None:
            total = np.sqrt(sum(float(np.sum(g**2)) for g in grads))
            if total > self.clip_norm:
                scale = self.clip_norm / (total + 1e-12)
                grads = [g * scale for g in grads]
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g**2
            if self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def save_net(net, path, seed=None, extra=None):
    """Serialize a network as a binary blob with a JSON header."""
    header = {"version": 1, "config": net.to_config(), "seed": seed}
    if extra:
        header["extra"] = extra
    arrays = {"p%d" % i: p for i, p in enumerate(net.params)}
    np.savez(path, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
             **arrays)


def load_net(path):
    data = np.load(path if str(path).endswith(".npz") else str(path) + ".npz")
    header = json.loads(bytes(data["header"]).decode())
    cfg = header["config"]
    kinds = {"shallow": ShallowNet, "mlp": MLP, "residual": ResidualNet}
    net = kinds[cfg["kind"]].from_config(cfg)
    for i, p in enumerate(net.params):
        p[...] = data["p%d" % i]
    return net, header
