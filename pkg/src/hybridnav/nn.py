"""Minimal neural-network substrate: dense / noisy-dense / conv2d layers,
reverse-mode gradients, Adam, checkpoints and a finite-difference checker.

All arithmetic is float64 so numerical oracles can be compared tightly.
Layers own their parameters, gradient buffers and optimizer moments under
matching keys. Containers (`Sequential`, `DuelingNet`, `ConcatNet`) expose a
uniform forward/backward/flat-layer-list protocol so the training step,
checkpointing and the gradient checker work on any of them.

Thread contract: a network is owned by one trainer at a time; inference on a
frozen network is safe from concurrent threads because forward caches are the
only mutable state and frozen snapshots are never back-propagated.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ConfigError, TrainingError

DEFAULT_LEAKY_SLOPE = 0.01


def leaky_relu(x, alpha: float = DEFAULT_LEAKY_SLOPE):
    """x for x >= 0, alpha * x below. alpha=0 gives the plain ReLU."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x >= 0.0, x, alpha * x)
    return out if out.ndim else float(out)


def _activate(pre, activation, alpha):
    if activation == "none":
        return pre
    if activation == "leaky-relu":
        return np.where(pre >= 0.0, pre, alpha * pre)
    raise ConfigError(f"unknown activation {activation!r}")


def _activation_grad(pre, activation, alpha):
    if activation == "none":
        return 1.0
    return np.where(pre >= 0.0, 1.0, alpha)


def _fan_in_uniform(rng, fan_in, shape):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _noise_transform(eps):
    return np.sign(eps) * np.sqrt(np.abs(eps))


class Layer:
    """Base class holding parameters plus mirrored gradient/moment buffers."""

    kind = "base"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.moment1: dict[str, np.ndarray] = {}
        self.moment2: dict[str, np.ndarray] = {}

    def _register(self, name: str, value: np.ndarray):
        arr = np.ascontiguousarray(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.moment1[name] = np.zeros_like(arr)
        self.moment2[name] = np.zeros_like(arr)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, x, noise_key=None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def spec(self) -> dict:
        raise NotImplementedError


class Dense(Layer):
    """Affine layer y = W x + b; weight rows are output units."""

    kind = "dense"

    def __init__(self, in_dim, out_dim, activation="leaky-relu",
                 alpha=DEFAULT_LEAKY_SLOPE, use_bias=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.activation = activation
        self.alpha = float(alpha)
        self.use_bias = bool(use_bias)
        self._register("W", _fan_in_uniform(rng, in_dim, (out_dim, in_dim)))
        if use_bias:
            self._register("b", np.zeros(out_dim))
        self._x = None
        self._pre = None

    def _effective(self, noise_key):
        b = self.params["b"] if self.use_bias else 0.0
        return self.params["W"], b

    def forward(self, x, noise_key=None):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.in_dim:
            raise ConfigError(f"dense input length {x.shape[1]} != {self.in_dim}")
        W, b = self._effective(noise_key)
        pre = x @ W.T + b
        self._x, self._pre = x, pre
        out = _activate(pre, self.activation, self.alpha)
        return out[0] if squeeze else out

    def backward(self, dout):
        dout = np.asarray(dout, dtype=np.float64)
        if dout.ndim == 1:
            dout = dout[None, :]
        dpre = dout * _activation_grad(self._pre, self.activation, self.alpha)
        self._accumulate(dpre)
        dx = dpre @ self._dx_weight()
        return dx

    def _dx_weight(self):
        return self.params["W"]

    def _accumulate(self, dpre):
        self.grads["W"] += dpre.T @ self._x
        if self.use_bias:
            self.grads["b"] += dpre.sum(axis=0)

    def spec(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim,
                "activation": self.activation, "alpha": self.alpha,
                "use_bias": self.use_bias}


class NoisyDense(Dense):
    """Dense layer with learned factorized-Gaussian parameter perturbations.

    A noise key seeds the per-forward perturbation; without one the layer is
    exactly the mean affine map (evaluation mode, noise magnitude zero).
    """

    kind = "noisy-dense"

    def __init__(self, in_dim, out_dim, activation="none",
                 alpha=DEFAULT_LEAKY_SLOPE, sigma0=0.5, rng=None):
        super().__init__(in_dim, out_dim, activation=activation, alpha=alpha,
                         use_bias=True, rng=rng)
        self.sigma0 = float(sigma0)
        scale = sigma0 / np.sqrt(in_dim)
        self._register("W_sigma", np.full((out_dim, in_dim), scale))
        self._register("b_sigma", np.full(out_dim, scale))
        self._eps_in = np.zeros(in_dim)
        self._eps_out = np.zeros(out_dim)

    def _effective(self, noise_key):
        if noise_key is None:
            self._eps_in = np.zeros(self.in_dim)
            self._eps_out = np.zeros(self.out_dim)
        else:
            rng = np.random.default_rng(noise_key)
            self._eps_in = _noise_transform(rng.standard_normal(self.in_dim))
            self._eps_out = _noise_transform(rng.standard_normal(self.out_dim))
        W = self.params["W"] + self.params["W_sigma"] * np.outer(self._eps_out, self._eps_in)
        b = self.params["b"] + self.params["b_sigma"] * self._eps_out
        self._W_eff = W
        return W, b

    def _dx_weight(self):
        return self._W_eff

    def _accumulate(self, dpre):
        dW = dpre.T @ self._x
        db = dpre.sum(axis=0)
        self.grads["W"] += dW
        self.grads["b"] += db
        self.grads["W_sigma"] += dW * np.outer(self._eps_out, self._eps_in)
        self.grads["b_sigma"] += db * self._eps_out

    def spec(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim,
                "activation": self.activation, "alpha": self.alpha,
                "sigma0": self.sigma0}


def _same_pad(n, k, s):
    """Output size and (before, after) zero padding for ceil(n/s) outputs."""
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return out, total // 2, total - total // 2


class Conv2D(Layer):
    """2D cross-correlation with "same" zero padding; stride s maps extent n
    to ceil(n/s). Weights are (k, k, c_in, c_out); input is HWC or NHWC."""

    kind = "conv2d"

    def __init__(self, in_ch, out_ch, kernel, stride=1, activation="leaky-relu",
                 alpha=DEFAULT_LEAKY_SLOPE, rng=None):
        super().__init__()
        if stride < 1:
            raise ConfigError("stride must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch = int(in_ch)
        self.out_ch = int(out_ch)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.activation = activation
        self.alpha = float(alpha)
        fan_in = kernel * kernel * in_ch
        self._register("W", _fan_in_uniform(rng, fan_in, (kernel, kernel, in_ch, out_ch)))
        self._register("b", np.zeros(out_ch))
        self.skip_input_grad = False   # set on a network's first layer to skip dX
        self._xp = None
        self._cols = None
        self._pre = None
        self._geom = None

    def _columns(self, xp, ho, wo):
        k, s = self.kernel, self.stride
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
        win = win[:, ::s, ::s]  # (N, ho, wo, C, k, k)
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
        return cols.reshape(-1, k * k * self.in_ch)

    def forward(self, x, noise_key=None):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        n, h, w, c = x.shape
        if c != self.in_ch:
            raise ConfigError(f"conv input channels {c} != {self.in_ch}")
        k, s = self.kernel, self.stride
        ho, ph0, ph1 = _same_pad(h, k, s)
        wo, pw0, pw1 = _same_pad(w, k, s)
        xp = np.pad(x, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
        cols = self._columns(xp, ho, wo)
        wmat = self.params["W"].reshape(-1, self.out_ch)
        pre = (cols @ wmat + self.params["b"]).reshape(n, ho, wo, self.out_ch)
        self._xp = xp
        self._cols = cols
        self._pre = pre
        self._geom = (n, h, w, ho, wo, ph0, pw0)
        out = _activate(pre, self.activation, self.alpha)
        return out[0] if squeeze else out

    def backward(self, dout):
        dout = np.asarray(dout, dtype=np.float64)
        n, h, w, ho, wo, ph0, pw0 = self._geom
        if dout.ndim == 3:
            dout = dout[None]
        dpre = dout * _activation_grad(self._pre, self.activation, self.alpha)
        flat = dpre.reshape(-1, self.out_ch)
        cols = self._cols
        self._cols = None  # release the big buffer after this step
        wmat = self.params["W"].reshape(-1, self.out_ch)
        self.grads["W"] += (cols.T @ flat).reshape(self.params["W"].shape)
        self.grads["b"] += flat.sum(axis=0)
        if self.skip_input_grad:
            return None
        dcols = (flat @ wmat.T).reshape(n, ho, wo, self.kernel, self.kernel, self.in_ch)
        dxp = np.zeros_like(self._xp)
        s = self.stride
        for i in range(self.kernel):
            for j in range(self.kernel):
                dxp[:, i:i + s * ho:s, j:j + s * wo:s, :] += dcols[:, :, :, i, j, :]
        return dxp[:, ph0:ph0 + h, pw0:pw0 + w, :]

    def spec(self):
        return {"kind": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch,
                "kernel": self.kernel, "stride": self.stride,
                "activation": self.activation, "alpha": self.alpha}


def _layer_from_spec(spec, rng):
    kind = spec["kind"]
    args = {k: v for k, v in spec.items() if k != "kind"}
    if kind == "dense":
        return Dense(rng=rng, **args)
    if kind == "noisy-dense":
        return NoisyDense(rng=rng, **args)
    if kind == "conv2d":
        return Conv2D(rng=rng, **args)
    raise ConfigError(f"unknown layer kind {kind!r}")


def _sub_key(noise_key, index):
    if noise_key is None:
        return None
    if isinstance(noise_key, (int, np.integer)):
        return [int(noise_key), index]
    return list(noise_key) + [index]


class Sequential:
    """Plain layer stack."""

    arch = "sequential"

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, noise_key=None):
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, _sub_key(noise_key, i))
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def flat_layers(self):
        return list(self.layers)

    def spec(self):
        return {"arch": self.arch, "layers": [l.spec() for l in self.layers]}

    @classmethod
    def from_spec(cls, spec, rng):
        return cls([_layer_from_spec(s, rng) for s in spec["layers"]])


class DuelingNet:
    """Trunk feeding value and advantage streams, recombined as
    Q = V + A - mean(A)."""

    arch = "dueling"

    def __init__(self, trunk: Sequential, value: Sequential, advantage: Sequential):
        self.trunk = trunk
        self.value = value
        self.advantage = advantage

    def forward(self, obs, noise_key=None):
        obs = np.asarray(obs, dtype=np.float64)
        squeeze = obs.ndim == 1
        if squeeze:
            obs = obs[None, :]
        t = self.trunk.forward(obs, _sub_key(noise_key, 0))
        v = self.value.forward(t, _sub_key(noise_key, 1))
        a = self.advantage.forward(t, _sub_key(noise_key, 2))
        q = v + a - a.mean(axis=1, keepdims=True)
        return q[0] if squeeze else q

    def backward(self, dq):
        dq = np.asarray(dq, dtype=np.float64)
        if dq.ndim == 1:
            dq = dq[None, :]
        da = dq - dq.mean(axis=1, keepdims=True)
        dv = dq.sum(axis=1, keepdims=True)
        dt = self.value.backward(dv) + self.advantage.backward(da)
        return self.trunk.backward(dt)

    def flat_layers(self):
        return self.trunk.flat_layers() + self.value.flat_layers() + self.advantage.flat_layers()

    def spec(self):
        return {"arch": self.arch, "trunk": self.trunk.spec(),
                "value": self.value.spec(), "advantage": self.advantage.spec()}

    @classmethod
    def from_spec(cls, spec, rng):
        return cls(Sequential.from_spec(spec["trunk"], rng),
                   Sequential.from_spec(spec["value"], rng),
                   Sequential.from_spec(spec["advantage"], rng))


class ConcatNet:
    """Head MLP whose output is concatenated with a side input, then a tail
    MLP. Inputs are (main, side) pairs; gradients to the side input are
    discarded (it is a constant encoding)."""

    arch = "concat"

    def __init__(self, head: Sequential, tail: Sequential):
        self.head = head
        self.tail = tail

    def forward(self, inputs, noise_key=None):
        main, side = inputs
        main = np.asarray(main, dtype=np.float64)
        side = np.asarray(side, dtype=np.float64)
        squeeze = main.ndim == 1
        if squeeze:
            main, side = main[None, :], side[None, :]
        h = self.head.forward(main, _sub_key(noise_key, 0))
        self._split = h.shape[1]
        joined = np.concatenate([h, side], axis=1)
        out = self.tail.forward(joined, _sub_key(noise_key, 1))
        return out[0] if squeeze else out

    def backward(self, dout):
        djoined = self.tail.backward(dout)
        if djoined.ndim == 1:
            djoined = djoined[None, :]
        return self.head.backward(djoined[:, :self._split])

    def flat_layers(self):
        return self.head.flat_layers() + self.tail.flat_layers()

    def spec(self):
        return {"arch": self.arch, "head": self.head.spec(), "tail": self.tail.spec()}

    @classmethod
    def from_spec(cls, spec, rng):
        return cls(Sequential.from_spec(spec["head"], rng),
                   Sequential.from_spec(spec["tail"], rng))


_ARCHS = {"sequential": Sequential, "dueling": DuelingNet, "concat": ConcatNet}


def param_count(net) -> int:
    return sum(layer.param_count() for layer in net.flat_layers())


def zero_grads(net):
    for layer in net.flat_layers():
        layer.zero_grad()


def copy_params(src, dst):
    """Copy parameter values from one network into an identically shaped one."""
    for ls, ld in zip(src.flat_layers(), dst.flat_layers()):
        for name, val in ls.params.items():
            ld.params[name][...] = val


class Adam:
    """Adaptive-moment gradient descent over a network's layers."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0

    def step(self, net):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for layer in net.flat_layers():
            for name, p in layer.params.items():
                g = layer.grads[name]
                m = layer.moment1[name]
                v = layer.moment2[name]
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# Loss adapters: each returns (mean loss, per-sample losses, d mean loss / d outputs)


def _huber_elementwise(err, delta):
    absd = np.abs(err)
    quad = 0.5 * err * err
    lin = delta * absd - 0.5 * delta * delta
    return np.where(absd <= delta, quad, lin)


def _huber_grad_elementwise(err, delta):
    return np.where(np.abs(err) <= delta, err, delta * np.sign(err))


def huber_loss(pred, target, delta=1.0) -> float:
    """Mean piecewise quadratic/linear loss over all cells of one pair."""
    err = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(_huber_elementwise(err, delta)))


def _loss_huber(outputs, targets, delta):
    out = np.asarray(outputs, dtype=np.float64)
    tgt = np.asarray(targets, dtype=np.float64).reshape(out.shape)
    err = out - tgt
    n = out.shape[0]
    per_cell = _huber_elementwise(err, delta)
    per_sample = per_cell.reshape(n, -1).mean(axis=1)
    cells = per_cell[0].size if per_cell.ndim > 1 else 1
    dout = _huber_grad_elementwise(err, delta) / (n * cells)
    return float(per_sample.mean()), per_sample, dout


def _loss_bce_softmax(outputs, targets, _delta):
    """Binary cross-entropy on 2-logit outputs against integer class targets."""
    logits = np.asarray(outputs, dtype=np.float64)
    classes = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    expo = np.exp(shifted)
    probs = expo / expo.sum(axis=1, keepdims=True)
    picked = probs[np.arange(n), classes]
    per_sample = -np.log(np.maximum(picked, 1e-300))
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), classes] = 1.0
    dout = (probs - onehot) / n
    return float(per_sample.mean()), per_sample, dout


def _loss_td(outputs, targets, _delta):
    """Squared temporal-difference error on the taken action's Q value."""
    q = np.asarray(outputs, dtype=np.float64)
    actions, values = targets
    actions = np.asarray(actions, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    n = q.shape[0]
    taken = q[np.arange(n), actions]
    diff = taken - values
    per_sample = diff * diff
    dout = np.zeros_like(q)
    dout[np.arange(n), actions] = 2.0 * diff / n
    return float(per_sample.mean()), per_sample, dout


_LOSSES = {"huber": _loss_huber, "bce": _loss_bce_softmax, "td": _loss_td}


def evaluate_loss(net, inputs, targets, loss, delta=1.0, noise_key=None):
    outputs = net.forward(inputs, noise_key)
    return _LOSSES[loss](outputs, targets, delta)


def train_step(net, optimizer: Adam, inputs, targets, loss,
               delta=1.0, noise_key=None) -> float:
    """One mini-batch gradient step. Returns the pre-update mean loss."""
    if loss not in _LOSSES:
        raise ConfigError(f"unknown loss {loss!r}")
    zero_grads(net)
    mean_loss, per_sample, dout = evaluate_loss(net, inputs, targets, loss,
                                                delta=delta, noise_key=noise_key)
    finite = np.isfinite(per_sample)
    if not finite.all():
        bad = int(np.argmin(finite))
        raise TrainingError(f"non-finite loss at batch index {bad}", batch_index=bad)
    net.backward(dout)
    optimizer.step(net)
    return mean_loss


def gradient_check(net, inputs, targets, loss, delta=1.0,
                   noise_key=None, step=1e-4) -> float:
    """Max relative disagreement between backprop and central differences.

    Intended for networks of a few thousand parameters; larger nets work but
    the sweep is O(parameters) forward passes.
    """
    zero_grads(net)
    _, _, dout = evaluate_loss(net, inputs, targets, loss, delta=delta,
                               noise_key=noise_key)
    net.backward(dout)
    analytic = {}
    for li, layer in enumerate(net.flat_layers()):
        for name in layer.params:
            analytic[(li, name)] = layer.grads[name].copy()

    worst = 0.0
    for li, layer in enumerate(net.flat_layers()):
        for name, p in layer.params.items():
            flat = p.reshape(-1)
            grad = analytic[(li, name)].reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + step
                hi, _, _ = evaluate_loss(net, inputs, targets, loss,
                                         delta=delta, noise_key=noise_key)
                flat[idx] = orig - step
                lo, _, _ = evaluate_loss(net, inputs, targets, loss,
                                         delta=delta, noise_key=noise_key)
                flat[idx] = orig
                numeric = (hi - lo) / (2.0 * step)
                a = grad[idx]
                rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                if rel > worst:
                    worst = rel
    return worst


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(net, path):
    """Versioned npz container: architecture metadata plus flat arrays.

    A save -> load -> forward round trip is bit-identical (float64 arrays are
    stored losslessly)."""
    meta = {"format": "hybridnav-checkpoint", "version": 1, "spec": net.spec()}
    arrays = {}
    for li, layer in enumerate(net.flat_layers()):
        for name, p in layer.params.items():
            arrays[f"l{li}__{name}"] = p
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **arrays)


def load_checkpoint(path):
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != "hybridnav-checkpoint":
            raise ConfigError(f"{path} is not a network checkpoint")
        spec = meta["spec"]
        net = _ARCHS[spec["arch"]].from_spec(spec, np.random.default_rng(0))
        for li, layer in enumerate(net.flat_layers()):
            for name in layer.params:
                layer.params[name][...] = data[f"l{li}__{name}"]
    return net
