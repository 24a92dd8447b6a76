"""Minimal reverse-mode engine for a fixed family of small conv nets.

Every network here is a stack of 3x3 / stride 1 / zero-pad 1 convolutions with
ReLU between layers, an optional residual skip from input to output, and an
optional sinusoidal timestep embedding that is linearly projected to a
per-channel bias added to the first layer's pre-activation.

Public tensors are ``(batch, channels, height, width)`` float64 arrays.
Internally activations are kept channel-major ``(C, B, H, W)`` so that each
convolution is a single im2col matmul without transposes.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_tensor4(x, name="x"):
    """Validate and return ``x`` as a finite float64 4-d array."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-d (batch, channels, height, width), got shape {x.shape}")
    if min(x.shape) <= 0:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return x


@dataclass(frozen=True)
class NetSpec:
    """Architecture of a conv net.

    ``channels`` lists the channel count at every layer boundary, so
    ``(1, 32, 32, 32, 1)`` is four conv layers. ``time_embed_dim = 0`` builds an
    unconditioned net (used by the baseline denoiser).
    """

    channels: tuple[int, ...] = (1, 32, 32, 32, 1)
    time_embed_dim: int = 32
    residual: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) < 2 or min(self.channels) <= 0:
            raise ValueError(f"channels must list >= 2 positive counts, got {self.channels}")
        if self.channels[-1] != 1:
            raise ValueError("final output channels must be 1")
        if self.residual and self.channels[0] != self.channels[-1]:
            raise ValueError("residual skip needs matching input and output channels")
        if self.time_embed_dim < 0 or self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be a non-negative even integer")

    @property
    def n_layers(self):
        return len(self.channels) - 1

    def param_shapes(self):
        """(name, shape) pairs in the canonical flattening order."""
        shapes = []
        for i in range(self.n_layers):
            cin, cout = self.channels[i], self.channels[i + 1]
            shapes.append((f"conv{i}.weight", (cout, cin, 3, 3)))
            shapes.append((f"conv{i}.bias", (cout,)))
        if self.time_embed_dim:
            shapes.append(("time.weight", (self.time_embed_dim, self.channels[1])))
            shapes.append(("time.bias", (self.channels[1],)))
        return shapes

    def n_params(self):
        return sum(int(np.prod(s)) for _, s in self.param_shapes())


def timestep_embedding(t, dim):
    """Sinusoidal embedding, shape ``(len(t), dim)``: sin half then cos half."""
    t = np.asarray(t, dtype=DTYPE).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=DTYPE) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@dataclass
class Net:
    spec: NetSpec
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = dict(self.spec.param_shapes())
        if set(self.params) != set(expected):
            raise ShapeError(f"parameter names {sorted(self.params)} do not match spec {sorted(expected)}")
        ordered = {}
        for name, shape in self.spec.param_shapes():
            p = np.asarray(self.params[name], dtype=DTYPE)
            if p.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {p.shape}")
            ordered[name] = p
        self.params = ordered

    @classmethod
    def zeros(cls, spec):
        return cls(spec, {n: np.zeros(s, dtype=DTYPE) for n, s in spec.param_shapes()})

    @classmethod
    def init(cls, spec, rng):
        """Kaiming-uniform conv kernels, zero biases, zero final layer."""
        params = {}
        for name, shape in spec.param_shapes():
            if name.endswith(".bias"):
                params[name] = np.zeros(shape, dtype=DTYPE)
            elif name == "time.weight":
                bound = np.sqrt(1.0 / shape[0])
                params[name] = rng.uniform(-bound, bound, size=shape)
            elif name == f"conv{spec.n_layers - 1}.weight":
                params[name] = np.zeros(shape, dtype=DTYPE)
            else:
                fan_in = shape[1] * 9
                bound = np.sqrt(6.0 / fan_in)
                params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(spec, params)

    def with_params(self, params):
        return Net(self.spec, params)

    def copy(self):
        return Net(self.spec, {k: v.copy() for k, v in self.params.items()})

    def flat(self):
        """All parameters concatenated in canonical order."""
        return np.concatenate([self.params[n].ravel() for n, _ in self.spec.param_shapes()])

    @classmethod
    def from_flat(cls, spec, flat):
        flat = np.asarray(flat, dtype=DTYPE)
        if flat.size != spec.n_params():
            raise ShapeError(f"expected {spec.n_params()} parameters, got {flat.size}")
        params, offset = {}, 0
        for name, shape in spec.param_shapes():
            n = int(np.prod(shape))
            params[name] = flat[offset:offset + n].reshape(shape).copy()
            offset += n
        return cls(spec, params)

    def forward(self, x, t=1):
        return forward(self, x, t)

    __call__ = forward

    def loss_and_grads(self, x, t, target, weight=None):
        return loss_and_grads(self, x, t, target, weight)


def param_hash(net):
    return hashlib.sha256(net.flat().astype("<f8").tobytes()).hexdigest()


def _conv(h, w, b):
    """3x3 same-padding conv on a (C, B, H, W) array; returns (out, im2col matrix)."""
    c, nb, hh, ww = h.shape
    hp = np.pad(h, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 3, 3, nb, hh, ww), dtype=DTYPE)
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = hp[:, :, i:i + hh, j:j + ww]
    cols = cols.reshape(c * 9, nb * hh * ww)
    out = w.reshape(w.shape[0], -1) @ cols
    out += b[:, None]
    return out.reshape(w.shape[0], nb, hh, ww), cols


def _conv_backward(dout, w, cols, in_shape, need_input_grad=True):
    cout = w.shape[0]
    d2 = dout.reshape(cout, -1)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = d2.sum(axis=1)
    if not need_input_grad:
        return None, dw, db
    c, nb, hh, ww = in_shape
    dcols = (w.reshape(cout, -1).T @ d2).reshape(c, 3, 3, nb, hh, ww)
    dhp = np.zeros((c, nb, hh + 2, ww + 2), dtype=DTYPE)
    for i in range(3):
        for j in range(3):
            dhp[:, :, i:i + hh, j:j + ww] += dcols[:, i, j]
    return dhp[:, :, 1:-1, 1:-1], dw, db


def _time_bias(net, t, nb):
    """Per-item, per-channel bias (B, C1) from timestep(s) ``t``, plus the embedding."""
    t = np.asarray(t, dtype=DTYPE).reshape(-1)
    if t.size == 1:
        t = np.full(nb, t[0])
    if t.shape[0] != nb:
        raise ShapeError(f"got {t.shape[0]} timesteps for a batch of {nb}")
    emb = timestep_embedding(t, net.spec.time_embed_dim)
    return emb @ net.params["time.weight"] + net.params["time.bias"], emb


def _run(net, x, t, keep_cache):
    x = as_tensor4(x)
    spec = net.spec
    if x.shape[1] != spec.channels[0]:
        raise ShapeError(f"input has {x.shape[1]} channels, net expects {spec.channels[0]}")
    nb = x.shape[0]
    h = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
    cache = []
    emb = None
    for i in range(spec.n_layers):
        pre, cols = _conv(h, net.params[f"conv{i}.weight"], net.params[f"conv{i}.bias"])
        if i == 0 and spec.time_embed_dim:
            tb, emb = _time_bias(net, t, nb)
            pre += tb.T[:, :, None, None]
        last = i == spec.n_layers - 1
        out = pre if last else np.maximum(pre, 0.0)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"non-finite activations at layer conv{i}")
        if keep_cache:
            cache.append((h.shape, cols, pre))
        h = out
    y = h.transpose(1, 0, 2, 3)
    if spec.residual:
        y = y + x
    return np.ascontiguousarray(y), cache, emb


def forward(net, x, t=1):
    """Apply ``net`` to a (B, C, H, W) batch at timestep(s) ``t`` (scalar or per item)."""
    y, _, _ = _run(net, x, t, keep_cache=False)
    return y


def loss_and_grads(net, x, t, target, weight=None):
    """Mean squared error against ``target`` and its exact gradient for every parameter.

    ``weight``, if given, broadcasts against the output and turns the loss into
    ``mean(weight * (y - target)**2)``.
    """
    y, cache, emb = _run(net, x, t, keep_cache=True)
    target = np.asarray(target, dtype=DTYPE)
    if target.shape != y.shape:
        raise ShapeError(f"target shape {target.shape} != output shape {y.shape}")
    diff = y - target
    if weight is not None:
        try:
            weight = np.broadcast_to(np.asarray(weight, dtype=DTYPE), y.shape)
        except ValueError:
            raise ShapeError(f"weight shape {np.shape(weight)} does not broadcast to {y.shape}") from None
        wdiff = weight * diff
    else:
        wdiff = diff
    loss = float(np.mean(wdiff * diff))
    spec = net.spec
    grads = {}
    # d loss / d (pre-activation of last layer), channel-major
    d = np.ascontiguousarray((2.0 / diff.size) * wdiff.transpose(1, 0, 2, 3))
    for i in reversed(range(spec.n_layers)):
        in_shape, cols, pre = cache[i]
        if i != spec.n_layers - 1:
            d = d * (pre > 0)
        if i == 0 and spec.time_embed_dim:
            dtb = d.sum(axis=(2, 3)).T
            grads["time.weight"] = emb.T @ dtb
            grads["time.bias"] = dtb.sum(axis=0)
        d, dw, db = _conv_backward(d, net.params[f"conv{i}.weight"], cols, in_shape, need_input_grad=i > 0)
        grads[f"conv{i}.weight"] = dw
        grads[f"conv{i}.bias"] = db
    return loss, {n: grads[n] for n, _ in spec.param_shapes()}


@dataclass
class AdamState:
    m: dict
    v: dict
    k: int = 0
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params, lr=2e-4, **kw):
        zeros = {n: np.zeros_like(p) for n, p in params.items()}
        return cls(m=zeros, v={n: z.copy() for n, z in zeros.items()}, k=0, lr=lr, **kw)


def adam_step(params, grads, state):
    """One bias-corrected Adam update. Inputs are not modified."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ShapeError("params, grads and optimizer state name different parameters")
    k = state.k + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** k, 1.0 - b2 ** k
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=DTYPE)
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ShapeError(f"{name}: shape mismatch between parameter, gradient and moments")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        new_p[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v, k, state.lr, b1, b2, state.eps)


def train_step(net, opt, x, t, target):
    """loss_and_grads followed by adam_step; returns (new_net, new_opt, loss)."""
    loss, grads = loss_and_grads(net, x, t, target)
    params, opt = adam_step(net.params, grads, opt)
    return net.with_params(params), opt, loss
