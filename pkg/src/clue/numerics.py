"""Dense float64 MLP machinery: forward/backward passes, Adam, gradient
checking, and a flat binary checkpoint format.

Everything runs on plain numpy arrays (row-major float64). The model zoo in
this project is small and fixed-topology, so reverse-mode gradients are
written out directly instead of going through an autodiff tape.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"CLUENN1\x00"

HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("identity", "tanh")


class TrainingDivergedError(RuntimeError):
    """A loss or gradient stopped being finite; carries any partial report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


def _apply_activation(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name, z, h):
    # d(activation)/dz given both the pre-activation z and output h.
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - h * h
    if name == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {name!r}")


def _as_batch(x, dim, what):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        if arr.shape[0] != dim:
            raise ValueError(f"{what} has length {arr.shape[0]}, expected {dim}")
        return arr[None, :], True
    if arr.ndim == 2:
        if arr.shape[1] != dim:
            raise ValueError(f"{what} has width {arr.shape[1]}, expected {dim}")
        return arr, False
    raise ValueError(f"{what} must be 1-D or 2-D, got shape {arr.shape}")


@dataclass
class Mlp:
    """Fully-connected stack. weights[i] has shape (layer_sizes[i], layer_sizes[i+1])."""

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        if self.activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"hidden activation must be one of {HIDDEN_ACTIVATIONS}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"output activation must be one of {OUTPUT_ACTIVATIONS}")
        n = len(self.layer_sizes) - 1
        if len(self.weights) != n or len(self.biases) != n:
            raise ValueError("weights/biases do not match layer_sizes")
        for i in range(n):
            want = (self.layer_sizes[i], self.layer_sizes[i + 1])
            if self.weights[i].shape != want:
                raise ValueError(f"layer {i} weight shape {self.weights[i].shape} != {want}")
            if self.biases[i].shape != (self.layer_sizes[i + 1],):
                raise ValueError(f"layer {i} bias shape {self.biases[i].shape}")

    @property
    def in_dim(self):
        return self.layer_sizes[0]

    @property
    def out_dim(self):
        return self.layer_sizes[-1]

    def params(self):
        """Flat parameter list [W0, b0, W1, b1, ...] (live references)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def param_count(self):
        return sum(p.size for p in self.params())

    def copy(self):
        return Mlp(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            self.output_activation,
        )

    def forward(self, x, hidden_masks=None):
        """Map input (d_in,) or (N, d_in) to output of matching leading shape."""
        out, _ = self.forward_cached(x, hidden_masks)
        return out

    def forward_cached(self, x, hidden_masks=None):
        """Forward pass keeping intermediates for backward_from_cache."""
        h, single = _as_batch(x, self.in_dim, "input")
        n_layers = len(self.weights)
        if hidden_masks is not None and len(hidden_masks) != n_layers - 1:
            raise ValueError("need one dropout mask per hidden layer")
        pre, post = [], [h]
        for i in range(n_layers):
            z = h @ self.weights[i] + self.biases[i]
            name = self.output_activation if i == n_layers - 1 else self.activation
            h = _apply_activation(name, z)
            if hidden_masks is not None and i < n_layers - 1:
                h = h * hidden_masks[i]
            pre.append(z)
            post.append(h)
        cache = (pre, post, hidden_masks, single)
        return (h[0] if single else h), cache

    def backward_from_cache(self, cache, output_grad):
        """Vector-Jacobian product from a cached forward pass.

        output_grad carries any loss scaling (e.g. 1/N for batch means);
        parameter gradients are summed over the batch, which makes them the
        exact gradients of the scalar the caller differentiated.
        """
        pre, post, hidden_masks, single = cache
        g, g_single = _as_batch(output_grad, self.out_dim, "output_grad")
        if single != g_single or g.shape[0] != post[0].shape[0]:
            raise ValueError("output_grad batch shape does not match forward input")
        n_layers = len(self.weights)
        grads = [None] * (2 * n_layers)
        for i in range(n_layers - 1, -1, -1):
            name = self.output_activation if i == n_layers - 1 else self.activation
            act_out = post[i + 1]
            if hidden_masks is not None and i < n_layers - 1:
                g = g * hidden_masks[i]
                # undo the mask to recover act(z) for the tanh derivative
                with np.errstate(invalid="ignore", divide="ignore"):
                    act_out = np.where(hidden_masks[i] > 0, act_out / np.maximum(hidden_masks[i], 1e-300), 0.0)
            gz = g * _activation_grad(name, pre[i], act_out)
            grads[2 * i] = post[i].T @ gz
            grads[2 * i + 1] = gz.sum(axis=0)
            g = gz @ self.weights[i].T
        input_grad = g[0] if single else g
        return grads, input_grad

    def backward(self, x, output_grad, hidden_masks=None):
        """Gradients of <output_grad, output(x)> w.r.t. params and input. Pure."""
        _, cache = self.forward_cached(x, hidden_masks)
        return self.backward_from_cache(cache, output_grad)


def init_mlp(layer_sizes, rng, activation="relu", output_activation="identity"):
    """He-normal init for relu stacks, Xavier-uniform for tanh; zero biases."""
    if len(layer_sizes) < 2:
        raise ValueError("need at least input and output sizes")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        if activation == "relu":
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        weights.append(np.asarray(w, dtype=np.float64))
        biases.append(np.zeros(fan_out, dtype=np.float64))
    return Mlp(list(layer_sizes), weights, biases, activation, output_activation)


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators; moment shapes mirror the parameters."""

    learning_rate: float
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(params, learning_rate, beta1=0.9, beta2=0.999, epsilon=1e-8):
    return AdamState(
        learning_rate=learning_rate,
        first_moment=[np.zeros_like(p) for p in params],
        second_moment=[np.zeros_like(p) for p in params],
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )


def adam_step(params, grads, state):
    """One Adam update, in place on params and state. Returns (params, state)."""
    if len(params) != len(state.first_moment) or len(grads) != len(params):
        raise ValueError("params/grads/state lengths differ")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError("non-finite gradient in adam_step")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state


@dataclass
class GradCheckReport:
    """Per-parameter-array max relative error of analytic vs central differences."""

    layer_errors: list[float]
    max_error: float
    tolerance: float

    @property
    def passed(self):
        return self.max_error < self.tolerance


def relative_error(a, b, floor=1e-8):
    """|a-b| over max magnitude; falls back to the absolute gap near zero."""
    denom = max(abs(a), abs(b))
    if denom < floor:
        return abs(a - b)
    return abs(a - b) / denom


def grad_check(net, loss_fn, step=1e-5, tolerance=1e-4):
    """Compare loss_fn's analytic gradients against central finite differences.

    loss_fn(net) must return (scalar loss, gradient list aligned with
    net.params()). The net's parameters are perturbed in place and restored.
    Report-only: never raises on mismatch.
    """
    _, analytic = loss_fn(net)
    params = net.params()
    if len(analytic) != len(params):
        raise ValueError("loss_fn gradient list does not match net.params()")
    layer_errors = []
    for p, g in zip(params, analytic):
        worst = 0.0
        flat_p = p.reshape(-1)
        flat_g = np.asarray(g).reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + step
            hi = loss_fn(net)[0]
            flat_p[i] = orig - step
            lo = loss_fn(net)[0]
            flat_p[i] = orig
            fd = (hi - lo) / (2.0 * step)
            worst = max(worst, relative_error(flat_g[i], fd))
        layer_errors.append(worst)
    return GradCheckReport(layer_errors, max(layer_errors, default=0.0), tolerance)


def save_mlps(path, nets):
    """Write one or more networks back-to-back in the flat binary format.

    Record layout: magic, u32 layer count, per-layer u32 (in, out) dims, then
    per layer the row-major float64 weight matrix followed by the bias vector.
    All integers and floats little-endian.
    """
    with open(path, "wb") as f:
        for net in nets:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", len(net.weights)))
            for w in net.weights:
                f.write(struct.pack("<II", w.shape[0], w.shape[1]))
            for w, b in zip(net.weights, net.biases):
                f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
                f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_mlps(path, activations=None):
    """Read all records from a checkpoint file.

    activations: optional list of (hidden, output) activation names per
    record; the binary format intentionally does not store them.
    """
    nets = []
    with open(path, "rb") as f:
        while True:
            magic = f.read(len(CHECKPOINT_MAGIC))
            if not magic:
                break
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
            (n_layers,) = struct.unpack("<I", f.read(4))
            dims = [struct.unpack("<II", f.read(8)) for _ in range(n_layers)]
            for (_, out_prev), (in_next, _) in zip(dims[:-1], dims[1:]):
                if out_prev != in_next:
                    raise ValueError(f"{path}: layer dims do not compose: {dims}")
            weights, biases = [], []
            for d_in, d_out in dims:
                w = np.frombuffer(f.read(8 * d_in * d_out), dtype="<f8").reshape(d_in, d_out)
                b = np.frombuffer(f.read(8 * d_out), dtype="<f8")
                weights.append(w.astype(np.float64))
                biases.append(b.astype(np.float64))
            layer_sizes = [dims[0][0]] + [d_out for _, d_out in dims]
            if activations is not None:
                hidden, output = activations[len(nets)]
            else:
                hidden, output = "relu", "identity"
            nets.append(Mlp(layer_sizes, weights, biases, hidden, output))
    if not nets:
        raise ValueError(f"{path}: empty checkpoint")
    return nets
