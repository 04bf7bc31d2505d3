"""Dense feedforward networks with smooth activations.

Provides forward evaluation, exact input-space first and second derivatives,
parameter counting, min-max normalization, and a plain-text serialization
with bit-exact round trips. Activations are evaluated with overflow guards
(exponent arguments clamped at +-500). The output layer is always the
identity map.
"""

from __future__ import annotations

import numpy as np

HIDDEN_ACTIVATIONS = ("logsig", "tansig", "softmax", "identity")

_EXP_CLAMP = 500.0


def _logsig(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -_EXP_CLAMP, _EXP_CLAMP)))


def _softmax(z):
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(np.clip(shifted, -_EXP_CLAMP, 0.0))
    return e / np.sum(e, axis=-1, keepdims=True)


def activation_value(tag: str, z: np.ndarray) -> np.ndarray:
    if tag == "logsig":
        return _logsig(z)
    if tag == "tansig":
        return np.tanh(z)
    if tag == "softmax":
        return _softmax(z)
    if tag == "identity":
        return z
    raise ValueError(f"unknown activation {tag!r}")


def activation_derivatives(tag: str, z: np.ndarray):
    """Value, first and second elementwise derivatives (None for softmax)."""
    if tag == "logsig":
        a = _logsig(z)
        d1 = a * (1.0 - a)
        return a, d1, d1 * (1.0 - 2.0 * a)
    if tag == "tansig":
        a = np.tanh(z)
        d1 = 1.0 - a * a
        return a, d1, -2.0 * a * d1
    if tag == "identity":
        return z, np.ones_like(z), np.zeros_like(z)
    if tag == "softmax":
        return _softmax(z), None, None
    raise ValueError(f"unknown activation {tag!r}")


def dof_count(layer_sizes) -> int:
    """Number of trainable parameters: sum of weight entries plus biases."""
    sizes = list(layer_sizes)
    if len(sizes) < 2:
        raise ValueError("need at least input and output layer sizes")
    return sum(sizes[i] * sizes[i - 1] + sizes[i] for i in range(1, len(sizes)))


class Mlp:
    """Feedforward network W_k sigma(...) + b_k with identity output layer."""

    def __init__(self, weights, biases, activations):
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float).ravel() for b in biases]
        self.activations = list(activations)
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up")
        if len(self.activations) != len(self.weights) - 1:
            raise ValueError("need one activation tag per hidden layer")
        for tag in self.activations:
            if tag not in HIDDEN_ACTIVATIONS:
                raise ValueError(f"unknown activation {tag!r}")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {k}: weight {w.shape} and bias {b.shape} mismatch")
            if k > 0 and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k}: input dim does not chain")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_params(self) -> int:
        return dof_count(self.layer_sizes)

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   list(self.activations))

    def get_params(self) -> np.ndarray:
        """Flatten all weights and biases into one vector (layer by layer)."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_params(self, theta: np.ndarray) -> None:
        pos = 0
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            n = w.size
            self.weights[k] = theta[pos:pos + n].reshape(w.shape)
            pos += n
            m = b.size
            self.biases[k] = theta[pos:pos + m].copy()
            pos += m
        if pos != theta.size:
            raise ValueError("parameter vector length mismatch")

    def __repr__(self):
        return f"Mlp(layers={self.layer_sizes}, activations={self.activations})"


def forward_batch(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on rows of x, shape (n, r) -> (n, s)."""
    a = np.asarray(x, dtype=float)
    if a.ndim != 2 or a.shape[1] != net.input_dim:
        raise ValueError(f"expected inputs of shape (n, {net.input_dim})")
    n_hidden = len(net.weights) - 1
    for k in range(n_hidden):
        z = a @ net.weights[k].T + net.biases[k]
        a = activation_value(net.activations[k], z)
    return a @ net.weights[-1].T + net.biases[-1]


def forward(net: Mlp, x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (net.input_dim,):
        raise ValueError(f"expected input of length {net.input_dim}, got {x.shape}")
    return forward_batch(net, x[None, :])[0]


def _softmax_jac_apply(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    # (diag(a) - a a^T) u, batched over the leading axis of a (n, l), u (n, l, r)
    au = np.einsum("nl,nlr->nr", a, u)
    return a[:, :, None] * (u - au[:, None, :])


def input_jacobian_batch(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Exact Jacobians d net / d x for rows of x: shape (n, s, r)."""
    a = np.asarray(x, dtype=float)
    if a.ndim != 2 or a.shape[1] != net.input_dim:
        raise ValueError(f"expected inputs of shape (n, {net.input_dim})")
    n, r = a.shape
    g = np.broadcast_to(np.eye(r), (n, r, r)).copy()
    n_hidden = len(net.weights) - 1
    for k in range(n_hidden):
        w = net.weights[k]
        z = a @ w.T + net.biases[k]
        u = np.einsum("lm,nmr->nlr", w, g)
        tag = net.activations[k]
        if tag == "softmax":
            a = _softmax(z)
            g = _softmax_jac_apply(a, u)
        else:
            a, d1, _ = activation_derivatives(tag, z)
            g = d1[:, :, None] * u
    w0 = net.weights[-1]
    return np.einsum("sm,nmr->nsr", w0, g)


def input_jacobian(net: Mlp, x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return input_jacobian_batch(net, x[None, :])[0]


def input_second_partial_batch(net: Mlp, x: np.ndarray, i: int) -> np.ndarray:
    """Exact pure second partials d^2 net / d x_i^2, shape (n, s)."""
    a = np.asarray(x, dtype=float)
    if a.ndim != 2 or a.shape[1] != net.input_dim:
        raise ValueError(f"expected inputs of shape (n, {net.input_dim})")
    if not 0 <= i < net.input_dim:
        raise ValueError(f"coordinate index {i} out of range")
    n = a.shape[0]
    g = np.zeros((n, net.input_dim))
    g[:, i] = 1.0
    h = np.zeros((n, net.input_dim))
    n_hidden = len(net.weights) - 1
    for k in range(n_hidden):
        w = net.weights[k]
        z = a @ w.T + net.biases[k]
        u = g @ w.T
        v = h @ w.T
        tag = net.activations[k]
        if tag == "softmax":
            a = _softmax(z)
            m1 = np.sum(a * u, axis=1, keepdims=True)
            s2 = np.sum(a * u * u, axis=1, keepdims=True)
            quad = a * ((u - m1) ** 2 - (s2 - m1 * m1))
            g_new = a * (u - m1)
            h = a * (v - np.sum(a * v, axis=1, keepdims=True)) + quad
            g = g_new
        else:
            a, d1, d2 = activation_derivatives(tag, z)
            h = d1 * v + d2 * u * u
            g = d1 * u
    w0 = net.weights[-1]
    return h @ w0.T


def input_second_partial(net: Mlp, x, i: int) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return input_second_partial_batch(net, x[None, :], i)[0]


class MinMaxScaler:
    """Affine map of each component from [min, max] onto [lo, hi]."""

    def __init__(self, mins, maxs, lo: float = -1.0, hi: float = 1.0):
        self.mins = np.atleast_1d(np.asarray(mins, dtype=float))
        self.maxs = np.atleast_1d(np.asarray(maxs, dtype=float))
        if self.mins.shape != self.maxs.shape:
            raise ValueError("min/max shape mismatch")
        if np.any(self.maxs <= self.mins):
            raise ValueError("degenerate range: max must exceed min per component")
        if hi <= lo:
            raise ValueError("degenerate target range")
        self.lo = float(lo)
        self.hi = float(hi)

    @classmethod
    def from_data(cls, data: np.ndarray, lo: float = -1.0, hi: float = 1.0):
        data = np.asarray(data, dtype=float)
        if data.ndim == 1:
            data = data[:, None]
        return cls(data.min(axis=0), data.max(axis=0), lo, hi)

    @property
    def dim(self) -> int:
        return self.mins.size

    def scale(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return self.lo + (self.hi - self.lo) * (v - self.mins) / (self.maxs - self.mins)

    def unscale(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        return self.mins + (w - self.lo) * (self.maxs - self.mins) / (self.hi - self.lo)

    def covers(self, v: np.ndarray) -> bool:
        """True when v lies inside the declared range (no extrapolation)."""
        v = np.asarray(v, dtype=float)
        return bool(np.all(v >= self.mins) and np.all(v <= self.maxs))

    def jacobian_diag(self) -> np.ndarray:
        """Diagonal of d scale / d v (constant for the affine map)."""
        return (self.hi - self.lo) / (self.maxs - self.mins)


def _fmt(x: float) -> str:
    return repr(float(x))


def save_network(path, net: Mlp, in_scaler: MinMaxScaler | None = None,
                 out_scaler: MinMaxScaler | None = None) -> None:
    """Plain-text network format; floats at full round-trip precision."""
    lines = []
    lines.append("mlp " + " ".join(str(s) for s in net.layer_sizes))
    lines.append("activations " + " ".join(net.activations))
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        lines.append(f"W {k} {w.shape[0]} {w.shape[1]}")
        for row in w:
            lines.append(" ".join(_fmt(v) for v in row))
        lines.append(f"b {k} {b.size}")
        lines.append(" ".join(_fmt(v) for v in b))
    for name, scaler in (("input_scaler", in_scaler), ("output_scaler", out_scaler)):
        if scaler is not None:
            lines.append(f"{name} {scaler.dim} {_fmt(scaler.lo)} {_fmt(scaler.hi)}")
            lines.append(" ".join(_fmt(v) for v in scaler.mins))
            lines.append(" ".join(_fmt(v) for v in scaler.maxs))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_network(path):
    """Inverse of save_network; returns (net, in_scaler, out_scaler)."""
    with open(path, encoding="ascii") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    pos = 0

    def take():
        nonlocal pos
        line = lines[pos]
        pos += 1
        return line

    head = take().split()
    if head[0] != "mlp":
        raise ValueError(f"not a network file: {path}")
    sizes = [int(s) for s in head[1:]]
    acts = take().split()[1:]
    weights, biases = [], []
    for k in range(len(sizes) - 1):
        wh = take().split()
        if wh[0] != "W" or int(wh[1]) != k:
            raise ValueError(f"malformed weight block at layer {k}")
        rows, cols = int(wh[2]), int(wh[3])
        w = np.array([[float(v) for v in take().split()] for _ in range(rows)])
        if w.shape != (rows, cols):
            raise ValueError(f"weight block {k} has wrong shape")
        bh = take().split()
        if bh[0] != "b" or int(bh[1]) != k:
            raise ValueError(f"malformed bias block at layer {k}")
        b = np.array([float(v) for v in take().split()])
        if b.size != int(bh[2]):
            raise ValueError(f"bias block {k} has wrong length")
        weights.append(w)
        biases.append(b)
    scalers = {"input_scaler": None, "output_scaler": None}
    while pos < len(lines):
        sh = take().split()
        if sh[0] not in scalers:
            raise ValueError(f"unexpected block {sh[0]!r} in {path}")
        dim, lo, hi = int(sh[1]), float(sh[2]), float(sh[3])
        mins = np.array([float(v) for v in take().split()])
        maxs = np.array([float(v) for v in take().split()])
        if mins.size != dim or maxs.size != dim:
            raise ValueError(f"scaler block {sh[0]} has wrong length")
        scalers[sh[0]] = MinMaxScaler(mins, maxs, lo, hi)
    net = Mlp(weights, biases, acts)
    if net.layer_sizes != sizes:
        raise ValueError("layer size header does not match stored blocks")
    return net, scalers["input_scaler"], scalers["output_scaler"]
