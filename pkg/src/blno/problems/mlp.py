"""Two-layer ReLU regression network with hand-written derivatives.

    h   = relu(X W1 + b1)          (identity when ``hidden`` is None: out = X W1 + b1)
    out = h W2 + b2
    loss = |out - Y|_F^2 / (2 * batch)

Parameters flatten in the order W1, b1, W2, b2 (row-major).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..ihvp import HessianOperator


@dataclass
class Mlp:
    input_dim: int
    output_dim: int
    hidden: int | None  # None: a single affine layer
    params: np.ndarray
    activation: str = "relu"

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        if self.hidden is None:
            return [(self.input_dim, self.output_dim), (self.output_dim,)]
        return [(self.input_dim, self.hidden), (self.hidden,),
                (self.hidden, self.output_dim), (self.output_dim,)]

    @property
    def P(self) -> int:
        return param_count(self.input_dim, self.hidden, self.output_dim)

    def unflatten(self, p: np.ndarray | None = None) -> list[np.ndarray]:
        p = self.params if p is None else p
        out, k = [], 0
        for s in self.shapes:
            n = int(np.prod(s))
            out.append(p[k:k + n].reshape(s))
            k += n
        return out

    @staticmethod
    def flatten(arrays) -> np.ndarray:
        return np.concatenate([np.ravel(a) for a in arrays])

    def with_params(self, p: np.ndarray) -> "Mlp":
        return Mlp(self.input_dim, self.output_dim, self.hidden, np.asarray(p, dtype=np.float64), self.activation)


def param_count(input_dim: int, hidden: int | None, output_dim: int) -> int:
    if hidden is None:
        return input_dim * output_dim + output_dim
    return input_dim * hidden + hidden + hidden * output_dim + output_dim


def init_mlp(input_dim, hidden, output_dim, rng, activation="relu") -> Mlp:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    dims = [(input_dim, output_dim)] if hidden is None else [(input_dim, hidden), (hidden, output_dim)]
    arrays = []
    for fan_in, fan_out in dims:
        bound = 1.0 / np.sqrt(fan_in)
        arrays.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        arrays.append(rng.uniform(-bound, bound, size=fan_out))
    return Mlp(input_dim, output_dim, hidden, Mlp.flatten(arrays), activation)


def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0), (z > 0).astype(np.float64)
    return z, np.ones_like(z)


def mlp_forward(net: Mlp, X, p=None):
    ws = net.unflatten(p)
    if net.hidden is None:
        return X @ ws[0] + ws[1]
    h, _ = _act(X @ ws[0] + ws[1], net.activation)
    return h @ ws[2] + ws[3]


def mlp_forward_loss(net: Mlp, X, Y, p=None) -> float:
    r = mlp_forward(net, X, p) - Y
    return float(np.sum(r * r) / (2.0 * X.shape[0]))


def mlp_grad(net: Mlp, X, Y, p=None) -> np.ndarray:
    ws = net.unflatten(p)
    n = X.shape[0]
    if net.hidden is None:
        d_out = (X @ ws[0] + ws[1] - Y) / n
        return Mlp.flatten([X.T @ d_out, d_out.sum(0)])
    W1, b1, W2, b2 = ws
    h, mask = _act(X @ W1 + b1, net.activation)
    d_out = (h @ W2 + b2 - Y) / n
    dz = (d_out @ W2.T) * mask
    return Mlp.flatten([X.T @ dz, dz.sum(0), h.T @ d_out, d_out.sum(0)])


def mlp_hvp(net: Mlp, X, Y, v, p=None) -> np.ndarray:
    """Exact Hessian-vector product for a fixed activation pattern (forward-over-reverse)."""
    ws = net.unflatten(p)
    vs = net.unflatten(v)
    n = X.shape[0]
    if net.hidden is None:
        r_out = (X @ vs[0] + vs[1]) / n
        return Mlp.flatten([X.T @ r_out, r_out.sum(0)])
    W1, b1, W2, b2 = ws
    V1, c1, V2, c2 = vs
    h, mask = _act(X @ W1 + b1, net.activation)
    d_out = (h @ W2 + b2 - Y) / n
    rh = (X @ V1 + c1) * mask
    r_dout = (rh @ W2 + h @ V2 + c2) / n
    r_dz = (r_dout @ W2.T + d_out @ V2.T) * mask
    return Mlp.flatten([X.T @ r_dz, r_dz.sum(0), rh.T @ d_out + h.T @ r_dout, r_dout.sum(0)])


class MlpHessian(HessianOperator):
    """Hessian of the training loss in parameter space.

    ``method="fd"`` uses central differences of the gradient with step
    h = 1e-5 (1 + |p|) / (1 + |v|). ``method="rop"`` uses the exact product
    for the current activation pattern, which avoids the finite-difference
    blow-up when a probe crosses a ReLU kink.
    """

    def __init__(self, net: Mlp, X, Y, method: str = "fd"):
        if method not in ("fd", "rop"):
            raise ValueError(f"unknown Hessian method {method!r}")
        self.net, self.X, self.Y, self.method = net, X, Y, method
        self.dim = net.P
        self._pnorm = float(np.linalg.norm(net.params))

    def apply(self, v):
        v = np.asarray(v, dtype=np.float64)
        if self.method == "rop":
            out = mlp_hvp(self.net, self.X, self.Y, v)
        else:
            h = 1e-5 * (1.0 + self._pnorm) / (1.0 + float(np.linalg.norm(v)))
            p = self.net.params
            out = (mlp_grad(self.net, self.X, self.Y, p + h * v) - mlp_grad(self.net, self.X, self.Y, p - h * v)) / (2 * h)
        if not np.all(np.isfinite(out)):
            bad = int(np.flatnonzero(~np.isfinite(out))[0])
            raise FloatingPointError(f"non-finite Hessian product at coordinate {bad}")
        return out


def mlp_hessian_operator(net: Mlp, X, Y, method: str = "fd") -> MlpHessian:
    return MlpHessian(net, X, Y, method)
