"""Fully-connected networks with hand-derived reverse-mode gradients.

Two families of routines:

* ``mlp_forward`` / ``mlp_backward`` — plain batched value and gradient
  paths used by the color, far-field, and sky heads.

* ``mlp_value_and_input_grad`` / ``mlp_vig_backward`` — the geometry path.
  The forward additionally produces u0 = d y[0] / d x per sample (the
  ingredient of the SDF spatial gradient), and the backward consumes a
  cotangent on u0 as well, which requires propagating second derivatives
  of the activation. Only smooth activations (softplus) are valid there.

Weights live in a ParamStore as segments ``<name>/W<k>`` and ``<name>/b<k>``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParamStore


@dataclass(frozen=True)
class MlpSpec:
    """widths = (n_in, hidden..., n_out); at least one hidden layer."""

    widths: tuple
    activation: str = "softplus"
    out_activation: str | None = None
    beta: float = 100.0

    def __post_init__(self):
        if len(self.widths) < 3:
            raise ValueError("MlpSpec needs at least one hidden layer")
        if any(w <= 0 for w in self.widths):
            raise ValueError("widths must be positive")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def to_json(self) -> dict:
        return {"widths": list(self.widths), "activation": self.activation,
                "out_activation": self.out_activation, "beta": self.beta}

    @classmethod
    def from_json(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["widths"]), d["activation"], d["out_activation"],
                   d.get("beta", 100.0))


def _act(name: str, beta: float, z: np.ndarray) -> np.ndarray:
    if name == "softplus":
        # log1p(exp(-|bz|))/b plus the linear part on the positive side;
        # much faster than logaddexp and exact to float precision
        bz = beta * z
        out = np.log1p(np.exp(-np.abs(bz))) / beta
        return np.where(bz > 0, z + out, out)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return _sigmoid(z)
    if name in (None, "none"):
        return z
    raise ValueError(f"unknown activation {name!r}")


def _act_d(name: str, beta: float, z: np.ndarray) -> np.ndarray:
    if name == "softplus":
        return _sigmoid(beta * z)
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "sigmoid":
        s = _sigmoid(z)
        return s * (1.0 - s)
    if name in (None, "none"):
        return np.ones_like(z)
    raise ValueError(f"unknown activation {name!r}")


def _act_dd(name: str, beta: float, z: np.ndarray) -> np.ndarray:
    if name == "softplus":
        s = _sigmoid(beta * z)
        return beta * s * (1.0 - s)
    if name == "relu":
        return np.zeros_like(z)
    raise ValueError(f"activation {name!r} has no second-derivative path")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form: stable at both tails, one ufunc pass
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def mlp_allocate(store: ParamStore, name: str, spec: MlpSpec,
                 rng: np.random.Generator) -> None:
    """He-normal weights, zero biases, as segments under `name/`."""
    for k in range(spec.n_layers):
        fan_in, fan_out = spec.widths[k], spec.widths[k + 1]
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        store.allocate(f"{name}/W{k}", (fan_out, fan_in), w)
        store.allocate(f"{name}/b{k}", (fan_out,), np.zeros(fan_out))


def mlp_weights(store: ParamStore, name: str, spec: MlpSpec) -> list:
    return [(store.view(f"{name}/W{k}"), store.view(f"{name}/b{k}"))
            for k in range(spec.n_layers)]


def mlp_forward(spec: MlpSpec, weights: list, x: np.ndarray):
    """Batched forward pass. Returns (y, cache)."""
    x = np.atleast_2d(x)
    if x.shape[-1] != spec.n_in:
        raise ValueError(f"input width {x.shape[-1]} != spec width {spec.n_in}")
    if x.dtype != weights[0][0].dtype:
        x = x.astype(weights[0][0].dtype)
    a = x
    acts = [a]
    zs = []
    h = spec.n_layers - 1
    for k in range(h):
        w, b = weights[k]
        z = a @ w.T + b
        zs.append(z)
        a = _act(spec.activation, spec.beta, z)
        acts.append(a)
    w, b = weights[h]
    y_lin = a @ w.T + b
    y = _act(spec.out_activation, spec.beta, y_lin) if spec.out_activation else y_lin
    return y, (acts, zs, y_lin)


def mlp_backward(spec: MlpSpec, weights: list, cache, ybar: np.ndarray,
                 store: ParamStore, name: str) -> np.ndarray:
    """Accumulate parameter grads into `store`, return d loss / d x."""
    acts, zs, y_lin = cache
    h = spec.n_layers - 1
    if spec.out_activation:
        zbar = ybar * _act_d(spec.out_activation, spec.beta, y_lin)
    else:
        zbar = ybar
    w, _ = weights[h]
    store.grad_view(f"{name}/W{h}")[...] += zbar.T @ acts[h]
    store.grad_view(f"{name}/b{h}")[...] += zbar.sum(axis=0)
    abar = zbar @ w
    for k in range(h - 1, -1, -1):
        zbar = abar * _act_d(spec.activation, spec.beta, zs[k])
        w, _ = weights[k]
        store.grad_view(f"{name}/W{k}")[...] += zbar.T @ acts[k]
        store.grad_view(f"{name}/b{k}")[...] += zbar.sum(axis=0)
        abar = zbar @ w
    return abar


def mlp_value_and_input_grad(spec: MlpSpec, weights: list, x: np.ndarray,
                             out_index: int = 0):
    """Forward plus u0 = d y[out_index] / d x per sample.

    Geometry-path only: output activation must be identity. Returns
    (y, u0, cache) where cache carries everything the fused backward needs.
    """
    if spec.out_activation:
        raise ValueError("input-grad path requires a linear output layer")
    y, (acts, zs, y_lin) = mlp_forward(spec, weights, x)
    h = spec.n_layers - 1
    n = y.shape[0]
    dphis = [_act_d(spec.activation, spec.beta, z) for z in zs]
    w_out = weights[h][0]
    v = np.broadcast_to(w_out[out_index], (n, w_out.shape[1]))
    vs = [None] * h  # vs[k] = cotangent arriving at layer k's activation output
    ws = [None] * h  # ws[k] = vs[k] * phi'(z_k)
    u = v
    for k in range(h - 1, -1, -1):
        vs[k] = u
        ws[k] = u * dphis[k]
        u = ws[k] @ weights[k][0]
    return y, u, (acts, zs, y_lin, dphis, vs, ws, out_index)


def mlp_vig_backward(spec: MlpSpec, weights: list, cache, ybar: np.ndarray,
                     u0bar: np.ndarray, store: ParamStore, name: str) -> np.ndarray:
    """Backward of (y, u0) = f(x, W) given cotangents on both outputs.

    Accumulates exact parameter gradients (including the second-order path
    that u0bar induces) and returns the first-order d loss / d x from the
    y path. The Hessian term u0bar -> x is intentionally not returned.
    """
    acts, zs, y_lin, dphis, vs, ws, out_index = cache
    h = spec.n_layers - 1
    ddphis = [_act_dd(spec.activation, spec.beta, z) for z in zs]

    # first-order path through the outputs
    w_out = weights[h][0]
    store.grad_view(f"{name}/W{h}")[...] += ybar.T @ acts[h]
    store.grad_view(f"{name}/b{h}")[...] += ybar.sum(axis=0)

    # adjoint of the input-grad sweep: r walks from the input layer back up
    zbar2 = [None] * h
    r = u0bar
    for k in range(h):
        w_k = weights[k][0]
        t_k = r @ w_k.T
        store.grad_view(f"{name}/W{k}")[...] += ws[k].T @ r
        zbar2[k] = t_k * vs[k] * ddphis[k]
        r = t_k * dphis[k]
    store.grad_view(f"{name}/W{h}")[out_index] += r.sum(axis=0)

    # combined reverse sweep with both cotangent sources
    abar = ybar @ w_out
    for k in range(h - 1, -1, -1):
        zbar = abar * dphis[k] + zbar2[k]
        w_k = weights[k][0]
        store.grad_view(f"{name}/W{k}")[...] += zbar.T @ acts[k]
        store.grad_view(f"{name}/b{k}")[...] += zbar.sum(axis=0)
        abar = zbar @ w_k
    return abar


def mlp_apply(spec: MlpSpec, store: ParamStore, name: str, x: np.ndarray,
              want_grads: bool = False):
    """Single-point surface: y, and optionally full Jacobians.

    Returns y (n_out,) or (y, dy_dparams (n_out, P_mlp), dy_dx (n_out, n_in))
    where P_mlp spans this MLP's segments in allocation order.
    """
    weights = mlp_weights(store, name, spec)
    x1 = np.asarray(x, dtype=store.dtype).reshape(1, -1)
    y, cache = mlp_forward(spec, weights, x1)
    if not want_grads:
        return y[0]
    seg_names = [f"{name}/{p}{k}" for k in range(spec.n_layers) for p in ("W", "b")]
    p_total = sum(store.segments[s].size for s in seg_names)
    dy_dp = np.zeros((spec.n_out, p_total), dtype=np.float64)
    dy_dx = np.zeros((spec.n_out, spec.n_in), dtype=np.float64)
    for j in range(spec.n_out):
        store.zero_grads()
        ybar = np.zeros((1, spec.n_out), dtype=store.dtype)
        ybar[0, j] = 1.0
        xbar = mlp_backward(spec, weights, cache, ybar, store, name)
        dy_dx[j] = xbar[0]
        dy_dp[j] = np.concatenate([store.grad_view(s).ravel() for s in seg_names])
    store.zero_grads()
    return y[0], dy_dp, dy_dx
