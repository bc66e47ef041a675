"""Dense networks in float64 with hand-derived gradients and an Adam optimizer.

Every learned component downstream (noise predictors, inverse-dynamics and
reward nets, policies and critics) trains through this module, so the
gradients here are verified against finite differences instead of trusted.
Forward passes are pure functions of (params, input) and all arithmetic is
64-bit.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mlp-v1"
ACTIVATIONS = ("silu",)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


@dataclass
class MlpParams:
    """Weights of a fully connected net: silu on hidden layers, linear output.

    weights[i] has shape (layer_sizes[i], layer_sizes[i+1]); biases[i] has
    shape (layer_sizes[i+1],). All arrays are float64.
    """

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "silu"
    init_seed: int | None = None

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def copy(self) -> "MlpParams":
        return MlpParams(
            layer_sizes=list(self.layer_sizes),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activation=self.activation,
            init_seed=self.init_seed,
        )


@dataclass
class MlpGrads:
    """Parameter gradients aligned index-for-index with MlpParams."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) for w in self.weights) and all(
            np.all(np.isfinite(b)) for b in self.biases
        )

    def scaled(self, c: float) -> "MlpGrads":
        return MlpGrads([w * c for w in self.weights], [b * c for b in self.biases])

    def add(self, other: "MlpGrads") -> "MlpGrads":
        return MlpGrads(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )


def init_mlp(
    layer_sizes: list[int], seed: int, activation: str = "silu"
) -> MlpParams:
    """Initialize weights and biases uniformly in +-1/sqrt(fan_in)."""
    if len(layer_sizes) < 2:
        raise ValueError(f"need at least input and output sizes, got {layer_sizes}")
    if any(s < 1 for s in layer_sizes):
        raise ValueError(f"layer sizes must be positive, got {layer_sizes}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}, expected one of {ACTIVATIONS}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams(list(layer_sizes), weights, biases, activation, init_seed=seed)


def _as_batch(params: MlpParams, x: np.ndarray, name: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
        squeeze = True
    elif x.ndim == 2:
        squeeze = False
    else:
        raise ValueError(f"{name} must be 1-D or 2-D, got shape {x.shape}")
    if x.shape[1] != params.in_dim:
        raise ValueError(
            f"{name} has {x.shape[1]} features but the first layer expects {params.in_dim}"
        )
    return x, squeeze


def _forward_cached(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list, list]:
    """Forward pass keeping pre-activations and layer inputs for backprop."""
    pre_acts, inputs = [], []
    h = x
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        pre_acts.append(z)
        h = z if i == last else silu(z)
    return h, pre_acts, inputs


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Pure forward pass; accepts a single input vector or a (batch, dim) matrix."""
    xb, squeeze = _as_batch(params, x, "input")
    out, _, _ = _forward_cached(params, xb)
    return out[0] if squeeze else out


def backward_with_input(
    params: MlpParams, x: np.ndarray, upstream: np.ndarray
) -> tuple[MlpGrads, np.ndarray]:
    """Backprop an upstream gradient; returns parameter grads and d(loss)/d(input).

    upstream must have the shape forward(params, x) would return and be the
    gradient of a scalar loss with respect to that output.
    """
    xb, squeeze = _as_batch(params, x, "input")
    up = np.asarray(upstream, dtype=np.float64)
    if squeeze:
        if up.shape != (params.out_dim,):
            raise ValueError(
                f"upstream shape {up.shape} does not match output shape ({params.out_dim},)"
            )
        up = up[None, :]
    elif up.shape != (xb.shape[0], params.out_dim):
        raise ValueError(
            f"upstream shape {up.shape} does not match output shape "
            f"({xb.shape[0]}, {params.out_dim})"
        )
    if not np.all(np.isfinite(up)):
        raise ValueError("upstream gradient contains non-finite values")

    _, pre_acts, inputs = _forward_cached(params, xb)
    gw = [np.empty(0)] * params.n_layers
    gb = [np.empty(0)] * params.n_layers
    delta = up
    for i in range(params.n_layers - 1, -1, -1):
        if i != params.n_layers - 1:
            delta = delta * silu_grad(pre_acts[i])
        gw[i] = inputs[i].T @ delta
        gb[i] = delta.sum(axis=0)
        delta = delta @ params.weights[i].T
    x_grad = delta[0] if squeeze else delta
    return MlpGrads(gw, gb), x_grad


def backward(params: MlpParams, x: np.ndarray, upstream: np.ndarray) -> MlpGrads:
    """Parameter gradients of sum(upstream * forward(params, x))."""
    grads, _ = backward_with_input(params, x, upstream)
    return grads


@dataclass
class AdamState:
    """Optimizer state. use_moments=False degrades to plain gradient descent."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    use_moments: bool = True
    step_count: int = 0
    m_w: list[np.ndarray] = field(default_factory=list)
    v_w: list[np.ndarray] = field(default_factory=list)
    m_b: list[np.ndarray] = field(default_factory=list)
    v_b: list[np.ndarray] = field(default_factory=list)


def init_optimizer(params: MlpParams, lr: float, use_moments: bool = True) -> AdamState:
    if not (lr > 0 and np.isfinite(lr)):
        raise ValueError(f"learning rate must be positive and finite, got {lr}")
    return AdamState(
        lr=lr,
        use_moments=use_moments,
        m_w=[np.zeros_like(w) for w in params.weights],
        v_w=[np.zeros_like(w) for w in params.weights],
        m_b=[np.zeros_like(b) for b in params.biases],
        v_b=[np.zeros_like(b) for b in params.biases],
    )


def sgd_step(
    params: MlpParams, state: AdamState, grads: MlpGrads
) -> tuple[MlpParams, AdamState]:
    """One optimizer step. Non-finite gradients skip the step with a warning."""
    if len(grads.weights) != params.n_layers or len(grads.biases) != params.n_layers:
        raise ValueError("gradient layer count does not match parameters")
    for i, (w, gw) in enumerate(zip(params.weights, grads.weights)):
        if w.shape != gw.shape:
            raise ValueError(f"weight grad {i} has shape {gw.shape}, expected {w.shape}")
    if not grads.is_finite():
        logger.warning("non-finite gradients at step %d; skipping update", state.step_count)
        return params, state

    t = state.step_count + 1
    new = params.copy()
    if not state.use_moments:
        for i in range(params.n_layers):
            new.weights[i] -= state.lr * grads.weights[i]
            new.biases[i] -= state.lr * grads.biases[i]
        new_state = AdamState(
            lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps,
            use_moments=False, step_count=t,
            m_w=state.m_w, v_w=state.v_w, m_b=state.m_b, v_b=state.v_b,
        )
        return new, new_state

    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    m_w, v_w, m_b, v_b = [], [], [], []
    for i in range(params.n_layers):
        mw = b1 * state.m_w[i] + (1 - b1) * grads.weights[i]
        vw = b2 * state.v_w[i] + (1 - b2) * grads.weights[i] ** 2
        mb = b1 * state.m_b[i] + (1 - b1) * grads.biases[i]
        vb = b2 * state.v_b[i] + (1 - b2) * grads.biases[i] ** 2
        new.weights[i] -= state.lr * (mw / corr1) / (np.sqrt(vw / corr2) + state.eps)
        new.biases[i] -= state.lr * (mb / corr1) / (np.sqrt(vb / corr2) + state.eps)
        m_w.append(mw); v_w.append(vw); m_b.append(mb); v_b.append(vb)
    new_state = AdamState(
        lr=state.lr, beta1=b1, beta2=b2, eps=state.eps, use_moments=True,
        step_count=t, m_w=m_w, v_w=v_w, m_b=m_b, v_b=v_b,
    )
    return new, new_state


def mlp_record(params: MlpParams) -> dict:
    """JSON-safe dict of an MLP; float64 values round-trip exactly."""
    return {
        "format": CHECKPOINT_FORMAT,
        "layer_sizes": list(params.layer_sizes),
        "activation": params.activation,
        "init_seed": params.init_seed,
        "weights": [w.ravel().tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }


def save_mlp(params: MlpParams, path: str | Path) -> None:
    """Write a versioned JSON checkpoint; float64 values round-trip exactly."""
    Path(path).write_text(json.dumps(mlp_record(params)))


def mlp_from_record(record: dict) -> MlpParams:
    fmt = record.get("format")
    if fmt != CHECKPOINT_FORMAT:
        raise ValueError(
            f"checkpoint format {fmt!r} not supported, expected {CHECKPOINT_FORMAT!r}"
        )
    sizes = record["layer_sizes"]
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        flat = np.asarray(record["weights"][i], dtype=np.float64)
        if flat.size != fan_in * fan_out:
            raise ValueError(
                f"checkpoint weight {i} has {flat.size} values, expected {fan_in * fan_out}"
            )
        weights.append(flat.reshape(fan_in, fan_out))
        b = np.asarray(record["biases"][i], dtype=np.float64)
        if b.size != fan_out:
            raise ValueError(f"checkpoint bias {i} has {b.size} values, expected {fan_out}")
        biases.append(b)
    return MlpParams(
        layer_sizes=list(sizes),
        weights=weights,
        biases=biases,
        activation=record.get("activation", "silu"),
        init_seed=record.get("init_seed"),
    )


def load_mlp(path: str | Path) -> MlpParams:
    try:
        record = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"corrupt checkpoint {path}: {exc}") from exc
    return mlp_from_record(record)


def iter_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Yield index arrays covering a shuffled range(n) in batch_size chunks."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
