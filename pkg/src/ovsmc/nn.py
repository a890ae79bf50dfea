"""Small dense feed-forward networks with a hand-written reverse pass.

Parameters are kept as one flat vector so that they can be handed to the
optimisers directly. Layout, layer by layer: the ``(n_in, n_out)`` weight
matrix in row-major order, then the ``n_out`` biases. A layer computes
``x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

HIDDEN_ACTIVATIONS = ("relu",)
OUTPUT_ACTIVATIONS = ("linear", "softplus")


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "linear"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"need at least two positive layer sizes, got {sizes}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]


@dataclass(frozen=True)
class MlpParams:
    flat: np.ndarray
    spec: MlpSpec

    def __post_init__(self):
        flat = np.array(self.flat, dtype=float).ravel()
        if flat.size != self.spec.n_params:
            raise ValueError(f"flat has {flat.size} entries, spec needs {self.spec.n_params}")
        object.__setattr__(self, "flat", flat)

    def layers(self):
        """Yield ``(W, b)`` views into the flat vector."""
        off = 0
        sizes = self.spec.layer_sizes
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            W = self.flat[off : off + n_in * n_out].reshape(n_in, n_out)
            off += n_in * n_out
            b = self.flat[off : off + n_out]
            off += n_out
            yield W, b

    def with_flat(self, flat) -> "MlpParams":
        return MlpParams(flat, self.spec)


def softplus(z):
    return np.logaddexp(0.0, z)


def mlp_init(spec: MlpSpec, seed) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    parts = []
    sizes = spec.layer_sizes
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (n_in + n_out))
        parts.append(rng.uniform(-limit, limit, size=n_in * n_out))
        parts.append(np.zeros(n_out))
    return MlpParams(np.concatenate(parts), spec)


def _as_batch(params, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != params.spec.n_in:
        raise ValueError(f"input has shape {x.shape}, network expects {params.spec.n_in} features")
    return X, single


def _forward(params: MlpParams, X):
    """Forward pass keeping pre-activations for the reverse pass."""
    acts, pres = [X], []
    h = X
    layers = list(params.layers())
    for k, (W, b) in enumerate(layers):
        z = h @ W + b
        pres.append(z)
        if k < len(layers) - 1:
            h = np.maximum(z, 0.0)
        elif params.spec.output_activation == "softplus":
            h = softplus(z)
        else:
            h = z
        acts.append(h)
    return acts, pres


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows."""
    X, single = _as_batch(params, x)
    out = _forward(params, X)[0][-1]
    return out[0] if single else out


def mlp_vjp(params: MlpParams, x, cotangent):
    """Vector-Jacobian products of the output w.r.t. parameters and input.

    For a batch the parameter gradient is summed over rows; the input
    gradient is returned per row. The relu derivative at 0 is taken as 0.
    """
    X, single = _as_batch(params, x)
    C = np.asarray(cotangent, dtype=float)
    C = C[None, :] if C.ndim == 1 else C
    if C.shape != (X.shape[0], params.spec.n_out):
        raise ValueError(f"cotangent has shape {np.shape(cotangent)}, expected {(X.shape[0], params.spec.n_out)}")
    acts, pres = _forward(params, X)
    layers = list(params.layers())
    grads = []
    if params.spec.output_activation == "softplus":
        delta = C * expit(pres[-1])
    else:
        delta = C
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        grads.append((acts[k].T @ delta, delta.sum(axis=0)))
        delta = delta @ W.T
        if k > 0:
            delta = delta * (pres[k - 1] > 0.0)
    flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in reversed(grads)])
    return flat, (delta[0] if single else delta)
