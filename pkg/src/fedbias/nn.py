"""Minimal feed-forward network with exact backprop.

The network is a plain MLP: ReLU hidden layers, a single identity output
unit (a logit; callers apply the sigmoid). Everything operates on float64
numpy arrays and is deterministic. Three gradient paths are exposed:

* ``backward``              -- gradient of the mean BCE loss over a batch,
                               with an optional per-sample output-gradient
                               injection (used for fairness penalties),
* ``per_sample_output_grads`` -- d logit / d theta per sample (tangent
                               features for kernel computations),
* ``sgd_step``              -- SGD with momentum.

Parameters also have a flat view ("param vector"): layer-major order,
W_0 row-major, then b_0, then W_1, ... Flat vectors are what aggregation,
distances and kernels operate on.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInputError, ShapeError

MAGIC = b"FBN1"


@dataclass
class MlpModel:
    """Weights/biases of the MLP. weights[l] has shape (out_l, in_l)."""

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        dims = self.layer_dims
        if len(dims) < 2:
            raise ShapeError("need at least input and output layer")
        if dims[-1] != 1:
            raise ShapeError(f"final layer must have 1 unit, got {dims[-1]}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ShapeError("one weight matrix and bias vector per layer transition")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[l + 1], dims[l]):
                raise ShapeError(
                    f"weights[{l}] shape {w.shape}, expected {(dims[l + 1], dims[l])}"
                )
            if b.shape != (dims[l + 1],):
                raise ShapeError(f"biases[{l}] shape {b.shape}, expected ({dims[l + 1]},)")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ShapeError(f"non-finite parameters in layer {l}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpModel":
        return MlpModel(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )


@dataclass
class OptimizerState:
    """SGD-with-momentum state: v <- m*v + g; theta <- theta - lr*v."""

    learning_rate: float
    momentum: float = 0.0
    momentum_buffers: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


def init_model(layer_dims, seed: int) -> MlpModel:
    """Glorot-uniform initialization, deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(list(layer_dims), weights, biases)


def zeros_like_model(layer_dims) -> MlpModel:
    weights = [
        np.zeros((o, i)) for i, o in zip(layer_dims[:-1], layer_dims[1:])
    ]
    biases = [np.zeros(o) for o in layer_dims[1:]]
    return MlpModel(list(layer_dims), weights, biases)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def forward_trace(model: MlpModel, X: np.ndarray):
    """Batched forward pass keeping per-layer values.

    Returns (logits (B,), pre_acts, acts) where acts[0] is the input batch
    and acts[l] the post-activation output of layer l; pre_acts[l] is the
    affine output of layer l. Cached values feed backprop and relevance
    propagation.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.layer_dims[0]:
        raise ShapeError(
            f"input dim {X.shape[1]} != model input dim {model.layer_dims[0]}"
        )
    acts = [X]
    pre_acts = []
    h = X
    last = model.n_layers - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        pre_acts.append(z)
        h = z if l == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts[-1][:, 0], pre_acts, acts


def forward_batch(model: MlpModel, X: np.ndarray) -> np.ndarray:
    return forward_trace(model, X)[0]


def forward(model: MlpModel, x) -> float:
    """Raw (pre-sigmoid) output for a single sample."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ShapeError("forward expects a single feature vector")
    return float(forward_batch(model, x[None, :])[0])


def bce_loss(logit, y):
    """Binary cross-entropy of sigmoid(logit) vs y, log-sum-exp stable."""
    logit = np.asarray(logit, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.maximum(logit, 0.0) - logit * y + np.log1p(np.exp(-np.abs(logit)))


def bce_grad(logit, y):
    """d bce / d logit = sigmoid(logit) - y."""
    return sigmoid(logit) - np.asarray(y, dtype=float)


def _backprop_coeffs(model, pre_acts, acts, out_coeff):
    """Backprop per-output-unit coefficients into flat parameter gradients.

    out_coeff has shape (B,): the derivative of the scalar objective w.r.t.
    each sample's logit. Returns the summed flat gradient.
    """
    grads_w = [None] * model.n_layers
    grads_b = [None] * model.n_layers
    delta = out_coeff[:, None]
    for l in range(model.n_layers - 1, -1, -1):
        grads_w[l] = delta.T @ acts[l]
        grads_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ model.weights[l]) * (pre_acts[l - 1] > 0)
    return flatten_arrays(grads_w, grads_b)


def backward(model: MlpModel, X, y, loss_grad_extra=None) -> np.ndarray:
    """Gradient of mean-BCE over the batch, plus injected output terms.

    The injected ``loss_grad_extra[i]`` is an absolute coefficient on
    d logit_i / d theta (not averaged over the batch); callers that add a
    batch-level penalty P(logits) pass dP/d logit_i here.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if X.shape[0] == 0:
        raise EmptyInputError("backward needs a nonempty batch")
    if X.shape[0] != y.shape[0]:
        raise ShapeError("X and y lengths differ")
    logits, pre_acts, acts = forward_trace(model, X)
    coeff = bce_grad(logits, y) / X.shape[0]
    if loss_grad_extra is not None:
        extra = np.asarray(loss_grad_extra, dtype=float)
        if extra.shape != logits.shape:
            raise ShapeError("loss_grad_extra must have one entry per sample")
        coeff = coeff + extra
    return _backprop_coeffs(model, pre_acts, acts, coeff)


def per_sample_output_grads(model: MlpModel, X) -> np.ndarray:
    """d logit / d theta for every sample: (B, P) in flat order."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    logits, pre_acts, acts = forward_trace(model, X)
    B = X.shape[0]
    out = np.empty((B, model.n_params))
    delta = np.ones((B, 1))
    # walk backwards, writing each layer's slice of the flat vector
    offsets = _flat_offsets(model.layer_dims)
    for l in range(model.n_layers - 1, -1, -1):
        w_off, b_off, end = offsets[l]
        gw = np.einsum("bo,bi->boi", delta, acts[l])
        out[:, w_off:b_off] = gw.reshape(B, -1)
        out[:, b_off:end] = delta
        if l > 0:
            delta = (delta @ model.weights[l]) * (pre_acts[l - 1] > 0)
    return out


def per_sample_output_grad(model: MlpModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ShapeError("per_sample_output_grad expects a single feature vector")
    return per_sample_output_grads(model, x[None, :])[0]


def sgd_step(model: MlpModel, grad: np.ndarray, state: OptimizerState) -> MlpModel:
    """One SGD-with-momentum step, in place; returns the model."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != (model.n_params,):
        raise ShapeError(f"grad length {grad.shape} != parameter count {model.n_params}")
    if state.momentum_buffers is None:
        state.momentum_buffers = np.zeros(model.n_params)
    elif state.momentum_buffers.shape != grad.shape:
        raise ShapeError("momentum buffer length != parameter count")
    state.momentum_buffers = state.momentum * state.momentum_buffers + grad
    theta = flatten(model) - state.learning_rate * state.momentum_buffers
    _write_flat(model, theta)
    return model


# ---------------------------------------------------------------------------
# flat parameter-vector view


def _flat_offsets(layer_dims):
    """Per layer: (weight offset, bias offset, end offset) into the flat vector."""
    offsets = []
    pos = 0
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        w_off = pos
        b_off = pos + fan_out * fan_in
        pos = b_off + fan_out
        offsets.append((w_off, b_off, pos))
    return offsets


def flatten_arrays(weights, biases) -> np.ndarray:
    parts = []
    for w, b in zip(weights, biases):
        parts.append(np.asarray(w, dtype=float).ravel())
        parts.append(np.asarray(b, dtype=float).ravel())
    return np.concatenate(parts)


def flatten(model: MlpModel) -> np.ndarray:
    return flatten_arrays(model.weights, model.biases)


def unflatten(layer_dims, vec: np.ndarray) -> MlpModel:
    vec = np.asarray(vec, dtype=float)
    model = zeros_like_model(layer_dims)
    if vec.shape != (model.n_params,):
        raise ShapeError(f"vector length {vec.shape} != parameter count {model.n_params}")
    _write_flat(model, vec)
    return model


def _write_flat(model: MlpModel, vec: np.ndarray):
    for (w_off, b_off, end), w, b in zip(
        _flat_offsets(model.layer_dims), model.weights, model.biases
    ):
        w[...] = vec[w_off:b_off].reshape(w.shape)
        b[...] = vec[b_off:end]


def l2_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def axpy(a: np.ndarray, scale: float, b: np.ndarray) -> np.ndarray:
    """a + scale * b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch {a.shape} vs {b.shape}")
    return a + scale * b


# ---------------------------------------------------------------------------
# checkpoint serialization
#
# Byte layout (all little-endian): magic b"FBN1" | uint32 L = len(layer_dims)
# | L x uint32 layer dims | P x float64 parameters in flat order.


def save_model(model: MlpModel, path):
    dims = np.asarray(model.layer_dims, dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.asarray([len(dims)], dtype="<u4").tobytes())
        fh.write(dims.tobytes())
        fh.write(flatten(model).astype("<f8").tobytes())


def load_model(path) -> MlpModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ShapeError(f"not a model checkpoint: bad magic {blob[:4]!r}")
    n_dims = int(np.frombuffer(blob, dtype="<u4", count=1, offset=4)[0])
    dims = np.frombuffer(blob, dtype="<u4", count=n_dims, offset=8).astype(int)
    vec = np.frombuffer(blob, dtype="<f8", offset=8 + 4 * n_dims).astype(float)
    return unflatten(list(dims), vec)
