"""Layer-wise relevance propagation and the per-parameter importance map.

Relevance starts at the logit and flows backward through each linear layer
by the z-rule: input p receives from output q the share z_pq / sum_p z_pq
of q's relevance, z_pq = activation_p * weight_qp. Biases are excluded
from the denominator, which keeps the per-layer relevance sum exactly
equal to the logit when the stabilizer is zero. ReLU passes relevance
through unchanged.

The importance map h assigns every weight and bias the (max-normalized)
aggregated relevance of the neuron it feeds into; low-h parameters form
the redundant space the poisoning stage is allowed to move in.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import EmptyInputError, PropagationError, ShapeError
from .nn import MlpModel, flatten_arrays, forward_trace

log = logging.getLogger(__name__)


@dataclass
class RelevanceMap:
    layers: list  # one vector per layer of neurons, input layer first
    source: str = "single-sample"  # or "aggregated-over-dataset"

    def __post_init__(self):
        self.layers = [np.asarray(r, dtype=float) for r in self.layers]
        for r in self.layers:
            if not np.isfinite(r).all():
                raise PropagationError("non-finite relevance")


@dataclass
class ParamRelevance:
    h: np.ndarray  # flat, len == model.n_params, entries in [0, 1]

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=float)
        if self.h.min() < 0.0 or self.h.max() > 1.0:
            raise ShapeError("importance entries must lie in [0, 1]")


def _sign(d: np.ndarray) -> np.ndarray:
    return np.where(d >= 0.0, 1.0, -1.0)


def lrp_propagate(model: MlpModel, x: np.ndarray,
                  epsilon_stab: float = 1e-6) -> RelevanceMap:
    """Per-neuron relevance of a single sample, output initialized to the logit."""
    if epsilon_stab < 0:
        raise PropagationError("epsilon_stab must be >= 0")
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ShapeError("x must be a single 1-D sample")
    logits, _, acts = forward_trace(model, x[None, :])
    rel = np.array([logits[0]])
    out = [rel]
    for l in range(len(model.weights) - 1, -1, -1):
        a = acts[l][0]  # inputs to layer l
        z = model.weights[l] * a[None, :]  # (out, in)
        d = z.sum(axis=1)
        if epsilon_stab == 0.0 and np.any(d == 0.0):
            raise PropagationError(
                "zero denominator in relevance propagation; "
                "use a positive epsilon_stab"
            )
        rel = z.T @ (rel / (d + epsilon_stab * _sign(d)))
        out.append(rel)
    return RelevanceMap(out[::-1], source="single-sample")


def aggregate_relevance(model: MlpModel, privileged_samples: Dataset,
                        epsilon_stab: float = 1e-6) -> RelevanceMap:
    """Mean absolute relevance over a sample set, layer by layer."""
    if len(privileged_samples) == 0:
        raise EmptyInputError("no samples to aggregate relevance over")
    total = None
    for i in range(len(privileged_samples)):
        rm = lrp_propagate(model, privileged_samples.features[i], epsilon_stab)
        if total is None:
            total = [np.abs(r) for r in rm.layers]
        else:
            for acc, r in zip(total, rm.layers):
                acc += np.abs(r)
    layers = [acc / len(privileged_samples) for acc in total]
    return RelevanceMap(layers, source="aggregated-over-dataset")


def param_relevance(relmap: RelevanceMap, model: MlpModel) -> ParamRelevance:
    """Each parameter inherits the relevance of its downstream neuron."""
    widths = [len(r) for r in relmap.layers]
    if widths != list(model.layer_dims):
        raise ShapeError("relevance map does not match model layout")
    h_w, h_b = [], []
    for l, w in enumerate(model.weights):
        downstream = np.abs(relmap.layers[l + 1])
        h_w.append(np.broadcast_to(downstream[:, None], w.shape))
        h_b.append(downstream)
    h = flatten_arrays(h_w, h_b)
    top = h.max()
    if top == 0.0:
        log.warning("all-zero relevance; importance map degenerates to uniform")
        return ParamRelevance(np.ones(model.n_params))
    return ParamRelevance(h / top)
