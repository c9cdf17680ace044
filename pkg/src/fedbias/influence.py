"""Tangent-kernel influence of privileged samples on the targeted group.

The empirical tangent kernel of the current model, Theta(x_i, x_j) =
<d f(x_i)/d theta, d f(x_j)/d theta>, weights each candidate sample by how
the targeted group's outputs would move if the sample were excluded from
training (one undone gradient step, linearized through the kernel):

    score(i) = -[bce'(f(x_i), y_i) + dphi/df(x_i)] * mean_j Theta(x_i, x_j)

over targets j. Positive scores mark candidates whose inclusion helps the
targeted group; the attack later keeps the lowest-scoring ones, the samples
whose gradients actively pull the targeted group's outputs toward the
majority (negative) label.
"""

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import EmptyInputError, ShapeError
from .fairness import SurrogateConfig, surrogate_phi
from .nn import (
    MlpModel,
    bce_grad,
    forward_batch,
    per_sample_output_grad,
    per_sample_output_grads,
)


@dataclass
class InfluenceScores:
    entries: list  # (sample_index, score) pairs, candidate order
    target_group: int
    model_round: int = 0

    def __post_init__(self):
        if any(not np.isfinite(s) for _, s in self.entries):
            raise ShapeError("non-finite influence score")

    def scores(self) -> np.ndarray:
        return np.array([s for _, s in self.entries])

    def to_csv(self) -> str:
        lines = ["index,score"]
        lines += [f"{int(i)},{float(s)!r}" for i, s in self.entries]
        return "\n".join(lines) + "\n"


def ntk(model: MlpModel, x_i, x_j) -> float:
    """Tangent-kernel entry for one pair of samples."""
    return float(
        per_sample_output_grad(model, np.asarray(x_i, dtype=float))
        @ per_sample_output_grad(model, np.asarray(x_j, dtype=float))
    )


def _mean_target_gradient(model, targets: Dataset, block_size: int):
    total = np.zeros(model.n_params)
    for lo in range(0, len(targets), block_size):
        grads = per_sample_output_grads(model, targets.features[lo:lo + block_size])
        total += grads.sum(axis=0)
    return total / len(targets)


def influence_scores(model: MlpModel, candidates: Dataset, targets: Dataset,
                     surrogate: SurrogateConfig, *, candidate_indices=None,
                     model_round: int = 0, block_size: int = 256) -> InfluenceScores:
    """Score every candidate against the targeted set.

    ``candidate_indices`` optionally carries the candidates' positions in a
    parent dataset for the report; defaults to 0..n-1. The fairness ratio
    phi needs both groups, so its per-sample derivative is evaluated on the
    union of candidates and targets. Gradients are materialized in
    ``block_size`` chunks to bound memory.
    """
    if len(targets) == 0:
        raise EmptyInputError("no targeted-group samples to score against")
    if len(candidates) == 0:
        raise EmptyInputError("no candidate samples to score")
    if candidate_indices is None:
        candidate_indices = np.arange(len(candidates))
    candidate_indices = np.asarray(candidate_indices, dtype=int)
    if candidate_indices.shape != (len(candidates),):
        raise ShapeError("candidate_indices must match the candidate set")

    union_logits = forward_batch(
        model, np.concatenate([candidates.features, targets.features]))
    union_groups = np.concatenate([candidates.groups, targets.groups])
    _, dphi = surrogate_phi(union_logits, union_groups)
    cand_logits = union_logits[: len(candidates)]
    bracket = bce_grad(cand_logits, candidates.labels) + dphi[: len(candidates)]

    mean_grad = _mean_target_gradient(model, targets, block_size)
    kernel_mean = np.empty(len(candidates))
    for lo in range(0, len(candidates), block_size):
        grads = per_sample_output_grads(model, candidates.features[lo:lo + block_size])
        kernel_mean[lo:lo + grads.shape[0]] = grads @ mean_grad

    scores = -bracket * kernel_mean
    target_group = int(targets.groups[0]) if len(targets) else 0
    entries = [(int(i), float(s)) for i, s in zip(candidate_indices, scores)]
    return InfluenceScores(entries, target_group=target_group,
                           model_round=model_round)
