"""Malicious-client pipeline: bias a subgroup while staying inconspicuous.

A flagged client runs three stages on top of ordinary local training:

1. benign_local_train      -- fairness-penalized BCE training, the same
                              procedure honest clients run,
2. select_biasing_dataset  -- rank privileged-group samples by their
                              tangent-kernel influence on the targeted
                              group and keep the most harmful fraction,
3. poison_optimize         -- refit on the biasing set while penalizing
                              movement of high-relevance parameters
                              (gamma-term) and overall update magnitude
                              (rho-term), so the poisoned update hides in
                              the model's redundant space.

The anchoring baseline is a conventional data-poisoning comparison: train
on local data augmented with label-flipped near-duplicates of targeted
samples.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError, EmptyInputError
from .fairness import SurrogateConfig, penalty_logit_grads
from .influence import influence_scores
from .lrp import ParamRelevance, aggregate_relevance, param_relevance
from .nn import (
    MlpModel,
    OptimizerState,
    backward,
    bce_loss,
    flatten,
    forward_trace,
    sgd_step,
    unflatten,
)

log = logging.getLogger(__name__)


@dataclass
class AttackConfig:
    kappa: float = 0.4  # biasing fraction of local privileged samples
    gamma: float = 0.4  # weight of the parameter-importance penalty
    rho: float = 0.7  # weight of the update-magnitude penalty
    mu: float = 0.8  # fairness tolerance shared with the surrogate
    target_group: int = 0
    local_epochs: int = 1
    poison_epochs: int = 5
    poison_lr: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.kappa <= 1.0:
            raise ConfigError("kappa must be in [0, 1]")
        if self.gamma < 0 or self.rho < 0:
            raise ConfigError("gamma and rho must be nonnegative")
        if self.target_group not in (0, 1):
            raise ConfigError("target_group must be 0 or 1")
        if self.poison_epochs < 0 or self.local_epochs < 0:
            raise ConfigError("epoch counts must be nonnegative")
        if self.poison_lr <= 0:
            raise ConfigError("poison_lr must be positive")

    def surrogate(self) -> SurrogateConfig:
        return SurrogateConfig(mu=self.mu)


@dataclass
class BiasingDataset:
    indices: list  # positions in the client's local Dataset, unique
    parent_round: int = 0
    score_quantiles: list | None = None  # (min, q25, median, q75, max)

    def __post_init__(self):
        if len(set(self.indices)) != len(self.indices):
            raise ConfigError("biasing indices must be unique")


def _batches(n, batch_size, rng):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def benign_local_train(theta_g: MlpModel, local_data: Dataset, epochs,
                       optimizer: OptimizerState,
                       surrogate: SurrogateConfig | None,
                       batch_size: int = 32, rng=None) -> MlpModel:
    """Fairness-penalized minibatch BCE training from the received model.

    The same routine serves honest clients; surrogate=None trains plain
    BCE. Batches missing one of the groups skip the penalty for that batch
    (logged once per call).
    """
    if len(local_data) == 0:
        raise EmptyInputError("cannot train on an empty dataset")
    model = theta_g.copy()
    state = OptimizerState(optimizer.learning_rate, optimizer.momentum)
    skipped = 0
    for _ in range(int(epochs)):
        for idx in _batches(len(local_data), batch_size, rng):
            X = local_data.features[idx]
            y = local_data.labels[idx]
            extra = None
            if surrogate is not None and surrogate.penalty_weight > 0:
                g = local_data.groups[idx]
                if (g == 0).any() and (g == 1).any():
                    logits = forward_trace(model, X)[0]
                    _, extra = penalty_logit_grads(logits, g, surrogate)
                else:
                    skipped += 1
            sgd_step(model, backward(model, X, y, loss_grad_extra=extra), state)
    if skipped:
        log.info("fairness penalty skipped on %d single-group batches", skipped)
    return model


def select_biasing_dataset(theta_g: MlpModel, local_data: Dataset, tau: int,
                           kappa: float,
                           surrogate: SurrogateConfig | None = None,
                           parent_round: int = 0) -> BiasingDataset:
    """Most-harmful privileged samples by ascending influence score.

    Candidates are the local privileged-group (1 - tau) samples, scored
    against the local targeted-group samples; the first ceil(kappa * n)
    in ascending score order form the biasing set, crossing into small
    positive scores when the negative ones run out.
    """
    surrogate = surrogate or SurrogateConfig()
    priv = local_data.group_indices(1 - tau)
    targets_idx = local_data.group_indices(tau)
    if len(priv) == 0:
        raise EmptyInputError("no privileged samples to select from")
    if len(targets_idx) == 0:
        raise EmptyInputError("no targeted-group samples locally")
    take = math.ceil(kappa * len(priv))
    if take == 0:
        return BiasingDataset([], parent_round)
    scores = influence_scores(
        theta_g,
        local_data.subset(priv),
        local_data.subset(targets_idx),
        surrogate,
        candidate_indices=priv,
        model_round=parent_round,
    )
    arr = scores.scores()
    order = np.argsort(arr, kind="stable")
    chosen = [int(priv[i]) for i in order[:take]]
    qs = np.quantile(arr, [0.0, 0.25, 0.5, 0.75, 1.0])
    return BiasingDataset(chosen, parent_round, [float(v) for v in qs])


def _poison_objective_grad(model, X, y, delta, h, gamma, rho):
    grad = backward(model, X, y)
    grad += 2.0 * gamma * h * delta
    norm = np.linalg.norm(delta)
    if norm > 0:
        grad += rho * delta / norm
    return grad


def poison_optimize(theta_b: MlpModel, local_data: Dataset,
                    biasing: BiasingDataset, h: ParamRelevance, gamma, rho,
                    poison_epochs, poison_lr) -> MlpModel:
    """Full-batch gradient descent on the stealth-poisoning objective.

    Starting from theta_b, minimize mean BCE over the biasing set plus
    gamma * sum h * delta^2 plus rho * ||delta||_2 with delta the shift
    from theta_b. An empty biasing set returns theta_b unchanged (both
    penalties vanish at delta = 0).
    """
    if len(biasing.indices) == 0:
        return theta_b.copy()
    data = local_data.subset(biasing.indices)
    X, y = data.features, data.labels
    base = flatten(theta_b)
    theta = base.copy()
    for _ in range(int(poison_epochs)):
        model = unflatten(theta_b.layer_dims, theta)
        grad = _poison_objective_grad(model, X, y, theta - base, h.h, gamma, rho)
        if not np.isfinite(grad).all():
            raise ConfigError("poisoning objective diverged (non-finite gradient)")
        theta = theta - poison_lr * grad
    return unflatten(theta_b.layer_dims, theta)


@dataclass
class AttackResult:
    theta_p: MlpModel
    theta_b: MlpModel
    aborted: bool = False
    diagnostics: dict = field(default_factory=dict)


def malicious_update(theta_g: MlpModel, local_data: Dataset,
                     attack_cfg: AttackConfig, round_idx: int,
                     optimizer: OptimizerState, batch_size: int = 32,
                     rng=None,
                     peer_surrogate: SurrogateConfig | None = None) -> AttackResult:
    """Full pipeline for one flagged client in one round.

    The benign reference model theta_b is trained with peer_surrogate,
    the same local objective honest clients run, so the update blends in;
    the attacker's own mu-surrogate only steers the biasing-set selection.
    Falls back to the benign update (aborted=True) when the local shard
    lacks either group, since both the biasing set and the relevance
    aggregation need them.
    """
    surrogate = attack_cfg.surrogate()
    theta_b = benign_local_train(
        theta_g, local_data, attack_cfg.local_epochs, optimizer,
        peer_surrogate, batch_size=batch_size, rng=rng,
    )
    tau = attack_cfg.target_group
    priv_idx = local_data.group_indices(1 - tau)
    if len(priv_idx) == 0 or len(local_data.group_indices(tau)) == 0:
        log.info("round %d: attack aborted, local shard lacks a group", round_idx)
        return AttackResult(theta_b.copy(), theta_b, aborted=True,
                            diagnostics={"aborted": True})

    relmap = aggregate_relevance(theta_b, local_data.subset(priv_idx))
    h = param_relevance(relmap, theta_b)
    biasing = select_biasing_dataset(
        theta_g, local_data, tau, attack_cfg.kappa, surrogate,
        parent_round=round_idx,
    )
    theta_p = poison_optimize(
        theta_b, local_data, biasing, h, attack_cfg.gamma, attack_cfg.rho,
        attack_cfg.poison_epochs, attack_cfg.poison_lr,
    )

    delta = flatten(theta_p) - flatten(theta_b)
    diag = {
        "aborted": False,
        "biasing_size": len(biasing.indices),
        "shift_norm": float(np.linalg.norm(delta)),
        "importance_weighted_shift": float(np.sum(h.h * delta * delta)),
    }
    if biasing.score_quantiles is not None:
        diag["influence_quantiles"] = biasing.score_quantiles
    return AttackResult(theta_p, theta_b, aborted=False, diagnostics=diag)


def anchoring_baseline(local_data: Dataset, tau: int, poison_fraction,
                       perturb_scale, seed) -> Dataset:
    """Augment with label-flipped near-copies of targeted-group samples."""
    if not 0.0 <= poison_fraction <= 1.0:
        raise ConfigError("poison_fraction must be in [0, 1]")
    if perturb_scale < 0:
        raise ConfigError("perturb_scale must be nonnegative")
    targets = local_data.group_indices(tau)
    if len(targets) == 0:
        raise EmptyInputError("no targeted-group samples to anchor on")
    n_new = math.ceil(poison_fraction * len(local_data))
    if n_new == 0:
        return local_data
    rng = np.random.default_rng(seed)
    parents = rng.choice(targets, size=n_new, replace=len(targets) < n_new)
    feats = local_data.features[parents]
    feats = feats + perturb_scale * rng.standard_normal(feats.shape)
    labels = 1 - local_data.labels[parents]
    groups = np.full(n_new, tau, dtype=int)
    return Dataset(
        np.concatenate([local_data.features, feats]),
        np.concatenate([local_data.labels, labels]),
        np.concatenate([local_data.groups, groups]),
        local_data.provenance,
    )


def local_bce_loss(model: MlpModel, data: Dataset) -> float:
    """Mean BCE of a model on a dataset (used for loss-based reweighting)."""
    logits = forward_trace(model, data.features)[0]
    return float(np.mean(bce_loss(logits, data.labels)))
