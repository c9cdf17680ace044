"""Group fairness metrics and a differentiable surrogate penalty.

Hard metrics (equal-opportunity difference, demographic-parity difference,
accuracy) work on {0,1} prediction arrays; ``predict``/``evaluate`` bridge
from a model, thresholding sigmoid(logit) at 0.5. The training-time
surrogate uses soft positive rates so a hinge on the disparate-impact
ratio can be pushed through backprop.
"""

import json
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import EmptyInputError, MetricUndefinedError, ShapeError
from .nn import MlpModel, forward_batch, sigmoid


def predict(model: MlpModel, X: np.ndarray) -> np.ndarray:
    """Hard {0,1} predictions; sigmoid(l) >= 0.5 iff l >= 0."""
    return (forward_batch(model, X) >= 0.0).astype(int)


def _arrays(*seqs):
    out = [np.asarray(s) for s in seqs]
    if any(a.shape != out[0].shape or a.ndim != 1 for a in out):
        raise ShapeError("prediction/label/group arrays must match 1-D shapes")
    if out[0].shape[0] == 0:
        raise EmptyInputError("no samples")
    return out


def compute_utility(preds, labels) -> float:
    preds, labels = _arrays(preds, labels)
    return float(np.mean(preds == labels))


def compute_eod(preds, labels, groups) -> float:
    """|TPR(group 0) - TPR(group 1)|; needs positives in both groups."""
    preds, labels, groups = _arrays(preds, labels, groups)
    tpr = []
    for g in (0, 1):
        mask = (groups == g) & (labels == 1)
        if not mask.any():
            raise MetricUndefinedError(f"group {g} has no positive samples")
        tpr.append(float(preds[mask].mean()))
    return abs(tpr[0] - tpr[1])


def compute_dpd(preds, groups) -> float:
    """max over groups of |P(pred=1 | group) - P(pred=1)|."""
    preds, groups = _arrays(preds, groups)
    overall = float(preds.mean())
    gaps = []
    for g in (0, 1):
        mask = groups == g
        if not mask.any():
            raise MetricUndefinedError(f"group {g} is empty")
        gaps.append(abs(float(preds[mask].mean()) - overall))
    return max(gaps)


@dataclass
class GroupRates:
    n: int
    base_rate: float  # fraction of positives among labels
    positive_rate: float  # fraction predicted positive
    tpr: float  # nan when the group has no positives


@dataclass
class FairnessReport:
    eod: float
    dpd: float
    utility: float
    rates: dict  # group id -> GroupRates

    def to_dict(self) -> dict:
        flat = {
            "eod": self.eod,
            "dpd": self.dpd,
            "utility": self.utility,
        }
        for g, r in sorted(self.rates.items()):
            flat[f"rates.g{g}.n"] = r.n
            flat[f"rates.g{g}.base_rate"] = r.base_rate
            flat[f"rates.g{g}.positive_rate"] = r.positive_rate
            flat[f"rates.g{g}.tpr"] = r.tpr
        return flat

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def evaluate(model: MlpModel, dataset: Dataset) -> FairnessReport:
    preds = predict(model, dataset.features)
    rates = {}
    for g in (0, 1):
        mask = dataset.groups == g
        pos = mask & (dataset.labels == 1)
        rates[g] = GroupRates(
            n=int(mask.sum()),
            base_rate=float(pos.sum() / mask.sum()) if mask.any() else float("nan"),
            positive_rate=float(preds[mask].mean()) if mask.any() else float("nan"),
            tpr=float(preds[pos].mean()) if pos.any() else float("nan"),
        )
    return FairnessReport(
        eod=compute_eod(preds, dataset.labels, dataset.groups),
        dpd=compute_dpd(preds, dataset.groups),
        utility=compute_utility(preds, dataset.labels),
        rates=rates,
    )


# ---------------------------------------------------------------------------
# differentiable surrogate

@dataclass
class SurrogateConfig:
    mu: float = 0.8  # disparate-impact ratio the hinge enforces
    penalty_weight: float = 1.0


def surrogate_phi(logits: np.ndarray, groups: np.ndarray):
    """Soft disparate-impact ratio phi = min(r0, r1) / max(r0, r1).

    r_g is the mean sigmoid activation over group g. Returns
    (phi, dphi_dlogit) with the per-sample analytic gradient. Ties pick
    group 0 as the minimum (a subgradient; the hinge is inactive there for
    any mu <= 1 anyway).
    """
    logits = np.asarray(logits, dtype=float)
    groups = np.asarray(groups, dtype=int)
    if logits.shape != groups.shape or logits.ndim != 1:
        raise ShapeError("logits and groups must be matching 1-D arrays")
    m0 = groups == 0
    m1 = groups == 1
    if not m0.any() or not m1.any():
        raise MetricUndefinedError("surrogate needs samples from both groups")
    p = sigmoid(logits)
    r = np.array([p[m0].mean(), p[m1].mean()])
    lo = 0 if r[0] <= r[1] else 1
    hi = 1 - lo
    if r[hi] == 0.0:
        return 1.0, np.zeros_like(logits)  # both rates zero; flat region
    phi = r[lo] / r[hi]
    sig_grad = p * (1.0 - p)
    masks = (m0, m1)
    dphi = np.zeros_like(logits)
    dphi[masks[lo]] = (1.0 / r[hi]) * sig_grad[masks[lo]] / masks[lo].sum()
    dphi[masks[hi]] = (-r[lo] / r[hi] ** 2) * sig_grad[masks[hi]] / masks[hi].sum()
    return float(phi), dphi


def fairness_penalty(phi: float, mu: float, penalty_weight: float):
    """Hinge penalty w * max(0, mu - phi)^2 and its derivative in phi."""
    gap = mu - phi
    if gap <= 0.0:
        return 0.0, 0.0
    return penalty_weight * gap * gap, -2.0 * penalty_weight * gap


def penalty_logit_grads(logits: np.ndarray, groups: np.ndarray,
                        config: SurrogateConfig):
    """Penalty value and its per-logit gradient, chained through phi.

    The gradient is an absolute per-sample quantity (no batch averaging),
    matching the extra-coefficient contract of nn.backward.
    """
    phi, dphi = surrogate_phi(logits, groups)
    value, dvalue_dphi = fairness_penalty(phi, config.mu,
                                          config.penalty_weight)
    if dvalue_dphi == 0.0:
        return value, np.zeros_like(np.asarray(logits, dtype=float))
    return value, dvalue_dphi * dphi
