"""Server-side aggregation rules over flat update deltas.

Every rule maps the participants' deltas (local model minus received
global model, as flat vectors) to a weight vector summing to 1; Krum's is
one-hot. The server then applies theta_g += sum_k w_k * delta_k.
"""

import logging

import numpy as np

from .errors import AggregationError

log = logging.getLogger(__name__)


def _check_deltas(deltas):
    if len(deltas) == 0:
        raise AggregationError("no updates to aggregate")
    dim = deltas[0].shape
    for d in deltas:
        if d.shape != dim:
            raise AggregationError("update length mismatch")


def aggregate_fedavg(deltas, sizes) -> np.ndarray:
    """Weights proportional to local dataset sizes."""
    _check_deltas(deltas)
    sizes = np.asarray(sizes, dtype=float)
    if sizes.shape != (len(deltas),) or (sizes <= 0).any():
        raise AggregationError("need one positive size per update")
    return sizes / sizes.sum()


def aggregate_krum(deltas, f_byzantine: int) -> np.ndarray:
    """One-hot selection of the update with the smallest Krum score.

    score(k) = sum of squared L2 distances to its m - f - 2 nearest other
    updates; ties resolve to the lowest participant index.
    """
    _check_deltas(deltas)
    m = len(deltas)
    if f_byzantine < 0:
        raise AggregationError("f_byzantine must be nonnegative")
    if m < f_byzantine + 3:
        raise AggregationError(
            f"krum needs at least f+3 = {f_byzantine + 3} updates, got {m}"
        )
    stacked = np.stack(deltas)
    sq = ((stacked[:, None, :] - stacked[None, :, :]) ** 2).sum(axis=2)
    keep = m - f_byzantine - 2
    scores = np.empty(m)
    for k in range(m):
        others = np.sort(np.delete(sq[k], k))
        scores[k] = others[:keep].sum()
    weights = np.zeros(m)
    weights[int(np.argmin(scores))] = 1.0  # argmin takes the first minimum
    return weights


def aggregate_norm_threshold(deltas, sizes, tau_norm, mode="clip"):
    """L2-threshold defense: shrink or zero oversized updates.

    mode="clip" rescales any delta with norm above tau_norm down to
    tau_norm; mode="zero" zeroes the coordinates of such updates entirely.
    Returns (processed deltas, FedAvg weights).
    """
    if tau_norm <= 0:
        raise AggregationError("tau_norm must be positive")
    if mode not in ("clip", "zero"):
        raise AggregationError(f"unknown threshold mode {mode!r}")
    weights = aggregate_fedavg(deltas, sizes)
    out = []
    for d in deltas:
        norm = float(np.linalg.norm(d))
        if norm <= tau_norm:
            out.append(d)
        elif mode == "clip":
            out.append(d * (tau_norm / norm))
        else:
            out.append(np.zeros_like(d))
    return out, weights


def aggregate_qffl(deltas, local_losses, sizes, q) -> np.ndarray:
    """Loss-tilted weights: w_k proportional to size_k * loss_k^q.

    q = 0 reduces to FedAvg exactly; all-zero losses with q > 0 fall back
    to FedAvg (logged) since the tilt is undefined there.
    """
    if q < 0:
        raise AggregationError("q must be nonnegative")
    losses = np.asarray(local_losses, dtype=float)
    if (losses < 0).any():
        raise AggregationError("losses must be nonnegative")
    base = aggregate_fedavg(deltas, sizes)
    if q == 0:
        return base
    if not losses.any():
        log.warning("all local losses zero; loss tilt undefined, using FedAvg")
        return base
    tilted = base * losses**q
    return tilted / tilted.sum()


def aggregate_fairfed(deltas, sizes, local_eod, global_eod, beta) -> np.ndarray:
    """Fairness-gap reweighting: clients whose local disparity tracks the
    global one get more weight; w_k proportional to
    size_k * exp(-beta * |global_eod - local_eod_k|)."""
    if beta < 0:
        raise AggregationError("beta must be nonnegative")
    gaps = np.abs(np.asarray(local_eod, dtype=float) - float(global_eod))
    base = aggregate_fedavg(deltas, sizes)
    if beta == 0:
        return base
    tilted = base * np.exp(-beta * gaps)
    return tilted / tilted.sum()
