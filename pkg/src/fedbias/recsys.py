"""Matrix-factorization recommender and its item-bias poisoning attack.

Predicted score for user u on item i is (E[i] + b[i]) . U[u], the item
bias entering every embedding coordinate. The attack does projected
gradient ascent on b alone: push b[target] up, pull every other bias down
(lambda), keep the training MSE inside a budget via a quadratic penalty,
and clip b into [-c, c] after each step. Reported metrics are top-K
recommendation probability of the target item (Prob-T) and holdout RMSE.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyInputError, ParseError, ShapeError

log = logging.getLogger(__name__)

MSE_PENALTY_WEIGHT = 10.0


@dataclass
class RatingSet:
    users: np.ndarray  # (N,) int
    items: np.ndarray  # (N,) int
    ratings: np.ndarray  # (N,) float in [1, 5]
    n_users: int
    n_items: int

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=int)
        self.items = np.asarray(self.items, dtype=int)
        self.ratings = np.asarray(self.ratings, dtype=float)
        n = len(self.ratings)
        if self.users.shape != (n,) or self.items.shape != (n,):
            raise ShapeError("users/items/ratings lengths differ")
        if n == 0:
            raise EmptyInputError("empty rating set")
        if self.users.min() < 0 or self.users.max() >= self.n_users:
            raise ShapeError("user index out of range")
        if self.items.min() < 0 or self.items.max() >= self.n_items:
            raise ShapeError("item index out of range")
        if self.ratings.min() < 1.0 or self.ratings.max() > 5.0:
            raise ShapeError("ratings must lie in [1, 5]")

    def __len__(self) -> int:
        return len(self.ratings)

    def subset(self, idx) -> "RatingSet":
        idx = np.asarray(idx, dtype=int)
        return RatingSet(self.users[idx], self.items[idx], self.ratings[idx],
                         self.n_users, self.n_items)


@dataclass
class MfModel:
    item_embeddings: np.ndarray  # (M, d)
    user_embeddings: np.ndarray  # (N_u, d)
    item_bias: np.ndarray  # (M,)

    def __post_init__(self):
        E, U, b = self.item_embeddings, self.user_embeddings, self.item_bias
        if E.ndim != 2 or U.ndim != 2 or E.shape[1] != U.shape[1]:
            raise ShapeError("embedding dimensions disagree")
        if b.shape != (E.shape[0],):
            raise ShapeError("one bias per item required")
        for arr in (E, U, b):
            if not np.isfinite(arr).all():
                raise ShapeError("non-finite model entries")

    def copy(self) -> "MfModel":
        return MfModel(self.item_embeddings.copy(),
                       self.user_embeddings.copy(), self.item_bias.copy())

    def predict(self, users, items) -> np.ndarray:
        E = self.item_embeddings[items] + self.item_bias[items][:, None]
        return np.einsum("nd,nd->n", E, self.user_embeddings[users])

    def score_matrix(self) -> np.ndarray:
        """(N_u, M) full score table."""
        shifted = self.item_embeddings + self.item_bias[:, None]
        return self.user_embeddings @ shifted.T


@dataclass
class RecAttackConfig:
    target_item: int
    lambda_: float = 0.05  # pull on non-target biases
    c: float = 2.0  # box bound on every bias entry
    eps_mse: float = 1.0  # training-MSE budget (soft, quadratic penalty)
    steps: int = 200
    step_size: float = 0.05

    def __post_init__(self):
        if self.c < 0 or self.eps_mse < 0:
            raise ConfigError("c and eps_mse must be nonnegative")
        if self.steps < 0 or self.step_size <= 0:
            raise ConfigError("steps nonnegative, step_size positive")


def mf_train(ratings: RatingSet, d, epochs, lr, seed) -> MfModel:
    """Per-rating alternating SGD on squared prediction error.

    Embeddings start near the positive factorization of the mean rating,
    which keeps user-embedding sums positive, so a bias increment on an
    item raises its score for every user rather than an arbitrary subset.
    """
    if d < 1:
        raise ConfigError("embedding dimension must be >= 1")
    gen = np.random.default_rng(seed)
    base = float(np.sqrt(max(ratings.ratings.mean(), 1.0) / d))
    E = base + 0.1 * gen.standard_normal((ratings.n_items, d))
    U = base + 0.1 * gen.standard_normal((ratings.n_users, d))
    b = np.zeros(ratings.n_items)
    for _ in range(int(epochs)):
        for t in gen.permutation(len(ratings)):
            u, i, r = ratings.users[t], ratings.items[t], ratings.ratings[t]
            shifted = E[i] + b[i]
            err = r - shifted @ U[u]
            U[u] += lr * err * shifted
            E[i] += lr * err * U[u]
            b[i] += lr * err * U[u].sum()
    return MfModel(E, U, b)


def mse(model: MfModel, ratings: RatingSet) -> float:
    err = model.predict(ratings.users, ratings.items) - ratings.ratings
    return float(np.mean(err * err))


def rmse(model: MfModel, heldout: RatingSet) -> float:
    return float(np.sqrt(mse(model, heldout)))


@dataclass
class RecAttackOutcome:
    model: MfModel
    boundary_flag: bool
    final_train_mse: float


def attack_bias(model: MfModel, ratings: RatingSet,
                cfg: RecAttackConfig) -> RecAttackOutcome:
    """Projected gradient ascent on the item-bias vector only."""
    M = model.item_bias.shape[0]
    if not 0 <= cfg.target_item < M:
        raise ConfigError(f"target item {cfg.target_item} out of range")
    if cfg.c == 0.0:
        log.warning("bias box collapsed to zero; attack infeasible")
        out = model.copy()
        return RecAttackOutcome(out, True, mse(out, ratings))

    out = model.copy()
    b = out.item_bias
    target = cfg.target_item
    direction = np.full(M, -cfg.lambda_)
    direction[target] = 1.0
    user_sums = out.user_embeddings.sum(axis=1)
    n = len(ratings)
    for _ in range(int(cfg.steps)):
        grad = direction.copy()
        over = mse(out, ratings) - cfg.eps_mse
        if over > 0:
            err = out.predict(ratings.users, ratings.items) - ratings.ratings
            # d MSE / d b[i] accumulated over the ratings touching item i
            dmse = np.zeros(M)
            np.add.at(dmse, ratings.items,
                      (2.0 / n) * err * user_sums[ratings.users])
            grad -= 2.0 * MSE_PENALTY_WEIGHT * over * dmse
        b += cfg.step_size * grad
        np.clip(b, -cfg.c, cfg.c, out=b)
    return RecAttackOutcome(out, False, mse(out, ratings))


def prob_t(model: MfModel, ratings: RatingSet, i_t: int, K: int = 10) -> float:
    """Fraction of users whose top-K unrated items include the target."""
    if K < 1:
        raise ConfigError("K must be >= 1")
    M = model.item_embeddings.shape[0]
    if not 0 <= i_t < M:
        raise ConfigError(f"target item {i_t} out of range")
    if K >= M:
        log.warning("K >= item count; every unrated item is recommended")
        return 1.0
    scores = model.score_matrix()
    rated = np.zeros((model.user_embeddings.shape[0], M), dtype=bool)
    rated[ratings.users, ratings.items] = True
    scores[rated] = -np.inf
    # stable top-K: sort by (-score, item index)
    hits = 0
    for u in range(scores.shape[0]):
        order = np.lexsort((np.arange(M), -scores[u]))[:K]
        hits += i_t in order
    return hits / scores.shape[0]


# ---------------------------------------------------------------------------
# data sources

def synth_ratings(seed, n_users, n_items, per_user, n_user_clusters=4,
                  n_item_clusters=4, noise=0.4) -> RatingSet:
    """Block-structured ratings: cluster-pair affinity plus noise."""
    if per_user < 1 or per_user > n_items:
        raise ConfigError("per_user must be in [1, n_items]")
    gen = np.random.default_rng(seed)
    user_cluster = gen.integers(n_user_clusters, size=n_users)
    item_cluster = gen.integers(n_item_clusters, size=n_items)
    affinity = gen.uniform(1.8, 4.6, size=(n_user_clusters, n_item_clusters))
    users, items, values = [], [], []
    for u in range(n_users):
        chosen = gen.choice(n_items, size=per_user, replace=False)
        base = affinity[user_cluster[u], item_cluster[chosen]]
        r = np.clip(base + noise * gen.standard_normal(per_user), 1.0, 5.0)
        users.append(np.full(per_user, u))
        items.append(chosen)
        values.append(r)
    return RatingSet(np.concatenate(users), np.concatenate(items),
                     np.concatenate(values), n_users, n_items)


def load_ratings(path) -> RatingSet:
    """UserID::MovieID::Rating::Timestamp lines; ids remapped to dense."""
    raw = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 '::' fields")
            try:
                raw.append((int(parts[0]), int(parts[1]), float(parts[2])))
            except ValueError:
                raise ParseError(f"{path}:{lineno}: malformed numbers") from None
    if not raw:
        raise ParseError(f"{path}: no ratings")
    user_ids = sorted({u for u, _, _ in raw})
    item_ids = sorted({i for _, i, _ in raw})
    umap = {u: k for k, u in enumerate(user_ids)}
    imap = {i: k for k, i in enumerate(item_ids)}
    users = np.array([umap[u] for u, _, _ in raw])
    items = np.array([imap[i] for _, i, _ in raw])
    values = np.array([r for _, _, r in raw])
    return RatingSet(users, items, values, len(user_ids), len(item_ids))


def split_ratings(ratings: RatingSet, holdout_fraction, seed):
    if not 0.0 < holdout_fraction < 1.0:
        raise ConfigError("holdout_fraction must be in (0, 1)")
    n = len(ratings)
    n_hold = min(max(int(round(n * holdout_fraction)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return ratings.subset(np.sort(perm[n_hold:])), ratings.subset(
        np.sort(perm[:n_hold]))


@dataclass
class RecStudyConfig:
    """End-to-end case-study settings: train, attack, report."""

    seed: int = 0
    n_users: int = 500
    n_items: int = 200
    per_user: int = 20
    ratings_path: str | None = None  # overrides the synthetic generator
    embedding_dim: int = 8
    train_epochs: int = 10
    train_lr: float = 0.02
    holdout_fraction: float = 0.1
    top_k: int = 10
    attack: RecAttackConfig = field(
        default_factory=lambda: RecAttackConfig(target_item=7))


def run_case_study(cfg: RecStudyConfig) -> dict:
    """Train clean, measure, attack, measure again; returns the report."""
    if cfg.ratings_path:
        full = load_ratings(cfg.ratings_path)
    else:
        full = synth_ratings(cfg.seed, cfg.n_users, cfg.n_items, cfg.per_user)
    train, heldout = split_ratings(full, cfg.holdout_fraction, cfg.seed)
    model = mf_train(train, cfg.embedding_dim, cfg.train_epochs, cfg.train_lr,
                     cfg.seed)
    outcome = attack_bias(model, train, cfg.attack)
    report = {
        "prob_t_clean": prob_t(model, train, cfg.attack.target_item, cfg.top_k),
        "prob_t_poisoned": prob_t(outcome.model, train, cfg.attack.target_item,
                                  cfg.top_k),
        "rmse_clean": rmse(model, heldout),
        "rmse_poisoned": rmse(outcome.model, heldout),
        "boundary_flag": outcome.boundary_flag,
    }
    return report


def report_to_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True)
