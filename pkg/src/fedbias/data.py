"""Datasets: CSV ingestion, synthetic generation, non-IID partitioning.

A Dataset is a struct-of-arrays over (features, label, group) triples:
binary label, binary sensitive group (1 = privileged). Client shards are
index-based subsets of one parent Dataset, produced by a PartitionPlan.
"""

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyInputError, ParseError, ShapeError, SplitError

log = logging.getLogger(__name__)


@dataclass
class Sample:
    features: np.ndarray
    label: int
    group: int


@dataclass
class Dataset:
    features: np.ndarray  # (n, d) float
    labels: np.ndarray  # (n,) in {0, 1}
    groups: np.ndarray  # (n,) in {0, 1}; 1 = privileged
    provenance: str = "synthetic"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        self.groups = np.asarray(self.groups, dtype=int)
        if self.features.ndim != 2:
            raise ShapeError("features must be a 2-D array")
        n = self.features.shape[0]
        if n == 0:
            raise EmptyInputError("dataset is empty")
        if self.labels.shape != (n,) or self.groups.shape != (n,):
            raise ShapeError("labels/groups length must match features")
        if not np.isfinite(self.features).all():
            raise ShapeError("non-finite feature values")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def sample(self, i: int) -> Sample:
        return Sample(self.features[i], int(self.labels[i]), int(self.groups[i]))

    def subset(self, indices, provenance=None) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        return Dataset(
            self.features[idx],
            self.labels[idx],
            self.groups[idx],
            provenance or self.provenance,
        )

    def group_indices(self, g: int) -> np.ndarray:
        return np.where(self.groups == g)[0]

    def has_both_groups(self) -> bool:
        return len(self.group_indices(0)) > 0 and len(self.group_indices(1)) > 0


def _require_both_groups(ds: Dataset, what: str):
    if not ds.has_both_groups():
        raise ConfigError(f"{what} must contain samples from both groups")


# ---------------------------------------------------------------------------
# Adult-Income-style CSV ingestion

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education_num",
    "marital_status", "occupation", "relationship", "race", "sex",
    "capital_gain", "capital_loss", "hours_per_week", "native_country",
    "income",
]
ADULT_CONTINUOUS = [
    "age", "fnlwgt", "education_num", "capital_gain", "capital_loss",
    "hours_per_week",
]


@dataclass
class CsvSchema:
    """Describes how to read a labelled CSV with a sensitive attribute.

    When ``categories`` pins a column's vocabulary, unseen values map to a
    trailing "other" slot; otherwise vocabularies are learned (sorted) from
    the fitted rows. The sensitive column is excluded from the feature
    vector unless ``include_sensitive_feature`` is set.
    """

    columns: list = field(default_factory=lambda: list(ADULT_COLUMNS))
    continuous: list = field(default_factory=lambda: list(ADULT_CONTINUOUS))
    label_column: str = "income"
    label_positive: tuple = (">50K", ">50K.")
    sensitive_column: str = "race"
    sensitive_positive: str = "White"
    has_header: bool = True
    missing_token: str = "?"
    include_sensitive_feature: bool = False
    categories: dict = field(default_factory=dict)

    def categorical_feature_columns(self):
        skip = {self.label_column}
        if not self.include_sensitive_feature:
            skip.add(self.sensitive_column)
        return [
            c for c in self.columns
            if c not in self.continuous and c not in skip
        ]

    def continuous_feature_columns(self):
        skip = {self.label_column}
        if not self.include_sensitive_feature:
            skip.add(self.sensitive_column)
        return [c for c in self.continuous if c not in skip]


def _read_rows(path, schema: CsvSchema):
    """Parse, strip, and drop-missing. Returns list of dict rows."""
    rows = []
    n_dropped = 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, raw in enumerate(reader, start=1):
            if not raw or (len(raw) == 1 and not raw[0].strip()):
                continue
            vals = [v.strip() for v in raw]
            if lineno == 1 and schema.has_header:
                continue
            if len(vals) != len(schema.columns):
                raise ParseError(
                    f"{path}: row {lineno} has {len(vals)} fields, "
                    f"expected {len(schema.columns)}"
                )
            if schema.missing_token in vals:
                n_dropped += 1
                continue
            rows.append(dict(zip(schema.columns, vals)))
    if n_dropped:
        log.info("dropped %d rows with missing values from %s", n_dropped, path)
    if not rows:
        raise ParseError(f"{path}: no usable data rows")
    return rows


class CsvEncoder:
    """One-hot + z-score encoder fitted on a row set.

    Feature layout follows schema column order: continuous columns are one
    z-scored slot; categorical columns get len(vocab)+1 slots (the last is
    the "other" bucket for values outside a pinned vocabulary).
    """

    def __init__(self, schema: CsvSchema):
        self.schema = schema
        self.vocab = {}
        self.stats = {}

    def fit(self, rows):
        sch = self.schema
        for col in sch.categorical_feature_columns():
            if col in sch.categories:
                self.vocab[col] = list(sch.categories[col])
            else:
                self.vocab[col] = sorted({r[col] for r in rows})
        for col in sch.continuous_feature_columns():
            vals = np.array([self._parse_number(r[col], col) for r in rows])
            std = float(vals.std())
            self.stats[col] = (float(vals.mean()), std if std > 0 else 1.0)
        return self

    @staticmethod
    def _parse_number(text, col):
        try:
            return float(text)
        except ValueError:
            raise ParseError(f"non-numeric value {text!r} in column {col}") from None

    def transform(self, rows) -> Dataset:
        sch = self.schema
        n_other = 0
        feats = []
        labels = np.empty(len(rows), dtype=int)
        groups = np.empty(len(rows), dtype=int)
        for i, row in enumerate(rows):
            vec = []
            for col in sch.columns:
                if col == sch.label_column or (
                    col == sch.sensitive_column and not sch.include_sensitive_feature
                ):
                    continue
                if col in self.stats:
                    mean, std = self.stats[col]
                    vec.append((self._parse_number(row[col], col) - mean) / std)
                else:
                    voc = self.vocab[col]
                    block = [0.0] * (len(voc) + 1)
                    try:
                        block[voc.index(row[col])] = 1.0
                    except ValueError:
                        block[-1] = 1.0
                        n_other += 1
                    vec.extend(block)
            feats.append(vec)
            labels[i] = 1 if row[sch.label_column] in sch.label_positive else 0
            groups[i] = 1 if row[sch.sensitive_column] == sch.sensitive_positive else 0
        if n_other:
            log.info("mapped %d categorical values to the 'other' bucket", n_other)
        return Dataset(np.array(feats), labels, groups, provenance="adult")


def load_adult_csv(path, schema: CsvSchema | None = None) -> Dataset:
    """Load a whole CSV; encoding statistics come from the loaded rows."""
    schema = schema or CsvSchema()
    rows = _read_rows(path, schema)
    ds = CsvEncoder(schema).fit(rows).transform(rows)
    _require_both_groups(ds, "loaded dataset")
    return ds


def load_adult_split(path, test_fraction, seed, schema: CsvSchema | None = None):
    """Load and split with no leakage: encoder fitted on the train rows only."""
    schema = schema or CsvSchema()
    rows = _read_rows(path, schema)
    n_test = _test_size(len(rows), test_fraction)
    perm = np.random.default_rng(seed).permutation(len(rows))
    test_rows = [rows[i] for i in sorted(perm[:n_test])]
    train_rows = [rows[i] for i in sorted(perm[n_test:])]
    enc = CsvEncoder(schema).fit(train_rows)
    train, test = enc.transform(train_rows), enc.transform(test_rows)
    for part, name in ((train, "train split"), (test, "test split")):
        if not part.has_both_groups():
            raise SplitError(f"{name} lost a sensitive group; use another seed")
    return train, test


# ---------------------------------------------------------------------------
# synthetic testbed

def synth_generate(seed, n, group_fraction, separation, disadvantage,
                   feature_dim=2) -> Dataset:
    """Two Gaussian class clusters per group, on axis 0.

    Class centers sit at +-separation/2; the targeted group's (group 0)
    centers are pulled toward the decision boundary by ``disadvantage`` so
    a clean classifier shows a true-positive-rate gap. Unit noise on every
    axis; remaining axes are pure noise.
    """
    if n < 4:
        raise ConfigError("need n >= 4")
    if not 0.0 < group_fraction < 1.0:
        raise ConfigError("group_fraction must be in (0, 1)")
    if separation <= 0:
        raise ConfigError("separation must be positive")
    rng = np.random.default_rng(seed)
    groups = (rng.random(n) < group_fraction).astype(int)
    labels = (rng.random(n) < 0.5).astype(int)
    margin = np.where(groups == 1, separation / 2.0, separation / 2.0 - disadvantage)
    centers = (2 * labels - 1) * margin
    feats = rng.standard_normal((n, feature_dim))
    feats[:, 0] += centers
    ds = Dataset(feats, labels, groups, provenance="synthetic")
    _require_both_groups(ds, "synthetic dataset")
    return ds


# ---------------------------------------------------------------------------
# partitioning

@dataclass
class PartitionPlan:
    client_index_lists: list  # n_clients disjoint sorted index lists
    alpha: float
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "alpha": self.alpha,
                "seed": self.seed,
                "clients": {str(k): [int(i) for i in idx]
                            for k, idx in enumerate(self.client_index_lists)},
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "PartitionPlan":
        obj = json.loads(text)
        lists = [obj["clients"][str(k)] for k in range(len(obj["clients"]))]
        return PartitionPlan(lists, obj["alpha"], obj["seed"])


def _largest_remainder(weights, total):
    """Integer allocation proportional to weights, summing to total."""
    weights = np.clip(np.asarray(weights, dtype=float), 0.0, None)
    if weights.sum() <= 0:
        weights = np.ones_like(weights)
    exact = weights / weights.sum() * total
    alloc = np.floor(exact).astype(int)
    order = np.argsort(-(exact - alloc), kind="stable")
    for i in order[: total - alloc.sum()]:
        alloc[i] += 1
    return alloc


def _capped_counts(ideal, total, caps):
    """Largest-remainder allocation of `total` with per-cell caps."""
    ideal = np.minimum(np.clip(ideal, 0.0, None), caps)
    alloc = np.floor(ideal).astype(int)
    frac = ideal - alloc
    remaining = total - alloc.sum()
    if remaining < 0:  # over-allocated after clamping; trim smallest fractions
        order = np.argsort(frac, kind="stable")
        for i in order:
            if remaining == 0:
                break
            take = min(alloc[i], -remaining)
            alloc[i] -= take
            remaining += take
    while remaining > 0:
        room = caps - alloc
        order = np.argsort(-np.where(room > 0, frac, -np.inf), kind="stable")
        progressed = False
        for i in order:
            if remaining == 0:
                break
            if room[i] > 0:
                alloc[i] += 1
                remaining -= 1
                frac[i] = 0.0
                progressed = True
        if not progressed:
            raise ConfigError("partition target exceeds capacity")
    return alloc


def partition_noniid(dataset: Dataset, n_clients, alpha, seed,
                     size_exponent=1.2) -> PartitionPlan:
    """Power-law client sizes; Beta-sampled per-client group mix.

    Client k's size is proportional to (k+1)^-size_exponent. Its target
    group-1 proportion is drawn from Beta(alpha, alpha*(1-q)/q) where q is
    the global group-1 fraction, so the mean mix is q and alpha -> inf
    recovers an IID mix. Samples are dealt without replacement.
    """
    if n_clients < 2:
        raise ConfigError("need at least 2 clients")
    if n_clients > len(dataset):
        raise ConfigError("more clients than samples")
    if alpha <= 0:
        raise ConfigError("alpha must be positive")
    _require_both_groups(dataset, "dataset to partition")

    rng = np.random.default_rng(seed)
    n = len(dataset)
    sizes = _largest_remainder(np.arange(1, n_clients + 1, dtype=float) ** -size_exponent, n)
    while sizes.min() == 0:  # guarantee nonempty clients
        sizes[np.argmin(sizes)] += 1
        sizes[np.argmax(sizes)] -= 1

    g1 = dataset.group_indices(1)
    g0 = dataset.group_indices(0)
    q = len(g1) / n
    props = rng.beta(alpha, alpha * (1.0 - q) / q, size=n_clients)
    ideal = props * sizes
    scale = len(g1) / ideal.sum() if ideal.sum() > 0 else 0.0
    counts_g1 = _capped_counts(ideal * scale, len(g1), sizes)

    g1_pool = rng.permutation(g1)
    g0_pool = rng.permutation(g0)
    lists = []
    p1 = p0 = 0
    for k in range(n_clients):
        m1 = int(counts_g1[k])
        m0 = int(sizes[k]) - m1
        idx = np.concatenate([g1_pool[p1:p1 + m1], g0_pool[p0:p0 + m0]])
        p1 += m1
        p0 += m0
        lists.append(sorted(int(i) for i in idx))
    return PartitionPlan(lists, float(alpha), int(seed))


def _test_size(n, test_fraction):
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must be in (0, 1)")
    return min(max(int(round(n * test_fraction)), 1), n - 1)


def train_test_split(dataset: Dataset, test_fraction, seed):
    """Seeded disjoint split; raises SplitError if a group empties."""
    n = len(dataset)
    n_test = _test_size(n, test_fraction)
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    train, test = dataset.subset(train_idx), dataset.subset(test_idx)
    for part, name in ((train, "train split"), (test, "test split")):
        if not part.has_both_groups():
            raise SplitError(f"{name} lost a sensitive group; use another seed")
    return train, test


# ---------------------------------------------------------------------------
# Adult-schema surrogate generator
#
# Stands in for the real Adult Income file in tests and demo configs: same
# 15-column layout, correlated features, a privileged-group base-rate gap.
# The real file drops in via load_adult_csv / load_adult_split unchanged.

_EDU_BY_NUM = [
    "Preschool", "1st-4th", "5th-6th", "7th-8th", "9th", "10th", "11th",
    "12th", "HS-grad", "Some-college", "Assoc-voc", "Assoc-acdm",
    "Bachelors", "Masters", "Prof-school", "Doctorate",
]
_WORKCLASS = ["Private", "Self-emp-not-inc", "Self-emp-inc", "Local-gov",
              "State-gov", "Federal-gov", "Without-pay"]
_WORKCLASS_P = [0.72, 0.08, 0.04, 0.07, 0.05, 0.03, 0.01]
_MARITAL = ["Married-civ-spouse", "Never-married", "Divorced", "Separated",
            "Widowed", "Married-spouse-absent"]
_MARITAL_P = [0.46, 0.33, 0.14, 0.03, 0.03, 0.01]
_OCC_HIGH = ["Prof-specialty", "Exec-managerial"]
_OCC_MID = ["Craft-repair", "Sales", "Adm-clerical", "Tech-support",
            "Protective-serv"]
_OCC_LOW = ["Other-service", "Handlers-cleaners", "Machine-op-inspct",
            "Farming-fishing", "Transport-moving", "Priv-house-serv"]
_RELATION = ["Husband", "Not-in-family", "Own-child", "Unmarried", "Wife",
             "Other-relative"]
_RELATION_P = [0.40, 0.26, 0.15, 0.11, 0.05, 0.03]
_RACE_MINORITY = ["Black", "Asian-Pac-Islander", "Amer-Indian-Eskimo", "Other"]
_RACE_MINORITY_P = [0.60, 0.20, 0.10, 0.10]
_COUNTRY = ["United-States", "Mexico", "Philippines", "Germany", "Canada"]
_COUNTRY_P = [0.90, 0.04, 0.02, 0.02, 0.02]


def write_synthetic_adult_csv(path, n, seed, *, privileged_fraction=0.75,
                              group_logit_bias=0.9, missing_rate=0.01):
    """Write an Adult-schema CSV with a seeded generative model.

    ``group_logit_bias`` is the extra log-odds of a positive label for the
    privileged group beyond what the skill-correlated features explain; it
    controls how biased a faithfully trained clean model comes out.
    """
    rng = np.random.default_rng(seed)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ADULT_COLUMNS)
        for _ in range(n):
            white = rng.random() < privileged_fraction
            skill = rng.normal(0.0, 1.0) + (0.45 if white else 0.0)
            age = int(np.clip(rng.normal(38, 12), 17, 85))
            edu_num = int(np.clip(round(rng.normal(9.8 + 1.6 * skill, 1.4)), 1, 16))
            hours = int(np.clip(round(rng.normal(40 + 4.5 * skill, 6)), 5, 99))
            has_gain = rng.random() < float(1 / (1 + np.exp(-(skill - 2.2))))
            gain = int(rng.uniform(2000, 30000)) if has_gain else 0
            loss = int(rng.uniform(500, 3000)) if rng.random() < 0.04 else 0
            if skill > 0.7:
                occ = _OCC_HIGH[rng.integers(len(_OCC_HIGH))]
            elif skill > -0.5:
                occ = _OCC_MID[rng.integers(len(_OCC_MID))]
            else:
                occ = _OCC_LOW[rng.integers(len(_OCC_LOW))]
            workclass = rng.choice(_WORKCLASS, p=_WORKCLASS_P)
            if rng.random() < missing_rate:
                workclass = "?"
            race = "White" if white else rng.choice(_RACE_MINORITY, p=_RACE_MINORITY_P)
            logit = (
                2.2 * skill
                + 0.45 * (hours - 40) / 6.0
                + 0.30 * (age - 38) / 12.0
                + 1.2 * (gain > 0)
                + (group_logit_bias if white else 0.0)
                - 2.9
            )
            income = ">50K" if rng.random() < float(1 / (1 + np.exp(-logit))) else "<=50K"
            writer.writerow([
                age, workclass, int(rng.uniform(20000, 400000)),
                _EDU_BY_NUM[edu_num - 1], edu_num,
                rng.choice(_MARITAL, p=_MARITAL_P), occ,
                rng.choice(_RELATION, p=_RELATION_P), race,
                "Male" if rng.random() < 0.67 else "Female",
                gain, loss, hours,
                rng.choice(_COUNTRY, p=_COUNTRY_P), income,
            ])
