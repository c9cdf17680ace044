"""Federated server loop: sampling, local training, delta aggregation.

Each round the server snapshots the global model, hands it to a sampled
set of clients, collects their deltas (local minus received global),
weights them with the configured rule, and applies the weighted sum to
the global model. Every random draw comes from an isolated stream keyed
by (seed, purpose, round, client), so e.g. turning the malicious coin off
cannot shift anyone's batch order.
"""

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .aggregation import (
    aggregate_fairfed,
    aggregate_fedavg,
    aggregate_krum,
    aggregate_norm_threshold,
    aggregate_qffl,
)
from .attack import (
    AttackConfig,
    anchoring_baseline,
    benign_local_train,
    local_bce_loss,
    malicious_update,
)
from .data import Dataset, partition_noniid
from .errors import ConfigError, MetricUndefinedError
from .fairness import (
    FairnessReport,
    SurrogateConfig,
    compute_eod,
    evaluate,
    predict,
)
from .nn import MlpModel, OptimizerState, flatten, init_model, unflatten

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RULES = ("fedavg", "krum", "norm_threshold", "qffl", "fairfed")
SCHEDULES = ("none", "continuous", "single_shot")
ATTACK_KINDS = ("eabfl", "anchoring")


@dataclass
class ClientSpec:
    id: int
    data: Dataset
    role: str = "benign"  # benign | malicious | anchoring
    attack: AttackConfig | None = None
    optimizer: OptimizerState = field(
        default_factory=lambda: OptimizerState(0.01, 0.9))
    anchor_fraction: float = 0.1
    anchor_scale: float = 0.1

    def __post_init__(self):
        if self.role not in ("benign", "malicious", "anchoring"):
            raise ConfigError(f"unknown client role {self.role!r}")
        if self.role != "benign" and self.attack is None:
            raise ConfigError("attack-capable clients need an AttackConfig")


@dataclass
class RoundLog:
    round: int
    participant_ids: list
    weights: list
    malicious_ids: list
    rule: str
    fairness: FairnessReport
    attack_diagnostics: list  # one entry per attacking participant
    wall_time_s: float = 0.0  # in-memory only; kept out of the JSONL

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema_version": SCHEMA_VERSION,
                "round": self.round,
                "participants": [int(i) for i in self.participant_ids],
                "weights": [float(w) for w in self.weights],
                "malicious": [int(i) for i in self.malicious_ids],
                "rule": self.rule,
                "fairness": self.fairness.to_dict(),
                "attack": self.attack_diagnostics,
            },
            sort_keys=True,
        )


@dataclass
class ServerState:
    theta_g: MlpModel
    round: int = 0
    seed: int = 0
    history: list = field(default_factory=list)


def sample_participants(all_clients, participation_rate, epsilon, round_idx,
                        seed):
    """Sampled clients for one round plus their malicious-coin flags.

    Selects ceil(rate * n) clients without replacement, then flips an
    independent epsilon-coin per selected client. Both draws come from
    round-keyed streams, deterministic per (seed, round).
    """
    n = len(all_clients)
    if not 0.0 < participation_rate <= 1.0:
        raise ConfigError("participation_rate must be in (0, 1]")
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigError("epsilon must be in [0, 1]")
    count = math.ceil(participation_rate * n)
    if count < 1:
        raise ConfigError("participation_rate selects no clients")
    picks = rng.stream(seed, "participants", round_idx).choice(
        n, size=count, replace=False)
    coins = rng.stream(seed, "malice", round_idx).random(count) < epsilon
    order = np.argsort(picks, kind="stable")
    return [(all_clients[int(picks[i])], bool(coins[i])) for i in order]


@dataclass
class TrainingSettings:
    local_epochs: int = 1
    batch_size: int = 32
    surrogate: SurrogateConfig | None = field(default_factory=SurrogateConfig)
    rule_params: dict = field(default_factory=dict)
    epsilon: float = 0.0  # informs the default Krum f_byzantine


def _default_f_byzantine(m, epsilon):
    return max(0, min(math.ceil(epsilon * m), (m - 3) // 2))


def _client_update(server, client, is_malicious, settings):
    """One participant's local run. Returns (delta, diagnostics or None)."""
    local_rng = rng.stream(server.seed, "local", server.round, client.id)
    theta_g = server.theta_g
    if is_malicious and client.role == "malicious":
        result = malicious_update(
            theta_g, client.data, client.attack, server.round,
            client.optimizer, batch_size=settings.batch_size, rng=local_rng,
            peer_surrogate=settings.surrogate,
        )
        diag = dict(result.diagnostics, client=client.id)
        return flatten(result.theta_p) - flatten(theta_g), diag
    if is_malicious and client.role == "anchoring":
        augmented = anchoring_baseline(
            client.data, client.attack.target_group, client.anchor_fraction,
            client.anchor_scale,
            rng.substream_seed(server.seed, "anchor", server.round, client.id),
        )
        model = benign_local_train(
            theta_g, augmented, settings.local_epochs, client.optimizer,
            settings.surrogate, batch_size=settings.batch_size, rng=local_rng,
        )
        diag = {"client": client.id, "anchoring": True,
                "added": len(augmented) - len(client.data)}
        return flatten(model) - flatten(theta_g), diag
    model = benign_local_train(
        theta_g, client.data, settings.local_epochs, client.optimizer,
        settings.surrogate, batch_size=settings.batch_size, rng=local_rng,
    )
    return flatten(model) - flatten(theta_g), None


def _rule_weights(rule, deltas, sizes, participants, server, settings):
    params = settings.rule_params
    if rule == "fedavg":
        return deltas, aggregate_fedavg(deltas, sizes)
    if rule == "krum":
        f = params.get("f_byzantine")
        if f is None:
            f = _default_f_byzantine(len(deltas), settings.epsilon)
        return deltas, aggregate_krum(deltas, f)
    if rule == "norm_threshold":
        return aggregate_norm_threshold(
            deltas, sizes, params.get("tau_norm", 1.0),
            params.get("threshold_mode", "clip"))
    if rule == "qffl":
        losses = [local_bce_loss(server.theta_g, c.data)
                  for c, _ in participants]
        return deltas, aggregate_qffl(deltas, losses, sizes,
                                      params.get("q", 1.0))
    if rule == "fairfed":
        test = params["fairfed_reference"]
        global_eod = compute_eod(predict(server.theta_g, test.features),
                                 test.labels, test.groups)
        local_eod = []
        for c, _ in participants:
            try:
                local_eod.append(compute_eod(
                    predict(server.theta_g, c.data.features),
                    c.data.labels, c.data.groups))
            except MetricUndefinedError:
                local_eod.append(global_eod)  # no gap signal from this shard
        return deltas, aggregate_fairfed(deltas, sizes, local_eod, global_eod,
                                         params.get("beta", 1.0))
    raise ConfigError(f"unknown aggregation rule {rule!r}")


def run_round(server: ServerState, participants, rule: str,
              settings: TrainingSettings, test_data: Dataset) -> ServerState:
    """Run one full round in place and append its RoundLog."""
    if not participants:
        raise ConfigError("round needs at least one participant")
    t0 = time.perf_counter()
    deltas, diags = [], []
    for client, is_malicious in participants:
        delta, diag = _client_update(server, client, is_malicious, settings)
        deltas.append(delta)
        if diag is not None:
            diags.append(diag)
    sizes = [len(c.data) for c, _ in participants]
    deltas, weights = _rule_weights(rule, deltas, sizes, participants, server,
                                    settings)

    theta = flatten(server.theta_g)
    for w, d in zip(weights, deltas):
        theta += w * d
    server.theta_g = unflatten(server.theta_g.layer_dims, theta)

    entry = RoundLog(
        round=server.round,
        participant_ids=[c.id for c, _ in participants],
        weights=[float(w) for w in weights],
        malicious_ids=[c.id for c, m in participants
                       if m and c.role != "benign"],
        rule=rule,
        fairness=evaluate(server.theta_g, test_data),
        attack_diagnostics=diags,
        wall_time_s=time.perf_counter() - t0,
    )
    server.history.append(entry)
    server.round += 1
    return server


@dataclass
class ExperimentPlan:
    """Everything one experiment cell needs, with data already materialized."""

    train: Dataset
    test: Dataset
    n_clients: int
    alpha: float
    hidden_dims: list
    learning_rate: float = 0.01
    momentum: float = 0.9
    rounds: int = 10
    participation_rate: float = 0.4
    local_epochs: int = 1
    batch_size: int = 32
    benign_fairness_penalty: bool = True
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    rule: str = "fedavg"
    rule_params: dict = field(default_factory=dict)
    schedule: str = "none"
    epsilon: float = 0.0
    attack_round: int = 0  # single_shot only
    attack_kind: str = "eabfl"
    attack: AttackConfig = field(default_factory=AttackConfig)
    anchor_fraction: float = 0.1
    anchor_scale: float = 0.1
    size_exponent: float = 1.2
    seed: int = 0

    def __post_init__(self):
        if self.rule not in RULES:
            raise ConfigError(f"unknown rule {self.rule!r}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.attack_kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.attack_kind!r}")
        if self.rounds < 0:
            raise ConfigError("rounds must be nonnegative")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("epsilon must be in [0, 1]")
        if self.n_clients < 1:
            raise ConfigError("need at least one client")
        if not 0.0 < self.participation_rate <= 1.0:
            raise ConfigError("participation_rate must be in (0, 1]")
        if self.schedule == "single_shot" and not (
                0 <= self.attack_round < max(self.rounds, 1)):
            raise ConfigError("attack_round outside the training horizon")


def _build_clients(plan: ExperimentPlan):
    part = partition_noniid(
        plan.train, plan.n_clients, plan.alpha,
        rng.substream_seed(plan.seed, "partition"),
        size_exponent=plan.size_exponent,
    )
    role = "benign"
    if plan.schedule != "none":
        role = "malicious" if plan.attack_kind == "eabfl" else "anchoring"
    clients = []
    for cid, idx in enumerate(part.client_index_lists):
        clients.append(ClientSpec(
            id=cid,
            data=plan.train.subset(idx),
            role=role,
            attack=plan.attack if role != "benign" else None,
            optimizer=OptimizerState(plan.learning_rate, plan.momentum),
            anchor_fraction=plan.anchor_fraction,
            anchor_scale=plan.anchor_scale,
        ))
    return clients


def run_experiment(plan: ExperimentPlan, jsonl_path=None):
    """Run all rounds of one cell; returns (ServerState, list of RoundLog).

    With a path given, appends one JSON line per round; lines contain no
    wall-clock values, so identical plans yield byte-identical files.
    """
    clients = _build_clients(plan)
    dims = [plan.train.feature_dim] + list(plan.hidden_dims) + [1]
    server = ServerState(
        theta_g=init_model(dims, rng.substream_seed(plan.seed, "init")),
        seed=plan.seed,
    )
    settings = TrainingSettings(
        local_epochs=plan.local_epochs,
        batch_size=plan.batch_size,
        surrogate=plan.surrogate if plan.benign_fairness_penalty else None,
        rule_params=dict(plan.rule_params),
        epsilon=plan.epsilon if plan.schedule == "continuous" else 0.0,
    )
    if plan.rule == "fairfed":
        settings.rule_params.setdefault("fairfed_reference", plan.test)

    fh = open(jsonl_path, "w") if jsonl_path else None
    try:
        for t in range(plan.rounds):
            eps = plan.epsilon if plan.schedule == "continuous" else 0.0
            participants = sample_participants(
                clients, plan.participation_rate, eps, t, plan.seed)
            if plan.schedule == "single_shot" and t == plan.attack_round:
                participants = [(c, True) for c, _ in participants]
            run_round(server, participants, plan.rule, settings, plan.test)
            if fh:
                fh.write(server.history[-1].to_json() + "\n")
    finally:
        if fh:
            fh.close()
    return server, server.history
