"""Declarative experiment configs: YAML in, validated cells out.

A config file describes one experiment family: dataset source, partition,
model, training loop, aggregation rule, attack settings, and optional
sweep grids (epsilon / kappa / alpha / rules). The Cartesian product of
the grids and the seed list defines the cells; each cell materializes to
an engine ExperimentPlan. Validation reports every violation at once.
"""

import copy
import os
import tempfile
from dataclasses import dataclass

import yaml

from . import rng
from .attack import AttackConfig
from .data import (
    CsvSchema,
    load_adult_split,
    synth_generate,
    train_test_split,
    write_synthetic_adult_csv,
)
from .engine import ATTACK_KINDS, RULES, SCHEDULES, ExperimentPlan
from .errors import ConfigError, ParseError
from .fairness import SurrogateConfig

DATASET_KINDS = ("synthetic", "adult_csv", "adult_synth_csv")

DEFAULTS = {
    "name": "experiment",
    "output_dir": "out",
    "seeds": [0],
    "dataset": {
        "kind": "synthetic",
        "n": 1000,
        "group_fraction": 0.7,
        "separation": 2.0,
        "disadvantage": 0.9,
        "feature_dim": 4,
        "path": "",
        "rows": 13000,
        "group_logit_bias": 0.9,
        "privileged_fraction": 0.75,
        "include_sensitive": False,
        "seed": 0,
        "test_fraction": 0.1,
    },
    "partition": {
        "n_clients": 10,
        "alpha": 2.0,
        "size_exponent": 1.2,
    },
    "model": {
        "hidden": [32, 16],
    },
    "optimizer": {
        "learning_rate": 0.01,
        "momentum": 0.9,
    },
    "training": {
        "rounds": 10,
        "participation_rate": 0.4,
        "local_epochs": 1,
        "batch_size": 32,
        "benign_fairness_penalty": True,
    },
    "surrogate": {
        "mu": 0.8,
        "penalty_weight": 1.0,
    },
    "rule": {
        "name": "fedavg",
        "f_byzantine": None,
        "tau_norm": 1.0,
        "threshold_mode": "clip",
        "q": 1.0,
        "beta": 1.0,
    },
    "attack": {
        "schedule": "none",
        "kind": "eabfl",
        "epsilon": 0.0,
        "attack_round": 0,
        "target_group": 0,
        "kappa": 0.4,
        "gamma": 0.4,
        "rho": 0.7,
        "mu": 0.8,
        "poison_epochs": 5,
        "poison_lr": 0.01,
        "anchor_fraction": 0.1,
        "anchor_scale": 0.1,
    },
    "sweep": {
        "epsilon_grid": [],
        "kappa_grid": [],
        "alpha_grid": [],
        "rules": [],
    },
}


def _merge(defaults, override, path, violations):
    out = copy.deepcopy(defaults)
    for key, value in (override or {}).items():
        dotted = f"{path}.{key}" if path else key
        if key not in defaults:
            violations.append(f"{dotted}: unknown key")
            continue
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                violations.append(f"{dotted}: expected a mapping")
                continue
            out[key] = _merge(defaults[key], value, dotted, violations)
        else:
            out[key] = value
    return out


def _num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check(cfg, violations):
    def bad(path, msg):
        violations.append(f"{path}: {msg}")

    if not isinstance(cfg["name"], str) or not cfg["name"]:
        bad("name", "must be a nonempty string")
    if not isinstance(cfg["output_dir"], str) or not cfg["output_dir"]:
        bad("output_dir", "must be a nonempty string")
    seeds = cfg["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(
            isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        bad("seeds", "must be a nonempty list of integers")

    ds = cfg["dataset"]
    if ds["kind"] not in DATASET_KINDS:
        bad("dataset.kind", f"must be one of {DATASET_KINDS}")
    if ds["kind"] == "synthetic":
        if not (isinstance(ds["n"], int) and ds["n"] >= 4):
            bad("dataset.n", "must be an integer >= 4")
        if not (_num(ds["group_fraction"]) and 0 < ds["group_fraction"] < 1):
            bad("dataset.group_fraction", "must be in (0, 1)")
        if not (_num(ds["separation"]) and ds["separation"] > 0):
            bad("dataset.separation", "must be positive")
        if not _num(ds["disadvantage"]):
            bad("dataset.disadvantage", "must be a number")
        if not (isinstance(ds["feature_dim"], int) and ds["feature_dim"] >= 1):
            bad("dataset.feature_dim", "must be an integer >= 1")
    else:
        if not ds["path"]:
            bad("dataset.path", "required for CSV-backed datasets")
        if ds["kind"] == "adult_synth_csv" and not (
                isinstance(ds["rows"], int) and ds["rows"] >= 100):
            bad("dataset.rows", "must be an integer >= 100")
        if not isinstance(ds["include_sensitive"], bool):
            bad("dataset.include_sensitive", "must be a boolean")
        if not (_num(ds["privileged_fraction"])
                and 0 < ds["privileged_fraction"] < 1):
            bad("dataset.privileged_fraction", "must be in (0, 1)")
    if not (_num(ds["test_fraction"]) and 0 < ds["test_fraction"] < 1):
        bad("dataset.test_fraction", "must be in (0, 1)")

    part = cfg["partition"]
    if not (isinstance(part["n_clients"], int) and part["n_clients"] >= 2):
        bad("partition.n_clients", "must be an integer >= 2")
    if not (_num(part["alpha"]) and part["alpha"] > 0):
        bad("partition.alpha", "must be positive")

    hidden = cfg["model"]["hidden"]
    if not (isinstance(hidden, list) and
            all(isinstance(h, int) and h >= 1 for h in hidden)):
        bad("model.hidden", "must be a list of positive integers")

    opt = cfg["optimizer"]
    if not (_num(opt["learning_rate"]) and opt["learning_rate"] > 0):
        bad("optimizer.learning_rate", "must be positive")
    if not (_num(opt["momentum"]) and 0 <= opt["momentum"] < 1):
        bad("optimizer.momentum", "must be in [0, 1)")

    tr = cfg["training"]
    if not (isinstance(tr["rounds"], int) and tr["rounds"] >= 0):
        bad("training.rounds", "must be a nonnegative integer")
    if not (_num(tr["participation_rate"]) and 0 < tr["participation_rate"] <= 1):
        bad("training.participation_rate", "must be in (0, 1]")
    if not (isinstance(tr["local_epochs"], int) and tr["local_epochs"] >= 0):
        bad("training.local_epochs", "must be a nonnegative integer")
    if not (isinstance(tr["batch_size"], int) and tr["batch_size"] >= 1):
        bad("training.batch_size", "must be a positive integer")

    sur = cfg["surrogate"]
    if not _num(sur["mu"]):
        bad("surrogate.mu", "must be a number")
    if not (_num(sur["penalty_weight"]) and sur["penalty_weight"] >= 0):
        bad("surrogate.penalty_weight", "must be nonnegative")

    rule = cfg["rule"]
    if rule["name"] not in RULES:
        bad("rule.name", f"must be one of {RULES}")
    if rule["f_byzantine"] is not None and not (
            isinstance(rule["f_byzantine"], int) and rule["f_byzantine"] >= 0):
        bad("rule.f_byzantine", "must be null or a nonnegative integer")
    if not (_num(rule["tau_norm"]) and rule["tau_norm"] > 0):
        bad("rule.tau_norm", "must be positive")
    if rule["threshold_mode"] not in ("clip", "zero"):
        bad("rule.threshold_mode", "must be clip or zero")
    if not (_num(rule["q"]) and rule["q"] >= 0):
        bad("rule.q", "must be nonnegative")
    if not (_num(rule["beta"]) and rule["beta"] >= 0):
        bad("rule.beta", "must be nonnegative")

    atk = cfg["attack"]
    if atk["schedule"] not in SCHEDULES:
        bad("attack.schedule", f"must be one of {SCHEDULES}")
    if atk["kind"] not in ATTACK_KINDS:
        bad("attack.kind", f"must be one of {ATTACK_KINDS}")
    if not (_num(atk["epsilon"]) and 0 <= atk["epsilon"] <= 1):
        bad("attack.epsilon", "must be in [0, 1]")
    if not (isinstance(atk["attack_round"], int) and atk["attack_round"] >= 0):
        bad("attack.attack_round", "must be a nonnegative integer")
    if atk["target_group"] not in (0, 1):
        bad("attack.target_group", "must be 0 or 1")
    if not (_num(atk["kappa"]) and 0 <= atk["kappa"] <= 1):
        bad("attack.kappa", "must be in [0, 1]")
    for key in ("gamma", "rho"):
        if not (_num(atk[key]) and atk[key] >= 0):
            bad(f"attack.{key}", "must be nonnegative")
    if not (isinstance(atk["poison_epochs"], int) and atk["poison_epochs"] >= 0):
        bad("attack.poison_epochs", "must be a nonnegative integer")
    if not (_num(atk["poison_lr"]) and atk["poison_lr"] > 0):
        bad("attack.poison_lr", "must be positive")
    if not (_num(atk["anchor_fraction"]) and 0 <= atk["anchor_fraction"] <= 1):
        bad("attack.anchor_fraction", "must be in [0, 1]")
    if not (_num(atk["anchor_scale"]) and atk["anchor_scale"] >= 0):
        bad("attack.anchor_scale", "must be nonnegative")

    sweep = cfg["sweep"]
    for axis, check, desc in (
        ("epsilon_grid", lambda v: _num(v) and 0 <= v <= 1, "values in [0, 1]"),
        ("kappa_grid", lambda v: _num(v) and 0 <= v <= 1, "values in [0, 1]"),
        ("alpha_grid", lambda v: _num(v) and v > 0, "positive values"),
        ("rules", lambda v: v in RULES, f"names from {RULES}"),
    ):
        vals = sweep[axis]
        if not isinstance(vals, list) or not all(check(v) for v in vals):
            bad(f"sweep.{axis}", f"must be a list of {desc}")


@dataclass(frozen=True)
class Cell:
    rule: str
    epsilon: float
    kappa: float
    alpha: float
    seed: int

    @property
    def stem(self) -> str:
        return (f"{self.rule}_eps{self.epsilon:g}_kap{self.kappa:g}"
                f"_alp{self.alpha:g}_s{self.seed}")


class ExperimentConfig:
    """Validated, defaults-filled experiment description."""

    def __init__(self, raw: dict):
        self.raw = raw

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        violations = []
        merged = _merge(DEFAULTS, data, "", violations)
        _check(merged, violations)
        if violations:
            raise ConfigError(
                "invalid config:\n" + "\n".join(f"  - {v}" for v in violations))
        return cls(merged)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ParseError(f"config is not valid YAML: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_yaml(fh.read())

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)

    def with_seed_offset(self, offset: int) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        raw["seeds"] = [s + offset for s in raw["seeds"]]
        return ExperimentConfig(raw)

    def cells(self) -> list:
        sweep = self.raw["sweep"]
        rules = sweep["rules"] or [self.raw["rule"]["name"]]
        eps_axis = sweep["epsilon_grid"] or [self.raw["attack"]["epsilon"]]
        kap_axis = sweep["kappa_grid"] or [self.raw["attack"]["kappa"]]
        alp_axis = sweep["alpha_grid"] or [self.raw["partition"]["alpha"]]
        out = []
        for rule in rules:
            for eps in eps_axis:
                for kap in kap_axis:
                    for alp in alp_axis:
                        for seed in self.raw["seeds"]:
                            out.append(Cell(rule, float(eps), float(kap),
                                            float(alp), int(seed)))
        return out

    # -- dataset materialization ------------------------------------------

    def ensure_dataset_file(self):
        """Generate the CSV stand-in once, atomically, if configured."""
        ds = self.raw["dataset"]
        if ds["kind"] != "adult_synth_csv" or os.path.exists(ds["path"]):
            return
        directory = os.path.dirname(ds["path"]) or "."
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".csv")
        os.close(fd)
        try:
            write_synthetic_adult_csv(
                tmp, ds["rows"], ds["seed"],
                privileged_fraction=ds["privileged_fraction"],
                group_logit_bias=ds["group_logit_bias"])
            os.replace(tmp, ds["path"])
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)

    def load_data(self, seed: int):
        """(train, test) for one cell seed."""
        ds = self.raw["dataset"]
        split_seed = rng.substream_seed(seed, "split")
        if ds["kind"] == "synthetic":
            full = synth_generate(
                rng.substream_seed(seed, "data"), ds["n"],
                ds["group_fraction"], ds["separation"], ds["disadvantage"],
                feature_dim=ds["feature_dim"])
            return train_test_split(full, ds["test_fraction"], split_seed)
        self.ensure_dataset_file()
        schema = CsvSchema(include_sensitive_feature=ds["include_sensitive"])
        return load_adult_split(ds["path"], ds["test_fraction"], split_seed,
                                schema=schema)

    def build_plan(self, cell: Cell) -> ExperimentPlan:
        raw = self.raw
        train, test = self.load_data(cell.seed)
        atk = raw["attack"]
        rule = raw["rule"]
        return ExperimentPlan(
            train=train,
            test=test,
            n_clients=raw["partition"]["n_clients"],
            alpha=cell.alpha,
            hidden_dims=list(raw["model"]["hidden"]),
            learning_rate=raw["optimizer"]["learning_rate"],
            momentum=raw["optimizer"]["momentum"],
            rounds=raw["training"]["rounds"],
            participation_rate=raw["training"]["participation_rate"],
            local_epochs=raw["training"]["local_epochs"],
            batch_size=raw["training"]["batch_size"],
            benign_fairness_penalty=raw["training"]["benign_fairness_penalty"],
            surrogate=SurrogateConfig(
                mu=raw["surrogate"]["mu"],
                penalty_weight=raw["surrogate"]["penalty_weight"]),
            rule=cell.rule,
            rule_params={
                "f_byzantine": rule["f_byzantine"],
                "tau_norm": rule["tau_norm"],
                "threshold_mode": rule["threshold_mode"],
                "q": rule["q"],
                "beta": rule["beta"],
            },
            schedule=atk["schedule"],
            epsilon=cell.epsilon,
            attack_round=atk["attack_round"],
            attack_kind=atk["kind"],
            attack=AttackConfig(
                kappa=cell.kappa,
                gamma=atk["gamma"],
                rho=atk["rho"],
                mu=atk["mu"],
                target_group=atk["target_group"],
                local_epochs=raw["training"]["local_epochs"],
                poison_epochs=atk["poison_epochs"],
                poison_lr=atk["poison_lr"],
            ),
            anchor_fraction=atk["anchor_fraction"],
            anchor_scale=atk["anchor_scale"],
            size_exponent=raw["partition"]["size_exponent"],
            seed=cell.seed,
        )
