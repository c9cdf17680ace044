"""Deterministic federated-learning simulator with a fairness-targeted
model-poisoning attack, robust aggregation rules, and group-fairness
metrics.

Layering, bottom up: nn (MLP + exact gradients), data (ingestion,
synthesis, partitioning), fairness (metrics + differentiable surrogate),
lrp / influence (parameter importance and sample influence), attack (the
malicious-client pipeline), aggregation + engine (the server loop),
recsys (recommender case study), config + cli (experiment harness).
"""

__version__ = "0.1.0"
