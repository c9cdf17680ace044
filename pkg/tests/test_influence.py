"""Tangent-kernel influence scoring against brute-force oracles."""

import numpy as np
import pytest

from fedbias import nn
from fedbias.data import Dataset
from fedbias.errors import EmptyInputError, ShapeError
from fedbias.fairness import SurrogateConfig, surrogate_phi
from fedbias.influence import InfluenceScores, influence_scores, ntk


def rand_model(seed, dims=(3, 5, 1)):
    return nn.init_model(list(dims), seed)


def test_ntk_symmetric():
    model = rand_model(7)
    rng = np.random.default_rng(0)
    for _ in range(10):
        a, b = rng.standard_normal(3), rng.standard_normal(3)
        assert ntk(model, a, b) == pytest.approx(ntk(model, b, a), rel=1e-12)


def test_ntk_self_nonnegative():
    model = rand_model(8)
    rng = np.random.default_rng(1)
    for _ in range(10):
        a = rng.standard_normal(3)
        assert ntk(model, a, a) >= 0.0


def test_ntk_linear_closed_form():
    # single linear layer: grad wrt (W, b) is (x, 1), so the kernel is
    # x_i . x_j + 1 regardless of the weights
    model = nn.MlpModel([3, 1], [np.array([[0.3, -1.2, 2.0]])],
                        [np.array([0.7])])
    rng = np.random.default_rng(2)
    for _ in range(10):
        a, b = rng.standard_normal(3), rng.standard_normal(3)
        assert ntk(model, a, b) == pytest.approx(float(a @ b) + 1.0, rel=1e-12)


def test_ntk_gram_psd():
    model = rand_model(9, dims=(4, 6, 3, 1))
    rng = np.random.default_rng(3)
    pts = rng.standard_normal((8, 4))
    gram = np.array([[ntk(model, a, b) for b in pts] for a in pts])
    assert np.linalg.eigvalsh(gram).min() >= -1e-8


def _sets(seed, n_cand=12, n_targ=5, d=3):
    rng = np.random.default_rng(seed)
    cands = Dataset(rng.standard_normal((n_cand, d)),
                    rng.integers(0, 2, n_cand), np.ones(n_cand, dtype=int))
    targs = Dataset(rng.standard_normal((n_targ, d)),
                    np.ones(n_targ, dtype=int), np.zeros(n_targ, dtype=int))
    return cands, targs


def brute_force_scores(model, cands, targs):
    logits = nn.forward_batch(
        model, np.concatenate([cands.features, targs.features]))
    groups = np.concatenate([cands.groups, targs.groups])
    _, dphi = surrogate_phi(logits, groups)
    out = []
    for i in range(len(cands)):
        bracket = (nn.bce_grad(logits[i:i + 1], cands.labels[i:i + 1])[0]
                   + dphi[i])
        kmean = np.mean([ntk(model, cands.features[i], t)
                         for t in targs.features])
        out.append(-bracket * kmean)  # exclusion influence: undone step
    return np.array(out)


def test_scores_match_pairwise_brute_force():
    model = rand_model(11)
    cands, targs = _sets(4)
    got = influence_scores(model, cands, targs, SurrogateConfig())
    np.testing.assert_allclose(got.scores(), brute_force_scores(model, cands, targs),
                               rtol=1e-10, atol=1e-12)


def test_blocking_does_not_change_scores():
    model = rand_model(12)
    cands, targs = _sets(5, n_cand=20, n_targ=9)
    a = influence_scores(model, cands, targs, SurrogateConfig(), block_size=3)
    b = influence_scores(model, cands, targs, SurrogateConfig(), block_size=256)
    np.testing.assert_allclose(a.scores(), b.scores(), atol=1e-12)


def test_duplicating_targets_leaves_scores_unchanged():
    model = rand_model(13)
    cands, targs = _sets(6)
    doubled = Dataset(np.concatenate([targs.features] * 2),
                      np.concatenate([targs.labels] * 2),
                      np.concatenate([targs.groups] * 2))
    a = influence_scores(model, cands, targs, SurrogateConfig())
    b = influence_scores(model, cands, doubled, SurrogateConfig())
    np.testing.assert_allclose(a.scores(), b.scores(), atol=1e-12)


def test_linear_single_pair_hand_oracle():
    # f(x) = x, candidate x=2 y=1 group 1, target x=3 group 0:
    # kernel mean = 2*3 + 1 = 7, bracket = sigmoid(2) - 1 + dphi,
    # negated for the exclusion convention
    model = nn.MlpModel([1, 1], [np.array([[1.0]])], [np.zeros(1)])
    cands = Dataset(np.array([[2.0]]), np.array([1]), np.array([1]))
    targs = Dataset(np.array([[3.0]]), np.array([1]), np.array([0]))
    _, dphi = surrogate_phi(np.array([2.0, 3.0]), np.array([1, 0]))
    want = -(1 / (1 + np.exp(-2.0)) - 1.0 + dphi[0]) * 7.0
    got = influence_scores(model, cands, targs, SurrogateConfig())
    assert got.scores()[0] == pytest.approx(want, rel=1e-12)


def test_leave_one_out_direction():
    # first-order check: one GD step on candidate i with the scored
    # objective moves the mean target logit by about +eta * score(i),
    # the negative of the exclusion effect the score reports
    model = rand_model(21, dims=(2, 8, 1))
    rng = np.random.default_rng(31)
    cands = Dataset(rng.standard_normal((30, 2)), rng.integers(0, 2, 30),
                    np.ones(30, dtype=int))
    targs = Dataset(rng.standard_normal((10, 2)) + 0.5,
                    np.ones(10, dtype=int), np.zeros(10, dtype=int))
    scores = influence_scores(model, cands, targs, SurrogateConfig()).scores()

    logits = nn.forward_batch(
        model, np.concatenate([cands.features, targs.features]))
    _, dphi = surrogate_phi(logits,
                            np.concatenate([cands.groups, targs.groups]))
    eta = 1e-5
    theta = nn.flatten(model)
    base = nn.forward_batch(model, targs.features).mean()
    agree = total = 0
    for i in range(len(cands)):
        if abs(scores[i]) < 1e-9:
            continue
        grad = nn.backward(model, cands.features[i:i + 1],
                           cands.labels[i:i + 1],
                           loss_grad_extra=dphi[i:i + 1])
        stepped = nn.unflatten(model.layer_dims, theta - eta * grad)
        delta = nn.forward_batch(stepped, targs.features).mean() - base
        total += 1
        if np.sign(delta) == np.sign(scores[i]):
            agree += 1
    assert total >= 20
    assert agree / total >= 0.7


def test_candidate_indices_flow_to_entries_and_csv():
    model = rand_model(14)
    cands, targs = _sets(7, n_cand=3)
    got = influence_scores(model, cands, targs, SurrogateConfig(),
                           candidate_indices=[40, 10, 99], model_round=6)
    assert [i for i, _ in got.entries] == [40, 10, 99]
    assert got.model_round == 6 and got.target_group == 0
    lines = got.to_csv().strip().split("\n")
    assert lines[0] == "index,score"
    assert lines[1].startswith("40,")
    assert float(lines[2].split(",")[1]) == got.entries[1][1]


def test_input_validation():
    model = rand_model(15)
    cands, targs = _sets(8)
    # empty sets cannot even be constructed
    with pytest.raises(EmptyInputError):
        Dataset(np.empty((0, 3)), np.empty(0, dtype=int),
                np.empty(0, dtype=int))
    with pytest.raises(ShapeError):
        influence_scores(model, cands, targs, SurrogateConfig(),
                         candidate_indices=[1, 2])
    with pytest.raises(ShapeError):
        InfluenceScores([(0, float("nan"))], target_group=0)
