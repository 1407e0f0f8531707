from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from parsched.metrics import kendall_tau_b
from parsched.predictor import (
    FeatureError,
    FeatureExtractor,
    LinearScorer,
    ModelError,
    PairError,
    TrainConfig,
    TrainedModel,
    TrainingError,
    build_pairs,
    evaluate_tau,
    margin_ranking_loss,
    min_length_difference,
    oracle_scorer,
    score,
    train,
)
from parsched.predictor.losses import (
    listmle_loss,
    listmle_loss_grad,
    pairwise_loss_grad,
    pointwise_l1_loss_grad,
)
from parsched.predictor.pairs import SAMPLING_BUDGET_FACTOR, is_informative, pair_label, sample_pair_indices
from parsched.predictor.training import pointwise_target
from parsched.workload import LengthModel, PromptRecord, synthesize_dataset

LOGN = LengthModel.lognormal(5.0, 1.2)


def _recs(lengths):
    return [PromptRecord(f"r{i:03d}", f"prompt {i}", int(L)) for i, L in enumerate(lengths)]


# -- pairs ---------------------------------------------------------------------------


def test_eq1_examples():
    assert min_length_difference(100, 50) == 0.5
    assert pair_label(100, 50) == 1 and pair_label(50, 100) == -1
    assert is_informative(100, 50, 0.2)
    assert min_length_difference(100, 90) == pytest.approx(0.1)
    assert not is_informative(100, 90, 0.2)
    assert not is_informative(7, 7, 0.0)
    with pytest.raises(PairError):
        pair_label(3, 3)


def test_build_pairs_labels_and_filter():
    recs = synthesize_dataset(150, LOGN, seed=1)
    L = {r.id: r.output_len for r in recs}
    pairs = build_pairs(recs, delta=0.2, max_pairs=3000, seed=0)
    assert len(pairs) == 3000
    for p in pairs:
        assert p.y * (L[p.a] - L[p.b]) > 0
        assert p.rel_diff == min_length_difference(L[p.a], L[p.b]) >= 0.2
        assert p.a != p.b


def test_exact_ties_excluded_at_zero_delta():
    recs = _recs([5, 5, 5, 9])
    pairs = build_pairs(recs, delta=0.0, max_pairs=50, seed=0)
    assert pairs and all("r003" in (p.a, p.b) for p in pairs)


def test_no_informative_pairs():
    with pytest.raises(PairError, match="no informative pairs"):
        build_pairs(_recs([10] * 20), delta=0.0, max_pairs=10)
    with pytest.raises(PairError, match="no informative pairs"):
        build_pairs(_recs([100, 95, 91]), delta=0.2, max_pairs=10)
    with pytest.raises(PairError):
        build_pairs([], 0.2)


def test_build_pairs_deterministic():
    recs = synthesize_dataset(80, LOGN, seed=2)
    assert build_pairs(recs, 0.2, 500, seed=4) == build_pairs(recs, 0.2, 500, seed=4)


def test_sampling_budget_is_bounded():
    # one long record among 400: about 0.5% of draws qualify
    lengths = [10] * 399 + [100]
    rng = np.random.default_rng(0)
    ia, ib, y, drawn = sample_pair_indices(lengths, 0.2, 1000, rng)
    assert drawn <= SAMPLING_BUDGET_FACTOR * 1000
    assert len(y) < 1000


def test_kept_fraction_matches_exhaustive_enumeration():
    recs = synthesize_dataset(100, LOGN, seed=5, noise=0.15)
    L = [r.output_len for r in recs]
    qualifying = sum(is_informative(a, b, 0.2) for a, b in itertools.combinations(L, 2))
    expected = qualifying / math.comb(100, 2)
    _, _, y, drawn = sample_pair_indices(L, 0.2, 20_000, np.random.default_rng(0))
    assert len(y) / drawn == pytest.approx(expected, abs=0.01)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 60), min_size=2, max_size=12), st.sampled_from([0.0, 0.2, 0.5]))
def test_support_equals_bruteforce_set(lengths, delta):
    recs = _recs(lengths)
    brute = {(a.id, b.id) for a, b in itertools.permutations(recs, 2)
             if is_informative(a.output_len, b.output_len, delta)}
    if not brute:
        with pytest.raises(PairError):
            build_pairs(recs, delta, max_pairs=2000, seed=0)
        return
    emitted = {(p.a, p.b) for p in build_pairs(recs, delta, max_pairs=2000, seed=0)}
    assert emitted <= brute
    # 2000 draws over at most 132 ordered pairs reach every member of the support
    assert emitted == brute


# -- losses --------------------------------------------------------------------------


@pytest.mark.parametrize(
    "s_a,s_b,y,margin,expected",
    [(2.0, 0.5, 1, 1.0, 0.0), (0.0, 0.0, 1, 1.0, 1.0), (0.5, 2.0, 1, 1.0, 2.5),
     (0.5, 2.0, -1, 1.0, 0.0), (2.0, 0.5, -1, 1.0, 2.5), (1.0, 0.0, 1, 1.0, 0.0), (0.0, 0.0, -1, 0.0, 0.0)],
)
def test_margin_ranking_loss_examples(s_a, s_b, y, margin, expected):
    assert margin_ranking_loss(s_a, s_b, y, margin) == expected


@settings(max_examples=200)
@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.sampled_from([1, -1]), st.floats(0, 10), st.floats(-1e3, 1e3))
def test_loss_form_and_shift_invariance(s_a, s_b, y, margin, c):
    loss = margin_ranking_loss(s_a, s_b, y, margin)
    assert loss >= 0
    assert (loss == 0) == (y * (s_a - s_b) >= margin)
    assert margin_ranking_loss(s_a + c, s_b + c, y, margin) == pytest.approx(loss, abs=1e-9)


def _dense(rng, n, d):
    return sp.csr_matrix(rng.normal(size=(n, d)))


def _fd(f, w, j, eps=1e-6):
    e = np.zeros_like(w)
    e[j] = eps
    return (f(w + e) - f(w - e)) / (2 * eps)


def test_pointwise_gradient_finite_difference():
    rng = np.random.default_rng(1)
    x, t = _dense(rng, 30, 12), rng.normal(size=30)
    w = rng.normal(size=12)
    _, g, gb = pointwise_l1_loss_grad(w, 0.3, x, t)
    for j in range(12):
        num = _fd(lambda v: pointwise_l1_loss_grad(v, 0.3, x, t)[0], w, j)
        assert abs(num - g[j]) <= 1e-5 * max(1.0, abs(num))
    num_b = (pointwise_l1_loss_grad(w, 0.3 + 1e-6, x, t)[0] - pointwise_l1_loss_grad(w, 0.3 - 1e-6, x, t)[0]) / 2e-6
    assert gb == pytest.approx(num_b, abs=1e-6)


def test_listmle_gradient_finite_difference():
    rng = np.random.default_rng(2)
    m, k, d = 6, 5, 10
    x = _dense(rng, m * k, d)
    w = rng.normal(size=d)
    _, g, _ = listmle_loss_grad(w, 0.0, x, (m, k))
    for j in range(d):
        num = _fd(lambda v: listmle_loss_grad(v, 0.0, x, (m, k))[0], w, j)
        assert abs(num - g[j]) <= 1e-5 * max(1.0, abs(num))


def test_listmle_matches_definition():
    s = np.array([[3.0, 1.0, -2.0, 0.5]])
    expected = sum(math.log(sum(math.exp(v) for v in s[0, i:])) - s[0, i] for i in range(4))
    assert listmle_loss(s)[0] == pytest.approx(expected, rel=1e-12)


def test_pairwise_gradient_bias_free():
    rng = np.random.default_rng(3)
    xa, xb = _dense(rng, 8, 5), _dense(rng, 8, 5)
    y = rng.choice([-1, 1], size=8)
    w = rng.normal(size=5)
    assert pairwise_loss_grad(w, 0.0, xa, xb, y, 1.0)[0] == pairwise_loss_grad(w, 9.0, xa, xb, y, 1.0)[0]
    hinge = [margin_ranking_loss(a, b, yy) for a, b, yy in zip(xa @ w, xb @ w, y)]
    assert pairwise_loss_grad(w, 0.0, xa, xb, y, 1.0)[0] == pytest.approx(np.mean(hinge), rel=1e-12)


def test_pointwise_target_monotone():
    L = np.arange(1, 10_000)
    assert np.all(np.diff(pointwise_target(L)) > 0)


# -- features and scoring --------------------------------------------------------------


def test_hashed_features_shape_and_determinism():
    fx = FeatureExtractor(dim=256)
    recs = synthesize_dataset(20, LOGN, seed=0)
    m = fx.transform(recs)
    assert m.shape == (20, 256)
    assert (m != fx.transform(recs)).nnz == 0
    assert np.allclose(np.sqrt(m.multiply(m).sum(axis=1)), 1.0)
    raw = FeatureExtractor(dim=256, normalization="none").transform_one(recs[0])
    assert raw.shape == (256,)


def test_extractor_round_trip():
    fx = FeatureExtractor(dim=100, word_ngrams=(1, 2), char_ngrams=(2, 3), normalization="none")
    assert FeatureExtractor.from_dict(fx.to_dict()) == fx
    with pytest.raises(FeatureError):
        FeatureExtractor(kind="bert")


def test_embedding_extractor():
    fx = FeatureExtractor("precomputed_embedding", dim=3, normalization="none")
    rec = PromptRecord("a", "x", 3, embedding=(0.0, 3.5, 1.0))
    assert np.array_equal(fx.transform_one(rec), [0.0, 3.5, 1.0])
    with pytest.raises(FeatureError):
        fx.transform([PromptRecord("b", "x", 3)])


def test_score_identities():
    fx = FeatureExtractor("precomputed_embedding", dim=3, normalization="none")
    rec = PromptRecord("a", "x", 3, embedding=(0.0, 3.5, 1.0))
    assert score(LinearScorer.zeros(fx), rec) == 0.0
    assert score(LinearScorer(np.array([0.0, 1.0, 0.0]), 0.0, fx), rec) == 3.5
    with pytest.raises(FeatureError):
        score(LinearScorer.zeros(fx), PromptRecord("b", "x", 3))


def test_batch_equals_single_scores():
    recs = synthesize_dataset(40, LOGN, seed=3)
    model = train(recs, TrainConfig(epochs=1))
    batch = model.score_batch(recs)
    assert np.allclose(batch, [model(r) for r in recs], rtol=0, atol=1e-12)


def test_oracle_scorer():
    recs = [PromptRecord("a", "x", 700), PromptRecord("b", "x", 10), PromptRecord("c", "y", 20)]
    orc = oracle_scorer(recs)
    assert orc(recs[0]) == 700.0
    assert orc(recs[1]) < orc(recs[2])
    assert orc("c") == 20.0
    with pytest.raises(ModelError):
        orc(PromptRecord("zzz", "x", 1))
    data = synthesize_dataset(50, LOGN, seed=1)
    assert evaluate_tau(oracle_scorer(data), data).tau_b == 1.0


# -- training ------------------------------------------------------------------------


def test_zero_epochs_gives_zero_model():
    recs = synthesize_dataset(30, LOGN, seed=0)
    for objective in ("pairwise", "pointwise_l1", "listwise_listmle"):
        m = train(recs, TrainConfig(objective=objective, epochs=0))
        assert not m.scorer.weights.any() and m.scorer.bias == 0.0
        assert m.loss_trace == []


def test_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.delta, c.margin, c.epochs, c.batch_size) == (0.2, 1.0, 5, 128)
    assert TrainConfig.from_dict(c.to_dict()) == c
    for bad in ({"delta": 1.0}, {"margin": 0}, {"objective": "ranknet"}, {"learning_rate": -1}, {"list_size": 1}):
        with pytest.raises(TrainingError):
            TrainConfig(**bad)


def test_training_deterministic_and_traced(tmp_path):
    recs = synthesize_dataset(300, LOGN, seed=4, noise=0.1)
    for objective in ("pairwise", "pointwise_l1", "listwise_listmle"):
        cfg = TrainConfig(objective=objective, epochs=3, seed=11)
        a, b = train(recs, cfg), train(recs, cfg)
        assert np.array_equal(a.scorer.weights, b.scorer.weights)
        assert len(a.loss_trace) == 3
        a.save(tmp_path / f"{objective}.json")
        back = TrainedModel.load(tmp_path / f"{objective}.json")
        assert back.objective == objective
        assert np.array_equal(back.scorer.weights, a.scorer.weights)
        assert back.loss_trace == a.loss_trace


def test_training_learns_ordering():
    recs = synthesize_dataset(1200, LOGN, seed=0)
    model = train(recs[:1000], TrainConfig())
    assert model.loss_trace[-1] < model.loss_trace[0]
    assert evaluate_tau(model, recs[1000:]).tau_b > 0.85


def test_embedding_training_path():
    recs = synthesize_dataset(600, LOGN, seed=0, embedding_dim=8)
    fx = FeatureExtractor("precomputed_embedding", dim=8, normalization="none")
    model = train(recs[:500], TrainConfig(extractor=fx, learning_rate=0.1))
    assert evaluate_tau(model, recs[500:]).tau_b > 0.9


def test_divergence_reported():
    recs = synthesize_dataset(200, LOGN, seed=0)
    fx = FeatureExtractor(normalization="none")
    with pytest.raises(TrainingError, match="diverged at epoch 0"):
        train(recs, TrainConfig(objective="listwise_listmle", learning_rate=1e300, extractor=fx))


def test_listwise_needs_enough_records():
    with pytest.raises(TrainingError):
        train(_recs(range(1, 6)), TrainConfig(objective="listwise_listmle"))


def test_model_file_validation(tmp_path):
    recs = synthesize_dataset(30, LOGN, seed=0)
    d = train(recs, TrainConfig(epochs=1)).to_dict()
    with pytest.raises(ModelError):
        TrainedModel.from_dict({**d, "format": "other"})
    with pytest.raises(ModelError):
        TrainedModel.from_dict({**d, "version": 2})
    with pytest.raises(ModelError):
        TrainedModel.from_dict({**d, "weights": d["weights"][:-1]})
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ModelError):
        TrainedModel.load(tmp_path / "bad.json")


def test_zero_model_is_degenerate():
    from parsched.metrics import DegenerateRankingError

    recs = synthesize_dataset(30, LOGN, seed=0)
    with pytest.raises(DegenerateRankingError):
        evaluate_tau(train(recs, TrainConfig(epochs=0)), recs)


def test_perfect_pointwise_regressor_orders_like_lengths():
    L = np.array([3, 50, 7, 900, 12])
    assert kendall_tau_b(pointwise_target(L), L).tau_b == 1.0
