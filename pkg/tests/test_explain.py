import math
import warnings

import numpy as np
import pytest

from ehr_attention.dataset import N_TOKENS, N_VITAL_TOKENS, PatientRecord, preprocess_global, synth_generate
from ehr_attention.explain import (
    Attribution,
    ModelStateError,
    ShapleySizeError,
    attention_importance,
    exact_shapley,
    kernel_shap,
    logistic_weight_importance,
    random_importance,
    shapley_kernel,
)
from ehr_attention.models import LogisticModel, ModelConfig, MortalityModel
from ehr_attention.training import TrainConfig, train_stage2
from rigs import random_scorer

SMALL = ModelConfig(d=8, layers=1, heads=2, seed=1)


def record(seed=0):
    rng = np.random.default_rng(seed)
    return PatientRecord("r", rng.random((7, 24)), rng.random(196), 1)


def sparse_pair(rng, active):
    """Background and a record that differs from it only on ``active``."""
    bg = rng.random(N_TOKENS)
    x = bg.copy()
    x[active] = rng.random(len(active))
    return x, bg


# --- attention ------------------------------------------------------------


def test_attention_scores_are_a_distribution():
    model = MortalityModel(SMALL)
    for s in range(5):
        a = attention_importance(model, record(s))
        assert a.scores.shape == (N_TOKENS,)
        assert np.all(a.scores >= 0)
        assert abs(a.scores.sum() - 1.0) <= 1e-9


def test_attention_symmetric_keys_uniform():
    model = MortalityModel(SMALL)
    model.fusion.w_k.data[...] = 0.0
    a = attention_importance(model, record())
    np.testing.assert_allclose(a.scores, 1 / 364, atol=1e-15)


def test_attention_deterministic():
    model = MortalityModel(SMALL)
    assert np.array_equal(attention_importance(model, record()).scores, attention_importance(model, record()).scores)


def test_attention_nan_parameters():
    model = MortalityModel(SMALL)
    model.head.weight.data[0, 0] = np.nan
    with pytest.raises(ModelStateError):
        attention_importance(model, record())


def test_attention_ranks_planted_tokens_higher():
    raw, gt = synth_generate(200, 0.5, seed=2)
    cohort, _ = preprocess_global(raw, rounds=3, balance=False)
    model = MortalityModel(SMALL)
    train_stage2(model, cohort.tokens(), cohort.labels, TrainConfig(epochs=15, batch_size=32, lr=3e-3))
    planted = np.zeros(N_TOKENS, bool)
    planted[gt.important_tokens] = True
    positives = np.where(cohort.labels == 1)[0]
    assert len(positives) >= 50
    gaps = []
    for i in positives:
        ranks = np.empty(N_TOKENS)
        ranks[attention_importance(model, cohort.record(i)).ranking()] = np.arange(N_TOKENS)
        gaps.append(ranks[~planted].mean() - ranks[planted].mean())
    assert np.mean(gaps) > 0


# --- Shapley kernel and exact values ---------------------------------------


def test_kernel_formula():
    m = 5
    sizes = np.arange(1, m)
    expected = [(m - 1) / (math.comb(m, s) * s * (m - s)) for s in sizes]
    np.testing.assert_allclose(shapley_kernel(m, sizes), expected, rtol=1e-15)


def test_exact_product_example():
    x = np.zeros(N_TOKENS)
    x[[3, 9]] = 1.0

    def scorer(Z):
        return Z[:, 3] * Z[:, 9]

    np.testing.assert_allclose(exact_shapley(scorer, x, np.zeros(N_TOKENS), [3, 9]), [0.5, 0.5], atol=1e-15)


def test_exact_additive_and_dummy():
    rng = np.random.default_rng(0)
    active = [1, 50, 200, 300]
    x, bg = sparse_pair(rng, active)
    w = rng.normal(size=N_TOKENS)
    w[300] = 0.0

    def scorer(Z):
        return Z @ w

    phi = exact_shapley(scorer, x, bg, active)
    np.testing.assert_allclose(phi, w[active] * (x - bg)[active], atol=1e-12)
    assert phi[3] == 0.0


def test_exact_size_limit():
    with pytest.raises(ShapleySizeError):
        exact_shapley(lambda Z: Z[:, 0], np.ones(N_TOKENS), np.zeros(N_TOKENS), range(13))


# --- KernelSHAP ------------------------------------------------------------


def test_kernel_shap_product_example():
    x = np.zeros(N_TOKENS)
    x[[3, 9]] = 1.0
    a = kernel_shap(lambda Z: Z[:, 3] * Z[:, 9], x, np.zeros(N_TOKENS), n_samples=730)
    assert a.scores[3] == pytest.approx(0.5, abs=1e-12)
    assert a.scores[9] == pytest.approx(0.5, abs=1e-12)


def test_kernel_shap_record_equals_background():
    x = np.random.default_rng(0).random(N_TOKENS)
    a = kernel_shap(lambda Z: np.sin(Z).sum(axis=1), x, x.copy(), n_samples=730)
    assert np.all(a.scores == 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_kernel_shap_matches_exact_when_enumerated(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 11))
    active = sorted(rng.choice(N_TOKENS, m, replace=False).tolist())
    scorer = random_scorer(rng, active)
    x, bg = sparse_pair(rng, active)
    a = kernel_shap(scorer, x, bg, n_samples=2**m)
    exact = exact_shapley(scorer, x, bg, active)
    assert np.max(np.abs(a.scores[active] - exact)) < 1e-3
    rest = np.ones(N_TOKENS, bool)
    rest[active] = False
    assert np.all(a.scores[rest] == 0.0)


def test_kernel_shap_linear_closed_form_sampled():
    rng = np.random.default_rng(3)
    w, b = rng.normal(size=N_TOKENS), 0.3
    x, bg = rng.random(N_TOKENS), rng.random(N_TOKENS)
    a = kernel_shap(lambda Z: Z @ w + b, x, bg, n_samples=1024, seed=0)
    np.testing.assert_allclose(a.scores, w * (x - bg), atol=1e-6)


def test_kernel_shap_efficiency_sampled():
    rng = np.random.default_rng(4)
    scorer = random_scorer(rng, list(range(0, N_TOKENS, 7)))
    x, bg = rng.random(N_TOKENS), rng.random(N_TOKENS)
    a = kernel_shap(scorer, x, bg, n_samples=1024, seed=1)
    total = scorer(x[None])[0] - scorer(bg[None])[0]
    assert abs(math.fsum(a.scores.tolist()) - total) <= 1e-9


def test_kernel_shap_symmetry():
    active = [10, 20, 30, 40]
    x = np.zeros(N_TOKENS)
    x[active] = 1.0

    def scorer(Z):
        return np.tanh(Z[:, 10] + Z[:, 20]) + Z[:, 30] * Z[:, 40] * 0.5

    a = kernel_shap(scorer, x, np.zeros(N_TOKENS), n_samples=16)
    assert abs(a.scores[10] - a.scores[20]) <= 1e-6
    assert abs(a.scores[30] - a.scores[40]) <= 1e-6


def test_kernel_shap_rejects_small_budget():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        kernel_shap(lambda Z: Z.sum(axis=1), rng.random(N_TOKENS), rng.random(N_TOKENS), n_samples=64)


def test_kernel_shap_seeded():
    rng = np.random.default_rng(5)
    scorer = random_scorer(rng, list(range(0, N_TOKENS, 5)))
    x, bg = rng.random(N_TOKENS), rng.random(N_TOKENS)
    a = kernel_shap(scorer, x, bg, n_samples=800, seed=2)
    b = kernel_shap(scorer, x, bg, n_samples=800, seed=2)
    assert np.array_equal(a.scores, b.scores)


def test_singular_system_warns_and_regularizes():
    # all coalitions of a 3-player game, duplicated player columns make it singular
    from ehr_attention.explain import _constrained_wls

    Z = np.array([[1, 1, 0], [0, 0, 1], [1, 1, 1], [0, 0, 0]], dtype=float)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        phi = _constrained_wls(Z, np.array([1.0, 0.5, 1.5, 0.0]), np.ones(4), 1.5)
    assert caught
    assert abs(phi.sum() - 1.5) < 1e-9


# --- logistic weights and the attribution container ------------------------


def test_weight_importance_examples():
    m = LogisticModel()
    assert np.all(logistic_weight_importance(m).scores == 0.0)
    m.weight.data[:3, 0] = [3.0, -4.0, 0.0]
    s = logistic_weight_importance(m).scores
    assert s[:3].tolist() == [3.0, 4.0, 0.0]
    m.weight.data[:, 0] = np.random.default_rng(0).normal(size=N_TOKENS)
    before = logistic_weight_importance(m)
    m.weight.data *= 2
    after = logistic_weight_importance(m)
    np.testing.assert_array_equal(after.scores, 2 * before.scores)
    np.testing.assert_array_equal(after.ranking(), before.ranking())


def test_attribution_json_round_trip_and_registry():
    a = Attribution("shap", np.linspace(0, 1, N_TOKENS), stay_id="s1")
    b = Attribution.from_json(a.to_json())
    assert b.method == "shap" and b.stay_id == "s1"
    np.testing.assert_array_equal(a.scores, b.scores)
    reg = a.token_registry
    assert reg[0] == {"index": 0, "kind": "vital", "channel": 0, "channel_name": reg[0]["channel_name"], "hour": 1}
    assert reg[N_VITAL_TOKENS]["kind"] == "aggregated"


def test_attribution_rejects_bad_scores():
    with pytest.raises(ValueError):
        Attribution("shap", np.zeros(10))
    bad = np.zeros(N_TOKENS)
    bad[4] = np.inf
    with pytest.raises(ValueError):
        Attribution("shap", bad)


def test_random_importance_seeded():
    assert np.array_equal(random_importance(3, 1), random_importance(3, 1))
    assert random_importance(3, 1).shape == (3, N_TOKENS)
