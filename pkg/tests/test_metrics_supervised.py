import logging

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from saeforge.activations import ActivationDataset
from saeforge.metrics.ablation import (
    DegenerateTask,
    ablate_reconstruct,
    latent_attribution,
    scr_eval,
    shift_score,
    tpp_eval,
    tpp_score,
)
from saeforge.metrics.absorption import AbsorptionConfig, absorption_eval, row_absorption
from saeforge.metrics.probing import (
    ProbeParams,
    ProbeTrainConfig,
    SingleClass,
    f1_score,
    mean_pool,
    pool_sequences,
    select_topk_mean_diff,
    sparse_probing_eval,
    train_probe,
)
from saeforge.models import ArchSpec, identity_sae
from saeforge.synth import GeneratorConfig, OracleSae, build_model, sample_dataset
from saeforge.trainer import init_params

from planted import PlantedAbsorber, planted_dataset


@pytest.fixture(scope="module")
def world():
    model = build_model(GeneratorConfig(), seed=0)
    ds, coeffs = sample_dataset(model, 60_000, seed=11)
    return model, ds, OracleSae(model, ds, coeffs)


# probes


def test_probe_separable_1d():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.uniform(-2, -0.5, 200), rng.uniform(0.5, 2, 200)])[:, None]
    y = np.arange(400) >= 200
    probe = train_probe(x, y)
    assert probe.accuracy(x, y) == 1.0


def test_probe_on_independent_labels_is_near_majority_rate():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4000, 8))
    y = rng.random(4000) < 0.7
    tr, te = slice(0, 3000), slice(3000, None)
    probe = train_probe(x[tr], y[tr])
    # oracle: the best a label-blind classifier can do is the majority rate
    majority = max(y[te].mean(), 1 - y[te].mean())
    se = np.sqrt(majority * (1 - majority) / 1000)
    assert abs(probe.accuracy(x[te], y[te]) - majority) < 3 * se


def test_probe_is_deterministic_in_seed():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(300, 5))
    y = x[:, 0] + 0.5 * rng.normal(size=300) > 0
    a, b = train_probe(x, y, ProbeTrainConfig(seed=3)), train_probe(x, y, ProbeTrainConfig(seed=3))
    assert np.array_equal(a.w, b.w) and a.b == b.b
    c = train_probe(x, y, ProbeTrainConfig(seed=4))
    assert not np.array_equal(a.w, c.w)


def test_probe_rejects_single_class():
    with pytest.raises(SingleClass):
        train_probe(np.ones((5, 2)), np.ones(5, bool))


@pytest.mark.parametrize("field,value", [("batch_size", 0), ("epochs", 0), ("lr", 0.0), ("l1_penalty", -1.0)])
def test_probe_config_validation(field, value):
    with pytest.raises(ValueError):
        ProbeTrainConfig(**{field: value})


def test_probe_flipped_labels_negate_the_probe():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(200, 4))
    y = x[:, 1] > 0.1
    a, b = train_probe(x, y), train_probe(x, ~y)
    np.testing.assert_allclose(a.w, -b.w, atol=1e-12)
    assert a.b == pytest.approx(-b.b, abs=1e-12)


def test_f1_by_hand():
    pred = np.array([1, 1, 0, 0, 1], bool)
    t = np.array([1, 0, 1, 0, 1], bool)
    # tp=2, fp=1, fn=1
    assert f1_score(pred, t) == pytest.approx(4 / 6)
    assert f1_score(np.zeros(3, bool), np.zeros(3, bool)) == 0.0


# pooling


def test_mean_pool_hand_cases(caplog):
    ds = ActivationDataset(np.array([[1, 0], [3, 2], [5, 5], [7, 7]]), seq_lens=[2, 1, 1],
                           mask=np.array([1, 1, 1, 0], bool))
    np.testing.assert_array_equal(mean_pool(ds, 0), [2, 1])
    np.testing.assert_array_equal(mean_pool(ds, 1), [5, 5])
    with caplog.at_level(logging.WARNING):
        assert mean_pool(ds, 2) is None
    assert "fully masked" in caplog.text


def test_mean_pool_skips_masked_rows():
    ds = ActivationDataset(np.array([[1, 0], [3, 2], [9, 9]]), seq_lens=[3], mask=np.array([1, 1, 0], bool))
    np.testing.assert_array_equal(mean_pool(ds, 0), [2, 1])


@given(st.lists(st.integers(1, 4), min_size=1, max_size=6), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_pool_sequences_matches_mean_pool(lens, seed):
    rng = np.random.default_rng(seed)
    n = sum(lens)
    ds = ActivationDataset(rng.normal(size=(n, 3)), seq_lens=lens, mask=rng.random(n) < 0.7)
    pooled, seqs, labels = pool_sequences(ds, ds.data, np.arange(n))
    for row, s in zip(pooled, seqs):
        np.testing.assert_allclose(row, mean_pool(ds, int(s)), rtol=1e-6)
    expected = [s for s in range(len(lens)) if mean_pool(ds, s) is not None]
    assert seqs.tolist() == expected
    # label comes from each kept sequence's first usable row
    for lab, s in zip(labels, seqs):
        start, end = ds.sequence_bounds()[s]
        assert lab == start + int(np.argmax(ds.mask[start:end]))


# top-k selection


def test_topk_mean_diff_hand_instance():
    h = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, 2.0], [0.0, 0.0, 0.0], [0.0, 1.0, 1.0]])
    y = np.array([1, 1, 0, 0], bool)
    # brute force: mean differences are (0.5, 0.0, 1.5)
    diffs = h[y].mean(0) - h[~y].mean(0)
    brute = sorted(range(3), key=lambda j: (-diffs[j], j))
    assert select_topk_mean_diff(h, y, 3).tolist() == brute == [2, 0, 1]


def test_topk_ties_go_to_lower_index():
    h = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    assert select_topk_mean_diff(h, np.array([1, 0], bool), 2).tolist() == [0, 1]


def test_topk_with_k_equal_f_probes_all_latents():
    rng = np.random.default_rng(6)
    h = np.abs(rng.normal(size=(400, 6)))
    y = h[:, 2] + 0.3 * rng.normal(size=400) > 0.8
    sel = select_topk_mean_diff(h, y, 6)
    assert set(sel.tolist()) == set(range(6))
    full = train_probe(h, y)
    sub = train_probe(h[:, sel], y)
    np.testing.assert_allclose(sub.w, full.w[sel], atol=1e-10)
    assert np.array_equal(sub.predict(h[:, sel]), full.predict(h))


# sparse probing


def test_sparse_probing_oracle_k1(world):
    _, ds, oracle = world
    out = sparse_probing_eval(oracle, ds, "class", classes=[0, 1])
    assert out["accuracy"][1] >= 0.95
    n_test = out["per_class"][0][1]["n_test"]
    se = np.sqrt(0.25 / n_test)
    assert out["accuracy"][5] >= out["accuracy"][1] - se


def test_sparse_probing_shuffled_labels_is_chance(world):
    _, ds, oracle = world
    out = sparse_probing_eval(oracle, ds, "class", classes=[0, 1], shuffle_labels=True)
    n_test = out["per_class"][0][1]["n_test"]
    for k, acc in out["accuracy"].items():
        # macro over two classes, each within a few standard errors of 0.5
        assert abs(acc - 0.5) < 4 * np.sqrt(0.25 / n_test), k


def test_sparse_probing_missing_class_raises():
    ds = ActivationDataset(np.random.default_rng(0).normal(size=(20, 3)), labels={"c": np.zeros(20)},
                           label_classes={"c": 2})
    with pytest.raises(SingleClass):
        sparse_probing_eval(identity_sae(3), ds, "c", classes=[1])


# attribution and ablation


def test_attribution_two_latent_hand_instance():
    params = identity_sae(2)
    x = np.array([[1.0, 2.0], [3.0, 0.0]])
    probe = ProbeParams(np.array([0.5, -1.0]), 0.3)
    # brute force: mean over rows of h_j * (w . d_j)
    h = params.encode(x)
    brute = [np.mean([h[r, j] * (probe.w @ params.W_D[:, j]) for r in range(2)]) for j in range(2)]
    np.testing.assert_allclose(latent_attribution(probe, params, x), brute)
    np.testing.assert_allclose(brute, [1.0, -1.0])


def test_attribution_zero_for_orthogonal_and_dead_latents():
    params = identity_sae(3)
    x = np.array([[1.0, 2.0, 0.0], [2.0, 1.0, 0.0]])
    probe = ProbeParams(np.array([0.0, 1.0, 1.0]), 0.0)
    a = latent_attribution(probe, params, x)
    assert a[0] == 0.0  # decoder orthogonal to w
    assert a[2] == 0.0  # never fires


@given(st.integers(0, 2**31))
@settings(max_examples=20, deadline=None)
def test_ablation_identities(seed):
    rng = np.random.default_rng(seed)
    params = init_params(ArchSpec("relu"), 6, 10, seed=seed % 1000)
    params.b_E = rng.normal(0, 0.5, 10).astype(np.float32)
    x = rng.normal(size=(7, 6))
    np.testing.assert_array_equal(ablate_reconstruct(params, x, []), x)
    x_hat = params.decode(params.encode(x))
    np.testing.assert_allclose(ablate_reconstruct(params, x, range(10)), x - x_hat + params.b_D, atol=1e-5)
    h = params.encode(x)
    j = int(rng.integers(10))
    direct = x - np.outer(h[:, j], params.W_D[:, j])
    np.testing.assert_allclose(ablate_reconstruct(params, x, [j]), direct, atol=1e-6)


# SCR


def test_shift_score_anchors():
    assert shift_score(0.6, 0.6, 0.9) == 0.0
    assert shift_score(0.9, 0.6, 0.9) == 1.0
    with pytest.raises(DegenerateTask, match="degenerate task"):
        shift_score(0.7, 0.8, 0.8)


def test_scr_oracle_scenario(world):
    _, ds, oracle = world
    out = scr_eval(oracle, ds, "class", "gender", ks=(20,))
    assert out["per_k"][20]["s_shift"] >= 0.9
    assert out["a_base"] < out["a_oracle"]


def test_scr_invariant_to_which_class_is_positive(world):
    _, ds, oracle = world
    a = scr_eval(oracle, ds, "class", "gender", ks=(5, 20))
    b = scr_eval(oracle, ds, "class", "gender", class_pair=(1, 0), spurious_pair=(1, 0), ks=(5, 20))
    for k in (5, 20):
        assert a["per_k"][k]["s_shift"] == pytest.approx(b["per_k"][k]["s_shift"], abs=0.01)
        assert a["per_k"][k]["latents"] == b["per_k"][k]["latents"]


def test_scr_single_class_is_degenerate():
    rng = np.random.default_rng(0)
    n = 400
    ds = ActivationDataset(rng.normal(size=(n, 4)), labels={"c": np.zeros(n), "s": rng.integers(0, 2, n)},
                           label_classes={"c": 2, "s": 2})
    with pytest.raises(DegenerateTask, match="rarest"):
        scr_eval(identity_sae(4), ds, "c", "s")


# TPP


def test_tpp_identity_is_exactly_zero():
    base = np.array([0.9, 0.8, 0.95])
    out = tpp_score(base, np.tile(base, (3, 1)))
    assert out["score"] == 0.0


def test_tpp_planted_diagonal_drop():
    base = np.array([0.9, 0.8, 0.95, 0.85])
    A = np.tile(base, (4, 1)) - 0.3 * np.eye(4)
    out = tpp_score(base, A)
    assert abs(out["score"] - 0.3) <= 1e-9
    assert out["printed_form"] == -out["score"]


@given(st.floats(-0.5, 0.5), st.integers(2, 6))
def test_tpp_uniform_drop_cancels(drop, m):
    base = np.full(m, 0.9)
    assert tpp_score(base, np.full((m, m), 0.9 - drop))["score"] == pytest.approx(0.0, abs=1e-12)


def test_tpp_oracle_isolates_topics(world):
    _, ds, oracle = world
    out = tpp_eval(oracle, ds, "topic", classes=[0, 1, 2, 3], ks=(1, 20))
    assert out["per_k"][1]["score"] > 0.3
    assert out["per_k"][1]["off_diagonal_drop"] < 0.02


def test_tpp_skips_rare_classes(world, caplog):
    _, ds, oracle = world
    with caplog.at_level(logging.WARNING):
        with pytest.raises(DegenerateTask):
            tpp_eval(oracle, ds, "topic", classes=[0, 9], ks=(5,))
    assert "skipped" in caplog.text


# absorption


def test_absorption_config_validation():
    with pytest.raises(ValueError):
        AbsorptionConfig(tau_fs=-0.1)
    with pytest.raises(ValueError):
        AbsorptionConfig(max_k=0)


def test_row_absorption_hand_cases():
    cos = np.ones(3)
    cfg = AbsorptionConfig()
    # main latents fully account for the projection: condition 2 fails
    score, ok = row_absorption(np.array([[1.0, 0.0, 0.0]]), np.array([1.0]), [0], cos, cfg)
    assert score[0] == 0.0 and not ok[0]
    # planted masses q = m = 1
    score, ok = row_absorption(np.array([[1.0, 1.0, 0.0]]), np.array([2.5]), [0], cos, cfg)
    assert score[0] == 0.5 and ok[0]
    # q = 1, m = 3
    score, _ = row_absorption(np.array([[3.0, 0.0, 1.0]]), np.array([5.0]), [0], cos, cfg)
    assert score[0] == pytest.approx(0.25)
    # no positive absorber: condition 3 fails
    score, ok = row_absorption(np.array([[1.0, -0.2, 0.0]]), np.array([2.0]), [0], cos, cfg)
    assert score[0] == 0.0 and not ok[0]


def test_row_absorption_respects_cosine_and_count_limits():
    contrib = np.array([[1.0, 0.5, 0.3, 0.2]])
    total = np.array([3.0])
    cos = np.array([1.0, 0.9, -0.5, 0.9])
    s, _ = row_absorption(contrib, total, [0], cos, AbsorptionConfig(tau_ps=0.0))
    assert s[0] == pytest.approx(0.7 / 1.7)
    s, _ = row_absorption(contrib, total, [0], cos, AbsorptionConfig(a_max=1))
    assert s[0] == pytest.approx(0.5 / 1.5)
    _, ok = row_absorption(contrib, total, [0], cos, AbsorptionConfig(tau_pa=0.5))
    assert not ok[0]


@pytest.mark.parametrize("q", [0.25, 0.5, 0.75])
def test_absorption_planted(q):
    out = absorption_eval(PlantedAbsorber(8, q), planted_dataset(), "concept", classes=[1])
    res = out["per_class"][1]
    assert res["main_latents"] == [0]
    assert abs(res["mean_absorption_flagged"] - q) <= 0.02
    assert out["score"] == pytest.approx(1 - out["mean_absorption"])


def test_absorption_without_absorber_is_zero():
    out = absorption_eval(PlantedAbsorber(8, 0.0), planted_dataset(), "concept", classes=[1])
    assert out["mean_absorption"] == 0.0 and out["score"] == 1.0


def test_absorption_oracle_hierarchy_free(world):
    _, ds, oracle = world
    out = absorption_eval(oracle, ds, "topic", classes=[0, 1, 2, 3])
    assert out["mean_absorption"] <= 0.02


def test_absorption_misclassified_rows_contribute_nothing(monkeypatch):
    import saeforge.metrics.absorption as ab

    real = ab.train_probe
    calls = []

    def first_probe_never_fires(reps, targets, config=None):
        probe = real(reps, targets, config)
        calls.append(1)
        if len(calls) == 1:
            return ProbeParams(probe.w, -1e9)
        return probe

    monkeypatch.setattr(ab, "train_probe", first_probe_never_fires)
    with pytest.raises(ValueError, match="no class"):
        absorption_eval(PlantedAbsorber(8, 0.5), planted_dataset(), "concept", classes=[1])
