import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calibkit.association import (
    GATE_ALPHA,
    GATE_SIGMA_E,
    GATE_SIGMA_V,
    Hypothesis,
    HypothesisSet,
    NoiseModel,
    Observation,
    Prediction,
    build_candidate_lists,
    chi2_quantile,
    diagnostics,
    enumerate_assignments,
    individual_compatibility,
    jcbb,
    joint_compatibility,
    pairwise_d2,
)
from calibkit.estimators import predict_keypoints
from calibkit.simulator import DEFAULT_TRUE_STATE, stock_scene

from oracles import association_scene, chi2_quantile_oracle, cramer_d2, solve_scene_exhaustively

LOG_2PI = math.log(2 * math.pi)


def make_problem(seed, **kw):
    H, px, obs, Se, Sv = association_scene(seed, **kw)
    preds = [Prediction(f"k{j}", px[j], np.zeros(3), H[j]) for j in range(len(px))]
    observations = [Observation(i, o) for i, o in enumerate(obs)]
    return preds, observations, NoiseModel(Se, Sv), (H, px, obs, Se, Sv)


def pred(label, pixel, H=None):
    return Prediction(label, np.asarray(pixel, dtype=float), np.zeros(3), np.zeros((2, 6)) if H is None else H)


def test_appendix_gate_defaults():
    np.testing.assert_allclose(np.diag(GATE_SIGMA_E), [0.05, 0.05, 0.05, 0.0025, 0.0025, 0.0025])
    np.testing.assert_array_equal(GATE_SIGMA_V, np.diag([50.0, 50.0]))
    assert GATE_ALPHA == 0.975


@pytest.mark.parametrize("alpha", [0.5, 0.9, 0.975, 0.999])
def test_chi2_closed_form_two_dof(alpha):
    q = chi2_quantile(2, alpha)
    assert 1 - math.exp(-q / 2) == pytest.approx(alpha, abs=1e-12)


def test_chi2_value_at_appendix_confidence():
    assert chi2_quantile(2, 0.975) == pytest.approx(7.3778, abs=5e-5)


def test_chi2_four_dof_against_series():
    assert abs(chi2_quantile(4, 0.975) - chi2_quantile_oracle(4, 0.975)) < 1e-8


@pytest.mark.parametrize("d, alpha", [(0, 0.9), (2, 0.0), (2, 1.0), (1.5, 0.9)])
def test_chi2_domain(d, alpha):
    with pytest.raises(ValueError):
        chi2_quantile(d, alpha)


def test_zero_innovation_is_compatible():
    c = individual_compatibility(Observation(0, [10.0, 20.0]), pred("rf", [10.0, 20.0]), NoiseModel(), alpha=1e-6)
    assert c.d2 == 0.0 and c.compatible


def test_innovation_against_measurement_noise_only():
    c = individual_compatibility(Observation(0, [1.0, 0.0]), pred("rf", [0.0, 0.0]), NoiseModel())
    assert c.d2 == pytest.approx(0.02, abs=1e-15)


def test_individual_d2_matches_cramer(rng):
    for _ in range(200):
        H = rng.normal(size=(2, 6)) * 100
        A = rng.normal(size=(6, 6))
        Se = A @ A.T * 1e-3 + np.eye(6) * 1e-6
        B = rng.normal(size=(2, 2))
        Sv = B @ B.T + np.eye(2)
        h = rng.normal(size=2) * 10
        c = individual_compatibility(Observation(0, h), pred("rf", [0, 0], H), NoiseModel(Se, Sv))
        assert c.d2 == pytest.approx(cramer_d2(h, H, Se, Sv), rel=1e-9)


def test_noise_model_validation():
    with pytest.raises(ValueError):
        NoiseModel(np.eye(6), -np.eye(2))
    with pytest.raises(ValueError):
        NoiseModel(np.triu(np.ones((6, 6))), np.eye(2))


def test_per_label_measurement_override():
    noise = NoiseModel(sigma_v_overrides={"rf": np.diag([1.0, 1.0])})
    c = individual_compatibility(Observation(0, [1.0, 0.0]), pred("rf", [0.0, 0.0]), noise)
    assert c.d2 == pytest.approx(1.0)


def test_candidates_without_predictions():
    obs = [Observation(i, [i, i]) for i in range(3)]
    assert build_candidate_lists([], obs, NoiseModel()) == [[], [], []]


def test_single_coincident_candidate():
    preds = [pred("rf", [100, 100]), pred("rb", [900, 900])]
    obs = [Observation(0, [100, 100]), Observation(1, [500, 100])]
    lists = build_candidate_lists(preds, obs, NoiseModel())
    assert lists == [[(0, 0.0)], []]


def test_candidate_membership_matches_brute_force():
    for seed in range(40):
        preds, obs, noise, (H, px, o, Se, Sv) = make_problem(seed)
        gate = chi2_quantile_oracle(2, GATE_ALPHA)
        lists = build_candidate_lists(preds, obs, noise)
        for i in range(len(obs)):
            expected = {j for j in range(len(preds)) if cramer_d2(o[i] - px[j], H[j], Se, Sv) < gate}
            assert {j for j, _ in lists[i]} == expected
            d2s = [d for _, d in lists[i]]
            assert d2s == sorted(d2s)


def test_pairwise_matrix_matches_individual():
    preds, obs, noise, _ = make_problem(3)
    D = pairwise_d2(preds, obs, noise)
    for i, o in enumerate(obs):
        for j, p in enumerate(preds):
            assert D[i, j] == pytest.approx(individual_compatibility(o, p, noise).d2, rel=1e-12)


def test_joint_empty_set():
    r = joint_compatibility(HypothesisSet(), [], [], NoiseModel())
    assert r.l == math.inf and not r.istrue


def test_joint_all_trivial_set():
    obs = [Observation(0, [0, 0]), Observation(1, [5, 5])]
    r = joint_compatibility([Hypothesis(0), Hypothesis(1)], [], obs, NoiseModel())
    assert r.istrue and r.l == 0.0 and r.k == 0


def test_joint_single_pair_reduces_to_individual(rng):
    H = rng.normal(size=(2, 6)) * 50
    noise = NoiseModel()
    p = pred("rf", [10.0, 12.0], H)
    o = Observation(0, [14.0, 9.0])
    r = joint_compatibility([Hypothesis(0, "rf")], [p], [o], noise)
    ind = individual_compatibility(o, p, noise)
    C = H @ noise.sigma_e @ H.T + noise.sigma_v
    assert r.d2 == pytest.approx(ind.d2, rel=1e-12)
    assert r.l == pytest.approx(ind.d2 + 2 * LOG_2PI + math.log(np.linalg.det(C)), rel=1e-12)


def test_joint_block_diagonal_sums_individual_distances():
    Se = np.diag([1e-3, 2e-3, 3e-3, 1e-4, 2e-4, 3e-4])
    noise = NoiseModel(Se, np.diag([4.0, 9.0]))
    H1 = np.zeros((2, 6))
    H1[:, :2] = [[300.0, 10.0], [20.0, 200.0]]
    H2 = np.zeros((2, 6))
    H2[:, 3:5] = [[900.0, 0.0], [50.0, 800.0]]
    p1, p2 = pred("rf", [0, 0], H1), pred("rb", [50, 50], H2)
    o1, o2 = Observation(0, [3.0, -2.0]), Observation(1, [47.0, 55.0])
    r = joint_compatibility([Hypothesis(0, "rf"), Hypothesis(1, "rb")], [p1, p2], [o1, o2], noise)
    expected = individual_compatibility(o1, p1, noise).d2 + individual_compatibility(o2, p2, noise).d2
    assert r.d2 == pytest.approx(expected, rel=1e-12)


def test_joint_singular_covariance_is_incompatible():
    zero = np.zeros((2, 2))
    noise = NoiseModel(sigma_v_overrides={"rf": zero, "rb": zero})
    H = np.zeros((2, 6))
    H[:, 3] = 1000.0  # both rows depend on one state entry: rank one
    r = joint_compatibility(
        [Hypothesis(0, "rf"), Hypothesis(1, "rb")],
        [pred("rf", [0, 0], H), pred("rb", [1, 1], H)],
        [Observation(0, [0, 0]), Observation(1, [1, 1])],
        noise,
    )
    assert not r.istrue and r.l == math.inf


def test_jcbb_without_observations():
    r = jcbb([pred("rf", [0, 0])], [], NoiseModel())
    assert r.n_pair == 0 and r.assignments == ()


def test_jcbb_without_predictions():
    r = jcbb([], [Observation(0, [1, 1])], NoiseModel())
    assert r.n_pair == 0 and r.label_of(0) is None


def test_jcbb_noiseless_frame_with_far_outliers():
    sc = stock_scene("sweep", seed=4)
    q = sc.trajectory(37.0)
    preds = predict_keypoints(np.asarray(DEFAULT_TRUE_STATE), sc.model, q, sc.T_init, sc.intrinsics, visibility=False)
    rng = np.random.default_rng(0)
    pixels = [(p.label, p.pixel) for p in preds] + [(None, np.array([-4000.0, 3000.0])), (None, np.array([5000.0, -2500.0]))]
    order = rng.permutation(len(pixels))
    obs = [Observation(i, pixels[j][1]) for i, j in enumerate(order)]
    r = jcbb(preds, obs, NoiseModel())
    for i, j in enumerate(order):
        assert r.label_of(i) == pixels[j][0]
    assert r.n_pair == len(preds)


def test_jcbb_matches_exhaustive_oracle():
    for seed in range(60):
        preds, obs, noise, raw = make_problem(seed)
        r = jcbb(preds, obs, noise)
        n_best, l_best, combo = solve_scene_exhaustively(*raw, GATE_ALPHA)
        assert r.n_pair == n_best
        if n_best:
            assert abs(r.l - l_best) < 1e-9
        # the package's own enumerator agrees as well
        assert enumerate_assignments(preds, obs, noise)[0] == n_best


def test_jcbb_result_is_gated_injective_and_jointly_compatible():
    for seed in range(60, 120):
        preds, obs, noise, _ = make_problem(seed)
        r = jcbb(preds, obs, noise)
        labels = [lb for _, lb in r.pairs]
        assert len(labels) == len(set(labels))
        assert [h.obs_index for h in r.assignments] == [o.index for o in obs]
        by_label = {p.label: p for p in preds}
        for i, lb in r.pairs:
            assert individual_compatibility(obs[i], by_label[lb], noise).compatible
        jr = joint_compatibility(r, preds, obs, noise)
        assert jr.istrue
        if r.n_pair:
            assert jr.l == pytest.approx(r.l, rel=1e-9, abs=1e-9)


def test_pruning_never_changes_the_optimum():
    for seed in range(120, 180):
        preds, obs, noise, _ = make_problem(seed)
        a = jcbb(preds, obs, noise)
        b = jcbb(preds, obs, noise, prune=False)
        assert a.n_pair == b.n_pair
        assert a.l == pytest.approx(b.l, abs=1e-9)
        assert a.nodes <= b.nodes


def test_permutation_equivariance():
    checked = 0
    for seed in range(180, 260):
        preds, obs, noise, raw = make_problem(seed)
        r = jcbb(preds, obs, noise)
        perm = np.random.default_rng(seed).permutation(len(obs))
        obs2 = [Observation(i, obs[j].pixel) for i, j in enumerate(perm)]
        r2 = jcbb(preds, obs2, noise)
        assert r2.n_pair == r.n_pair
        assert r2.l == pytest.approx(r.l, abs=1e-9)
        if r.n_pair and _unique_optimum(preds, obs, noise, r):
            for i, j in enumerate(perm):
                assert r2.label_of(i) == r.label_of(j)
            checked += 1
    assert checked > 10


def _unique_optimum(preds, obs, noise, result):
    # a second assignment with the same pair count and l makes the labels ambiguous
    lists = build_candidate_lists(preds, obs, noise)
    count = 0
    m = len(obs)

    def rec(i, used, acc):
        nonlocal count
        if i == m:
            hs = tuple(acc)
            k = sum(h.pred_label is not None for h in hs)
            if k == result.n_pair:
                jr = joint_compatibility(hs, preds, obs, noise)
                if jr.istrue and abs(jr.l - result.l) < 1e-6:
                    count += 1
            return
        for j, _ in lists[i]:
            if j not in used:
                rec(i + 1, used | {j}, acc + [Hypothesis(obs[i].index, preds[j].label)])
        rec(i + 1, used, acc + [Hypothesis(obs[i].index)])

    rec(0, frozenset(), [])
    return count == 1


def test_node_budget_returns_incumbent():
    preds, obs, noise, _ = make_problem(7, max_obs=6, max_pred=8)
    full = jcbb(preds, obs, noise)
    tiny = jcbb(preds, obs, noise, node_budget=1)
    if full.nodes > 1:
        assert tiny.exhausted
    assert tiny.n_pair <= full.n_pair
    labels = [lb for _, lb in tiny.pairs]
    assert len(labels) == len(set(labels))


def test_label_of_unknown_observation():
    with pytest.raises(KeyError):
        HypothesisSet((Hypothesis(0),)).label_of(3)


def test_diagnostics_are_json_ready():
    preds, obs, noise, _ = make_problem(11)
    cands = build_candidate_lists(preds, obs, noise)
    doc = diagnostics(preds, obs, cands, jcbb(preds, obs, noise, candidates=cands))
    back = json.loads(json.dumps(doc))
    assert len(back["chosen"]) == len(obs)
    assert set(back["predictions"]) == {p.label for p in preds}


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_jcbb_never_uses_a_prediction_twice(seed):
    preds, obs, noise, _ = make_problem(seed)
    r = jcbb(preds, obs, noise)
    labels = [lb for _, lb in r.pairs]
    assert len(labels) == len(set(labels)) == r.n_pair
