import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from incsim.evaluation import (
    EvaluationError,
    SessionLog,
    SessionRecord,
    average_precision_at_r,
    mean_ap_at_r,
    omega_metrics,
    rank_by_cosine,
)
from incsim.network import EmbeddingBatch


# -- ranking ---------------------------------------------------------------------------


def test_duplicate_of_query_ranked_first(rng):
    gallery = rng.normal(size=(10, 4))
    q = gallery[6] * 3.0
    assert rank_by_cosine(q, gallery).order[0] == 6


def test_positive_row_scaling_keeps_order(rng):
    gallery = rng.normal(size=(12, 5))
    q = rng.normal(size=5)
    scaled = gallery * rng.uniform(0.1, 10, size=(12, 1))
    np.testing.assert_array_equal(rank_by_cosine(q, gallery).order, rank_by_cosine(q, scaled).order)


def test_order_matches_brute_force_sort(rng):
    gallery = rng.normal(size=(50, 6))
    q = rng.normal(size=6)
    cos = [float(q @ g / np.linalg.norm(q) / np.linalg.norm(g)) for g in gallery]
    want = sorted(range(50), key=lambda i: (-cos[i], i))
    assert rank_by_cosine(q, gallery).order.tolist() == want


def test_ties_go_to_lower_index_and_query_is_excluded():
    gallery = np.array([[1.0, 0.0], [2.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    out = rank_by_cosine(gallery[2], gallery, np.array([0, 0, 0, 1]), 0, query_index=2)
    assert out.order.tolist() == [0, 1, 3]
    assert out.relevant.tolist() == [True, True, False]


def test_zero_row_named_in_error():
    with pytest.raises(EvaluationError, match=r"\[1\]"):
        rank_by_cosine(np.ones(2), np.array([[1.0, 0.0], [0.0, 0.0]]))


# -- AP@R --------------------------------------------------------------------------------


def test_ap_all_relevant_first():
    assert average_precision_at_r([1, 1, 1, 0, 0], 3) == 1.0


def test_ap_hand_example():
    assert average_precision_at_r([1, 0, 1, 0], 2) == pytest.approx(0.5, abs=1e-12)


def test_ap_no_hits_in_top_r():
    assert average_precision_at_r([0, 0, 1, 1], 2) == 0.0


def test_ap_r_larger_than_gallery():
    with pytest.raises(EvaluationError):
        average_precision_at_r([1, 0], 3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=20).filter(any), st.data())
def test_ap_bounds_and_monotone(rel, data):
    r = sum(rel)
    ap = average_precision_at_r(rel, r)
    assert 0.0 <= ap <= 1.0
    hits = [i for i, v in enumerate(rel) if v]
    misses = [i for i, v in enumerate(rel) if not v and i < hits[-1]]
    if misses:
        # move the last relevant item up into an earlier irrelevant slot
        j = data.draw(st.sampled_from(misses))
        better = list(rel)
        better[j], better[hits[-1]] = True, False
        assert average_precision_at_r(better, r) >= ap - 1e-15


# -- mAP@R --------------------------------------------------------------------------------


def test_map_perfect_separation():
    x = np.array([[1.0, 0.0]] * 3 + [[0.0, 1.0]] * 4)
    assert mean_ap_at_r(x, np.array([0, 0, 0, 1, 1, 1, 1])) == 1.0


def test_map_accepts_embedding_batch():
    x = np.array([[1.0, 0.0], [1.0, 0.1], [0.0, 1.0], [0.1, 1.0]])
    labels = np.array([0, 0, 1, 1])
    assert mean_ap_at_r(EmbeddingBatch(x, labels)) == mean_ap_at_r(x, labels)


def test_map_matches_reference_on_60_items(rng):
    for _ in range(5):
        x = rng.normal(size=(60, 4))
        labels = rng.integers(0, 4, size=60)
        assert mean_ap_at_r(x, labels) == pytest.approx(oracles.map_at_r(x, labels), abs=1e-12)


def test_map_query_mask_matches_reference(rng):
    x = rng.normal(size=(30, 3))
    labels = np.repeat(np.arange(5), 6)
    mask = labels == 3
    want = oracles.map_at_r(x, labels, np.flatnonzero(mask))
    assert mean_ap_at_r(x, labels, query_mask=mask) == pytest.approx(want, abs=1e-12)


def random_ranking_ap(n_gallery, r):
    """Exact E[AP@R] when the R relevant items sit uniformly at random among n_gallery ranks.

    P(rank k relevant) = R/n and, given that, the expected hits in the top k
    are 1 + (k-1)(R-1)/(n-1).
    """
    return sum((r / n_gallery) * (1 + (k - 1) * (r - 1) / (n_gallery - 1)) / k for k in range(1, r + 1)) / r


def test_random_ranking_expectation_matches_simulation():
    gen = np.random.default_rng(5)
    sims = [oracles.ap_at_r(gen.permutation([1] * 4 + [0] * 11), 4) for _ in range(20000)]
    assert np.mean(sims) == pytest.approx(random_ranking_ap(15, 4), abs=0.005)


def test_shuffled_labels_score_at_permutation_baseline(rng):
    x = rng.normal(size=(400, 8))
    labels = np.repeat(np.arange(4), 100)
    scores = [mean_ap_at_r(x, rng.permutation(labels)) for _ in range(3)]
    assert np.mean(scores) == pytest.approx(random_ranking_ap(399, 99), abs=0.01)


def test_singleton_class_listed():
    with pytest.raises(EvaluationError, match=r"\[2\]"):
        mean_ap_at_r(np.eye(3)[[0, 0, 1]] + 0.1, np.array([0, 0, 2]))


def test_map_invariant_to_rotation_and_positive_scaling(rng):
    x = rng.normal(size=(40, 5))
    labels = rng.integers(0, 3, size=40)
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    moved = (x @ q) * rng.uniform(0.5, 4, size=(40, 1))
    assert mean_ap_at_r(moved, labels) == pytest.approx(mean_ap_at_r(x, labels), abs=1e-12)


# -- retention metrics -------------------------------------------------------------------


def make_log(bases, news=None, alls=None, ideal_base=0.9, ideal_all=0.9):
    n = len(bases)
    news = news or [0.5] * n
    alls = alls or [0.5] * n
    log = SessionLog(alpha_ideal_base=ideal_base, alpha_ideal_all=ideal_all)
    for t, (b, nw, a) in enumerate(zip(bases, news, alls), start=1):
        log.append(SessionRecord(t, b, nw, a))
    return log


def test_omega_base_hand_value():
    out = omega_metrics(make_log([0.95, 0.8, 0.6]))
    assert out.omega_base == pytest.approx((0.8 / 0.9 + 0.6 / 0.9) / 2, abs=1e-12)
    assert out.omega_base == pytest.approx(0.7777777777777778, abs=1e-12)


def test_omega_new_unnormalized():
    assert omega_metrics(make_log([0.9, 0.9, 0.9], news=[1.0, 0.9, 0.7])).omega_new == pytest.approx(0.8, abs=1e-12)


def test_omega_one_when_matching_ideal():
    assert omega_metrics(make_log([0.9] * 4)).omega_base == pytest.approx(1.0)


def test_doubling_ideals_halves_normalized_metrics():
    a = omega_metrics(make_log([0.9, 0.5, 0.4], alls=[0.9, 0.6, 0.3]))
    b = omega_metrics(make_log([0.9, 0.5, 0.4], alls=[0.9, 0.6, 0.3], ideal_base=1.8, ideal_all=1.8 / 2 * 2))
    assert b.omega_base == pytest.approx(a.omega_base / 2)
    assert b.omega_all == pytest.approx(a.omega_all / 2)
    assert b.omega_new == a.omega_new


@pytest.mark.parametrize("log", [make_log([0.9]), make_log([0.9, 0.8], ideal_base=0.0)])
def test_omega_preconditions(log):
    with pytest.raises(EvaluationError):
        omega_metrics(log)


def test_session_log_requires_contiguous_indices():
    log = SessionLog()
    log.append(SessionRecord(1, 0.5, 0.5, 0.5))
    with pytest.raises(EvaluationError):
        log.append(SessionRecord(3, 0.5, 0.5, 0.5))


def test_alpha_outside_unit_interval_rejected():
    with pytest.raises(EvaluationError):
        SessionRecord(1, 1.2, 0.5, 0.5)
