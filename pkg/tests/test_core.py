"""Quality-map label algebra: truth-table, round-trip, edge and buffer oracles."""

import numpy as np
import pytest

from pqm.core import (
    CLASS_ORDER,
    QualityClass,
    class_distribution,
    derive_quality_map,
    edge_buffer,
    eib_at_k,
    extract_edges,
    quality_indicators,
    reconstruct_masks,
)

TP, FP, TN, FN = QualityClass.TP, QualityClass.FP, QualityClass.TN, QualityClass.FN


# --- independent oracles -------------------------------------------------


def truth_table_oracle(gt, pred):
    """Per-pixel python-loop classification, independent of the vectorized path."""
    h, w = gt.shape
    out = np.zeros((h, w), dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            if pred[i, j] and gt[i, j]:
                out[i, j] = TP
            elif pred[i, j] and not gt[i, j]:
                out[i, j] = FP
            elif not pred[i, j] and not gt[i, j]:
                out[i, j] = TN
            else:
                out[i, j] = FN
    return out


def erosion_edge_oracle(mask):
    """Edge = foreground pixel with at least one background 4-neighbour
    (outside the image counts as background)."""
    h, w = mask.shape
    out = np.zeros((h, w), dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            nbrs = []
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ii, jj = i + di, j + dj
                nbrs.append(mask[ii, jj] if 0 <= ii < h and 0 <= jj < w else 0)
            if min(nbrs) == 0:
                out[i, j] = 1
    return out


def chebyshev_buffer_oracle(edges, k):
    """Brute-force scan of all pixel pairs."""
    h, w = edges.shape
    pts = np.argwhere(edges == 1)
    out = np.zeros((h, w), dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            for (ei, ej) in pts:
                if max(abs(i - ei), abs(j - ej)) <= k:
                    out[i, j] = 1
                    break
    return out


def random_mask(rng, h, w):
    return rng.integers(0, 2, size=(h, w)).astype(np.uint8)


# --- derive / reconstruct ------------------------------------------------


def test_derive_all_background_is_all_tn():
    q = derive_quality_map(np.zeros((3, 5)), np.zeros((3, 5)))
    assert (q == TN).all()


def test_derive_all_foreground_is_all_tp():
    q = derive_quality_map(np.ones((4, 4)), np.ones((4, 4)))
    assert (q == TP).all()


def test_derive_matches_truth_table_fixture():
    gt = np.array([[1, 0], [1, 0]], dtype=np.uint8)
    pred = np.array([[1, 1], [0, 0]], dtype=np.uint8)
    expected = np.array([[TP, FP], [FN, TN]], dtype=np.uint8)
    np.testing.assert_array_equal(derive_quality_map(gt, pred), expected)
    np.testing.assert_array_equal(truth_table_oracle(gt, pred), expected)


def test_derive_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        derive_quality_map(np.zeros((2, 2)), np.zeros((2, 3)))


def test_derive_rejects_non_binary_values():
    with pytest.raises(ValueError, match="0 or 1"):
        derive_quality_map(np.full((2, 2), 2), np.zeros((2, 2)))


def test_reconstruct_trivial_cases():
    gt, pred = reconstruct_masks(np.full((3, 3), TN, dtype=np.uint8))
    assert not gt.any() and not pred.any()
    gt, pred = reconstruct_masks(np.full((3, 3), FN, dtype=np.uint8))
    assert gt.all() and not pred.any()


def test_reconstruct_inverts_fixture():
    q = np.array([[TP, FP], [FN, TN]], dtype=np.uint8)
    gt, pred = reconstruct_masks(q)
    np.testing.assert_array_equal(gt, [[1, 0], [1, 0]])
    np.testing.assert_array_equal(pred, [[1, 1], [0, 0]])


def test_round_trip_and_partition_random():
    rng = np.random.default_rng(7)
    for _ in range(200):
        h, w = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        gt, pred = random_mask(rng, h, w), random_mask(rng, h, w)
        q = derive_quality_map(gt, pred)
        np.testing.assert_array_equal(q, truth_table_oracle(gt, pred))
        rg, rp = reconstruct_masks(q)
        np.testing.assert_array_equal(rg, gt)
        np.testing.assert_array_equal(rp, pred)
        ind = quality_indicators(q)
        stack = np.stack([ind[c] for c in CLASS_ORDER])
        assert (stack.sum(axis=0) == 1).all()


def test_correction_and_sum_identities():
    # On hard labels: pred + FN - FP == gt, TP + FN == gt, FP + TN == 1 - gt.
    rng = np.random.default_rng(11)
    for _ in range(100):
        gt, pred = random_mask(rng, 9, 7), random_mask(rng, 9, 7)
        q = derive_quality_map(gt, pred)
        ind = quality_indicators(q)
        corrected = pred.astype(int) + ind[FN] - ind[FP]
        np.testing.assert_array_equal(corrected, gt)
        np.testing.assert_array_equal(ind[TP] + ind[FN], gt)
        np.testing.assert_array_equal(ind[FP] + ind[TN], 1 - gt)


# --- edge extraction ------------------------------------------------------


def test_edges_empty_mask():
    assert not extract_edges(np.zeros((5, 5))).any()


def test_edges_isolated_pixel_is_its_own_boundary():
    m = np.zeros((5, 5), dtype=np.uint8)
    m[2, 3] = 1
    np.testing.assert_array_equal(extract_edges(m), m)


def test_edges_solid_square_keeps_border_ring():
    m = np.ones((4, 4), dtype=np.uint8)
    e = extract_edges(m)
    assert e.sum() == 12
    assert (e[1:3, 1:3] == 0).all()
    np.testing.assert_array_equal(e, erosion_edge_oracle(m))


def test_edges_match_oracle_on_random_masks():
    rng = np.random.default_rng(3)
    for _ in range(50):
        m = random_mask(rng, 12, 10)
        np.testing.assert_array_equal(extract_edges(m), erosion_edge_oracle(m))


def test_edge_pixels_have_background_4_neighbour():
    # One-pixel-width property: every edge pixel touches background (or border).
    rng = np.random.default_rng(5)
    for _ in range(30):
        m = random_mask(rng, 15, 15)
        e = extract_edges(m)
        padded = np.pad(m, 1)
        for (i, j) in np.argwhere(e == 1):
            nbrs = [padded[i, j + 1], padded[i + 2, j + 1], padded[i + 1, j], padded[i + 1, j + 2]]
            assert min(nbrs) == 0


# --- buffers and EIB ------------------------------------------------------


def test_buffer_zero_radius_is_identity():
    rng = np.random.default_rng(9)
    e = random_mask(rng, 8, 8)
    np.testing.assert_array_equal(edge_buffer(e, 0), e)


def test_buffer_empty_edges_stay_empty():
    assert not edge_buffer(np.zeros((6, 6)), 3).any()


def test_buffer_single_pixel_gives_square_block():
    e = np.zeros((9, 9), dtype=np.uint8)
    e[4, 4] = 1
    buf = edge_buffer(e, 3)
    expected = np.zeros((9, 9), dtype=np.uint8)
    expected[1:8, 1:8] = 1
    np.testing.assert_array_equal(buf, expected)
    np.testing.assert_array_equal(buf, chebyshev_buffer_oracle(e, 3))


def test_buffer_matches_oracle_on_random_edges():
    rng = np.random.default_rng(13)
    for _ in range(20):
        e = (rng.random((10, 11)) < 0.1).astype(np.uint8)
        k = int(rng.integers(0, 5))
        np.testing.assert_array_equal(edge_buffer(e, k), chebyshev_buffer_oracle(e, k))


def test_buffer_rejects_negative_radius():
    with pytest.raises(ValueError, match=">= 0"):
        edge_buffer(np.zeros((4, 4)), -1)


def shifted_square_fixture():
    """4x4 square on an 8x8 grid, prediction shifted right by one pixel."""
    gt = np.zeros((8, 8), dtype=np.uint8)
    gt[2:6, 2:6] = 1
    pred = np.zeros((8, 8), dtype=np.uint8)
    pred[2:6, 3:7] = 1
    return gt, pred


def test_eib_shifted_square_fully_in_buffer():
    gt, pred = shifted_square_fixture()
    q = derive_quality_map(gt, pred)
    res = eib_at_k(q, extract_edges(gt), 3)
    assert res.defined
    assert res.percentage == 100.0
    # brute-force check of every error pixel
    buf = chebyshev_buffer_oracle(extract_edges(gt), 3)
    errors = (q == FP) | (q == FN)
    assert (buf[errors] == 1).all()


def test_eib_no_errors_is_zero_and_undefined():
    gt, _ = shifted_square_fixture()
    q = derive_quality_map(gt, gt)
    res = eib_at_k(q, extract_edges(gt), 3)
    assert res == (0.0, False)


def test_eib_far_blob_outside_buffer():
    gt = np.zeros((16, 16), dtype=np.uint8)
    gt[1:4, 1:4] = 1
    pred = gt.copy()
    pred[12:15, 12:15] = 1  # blob > 3 chebyshev away from all gt edges
    q = derive_quality_map(gt, pred)
    edges = extract_edges(gt)
    dists = [
        max(abs(i - ei), abs(j - ej))
        for (i, j) in np.argwhere((q == FP) | (q == FN))
        for (ei, ej) in np.argwhere(edges == 1)
    ]
    assert min(dists) > 3
    res = eib_at_k(q, edges, 3)
    assert res.defined
    assert res.percentage == 0.0


def test_eib_monotone_in_k_and_saturates():
    rng = np.random.default_rng(17)
    for _ in range(20):
        gt = random_mask(rng, 10, 10)
        if not gt.any() or gt.all():
            gt[4, 4] = 1
            gt[5, 5] = 0  # guarantee a boundary so the buffer can cover the grid
        pred = random_mask(rng, 10, 10)
        q = derive_quality_map(gt, pred)
        edges = extract_edges(gt)
        if not ((q == FP) | (q == FN)).any():
            continue
        vals = [eib_at_k(q, edges, k).percentage for k in range(0, 11)]
        assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))
        assert vals[-1] == 100.0


def test_eib_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        eib_at_k(np.zeros((4, 4)), np.zeros((4, 5)), 3)


# --- class distribution ---------------------------------------------------


def test_distribution_all_tn():
    d = class_distribution(np.full((5, 5), TN, dtype=np.uint8))
    assert d.as_tuple() == (0.0, 0.0, 100.0, 0.0)


def test_distribution_quarter_split():
    q = np.array([[TP, FP], [FN, TN]], dtype=np.uint8)
    assert class_distribution(q).as_tuple() == (25.0, 25.0, 25.0, 25.0)


def test_distribution_counting_oracle():
    rng = np.random.default_rng(23)
    labels = np.concatenate([
        np.full(60, TP), np.full(5, FP), np.full(30, TN), np.full(5, FN),
    ]).astype(np.uint8)
    rng.shuffle(labels)
    q = labels.reshape(10, 10)
    d = class_distribution(q)
    assert d.as_tuple() == (60.0, 5.0, 30.0, 5.0)
    assert abs(sum(d.as_tuple()) - 100.0) < 1e-9


def test_distribution_sums_to_100_random():
    rng = np.random.default_rng(29)
    for _ in range(50):
        q = rng.integers(0, 4, size=(13, 9)).astype(np.uint8)
        assert abs(sum(class_distribution(q).as_tuple()) - 100.0) < 1e-9
