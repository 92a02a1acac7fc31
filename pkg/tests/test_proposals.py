import math
from itertools import permutations

import numpy as np
import pytest

from gradcheck import check_tensor_grad
from ovseg.data import GenConfig, generate_scene
from ovseg.proposals import (
    ProposalSet,
    QueryTrainConfig,
    RegionPartition,
    bce_loss,
    dice_loss,
    export_proposals,
    extract_gt_segments,
    felz_partition,
    hierarchical_proposals,
    hungarian_match,
    init_query_model,
    load_query_model,
    match_cost,
    pixel_features,
    propose,
    query_model_forward,
    query_model_loss_and_grads,
    save_query_model,
    train_query_model,
)
from ovseg.rng import SplitMix64
from ovseg.vlm import l2_normalize


def brute_force_assignment(cost):
    n, m = cost.shape
    if n <= m:
        cands = [sorted((i, p[i]) for i in range(n)) for p in permutations(range(m), n)]
    else:
        cands = [sorted((p[j], j) for j in range(m)) for p in permutations(range(n), m)]
    totals = [sum(cost[r, c] for r, c in q) for q in cands]
    best = min(totals)
    lexmin = min(q for q, t in zip(cands, totals) if abs(t - best) < 1e-9)
    return best, lexmin


# ---------------------------------------------------------------- partitions


def test_constant_image_is_one_region():
    img = np.full((10, 12, 3), 0.3)
    part = felz_partition(img, k=0.5)
    assert part.n_regions == 1
    assert np.all(part.region_ids == 0)
    assert part.adjacency == set()


def test_two_tone_image_splits_in_two():
    img = np.zeros((8, 8, 3))
    img[:, 4:] = 1.0
    part = felz_partition(img, k=0.1, min_size=1)
    assert part.n_regions == 2
    assert np.all(part.region_ids[:, :4] == 0)
    assert np.all(part.region_ids[:, 4:] == 1)
    assert part.adjacency == {(0, 1)}


def test_partitions_are_valid_and_deterministic():
    for seed in range(50):
        img = SplitMix64(seed).uniform_array((9, 11, 3), 0.0, 1.0)
        part = felz_partition(img, k=0.8, min_size=4)
        ids = part.region_ids
        assert ids.shape == (9, 11)
        assert ids.min() == 0 and ids.max() == part.n_regions - 1
        assert set(np.unique(ids)) == set(range(part.n_regions))
        again = felz_partition(img, k=0.8, min_size=4)
        assert np.array_equal(ids, again.region_ids)


def test_min_size_absorbs_specks():
    img = np.zeros((6, 6, 3))
    img[3, 3] = 1.0  # single bright outlier pixel
    merged = felz_partition(img, k=0.01, min_size=2)
    assert merged.n_regions == 1
    kept = felz_partition(img, k=0.01, min_size=1)
    assert kept.n_regions == 2


def test_felz_input_validation():
    with pytest.raises(ValueError):
        felz_partition(np.zeros((4, 4, 3)), k=0.0)
    with pytest.raises(ValueError):
        felz_partition(np.zeros((4, 4)), k=1.0)


# ------------------------------------------------------------------- merging


def _three_region_fixture():
    # left half color (0,0,0); right-top (1,0,0); right-bottom (1,1,0)
    img = np.zeros((4, 4, 3))
    img[:2, 2:, 0] = 1.0
    img[2:, 2:, 0] = 1.0
    img[2:, 2:, 1] = 1.0
    ids = np.zeros((4, 4), dtype=np.int64)
    ids[:2, 2:] = 1
    ids[2:, 2:] = 2
    part = RegionPartition(ids, 3, {(0, 1), (0, 2), (1, 2)})
    return img, part


def test_merge_order_matches_hand_computed_similarities():
    img, part = _three_region_fixture()
    # Hand similarities (color intersection + size + fill, all weights 1):
    #  (0,1): 2/3 + (1-12/16) + (1-4/16)   = 5/3 + 0
    #  (0,2): 1/3 + 0.25 + 0.75            = 4/3
    #  (1,2): 2/3 + 0.5  + 1.0             = 13/6  <- merges first
    pset = hierarchical_proposals(part, img)
    assert len(pset.masks) == 5
    right_half = np.zeros((4, 4))
    right_half[:, 2:] = 1.0
    assert np.array_equal(pset.masks[3], right_half)
    assert np.array_equal(pset.masks[4], np.ones((4, 4)))


def test_single_region_yields_single_proposal():
    img = np.full((5, 5, 3), 0.5)
    part = felz_partition(img, k=1.0)
    pset = hierarchical_proposals(part, img)
    assert len(pset.masks) == 1
    assert np.array_equal(pset.masks[0], np.ones((5, 5)))


def test_proposal_count_is_2r_minus_1():
    for seed in (1, 2, 3):
        img = SplitMix64(seed).uniform_array((8, 8, 3), 0.0, 1.0)
        part = felz_partition(img, k=0.4, min_size=2)
        pset = hierarchical_proposals(part, img)
        assert len(pset.masks) == 2 * part.n_regions - 1
        for m in pset.masks:
            assert m.shape == (8, 8)
            assert set(np.unique(m)) <= {0.0, 1.0}


def test_tie_break_prefers_smallest_pair():
    # four identical quadrants: all pair similarities equal, so (0,1) first
    img = np.full((4, 4, 3), 0.7)
    ids = np.zeros((4, 4), dtype=np.int64)
    ids[:2, 2:] = 1
    ids[2:, :2] = 2
    ids[2:, 2:] = 3
    part = RegionPartition(ids, 4, {(0, 1), (0, 2), (1, 3), (2, 3)})
    pset = hierarchical_proposals(part, img)
    top_half = np.zeros((4, 4))
    top_half[:2, :] = 1.0
    assert np.array_equal(pset.masks[4], top_half)


# ----------------------------------------------------------------- hungarian


def test_hungarian_hand_cases():
    assert hungarian_match(np.array([[5.0]])) == [(0, 0)]
    assert hungarian_match(np.array([[1.0, 2.0], [2.0, 1.0]])) == [(0, 0), (1, 1)]
    assert hungarian_match(np.empty((0, 3))) == []
    assert hungarian_match(np.empty((3, 0))) == []
    # all-equal costs: lexicographically smallest assignment
    assert hungarian_match(np.ones((3, 3))) == [(0, 0), (1, 1), (2, 2)]
    assert hungarian_match(np.ones((2, 4))) == [(0, 0), (1, 1)]
    assert hungarian_match(np.ones((4, 2))) == [(0, 0), (1, 1)]


def test_hungarian_rejects_bad_input():
    with pytest.raises(ValueError):
        hungarian_match(np.array([[np.inf, 1.0], [1.0, 2.0]]))
    with pytest.raises(ValueError):
        hungarian_match(np.zeros(3))


def test_hungarian_matches_brute_force_floats():
    rng = SplitMix64(11)
    for _ in range(60):
        n = 1 + rng.randint(6)
        m = 1 + rng.randint(6)
        cost = rng.uniform_array((n, m), -3.0, 3.0)
        best, lexmin = brute_force_assignment(cost)
        pairs = hungarian_match(cost)
        assert abs(sum(cost[r, c] for r, c in pairs) - best) < 1e-9
        assert pairs == lexmin


def test_hungarian_matches_brute_force_with_ties():
    rng = SplitMix64(12)
    for _ in range(60):
        n = 1 + rng.randint(5)
        m = 1 + rng.randint(5)
        cost = np.array([[float(rng.randint(3)) for _ in range(m)] for _ in range(n)])
        best, lexmin = brute_force_assignment(cost)
        pairs = hungarian_match(cost)
        assert abs(sum(cost[r, c] for r, c in pairs) - best) < 1e-9
        assert pairs == lexmin


# -------------------------------------------------------------- match costs


def test_dice_hand_values():
    assert dice_loss(np.array([1.0, 1, 0, 0]), np.array([1.0, 0, 0, 0])) == pytest.approx(1 / 3)
    assert dice_loss(np.array([1.0, 0]), np.array([0.0, 1])) == 1.0
    assert dice_loss(np.array([1.0, 1]), np.array([1.0, 1])) == 0.0
    assert dice_loss(np.zeros(4), np.zeros(4)) == 0.0
    assert 0.0 <= dice_loss(np.array([0.3, 0.6]), np.array([1.0, 0.0])) <= 1.0


def test_bce_clamps_hard_values():
    g = np.array([1.0, 0.0])
    perfect = bce_loss(np.array([1.0, 0.0]), g)
    assert 0 < perfect < 1e-6
    assert bce_loss(np.array([0.0, 1.0]), g) > 10


def test_match_cost_perfect_match_limit():
    masks = np.array([[1.0, 1, 0, 0]])
    gt = np.array([[1.0, 1, 0, 0]])
    probs = np.array([[1.0, 0.0]])  # class slot 0 + no-object slot
    cost = match_cost(masks, probs, gt, np.array([0]))
    assert cost.shape == (1, 1)
    assert cost[0, 0] == pytest.approx(-1.0, abs=1e-6)


def test_match_cost_agrees_with_scalar_helpers():
    rng = SplitMix64(13)
    masks = rng.uniform_array((4, 12), 0.0, 1.0)
    gt = (rng.uniform_array((3, 12), 0.0, 1.0) > 0.5).astype(float)
    probs = rng.uniform_array((4, 4), 0.0, 1.0)
    slots = np.array([2, 0, 1])
    cost = match_cost(masks, probs, gt, slots)
    for k in range(4):
        for j in range(3):
            want = -probs[k, slots[j]] + bce_loss(masks[k], gt[j]) + dice_loss(masks[k], gt[j])
            assert cost[k, j] == pytest.approx(want, rel=1e-12)


def test_match_cost_empty_gt():
    assert match_cost(np.ones((3, 4)), np.ones((3, 2)), np.empty((0, 4)), np.empty(0, int)).shape == (3, 0)


# ------------------------------------------------------------- pixel features


def test_pixel_features_shape_and_values():
    img = np.zeros((3, 4, 3))
    img[0, 0] = [1.0, 0.5, 0.25]
    feats = pixel_features(img)
    assert feats.shape == (12, 8)
    f00 = feats[0]
    assert np.allclose(f00[:3], [1.0, 0.5, 0.25])
    assert f00[3] == 0.0 and f00[4] == 0.0
    # corner 3x3 mean covers 4 in-bounds pixels, only (0,0) is non-zero
    assert np.allclose(f00[5:], [0.25, 0.125, 0.0625])
    f_last = feats[-1]
    assert f_last[3] == 3 / 4 and f_last[4] == 2 / 3


# ------------------------------------------------------------- query model


def _unit_rows(rng, n, d=32):
    return l2_normalize(rng.uniform_array((n, d), -1.0, 1.0))


def test_forward_zero_model_gives_half_masks():
    rng = SplitMix64(14)
    embs = _unit_rows(rng, 3)
    model = init_query_model(embs, [0, 1, 2], seed=0, n_queries=4)
    model.queries[...] = 0.0
    model.mask_bias[...] = 0.0
    feats = pixel_features(rng.uniform_array((5, 5, 3), 0.0, 1.0))
    masks, probs = query_model_forward(model, feats)
    assert np.all(masks == 0.5)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_forward_masks_depend_only_on_features():
    rng = SplitMix64(15)
    embs = _unit_rows(rng, 2)
    model = init_query_model(embs, [0, 1], seed=1, n_queries=3)
    img = np.full((4, 4, 3), 0.25)  # constant image: but x/y features differ
    feats = pixel_features(img)
    feats[5] = feats[0]  # force two pixels to share features exactly
    masks, _ = query_model_forward(model, feats)
    assert np.all(masks[:, 5] == masks[:, 0])


def test_loss_with_no_gt_is_pure_no_object_term():
    rng = SplitMix64(16)
    embs = _unit_rows(rng, 2)
    model = init_query_model(embs, [3, 4], seed=2, n_queries=5)
    img = rng.uniform_array((6, 6, 3), 0.0, 1.0)
    labels = np.full((6, 6), 255, dtype=np.uint8)  # all ignore: no segments
    feats = pixel_features(img)
    loss, _ = query_model_loss_and_grads(model, [(feats, labels.ravel())])
    _, probs = query_model_forward(model, feats)
    want = 0.1 * float(-np.log(probs[:, -1]).sum())
    assert loss == pytest.approx(want, rel=1e-12)


def test_extract_gt_segments_skips_absent_and_ignore():
    labels = np.array([[0, 1], [255, 1]], dtype=np.uint8).ravel()
    gt, slots = extract_gt_segments(labels, [1, 7, 0])
    assert slots.tolist() == [0, 2]
    assert gt[0].tolist() == [0, 1, 0, 1]
    assert gt[1].tolist() == [1, 0, 0, 0]


def test_query_model_gradients_match_fd():
    rng = SplitMix64(17)
    embs = _unit_rows(rng, 3)
    model = init_query_model(embs, [0, 1, 2], seed=3, n_queries=4)
    for _, arr in model.param_items():
        arr[...] = rng.uniform_array(arr.shape, -0.5, 0.5)
    for trial in range(5):
        scene = generate_scene(GenConfig(image_size=8, radius_range=(2, 3)), SplitMix64(trial), "s")
        labels = scene.gt.labels.copy().ravel()
        labels[labels > 2] = 2  # squash into the 3 covered classes
        feats = pixel_features(scene.image.as_float())
        batch = [(feats, labels)]
        _, grads = query_model_loss_and_grads(model, batch)

        def loss():
            return query_model_loss_and_grads(model, batch)[0]

        for name, arr in model.param_items():
            check_tensor_grad(loss, arr, grads[name], rng, n_random=3)


def test_query_training_overfits_one_image():
    rng = SplitMix64(18)
    embs = _unit_rows(rng, 4)
    scene = generate_scene(GenConfig(image_size=16, radius_range=(3, 5)), SplitMix64(4), "s")
    labels = scene.gt.labels.copy().ravel()
    labels[labels > 3] = 3
    items = [(pixel_features(scene.image.as_float()), labels)]
    cfg = QueryTrainConfig(n_queries=6, steps=200, batch_size=1, lr=0.05, seed=5)
    model, log = train_query_model(items, embs, [0, 1, 2, 3], cfg)
    assert log["last_batch_loss"] < 0.1 * log["first_batch_loss"]


def test_query_training_zero_steps_is_initialization():
    rng = SplitMix64(19)
    embs = _unit_rows(rng, 2)
    items = [(np.zeros((4, 8)), np.zeros(4, dtype=np.uint8))]
    cfg = QueryTrainConfig(n_queries=3, steps=0, seed=6)
    model, _ = train_query_model(items, embs, [0, 1], cfg)
    fresh = init_query_model(embs, [0, 1], seed=6, n_queries=3)
    for (_, a), (_, b) in zip(model.param_items(), fresh.param_items()):
        assert np.array_equal(a, b)


def test_propose_and_export(tmp_path):
    rng = SplitMix64(20)
    embs = _unit_rows(rng, 3)
    model = init_query_model(embs, [0, 1, 2], seed=7, n_queries=4)
    img = rng.uniform_array((6, 5, 3), 0.0, 1.0)
    pset = propose(model, img, "val_00001")
    assert len(pset.masks) == 4
    assert pset.masks[0].shape == (6, 5)
    assert pset.class_scores.shape == (4, 4)
    export_proposals(pset, tmp_path)
    assert (tmp_path / "val_00001_p000.pgm").exists()
    assert (tmp_path / "val_00001_proposals.json").exists()


def test_query_checkpoint_roundtrip(tmp_path):
    rng = SplitMix64(21)
    embs = _unit_rows(rng, 3)
    model = init_query_model(embs, [2, 5, 7], seed=8, n_queries=4)
    save_query_model(model, tmp_path / "qm.json")
    back = load_query_model(tmp_path / "qm.json")
    assert back.class_indices == [2, 5, 7]
    assert back.embed_checksum == model.embed_checksum
    assert np.array_equal(back.class_embs, model.class_embs)
    for (_, a), (_, b) in zip(model.param_items(), back.param_items()):
        assert np.array_equal(a, b)
