import numpy as np
import pytest

from core.autodiff import FlatParamLayout
from core.errors import ArgumentError, NumericError, StateError
from core.mask import (BinaryMask, EarlyBirdTracker, complement, earlybird_step, eligibility, iou, mask_size,
                       project, random_mask, select_mask, topk_mask)


def _bits(s: str) -> np.ndarray:
    return np.array([c == "1" for c in s])


def test_topk_by_hand():
    assert topk_mask([0.5, 0.1, 0.9, 0.3], 2).bits.tolist() == [True, False, True, False]


def test_topk_ties_go_to_lower_indices():
    assert topk_mask([1, 1, 1, 1], 2).indices().tolist() == [0, 1]


def test_topk_matches_sort_oracle():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        d = int(rng.integers(1, 60))
        if trial % 2:
            g = rng.integers(0, 5, size=d).astype(float)
        else:
            g = rng.random(d)
        k = int(rng.integers(1, d + 1))
        oracle = sorted(range(d), key=lambda i: (-g[i], i))[:k]
        mask = topk_mask(g, k)
        assert mask.indices().tolist() == sorted(oracle)
        assert mask.k == k


def test_topk_rejects_bad_input():
    with pytest.raises(ArgumentError):
        topk_mask([1.0, 2.0], 0)
    with pytest.raises(ArgumentError):
        topk_mask([1.0, -2.0], 1)
    with pytest.raises(NumericError):
        topk_mask([1.0, np.inf], 1)


@pytest.mark.parametrize("d, rho, k", [(10, 0.7, 7), (3, 0.5, 1), (100, 0.29, 29), (7, 1.0, 7), (1000, 0.1, 100)])
def test_mask_size_is_exact_floor(d, rho, k):
    assert mask_size(d, rho) == k
    assert select_mask(np.random.default_rng(d).random(d), rho).k == k


@pytest.mark.parametrize("rho", [0.0, -0.1, 1.5, float("nan")])
def test_invalid_rho(rho):
    with pytest.raises(ArgumentError):
        mask_size(10, rho)


def test_iou_examples():
    assert iou(_bits("1100"), _bits("1100")) == 1.0
    assert iou(_bits("1100"), _bits("0011")) == 0.0
    assert iou(_bits("1100"), _bits("1010")) == pytest.approx(1 / 3)
    with pytest.raises(ArgumentError):
        iou(_bits("0000"), _bits("0000"))


def test_iou_matches_hand_count():
    rng = np.random.default_rng(1)
    for _ in range(100):
        a, b = rng.random(30) < 0.5, rng.random(30) < 0.5
        inter = sum(1 for x, y in zip(a, b) if x and y)
        union = sum(1 for x, y in zip(a, b) if x or y)
        if union:
            assert iou(a, b) == inter / union


def test_earlybird_converges_on_sixth_call():
    tracker = EarlyBirdTracker(iou_threshold=0.99, required_streak=5)
    g = np.arange(20, dtype=float)
    results = [earlybird_step(tracker, g, 5) for _ in range(6)]
    assert results[:5] == [None] * 5
    assert results[5] is not None and results[5].k == 5
    assert tracker.calls == 6 and len(tracker.history) == 5
    assert tracker.converged and not tracker.adopted
    with pytest.raises(StateError):
        tracker.step(g, 5)


def test_earlybird_first_call_is_pending():
    tracker = EarlyBirdTracker()
    assert tracker.step(np.ones(4), 2) is None
    assert tracker.history == []


def test_earlybird_alternating_never_converges():
    tracker = EarlyBirdTracker(iou_threshold=0.99, required_streak=5)
    g1 = np.array([1.0] * 5 + [0.0] * 5)
    g2 = g1[::-1].copy()
    for i in range(1000):
        assert tracker.step(g1 if i % 2 == 0 else g2, 5) is None
    assert all(score == 0.0 for _, score in tracker.history)
    adopted = tracker.adopt_last()
    assert tracker.adopted and adopted.k == 5


def test_earlybird_with_ema_and_eligibility():
    eligible = np.array([True] * 8 + [False] * 2)
    tracker = EarlyBirdTracker(required_streak=2, ema_beta=0.5, eligible=eligible)
    g = np.arange(10, dtype=float)
    mask = None
    for _ in range(3):
        mask = tracker.step(g, 4)
    assert mask is not None
    assert mask.indices().tolist() == [4, 5, 6, 7, 8, 9]


def test_random_mask_size_and_determinism():
    m = random_mask(10, 0.7, seed=3)
    assert m.k == 7
    assert m == random_mask(10, 0.7, seed=3)


def test_random_mask_selection_frequencies():
    d, rho, n = 100, 0.3, 10_000
    counts = np.zeros(d)
    for seed in range(n):
        counts += random_mask(d, rho, seed).bits
    p = mask_size(d, rho) / d
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 4.5 * sigma)


def test_project_identities(rng):
    v = rng.normal(size=12)
    m = BinaryMask(rng.random(12) < 0.5, 0.5)
    assert np.array_equal(project(v, BinaryMask.full(12)), v)
    assert np.array_equal(project(v, m) + project(v, complement(m)), v)
    assert np.array_equal(project(project(v, m), m), project(v, m))
    with pytest.raises(ArgumentError):
        project(v, BinaryMask.full(5))


def test_exclusion_list_forces_trainable():
    layout = FlatParamLayout.from_named_shapes([("embed.weight", (4, 2)), ("w", (10,))])
    eligible = eligibility(layout, ["embed"])
    assert eligible.tolist() == [False] * 8 + [True] * 10
    scores = np.concatenate([np.zeros(8), np.arange(10.0)])
    mask = select_mask(scores, 0.5, eligible, layout.layout_hash)
    assert mask.k == 8 + 5
    assert mask.bits[:8].all()
    assert mask.layout_hash == layout.layout_hash
    with pytest.raises(ArgumentError):
        eligibility(layout, ["embed", "w"])


def test_bitset_round_trip_is_lsb_first():
    bits = np.zeros(13, dtype=bool)
    bits[[0, 9, 12]] = True
    mask = BinaryMask(bits, 0.25, layout_hash=99)
    raw = mask.to_bytes()
    assert raw == bytes([0x01, 0x12])
    assert BinaryMask.from_bytes(raw, 13, 0.25, 99) == mask


def test_mask_bits_are_read_only():
    mask = BinaryMask.full(4)
    with pytest.raises(ValueError):
        mask.bits[0] = False
    assert complement(mask).k == 0


def test_earlybird_mask_carries_requested_rho():
    eligible = np.array([True] * 8 + [False] * 2)
    tracker = EarlyBirdTracker(required_streak=1, eligible=eligible, rho=0.5)
    k = mask_size(int(eligible.sum()), 0.5)
    g = np.arange(10, dtype=float)
    tracker.step(g, k)
    mask = tracker.step(g, k)
    assert mask.rho == 0.5
    assert int(np.count_nonzero(mask.bits & eligible)) == mask_size(8, mask.rho)
    plain = EarlyBirdTracker(required_streak=1, rho=1 / 3)
    plain.step(np.arange(3, dtype=float), 1)
    assert plain.step(np.arange(3, dtype=float), 1).rho == 1 / 3
    with pytest.raises(ArgumentError):
        EarlyBirdTracker(rho=0.0)
