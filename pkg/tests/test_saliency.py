import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from structprune.arch import make_wrn
from structprune.layers import ChannelMask, apply_mask, build_network
from structprune.saliency import (
    EmptyAccumulatorError,
    FisherAccumulator,
    IntegrityError,
    SaliencyRecord,
    fisher_finalize,
    fisher_update,
    l1_records,
    l1_saliency,
    rank_channels,
)
from _oracles import brute_force_rank, naive_fisher

finite = st.floats(-10, 10, allow_nan=False, width=32)


def full_masks(sizes):
    return [ChannelMask(b, np.ones(n, dtype=bool)) for b, n in enumerate(sizes)]


# -- l1 --------------------------------------------------------------------


def test_l1_example():
    w = np.zeros((2, 1, 1, 3), dtype=np.float32)
    w[0, 0, 0] = [1, -2, 0.5]
    np.testing.assert_allclose(l1_saliency(w), [3.5, 0.0])


def test_l1_needs_4d():
    with pytest.raises(ValueError):
        l1_saliency(np.ones((3, 3)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 4), st.just(3), st.just(3)), elements=finite))
def test_l1_sign_invariant(w):
    np.testing.assert_array_equal(l1_saliency(w), l1_saliency(-w))
    assert np.all(l1_saliency(w) >= 0)


def test_l1_records_skip_masked_channels():
    net = build_network(make_wrn(10, 1), seed=0)
    apply_mask(net.blocks[0], 4)
    recs = l1_records(net)
    assert (0, 4) not in {(r.block, r.channel) for r in recs}
    assert len(recs) == sum(b.mask.active for b in net.blocks)


# -- ranking ---------------------------------------------------------------


def test_rank_single_block():
    recs = [SaliencyRecord(0, c, d) for c, d in enumerate([3.0, 1.0, 2.0])]
    assert [r.channel for r in rank_channels(recs, full_masks([3]))] == [1, 2, 0]


def test_rank_tie_goes_to_lower_block():
    recs = [SaliencyRecord(1, 0, 1.0), SaliencyRecord(0, 0, 1.0), SaliencyRecord(0, 1, 5.0), SaliencyRecord(1, 1, 5.0)]
    assert rank_channels(recs, full_masks([2, 2]))[0] == SaliencyRecord(0, 0, 1.0)


def test_rank_excludes_floor_blocks():
    masks = full_masks([3, 1])
    recs = [SaliencyRecord(0, c, 1.0) for c in range(3)] + [SaliencyRecord(1, 0, 0.0)]
    assert all(r.block == 0 for r in rank_channels(recs, masks))


def test_rank_missing_record():
    with pytest.raises(IntegrityError):
        rank_channels([SaliencyRecord(0, 0, 1.0)], full_masks([2]))


def test_rank_duplicate_record():
    with pytest.raises(IntegrityError):
        rank_channels([SaliencyRecord(0, 0, 1.0), SaliencyRecord(0, 0, 2.0)], full_masks([1]))


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_rank_matches_brute_force(data):
    sizes = data.draw(st.lists(st.integers(1, 6), min_size=1, max_size=5))
    masks = []
    for b, n in enumerate(sizes):
        keep = np.array(data.draw(st.lists(st.booleans(), min_size=n, max_size=n)))
        if not keep.any():
            keep[0] = True
        masks.append(ChannelMask(b, keep))
    # a few distinct values so ties are common
    recs = [SaliencyRecord(m.block, int(c), float(data.draw(st.sampled_from([0.0, 0.5, 1.0, 2.0]))))
            for m in masks for c in m.active_indices()]
    shuffled = data.draw(st.permutations(recs))
    assert rank_channels(shuffled, masks) == brute_force_rank(recs, masks)


# -- Fisher ----------------------------------------------------------------


def test_fisher_zero_gradient():
    acc = FisherAccumulator()
    fisher_update(acc, 0, np.ones((2, 3, 4, 4)), np.zeros((2, 3, 4, 4)))
    assert all(r.delta_c == 0 for r in fisher_finalize(acc))


def test_fisher_single_example():
    a = np.zeros((1, 1, 2, 2))
    g = np.zeros((1, 1, 2, 2))
    a[0, 0, 0, 0], g[0, 0, 0, 0] = 3.0, -1.0  # spatial sum -3
    acc = fisher_update(FisherAccumulator(), 0, a, g)
    assert fisher_finalize(acc)[0].delta_c == pytest.approx(4.5)


def test_fisher_four_unit_examples():
    a = np.ones((4, 1, 1, 1))
    acc = fisher_update(FisherAccumulator(), 0, a, a)
    assert fisher_finalize(acc)[0].delta_c == pytest.approx(0.5)


def test_fisher_split_equals_joint():
    a = np.ones((4, 1, 1, 1))
    split = FisherAccumulator()
    fisher_update(split, 0, a[:2], a[:2])
    fisher_update(split, 0, a[2:], a[2:])
    joint = fisher_update(FisherAccumulator(), 0, a, a)
    assert fisher_finalize(split) == fisher_finalize(joint)


def test_fisher_finalize_leaves_state_and_reset_clears():
    acc = fisher_update(FisherAccumulator(), 0, np.ones((2, 2, 1, 1)), np.ones((2, 2, 1, 1)))
    first = fisher_finalize(acc)
    assert fisher_finalize(acc) == first
    acc.reset()
    assert acc.count == 0 and acc.examples(0) == 0
    with pytest.raises(EmptyAccumulatorError):
        fisher_finalize(acc)


def test_fisher_shape_mismatch():
    with pytest.raises(ValueError):
        FisherAccumulator().update(0, np.ones((1, 2, 3, 3)), np.ones((1, 2, 3, 2)))


def test_fisher_masks_filter_records():
    acc = fisher_update(FisherAccumulator(), 0, np.ones((1, 3, 1, 1)), np.ones((1, 3, 1, 1)))
    keep = np.array([True, False, True])
    assert [r.channel for r in fisher_finalize(acc, [ChannelMask(0, keep)])] == [0, 2]


def test_fisher_against_naive_loops():
    rng = np.random.default_rng(0)
    for trial in range(20):
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        batches = [(rng.standard_normal(shape), rng.standard_normal(shape)) for _ in range(int(rng.integers(1, 4)))]
        acc = FisherAccumulator()
        for a, g in batches:
            acc.update(0, a, g)
        got = np.array([r.delta_c for r in acc.finalize()])
        np.testing.assert_allclose(got, naive_fisher(batches), rtol=1e-6)


def test_windowed_accumulation_matches_concatenated_pass():
    rng = np.random.default_rng(1)
    steps = [(rng.standard_normal((8, 4, 3, 3)), rng.standard_normal((8, 4, 3, 3))) for _ in range(100)]
    windowed = FisherAccumulator()
    for a, g in steps:
        windowed.update(2, a, g)
    a_all = np.concatenate([a for a, _ in steps])
    g_all = np.concatenate([g for _, g in steps])
    once = FisherAccumulator()
    once.update(2, a_all, g_all)
    np.testing.assert_allclose([r.delta_c for r in windowed.finalize()], [r.delta_c for r in once.finalize()], rtol=1e-12)
    assert windowed.examples(2) == 800


batch = st.tuples(st.integers(1, 5), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))


@settings(max_examples=60, deadline=None)
@given(shape=batch, seed=st.integers(0, 2**31 - 1))
def test_fisher_nonnegative_and_permutation_invariant(shape, seed):
    rng = np.random.default_rng(seed)
    a, g = rng.standard_normal(shape), rng.standard_normal(shape)
    perm = rng.permutation(shape[0])
    d1 = [r.delta_c for r in fisher_update(FisherAccumulator(), 0, a, g).finalize()]
    d2 = [r.delta_c for r in fisher_update(FisherAccumulator(), 0, a[perm], g[perm]).finalize()]
    assert min(d1) >= 0
    np.testing.assert_allclose(d1, d2, rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(shape=batch, seed=st.integers(0, 2**31 - 1), s=st.floats(0.01, 100))
def test_fisher_gradient_scaling(shape, seed, s):
    rng = np.random.default_rng(seed)
    a, g = rng.standard_normal(shape), rng.standard_normal(shape)
    base = fisher_update(FisherAccumulator(), 0, a, g).finalize()
    scaled = fisher_update(FisherAccumulator(), 0, a, s * g).finalize()
    np.testing.assert_allclose([r.delta_c for r in scaled], [s * s * r.delta_c for r in base], rtol=1e-9)
    if shape[1] > 1:
        masks = full_masks([shape[1]])
        d = np.array([r.delta_c for r in base])
        if np.sort(d)[1] > np.sort(d)[0] * (1 + 1e-9):  # argmin under a clear minimum
            assert rank_channels(scaled, masks)[0].channel == rank_channels(base, masks)[0].channel
