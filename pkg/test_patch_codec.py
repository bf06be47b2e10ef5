import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_cloud
from errors import CodecError, CorruptBlockError
from gaussian_model import GaussianCloud
from patch_codec import (TAGS, Codebook, QuantizeConfig, QuantizedPatchBlock, build_codebook, dequantize_patch,
                         from_half, from_half_array, index_bytes_per_splat, kmeans_1d, nearest_entry,
                         patch_block_nbytes, prune_uniform, quantize_patch, round_to_half, tag_columns, tag_widths,
                         to_half, to_half_array)


# ---------------------------------------------------------------------------
# Half floats
# ---------------------------------------------------------------------------

def test_every_finite_half_pattern_round_trips():
    patterns = np.arange(2 ** 16, dtype=np.uint32).astype(np.uint16)
    exponent = (patterns >> 10) & 0x1F
    finite = patterns[exponent != 0x1F]
    assert len(finite) == 2 ** 16 - 2 * 1024
    np.testing.assert_array_equal(to_half_array(from_half_array(finite)), finite)


@pytest.mark.parametrize('pattern, value', [
    (0x0000, 0.0),
    (0x8000, -0.0),
    (0x3C00, 1.0),
    (0x3C01, 1.0009765625),
    (0xC000, -2.0),
    (0x7BFF, 65504.0),
    (0xFBFF, -65504.0),
    (0x0400, 2.0 ** -14),
    (0x03FF, 2.0 ** -14 - 2.0 ** -24),
    (0x0001, 2.0 ** -24),
    (0x3555, 0.333251953125),
])
def test_known_patterns(pattern, value):
    assert to_half(value) == pattern
    assert from_half(pattern) == value


def test_negative_zero_keeps_sign():
    assert math.copysign(1.0, from_half(to_half(-0.0))) == -1.0


def test_round_half_to_even():
    assert to_half(1.0 + 2.0 ** -11) == 0x3C00
    assert to_half(1.0 + 3 * 2.0 ** -11) == 0x3C02
    assert to_half(1.0 + 2.0 ** -11 + 2.0 ** -30) == 0x3C01


def test_saturation():
    assert to_half(70000.0) == 0x7BFF
    assert to_half(-1e10) == 0xFBFF
    assert to_half(65519.0) == 0x7BFF


def test_underflow_to_zero():
    assert to_half(2.0 ** -26) == 0x0000


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        to_half_array([1.0, np.nan])
    with pytest.raises(ValueError):
        to_half(np.inf)


@settings(max_examples=300, deadline=None)
@given(st.floats(min_value=2.0 ** -14, max_value=65504.0), st.booleans())
def test_relative_error_bound(magnitude, negative):
    x = -magnitude if negative else magnitude
    assert abs(x - round_to_half(x)) <= 2.0 ** -11 * abs(x)


def test_random_values_within_bound(rng):
    x = np.float32(rng.uniform(2.0 ** -14, 65504.0, 10000)).astype(np.float64)
    assert np.all(np.abs(x - round_to_half(x)) <= 2.0 ** -11 * np.abs(x))


# ---------------------------------------------------------------------------
# Pruning
# ---------------------------------------------------------------------------

@pytest.mark.parametrize('n, factor', [(100, 2), (101, 2), (7, 3), (10, 20), (0, 4), (5, 1)])
def test_prune_keeps_ceil(n, factor):
    kept = prune_uniform(range(n), factor, seed=3)
    assert len(kept) == math.ceil(n / factor)
    assert kept == sorted(set(kept))
    assert set(kept) <= set(range(n))


def test_prune_larger_factor_keeps_subset():
    candidates = list(range(0, 300, 3))
    previous = set(candidates)
    for factor in [1, 2, 4, 6, 8, 10, 15, 20]:
        kept = set(prune_uniform(candidates, factor, seed=9))
        assert kept <= previous
        previous = kept


def test_prune_is_seeded():
    assert prune_uniform(range(50), 4, 1) == prune_uniform(range(50), 4, 1)
    assert prune_uniform(range(50), 4, 1) != prune_uniform(range(50), 4, 2)


def test_prune_rejects_factor_below_one():
    with pytest.raises(ValueError):
        prune_uniform(range(4), 0.5)


def test_prune_keeps_each_index_equally_often():
    n, factor, runs = 20, 4, 10_000
    counts = np.zeros(n)
    for seed in range(runs):
        counts[prune_uniform(range(n), factor, seed)] += 1
    p = 1.0 / factor
    sigma = math.sqrt(runs * p * (1.0 - p))
    assert np.all(np.abs(counts - runs * p) <= 4 * sigma)


# ---------------------------------------------------------------------------
# Codebooks
# ---------------------------------------------------------------------------

def test_nearest_entry_ties_go_low():
    np.testing.assert_array_equal(nearest_entry([0.0, 1.0, 3.0], [-5, 0.5, 0.6, 2.0, 2.1, 9]), [0, 0, 1, 1, 2, 2])
    np.testing.assert_array_equal(nearest_entry([4.0], [1.0, 7.0]), [0, 0])


def test_kmeans_exact_cover_when_few_values():
    values = [3.0, 1.0, 3.0, 2.0, 1.0]
    clustering = kmeans_1d(values, 8)
    np.testing.assert_array_equal(clustering.entries, [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(clustering.assignments, [2, 0, 2, 1, 0])


def test_kmeans_rejects_bad_input():
    with pytest.raises(CodecError):
        kmeans_1d([], 4)
    with pytest.raises(CodecError):
        kmeans_1d([1.0, 2.0], 300)


def optimal_partition_distortion(values, k):
    """Lowest mean squared error over every split of the sorted values into k contiguous runs"""
    values = np.sort(values)
    best = np.inf
    for cuts in itertools.combinations(range(1, len(values)), k - 1):
        runs = np.split(values, cuts)
        best = min(best, sum(((run - run.mean()) ** 2).sum() for run in runs) / len(values))
    return best


@pytest.mark.parametrize('seed', range(30))
def test_kmeans_close_to_optimal_on_small_sets(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 13))
    k = int(rng.integers(1, 4))
    values = rng.normal(size=n) * rng.choice([0.1, 1.0, 10.0])
    clustering = kmeans_1d(values, k, seed=seed, n_init=10)
    distortion = np.mean((values - clustering.entries[clustering.assignments]) ** 2)
    assert distortion <= 1.05 * optimal_partition_distortion(values, k) + 1e-12


def test_kmeans_single_entry_is_the_mean(rng):
    values = rng.normal(size=9)
    clustering = kmeans_1d(values, 1)
    np.testing.assert_allclose(clustering.entries, [values.mean()], rtol=1e-9, atol=1e-12)
    assert clustering.assignments.tolist() == [0] * 9


def quantile_binning_distortion(values, k):
    """Equal-mass bins with their means as entries"""
    edges = np.quantile(values, np.linspace(0, 1, k + 1))
    bins = np.clip(np.searchsorted(edges, values, side='right') - 1, 0, k - 1)
    entries = np.array([values[bins == b].mean() for b in range(k) if np.any(bins == b)])
    entries.sort()
    return np.mean((values - entries[nearest_entry(entries, values)]) ** 2)


def test_kmeans_beats_quantile_binning(rng):
    values = rng.normal(size=4000)
    clustering = kmeans_1d(values, 16, iters=25, seed=0)
    distortion = np.mean((values - clustering.entries[clustering.assignments]) ** 2)
    assert len(clustering.entries) <= 16
    assert np.all(np.diff(clustering.entries) > 0)
    assert distortion <= quantile_binning_distortion(values, 16)


def test_kmeans_assignments_are_nearest(rng):
    values = rng.uniform(-3, 3, 1000)
    clustering = kmeans_1d(values, 10, seed=4)
    distances = np.abs(values[:, None] - clustering.entries[None, :])
    chosen = distances[np.arange(len(values)), clustering.assignments]
    np.testing.assert_allclose(chosen, distances.min(axis=1))


def test_build_codebook_is_half_rounded_and_sorted(rng):
    book = build_codebook('scale', rng.normal(-4, 1, 3000), QuantizeConfig())
    book.validate()
    assert len(book) <= 256
    np.testing.assert_array_equal(book.entries, round_to_half(book.entries))
    assert build_codebook('color_rest', [], QuantizeConfig()).entries.tolist() == [0.0]


def test_codebook_validation():
    with pytest.raises(CodecError):
        Codebook('bogus', [0.0])
    with pytest.raises(CodecError):
        Codebook('opacity', [1.0, 0.5]).validate()
    with pytest.raises(CodecError):
        Codebook('opacity', []).validate()


# ---------------------------------------------------------------------------
# Quantized blocks
# ---------------------------------------------------------------------------

def test_tag_widths():
    assert [tag_widths(3)[t] for t in TAGS] == [1, 3, 1, 3, 3, 45]
    assert index_bytes_per_splat(3) == 56
    assert index_bytes_per_splat(0) == 11


def test_quantize_round_trip_accuracy():
    cloud = make_cloud(600, seed=2)
    block = quantize_patch(cloud, np.arange(600))
    decoded = dequantize_patch(block)

    assert len(decoded) == 600
    np.testing.assert_allclose(decoded.positions, cloud.positions, rtol=2.0 ** -11, atol=2.0 ** -24)
    assert np.abs(decoded.opacity_logits - cloud.opacity_logits).max() < 0.1
    assert np.abs(decoded.sh_dc - cloud.sh_dc).max() < 0.1
    assert np.abs(decoded.log_scales - cloud.log_scales).max() < 0.1
    assert np.abs(decoded.rotations - cloud.rotations).max() < 0.25
    for tag in TAGS:
        book = block.codebooks[tag]
        book.validate()
        assert block.indices[tag].dtype == np.uint8
        assert int(block.indices[tag].max()) < len(book)


def test_quantize_subset_order_and_size():
    cloud = make_cloud(80, sh_degree=1, seed=4)
    kept = [3, 10, 11, 50]
    block = quantize_patch(cloud, kept, seed=1)
    assert block.count == 4
    assert block.sh_degree == 1
    expected = 4 + 6 * 4 + sum(3 + 2 * len(block.codebooks[t]) for t in TAGS) + 4 * index_bytes_per_splat(1)
    assert patch_block_nbytes(block) == expected
    decoded = dequantize_patch(block)
    np.testing.assert_allclose(decoded.positions, cloud.positions[kept], rtol=2.0 ** -11)


def test_quantize_is_deterministic_and_thread_independent():
    cloud = make_cloud(400, seed=6)
    a = quantize_patch(cloud, np.arange(400), seed=2)
    b = quantize_patch(cloud, np.arange(400), seed=2)
    c = quantize_patch(cloud, np.arange(400), seed=2, cfg=QuantizeConfig(workers=3))
    assert a.equals(b)
    assert a.equals(c)


def test_quantize_empty_patch():
    block = quantize_patch(make_cloud(5), [])
    assert block.count == 0
    assert all(block.codebooks[t].entries.tolist() == [0.0] for t in TAGS)
    assert len(dequantize_patch(block)) == 0


def test_out_of_range_index_is_corrupt():
    block = quantize_patch(make_cloud(10, sh_degree=0), np.arange(10), cfg=QuantizeConfig(codebook_size=4))
    block.indices['scale'][0, 0] = 200
    with pytest.raises(CorruptBlockError):
        dequantize_patch(block)


def test_constant_attribute_single_entry():
    n = 20
    cloud = GaussianCloud(np.zeros((n, 3)), np.full((n, 3), -3.0), np.tile([1.0, 0, 0, 0], (n, 1)),
                          np.ones(n), np.zeros((n, 3)), sh_degree=0)
    block = quantize_patch(cloud, np.arange(n))
    assert block.codebooks['opacity'].entries.tolist() == [1.0]
    assert dequantize_patch(block).equals(cloud)


def test_vq_matches_quantile_binning_on_most_tags():
    rng = np.random.default_rng(21)
    n = 1000
    cloud = GaussianCloud(
        positions=rng.uniform(-1, 1, (n, 3)),
        log_scales=rng.normal(-3.0, 0.5, (n, 3)),
        rotations=rng.normal(size=(n, 4)),
        opacity_logits=rng.normal(size=n),
        sh_dc=rng.normal(scale=0.5, size=(n, 3)),
        sh_rest=rng.normal(scale=0.1, size=(n, 45)),
    )
    block = quantize_patch(cloud, np.arange(n))
    columns = tag_columns(cloud)
    wins = 0
    for tag in TAGS:
        values = columns[tag].reshape(-1)
        decoded = block.codebooks[tag].entries[block.indices[tag]].reshape(-1)
        if np.mean((values - decoded) ** 2) <= quantile_binning_distortion(values, 256):
            wins += 1
    assert wins >= 5


def test_block_with_unsorted_codebook_is_corrupt():
    block = quantize_patch(make_cloud(30, sh_degree=0), np.arange(30))
    block.codebooks['opacity'] = Codebook('opacity', block.codebooks['opacity'].entries[::-1])
    with pytest.raises(CorruptBlockError, match='sorted'):
        block.validate()


def test_block_with_infinite_position_is_corrupt():
    block = quantize_patch(make_cloud(8, sh_degree=0), np.arange(8))
    positions = block.positions.copy()
    positions[3, 1] = 0x7C00
    broken = QuantizedPatchBlock(positions, block.codebooks, block.indices, block.sh_degree)
    with pytest.raises(CorruptBlockError, match='non-finite'):
        broken.validate()
