"""
Patch Codec
Uniform pruning and per-attribute vector quantization of Patch splats
(256-entry scalar codebooks, 1-byte indices, half-float positions and entries)
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from sklearn.cluster import KMeans

from errors import CodecError, CorruptBlockError
from gaussian_model import GaussianCloud, sh_rest_width

logger = logging.getLogger(__name__)

HALF_MAX = 65504.0
CODEBOOK_SIZE = 256

# codebook groups in container order; the tag byte is the position in this tuple
TAGS = ('opacity', 'scale', 'rot_real', 'rot_imag', 'color_dc', 'color_rest')


# ---------------------------------------------------------------------------
# Half floats
# ---------------------------------------------------------------------------

def to_half_array(values):
    """
    Round binary64 values to IEEE 754 binary16 bit patterns

    Args:
        values: Finite array

    Returns:
        uint16 array; round-to-nearest-even, saturating at +/-65504
    """
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("half-float conversion of a non-finite value")
    return np.clip(values, -HALF_MAX, HALF_MAX).astype(np.float16).view(np.uint16)


def from_half_array(patterns):
    return np.asarray(patterns, dtype=np.uint16).view(np.float16).astype(np.float64)


def to_half(x):
    return int(to_half_array(np.float64(x)).item())


def from_half(pattern):
    return float(from_half_array(np.uint16(pattern)).item())


def round_to_half(values):
    return from_half_array(to_half_array(values))


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Codebook:
    """Sorted, de-duplicated half-float entries of one attribute group"""
    tag: str
    entries: np.ndarray

    def __post_init__(self):
        if self.tag not in TAGS:
            raise CodecError(f"unknown codebook tag '{self.tag}'")
        self.entries = np.asarray(self.entries, dtype=np.float64).reshape(-1)

    def __len__(self):
        return len(self.entries)

    def validate(self):
        if not 0 < len(self.entries) <= CODEBOOK_SIZE:
            raise CodecError(f"{self.tag} codebook has {len(self.entries)} entries")
        if not np.all(np.isfinite(self.entries)):
            raise CodecError(f"{self.tag} codebook has non-finite entries")
        if np.any(np.diff(self.entries) <= 0):
            raise CodecError(f"{self.tag} codebook is not sorted ascending")
        return self

    def equals(self, other):
        return self.tag == other.tag and np.array_equal(self.entries, other.entries)


@dataclass(eq=False)
class QuantizedPatchBlock:
    """
    Vector-quantized Patch splats

    Args:
        positions: (count, 3) binary16 bit patterns
        codebooks: Codebook per tag, keyed by tag
        indices: uint8 (count, width) array per tag
        sh_degree: SH degree the color_rest indices were built for
    """
    positions: np.ndarray
    codebooks: dict
    indices: dict
    sh_degree: int = 3

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.uint16).reshape(-1, 3)
        widths = tag_widths(self.sh_degree)
        self.indices = {tag: np.asarray(self.indices[tag], dtype=np.uint8).reshape(self.count, widths[tag])
                        for tag in TAGS}

    @property
    def count(self):
        return len(self.positions)

    def validate(self):
        """Raise CorruptBlockError on a bad codebook, an index past its codebook or a non-finite position"""
        if not np.all(np.isfinite(from_half_array(self.positions))):
            raise CorruptBlockError("patch positions hold non-finite half floats")
        for tag in TAGS:
            book = self.codebooks[tag]
            try:
                book.validate()
            except CodecError as e:
                raise CorruptBlockError(str(e)) from e
            index = self.indices[tag]
            if index.size and int(index.max()) >= len(book):
                raise CorruptBlockError(f"{tag} index {int(index.max())} outside codebook of {len(book)}")
        return self

    def equals(self, other):
        return (self.sh_degree == other.sh_degree
                and np.array_equal(self.positions, other.positions)
                and all(self.codebooks[t].equals(other.codebooks[t]) for t in TAGS)
                and all(np.array_equal(self.indices[t], other.indices[t]) for t in TAGS))


def tag_widths(sh_degree=3):
    """Scalar components per splat for each tag"""
    return {'opacity': 1, 'scale': 3, 'rot_real': 1, 'rot_imag': 3, 'color_dc': 3,
            'color_rest': sh_rest_width(sh_degree)}


def index_bytes_per_splat(sh_degree=3):
    return sum(tag_widths(sh_degree).values())


def patch_block_nbytes(block):
    """Serialized size: count, half positions, six codebooks, packed indices"""
    size = 4 + 6 * block.count
    for tag in TAGS:
        size += 1 + 2 + 2 * len(block.codebooks[tag])
    return size + block.count * index_bytes_per_splat(block.sh_degree)


def tag_columns(cloud):
    """(n, width) pre-activation values for each tag"""
    return {
        'opacity': cloud.opacity_logits[:, None],
        'scale': cloud.log_scales,
        'rot_real': cloud.rotations[:, :1],
        'rot_imag': cloud.rotations[:, 1:],
        'color_dc': cloud.sh_dc,
        'color_rest': cloud.sh_rest,
    }


# ---------------------------------------------------------------------------
# Pruning
# ---------------------------------------------------------------------------

def prune_uniform(indices, factor, seed=0):
    """
    Keep ceil(n / factor) indices chosen uniformly at random

    Args:
        indices: Candidate splat indices
        factor: Pruning factor >= 1
        seed: Sampling seed

    Returns:
        Kept indices, ascending; for one seed, a larger factor keeps a subset
    """
    if not factor >= 1:
        raise ValueError(f"pruning factor must be >= 1, got {factor}")
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    keep = math.ceil(len(indices) / factor)
    if keep == len(indices):
        return np.sort(indices).tolist()
    order = np.random.default_rng(seed).permutation(len(indices))
    return np.sort(indices[order[:keep]]).tolist()


# ---------------------------------------------------------------------------
# Codebooks
# ---------------------------------------------------------------------------

@dataclass
class QuantizeConfig:
    codebook_size: int = CODEBOOK_SIZE
    kmeans_iters: int = 25
    n_init: int = 4
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not 1 <= self.codebook_size <= CODEBOOK_SIZE:
            raise ValueError(f"codebook_size must be in [1, {CODEBOOK_SIZE}]")
        if self.kmeans_iters < 1:
            raise ValueError("kmeans_iters must be at least 1")


class Clustering(NamedTuple):
    entries: np.ndarray
    assignments: np.ndarray


def nearest_entry(entries, values):
    """
    Index of the nearest sorted entry for every value

    Args:
        entries: Ascending codebook entries
        values: Array of any shape

    Returns:
        Integer array shaped like values; equidistant values take the lower index
    """
    entries = np.asarray(entries, dtype=np.float64)
    midpoints = 0.5 * (entries[:-1] + entries[1:])
    return np.searchsorted(midpoints, np.asarray(values, dtype=np.float64), side='left')


def kmeans_1d(values, k, iters=25, seed=0, n_init=4):
    """
    Scalar k-means codebook

    Args:
        values: Non-empty scalars
        k: Codebook size (<= 256)
        iters: Lloyd iteration cap
        seed: Seed of the k-means++ initialisation
        n_init: Restarts; the lowest distortion wins

    Returns:
        Clustering(entries ascending, assignments)
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise CodecError("kmeans_1d: no values")
    if not 1 <= k <= CODEBOOK_SIZE:
        raise CodecError(f"kmeans_1d: k={k} outside [1, {CODEBOOK_SIZE}]")

    distinct = np.unique(values)
    if len(distinct) <= k:
        return Clustering(distinct, nearest_entry(distinct, values))

    model = KMeans(n_clusters=k, init='k-means++', n_init=n_init, max_iter=iters,
                   random_state=seed, algorithm='lloyd')
    model.fit(values[:, None])
    entries = np.unique(model.cluster_centers_[:, 0])
    return Clustering(entries, nearest_entry(entries, values))


def _tag_seed(seed, position):
    return int(np.random.SeedSequence([seed, position]).generate_state(1)[0])


def build_codebook(tag, values, cfg):
    """Cluster one tag's pooled components and round the entries to half floats"""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        return Codebook(tag, [0.0])
    clustering = kmeans_1d(values, cfg.codebook_size, cfg.kmeans_iters,
                           _tag_seed(cfg.seed, TAGS.index(tag)), cfg.n_init)
    return Codebook(tag, np.unique(round_to_half(clustering.entries)))


def quantize_patch(cloud, indices, seed=0, cfg=None):
    """
    Vector-quantize the kept Patch splats

    Args:
        cloud: GaussianCloud
        indices: Kept splat indices (block order)
        seed: Codebook seed (overrides cfg.seed)
        cfg: QuantizeConfig

    Returns:
        QuantizedPatchBlock
    """
    cfg = cfg or QuantizeConfig()
    cfg = QuantizeConfig(cfg.codebook_size, cfg.kmeans_iters, cfg.n_init, seed, cfg.workers)
    patch = cloud.subset(indices)
    columns = tag_columns(patch)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            books = list(pool.map(lambda tag: build_codebook(tag, columns[tag], cfg), TAGS))
    else:
        books = [build_codebook(tag, columns[tag], cfg) for tag in TAGS]
    codebooks = dict(zip(TAGS, books))

    block = QuantizedPatchBlock(
        positions=to_half_array(patch.positions),
        codebooks=codebooks,
        indices={tag: nearest_entry(codebooks[tag].entries, columns[tag]).astype(np.uint8) for tag in TAGS},
        sh_degree=cloud.sh_degree,
    )
    logger.info(f"✅ Quantized {block.count} patch splats, codebook sizes "
                f"{[len(codebooks[t]) for t in TAGS]}, {patch_block_nbytes(block)} bytes")
    return block


def dequantize_patch(block):
    """
    Reconstruct Patch splats by codebook lookup

    Args:
        block: QuantizedPatchBlock

    Returns:
        GaussianCloud of block.count splats in block order
    """
    block.validate()
    value = {tag: block.codebooks[tag].entries[block.indices[tag].astype(np.int64)] for tag in TAGS}
    return GaussianCloud(
        positions=from_half_array(block.positions),
        log_scales=value['scale'],
        rotations=np.concatenate([value['rot_real'], value['rot_imag']], axis=1),
        opacity_logits=value['opacity'][:, 0],
        sh_dc=value['color_dc'],
        sh_rest=value['color_rest'],
        sh_degree=block.sh_degree,
    )


if __name__ == "__main__":
    print("Testing patch quantization...")

    rng = np.random.default_rng(0)
    n = 1000
    cloud = GaussianCloud(rng.normal(size=(n, 3)), rng.normal(size=(n, 3)) - 4, rng.normal(size=(n, 4)),
                          rng.normal(size=n), rng.normal(size=(n, 3)), 0.1 * rng.normal(size=(n, 45)), 3)
    block = quantize_patch(cloud, prune_uniform(range(n), 2, seed=0))
    decoded = dequantize_patch(block)

    print(f"  {block.count} splats, {patch_block_nbytes(block)} bytes "
          f"(raw {block.count * 236} bytes)")
    print(f"  max DC error: {np.abs(decoded.sh_dc - cloud.subset(prune_uniform(range(n), 2)).sh_dc).max():.4f}")
    print("\n✅ Patch codec test complete!")
