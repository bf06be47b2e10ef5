"""
Sketch/Patch Partitioning
Radius search around line priors, per-attribute RANSAC with MAD thresholds,
inlier intersection and the decoded-scale IQR filter
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import NamedTuple, Optional

import numpy as np
from scipy.stats import median_abs_deviation

from gaussian_model import rotation_matrices
from line_prior import project_points
from sketch_codec import align_quaternion_signs

logger = logging.getLogger(__name__)

DEFAULT_RADIUS_FRACTION = 0.005

# attribute channels voted on by RANSAC, in order
CHANNELS = ('opacity', 'color', 'scale', 'rotation')


@dataclass
class PartitionConfig:
    radius_r: Optional[float] = None  # None -> 0.005 x scene bounding-box diagonal
    eta: float = 3.0
    ransac_iters: int = 100
    refit_rounds: int = 10
    min_group_size: int = 8
    fit_degree: int = 3
    iqr_multiplier: float = 1.5
    alignment_cos_min: float = 0.9
    seed: int = 0
    eps_floor: float = 1e-6
    workers: int = 1

    def __post_init__(self):
        if self.radius_r is not None and not self.radius_r > 0:
            raise ValueError(f"radius_r must be positive, got {self.radius_r}")
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.ransac_iters < 1:
            raise ValueError("ransac_iters must be at least 1")
        if self.refit_rounds < 1:
            raise ValueError("refit_rounds must be at least 1")
        if self.min_group_size < 2:
            raise ValueError("min_group_size must be at least 2")
        if self.fit_degree < 1:
            raise ValueError("fit_degree must be at least 1")
        if not 0 <= self.alignment_cos_min <= 1:
            raise ValueError("alignment_cos_min must be in [0, 1]")

    def resolved_radius(self, cloud):
        if self.radius_r is not None:
            return float(self.radius_r)
        diagonal = cloud.bounding_box_diagonal()
        return DEFAULT_RADIUS_FRACTION * diagonal if diagonal > 0 else 1e-9

    def to_dict(self):
        return asdict(self)


@dataclass
class SketchGroup:
    line_id: int
    member_indices: list
    member_t: list

    def __len__(self):
        return len(self.member_indices)


@dataclass
class PartitionResult:
    groups: list
    patch_indices: list
    radius: float = 0.0
    candidate_count: int = 0
    rejected: dict = field(default_factory=dict)  # line_id -> indices dropped by RANSAC

    @property
    def sketch_count(self):
        return sum(len(g) for g in self.groups)

    def validate(self, total):
        """Check that groups and patch form a disjoint, exhaustive partition"""
        seen = np.concatenate([np.asarray(g.member_indices, dtype=np.int64) for g in self.groups]
                              + [np.asarray(self.patch_indices, dtype=np.int64)])
        if len(seen) != total or len(np.unique(seen)) != total:
            raise AssertionError(f"partition covers {len(np.unique(seen))} of {total} splats "
                                 f"with {len(seen)} entries")
        return self


class AttributeInliers(NamedTuple):
    indices: np.ndarray
    degenerate: bool


def radius_search(cloud, seg, r):
    """
    Splats whose center lies within r of the segment (closed inequality)

    Args:
        cloud: GaussianCloud
        seg: LineSegment3D
        r: Radius in world units

    Returns:
        List of (index, t) in index order
    """
    if not r > 0:
        raise ValueError(f"radius must be positive, got {r}")
    t, distance = project_points(cloud.positions, seg)
    hits = np.flatnonzero(distance <= r)
    return [(int(i), float(t[i])) for i in hits]


def assign_nearest_line(cloud, lines, r):
    """
    Nearest line within r for every splat

    Args:
        cloud: GaussianCloud
        lines: Segments
        r: Radius

    Returns:
        (N,) array of positions into `lines`, -1 where no line is within r;
        equal distances keep the earlier line
    """
    nearest = np.full(len(cloud), -1, dtype=np.int64)
    best = np.full(len(cloud), np.inf)
    for position, seg in enumerate(lines):
        _, distance = project_points(cloud.positions, seg)
        closer = (distance <= r) & (distance < best)
        nearest[closer] = position
        best[closer] = distance[closer]
    return nearest


def _zero_center(values, axis):
    return 0.0


def _inlier_threshold(residuals, cfg):
    # residual norms are deviations from the model, so the MAD is taken about zero
    mad = median_abs_deviation(residuals, center=_zero_center, scale='normal')
    return max(cfg.eta * float(mad), cfg.eps_floor)


def _residuals(V, values, rows):
    coeffs = np.linalg.lstsq(V[rows], values[rows], rcond=None)[0]
    return np.linalg.norm(values - V @ coeffs, axis=1)


def ransac_attribute(t_values, values, cfg, rng=None):
    """
    RANSAC polynomial fit of one attribute channel over t

    Args:
        t_values: (n,) line parameters
        values: (n, k) attribute values
        cfg: PartitionConfig
        rng: numpy Generator (seeded from cfg.seed when None)

    Returns:
        AttributeInliers(indices, degenerate)
    """
    t = np.asarray(t_values, dtype=np.float64).reshape(-1)
    values = np.asarray(values, dtype=np.float64).reshape(len(t), -1)
    n = len(t)
    sample_size = cfg.fit_degree + 1

    if n < sample_size:
        logger.warning(f"⚠️  RANSAC pass-through: {n} points < sample size {sample_size}")
        return AttributeInliers(np.arange(n), True)

    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    V = np.vander(t, sample_size, increasing=True)

    best_count, best_median, best_mask = -1, np.inf, None
    for _ in range(cfg.ransac_iters):
        sample = rng.choice(n, size=sample_size, replace=False)
        residuals = _residuals(V, values, sample)
        mask = residuals <= _inlier_threshold(residuals, cfg)
        count = int(mask.sum())
        median = float(np.median(residuals))
        if count > best_count or (count == best_count and median < best_median):
            best_count, best_median, best_mask = count, median, mask

    # refit on the consensus set until it stops changing
    mask = best_mask
    for _ in range(cfg.refit_rounds):
        residuals = _residuals(V, values, np.flatnonzero(mask))
        refit = residuals <= _inlier_threshold(residuals, cfg)
        if refit.sum() < sample_size:
            break
        converged = np.array_equal(refit, mask)
        mask = refit
        if converged:
            break
    return AttributeInliers(np.flatnonzero(mask), False)


def intersect_inliers(sets):
    """Indices present in every inlier set, ascending"""
    sets = [np.asarray(s, dtype=np.int64).reshape(-1) for s in sets]
    if not sets:
        return np.zeros(0, dtype=np.int64)
    common = sets[0]
    for s in sets[1:]:
        common = np.intersect1d(common, s)
    return np.unique(common)


def attribute_channels(cloud, indices):
    """Opacity, DC color, log-scale and sign-aligned rotation of the given members"""
    return (
        cloud.opacity_logits[indices][:, None],
        cloud.sh_dc[indices],
        cloud.log_scales[indices],
        align_quaternion_signs(cloud.rotations[indices]),
    )


def _partition_line(job):
    position, line_id, indices, t, channels, cfg = job
    if len(indices) < cfg.min_group_size:
        return None, indices

    inlier_sets = []
    for channel, values in enumerate(channels):
        rng = np.random.default_rng([cfg.seed, position, channel])
        result = ransac_attribute(t, values, cfg, rng)
        inlier_sets.append(result.indices)
    keep = intersect_inliers(inlier_sets)

    if len(keep) < cfg.min_group_size:
        return None, indices

    dropped = np.setdiff1d(np.arange(len(indices)), keep)
    group = SketchGroup(line_id, indices[keep].tolist(), t[keep].tolist())
    return group, indices[dropped]


def partition(cloud, lines, cfg):
    """
    Split a cloud into per-line Sketch groups and the Patch set

    Args:
        cloud: GaussianCloud
        lines: List of LineSegment3D
        cfg: PartitionConfig

    Returns:
        PartitionResult; groups follow line order, members are in t order
    """
    r = cfg.resolved_radius(cloud)
    nearest = assign_nearest_line(cloud, lines, r)

    jobs = []
    for position, seg in enumerate(lines):
        indices = np.flatnonzero(nearest == position)
        t, _ = project_points(cloud.positions[indices], seg)
        order = np.lexsort((indices, t))
        indices, t = indices[order], t[order]
        jobs.append((position, seg.id, indices, t, attribute_channels(cloud, indices), cfg))

    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            outcomes = list(pool.map(_partition_line, jobs, chunksize=max(1, len(jobs) // (4 * cfg.workers))))
    else:
        outcomes = [_partition_line(job) for job in jobs]

    groups = []
    rejected = {}
    sketch = np.zeros(len(cloud), dtype=bool)
    for (_, line_id, *_), (group, dropped) in zip(jobs, outcomes):
        if group is not None:
            groups.append(group)
            sketch[group.member_indices] = True
        if len(dropped):
            rejected[line_id] = np.asarray(dropped).tolist()

    result = PartitionResult(
        groups=groups,
        patch_indices=np.flatnonzero(~sketch).tolist(),
        radius=r,
        candidate_count=int((nearest >= 0).sum()),
        rejected=rejected,
    )
    logger.info(f"✅ Partition: {result.sketch_count} sketch splats in {len(groups)} groups, "
                f"{len(result.patch_indices)} patch splats (r={r:.4g})")
    return result


def iqr_scale_filter(cloud, group, decoded, seg, cfg):
    """
    Reclassify decoded Sketch splats with outlying scale that are not aligned with the line

    Args:
        cloud: The source GaussianCloud
        group: SketchGroup
        decoded: GaussianCloud decoded from the group's block, 1:1 with members
        seg: The group's LineSegment3D
        cfg: PartitionConfig

    Returns:
        (kept indices, reclassified indices) as lists of cloud indices
    """
    indices = np.asarray(group.member_indices, dtype=np.int64)
    if len(decoded) != len(indices):
        raise ValueError(f"decoded group has {len(decoded)} splats for {len(indices)} members")
    if len(indices) and indices.max() >= len(cloud):
        raise IndexError("group member index outside the cloud")
    if len(indices) < 4:
        return indices.tolist(), []

    scales = np.exp(decoded.log_scales)
    max_scale = scales.max(axis=1)
    q1, q3 = np.percentile(max_scale, [25, 75])
    outlier = max_scale > q3 + cfg.iqr_multiplier * (q3 - q1)
    if not outlier.any():
        return indices.tolist(), []

    longest_axis = rotation_matrices(decoded.rotations)[np.arange(len(indices)), :, np.argmax(scales, axis=1)]
    alignment = np.abs(longest_axis @ seg.direction)
    reclassify = outlier & (alignment < cfg.alignment_cos_min)
    return indices[~reclassify].tolist(), indices[reclassify].tolist()
