"""
Line Prior Module
3D line-segment ingestion, point/segment geometry and a point-based line extractor
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from errors import GeometryError, LineFileError

logger = logging.getLogger(__name__)

MIN_LENGTH_FRACTION = 1e-6  # of the scene bounding-box diagonal
EDGE_SPILL = 1.0 / np.sqrt(2.0 * np.pi)  # points past a blurred end, per unit of density x sigma


@dataclass(eq=False)
class LineSegment3D:
    """Segment L(t) = (1 - t) p_start + t p_end, t in [0, 1]"""
    id: int
    p_start: np.ndarray
    p_end: np.ndarray

    def __post_init__(self):
        self.p_start = np.asarray(self.p_start, dtype=np.float64).reshape(3)
        self.p_end = np.asarray(self.p_end, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.p_start)) and np.all(np.isfinite(self.p_end))):
            raise GeometryError(f"segment {self.id} has non-finite endpoints")
        if not np.linalg.norm(self.p_end - self.p_start) > 0:
            raise GeometryError(f"segment {self.id} has zero length")

    @property
    def vector(self):
        return self.p_end - self.p_start

    @property
    def length(self):
        return float(np.linalg.norm(self.vector))

    @property
    def direction(self):
        return self.vector / self.length

    def point_at(self, t):
        t = np.asarray(t, dtype=np.float64)
        return (1.0 - t)[..., None] * self.p_start + t[..., None] * self.p_end


@dataclass(frozen=True)
class LineProjection:
    t: float
    distance: float


def project_points(points, seg):
    """
    Closest points on a segment for many query points

    Args:
        points: (N, 3) array
        seg: LineSegment3D

    Returns:
        (t, distance) arrays, t clamped to [0, 1]
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    v = seg.vector
    t = np.clip((points - seg.p_start) @ v / float(v @ v), 0.0, 1.0)
    distance = np.linalg.norm(points - seg.point_at(t), axis=1)
    return t, distance


def project_to_segment(point, seg):
    """
    Closest point on a segment

    Args:
        point: 3-vector
        seg: LineSegment3D

    Returns:
        LineProjection(t, distance)
    """
    t, distance = project_points(np.asarray(point, dtype=np.float64)[None, :], seg)
    return LineProjection(float(t[0]), float(distance[0]))


# ---------------------------------------------------------------------------
# Text format
# ---------------------------------------------------------------------------

def load_lines(data):
    """
    Parse the plain-text segment format "id x1 y1 z1 x2 y2 z2"

    Args:
        data: File bytes or text; '#' starts a comment

    Returns:
        List of LineSegment3D in file order
    """
    if isinstance(data, bytes):
        data = data.decode('utf-8')

    lines = []
    for number, raw in enumerate(data.splitlines(), start=1):
        text = raw.split('#', 1)[0].strip()
        if not text:
            continue
        fields = text.split()
        if len(fields) != 7:
            raise LineFileError(f"expected 7 fields, found {len(fields)}", number)
        try:
            seg_id = int(fields[0])
            coords = [float(f) for f in fields[1:]]
        except ValueError as e:
            raise LineFileError(f"not a number ({e})", number)
        try:
            lines.append(LineSegment3D(seg_id, coords[:3], coords[3:]))
        except GeometryError as e:
            raise LineFileError(str(e), number)
    return lines


def save_lines(lines):
    """Serialise segments; repr() keeps every float exact"""
    rows = ["# id x1 y1 z1 x2 y2 z2"]
    for seg in lines:
        coords = ' '.join(repr(float(v)) for v in np.concatenate([seg.p_start, seg.p_end]))
        rows.append(f"{seg.id} {coords}")
    return '\n'.join(rows) + '\n'


def convert_obj_lines(text):
    """
    Convert the OBJ output of a multi-view line reconstructor ("v x y z" and
    "l i j" records, 1-based vertex indices) into segments

    Args:
        text: OBJ text

    Returns:
        List of LineSegment3D numbered in 'l' record order
    """
    vertices = []
    segments = []
    for number, raw in enumerate(text.splitlines(), start=1):
        fields = raw.split('#', 1)[0].split()
        if not fields:
            continue
        if fields[0] == 'v':
            vertices.append([float(f) for f in fields[1:4]])
        elif fields[0] == 'l':
            ids = [int(f.split('/')[0]) for f in fields[1:]]
            # a polyline contributes one segment per consecutive pair
            for a, b in zip(ids[:-1], ids[1:]):
                try:
                    segments.append(LineSegment3D(len(segments), vertices[a - 1], vertices[b - 1]))
                except IndexError:
                    raise LineFileError(f"vertex index out of range ({a}, {b})", number)
                except GeometryError:
                    logger.warning(f"⚠️  Skipping zero-length OBJ segment on line {number}")
    return segments


def select_longest(lines, fraction):
    """
    Keep the ceil(fraction * n) longest segments, preserving file order

    Args:
        lines: Segments
        fraction: Value in (0, 1]
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"line fraction must be in (0, 1], got {fraction}")
    keep = math.ceil(round(fraction * len(lines), 9))
    order = sorted(range(len(lines)), key=lambda i: (-lines[i].length, i))
    chosen = set(order[:keep])
    return [seg for i, seg in enumerate(lines) if i in chosen]


def filter_short_segments(lines, diagonal):
    """Drop segments shorter than MIN_LENGTH_FRACTION of the scene diagonal"""
    minimum = MIN_LENGTH_FRACTION * diagonal
    kept = [seg for seg in lines if seg.length >= minimum]
    if len(kept) < len(lines):
        logger.warning(f"⚠️  Rejected {len(lines) - len(kept)} segments shorter than {minimum:.3g}")
    return kept


# ---------------------------------------------------------------------------
# Point-based extraction
# ---------------------------------------------------------------------------

@dataclass
class ExtractionConfig:
    inlier_radius: float = 0.01
    min_inliers: int = 20
    max_lines: int = 64
    iterations: int = 200
    seed: int = 0


def _perpendicular_distances(points, origin, direction):
    rel = points - origin
    along = rel @ direction
    return np.linalg.norm(rel - along[:, None] * direction, axis=1)


def _support_ends(t, across):
    """
    Ends of a run of centers along a line

    Noise of spread sigma blurs each end of a uniform run so that about
    EDGE_SPILL * density * sigma points land past it; the ends are taken that
    many order statistics in from the extremes.

    Args:
        t: Positions along the line direction
        across: Distances of the same centers from the line

    Returns:
        (low, high) along the line
    """
    t = np.sort(np.asarray(t, dtype=np.float64))
    n = len(t)
    sigma = float(np.sqrt(np.mean(np.square(across)) / 2.0))
    q10, q90 = np.percentile(t, [10, 90])
    density = 0.8 * n / (q90 - q10) if q90 > q10 else 0.0
    k = min(int(round(EDGE_SPILL * density * sigma)), (n - 1) // 2)
    return t[k], t[n - 1 - k]


def extract_lines_from_points(cloud, cfg):
    """
    Sequential RANSAC line extraction over splat centers

    Args:
        cloud: GaussianCloud (only centers are used)
        cfg: ExtractionConfig

    Returns:
        List of LineSegment3D, ids in discovery order
    """
    points = cloud.positions
    rng = np.random.default_rng(cfg.seed)
    diagonal = cloud.bounding_box_diagonal()
    remaining = np.arange(len(points))
    lines = []

    while len(lines) < cfg.max_lines and len(remaining) >= max(cfg.min_inliers, 2):
        candidates = points[remaining]
        best_count = 0
        best_mask = None
        for _ in range(cfg.iterations):
            i, j = rng.choice(len(candidates), size=2, replace=False)
            span = candidates[j] - candidates[i]
            norm = np.linalg.norm(span)
            if norm < 1e-12:
                continue
            mask = _perpendicular_distances(candidates, candidates[i], span / norm) <= cfg.inlier_radius
            count = int(mask.sum())
            if count > best_count:
                best_count, best_mask = count, mask

        if best_mask is None or best_count < max(cfg.min_inliers, 2):
            break

        # refine on the consensus set: principal axis through the inlier centroid
        inliers = candidates[best_mask]
        centroid = inliers.mean(axis=0)
        direction = np.linalg.svd(inliers - centroid, full_matrices=False)[2][0]
        mask = _perpendicular_distances(candidates, centroid, direction) <= cfg.inlier_radius
        if mask.sum() < cfg.min_inliers:
            mask = best_mask

        t = (candidates[mask] - centroid) @ direction
        t_lo, t_hi = _support_ends(t, _perpendicular_distances(candidates[mask], centroid, direction))
        remaining = remaining[~mask]

        if t_hi - t_lo < max(MIN_LENGTH_FRACTION * diagonal, 1e-12):
            logger.warning("⚠️  Extracted support too short for a segment, discarding")
            continue
        lines.append(LineSegment3D(len(lines), centroid + t_lo * direction, centroid + t_hi * direction))

    logger.info(f"✅ Extracted {len(lines)} line segments from {len(points)} centers")
    return lines
