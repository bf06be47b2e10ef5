"""
Synthetic Scene Generator
Box-room scenes with edge splats following polynomial attribute curves,
planted attribute outliers, planar wall filler and rendered reference views
"""

import json
import logging
import os
from dataclasses import dataclass, asdict

import numpy as np
from scipy.spatial.transform import Rotation

from gaussian_model import GaussianCloud, look_at, save_cameras, save_ply, sh_rest_width
from image_metrics import write_png
from line_prior import LineSegment3D, project_points, save_lines
from renderer import render

logger = logging.getLogger(__name__)

ROOM_HALF = 1.0
ATTRIBUTE_CHANNELS = 11  # opacity 1 + color 3 + scale 3 + rotation 4
MAX_FILLER_ROUNDS = 64


@dataclass
class SynthSpec:
    edges: int = 10
    splats_per_edge: int = 100
    curve_degree: int = 3
    outlier_fraction: float = 0.2
    filler: int = 2000
    resolution: int = 64
    cameras: int = 4
    seed: int = 0
    radius: float = 0.015
    noise_sigma: float = 0.01
    sh_degree: int = 3
    inset: float = 0.1

    def __post_init__(self):
        if not 0 <= self.edges <= 12:
            raise ValueError(f"a box room has at most 12 edges, got {self.edges}")
        if not 0 <= self.outlier_fraction <= 1:
            raise ValueError("outlier_fraction must be in [0, 1]")
        if self.splats_per_edge < 0 or self.filler < 0:
            raise ValueError("splat counts must be non-negative")
        if not 0 <= self.curve_degree <= 10:
            raise ValueError("curve_degree must be in [0, 10]")
        if self.resolution < 1 or self.cameras < 0:
            raise ValueError("resolution must be positive and camera count non-negative")
        sh_rest_width(self.sh_degree)

    def to_dict(self):
        return asdict(self)


@dataclass
class SynthScene:
    cloud: GaussianCloud
    lines: list
    cameras: list
    images: list
    labels: dict


def box_edges(half=ROOM_HALF, inset=0.1):
    """The 12 edges of an axis-aligned cube, inset from the corners, each pointing along +axis"""
    edges = []
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        for s1 in (-half, half):
            for s2 in (-half, half):
                start = np.zeros(3)
                start[others[0]], start[others[1]] = s1, s2
                end = start.copy()
                start[axis], end[axis] = -half + inset, half - inset
                edges.append((start, end))
    return [LineSegment3D(i, s, e) for i, (s, e) in enumerate(edges)]


def _wxyz(rotation):
    x, y, z, w = rotation.as_quat()
    return np.array([w, x, y, z])


def _edge_rotation(direction):
    # local x axis along the edge
    if np.allclose(direction, (1.0, 0.0, 0.0)):
        return Rotation.identity()
    return Rotation.align_vectors(direction[None, :], np.array([[1.0, 0.0, 0.0]]))[0]


def _perpendicular_offsets(direction, count, max_offset, rng):
    helper = np.array([0.0, 0.0, 1.0]) if abs(direction[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(direction, helper)
    u /= np.linalg.norm(u)
    v = np.cross(direction, u)
    angle = rng.uniform(0, 2 * np.pi, count)
    magnitude = rng.uniform(0, max_offset, count)
    return magnitude[:, None] * (np.cos(angle)[:, None] * u + np.sin(angle)[:, None] * v)


def _curve(rng, t, degree, base, spread, k):
    """Polynomial attribute curve: base value plus small random higher-order terms"""
    V = np.vander(t, degree + 1, increasing=True)
    coeffs = np.zeros((degree + 1, k))
    coeffs[0] = base
    if degree > 0:
        coeffs[1:] = rng.uniform(-spread, spread, size=(degree, k))
    return V @ coeffs


def _edge_splats(seg, spec, rng):
    n = spec.splats_per_edge
    t = np.sort((np.arange(n) + rng.uniform(0.1, 0.9, n)) / max(n, 1))
    positions = seg.point_at(t) + _perpendicular_offsets(seg.direction, n, 0.5 * spec.radius, rng)

    d = spec.curve_degree
    opacity = _curve(rng, t, d, rng.uniform(1.0, 3.0), 0.3, 1)
    color = _curve(rng, t, d, rng.uniform(-1.5, -0.5, 3), 0.3, 3)
    scale = _curve(rng, t, d, np.log([0.012, 0.004, 0.004]), 0.2, 3)
    rotation = _curve(rng, t, d, _wxyz(_edge_rotation(seg.direction)), 0.05, 4)

    values = np.concatenate([opacity, color, scale, rotation], axis=1)
    values += rng.normal(0.0, spec.noise_sigma, values.shape)

    outliers = np.zeros(n, dtype=bool)
    count = int(round(spec.outlier_fraction * n))
    if count:
        chosen = rng.choice(n, size=count, replace=False)
        outliers[chosen] = True
        channel = rng.integers(0, ATTRIBUTE_CHANNELS, count)
        values[chosen, channel] += rng.choice([-1.0, 1.0], count) * rng.uniform(0.5, 1.5, count)

    return positions, values, outliers


def _wall_sample(rng, count):
    face = rng.integers(0, 6, count)
    axis, sign = face // 2, np.where(face % 2 == 0, -1.0, 1.0)
    points = rng.uniform(-ROOM_HALF, ROOM_HALF, (count, 3))
    points[np.arange(count), axis] = sign * ROOM_HALF
    return points, face


def _filler_splats(lines, spec, rng):
    """Planar wall splats placed more than 2r from every line"""
    positions = np.zeros((0, 3))
    faces = np.zeros(0, dtype=np.int64)
    for _ in range(MAX_FILLER_ROUNDS):
        if len(positions) >= spec.filler:
            break
        points, face = _wall_sample(rng, 2 * (spec.filler - len(positions)) + 16)
        clear = np.ones(len(points), dtype=bool)
        for seg in lines:
            clear &= project_points(points, seg)[1] > 2 * spec.radius
        positions = np.concatenate([positions, points[clear]])
        faces = np.concatenate([faces, face[clear]])
    if len(positions) < spec.filler:
        raise ValueError(f"walls leave room for only {len(positions)} of {spec.filler} filler splats "
                         f"more than {2 * spec.radius:g} from the lines")
    positions, faces = positions[:spec.filler], faces[:spec.filler]

    n = len(positions)
    # local z along the wall normal
    normal_rotations = [Rotation.from_euler('y', 90, degrees=True), Rotation.from_euler('x', 90, degrees=True),
                        Rotation.identity()]
    spin = rng.uniform(0, 2 * np.pi, n)
    rotations = np.stack([
        _wxyz(normal_rotations[f // 2] * Rotation.from_euler('z', s)) for f, s in zip(faces, spin)
    ]) if n else np.zeros((0, 4))

    palette = rng.uniform(-0.8, 0.8, (6, 3))
    sh_dc = palette[faces] + rng.normal(0.0, 0.1, (n, 3))
    log_scales = np.log([0.05, 0.05, 0.005]) + rng.normal(0.0, 0.1, (n, 3))
    opacity = rng.uniform(1.5, 3.0, n)
    sh_rest = rng.normal(0.0, 0.02, (n, sh_rest_width(spec.sh_degree)))
    return positions, log_scales, rotations, opacity, sh_dc, sh_rest


def room_cameras(count, resolution, radius=0.4):
    """Cameras inside the room looking across it toward the corners"""
    cameras = []
    for k in range(count):
        angle = np.pi / 4 + 2 * np.pi * k / max(count, 1)
        direction = np.array([np.cos(angle), np.sin(angle), 0.0])
        eye = -radius * direction + np.array([0.0, 0.0, 0.1 * ((-1) ** k)])
        cameras.append(look_at(eye, direction * ROOM_HALF, resolution=(resolution, resolution)))
    return cameras


def generate_scene(spec=None):
    """
    Build a deterministic synthetic scene

    Args:
        spec: SynthSpec

    Returns:
        SynthScene; edge splats come first (edge by edge), filler after
    """
    spec = spec or SynthSpec()
    rng = np.random.default_rng(spec.seed)
    lines = box_edges(inset=spec.inset)[:spec.edges]

    rest_width = sh_rest_width(spec.sh_degree)
    chunks = []
    edges_labels = []
    offset = 0
    for seg in lines:
        positions, values, outliers = _edge_splats(seg, spec, rng)
        n = len(positions)
        chunks.append(GaussianCloud(positions, values[:, 4:7], values[:, 7:11], values[:, 0], values[:, 1:4],
                                    np.zeros((n, rest_width)), spec.sh_degree))
        members = list(range(offset, offset + n))
        edges_labels.append({
            'line_id': seg.id,
            'members': members,
            'outliers': [m for m, bad in zip(members, outliers) if bad],
        })
        offset += n

    filler = _filler_splats(lines, spec, rng)
    chunks.append(GaussianCloud(*filler, sh_degree=spec.sh_degree))
    cloud = GaussianCloud.concat(chunks, sh_degree=spec.sh_degree)

    cameras = room_cameras(spec.cameras, spec.resolution)
    images = [render(cloud, cam) for cam in cameras]

    labels = {
        'spec': spec.to_dict(),
        'edges': edges_labels,
        'filler': list(range(offset, len(cloud))),
        'outliers': [i for e in edges_labels for i in e['outliers']],
    }
    logger.info(f"✅ Synthetic scene: {len(lines)} edges, {offset} edge splats, "
                f"{len(cloud) - offset} filler splats, {len(cameras)} views")
    return SynthScene(cloud, lines, cameras, images, labels)


def image_name(index):
    return f"view_{index:03d}.png"


def write_scene(scene, out_dir):
    """
    Write scene.ply, lines.txt, cameras.json, images/ and labels.json

    Returns:
        Dict of written paths
    """
    os.makedirs(os.path.join(out_dir, 'images'), exist_ok=True)
    paths = {
        'ply': os.path.join(out_dir, 'scene.ply'),
        'lines': os.path.join(out_dir, 'lines.txt'),
        'cameras': os.path.join(out_dir, 'cameras.json'),
        'images': os.path.join(out_dir, 'images'),
        'labels': os.path.join(out_dir, 'labels.json'),
    }
    with open(paths['ply'], 'wb') as f:
        f.write(save_ply(scene.cloud))
    with open(paths['lines'], 'w') as f:
        f.write(save_lines(scene.lines))
    with open(paths['cameras'], 'w') as f:
        f.write(save_cameras(scene.cameras))
    for i, image in enumerate(scene.images):
        with open(os.path.join(paths['images'], image_name(i)), 'wb') as f:
            f.write(write_png(image))
    with open(paths['labels'], 'w') as f:
        json.dump(scene.labels, f, indent=2, sort_keys=True)
    return paths
