"""
Gaussian Model for 3D Gaussian Splatting scenes
Splat data model, covariance math, cameras and bit-exact PLY interchange
"""

import io
import json
import logging
from dataclasses import dataclass

import numpy as np
from plyfile import PlyData, PlyElement, PlyParseError

from errors import CameraFileError, GeometryError, PlyFormatError

logger = logging.getLogger(__name__)

SCALE_FLOOR = 1e-8
MAX_SH_DEGREE = 3
RAW_SPLAT_BYTES = 59 * 4  # 3 pos + 3 scale + 4 rot + 1 opacity + 3 dc + 45 rest, binary32

# f_rest count per sh degree
_REST_WIDTHS = {0: 0, 1: 9, 2: 24, 3: 45}


def sh_rest_width(sh_degree):
    """Number of f_rest coefficients stored for an SH degree"""
    if sh_degree not in _REST_WIDTHS:
        raise ValueError(f"sh_degree must be in [0, {MAX_SH_DEGREE}], got {sh_degree}")
    return _REST_WIDTHS[sh_degree]


def ply_property_names(sh_degree):
    """Canonical vertex property order of the standard 3DGS point file"""
    names = ['x', 'y', 'z', 'nx', 'ny', 'nz', 'f_dc_0', 'f_dc_1', 'f_dc_2']
    names += [f'f_rest_{i}' for i in range(sh_rest_width(sh_degree))]
    names += ['opacity', 'scale_0', 'scale_1', 'scale_2', 'rot_0', 'rot_1', 'rot_2', 'rot_3']
    return names


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


@dataclass(eq=False)
class GaussianSplat:
    """One splat, stored in pre-activation form exactly as the PLY holds it"""
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray  # (w, x, y, z), not normalised
    opacity_logit: float
    sh_dc: np.ndarray
    sh_rest: np.ndarray

    @property
    def scale(self):
        return np.exp(self.log_scale)

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))


class GaussianCloud:
    """
    Ordered collection of splats held as parallel arrays

    Args:
        positions: (N, 3) centers
        log_scales: (N, 3) log of per-axis std-dev
        rotations: (N, 4) raw quaternions (w, x, y, z)
        opacity_logits: (N,) pre-sigmoid opacities
        sh_dc: (N, 3) degree-0 SH coefficients
        sh_rest: (N, R) higher-order SH coefficients, standard file layout
        sh_degree: SH degree in [0, 3]
    """

    def __init__(self, positions, log_scales, rotations, opacity_logits, sh_dc, sh_rest=None, sh_degree=3):
        n = len(positions)
        width = sh_rest_width(sh_degree)
        self.sh_degree = sh_degree
        self.positions = np.asarray(positions, dtype=np.float64).reshape(n, 3)
        self.log_scales = np.asarray(log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(opacity_logits, dtype=np.float64).reshape(n)
        self.sh_dc = np.asarray(sh_dc, dtype=np.float64).reshape(n, 3)
        if sh_rest is None:
            sh_rest = np.zeros((n, width))
        self.sh_rest = np.asarray(sh_rest, dtype=np.float64).reshape(n, width)

    def __len__(self):
        return len(self.positions)

    def __repr__(self):
        return f"GaussianCloud(n={len(self)}, sh_degree={self.sh_degree})"

    @classmethod
    def empty(cls, sh_degree=3):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)),
                   np.zeros((0, sh_rest_width(sh_degree))), sh_degree)

    @classmethod
    def from_splats(cls, splats, sh_degree=3):
        splats = list(splats)
        if not splats:
            return cls.empty(sh_degree)
        return cls(
            np.stack([s.position for s in splats]),
            np.stack([s.log_scale for s in splats]),
            np.stack([s.rotation for s in splats]),
            np.array([s.opacity_logit for s in splats]),
            np.stack([s.sh_dc for s in splats]),
            np.stack([s.sh_rest for s in splats]),
            sh_degree,
        )

    @classmethod
    def concat(cls, clouds, sh_degree=None):
        clouds = list(clouds)
        if sh_degree is None:
            sh_degree = clouds[0].sh_degree if clouds else 3
        if any(c.sh_degree != sh_degree for c in clouds):
            raise ValueError("cannot concatenate clouds with different sh_degree")
        if not clouds:
            return cls.empty(sh_degree)
        return cls(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.log_scales for c in clouds]),
            np.concatenate([c.rotations for c in clouds]),
            np.concatenate([c.opacity_logits for c in clouds]),
            np.concatenate([c.sh_dc for c in clouds]),
            np.concatenate([c.sh_rest for c in clouds]),
            sh_degree,
        )

    def splat(self, i):
        return GaussianSplat(
            position=self.positions[i].copy(),
            log_scale=self.log_scales[i].copy(),
            rotation=self.rotations[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh_dc=self.sh_dc[i].copy(),
            sh_rest=self.sh_rest[i].copy(),
        )

    def splats(self):
        return [self.splat(i) for i in range(len(self))]

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return GaussianCloud(self.positions[idx], self.log_scales[idx], self.rotations[idx],
                             self.opacity_logits[idx], self.sh_dc[idx], self.sh_rest[idx], self.sh_degree)

    def copy(self):
        return self.subset(np.arange(len(self)))

    def attribute_matrix(self):
        """(N, 59-or-fewer) matrix of every stored parameter, file order without normals"""
        return np.concatenate([self.positions, self.sh_dc, self.sh_rest, self.opacity_logits[:, None],
                               self.log_scales, self.rotations], axis=1)

    def equals(self, other):
        """Exact value equality"""
        return (self.sh_degree == other.sh_degree and len(self) == len(other)
                and np.array_equal(self.attribute_matrix(), other.attribute_matrix()))

    def bounding_box_diagonal(self):
        if len(self) == 0:
            return 0.0
        return float(np.linalg.norm(self.positions.max(axis=0) - self.positions.min(axis=0)))

    def validate(self):
        """Raise GeometryError when any splat breaks the finite-values invariant"""
        bad = ~np.all(np.isfinite(self.attribute_matrix()), axis=1)
        if bad.any():
            raise GeometryError(f"splat {int(np.argmax(bad))} has non-finite components")


# ---------------------------------------------------------------------------
# Covariance and density
# ---------------------------------------------------------------------------

def normalize_quaternions(q):
    """Normalise (N, 4) quaternions; zero-norm rows raise GeometryError"""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms == 0):
        raise GeometryError("zero-norm quaternion")
    return q / norms[:, None]


def rotation_matrices(q):
    """
    Build rotation matrices from quaternions

    Args:
        q: (N, 4) quaternions (w, x, y, z), normalised here

    Returns:
        (N, 3, 3) rotation matrices
    """
    q = normalize_quaternions(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def covariances(cloud):
    """(N, 3, 3) covariances R S S^T R^T of a whole cloud, exactly symmetric"""
    M = rotation_matrices(cloud.rotations) * np.exp(cloud.log_scales)[:, None, :]
    sigma = M @ np.transpose(M, (0, 2, 1))
    return 0.5 * (sigma + np.transpose(sigma, (0, 2, 1)))


def covariance(splat):
    """
    Covariance of one splat

    Args:
        splat: GaussianSplat

    Returns:
        3x3 symmetric positive semi-definite matrix
    """
    R = rotation_matrices(splat.rotation)[0]
    M = R * np.exp(np.asarray(splat.log_scale, dtype=np.float64))[None, :]
    sigma = M @ M.T
    return 0.5 * (sigma + sigma.T)


def evaluate_density(splat, x):
    """
    Unnormalised Gaussian density exp(-1/2 (x-mu)^T Sigma^-1 (x-mu))

    Args:
        splat: GaussianSplat
        x: 3-vector

    Returns:
        Value in (0, 1]
    """
    scale = np.maximum(np.exp(np.asarray(splat.log_scale, dtype=np.float64)), SCALE_FLOOR)
    if not np.all(np.isfinite(scale)):
        raise GeometryError("singular covariance: non-finite scale")
    R = rotation_matrices(splat.rotation)[0]
    # coordinates in the splat's principal frame
    local = R.T @ (np.asarray(x, dtype=np.float64) - np.asarray(splat.position, dtype=np.float64))
    mahalanobis = float(np.sum((local / scale) ** 2))
    return float(np.exp(-0.5 * mahalanobis))


# ---------------------------------------------------------------------------
# PLY interchange
# ---------------------------------------------------------------------------

def _parse_header(data):
    """Validate the PLY header and return (header_length, vertex_count, property_names)"""
    if not data.startswith(b'ply\n'):
        raise PlyFormatError("missing 'ply' magic line", 0)

    end = data.find(b'end_header\n')
    if end < 0:
        raise PlyFormatError("header has no end_header line", len(data))
    header_length = end + len(b'end_header\n')

    vertex_count = None
    names = []
    offset = 0
    in_vertex = False
    for raw in data[:end].split(b'\n'):
        line_offset = offset
        offset += len(raw) + 1
        try:
            words = raw.decode('ascii').split()
        except UnicodeDecodeError:
            raise PlyFormatError("non-ascii header line", line_offset)
        if not words or words[0] in ('ply', 'comment', 'obj_info'):
            continue
        if words[0] == 'format':
            if words[1:] != ['binary_little_endian', '1.0']:
                raise PlyFormatError(f"unsupported format '{' '.join(words[1:])}'", line_offset)
        elif words[0] == 'element':
            if len(words) != 3 or not words[2].isdigit():
                raise PlyFormatError("malformed element line", line_offset)
            in_vertex = words[1] == 'vertex'
            if in_vertex:
                vertex_count = int(words[2])
            elif int(words[2]) != 0:
                raise PlyFormatError(f"unexpected element '{words[1]}'", line_offset)
        elif words[0] == 'property':
            if len(words) != 3:
                raise PlyFormatError("malformed property line", line_offset)
            if in_vertex:
                if words[1] not in ('float', 'float32'):
                    raise PlyFormatError(f"property '{words[2]}' is not binary32", line_offset)
                names.append(words[2])
        else:
            raise PlyFormatError(f"unknown header keyword '{words[0]}'", line_offset)

    if vertex_count is None:
        raise PlyFormatError("header declares no vertex element", header_length)
    return header_length, vertex_count, names


def load_ply(data):
    """
    Parse a binary little-endian 3DGS point file

    Args:
        data: File bytes

    Returns:
        GaussianCloud holding the vertex values verbatim (normals discarded)
    """
    data = bytes(data)
    header_length, count, names = _parse_header(data)

    rest_names = [n for n in names if n.startswith('f_rest_')]
    if len(rest_names) not in _REST_WIDTHS.values():
        raise PlyFormatError(f"unsupported f_rest count {len(rest_names)}", header_length)
    sh_degree = {w: d for d, w in _REST_WIDTHS.items()}[len(rest_names)]

    for required in ply_property_names(sh_degree):
        if required not in names:
            raise PlyFormatError(f"missing property '{required}'", header_length)

    expected = count * len(names) * 4
    available = len(data) - header_length
    if available < expected:
        raise PlyFormatError(f"truncated payload: expected {expected} bytes, found {available}", len(data))

    try:
        vertex = PlyData.read(io.BytesIO(data))['vertex'].data
    except PlyParseError as e:
        raise PlyFormatError(f"payload parse failed: {e}", header_length)

    def columns(keys):
        if not keys:
            return np.zeros((count, 0))
        return np.stack([np.asarray(vertex[k], dtype=np.float64) for k in keys], axis=1)

    cloud = GaussianCloud(
        positions=columns(['x', 'y', 'z']),
        log_scales=columns(['scale_0', 'scale_1', 'scale_2']),
        rotations=columns(['rot_0', 'rot_1', 'rot_2', 'rot_3']),
        opacity_logits=np.asarray(vertex['opacity'], dtype=np.float64) if count else np.zeros(0),
        sh_dc=columns(['f_dc_0', 'f_dc_1', 'f_dc_2']),
        sh_rest=columns([f'f_rest_{i}' for i in range(len(rest_names))]),
        sh_degree=sh_degree,
    )

    bad = ~np.all(np.isfinite(cloud.attribute_matrix()), axis=1)
    if bad.any():
        first = int(np.argmax(bad))
        raise PlyFormatError(f"vertex {first} has non-finite values", header_length + first * len(names) * 4)

    logger.debug(f"Loaded {count} splats (sh_degree={sh_degree})")
    return cloud


def save_ply(cloud):
    """
    Serialise a cloud in the canonical 3DGS property order

    Args:
        cloud: GaussianCloud

    Returns:
        PLY file bytes, normals written as zeros
    """
    names = ply_property_names(cloud.sh_degree)
    n = len(cloud)
    normals = np.zeros((n, 3))
    attributes = np.concatenate([cloud.positions, normals, cloud.sh_dc, cloud.sh_rest,
                                 cloud.opacity_logits[:, None], cloud.log_scales, cloud.rotations], axis=1)

    elements = np.empty(n, dtype=[(name, '<f4') for name in names])
    for column, name in enumerate(names):
        elements[name] = attributes[:, column].astype(np.float32)

    buffer = io.BytesIO()
    PlyData([PlyElement.describe(elements, 'vertex')], text=False, byte_order='<').write(buffer)
    return buffer.getvalue()


def raw_ply_nbytes(count, sh_degree=3):
    """Size of the canonical PLY for a cloud of `count` splats"""
    # the empty file's header says "element vertex 0"
    header = len(save_ply(GaussianCloud.empty(sh_degree))) - 1 + len(str(int(count)))
    return header + count * len(ply_property_names(sh_degree)) * 4


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Camera:
    """Pinhole camera, OpenCV axes (x right, y down, z forward)"""
    world_to_camera: np.ndarray
    focal: np.ndarray
    principal_point: np.ndarray
    resolution: tuple  # (width, height)

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        self.focal = np.asarray(self.focal, dtype=np.float64).reshape(2)
        self.principal_point = np.asarray(self.principal_point, dtype=np.float64).reshape(2)
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))

    @property
    def rotation(self):
        return self.world_to_camera[:3, :3]

    @property
    def translation(self):
        return self.world_to_camera[:3, 3]

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    @property
    def width(self):
        return self.resolution[0]

    @property
    def height(self):
        return self.resolution[1]

    def validate(self):
        R = self.rotation
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6:
            raise GeometryError("camera rotation is not orthonormal")
        if np.any(self.focal <= 0):
            raise GeometryError("camera focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("camera resolution must be positive")
        return self

    def to_record(self):
        return {
            'world_to_camera': [float(v) for v in self.world_to_camera.reshape(-1)],
            'fx': float(self.focal[0]), 'fy': float(self.focal[1]),
            'cx': float(self.principal_point[0]), 'cy': float(self.principal_point[1]),
            'width': self.width, 'height': self.height,
        }

    @classmethod
    def from_record(cls, record):
        return cls(
            world_to_camera=record['world_to_camera'],
            focal=(record['fx'], record['fy']),
            principal_point=(record['cx'], record['cy']),
            resolution=(record['width'], record['height']),
        ).validate()


def look_at(eye, target, up=(0.0, 0.0, 1.0), focal=None, resolution=(64, 64), fov_deg=90.0):
    """
    Camera at `eye` looking at `target`

    Args:
        eye: Camera center
        target: Point the optical axis passes through
        up: World up direction
        focal: Focal length in pixels (derived from fov_deg when None)
        resolution: (width, height)
        fov_deg: Horizontal field of view

    Returns:
        Camera
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise GeometryError("look_at: up vector parallel to viewing direction")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)

    w2c = np.eye(4)
    w2c[:3, :3] = np.stack([right, down, forward])
    w2c[:3, 3] = -w2c[:3, :3] @ eye

    width, height = resolution
    if focal is None:
        focal = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return Camera(w2c, (focal, focal), ((width - 1) / 2, (height - 1) / 2), (width, height)).validate()


def load_cameras(text):
    """Parse the JSON camera list"""
    if isinstance(text, bytes):
        text = text.decode('utf-8')
    try:
        records = json.loads(text)
    except json.JSONDecodeError as e:
        raise CameraFileError(f"camera file is not JSON: {e.msg}") from e
    if not isinstance(records, list):
        raise CameraFileError("camera file must hold a JSON list")

    cameras = []
    for i, record in enumerate(records):
        try:
            cameras.append(Camera.from_record(record))
        except KeyError as e:
            raise CameraFileError(f"camera {i}: missing field {e}") from e
        except (TypeError, ValueError) as e:
            raise CameraFileError(f"camera {i}: {e}") from e
    return cameras


def save_cameras(cameras):
    return json.dumps([cam.to_record() for cam in cameras], indent=2)


if __name__ == "__main__":
    print("Testing PLY round trip...")

    rng = np.random.default_rng(0)
    n = 100
    cloud = GaussianCloud(rng.normal(size=(n, 3)), rng.normal(size=(n, 3)) - 3, rng.normal(size=(n, 4)),
                          rng.normal(size=n), rng.normal(size=(n, 3)), rng.normal(size=(n, 45)), 3)
    blob = save_ply(cloud)
    again = save_ply(load_ply(blob))

    print(f"  {len(blob)} bytes, byte-identical: {blob == again}")
    print(f"  density at center: {evaluate_density(cloud.splat(0), cloud.positions[0])}")
    print("\n✅ PLY test complete!")
