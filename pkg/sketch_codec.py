"""
Sketch Codec
Per-line polynomial attribute models over the line parameter t
"""

import logging
from dataclasses import dataclass

import numpy as np

from errors import CodecError
from gaussian_model import GaussianCloud, sh_rest_width

logger = logging.getLogger(__name__)

MAX_DEGREE = 10
T_LEVELS = 65535
LOO_MIN_POINTS = 12
DEGREE_TOLERANCE = 0.01

# (name, component count) in container order
ATTRIBUTE_MODELS = (('opacity', 1), ('color', 3), ('scale', 3), ('rotation', 4))


@dataclass(eq=False)
class PolyModel:
    """
    Polynomial in t per output component

    Args:
        degree: Polynomial degree in [0, 10]
        coeffs: (degree + 1, k) coefficients, ascending powers
    """
    degree: int
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64).reshape(self.degree + 1, -1)

    @property
    def k(self):
        return self.coeffs.shape[1]

    def evaluate(self, t):
        V = np.vander(np.asarray(t, dtype=np.float64).reshape(-1), self.degree + 1, increasing=True)
        return V @ self.coeffs

    def equals(self, other):
        return self.degree == other.degree and np.array_equal(self.coeffs, other.coeffs)


@dataclass(eq=False)
class SketchLineBlock:
    """One line's encoded Sketch splats"""
    line_id: int
    p_start: np.ndarray
    p_end: np.ndarray
    t_q: np.ndarray
    opacity_model: PolyModel
    color_model: PolyModel
    scale_model: PolyModel
    rotation_model: PolyModel

    def __post_init__(self):
        self.p_start = np.asarray(self.p_start, dtype=np.float64).reshape(3)
        self.p_end = np.asarray(self.p_end, dtype=np.float64).reshape(3)
        self.t_q = np.asarray(self.t_q, dtype=np.uint16).reshape(-1)

    @property
    def count(self):
        return len(self.t_q)

    @property
    def models(self):
        return (self.opacity_model, self.color_model, self.scale_model, self.rotation_model)

    def validate(self):
        for (name, k), model in zip(ATTRIBUTE_MODELS, self.models):
            if model.k != k:
                raise CodecError(f"line {self.line_id}: {name} model has k={model.k}, expected {k}")
            if not 0 <= model.degree <= MAX_DEGREE:
                raise CodecError(f"line {self.line_id}: {name} model degree {model.degree} out of range")
            if not np.all(np.isfinite(model.coeffs)):
                raise CodecError(f"line {self.line_id}: {name} model has non-finite coefficients")
        return self

    def equals(self, other):
        return (self.line_id == other.line_id
                and np.array_equal(self.p_start, other.p_start)
                and np.array_equal(self.p_end, other.p_end)
                and np.array_equal(self.t_q, other.t_q)
                and all(a.equals(b) for a, b in zip(self.models, other.models)))


def block_nbytes(block):
    """Serialized size: line id, endpoints, count, t_q, then (degree, k, coeffs) per model"""
    size = 4 + 6 * 4 + 4 + 2 * block.count
    for model in block.models:
        size += 2 + 4 * (model.degree + 1) * model.k
    return size


def _as_matrix(values, n):
    values = np.asarray(values, dtype=np.float64)
    return values.reshape(n, -1)


def fit_poly(t, values, degree):
    """
    Least-squares polynomial fit per component

    Args:
        t: Abscissae
        values: (n, k) values (1-D input is treated as k = 1)
        degree: Polynomial degree

    Returns:
        PolyModel (minimum-norm solution when rank deficient)
    """
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if len(t) == 0:
        raise CodecError("fit_poly: empty input")
    values = _as_matrix(values, len(t))
    V = np.vander(t, degree + 1, increasing=True)
    coeffs = np.linalg.lstsq(V, values, rcond=None)[0]
    return PolyModel(degree, coeffs)


def _degree_score(t, values, degree, leave_one_out):
    V = np.vander(t, degree + 1, increasing=True)
    pinv = np.linalg.pinv(V)
    residual = values - V @ (pinv @ values)
    if leave_one_out:
        # closed-form leave-one-out residuals e_i / (1 - h_ii)
        leverage = np.einsum('ij,ji->i', V, pinv)
        residual = residual / np.maximum(1.0 - leverage, 1e-12)[:, None]
    return float(np.sqrt(np.mean(residual ** 2)))


def select_degree(t, values):
    """
    Grid search over degrees 1..min(10, n - 1)

    Args:
        t: Abscissae (n >= 2)
        values: (n, k) values

    Returns:
        Smallest degree whose score is within 1% of the best score
    """
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    values = _as_matrix(values, len(t))
    top = min(MAX_DEGREE, len(t) - 1)
    if top < 1:
        return 1

    leave_one_out = len(t) >= LOO_MIN_POINTS
    scores = [_degree_score(t, values, d, leave_one_out) for d in range(1, top + 1)]
    best = min(scores)
    tolerance = DEGREE_TOLERANCE * best + 1e-12 * (1.0 + float(np.max(np.abs(values))))
    for degree, score in enumerate(scores, start=1):
        if score <= best + tolerance:
            return degree
    return top


def align_quaternion_signs(quaternions, min_cos=0.5):
    """
    Flip q -> -q so neighbouring quaternions along the line agree in sign

    The walk starts at the member closest to the dominant axis of the set (largest
    component made positive) and runs outward in both directions. A member becomes
    the reference for the next one only when it agrees with the current reference
    to within min_cos, so near-zero or stray quaternions never flip their successors.

    Args:
        quaternions: (n, 4) in member (t) order
        min_cos: Agreement needed to move the reference forward

    Returns:
        Sign-aligned copy
    """
    q = np.array(quaternions, dtype=np.float64).reshape(-1, 4)
    if len(q) == 0:
        return q
    norms = np.linalg.norm(q, axis=1)
    axis = np.linalg.eigh(q.T @ q)[1][:, -1]
    start = int(np.argmax(np.abs(q @ axis) / np.maximum(norms, 1e-12)))
    if q[start, np.argmax(np.abs(q[start]))] < 0:
        q[start] = -q[start]

    for walk in (range(start + 1, len(q)), range(start - 1, -1, -1)):
        ref, ref_norm = q[start], norms[start]
        for i in walk:
            dot = q[i] @ ref
            if dot < 0:
                q[i] = -q[i]
                dot = -dot
            if dot >= min_cos * norms[i] * ref_norm and norms[i] > 0:
                ref, ref_norm = q[i], norms[i]
    return q


def quantize_t(t):
    return np.round(np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0) * T_LEVELS).astype(np.uint16)


def dequantize_t(t_q):
    return np.asarray(t_q, dtype=np.float64) / T_LEVELS


def _fit_attribute(t, values):
    model = fit_poly(t, values, select_degree(t, values))
    # coefficients are stored as binary32
    return PolyModel(model.degree, model.coeffs.astype(np.float32).astype(np.float64))


def encode_group(cloud, group, seg, min_group_size=2):
    """
    Encode one Sketch group as four polynomial models

    Args:
        cloud: GaussianCloud
        group: SketchGroup (members in t order)
        seg: The group's LineSegment3D
        min_group_size: Smallest encodable group

    Returns:
        SketchLineBlock
    """
    idx = np.asarray(group.member_indices, dtype=np.int64)
    if len(idx) < max(min_group_size, 2):
        raise CodecError(f"line {seg.id}: group of {len(idx)} is below the minimum size {min_group_size}")

    t_q = quantize_t(group.member_t)
    t = dequantize_t(t_q)

    block = SketchLineBlock(
        line_id=seg.id,
        p_start=seg.p_start.astype(np.float32),
        p_end=seg.p_end.astype(np.float32),
        t_q=t_q,
        opacity_model=_fit_attribute(t, cloud.opacity_logits[idx]),
        color_model=_fit_attribute(t, cloud.sh_dc[idx]),
        scale_model=_fit_attribute(t, cloud.log_scales[idx]),
        rotation_model=_fit_attribute(t, align_quaternion_signs(cloud.rotations[idx])),
    )
    logger.debug(f"Line {seg.id}: {block.count} splats, degrees "
                 f"{[m.degree for m in block.models]}, {block_nbytes(block)} bytes")
    return block


def decode_group(block, sh_degree=3):
    """
    Reconstruct the splats of one block

    Args:
        block: SketchLineBlock
        sh_degree: SH degree of the output cloud (sh_rest is zero)

    Returns:
        GaussianCloud with positions exactly on the segment, in t order
    """
    block.validate()
    t = dequantize_t(block.t_q)
    positions = (1.0 - t)[:, None] * block.p_start + t[:, None] * block.p_end

    rotations = block.rotation_model.evaluate(t)
    norms = np.linalg.norm(rotations, axis=1)
    degenerate = ~(norms > 0)
    if degenerate.any():
        logger.warning(f"⚠️  Line {block.line_id}: {int(degenerate.sum())} zero-norm rotations set to identity")
        rotations[degenerate] = (1.0, 0.0, 0.0, 0.0)
        norms[degenerate] = 1.0
    rotations = rotations / norms[:, None]

    n = block.count
    return GaussianCloud(
        positions=positions,
        log_scales=block.scale_model.evaluate(t),
        rotations=rotations,
        opacity_logits=block.opacity_model.evaluate(t)[:, 0],
        sh_dc=block.color_model.evaluate(t),
        sh_rest=np.zeros((n, sh_rest_width(sh_degree))),
        sh_degree=sh_degree,
    )
