"""
Software Splatting Renderer
EWA projection, depth-ordered alpha compositing and analytic gradients
with respect to every splat parameter
"""

import logging
from dataclasses import dataclass

import numpy as np

from gaussian_model import rotation_matrices, sh_rest_width, sigmoid
from image_metrics import Image, LossConfig, loss_with_gradient

logger = logging.getLogger(__name__)

NEAR_PLANE = 0.01
DILATION = 0.3
CLIP_SIGMAS = 3.0
TRANSMITTANCE_CUTOFF = 1e-4
ALPHA_MAX = 0.99

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


# ---------------------------------------------------------------------------
# Spherical harmonics
# ---------------------------------------------------------------------------

def sh_basis(dirs, degree):
    """
    Real SH basis along unit directions

    Args:
        dirs: (N, 3) unit vectors
        degree: SH degree in [0, 3]

    Returns:
        (N, (degree + 1)^2) basis values
    """
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    columns = [np.full(len(dirs), SH_C0)]
    if degree > 0:
        columns += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree > 1:
        xx, yy, zz = x * x, y * y, z * z
        columns += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
                    SH_C2[3] * x * z, SH_C2[4] * (xx - yy)]
    if degree > 2:
        columns += [SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z, SH_C3[2] * y * (4 * zz - xx - yy),
                    SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy), SH_C3[4] * x * (4 * zz - xx - yy),
                    SH_C3[5] * z * (xx - yy), SH_C3[6] * x * (xx - 3 * yy)]
    return np.stack(columns, axis=1)


def sh_basis_gradient(dirs, degree):
    """(N, (degree + 1)^2, 3) derivatives of each basis function with respect to the direction"""
    n = len(dirs)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    zero = np.zeros(n)
    rows = [(zero, zero, zero)]
    if degree > 0:
        c = np.full(n, SH_C1)
        rows += [(zero, -c, zero), (zero, zero, c), (-c, zero, zero)]
    if degree > 1:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (SH_C2[0] * y, SH_C2[0] * x, zero),
            (zero, SH_C2[1] * z, SH_C2[1] * y),
            (-2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z),
            (SH_C2[3] * z, zero, SH_C2[3] * x),
            (2 * SH_C2[4] * x, -2 * SH_C2[4] * y, zero),
        ]
    if degree > 2:
        rows += [
            (6 * SH_C3[0] * x * y, SH_C3[0] * (3 * xx - 3 * yy), zero),
            (SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y),
            (-2 * SH_C3[2] * x * y, SH_C3[2] * (4 * zz - xx - 3 * yy), 8 * SH_C3[2] * y * z),
            (-6 * SH_C3[3] * x * z, -6 * SH_C3[3] * y * z, SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)),
            (SH_C3[4] * (4 * zz - 3 * xx - yy), -2 * SH_C3[4] * x * y, 8 * SH_C3[4] * x * z),
            (2 * SH_C3[5] * x * z, -2 * SH_C3[5] * y * z, SH_C3[5] * (xx - yy)),
            (SH_C3[6] * (3 * xx - 3 * yy), -6 * SH_C3[6] * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=1) for r in rows], axis=1)


def sh_coefficients(cloud, indices=None):
    """(N, L, 3) coefficients, l = 0 from sh_dc and l >= 1 from the channel-major sh_rest"""
    dc = cloud.sh_dc if indices is None else cloud.sh_dc[indices]
    rest = cloud.sh_rest if indices is None else cloud.sh_rest[indices]
    width = sh_rest_width(cloud.sh_degree) // 3
    rest = rest.reshape(len(rest), 3, width).transpose(0, 2, 1)
    return np.concatenate([dc[:, None, :], rest], axis=1)


# quaternion derivatives dR/dw, dR/dx, dR/dy, dR/dz, each as (N, 3, 3)
def _rotation_jacobians(q):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros(len(q))

    def mat(*entries):
        return np.stack(entries, axis=1).reshape(len(q), 3, 3)

    return (
        mat(zero, -2 * z, 2 * y, 2 * z, zero, -2 * x, -2 * y, 2 * x, zero),
        mat(zero, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x),
        mat(-4 * y, 2 * x, 2 * w, 2 * x, zero, 2 * z, -2 * w, 2 * z, -4 * y),
        mat(-4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, zero),
    )


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

@dataclass
class RasterState:
    """Everything the backward pass needs from one forward render"""
    image: Image
    raw: np.ndarray  # (H, W, 3) unclamped composite
    visible: np.ndarray  # cloud indices of the rasterized splats
    # per visible splat
    p_cam: np.ndarray
    J: np.ndarray
    T: np.ndarray
    sigma3: np.ndarray
    M: np.ndarray
    R: np.ndarray
    q_unit: np.ndarray
    q_norm: np.ndarray
    scales: np.ndarray
    conic: np.ndarray
    opacity: np.ndarray
    view_dirs: np.ndarray
    view_dist: np.ndarray
    basis: np.ndarray
    coeffs: np.ndarray
    color_raw: np.ndarray
    # per contributing (splat, pixel) pair, sorted by pixel then depth
    pair_splat: np.ndarray
    pair_pixel: np.ndarray
    pair_delta: np.ndarray
    pair_falloff: np.ndarray
    pair_alpha_raw: np.ndarray
    pair_alpha: np.ndarray
    pair_transmittance: np.ndarray
    segment_id: np.ndarray
    camera: object = None
    cloud_size: int = 0
    sh_degree: int = 3

    def contributing_pairs(self):
        """Sorted keys (cloud index * pixel count + pixel) of every composited pair"""
        return np.sort(self.visible[self.pair_splat] * (self.image.width * self.image.height) + self.pair_pixel)


def _segmented_cumsum(values, segment_id):
    """Inclusive cumulative sum restarting at every segment; segments are contiguous"""
    if len(values) == 0:
        return values.copy()
    total = np.cumsum(values, axis=0)
    starts = np.flatnonzero(np.r_[True, segment_id[1:] != segment_id[:-1]])
    base = total[starts] - values[starts]
    run = np.cumsum(np.r_[True, segment_id[1:] != segment_id[:-1]]) - 1
    return total - base[run]


def _segments(pixels):
    return np.cumsum(np.r_[True, pixels[1:] != pixels[:-1]]) - 1 if len(pixels) else np.zeros(0, dtype=np.int64)


def _empty_state(cloud, cam):
    w, h = cam.width, cam.height
    z2, z3 = np.zeros((0, 2)), np.zeros((0, 3))
    L = (cloud.sh_degree + 1) ** 2
    return RasterState(
        image=Image.black(w, h), raw=np.zeros((h, w, 3)), visible=np.zeros(0, dtype=np.int64),
        p_cam=z3, J=np.zeros((0, 2, 3)), T=np.zeros((0, 2, 3)), sigma3=np.zeros((0, 3, 3)),
        M=np.zeros((0, 3, 3)), R=np.zeros((0, 3, 3)), q_unit=np.zeros((0, 4)), q_norm=np.zeros(0),
        scales=z3, conic=np.zeros((0, 2, 2)), opacity=np.zeros(0), view_dirs=z3, view_dist=np.zeros(0),
        basis=np.zeros((0, L)), coeffs=np.zeros((0, L, 3)), color_raw=z3,
        pair_splat=np.zeros(0, dtype=np.int64), pair_pixel=np.zeros(0, dtype=np.int64), pair_delta=z2,
        pair_falloff=np.zeros(0), pair_alpha_raw=np.zeros(0), pair_alpha=np.zeros(0),
        pair_transmittance=np.zeros(0), segment_id=np.zeros(0, dtype=np.int64),
        camera=cam, cloud_size=len(cloud), sh_degree=cloud.sh_degree,
    )


def rasterize(cloud, cam):
    """
    Render a cloud and keep the per-pair bookkeeping

    Args:
        cloud: GaussianCloud
        cam: Camera

    Returns:
        RasterState; state.image is the clamped render (black background)
    """
    cam.validate()
    width, height = cam.width, cam.height
    fx, fy = cam.focal
    cx, cy = cam.principal_point
    W, t = cam.rotation, cam.translation

    p_all = cloud.positions @ W.T + t
    candidates = np.flatnonzero(p_all[:, 2] > NEAR_PLANE)
    if len(candidates) == 0:
        return _empty_state(cloud, cam)

    p = p_all[candidates]
    px, py, pz = p[:, 0], p[:, 1], p[:, 2]
    n = len(candidates)

    q_raw = cloud.rotations[candidates].copy()
    q_norm = np.linalg.norm(q_raw, axis=1)
    degenerate = ~(q_norm > 0)
    if degenerate.any():
        logger.warning(f"⚠️  {int(degenerate.sum())} zero-norm rotations rendered as identity")
        q_raw[degenerate] = (1.0, 0.0, 0.0, 0.0)
        q_norm[degenerate] = 1.0
    q_unit = q_raw / q_norm[:, None]
    R = rotation_matrices(q_unit)
    scales = np.exp(cloud.log_scales[candidates])
    M = R * scales[:, None, :]
    sigma3 = M @ M.transpose(0, 2, 1)

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = fx / pz
    J[:, 0, 2] = -fx * px / pz ** 2
    J[:, 1, 1] = fy / pz
    J[:, 1, 2] = -fy * py / pz ** 2
    T = J @ W
    sigma2 = T @ sigma3 @ T.transpose(0, 2, 1)
    sigma2[:, 0, 0] += DILATION
    sigma2[:, 1, 1] += DILATION

    a, b, c = sigma2[:, 0, 0], 0.5 * (sigma2[:, 0, 1] + sigma2[:, 1, 0]), sigma2[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c, -b, -b, a], axis=1).reshape(n, 2, 2) / det[:, None, None]
    lambda_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    radius = CLIP_SIGMAS * np.sqrt(lambda_max)

    mean2d = np.stack([fx * px / pz + cx, fy * py / pz + cy], axis=1)
    inside = ((mean2d[:, 0] >= -radius) & (mean2d[:, 0] <= width - 1 + radius)
              & (mean2d[:, 1] >= -radius) & (mean2d[:, 1] <= height - 1 + radius))

    u0 = np.maximum(np.ceil(mean2d[:, 0] - radius), 0).astype(np.int64)
    u1 = np.minimum(np.floor(mean2d[:, 0] + radius), width - 1).astype(np.int64)
    v0 = np.maximum(np.ceil(mean2d[:, 1] - radius), 0).astype(np.int64)
    v1 = np.minimum(np.floor(mean2d[:, 1] + radius), height - 1).astype(np.int64)
    box_w = np.where(inside, np.maximum(u1 - u0 + 1, 0), 0)
    box_h = np.where(inside, np.maximum(v1 - v0 + 1, 0), 0)
    counts = box_w * box_h

    # expand every splat over its clipped bounding box
    splat = np.repeat(np.arange(n), counts)
    local = np.arange(len(splat)) - np.repeat(np.cumsum(counts) - counts, counts)
    u = u0[splat] + local % np.maximum(box_w[splat], 1)
    v = v0[splat] + local // np.maximum(box_w[splat], 1)
    delta = np.stack([u, v], axis=1).astype(np.float64) - mean2d[splat]
    A = conic[splat]
    mahalanobis = (A[:, 0, 0] * delta[:, 0] ** 2 + 2 * A[:, 0, 1] * delta[:, 0] * delta[:, 1]
                   + A[:, 1, 1] * delta[:, 1] ** 2)
    keep = mahalanobis <= CLIP_SIGMAS ** 2
    splat, u, v, delta, mahalanobis = splat[keep], u[keep], v[keep], delta[keep], mahalanobis[keep]

    opacity = sigmoid(cloud.opacity_logits[candidates])
    falloff = np.exp(-0.5 * mahalanobis)
    alpha_raw = opacity[splat] * falloff
    alpha = np.minimum(alpha_raw, ALPHA_MAX)

    # strict depth order, ties by splat index
    depth_rank = np.empty(n, dtype=np.int64)
    depth_rank[np.lexsort((candidates, pz))] = np.arange(n)
    pixel = v * width + u
    order = np.lexsort((depth_rank[splat], pixel))
    splat, pixel, delta, falloff = splat[order], pixel[order], delta[order], falloff[order]
    alpha_raw, alpha = alpha_raw[order], alpha[order]

    segment = _segments(pixel)
    log_keep = np.log1p(-alpha)
    log_after = _segmented_cumsum(log_keep, segment)
    composited = np.exp(log_after) >= TRANSMITTANCE_CUTOFF
    splat, pixel, delta, falloff = splat[composited], pixel[composited], delta[composited], falloff[composited]
    alpha_raw, alpha = alpha_raw[composited], alpha[composited]
    transmittance = np.exp(log_after[composited] - log_keep[composited])
    segment = _segments(pixel)

    centers = cloud.positions[candidates] - cam.center
    view_dist = np.linalg.norm(centers, axis=1)
    view_dirs = centers / view_dist[:, None]
    basis = sh_basis(view_dirs, cloud.sh_degree)
    coeffs = sh_coefficients(cloud, candidates)
    color_raw = np.einsum('nl,nlc->nc', basis, coeffs)
    color = np.maximum(color_raw + 0.5, 0.0)

    weight = alpha * transmittance
    raw = np.stack([np.bincount(pixel, weights=weight * color[splat, ch], minlength=width * height)
                    for ch in range(3)], axis=1).reshape(height, width, 3)

    return RasterState(
        image=Image(np.clip(raw, 0.0, 1.0)), raw=raw, visible=candidates,
        p_cam=p, J=J, T=T, sigma3=sigma3, M=M, R=R, q_unit=q_unit, q_norm=q_norm, scales=scales,
        conic=conic, opacity=opacity, view_dirs=view_dirs, view_dist=view_dist, basis=basis,
        coeffs=coeffs, color_raw=color_raw,
        pair_splat=splat, pair_pixel=pixel, pair_delta=delta, pair_falloff=falloff,
        pair_alpha_raw=alpha_raw, pair_alpha=alpha, pair_transmittance=transmittance, segment_id=segment,
        camera=cam, cloud_size=len(cloud), sh_degree=cloud.sh_degree,
    )


def render_with_state(cloud, cam):
    state = rasterize(cloud, cam)
    return state.image, state


def render(cloud, cam):
    """
    Render a cloud from one camera

    Args:
        cloud: GaussianCloud
        cam: Camera

    Returns:
        Image with values in [0, 1]
    """
    return rasterize(cloud, cam).image


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

@dataclass
class CloudGradients:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh_dc: np.ndarray
    sh_rest: np.ndarray

    GROUPS = ('positions', 'log_scales', 'rotations', 'opacity_logits', 'sh_dc', 'sh_rest')

    @classmethod
    def zeros_like(cls, cloud):
        return cls(np.zeros_like(cloud.positions), np.zeros_like(cloud.log_scales),
                   np.zeros_like(cloud.rotations), np.zeros_like(cloud.opacity_logits),
                   np.zeros_like(cloud.sh_dc), np.zeros_like(cloud.sh_rest))

    def as_dict(self):
        return {name: getattr(self, name) for name in self.GROUPS}

    def max_abs(self):
        return max((float(np.abs(g).max()) if g.size else 0.0) for g in self.as_dict().values())


def _per_splat(index, values, n):
    values = values.reshape(len(index), -1)
    return np.stack([np.bincount(index, weights=values[:, k], minlength=n) for k in range(values.shape[1])], axis=1)


def backward(state, d_image, trainable=None):
    """
    Chain an image-space gradient back to the splat parameters

    Args:
        state: RasterState from rasterize
        d_image: (H, W, 3) gradient of a scalar with respect to state.image
        trainable: Optional (N,) boolean mask; other rows stay zero

    Returns:
        CloudGradients shaped like the rendered cloud
    """
    n_cloud = state.cloud_size
    width_rest = sh_rest_width(state.sh_degree)
    grads = CloudGradients(np.zeros((n_cloud, 3)), np.zeros((n_cloud, 3)), np.zeros((n_cloud, 4)),
                           np.zeros(n_cloud), np.zeros((n_cloud, 3)), np.zeros((n_cloud, width_rest)))
    n = len(state.visible)
    if n == 0 or len(state.pair_splat) == 0:
        return grads

    cam = state.camera
    fx, fy = cam.focal
    W = cam.rotation

    # clamp to [0, 1] passes gradient only where the composite was inside the range
    d_raw = np.asarray(d_image, dtype=np.float64) * ((state.raw >= 0.0) & (state.raw <= 1.0))
    d_raw = d_raw.reshape(-1, 3)

    splat, pixel = state.pair_splat, state.pair_pixel
    alpha, trans = state.pair_alpha, state.pair_transmittance
    color = np.maximum(state.color_raw + 0.5, 0.0)

    g_pix = d_raw[pixel]
    weight = alpha * trans
    contribution = weight[:, None] * color[splat]
    accumulated = _segmented_cumsum(contribution, state.segment_id)
    last = np.r_[np.flatnonzero(state.segment_id[1:] != state.segment_id[:-1]), len(splat) - 1]
    behind = accumulated[last][state.segment_id] - accumulated

    d_color = _per_splat(splat, g_pix * weight[:, None], n)
    d_alpha = trans * np.sum(g_pix * color[splat], axis=1) - np.sum(g_pix * behind, axis=1) / (1.0 - alpha)
    d_alpha_raw = d_alpha * (state.pair_alpha_raw < ALPHA_MAX)

    falloff = state.pair_falloff
    d_opacity = _per_splat(splat, d_alpha_raw * falloff, n)[:, 0]
    d_logit = d_opacity * state.opacity * (1.0 - state.opacity)

    # dalpha/dmean = o g A d ; dalpha/dA = -1/2 o g d d^T
    coef = d_alpha_raw * state.opacity[splat] * falloff
    delta = state.pair_delta
    A_pair = state.conic[splat]
    A_delta = np.einsum('pij,pj->pi', A_pair, delta)
    d_mean2d = _per_splat(splat, coef[:, None] * A_delta, n)
    outer = -0.5 * coef[:, None, None] * delta[:, :, None] * delta[:, None, :]
    d_conic = _per_splat(splat, outer.reshape(-1, 4), n).reshape(n, 2, 2)

    A = state.conic
    d_sigma2 = -A @ d_conic @ A
    T, sigma3 = state.T, state.sigma3
    d_sigma3 = T.transpose(0, 2, 1) @ d_sigma2 @ T
    d_T = 2.0 * d_sigma2 @ T @ sigma3
    d_J = d_T @ W.T

    px, py, pz = state.p_cam[:, 0], state.p_cam[:, 1], state.p_cam[:, 2]
    d_p = np.einsum('nij,ni->nj', state.J, d_mean2d)
    d_p[:, 0] += d_J[:, 0, 2] * (-fx / pz ** 2)
    d_p[:, 1] += d_J[:, 1, 2] * (-fy / pz ** 2)
    d_p[:, 2] += (d_J[:, 0, 0] * (-fx / pz ** 2) + d_J[:, 0, 2] * (2 * fx * px / pz ** 3)
                  + d_J[:, 1, 1] * (-fy / pz ** 2) + d_J[:, 1, 2] * (2 * fy * py / pz ** 3))
    d_position = d_p @ W

    # view-dependent color
    d_color_raw = d_color * (state.color_raw + 0.5 > 0)
    d_coeffs = state.basis[:, :, None] * d_color_raw[:, None, :]
    d_dir = np.einsum('nc,nlc,nlk->nk', d_color_raw, state.coeffs,
                      sh_basis_gradient(state.view_dirs, state.sh_degree))
    dirs = state.view_dirs
    d_position += (d_dir - dirs * np.sum(dirs * d_dir, axis=1, keepdims=True)) / state.view_dist[:, None]

    # covariance R S S^T R^T
    d_M = 2.0 * d_sigma3 @ state.M
    d_scales = np.sum(state.R * d_M, axis=1)
    d_log_scales = d_scales * state.scales
    d_R = d_M * state.scales[:, None, :]
    d_q_unit = np.stack([np.sum(d_R * jac, axis=(1, 2)) for jac in _rotation_jacobians(state.q_unit)], axis=1)
    q = state.q_unit
    d_rotations = (d_q_unit - q * np.sum(q * d_q_unit, axis=1, keepdims=True)) / state.q_norm[:, None]

    rest = d_coeffs[:, 1:, :].transpose(0, 2, 1).reshape(n, width_rest)
    rows = state.visible
    grads.positions[rows] = d_position
    grads.log_scales[rows] = d_log_scales
    grads.rotations[rows] = d_rotations
    grads.opacity_logits[rows] = d_logit
    grads.sh_dc[rows] = d_coeffs[:, 0, :]
    grads.sh_rest[rows] = rest

    if trainable is not None:
        frozen = ~np.asarray(trainable, dtype=bool)
        for g in grads.as_dict().values():
            g[frozen] = 0.0
    return grads


def gradients(cloud, trainable_mask, cam, truth, cfg=None):
    """
    Training loss of one view and its gradients

    Args:
        cloud: GaussianCloud
        trainable_mask: (N,) booleans; frozen splats render but get zero gradients
        cam: Camera
        truth: Reference Image
        cfg: LossConfig

    Returns:
        (loss, CloudGradients, rendered Image)
    """
    state = rasterize(cloud, cam)
    value, d_image = loss_with_gradient(state.image, truth, cfg or LossConfig())
    return value, backward(state, d_image, trainable_mask), state.image


if __name__ == "__main__":
    from gaussian_model import GaussianCloud, look_at

    print("Testing renderer...")
    cam = look_at((0, -3, 0), (0, 0, 0), resolution=(33, 33))
    rng = np.random.default_rng(0)
    n = 10
    cloud = GaussianCloud(0.3 * rng.normal(size=(n, 3)), np.full((n, 3), -2.0), rng.normal(size=(n, 4)),
                          rng.normal(size=n), rng.normal(size=(n, 3)), 0.1 * rng.normal(size=(n, 9)), 1)
    state = rasterize(cloud, cam)
    print(f"  {len(state.visible)} visible splats, {len(state.pair_splat)} composited pairs")
    print(f"  mean pixel value {state.image.pixels.mean():.4f}")
    print("\n✅ Renderer test complete!")
