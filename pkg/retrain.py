"""
Patch Retraining
Adam over Patch splat parameters with decoded Sketch splats frozen in every render
"""

import logging
from dataclasses import dataclass, asdict

import numpy as np
from tqdm import tqdm

from gaussian_model import GaussianCloud
from image_metrics import LossConfig, loss, psnr
from renderer import gradients, render

logger = logging.getLogger(__name__)


@dataclass
class RetrainConfig:
    steps: int = 500
    lr_position: float = 1.6e-4  # multiplied by the scene extent
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_sh_dc: float = 2.5e-3
    lr_sh_rest: float = 1.25e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    lr_final_ratio: float = 0.01  # rates decay log-linearly to this fraction by the last step
    eval_every: int = 50  # steps between full-view loss checks, 0 keeps the last iterate
    seed: int = 0
    show_progress: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not 0 < self.lr_final_ratio <= 1:
            raise ValueError(f"lr_final_ratio must be in (0, 1], got {self.lr_final_ratio}")
        if self.eval_every < 0:
            raise ValueError(f"eval_every must be >= 0, got {self.eval_every}")

    def learning_rates(self, extent):
        return {
            'positions': self.lr_position * extent,
            'log_scales': self.lr_scale,
            'rotations': self.lr_rotation,
            'opacity_logits': self.lr_opacity,
            'sh_dc': self.lr_sh_dc,
            'sh_rest': self.lr_sh_rest,
        }

    def decay(self, step):
        """Learning-rate multiplier at a 0-based step: 1 first, lr_final_ratio last"""
        if self.steps <= 1:
            return 1.0
        return float(self.lr_final_ratio ** (step / (self.steps - 1)))

    def to_dict(self):
        return asdict(self)


@dataclass
class RetrainResult:
    patch: GaussianCloud
    losses: list
    extent: float = 0.0
    best_step: int = 0  # step whose parameters were kept, 0 = the starting point
    best_loss: float = float('nan')  # mean loss over all views at best_step


class Adam:
    """
    First/second moment gradient descent over named parameter arrays

    Args:
        learning_rates: Step size per parameter name
        beta1: First moment decay
        beta2: Second moment decay
        eps: Denominator floor
    """

    def __init__(self, learning_rates, beta1=0.9, beta2=0.999, eps=1e-15):
        self.learning_rates = dict(learning_rates)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.first = {}
        self.second = {}

    def step(self, params, grads, lr_scale=1.0):
        """Update every array in `params` in place from the matching entry of `grads`"""
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for name, value in params.items():
            grad = grads[name]
            m = self.first.setdefault(name, np.zeros_like(value))
            v = self.second.setdefault(name, np.zeros_like(value))
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            value -= lr_scale * self.learning_rates[name] * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


def scene_extent(cameras, cloud=None):
    """1.1 x the largest camera distance from the mean camera center"""
    if cameras:
        centers = np.stack([cam.center for cam in cameras])
        radius = float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max())
        if radius > 0:
            return 1.1 * radius
    diagonal = cloud.bounding_box_diagonal() if cloud is not None else 0.0
    return diagonal if diagonal > 0 else 1.0


def view_schedule(n_views, steps, seed):
    """View index per step: consecutive seeded permutations of all views"""
    rng = np.random.default_rng(seed)
    order = []
    while len(order) < steps:
        order.extend(rng.permutation(n_views).tolist())
    return order[:steps]


def _patch_rows(cloud, start):
    return {
        'positions': cloud.positions[start:],
        'log_scales': cloud.log_scales[start:],
        'rotations': cloud.rotations[start:],
        'opacity_logits': cloud.opacity_logits[start:],
        'sh_dc': cloud.sh_dc[start:],
        'sh_rest': cloud.sh_rest[start:],
    }


def retrain_patch(sketch_decoded, patch, cameras, truths, cfg=None, loss_cfg=None):
    """
    Optimise Patch splats against training views

    Args:
        sketch_decoded: GaussianCloud of decoded Sketch splats (never modified)
        patch: GaussianCloud of Patch splats
        cameras: Training cameras
        truths: Reference Image per camera
        cfg: RetrainConfig
        loss_cfg: LossConfig

    Returns:
        RetrainResult with a new Patch cloud of the same size and the per-step losses
    """
    cfg = cfg or RetrainConfig()
    loss_cfg = loss_cfg or LossConfig()
    if len(cameras) != len(truths):
        raise ValueError(f"{len(cameras)} cameras but {len(truths)} reference images")
    if cfg.steps == 0 or len(patch) == 0:
        return RetrainResult(patch.copy(), [])
    if not cameras:
        raise ValueError("retraining needs at least one camera")

    scene = GaussianCloud.concat([sketch_decoded, patch], sh_degree=patch.sh_degree)
    start = len(sketch_decoded)
    trainable = np.arange(len(scene)) >= start

    extent = scene_extent(cameras, scene)
    optimizer = Adam(cfg.learning_rates(extent), cfg.beta1, cfg.beta2, cfg.eps)
    params = _patch_rows(scene, start)

    logger.info(f"📋 Retraining {len(patch)} patch splats against {len(cameras)} views "
                f"({cfg.steps} steps, extent {extent:.3f}, {start} frozen sketch splats)")

    best_step, best_loss, best = 0, float('nan'), None
    if cfg.eval_every:
        best_loss, best = views_loss(scene, cameras, truths, loss_cfg), _snapshot(params)

    losses = []
    schedule = view_schedule(len(cameras), cfg.steps, cfg.seed)
    for step, view in enumerate(tqdm(schedule, desc="retrain", disable=not cfg.show_progress)):
        value, grads, _ = gradients(scene, trainable, cameras[view], truths[view], loss_cfg)
        optimizer.step(params, {name: g[start:] for name, g in grads.as_dict().items()}, cfg.decay(step))
        losses.append(value)
        if (step + 1) % 100 == 0:
            logger.debug(f"step {step + 1}: mean loss {np.mean(losses[-100:]):.5f}")

        if cfg.eval_every and ((step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps):
            current = views_loss(scene, cameras, truths, loss_cfg)
            if current < best_loss:
                best_step, best_loss, best = step + 1, current, _snapshot(params)

    if best is not None:
        for name, values in best.items():
            params[name][...] = values
        if best_step < cfg.steps:
            logger.info(f"📋 Retraining kept step {best_step} of {cfg.steps} (view loss {best_loss:.5f})")

    result = scene.subset(np.arange(start, len(scene)))
    logger.info(f"✅ Retraining done: loss {losses[0]:.5f} -> {np.mean(losses[-min(100, len(losses)):]):.5f}")
    return RetrainResult(result, losses, extent, best_step, best_loss)


def _snapshot(params):
    return {name: values.copy() for name, values in params.items()}


def views_loss(cloud, cameras, truths, loss_cfg=None):
    """Mean training loss of a cloud over paired views"""
    return float(np.mean([loss(render(cloud, cam), truth, loss_cfg) for cam, truth in zip(cameras, truths)]))


def mean_psnr(cloud, cameras, truths):
    """Mean PSNR of a cloud's renders over paired views"""
    if not cameras:
        return float('nan')
    return float(np.mean([psnr(render(cloud, cam), truth) for cam, truth in zip(cameras, truths)]))

