"""
Shared pytest fixtures: random clouds, a single-line scene and a small synthetic room
"""

import logging

import numpy as np
import pytest

from gaussian_model import GaussianCloud, sh_rest_width
from line_prior import LineSegment3D
from synth import SynthSpec, generate_scene, write_scene


def make_cloud(n, sh_degree=3, seed=0, spread=1.0):
    rng = np.random.default_rng(seed)
    return GaussianCloud(
        positions=rng.uniform(-spread, spread, (n, 3)),
        log_scales=rng.uniform(-4.0, -2.0, (n, 3)),
        rotations=rng.normal(size=(n, 4)),
        opacity_logits=rng.normal(size=n),
        sh_dc=rng.normal(scale=0.5, size=(n, 3)),
        sh_rest=rng.normal(scale=0.1, size=(n, sh_rest_width(sh_degree))),
        sh_degree=sh_degree,
    )


def make_line_scene(n_line=60, n_far=40, seed=0, sh_degree=3):
    """
    Splats along the x axis segment (0,0,0)-(1,0,0) whose attributes follow
    quadratics in t, followed by scattered splats far from the segment
    """
    rng = np.random.default_rng(seed)
    seg = LineSegment3D(7, (0.0, 0.0, 0.0), (1.0, 0.0, 0.0))
    t = np.linspace(0.02, 0.98, n_line)
    positions = seg.point_at(t) + rng.uniform(-0.002, 0.002, (n_line, 3)) * np.array([0.0, 1.0, 1.0])
    opacity = 1.0 + 0.5 * t - 0.3 * t ** 2
    sh_dc = np.stack([0.2 + 0.1 * t, -0.3 + 0.2 * t ** 2, 0.1 - 0.4 * t], axis=1)
    log_scales = np.stack([np.full(n_line, np.log(0.01)), np.full(n_line, np.log(0.003)),
                           np.full(n_line, np.log(0.003))], axis=1) + 0.05 * t[:, None]
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n_line, 1)) + np.stack(
        [np.zeros(n_line), 0.05 * t, np.zeros(n_line), 0.02 * t ** 2], axis=1)
    line_part = GaussianCloud(positions, log_scales, rotations, opacity, sh_dc,
                              np.zeros((n_line, sh_rest_width(sh_degree))), sh_degree)
    far_part = make_cloud(n_far, sh_degree, seed + 1)
    far_part.positions += np.array([0.5, 3.0, 3.0])
    return GaussianCloud.concat([line_part, far_part]), seg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_cloud():
    return make_cloud(50)


@pytest.fixture
def line_scene():
    return make_line_scene()


@pytest.fixture(scope='session')
def small_room():
    spec = SynthSpec(edges=3, splats_per_edge=40, filler=150, resolution=24, cameras=2, seed=3)
    return generate_scene(spec)


@pytest.fixture(autouse=True)
def reset_root_logging():
    yield
    root = logging.getLogger()
    for handler in list(root.handlers):
        if type(handler) is logging.StreamHandler:
            root.removeHandler(handler)
    root.setLevel(logging.WARNING)


@pytest.fixture(scope='session')
def scene_files(tmp_path_factory):
    """A small synthetic room written to disk; returns the written paths"""
    spec = SynthSpec(edges=3, splats_per_edge=40, filler=150, resolution=16, cameras=2, seed=3)
    return write_scene(generate_scene(spec), str(tmp_path_factory.mktemp('room')))
