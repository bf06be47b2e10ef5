import filecmp
import json
import os

import numpy as np
import pytest

from gaussian_model import load_cameras, load_ply
from image_metrics import read_png
from line_prior import load_lines, project_points
from partition import PartitionConfig, partition
from synth import SynthSpec, box_edges, generate_scene, image_name, room_cameras, write_scene


def test_box_edges():
    edges = box_edges(inset=0.1)
    assert len(edges) == 12
    assert [e.id for e in edges] == list(range(12))
    for e in edges:
        assert e.length == pytest.approx(1.8)
        assert np.sort(np.abs(e.direction)).tolist() == [0.0, 0.0, 1.0]
        assert e.direction.max() == 1.0


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(edges=13)
    with pytest.raises(ValueError):
        SynthSpec(outlier_fraction=1.5)
    with pytest.raises(ValueError):
        SynthSpec(sh_degree=5)


def test_scene_layout(small_room):
    spec = SynthSpec(**small_room.labels['spec'])
    cloud, labels = small_room.cloud, small_room.labels
    assert len(cloud) == spec.edges * spec.splats_per_edge + spec.filler
    assert labels['filler'] == list(range(spec.edges * spec.splats_per_edge, len(cloud)))
    for k, edge in enumerate(labels['edges']):
        assert edge['line_id'] == k
        assert edge['members'] == list(range(k * spec.splats_per_edge, (k + 1) * spec.splats_per_edge))
        assert len(edge['outliers']) == round(spec.outlier_fraction * spec.splats_per_edge)
        assert set(edge['outliers']) <= set(edge['members'])
    assert len(small_room.images) == len(small_room.cameras) == spec.cameras
    assert all((im.width, im.height) == (spec.resolution, spec.resolution) for im in small_room.images)


def test_edge_splats_hug_their_line(small_room):
    spec = SynthSpec(**small_room.labels['spec'])
    for edge, seg in zip(small_room.labels['edges'], small_room.lines):
        _, distance = project_points(small_room.cloud.positions[edge['members']], seg)
        assert distance.max() <= 0.5 * spec.radius + 1e-12


def test_filler_stays_clear_of_lines(small_room):
    spec = SynthSpec(**small_room.labels['spec'])
    filler = small_room.cloud.positions[small_room.labels['filler']]
    for seg in small_room.lines:
        assert project_points(filler, seg)[1].min() > 2 * spec.radius
    np.testing.assert_allclose(np.abs(filler).max(axis=1), 1.0)


def test_images_are_not_blank(small_room):
    assert all(im.pixels.max() > 0.1 for im in small_room.images)


def test_no_outliers_when_fraction_zero():
    scene = generate_scene(SynthSpec(edges=2, splats_per_edge=20, outlier_fraction=0.0, filler=10, cameras=0))
    assert scene.labels['outliers'] == []
    assert scene.images == []


def test_generation_is_deterministic():
    spec = SynthSpec(edges=2, splats_per_edge=15, filler=30, resolution=8, cameras=1, seed=11)
    a, b = generate_scene(spec), generate_scene(spec)
    assert a.cloud.equals(b.cloud)
    assert a.labels == b.labels
    assert a.images[0].equals(b.images[0])
    assert not a.cloud.equals(generate_scene(SynthSpec(**{**spec.to_dict(), 'seed': 12})).cloud)


def test_room_cameras_look_outward():
    cams = room_cameras(4, 16)
    assert len(cams) == 4
    for cam in cams:
        assert np.linalg.norm(cam.center[:2]) == pytest.approx(0.4)
        assert cam.resolution == (16, 16)


@pytest.mark.parametrize('seed', [0, 1, 2, 3, 4])
def test_partition_recovers_planted_outliers(seed):
    # full-size room: 10 edges x 100 splats, 20% attribute outliers
    room = generate_scene(SynthSpec(seed=seed, cameras=0))
    result = partition(room.cloud, room.lines, PartitionConfig())
    patch = set(result.patch_indices)
    outliers = set(room.labels['outliers'])
    clean = {m for e in room.labels['edges'] for m in e['members']} - outliers
    assert len(outliers) == 200
    assert set(room.labels['filler']) <= patch
    assert len(outliers & patch) >= 0.95 * len(outliers)
    assert len(clean - patch) >= 0.95 * len(clean)


def test_written_scene_reloads_and_is_byte_stable(tmp_path):
    spec = SynthSpec(edges=2, splats_per_edge=12, filler=20, resolution=8, cameras=2, seed=5)
    first = write_scene(generate_scene(spec), str(tmp_path / 'a'))
    second = write_scene(generate_scene(spec), str(tmp_path / 'b'))

    for key in ('ply', 'lines', 'cameras', 'labels'):
        assert filecmp.cmp(first[key], second[key], shallow=False)
    for i in range(2):
        name = image_name(i)
        assert filecmp.cmp(os.path.join(first['images'], name), os.path.join(second['images'], name), shallow=False)

    with open(first['ply'], 'rb') as f:
        cloud = load_ply(f.read())
    assert len(cloud) == 2 * 12 + 20
    with open(first['lines']) as f:
        assert len(load_lines(f.read())) == 2
    with open(first['cameras']) as f:
        assert len(load_cameras(f.read())) == 2
    with open(os.path.join(first['images'], image_name(1)), 'rb') as f:
        assert read_png(f.read()).width == 8
    with open(first['labels']) as f:
        assert json.load(f)['spec']['seed'] == 5


def test_filler_that_cannot_fit_raises():
    with pytest.raises(ValueError, match='filler splats'):
        generate_scene(SynthSpec(edges=12, splats_per_edge=4, filler=10, radius=2.0, cameras=0))
