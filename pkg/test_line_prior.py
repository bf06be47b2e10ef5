import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from errors import GeometryError, LineFileError
from gaussian_model import GaussianCloud
from line_prior import (ExtractionConfig, LineSegment3D, convert_obj_lines, extract_lines_from_points,
                        filter_short_segments, load_lines, project_points, project_to_segment, save_lines,
                        select_longest)


def segment(seg_id, a, b):
    return LineSegment3D(seg_id, a, b)


def test_projection_interior_and_clamped():
    seg = segment(0, (0, 0, 0), (2, 0, 0))
    inside = project_to_segment((0.5, 1.0, 0.0), seg)
    assert inside.t == pytest.approx(0.25)
    assert inside.distance == pytest.approx(1.0)

    beyond = project_to_segment((3.0, 0.0, 4.0), seg)
    assert beyond.t == 1.0
    assert beyond.distance == pytest.approx(np.hypot(1.0, 4.0))

    before = project_to_segment((-1.0, 0.0, 0.0), seg)
    assert before.t == 0.0
    assert before.distance == pytest.approx(1.0)


def test_vectorised_projection_matches_scalar(rng):
    seg = segment(1, (0.1, -0.2, 0.3), (1.0, 0.5, -0.4))
    points = rng.normal(size=(25, 3))
    t, distance = project_points(points, seg)
    for p, ti, di in zip(points, t, distance):
        single = project_to_segment(p, seg)
        assert single.t == pytest.approx(ti)
        assert single.distance == pytest.approx(di)


def test_segment_rejects_zero_length():
    with pytest.raises(GeometryError):
        segment(0, (1, 1, 1), (1, 1, 1))


def test_load_lines_with_comments():
    text = "# header\n3 0 0 0 1 0 0\n\n5 0 0 0 0 2 0  # trailing\n"
    lines = load_lines(text)
    assert [seg.id for seg in lines] == [3, 5]
    assert lines[1].length == pytest.approx(2.0)
    assert load_lines(text.encode())[0].id == 3


@pytest.mark.parametrize('text, line_number', [
    ("1 0 0 0 1 0\n", 1),
    ("1 0 0 0 1 0 0\n2 0 0 0 x 0 0\n", 2),
    ("# c\n1 0 0 0 0 0 0\n", 2),
])
def test_load_lines_errors_name_the_line(text, line_number):
    with pytest.raises(LineFileError) as info:
        load_lines(text)
    assert info.value.line_number == line_number


def test_save_lines_is_exact():
    lines = [segment(0, (0.1, 0.2, 0.3), (1 / 3, 2 / 3, 1.0)), segment(9, (-1e-7, 5, 6), (7, 8, 9))]
    again = load_lines(save_lines(lines))
    for a, b in zip(lines, again):
        assert a.id == b.id
        np.testing.assert_array_equal(a.p_start, b.p_start)
        np.testing.assert_array_equal(a.p_end, b.p_end)


def test_convert_obj_polyline():
    text = "# lines\nv 0 0 0\nv 1 0 0\nv 1 1 0\nl 1 2 3\nl 3 1\n"
    lines = convert_obj_lines(text)
    assert [seg.id for seg in lines] == [0, 1, 2]
    np.testing.assert_array_equal(lines[1].p_start, [1, 0, 0])
    np.testing.assert_array_equal(lines[1].p_end, [1, 1, 0])
    assert lines[2].length == pytest.approx(np.sqrt(2))


def test_convert_obj_bad_index():
    with pytest.raises(LineFileError) as info:
        convert_obj_lines("v 0 0 0\nl 1 4\n")
    assert info.value.line_number == 2


def test_select_longest_keeps_file_order():
    lines = [segment(i, (0, 0, 0), (length, 0, 0)) for i, length in enumerate([1.0, 3.0, 2.0, 4.0])]
    assert [seg.id for seg in select_longest(lines, 0.5)] == [1, 3]
    assert [seg.id for seg in select_longest(lines, 0.25)] == [3]
    assert [seg.id for seg in select_longest(lines, 1.0)] == [0, 1, 2, 3]
    assert len(select_longest(lines, 0.3)) == 2
    with pytest.raises(ValueError):
        select_longest(lines, 0.0)


def test_filter_short_segments():
    lines = [segment(0, (0, 0, 0), (1e-9, 0, 0)), segment(1, (0, 0, 0), (1, 0, 0))]
    assert [seg.id for seg in filter_short_segments(lines, 10.0)] == [1]


def test_extract_two_lines_from_points(rng):
    t = rng.uniform(0, 1, 100)
    first = np.stack([t, np.zeros(100), np.zeros(100)], axis=1)
    second = np.stack([np.full(100, 2.0), rng.uniform(0, 1, 100), np.ones(100)], axis=1)
    noise = rng.uniform(-1, 3, (50, 3))
    positions = np.concatenate([first, second, noise])
    n = len(positions)
    cloud = GaussianCloud(positions, np.zeros((n, 3)), np.tile([1.0, 0, 0, 0], (n, 1)), np.zeros(n),
                          np.zeros((n, 3)), sh_degree=0)

    lines = extract_lines_from_points(cloud, ExtractionConfig(min_inliers=20, seed=1))

    assert len(lines) == 2
    axes = sorted(int(np.argmax(np.abs(seg.direction))) for seg in lines)
    assert axes == [0, 1]
    for seg in lines:
        assert np.max(np.abs(seg.direction)) > 0.999
        assert 0.8 < seg.length < 1.05


def centers_cloud(positions):
    n = len(positions)
    return GaussianCloud(positions, np.zeros((n, 3)), np.tile([1.0, 0, 0, 0], (n, 1)), np.zeros(n),
                         np.zeros((n, 3)), sh_degree=0)


def same_segment(a, b, atol):
    """Equal up to the order of the endpoints"""
    forward = np.allclose(a.p_start, b.p_start, atol=atol) and np.allclose(a.p_end, b.p_end, atol=atol)
    backward = np.allclose(a.p_start, b.p_end, atol=atol) and np.allclose(a.p_end, b.p_start, atol=atol)
    return forward or backward


def test_extracted_segment_matches_noisy_support(rng):
    start, end = np.array([0.1, -0.2, 0.3]), np.array([0.1, -0.2, 0.3]) + np.array([2.0, 1.0, -2.0]) / 3.0
    sigma = 0.002
    t = rng.uniform(0, 1, 4000)
    positions = start + t[:, None] * (end - start) + rng.normal(0, sigma, (4000, 3))

    lines = extract_lines_from_points(centers_cloud(positions), ExtractionConfig(inlier_radius=0.01, seed=2))

    assert len(lines) == 1
    seg = lines[0]
    assert same_segment(seg, LineSegment3D(0, start, end), atol=2 * sigma)
    cos = abs(seg.direction @ (end - start)) / np.linalg.norm(end - start)
    assert np.degrees(np.arccos(min(cos, 1.0))) <= 2.0


def test_extraction_follows_rigid_motion(rng):
    t = rng.uniform(0, 1, 150)
    first = np.stack([t, np.zeros(150), np.zeros(150)], axis=1) + rng.normal(0, 0.002, (150, 3))
    second = np.stack([np.full(150, 2.0), t, np.ones(150)], axis=1) + rng.normal(0, 0.002, (150, 3))
    positions = np.concatenate([first, second, rng.uniform(-1, 3, (40, 3))])
    matrix = Rotation.from_rotvec([0.3, -1.1, 0.7]).as_matrix()
    shift = np.array([-4.0, 0.5, 2.5])
    cfg = ExtractionConfig(min_inliers=30, seed=3)

    before = extract_lines_from_points(centers_cloud(positions), cfg)
    after = extract_lines_from_points(centers_cloud(positions @ matrix.T + shift), cfg)

    assert len(before) == len(after) == 2
    for a, b in zip(before, after):
        moved = LineSegment3D(a.id, matrix @ a.p_start + shift, matrix @ a.p_end + shift)
        assert same_segment(moved, b, atol=1e-6)
