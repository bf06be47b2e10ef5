import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_line_scene
from errors import CodecError
from line_prior import project_points
from partition import SketchGroup
from sketch_codec import (PolyModel, SketchLineBlock, align_quaternion_signs, block_nbytes, decode_group,
                          dequantize_t, encode_group, fit_poly, quantize_t, select_degree)


def line_group(n=60):
    cloud, seg = make_line_scene(n_line=n)
    group = SketchGroup(seg.id, list(range(n)), cloud.positions[:n, 0].tolist())
    return cloud, group, seg


def test_t_quantization_endpoints():
    np.testing.assert_array_equal(quantize_t([0.0, 1.0, -0.5, 1.5, 0.5]), [0, 65535, 0, 65535, 32768])
    assert dequantize_t(quantize_t([1.0]))[0] == 1.0


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 1.0))
def test_t_quantization_error_bound(t):
    assert abs(dequantize_t(quantize_t([t]))[0] - t) <= 0.5 / 65535 + 1e-15


def test_fit_poly_recovers_exact_polynomial():
    t = np.linspace(0, 1, 20)
    values = np.stack([1 + 2 * t - t ** 3, -0.5 * t], axis=1)
    model = fit_poly(t, values, 3)
    np.testing.assert_allclose(model.coeffs, [[1, 0], [2, -0.5], [0, 0], [-1, 0]], atol=1e-10)
    np.testing.assert_allclose(model.evaluate(t), values, atol=1e-12)
    assert model.k == 2


def test_fit_poly_rejects_empty():
    with pytest.raises(CodecError):
        fit_poly([], [], 2)


@pytest.mark.parametrize('n', [8, 30])
def test_select_degree_picks_true_degree(n):
    t = np.linspace(0, 1, n)
    assert select_degree(t, 3 - t) == 1
    assert select_degree(t, (1 + t - 2 * t ** 2)[:, None]) == 2


def test_select_degree_with_two_points():
    assert select_degree([0.0, 1.0], [[1.0], [2.0]]) == 1


def test_select_degree_noisy_data_stays_low(rng):
    t = np.linspace(0, 1, 100)
    values = (0.5 + t + rng.normal(0, 0.01, 100))[:, None]
    assert select_degree(t, values) <= 3


def test_align_quaternion_signs():
    q = np.array([[1.0, 0, 0, 0], [-0.99, -0.1, 0, 0], [0.98, 0.2, 0, 0]])
    aligned = align_quaternion_signs(q)
    assert np.all(aligned[:, 0] > 0)
    np.testing.assert_array_equal(q[1], [-0.99, -0.1, 0, 0])


def test_align_ignores_stray_members():
    angle = np.linspace(0.0, 0.6, 12)
    q = np.stack([np.cos(angle), np.sin(angle), 0.1 * angle, np.zeros(12)], axis=1)
    q[1::2] *= -1
    q[5] = [0.001, 0.004, -0.003, 0.002]
    q[8] = [0.0, 0.0, 0.0, -1.0]
    aligned = align_quaternion_signs(q)
    kept = [i for i in range(12) if i not in (5, 8)]
    assert np.all(aligned[kept] @ aligned[0] > 0)
    np.testing.assert_array_equal(np.abs(aligned), np.abs(q))



def test_encode_decode_line_group():
    cloud, group, seg = line_group()
    block = encode_group(cloud, group, seg, min_group_size=8)
    assert block.count == 60
    assert block.line_id == seg.id

    decoded = decode_group(block, cloud.sh_degree)
    assert len(decoded) == 60
    _, distance = project_points(decoded.positions, seg)
    assert distance.max() <= 1e-6 * seg.length

    np.testing.assert_allclose(decoded.opacity_logits, cloud.opacity_logits[:60], atol=1e-4)
    np.testing.assert_allclose(decoded.sh_dc, cloud.sh_dc[:60], atol=1e-4)
    np.testing.assert_allclose(decoded.log_scales, cloud.log_scales[:60], atol=1e-4)
    expected_rot = cloud.rotations[:60] / np.linalg.norm(cloud.rotations[:60], axis=1, keepdims=True)
    np.testing.assert_allclose(decoded.rotations, expected_rot, atol=1e-4)
    np.testing.assert_allclose(np.linalg.norm(decoded.rotations, axis=1), 1.0, atol=1e-12)
    assert not decoded.sh_rest.any()


def test_coefficients_are_binary32():
    cloud, group, seg = line_group()
    block = encode_group(cloud, group, seg)
    for model in block.models:
        np.testing.assert_array_equal(model.coeffs, model.coeffs.astype(np.float32).astype(np.float64))


def test_encode_rejects_small_group():
    cloud, group, seg = line_group()
    small = SketchGroup(seg.id, group.member_indices[:3], group.member_t[:3])
    with pytest.raises(CodecError):
        encode_group(cloud, small, seg, min_group_size=8)


def test_block_size_formula():
    cloud, group, seg = line_group()
    block = encode_group(cloud, group, seg)
    expected = 4 + 24 + 4 + 2 * 60 + sum(2 + 4 * (m.degree + 1) * m.k for m in block.models)
    assert block_nbytes(block) == expected


def constant_block(rotation):
    return SketchLineBlock(
        line_id=1, p_start=(0, 0, 0), p_end=(0, 0, 2), t_q=[0, 32768, 65535],
        opacity_model=PolyModel(0, [[0.5]]),
        color_model=PolyModel(0, [[0.1, 0.2, 0.3]]),
        scale_model=PolyModel(1, [[-3.0, -3.0, -3.0], [1.0, 0.0, 0.0]]),
        rotation_model=PolyModel(0, [rotation]),
    )


def test_decode_zero_norm_rotation_becomes_identity():
    decoded = decode_group(constant_block([0.0, 0.0, 0.0, 0.0]), sh_degree=1)
    np.testing.assert_array_equal(decoded.rotations, np.tile([1.0, 0, 0, 0], (3, 1)))
    assert decoded.sh_rest.shape == (3, 9)


def test_decode_positions_and_models():
    decoded = decode_group(constant_block([0.0, 0.0, 0.0, 2.0]), sh_degree=0)
    np.testing.assert_allclose(decoded.positions[:, 2], [0.0, 2 * 32768 / 65535, 2.0])
    np.testing.assert_allclose(decoded.log_scales[2], [-2.0, -3.0, -3.0])
    np.testing.assert_array_equal(decoded.rotations[0], [0.0, 0.0, 0.0, 1.0])


def test_block_validate_rejects_wrong_width():
    block = constant_block([1.0, 0, 0, 0])
    block.color_model = PolyModel(0, [[0.1, 0.2]])
    with pytest.raises(CodecError, match='color'):
        block.validate()


def test_block_equality():
    cloud, group, seg = line_group()
    a = encode_group(cloud, group, seg)
    b = encode_group(cloud, group, seg)
    assert a.equals(b)
    b.t_q[0] += 1
    assert not a.equals(b)
