import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import gaussian_filter

from oracles import rotate_pixels_affine
from rotvpr import equivariant as eq
from rotvpr import tensor_core as tc
from rotvpr.dataset import circle_mask

C1, C4, C8 = eq.GroupSpec(1), eq.GroupSpec(4), eq.GroupSpec(8)


def masked_image(rng, c=3, size=17, smooth=0.0):
    x = rng.normal(size=(c, size, size))
    if smooth:
        x = gaussian_filter(x, (0, smooth, smooth))
    return x * circle_mask(size)


# -- group spec -----------------------------------------------------------------

@pytest.mark.parametrize("order", [1, 4, 8])
def test_group_angles(order):
    g = eq.GroupSpec(order)
    a = np.array(g.angles)
    assert len(a) == order and a[0] == 0
    assert np.all(np.diff(a) > 0) and a[-1] < 2 * math.pi
    np.testing.assert_allclose(a, 2 * math.pi * np.arange(order) / order)


def test_group_rejects_unsupported_order():
    with pytest.raises(ValueError):
        eq.GroupSpec(3)


# -- rotate_kernel -----------------------------------------------------------------

@pytest.mark.parametrize("group", [C1, C4, C8])
def test_rotate_kernel_zero_angle(rng, group):
    k = rng.normal(size=(2, 3, 5, 5))
    expected = k * eq.disk_mask(5) if group.order == 8 else k
    np.testing.assert_array_equal(eq.rotate_kernel(k, 0.0, group), expected)


def test_rotate_kernel_quarter_turn_moves_top_to_left():
    k = np.zeros((3, 3))
    k[0, 1] = 1.0
    out = eq.rotate_kernel(k, math.pi / 2, C4)
    expected = np.zeros((3, 3))
    expected[1, 0] = 1.0
    np.testing.assert_array_equal(out, expected)


def test_rotate_kernel_four_quarter_turns_is_identity(rng):
    k = rng.normal(size=(4, 2, 3, 3))
    out = k
    for _ in range(4):
        out = eq.rotate_kernel(out, math.pi / 2, C4)
    np.testing.assert_array_equal(out, k)


def test_rotate_kernel_rejects_non_group_angle(rng):
    with pytest.raises(ValueError):
        eq.rotate_kernel(rng.normal(size=(3, 3)), math.pi / 4, C4)


def test_rotate_kernel_45_matches_affine_oracle(rng):
    k = rng.normal(size=(5, 5)) * eq.disk_mask(5)
    ours = eq.rotate_kernel(k, math.pi / 4, C8)
    oracle = rotate_pixels_affine(k, math.pi / 4) * eq.disk_mask(5)
    np.testing.assert_allclose(ours, oracle, atol=1e-12)


def test_rotate_kernel_45_gaussian_is_nearly_symmetric():
    yy, xx = np.mgrid[-2:3, -2:3]
    g = np.exp(-(yy ** 2 + xx ** 2) / 2.0) * eq.disk_mask(5)
    out = eq.rotate_kernel(g, math.pi / 4, C8)
    # bilinear resampling of a sampled Gaussian: measured error 0.0856
    assert np.abs(out - g).max() < 0.09
    np.testing.assert_allclose(out, out.T, atol=1e-12)  # mirror symmetry survives


def test_rotate_kernel_c8_odd_squared_is_quarter_turn_of_masked(rng):
    k = rng.normal(size=(3, 3)) * eq.disk_mask(3)
    np.testing.assert_array_equal(eq.rotate_kernel(k, math.pi, C8), np.rot90(k, 2))


# -- steerable synthesis ---------------------------------------------------------------

def test_synthesize_single_basis_constant_coefficient(rng):
    basis = rng.normal(size=(1, 2, 3, 3, 3))
    bank = eq.SteerableKernelBank(basis, np.ones((4, 1)), C4)
    for n in range(4):
        np.testing.assert_array_equal(eq.synthesize_steerable(bank, n), basis[0])


def test_synthesize_zero_coefficients(rng):
    bank = eq.SteerableKernelBank(rng.normal(size=(3, 2, 2, 3, 3)), np.zeros((4, 3)), C4)
    assert not eq.synthesize_steerable(bank, 2).any()


def test_synthesize_matches_weighted_sum(rng):
    basis = rng.normal(size=(2, 2, 3, 5, 5))
    coef = rng.normal(size=(8, 2))
    bank = eq.SteerableKernelBank(basis, coef, C8)
    for n in range(8):
        oracle = coef[n, 0] * basis[0] + coef[n, 1] * basis[1]
        np.testing.assert_allclose(eq.synthesize_steerable(bank, n), oracle, atol=1e-12)


def test_synthesize_unit_first_coefficient_returns_first_basis(rng):
    basis = rng.normal(size=(3, 1, 1, 3, 3))
    coef = np.zeros((4, 3))
    coef[0, 0] = 1.0
    np.testing.assert_array_equal(
        eq.synthesize_steerable(eq.SteerableKernelBank(basis, coef, C4), 0), basis[0])


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_synthesize_is_linear(a, b, seed):
    r = np.random.default_rng(seed)
    basis = r.normal(size=(2, 1, 1, 3, 3))
    c1, c2 = r.normal(size=(4, 2)), r.normal(size=(4, 2))
    lhs = eq.synthesize_steerable(eq.SteerableKernelBank(basis, a * c1 + b * c2, C4), 1)
    rhs = (a * eq.synthesize_steerable(eq.SteerableKernelBank(basis, c1, C4), 1)
           + b * eq.synthesize_steerable(eq.SteerableKernelBank(basis, c2, C4), 1))
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_bank_rejects_count_mismatch(rng):
    with pytest.raises(tc.ShapeError):
        eq.SteerableKernelBank(rng.normal(size=(2, 1, 1, 3, 3)), np.ones((4, 3)), C4)


def test_bank_of_rotated_copies_matches_base_kernel_lift(rng):
    k = rng.normal(size=(2, 3, 3, 3))
    x = masked_image(rng)
    bank = eq.SteerableKernelBank.from_rotated_copies(k, C4)
    np.testing.assert_allclose(eq.lift_conv(x, bank, C4, padding=1),
                               eq.lift_conv(x, k, C4, padding=1), atol=1e-12)


# -- lift_conv -----------------------------------------------------------------------

def test_lift_trivial_group_is_plain_conv(rng):
    x, k = rng.normal(size=(3, 9, 9)), rng.normal(size=(4, 3, 3, 3))
    out = eq.lift_conv(x, k, C1, padding=1)
    assert out.shape == (4, 1, 9, 9)
    np.testing.assert_array_equal(out[:, 0], tc.conv2d(x, k, padding=1))


def test_lift_isotropic_kernel_gives_equal_orientations(rng):
    yy, xx = np.mgrid[-1:2, -1:2]
    k = np.exp(-(yy ** 2 + xx ** 2))[None, None]
    out = eq.lift_conv(rng.normal(size=(1, 8, 8)), k, C4, padding=1)
    for n in range(1, 4):
        np.testing.assert_array_equal(out[:, n], out[:, 0])


@pytest.mark.parametrize("group", [C4, C8])
def test_lift_quarter_turn_equivariance(rng, group):
    x = masked_image(rng)
    k = rng.normal(size=(4, 3, 3, 3))
    f = lambda v: eq.lift_conv(v, k, group, padding=1)  # noqa: E731
    step = group.order // 4
    assert eq.check_equivariance(f, x, group, step) < 1e-12


def test_lift_backward_grad_check(rng):
    x = masked_image(rng, c=2, size=7)
    r = rng.normal(size=(3, 8, 7, 7))

    def op(k):
        return float((r * eq.lift_conv(x, k, C8, padding=1)).sum()), \
            eq.lift_conv_backward(r, x, k, C8, padding=1)[1]

    assert tc.grad_check(op, rng.normal(size=(3, 2, 3, 3))) < 1e-6

    k = rng.normal(size=(3, 2, 3, 3))

    def op_x(v):
        return float((r * eq.lift_conv(v, k, C8, padding=1)).sum()), \
            eq.lift_conv_backward(r, v, k, C8, padding=1)[0]

    assert tc.grad_check(op_x, x) < 1e-6


# -- group_conv -----------------------------------------------------------------------

def test_group_conv_trivial_group_is_conv(rng):
    x, k = rng.normal(size=(2, 1, 8, 8)), rng.normal(size=(3, 2, 1, 3, 3))
    np.testing.assert_array_equal(eq.group_conv(x, k, C1, padding=1)[:, 0],
                                  tc.conv2d(x[:, 0], k[:, :, 0], padding=1))


def test_group_conv_delta_kernel_is_identity(rng):
    x = rng.normal(size=(3, 4, 6, 6))
    k = np.zeros((3, 3, 4, 1, 1))
    for c in range(3):
        k[c, c, 0] = 1.0
    np.testing.assert_array_equal(eq.group_conv(x, k, C4), x)


def test_group_conv_rejects_group_mismatch(rng):
    with pytest.raises(ValueError):
        eq.group_conv(rng.normal(size=(2, 4, 5, 5)), rng.normal(size=(2, 2, 8, 3, 3)), C8)


@pytest.mark.parametrize("group", [C4, C8])
def test_group_conv_quarter_turn_equivariance(rng, group):
    x = rng.normal(size=(3, group.order, 11, 11)) * circle_mask(11)
    k = rng.normal(size=(2, 3, group.order, 3, 3))
    s = group.order // 4
    lhs = eq.group_conv(eq.act(x, group, s), k, group, padding=1)
    rhs = eq.act(eq.group_conv(x, k, group, padding=1), group, s)
    assert np.abs(lhs - rhs).max() < 1e-10


def test_group_conv_backward_grad_check(rng):
    x = rng.normal(size=(2, 4, 6, 6))
    k0 = rng.normal(size=(3, 2, 4, 3, 3))
    r = rng.normal(size=(3, 4, 6, 6))
    op_k = lambda k: (float((r * eq.group_conv(x, k, C4, padding=1)).sum()),  # noqa: E731
                      eq.group_conv_backward(r, x, k, C4, padding=1)[1])
    op_x = lambda v: (float((r * eq.group_conv(v, k0, C4, padding=1)).sum()),  # noqa: E731
                      eq.group_conv_backward(r, v, k0, C4, padding=1)[0])
    assert tc.grad_check(op_k, k0) < 1e-4
    assert tc.grad_check(op_x, x) < 1e-4


# -- orientation axis ---------------------------------------------------------------------

def test_cyclic_shift_identities(rng):
    x = rng.normal(size=(2, 4, 3, 3))
    np.testing.assert_array_equal(eq.cyclic_shift(x, 0), x)
    np.testing.assert_array_equal(eq.cyclic_shift(x, 4), x)
    y = x
    for _ in range(4):
        y = eq.cyclic_shift(y, 1)
    np.testing.assert_array_equal(y, x)


def test_cyclic_shift_moves_index_forward():
    x = np.arange(4.0).reshape(1, 4, 1, 1)
    np.testing.assert_array_equal(eq.cyclic_shift(x, 1).ravel(), [3, 0, 1, 2])


def test_orientation_pool_trivial_and_constant(rng):
    x = rng.normal(size=(3, 1, 4, 4))
    for mode in ("max", "mean"):
        np.testing.assert_array_equal(eq.orientation_pool(x, mode), x[:, 0])
    c = np.repeat(rng.normal(size=(3, 1, 4, 4)), 8, axis=1)
    for mode in ("max", "mean"):
        np.testing.assert_allclose(eq.orientation_pool(c, mode), c[:, 0], atol=1e-15)


@given(st.integers(0, 7), st.sampled_from(["max", "mean"]), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_orientation_pool_ignores_shifts(s, mode, seed):
    x = np.random.default_rng(seed).normal(size=(2, 8, 3, 3))
    a, b = eq.orientation_pool(eq.cyclic_shift(x, s), mode), eq.orientation_pool(x, mode)
    if mode == "max":
        np.testing.assert_array_equal(a, b)
    else:
        np.testing.assert_allclose(a, b, atol=1e-15)


@pytest.mark.parametrize("mode", ["max", "mean"])
def test_orientation_pool_backward(rng, mode):
    x = rng.normal(size=(2, 4, 3, 3))
    r = rng.normal(size=(2, 3, 3))
    op = lambda v: (float((r * eq.orientation_pool(v, mode)).sum()),  # noqa: E731
                    eq.orientation_pool_backward(r, v, mode))
    assert tc.grad_check(op, x) < 1e-6


# -- equivariance checks ----------------------------------------------------------------------

def test_c4_stack_exact_for_all_quarter_turns(rng):
    x = masked_image(rng, size=15)
    k1, k2 = rng.normal(size=(4, 3, 3, 3)), rng.normal(size=(2, 4, 4, 3, 3))
    stack = [lambda v: eq.lift_conv(v, k1, C4, padding=1), tc.relu,
             lambda v: eq.group_conv(v, k2, C4, padding=1)]
    for n in range(4):
        assert eq.check_equivariance(stack, x, C4, n) < 1e-9
    pooled = stack + [eq.orientation_pool]
    assert eq.check_equivariance(pooled, x, C4, 1) < 1e-9


def test_trivial_group_quarter_turn_error_is_large(rng):
    x = masked_image(rng, size=15)
    k = rng.normal(size=(4, 3, 3, 3))
    err = eq.check_equivariance(lambda v: eq.lift_conv(v, k, C1, padding=1)[:, 0], x, C1, 0)
    assert err == 0.0
    # rotating the input of a plain conv does not rotate its output
    out, rot = tc.conv2d(x, k, padding=1), tc.conv2d(np.rot90(x, 1, axes=(1, 2)), k, padding=1)
    assert np.abs(rot - np.rot90(out, 1, axes=(1, 2))).max() > 0.1


def _c8_relative_45_error(seed, group):
    r = np.random.default_rng(seed)
    size = 41
    x = gaussian_filter(r.normal(size=(2, size, size)), (0, 2, 2)) * circle_mask(size)
    k1 = r.normal(size=(3, 2, 5, 5))
    k2 = r.normal(size=(2, 3, group.order, 5, 5))
    f = lambda v: eq.group_conv(eq.lift_conv(v, k1, group, padding=2), k2, group, padding=2)  # noqa: E731
    out = f(x)
    rotated = f(eq.rotate_spatial(x, math.pi / 4))
    expected = eq.act(out, group, 1) if group.order == 8 else eq.rotate_spatial(out, math.pi / 4)
    yy, xx = np.mgrid[:size, :size]
    inner = (yy - 20) ** 2 + (xx - 20) ** 2 <= 14 ** 2
    return np.abs(rotated - expected)[..., inner].max() / np.abs(out).max()


def test_c8_45_degree_error_within_calibrated_bound():
    errs = [_c8_relative_45_error(s, C8) for s in range(50)]
    # calibrated on these 50 seeds: mean 0.202, max 0.424
    assert np.mean(errs) < 0.25
    assert max(errs) < 0.5


def test_c8_beats_trivial_group_at_45_degrees():
    c8 = np.mean([_c8_relative_45_error(s, C8) for s in range(10)])
    c1 = np.mean([_c8_relative_45_error(s, C1) for s in range(10)])
    assert c8 < 0.5 * c1


@given(st.floats(0.01, 6.2), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_rotate_spatial_matches_affine_oracle(angle, seed):
    x = np.random.default_rng(seed).normal(size=(2, 9, 12))
    np.testing.assert_allclose(eq.rotate_spatial(x, angle), rotate_pixels_affine(x, angle),
                               atol=1e-12)
