import numpy as np
import pytest

from polyfield import rogsh


def test_identity_orientation_hits_channel_maxima():
    # every channel is normalized by its global maximum, attained at identity
    c = rogsh.euler_to_coeffs(np.zeros(3))
    assert np.allclose(c, 1.0, atol=1e-12)


def test_unnormalized_scaling():
    rng = np.random.default_rng(0)
    e = rng.uniform(0, 2 * np.pi, size=(50, 3))
    raw = rogsh.euler_to_coeffs(e, normalize=False)
    nrm = rogsh.euler_to_coeffs(e, normalize=True)
    assert np.allclose(raw, nrm * rogsh.NORMALIZERS, atol=1e-12)
    assert np.allclose(raw, rogsh.basis_values(e) * [9.0, 9.0, 25.0], atol=1e-14)


def test_range_bound_sampled():
    rng = np.random.default_rng(1)
    for _ in range(20):
        e = rogsh.random_orientations(2000, rng)
        c = rogsh.euler_to_coeffs(e)
        assert np.abs(c).max() <= 1.0 + 1e-9


def test_cubic_rotations_form_a_group():
    mats = rogsh.cubic_rotations()
    assert mats.shape == (24, 3, 3)
    eye = np.eye(3)
    for m in mats:
        assert np.allclose(m @ m.T, eye, atol=1e-14)
        assert np.isclose(np.linalg.det(m), 1.0, atol=1e-14)
    # all distinct
    flat = mats.reshape(24, 9)
    d = np.linalg.norm(flat[:, None] - flat[None, :], axis=-1)
    assert (d + np.eye(24)).min() > 0.5
    # closure: every product is again a member
    for a in mats:
        for b in mats:
            d = np.linalg.norm((a @ b)[None] - mats, axis=(1, 2))
            assert d.min() < 1e-12


def test_cubic_symmetry_invariance_small():
    rng = np.random.default_rng(2)
    e = rogsh.random_orientations(200, rng)
    ref = rogsh.euler_to_coeffs(e)
    g = rogsh.euler_to_matrix(e)
    for r in rogsh.cubic_rotations():
        e2 = rogsh.matrix_to_euler(r @ g)
        got = rogsh.euler_to_coeffs(e2)
        assert np.abs(got - ref).max() < 1e-10


def test_matrix_roundtrip_preserves_basis():
    rng = np.random.default_rng(3)
    e = rng.uniform(0, 2 * np.pi, size=(300, 3))
    e2 = rogsh.matrix_to_euler(rogsh.euler_to_matrix(e))
    assert np.abs(rogsh.basis_values(e2) - rogsh.basis_values(e)).max() < 1e-10


def test_matrix_roundtrip_gimbal_cases():
    # Phi = 0 and Phi = pi collapse phi1/phi2 into a single angle
    for Phi in (0.0, np.pi):
        e = np.array([[0.3, Phi, 1.1], [5.0, Phi, 0.0]])
        g = rogsh.euler_to_matrix(e)
        e2 = rogsh.matrix_to_euler(g)
        g2 = rogsh.euler_to_matrix(e2)
        assert np.abs(g2 - g).max() < 1e-12


def test_euler_to_matrix_is_rotation():
    rng = np.random.default_rng(4)
    e = rng.uniform(0, 2 * np.pi, size=(100, 3))
    g = rogsh.euler_to_matrix(e)
    assert np.allclose(g @ np.swapaxes(g, -1, -2), np.eye(3), atol=1e-13)
    assert np.allclose(np.linalg.det(g), 1.0, atol=1e-13)


def test_random_orientations_cover_haar():
    # Bunge Haar measure: phi1, phi2 uniform on [0, 2pi), cos(Phi) uniform
    rng = np.random.default_rng(5)
    e = rogsh.random_orientations(200_000, rng)
    assert e.shape == (200_000, 3)
    x = np.cos(e[:, 1])
    assert abs(x.mean()) < 0.01
    assert abs(x.var() - 1.0 / 3.0) < 0.01
    assert abs(e[:, 0].mean() - np.pi) < 0.05
    assert abs(e[:, 2].mean() - np.pi) < 0.05


def test_field_conversion_layout():
    rng = np.random.default_rng(6)
    vol = rng.uniform(0, 2 * np.pi, size=(2, 3, 4, 3))
    ch = rogsh.euler_field_to_channels(vol)
    assert ch.shape == (3, 2, 3, 4)
    assert np.allclose(ch[:, 1, 2, 3], rogsh.euler_to_coeffs(vol[1, 2, 3]))
    with pytest.raises(ValueError):
        rogsh.euler_field_to_channels(vol[..., :2])
    with pytest.raises(ValueError):
        rogsh.euler_field_to_channels(vol[0])
