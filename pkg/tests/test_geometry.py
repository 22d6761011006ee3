"""Tests for the rigid-motion-invariant pair encoding.

The central claim — invariance under SE(3) — is checked against random
rotations built from quaternions (an independent construction), plus a
frozen hand-derived oracle for one concrete configuration and exhaustive
coverage of the documented degenerate fallbacks.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poco.errors import ContractViolation
from poco.geometry import GEOM_DIM, geom_encode, geom_encode_pairs, unit_orthogonal


def random_rotation(rng):
    """Uniform random rotation via a normalized quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_unit(rng, shape=()):
    v = rng.normal(size=shape + (3,))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


class TestHandOracle:
    def test_frozen_axis_aligned_case(self):
        # p = origin with normal +z; neighbor at -x with normal +z.
        # r = p - p_k = (1,0,0) = r_hat; |r| = 1.
        # v = normalize(n_k - (n_k.r_hat) r_hat) = (0,0,1); w = r_hat x v = (0,-1,0).
        # [n.n_k, r_hat.n_k, r_hat.n, n.v, n.w, r.n_k, r.(n x n_k), |r|]
        # = [1, 0, 0, 1, 0, 0, 0, 1]
        out = geom_encode([0, 0, 0], [0, 0, 1], [-1, 0, 0], [0, 0, 1])
        np.testing.assert_allclose(out, [1, 0, 0, 1, 0, 0, 0, 1], atol=1e-12)

    def test_frozen_tilted_case(self):
        # p=(0,0,1), n=+x; p_k=(0,0,0), n_k=+z. r=(0,0,1), r_hat=(0,0,1), |r|=1.
        # v = normalize(n_k - 1*(0,0,1)) -> degenerate -> unit_orthogonal((0,0,1)) = (1,0,0)
        # w = r_hat x v = (0,1,0)
        # entries: n.n_k=0, r_hat.n_k=1, r_hat.n=0, n.v=1, n.w=0,
        #          r.n_k=1, r.(n x n_k) with n x n_k = (1,0,0)x(0,0,1) = (0,1,0) -> 0, |r|=1
        out = geom_encode([0, 0, 1], [1, 0, 0], [0, 0, 0], [0, 0, 1])
        np.testing.assert_allclose(out, [0, 1, 0, 1, 0, 1, 0, 1], atol=1e-12)

    def test_distance_entry_scales_with_separation(self):
        a = geom_encode([0, 0, 0], [0, 0, 1], [2, 0, 0], [0, 0, 1])
        b = geom_encode([0, 0, 0], [0, 0, 1], [4, 0, 0], [0, 0, 1])
        np.testing.assert_allclose(a[7], 2.0, atol=1e-12)
        np.testing.assert_allclose(b[7], 4.0, atol=1e-12)


class TestInvariance:
    def test_se3_invariance_dense(self):
        rng = np.random.default_rng(0)
        m, k = 40, 8
        p = rng.normal(size=(m, 3))
        n = random_unit(rng, (m,))
        p_k = rng.normal(size=(m, k, 3))
        n_k = random_unit(rng, (m, k))
        base = geom_encode_pairs(p, n, p_k, n_k)
        for _ in range(20):
            R = random_rotation(rng)
            t = rng.normal(size=3) * 5
            moved = geom_encode_pairs(p @ R.T + t, n @ R.T,
                                      p_k @ R.T + t, n_k @ R.T)
            np.testing.assert_allclose(moved, base, atol=1e-10)

    def test_translation_only(self):
        rng = np.random.default_rng(1)
        p = rng.normal(size=(5, 3))
        n = random_unit(rng, (5,))
        p_k = rng.normal(size=(5, 3, 3))
        n_k = random_unit(rng, (5, 3))
        base = geom_encode_pairs(p, n, p_k, n_k)
        shifted = geom_encode_pairs(p + 100.0, n, p_k + 100.0, n_k)
        np.testing.assert_allclose(shifted, base, atol=1e-10)

    def test_not_invariant_to_reflection(self):
        # a mirror flips handedness; the w / cross-product entries must notice
        rng = np.random.default_rng(2)
        found = False
        for _ in range(20):
            p = rng.normal(size=3)
            n = random_unit(rng)
            pk = rng.normal(size=3)
            nk = random_unit(rng)
            M = np.diag([1.0, 1.0, -1.0])
            base = geom_encode(p, n, pk, nk)
            mirr = geom_encode(M @ p, M @ n, M @ pk, M @ nk)
            if not np.allclose(base, mirr, atol=1e-9):
                found = True
                break
        assert found, "encoding should distinguish mirrored configurations"

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_property_invariance(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.normal(size=3) * 3
        n = random_unit(rng)
        pk = rng.normal(size=3) * 3
        nk = random_unit(rng)
        R = random_rotation(rng)
        t = rng.normal(size=3) * 10
        a = geom_encode(p, n, pk, nk)
        b = geom_encode(R @ p + t, R @ n, R @ pk + t, R @ nk)
        np.testing.assert_allclose(a, b, atol=1e-10)


class TestDegenerate:
    def test_coincident_points(self):
        n = np.array([0.0, 0.0, 1.0])
        nk = np.array([1.0, 0.0, 0.0])
        out = geom_encode([1, 2, 3], n, [1, 2, 3], nk)
        np.testing.assert_allclose(out, [0, 0, 0, 0, 0, 0, 0, 0], atol=1e-12)
        out2 = geom_encode([1, 2, 3], n, [1, 2, 3], n)
        np.testing.assert_allclose(out2, [1, 0, 0, 0, 0, 0, 0, 0], atol=1e-12)

    def test_nearly_coincident_uses_threshold(self):
        n = np.array([0.0, 0.0, 1.0])
        out = geom_encode([0, 0, 0], n, [1e-10, 0, 0], n)
        np.testing.assert_allclose(out[1:], np.zeros(7), atol=1e-12)
        np.testing.assert_allclose(out[0], 1.0, atol=1e-12)

    def test_normal_parallel_to_r_fallback(self):
        # n_k ∥ r_hat → v falls back to axis-priority orthogonal of r_hat
        out = geom_encode([1, 0, 0], [0, 0, 1], [0, 0, 0], [1, 0, 0])
        # r_hat = (1,0,0); unit_orthogonal picks axis y (index 1, |d| min tie: y first)
        # v = (0,1,0); w = r_hat x v = (0,0,1)
        # entries: n.n_k=0, r_hat.n_k=1, r_hat.n=0, n.v=0, n.w=1, r.n_k=1,
        #          n x n_k = (0,0,1)x(1,0,0) = (0,1,0); r.(nxn_k)=0; |r|=1
        np.testing.assert_allclose(out, [0, 1, 0, 0, 1, 1, 0, 1], atol=1e-12)

    def test_antiparallel_normal_fallback(self):
        out = geom_encode([1, 0, 0], [0, 0, 1], [0, 0, 0], [-1, 0, 0])
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out[7], 1.0, atol=1e-12)

    def test_clip_keeps_cosines_in_range(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            p = rng.normal(size=3)
            n = random_unit(rng)
            pk = rng.normal(size=3)
            nk = random_unit(rng)
            out = geom_encode(p, n, pk, nk)
            assert np.all(out[:5] >= -1.0 - 1e-15)
            assert np.all(out[:5] <= 1.0 + 1e-15)


class TestValidation:
    def test_non_unit_normals_rejected(self):
        with pytest.raises(ContractViolation):
            geom_encode([0, 0, 0], [0, 0, 2.0], [1, 0, 0], [0, 0, 1])
        with pytest.raises(ContractViolation):
            geom_encode([0, 0, 0], [0, 0, 1], [1, 0, 0], [0.5, 0, 0])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            geom_encode_pairs(np.zeros((3, 3)), np.zeros((4, 3)),
                              np.zeros((3, 2, 3)), np.zeros((3, 2, 3)))
        with pytest.raises(ContractViolation):
            geom_encode_pairs(np.zeros((3, 2)), np.zeros((3, 2)),
                              np.zeros((3, 2, 2)), np.zeros((3, 2, 2)))

    def test_batched_matches_single(self):
        rng = np.random.default_rng(4)
        m, k = 6, 5
        p = rng.normal(size=(m, 3))
        n = random_unit(rng, (m,))
        p_k = rng.normal(size=(m, k, 3))
        n_k = random_unit(rng, (m, k))
        dense = geom_encode_pairs(p, n, p_k, n_k)
        for i in range(m):
            for j in range(k):
                single = geom_encode(p[i], n[i], p_k[i, j], n_k[i, j])
                np.testing.assert_allclose(dense[i, j], single, atol=1e-12)

    def test_geom_dim_constant(self):
        assert GEOM_DIM == 8
        out = geom_encode([0, 0, 0], [0, 0, 1], [1, 0, 0], [0, 0, 1])
        assert out.shape == (GEOM_DIM,)


class TestUnitOrthogonal:
    def test_orthogonal_and_unit(self):
        rng = np.random.default_rng(5)
        d = random_unit(rng, (100,))
        o = unit_orthogonal(d)
        np.testing.assert_allclose(np.linalg.norm(o, axis=-1), np.ones(100), atol=1e-12)
        np.testing.assert_allclose((o * d).sum(axis=-1), np.zeros(100), atol=1e-12)

    def test_axis_priority_deterministic(self):
        # for +z the least-aligned axis is x (tie between x and y broken to x)
        np.testing.assert_allclose(unit_orthogonal(np.array([0.0, 0.0, 1.0])),
                                   [1.0, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(unit_orthogonal(np.array([1.0, 0.0, 0.0])),
                                   [0.0, 1.0, 0.0], atol=1e-12)
