import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from logoret.descriptor import (
    AffineHead,
    WhitenTransform,
    apply_affine,
    apply_whitening,
    avg_pool_global,
    featurize,
    fit_whitening,
    l2_normalize,
    max_pool_global,
    read_desc,
    read_fmap,
    read_whitening,
    rmac_pool,
    rmac_regions,
    write_desc,
    write_fmap,
    write_whitening,
)
from logoret.errors import (
    DegenerateCovariance,
    DimensionMismatch,
    FormatError,
    InsufficientData,
    ZeroVector,
)


def fmap(width, height, values):
    return np.asarray(values, dtype=float).reshape(height, width, -1)


class TestPooling:
    def test_max_identity(self):
        assert max_pool_global(fmap(1, 1, [2, -1, 0])).tolist() == [2, -1, 0]

    def test_max_of_cells(self):
        assert max_pool_global(fmap(2, 2, [1, 5, 3, 2])).tolist() == [5]

    def test_max_per_channel(self):
        assert max_pool_global(fmap(2, 1, [1, 9, 4, 0])).tolist() == [4, 9]

    def test_avg(self):
        assert avg_pool_global(fmap(1, 1, [3, 4])).tolist() == [3, 4]
        assert avg_pool_global(fmap(2, 2, [1, 5, 3, 2])).tolist() == [2.75]
        assert avg_pool_global(np.zeros((3, 2, 4))).tolist() == [0.0] * 4

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5)),
                  elements=st.floats(-1e6, 1e6)))
    def test_max_dominates_and_is_attained(self, fm):
        m = max_pool_global(fm)
        assert np.all(m >= fm)
        assert np.all(np.any(fm == m, axis=(0, 1)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_channel_permutation_commutes(self, seed):
        r = np.random.default_rng(seed)
        fm = r.standard_normal((3, 4, 6))
        perm = r.permutation(6)
        np.testing.assert_array_equal(max_pool_global(fm[..., perm]), max_pool_global(fm)[perm])

    def test_rejects_bad_shapes(self):
        with pytest.raises(DimensionMismatch):
            max_pool_global(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            max_pool_global(np.full((1, 1, 1), np.nan))


class TestRmac:
    def test_square_level_one_is_full_map(self, rng):
        fm = rng.standard_normal((5, 5, 7))
        assert rmac_regions(5, 5, 1) == [(0, 0, 5)]
        np.testing.assert_allclose(rmac_pool(fm, 1), l2_normalize(max_pool_global(fm)), atol=1e-15)

    def test_three_four_five(self):
        np.testing.assert_allclose(rmac_pool(fmap(1, 1, [3, 4]), 1), [0.6, 0.8])

    def test_4x4_layout(self):
        # level 1: whole map; level 2: side floor(8/3)=2 on a 2x2 grid (quadrants)
        assert rmac_regions(4, 4, 2) == [(0, 0, 4), (0, 0, 2), (0, 2, 2), (2, 0, 2), (2, 2, 2)]

    def test_rectangular_layout_overlap(self):
        # 6 wide, 4 high: steps along x chosen for ~40% overlap
        regions = rmac_regions(4, 6, 1)
        assert [r[2] for r in regions] == [4, 4]
        assert [r[1] for r in regions] == [0, 2]
        for y0, x0, side in rmac_regions(7, 13, 3):
            assert 0 <= y0 and y0 + side <= 7 and 0 <= x0 and x0 + side <= 13

    def test_matches_bruteforce(self, rng):
        fm = rng.standard_normal((4, 4, 8))
        regions = [(0, 0, 4), (0, 0, 2), (0, 2, 2), (2, 0, 2), (2, 2, 2)]
        expected = oracles.rmac(fm.tolist(), regions)
        np.testing.assert_allclose(rmac_pool(fm, 2), expected, atol=1e-12)

    def test_zero_map(self):
        with pytest.raises(ZeroVector):
            rmac_pool(np.zeros((2, 2, 3)), 2)


class TestNormalizeAndAffine:
    def test_l2(self):
        np.testing.assert_allclose(l2_normalize([3, 4]), [0.6, 0.8])
        assert l2_normalize([0, 1, 0]).tolist() == [0, 1, 0]
        with pytest.raises(ZeroVector):
            l2_normalize([0, 0])

    def test_affine_identity_and_hand_case(self):
        v = np.array([0.3, -2.0])
        np.testing.assert_array_equal(apply_affine(AffineHead.identity(2), v), v)
        head = AffineHead([[2, 0], [0, 3]], [1, 1])
        assert apply_affine(head, [1, 1]).tolist() == [3, 4]

    def test_affine_matches_loops(self, rng):
        w, b, v = rng.standard_normal((5, 7)), rng.standard_normal(5), rng.standard_normal(7)
        expected = oracles.matvec(w.tolist(), v.tolist(), b.tolist())
        np.testing.assert_allclose(apply_affine(AffineHead(w, b), v), expected, atol=1e-12)

    def test_affine_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            apply_affine(AffineHead.identity(3), [1.0, 2.0])

    def test_head_shape_checks(self):
        with pytest.raises(DimensionMismatch):
            AffineHead(np.eye(3), np.zeros(2))


class TestFeaturize:
    def test_identity_head(self):
        out = featurize(fmap(1, 1, [3, 4]), AffineHead.identity(2))
        np.testing.assert_allclose(out, [0.6, 0.8])

    @pytest.mark.parametrize("pooling", ["max", "avg", "rmac"])
    def test_unit_norm_and_composition(self, rng, pooling):
        fm = rng.standard_normal((3, 3, 6))
        head = AffineHead(rng.standard_normal((4, 6)), rng.standard_normal(4))
        out = featurize(fm, head, pooling)
        assert abs(np.linalg.norm(out) - 1) < 1e-12
        if pooling == "max":
            pooled = oracles.normalize(oracles.region_max(fm.tolist(), 0, 0, 3))
            expected = oracles.normalize(oracles.matvec(head.weights.tolist(), pooled, head.bias.tolist()))
            np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionMismatch):
            featurize(rng.standard_normal((2, 2, 5)), AffineHead.identity(4))


class TestWhitening:
    def test_closed_form_2d(self):
        samples = [(1, 0), (-1, 0), (0, 2), (0, -2)]
        t = fit_whitening(samples, eps=1e-14)
        # covariance diag(2/3, 8/3): leading direction is y with eigenvalue 8/3
        np.testing.assert_allclose(np.abs(t.projection), [[0, 1 / np.sqrt(8 / 3)], [1 / np.sqrt(2 / 3), 0]], atol=1e-7)
        out = apply_whitening(t, np.asarray(samples, float))
        np.testing.assert_allclose(np.cov(out, rowvar=False), np.eye(2), atol=1e-6)

    def test_degenerate(self):
        with pytest.raises(DegenerateCovariance):
            fit_whitening([[1.0, 2.0]] * 5)
        with pytest.raises(InsufficientData):
            fit_whitening([[1.0, 2.0]])

    def test_already_white_set_gives_rotation(self):
        # +-a on each axis: n = 2d samples, variance 2a^2 / (n - 1) = 1
        d = 3
        a = np.sqrt((2 * d - 1) / 2)
        pts = []
        for k in range(d):
            e = np.zeros(d)
            e[k] = a
            pts += [e, -e]
        pts = np.array(pts)
        np.testing.assert_allclose(np.cov(pts, rowvar=False), np.eye(d), atol=1e-12)
        t = fit_whitening(pts)
        np.testing.assert_allclose(t.projection @ t.projection.T, np.eye(d), atol=1e-8)
        np.testing.assert_allclose(np.cov(apply_whitening(t, pts), rowvar=False), np.eye(d), atol=1e-8)

    def test_apply_trivial_cases(self, rng):
        t = fit_whitening(rng.standard_normal((20, 4)))
        np.testing.assert_allclose(apply_whitening(t, t.mean), np.zeros(4), atol=1e-15)
        ident = WhitenTransform(np.zeros(3), np.eye(3))
        v = rng.standard_normal(3)
        np.testing.assert_array_equal(apply_whitening(ident, v), v)
        with pytest.raises(DimensionMismatch):
            apply_whitening(ident, np.zeros(4))

    def test_apply_matches_loops(self, rng):
        t = WhitenTransform(rng.standard_normal(5), rng.standard_normal((3, 5)))
        v = rng.standard_normal(5)
        expected = oracles.matvec(t.projection.tolist(), (v - t.mean).tolist())
        np.testing.assert_allclose(apply_whitening(t, v), expected, atol=1e-12)

    def test_fitted_covariance_is_identity(self, rng):
        a = rng.standard_normal((6, 6))
        x = rng.standard_normal((300, 6)) @ a
        t = fit_whitening(x)
        out = apply_whitening(t, x)
        assert np.max(np.abs(np.cov(out, rowvar=False) - np.eye(6))) < 1e-6


class TestFiles:
    def test_fmap_roundtrip(self, tmp_path, rng):
        fm = rng.standard_normal((3, 5, 2)).astype(np.float32).astype(float)
        write_fmap(tmp_path / "a.fmap", fm)
        raw = (tmp_path / "a.fmap").read_bytes()
        assert raw[:4] == b"FMAP" and int.from_bytes(raw[6:10], "little") == 5
        np.testing.assert_array_equal(read_fmap(tmp_path / "a.fmap"), fm)

    def test_desc_roundtrip_and_bad_magic(self, tmp_path):
        write_desc(tmp_path / "a.desc", [0.6, 0.8])
        np.testing.assert_allclose(read_desc(tmp_path / "a.desc"), [0.6, 0.8], atol=1e-7)
        (tmp_path / "b.desc").write_bytes(b"XXXX" + (tmp_path / "a.desc").read_bytes()[4:])
        with pytest.raises(FormatError):
            read_desc(tmp_path / "b.desc")
        (tmp_path / "c.desc").write_bytes((tmp_path / "a.desc").read_bytes()[:-2])
        with pytest.raises(FormatError):
            read_desc(tmp_path / "c.desc")

    def test_whitening_roundtrip(self, tmp_path, rng):
        t = fit_whitening(rng.standard_normal((30, 4)))
        write_whitening(tmp_path / "w.whtn", t)
        back = read_whitening(tmp_path / "w.whtn")
        np.testing.assert_array_equal(back.projection, t.projection)
        np.testing.assert_array_equal(back.mean, t.mean)
