import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from matplotlib.colors import rgb_to_hsv

from pff import analysis as an
from pff.flow import FilterFlow, FlowField, identity_flow, normalize_simplex, shift_flow
from pff.image import quantize


def bank(seed, n=60, k=3, clusters=None):
    rng = np.random.default_rng(seed)
    if clusters:
        centres = rng.normal(0, 3, (clusters, k * k))
        return an.FilterBank(centres[rng.integers(clusters, size=n)] + rng.normal(0, 0.3, (n, k * k)))
    return an.FilterBank(rng.normal(size=(n, k * k)))


class TestFilterBank:
    def test_from_flows(self):
        f = normalize_simplex(np.random.default_rng(0).normal(size=(4, 5, 9)))
        b = an.FilterBank.from_flows([f, identity_flow(2, 2, 3)])
        assert b.n == 24 and b.k == 3
        np.testing.assert_array_equal(b.vectors[:20], f.coeffs.reshape(20, 9))

    def test_reservoir(self):
        f = normalize_simplex(np.random.default_rng(0).normal(size=(10, 10, 9)))
        a = an.FilterBank.from_flows([f], max_filters=30, seed=1)
        b = an.FilterBank.from_flows([f], max_filters=30, seed=1)
        assert a.n == 30 and np.array_equal(a.vectors, b.vectors)
        rows = {r.tobytes() for r in f.coeffs.reshape(-1, 9)}
        assert all(v.tobytes() in rows for v in a.vectors)
        assert len({v.tobytes() for v in a.vectors}) == 30

    def test_invalid(self):
        with pytest.raises(ValueError):
            an.FilterBank(np.zeros((0, 9)))
        with pytest.raises(ValueError):
            an.FilterBank(np.full((2, 9), np.nan))
        with pytest.raises(ValueError):
            an.FilterBank.from_flows([identity_flow(2, 2, 3), identity_flow(2, 2, 5)])


class TestKMeans:
    @pytest.mark.parametrize("seed", range(20))
    def test_inertia_monotone(self, seed):
        km = an.kmeans_filters(bank(seed, n=80, clusters=5), 6, seed=seed)
        h = np.array(km.history)
        assert np.all(np.diff(h) <= 1e-9 * max(1.0, h[0]))
        assert km.inertia == pytest.approx(h[-1])

    def test_single_cluster_is_mean(self):
        b = bank(1)
        km = an.kmeans_filters(b, 1)
        np.testing.assert_allclose(km.centroids[0], b.vectors.mean(0), atol=1e-12)
        centred = b.vectors - b.vectors.mean(0)
        assert km.inertia == pytest.approx((centred**2).sum())

    def test_two_separated_points(self):
        x = np.array([[0.0] * 9] * 3 + [[5.0] * 9] * 3)
        km = an.kmeans_filters(an.FilterBank(x), 2, seed=3)
        assert km.inertia == 0
        assert len(set(km.assignments[:3])) == 1 and km.assignments[0] != km.assignments[3]

    def test_deterministic(self):
        a = an.kmeans_filters(bank(2), 5, seed=4)
        b = an.kmeans_filters(bank(2), 5, seed=4)
        assert np.array_equal(a.centroids, b.centroids) and np.array_equal(a.assignments, b.assignments)

    def test_duplicates_fill_every_cluster(self):
        x = np.repeat(np.eye(9)[:4] * 3.0, [7, 1, 1, 1], axis=0)
        for seed in range(10):
            km = an.kmeans_filters(an.FilterBank(x), 4, seed=seed)
            assert set(km.assignments) == {0, 1, 2, 3} and km.inertia == 0

    def test_too_many_clusters(self):
        with pytest.raises(ValueError):
            an.kmeans_filters(bank(0, n=5), 6)

    def test_ties_lowest_index(self):
        c = np.array([[1.0] + [0] * 8, [-1.0] + [0] * 8])
        assert an.assign_nearest(np.zeros((1, 9)), c)[0] == 0


class TestPca:
    @pytest.mark.parametrize("seed", range(5))
    def test_orthonormal_and_reconstruct(self, seed):
        b = bank(seed, n=50, k=5)
        pca = an.pca_filters(b, 25)
        np.testing.assert_allclose(pca.components @ pca.components.T, np.eye(25), atol=1e-6)
        rec = pca.reconstruct(pca.project(b.vectors))
        assert np.max(np.abs(rec - b.vectors)) <= 1e-5
        e = pca.energy
        assert np.all(np.diff(e) <= 1e-12) and np.all((e >= 0) & (e <= 1)) and e.sum() <= 1 + 1e-6

    def test_energy_matches_projected_variance(self):
        b = bank(3, n=40)
        pca = an.pca_filters(b, 4)
        proj = pca.project(b.vectors)
        np.testing.assert_allclose(proj.var(axis=0), pca.variances, atol=1e-6)

    def test_planar_bank(self):
        rng = np.random.default_rng(0)
        basis = np.linalg.qr(rng.normal(size=(9, 2)))[0].T
        x = 0.3 + rng.normal(size=(30, 2)) @ basis
        pca = an.pca_filters(an.FilterBank(x), 3)
        assert pca.energy[:2].sum() == pytest.approx(1.0, abs=1e-6)

    def test_permutation_and_offset_invariance(self):
        b = bank(4)
        pca = an.pca_filters(b, 5)
        perm = an.pca_filters(an.FilterBank(b.vectors[::-1]), 5)
        shifted = an.pca_filters(an.FilterBank(b.vectors + 2.5), 5)
        np.testing.assert_allclose(perm.energy, pca.energy, atol=1e-12)
        np.testing.assert_allclose(shifted.energy, pca.energy, atol=1e-9)
        np.testing.assert_allclose(np.abs(shifted.components @ pca.components.T), np.eye(5), atol=1e-6)

    def test_degenerate(self):
        pca = an.pca_filters(an.FilterBank(np.ones((1, 9))), 1)
        assert pca.degenerate and pca.energy[0] == 0
        flat = an.pca_filters(an.FilterBank(np.ones((5, 9))), 2)
        assert flat.degenerate and np.all(flat.energy == 0)

    def test_bad_d(self):
        with pytest.raises(ValueError):
            an.pca_filters(bank(0), 10)


class TestColor:
    def test_zero_field_white(self):
        img = an.colorize_flow(FlowField(np.zeros((3, 4)), np.zeros((3, 4)), 2))
        np.testing.assert_allclose(img, 1.0)

    def test_constant_field_single_hue(self):
        img = an.colorize_flow(FlowField(np.full((3, 3), 2.0), np.zeros((3, 3)), 2))
        assert np.all(img == img[:, :1, :1])
        hsv = rgb_to_hsv(img[:, 0, 0])
        assert hsv[1] == pytest.approx(1.0) and hsv[2] == pytest.approx(1.0)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3))
    def test_opposite_hue(self, vx, vy):
        if np.hypot(vx, vy) < 1e-3:
            return
        a = rgb_to_hsv(an.color_wheel(np.array(vx), np.array(vy), 3.0))
        b = rgb_to_hsv(an.color_wheel(np.array(-vx), np.array(-vy), 3.0))
        d = abs(a[0] - b[0])
        assert min(d, 1 - d) == pytest.approx(0.5, abs=1e-9)

    def test_distinct_vectors_distinct_colors(self):
        ang = np.linspace(0, 2 * np.pi, 24, endpoint=False)
        vx = np.concatenate([np.cos(ang), 0.5 * np.cos(ang)])
        vy = np.concatenate([np.sin(ang), 0.5 * np.sin(ang)])
        rgb = quantize(an.color_wheel(vx[None], vy[None], 1.0))
        colors = {tuple(rgb[:, 0, i]) for i in range(48)}
        assert len(colors) == 48

    def test_assignment_colors(self):
        cents = np.eye(9)[:4]
        img = an.colorize_assignments(np.array([0, 1, 2, 3, 0, 1]), cents, (2, 3))
        assert img.shape == (3, 2, 3)
        np.testing.assert_array_equal(img[:, 0, 0], img[:, 1, 1])


class TestLoadingMaps:
    def test_single_direction(self):
        pca = an.pca_filters(bank(5, n=40), 4)
        alpha = np.random.default_rng(0).normal(size=(3, 4))
        coeffs = pca.mean + alpha[..., None] * pca.components[0]
        maps = an.loading_factor_maps(FilterFlow(coeffs, "free"), pca, 4)
        np.testing.assert_allclose(maps[0].raw, alpha, atol=1e-12)
        for m in maps[1:]:
            np.testing.assert_allclose(m.raw, 0, atol=1e-12)
        assert maps[0].image.min() == 0 and maps[0].image.max() == 1
        assert maps[0].vmin == pytest.approx(alpha.min())

    def test_identity_flow_projection(self):
        f = identity_flow(3, 3, 3)
        pca = an.pca_filters(an.FilterBank(np.random.default_rng(1).random((20, 9))), 3)
        maps = an.loading_factor_maps(f, pca, 3)
        expected = (f.coeffs.reshape(-1, 9) - pca.mean) @ pca.components.T
        for i, m in enumerate(maps):
            np.testing.assert_array_equal(m.raw.ravel(), expected[:, i])

    @pytest.mark.parametrize("seed", range(6))
    def test_bessel(self, seed):
        rng = np.random.default_rng(seed)
        flows = [normalize_simplex(rng.normal(0, 2, (6, 6, 25))), shift_flow(3, 3, 5, 1, -2)]
        pca = an.pca_filters(an.FilterBank.from_flows([flows[0]]), 8)
        for f in flows:
            maps = an.loading_factor_maps(f, pca, 8)
            sq = sum(m.raw**2 for m in maps)
            centred = ((f.coeffs.reshape(f.height, f.width, -1) - pca.mean) ** 2).sum(-1)
            assert np.all(sq <= centred + 1e-12)

    def test_k_mismatch(self):
        pca = an.pca_filters(bank(0), 2)
        with pytest.raises(ValueError):
            an.loading_factor_maps(identity_flow(2, 2, 5), pca, 2)


def test_mosaic_and_report():
    km = an.kmeans_filters(bank(0, n=20), 3)
    pca = an.pca_filters(bank(0, n=20), 3)
    m = an.filter_mosaic(km.centroids, 3, cols=2)
    assert m.shape == (1, 2 * 4 + 1, 2 * 4 + 1) and m.min() >= 0 and m.max() <= 1
    text = an.analysis_report(pca, km)
    assert "pc1" in text and "cluster_sizes" in text
