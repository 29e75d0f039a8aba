"""
Tests for point sets, latent grids, radius graphs and embeddings
"""

import numpy as np
import pytest
from scipy.spatial.distance import pdist

from mino.exceptions import GeometryError
from mino.geometry import (Box, FunctionBatch, LatentGrid, PointSet, RegularSpec, Sphere, build_radius_graph,
                           embedding_frequencies, latlon_to_xyz, make_grid_point_set, make_regular_grid,
                           make_spherical_grid, make_spherical_point_set, radius_graph_oracle,
                           random_box_point_set, sinusoidal_embed)


def _grid(points) -> LatentGrid:
    points = np.asarray(points, dtype=np.float64)
    return LatentGrid(query_positions=points, spec=RegularSpec(shape=(len(points),)))


def _points(coords, box=None) -> PointSet:
    coords = np.asarray(coords, dtype=np.float64)
    return PointSet(positions=coords, domain=box or Box.unit(coords.shape[1]))


class TestPointSet:
    """Test point set validation"""

    def test_positions_inside_box(self, unit_box):
        """Test that positions outside the box are rejected"""
        with pytest.raises(GeometryError, match="outside the box"):
            _points([[0.5, 0.5], [1.2, 0.1]], unit_box)

    def test_non_finite_positions(self):
        """Test that NaN coordinates are rejected"""
        with pytest.raises(GeometryError, match="non-finite"):
            _points([[np.nan, 0.5]])

    def test_dimension_bounds(self):
        """Test that P_dim outside 1..3 is rejected"""
        with pytest.raises(GeometryError):
            PointSet(positions=np.zeros((2, 4)), domain=Box.unit(3))

    def test_box_bounds_ordered(self):
        """Test that a box needs lower < upper"""
        with pytest.raises(GeometryError):
            Box(lower=(0.0, 1.0), upper=(1.0, 1.0))

    def test_sphere_radius_tolerance(self):
        """Test that points off the sphere are rejected"""
        PointSet(positions=[[2.0, 0.0, 0.0]], domain=Sphere(2.0))
        with pytest.raises(GeometryError, match="off the sphere"):
            PointSet(positions=[[1.0 + 1e-6, 0.0, 0.0]], domain=Sphere(1.0))

    def test_positions_are_copied_and_read_only(self):
        """Test that the point set owns an immutable copy of its positions"""
        coords = np.array([[0.1, 0.2], [0.3, 0.4]])
        points = _points(coords)
        coords[0, 0] = 0.9
        assert points.positions[0, 0] == 0.1
        with pytest.raises(ValueError):
            points.positions[0, 0] = 0.5

    def test_content_hash(self, mesh_points):
        """Test that equal coordinates hash equally and different ones do not"""
        same = PointSet(positions=mesh_points.positions.copy(), domain=mesh_points.domain)
        assert same.content_hash() == mesh_points.content_hash()
        other = mesh_points.subset(np.arange(10))
        assert other.content_hash() != mesh_points.content_hash()

    def test_subset_drops_grid_shape(self):
        """Test that subsetting a declared grid yields a plain point set"""
        grid = make_grid_point_set((4, 4), Box.unit(2))
        sub = grid.subset([0, 5, 10])
        assert sub.grid_shape is None
        np.testing.assert_array_equal(sub.positions, grid.positions[[0, 5, 10]])

    def test_grid_shape_must_match(self):
        """Test that a grid shape has to cover every point"""
        with pytest.raises(GeometryError, match="grid_shape"):
            PointSet(positions=np.full((5, 2), 0.5), domain=Box.unit(2), grid_shape=(2, 2))


class TestRegularGrid:
    """Test regular latent and data grids"""

    def test_single_cell(self, unit_box):
        """Test that one cell gives the box center"""
        grid = make_regular_grid(1, 1, unit_box)
        np.testing.assert_allclose(grid.query_positions, [[0.5, 0.5]])

    def test_sixteen_by_sixteen(self, unit_box):
        """Test the 16x16 grid size and spacing"""
        grid = make_regular_grid(16, 16, unit_box)
        assert grid.n_nodes == 256
        assert pdist(grid.query_positions).min() == pytest.approx(1 / 16)

    def test_hand_enumerated_centers(self, unit_box):
        """Test a 2x3 grid against hand-written cell centers"""
        grid = make_regular_grid(2, 3, unit_box)
        expected = [[0.25, 1 / 6], [0.25, 0.5], [0.25, 5 / 6],
                    [0.75, 1 / 6], [0.75, 0.5], [0.75, 5 / 6]]
        np.testing.assert_allclose(grid.query_positions, expected)

    def test_one_and_three_dimensional(self):
        """Test grids over 1D and 3D boxes"""
        line = make_regular_grid(4, None, Box.unit(1))
        np.testing.assert_allclose(line.query_positions[:, 0], [0.125, 0.375, 0.625, 0.875])
        cube = make_regular_grid(2, 2, Box.unit(3), nz=3)
        assert cube.query_positions.shape == (12, 3)
        assert cube.spec.shape == (2, 2, 3)

    def test_invalid_counts(self, unit_box):
        """Test that zero cells are rejected"""
        with pytest.raises(GeometryError):
            make_regular_grid(0, 3, unit_box)

    def test_grid_point_set_declares_shape(self):
        """Test that a data grid matches the latent grid ordering and records its shape"""
        box = Box(lower=(-1.0, 0.0), upper=(1.0, 2.0))
        points = make_grid_point_set((3, 5), box)
        assert points.grid_shape == (3, 5)
        np.testing.assert_array_equal(points.positions, make_regular_grid(3, 5, box).query_positions)


class TestSphericalGrid:
    """Test latitude/longitude grids"""

    def test_single_point_on_equator(self):
        """Test that a 1x1 grid is (1, 0, 0)"""
        grid = make_spherical_grid(1, 1)
        np.testing.assert_allclose(grid.query_positions, [[1.0, 0.0, 0.0]], atol=1e-15)

    def test_default_size(self):
        """Test the 32x16 spherical grid"""
        grid = make_spherical_grid(32, 16)
        assert grid.n_nodes == 512
        assert grid.dim == 3

    def test_unit_norms(self):
        """Test that every point has unit norm"""
        grid = make_spherical_grid(8, 4)
        np.testing.assert_allclose(np.linalg.norm(grid.query_positions, axis=1), 1.0, atol=1e-12)

    def test_no_pole_points(self):
        """Test that latitude band centers exclude the poles"""
        grid = make_spherical_grid(6, 5)
        assert np.abs(grid.query_positions[:, 2]).max() < 1.0 - 1e-6

    def test_latlon_conversion(self):
        """Test the north pole and the (0, 90) point"""
        xyz = latlon_to_xyz([90.0, 0.0], [0.0, 90.0])
        np.testing.assert_allclose(xyz, [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]], atol=1e-15)

    def test_point_set_on_sphere(self):
        """Test that the spherical point set validates against Sphere(1)"""
        points = make_spherical_point_set(12, 6)
        assert points.n_points == 72
        assert isinstance(points.domain, Sphere)


class TestRadiusGraph:
    """Test fixed-radius neighbor search"""

    def test_coincident_point(self):
        """Test a single coincident input/query pair"""
        edges = build_radius_graph(_points([[0.0, 0.0]]), _grid([[0.0, 0.0]]), 0.1)
        np.testing.assert_array_equal(edges.pairs, [[0, 0]])
        np.testing.assert_array_equal(edges.degree, [1])
        assert edges.warning is None

    def test_out_of_radius_excluded(self):
        """Test that far points are not neighbors"""
        edges = build_radius_graph(_points([[0.0, 0.0], [1.0, 1.0]]), _grid([[0.0, 0.0]]), 0.5)
        np.testing.assert_array_equal(edges.pairs, [[0, 0]])

    def test_matches_oracle_on_random_instances(self):
        """Test equality with the all-pairs scan on 50 random instances"""
        rng = np.random.default_rng(0)
        for trial in range(50):
            dim = 1 + trial % 3
            inputs = _points(rng.uniform(size=(rng.integers(1, 200), dim)))
            query = _grid(rng.uniform(size=(rng.integers(1, 64), dim)))
            radius = rng.uniform(0.02, 0.3)
            fast = build_radius_graph(inputs, query, radius)
            slow = radius_graph_oracle(inputs, query, radius)
            np.testing.assert_array_equal(fast.pairs, slow.pairs)
            np.testing.assert_array_equal(fast.degree, slow.degree)

    def test_default_scale_matches_oracle(self):
        """Test 200 inputs and 64 queries at r=0.07"""
        rng = np.random.default_rng(3)
        inputs = _points(rng.uniform(size=(200, 2)))
        query = _grid(rng.uniform(size=(64, 2)))
        fast = build_radius_graph(inputs, query, 0.07)
        np.testing.assert_array_equal(fast.pairs, radius_graph_oracle(inputs, query, 0.07).pairs)

    def test_pairs_sorted_and_within_radius(self, mesh_points):
        """Test ordering, distances and degree counts"""
        grid = make_regular_grid(4, 4, Box.unit(2))
        edges = build_radius_graph(mesh_points, grid, 0.2)
        keys = edges.pairs[:, 0] * mesh_points.n_points + edges.pairs[:, 1]
        assert np.all(np.diff(keys) > 0)
        dist = np.linalg.norm(grid.query_positions[edges.pairs[:, 0]]
                              - mesh_points.positions[edges.pairs[:, 1]], axis=1)
        assert np.all(dist <= 0.2)
        np.testing.assert_array_equal(edges.degree, np.bincount(edges.pairs[:, 0], minlength=16))

    def test_monotone_in_radius(self, mesh_points):
        """Test that a larger radius keeps every edge"""
        grid = make_regular_grid(3, 3, Box.unit(2))
        small = {tuple(p) for p in build_radius_graph(mesh_points, grid, 0.1).pairs}
        large = {tuple(p) for p in build_radius_graph(mesh_points, grid, 0.25).pairs}
        assert small <= large

    def test_translation_invariance(self):
        """Test that translating inputs and queries together keeps the pairs"""
        rng = np.random.default_rng(5)
        box = Box(lower=(0.0, 0.0), upper=(2.0, 2.0))
        coords = rng.uniform(size=(100, 2))
        queries = rng.uniform(size=(20, 2))
        shift = np.array([0.5, 0.75])
        before = build_radius_graph(_points(coords, box), _grid(queries), 0.15)
        after = build_radius_graph(_points(coords + shift, box), _grid(queries + shift), 0.15)
        np.testing.assert_array_equal(before.pairs, after.pairs)

    def test_empty_graph_sets_warning(self):
        """Test the zero-edge warning flag"""
        edges = build_radius_graph(_points([[0.0, 0.0]]), _grid([[1.0, 1.0]]), 0.1)
        assert edges.n_edges == 0
        assert edges.empty_queries == 1
        assert "no edges" in edges.warning

    def test_dimension_mismatch(self):
        """Test that 2D inputs and 3D queries are rejected"""
        with pytest.raises(GeometryError, match="queries are 3-D"):
            build_radius_graph(_points([[0.5, 0.5]]), _grid([[0.0, 0.0, 1.0]]), 0.1)

    def test_non_positive_radius(self):
        """Test that r <= 0 is rejected"""
        with pytest.raises(GeometryError):
            build_radius_graph(_points([[0.5, 0.5]]), _grid([[0.5, 0.5]]), 0.0)


class TestSinusoidalEmbedding:
    """Test position and time embeddings"""

    def test_zero_value(self):
        """Test sin(0)=0, cos(0)=1 in sin-block-then-cos-block layout"""
        np.testing.assert_array_equal(sinusoidal_embed(0.0, 4), [[0.0, 0.0, 1.0, 1.0]])

    def test_quarter_period(self):
        """Test that v = pi / (2 w_1) gives sin component 1"""
        (w1,) = embedding_frequencies(2)
        emb = sinusoidal_embed(np.pi / (2 * w1), 2)
        assert emb[0, 0] == pytest.approx(1.0)
        assert emb[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_matches_formula(self):
        """Test t=0.5, embed_dim=64 against a direct evaluation"""
        k = np.arange(1, 33)
        w = 1000.0 * 10000.0 ** (-2.0 * k / 64)
        expected = np.concatenate([np.sin(w * 0.5), np.cos(w * 0.5)])
        np.testing.assert_allclose(sinusoidal_embed(0.5, 64)[0], expected, rtol=1e-14)

    def test_multi_dimensional_concatenation(self):
        """Test that each coordinate is embedded and the blocks concatenated"""
        positions = np.array([[0.1, 0.7], [0.4, 0.2]])
        emb = sinusoidal_embed(positions, 8)
        assert emb.shape == (2, 16)
        np.testing.assert_array_equal(emb[:, :8], sinusoidal_embed(positions[:, 0], 8))
        np.testing.assert_array_equal(emb[:, 8:], sinusoidal_embed(positions[:, 1], 8))

    def test_odd_width_rejected(self):
        """Test that odd embed_dim raises"""
        with pytest.raises(GeometryError, match="even"):
            sinusoidal_embed(0.3, 5)

    def test_injective_on_fine_grid(self):
        """Test that values 1e-3 apart in [0, 1] embed to distinct vectors"""
        emb = sinusoidal_embed(np.linspace(0.0, 1.0, 1001), 32)
        assert pdist(emb).min() > 0


class TestFunctionBatch:
    """Test the sample container type"""

    def test_shape_validation(self, mesh_points):
        """Test that values must cover every point"""
        with pytest.raises(GeometryError):
            FunctionBatch(values=np.zeros((2, 1, 3)), points=mesh_points)

    def test_take_and_restrict(self, random_batch):
        """Test sample selection and point restriction"""
        taken = random_batch.take([4, 0])
        np.testing.assert_array_equal(taken.values, random_batch.values[[4, 0]])
        restricted = random_batch.restrict([1, 2, 3])
        assert restricted.points.n_points == 3
        np.testing.assert_array_equal(restricted.values, random_batch.values[:, :, [1, 2, 3]])

    def test_empty_batch(self, mesh_points):
        """Test the zero-sample batch"""
        empty = FunctionBatch.empty(mesh_points, f_dim=2)
        assert len(empty) == 0
        assert empty.f_dim == 2
        assert empty.flatten().shape == (0, 2 * mesh_points.n_points)

    def test_random_box_points_seeded(self, unit_box):
        """Test that random meshes are reproducible and inside the box"""
        a = random_box_point_set(30, unit_box, seed=1)
        b = random_box_point_set(30, unit_box, seed=1)
        np.testing.assert_array_equal(a.positions, b.positions)
        assert a.positions.min() >= 0.0 and a.positions.max() <= 1.0
