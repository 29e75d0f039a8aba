"""
Tests for plot-data emission
"""

import xml.etree.ElementTree as ET

import numpy as np
import pandas as pd
import pytest

from mino.exceptions import GeometryError, ShapeError
from mino.gaussian_field import GPSpec, sample_gp
from mino.geometry import Box, make_grid_point_set
from mino.plotting import consistency_curve, heatmap, loss_curve, sample_table, spectra_plot, spectra_table


@pytest.fixture
def grid_batch():
    points = make_grid_point_set((6, 6), Box.unit(2))
    return sample_gp(GPSpec(length_scale=0.3, smoothness=1.5), points, 4, rng_seed=0)


class TestLossCurve:
    """Test the loss plot"""

    def test_one_row_per_epoch(self, tmp_path):
        """Test loss.csv rows and a parseable SVG"""
        history = pd.DataFrame({"epoch": [0, 1, 2], "mean_loss": [2.0, 1.0, 0.5], "learning_rate": [1e-3] * 3})
        table, svg = loss_curve(history, tmp_path)
        written = pd.read_csv(table)
        assert list(written.columns) == ["epoch", "mean_loss"]
        assert len(written) == 3
        assert ET.parse(svg).getroot().tag.endswith("svg")


class TestHeatmap:
    """Test single-sample pictures"""

    def test_grid_sample(self, tmp_path, grid_batch):
        """Test CSV plus SVG for a 2D grid"""
        paths = heatmap(grid_batch, 2, tmp_path)
        assert [p.name for p in paths] == ["sample_2.csv", "sample_2.svg"]
        table = pd.read_csv(paths[0])
        np.testing.assert_allclose(table["value"], grid_batch.values[2, 0])
        assert ET.parse(paths[1]).getroot().tag.endswith("svg")

    def test_mesh_sample(self, tmp_path, random_batch):
        """Test that irregular meshes only get a CSV"""
        paths = heatmap(random_batch, 0, tmp_path)
        assert [p.name for p in paths] == ["sample_0.csv"]
        assert list(pd.read_csv(paths[0]).columns) == ["x", "y", "value"]

    def test_index_out_of_range(self, random_batch):
        """Test a sample index past the batch"""
        with pytest.raises(ShapeError):
            sample_table(random_batch, 5)


class TestSpectra:
    """Test spectra tables"""

    def test_columns(self, tmp_path, grid_batch):
        """Test one power column per batch next to the wavenumber"""
        table, svg = spectra_plot({"input": grid_batch, "reference": grid_batch}, tmp_path)
        df = pd.read_csv(table)
        assert list(df.columns) == ["wavenumber", "power_input", "power_reference"]
        np.testing.assert_allclose(df["power_input"], df["power_reference"])

    def test_needs_grid(self, random_batch):
        """Test that meshes without a grid are rejected"""
        with pytest.raises(GeometryError):
            spectra_table({"mesh": random_batch})


class TestConsistencyCurve:
    """Test the consistency plot"""

    def test_table_passthrough(self, tmp_path):
        """Test that the curve is written unchanged"""
        curve = pd.DataFrame({"ratio": [0.5, 1.0], "n_points": [8, 16], "swd_mean": [0.2, 0.21],
                              "swd_std": [0.01, 0.01], "mmd": [0.1, 0.1], "mmd_bandwidth": [1.0, 1.2]})
        table, _ = consistency_curve(curve, tmp_path)
        pd.testing.assert_frame_equal(pd.read_csv(table), curve)
