"""
Acceptance-scale checks

These run for minutes on one core and are deselected by default; run them
with ``pytest -m slow``.
"""

import numpy as np
import pytest

from mino.data_io import gen_mesh_gp
from mino.flow_matching import SolverConfig, SolverMethod, TrainConfig, generate, train
from mino.gaussian_field import GaussianProcessSampler, GPSpec, sample_gp
from mino.geometry import Box, PointSet, make_grid_point_set
from mino.metrics import averaged_swd, metric_consistency_curve, swd_variance_study
from mino.model import DecoderQuery, ModelConfig, VelocityModel

pytestmark = pytest.mark.slow

GP_SMOOTH = GPSpec(length_scale=0.3, smoothness=1.5)
GP_ROUGH = GPSpec(length_scale=0.01, smoothness=0.5)
TARGET_1D = GPSpec(length_scale=0.2, smoothness=1.5)
BASE_1D = GPSpec(length_scale=0.05, smoothness=0.5)
GENERATION_SOLVER = SolverConfig(method=SolverMethod.RK4_FIXED, steps=20)


@pytest.fixture(scope="module")
def grid_64x64():
    return make_grid_point_set((64, 64), Box.unit(2))


@pytest.fixture(scope="module")
def line_64():
    return make_grid_point_set((64,), Box.unit(1))


@pytest.fixture(scope="module")
def line_data(line_64):
    return gen_mesh_gp(line_64, n_train=2000, n_test=500, seed=0, spec=TARGET_1D)


def _train_desk(dataset, **overrides):
    model = VelocityModel(ModelConfig.desk(**overrides))
    cfg = TrainConfig(epochs=30, batch_size=16, learning_rate=1e-3, base_gp=BASE_1D, seed=0)
    history = train(model, dataset, cfg)
    return model, history


@pytest.fixture(scope="module")
def desk_run(line_data):
    return _train_desk(line_data[0])


class TestMetricBehavior:
    """Test averaged-SWD and MMD behavior between a smooth and a rough GP measure"""

    def test_averaged_swd_variance_table(self, grid_64x64):
        """Test mean and spread of averaged-SWD over 20 trials of 5000 samples"""
        sampler_x = GaussianProcessSampler(GP_SMOOTH, grid_64x64)
        sampler_y = GaussianProcessSampler(GP_ROUGH, grid_64x64)
        study = swd_variance_study(lambda s: sampler_x.sample_batch(5000, np.random.default_rng(s)),
                                   lambda s: sampler_y.sample_batch(5000, np.random.default_rng(s)),
                                   n_run_values=(5, 10, 20, 40), n_trials=20, n_projections=256, seed=0)
        row = study.set_index("n_run").loc[10]
        assert 0.235 <= row["mean"] <= 0.263
        assert row["std"] <= 0.006

        stds = study["std"].to_numpy()
        inversions = [(a, b) for a, b in zip(stds[:-1], stds[1:]) if b > a]
        assert len(inversions) <= 1
        assert all(b <= 1.1 * a for a, b in inversions)

    def test_consistency_across_discretizations(self, grid_64x64):
        """Test that SWD and MMD on point subsets vary by less than 10%"""
        X = sample_gp(GP_SMOOTH, grid_64x64, 1000, rng_seed=0)
        Y = sample_gp(GP_ROUGH, grid_64x64, 1000, rng_seed=1)
        curve = metric_consistency_curve(X, Y, ratios=(0.25, 0.5, 0.75, 1.0), seed=0)
        for column in ("swd_mean", "mmd"):
            values = curve[column].to_numpy()
            assert (values.max() - values.min()) / values.mean() < 0.1


class TestDeskTraining:
    """Test end-to-end learning on a 1D Mesh-GP task"""

    def test_generated_closer_than_base(self, desk_run, line_data, line_64):
        """Test that generated samples halve the base measure's distance to the test set"""
        model, history = desk_run
        test = line_data[1]
        # loss is bounded below by the conditional variance of f1 - f0 given f_t
        assert history["mean_loss"].iloc[-1] < 0.8 * history["mean_loss"].iloc[0]

        generated = generate(model, BASE_1D, line_64, test.n_samples, GENERATION_SOLVER, seed=1)
        base = sample_gp(BASE_1D, line_64, test.n_samples, rng_seed=2)
        swd_generated, _ = averaged_swd(generated, test)
        swd_base, _ = averaged_swd(base, test)
        assert swd_generated < 0.5 * swd_base

    def test_zero_shot_finer_mesh(self, desk_run, line_data, line_64):
        """Test generation on 128 points, compared on the 64 points shared with training"""
        model, _ = desk_run
        coarse = line_64.positions[:, 0]
        fine = np.sort(np.concatenate([coarse, np.arange(1, 65) / 64.0]))
        fine_points = PointSet(positions=fine[:, None], domain=Box.unit(1))
        shared = np.searchsorted(fine, coarse)

        _, test_fine = gen_mesh_gp(fine_points, n_train=0, n_test=500, seed=3, spec=TARGET_1D)
        generated = generate(model, BASE_1D, fine_points, 500, GENERATION_SOLVER, seed=4)
        assert np.all(np.isfinite(generated.values))

        swd_fine, _ = averaged_swd(generated.restrict(shared), test_fine.restrict(shared))
        coarse_generated = generate(model, BASE_1D, line_64, 500, GENERATION_SOLVER, seed=4)
        swd_coarse, _ = averaged_swd(coarse_generated, line_data[1])
        assert swd_fine <= 2.0 * swd_coarse

    def test_position_only_decoder_is_worse(self, desk_run, line_data, line_64):
        """Test that dropping f_t from the decoder query hurts sample quality"""
        model, _ = desk_run
        ablated, _ = _train_desk(line_data[0], decoder_query=DecoderQuery.POSITION_ONLY)
        test = line_data[1]
        swd_full, _ = averaged_swd(generate(model, BASE_1D, line_64, 500, GENERATION_SOLVER, seed=5), test)
        swd_ablated, _ = averaged_swd(generate(ablated, BASE_1D, line_64, 500, GENERATION_SOLVER, seed=5), test)
        assert swd_ablated > swd_full
