"""
Distances between sets of function samples

- averaged sliced Wasserstein distance (SWD) over random unit directions in
  R^(f_dim * N)
- unbiased MMD with a Gaussian RBF kernel and a median-heuristic bandwidth
- grid-only diagnostics: radially binned power spectra, autocovariance maps
  and pointwise value histograms, compared by mean squared error

Both SWD and MMD operate on flattened samples and need the two sets to share
their discretization.
"""

import logging
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial.distance import cdist, pdist

from .exceptions import GeometryError, ShapeError
from .geometry import FunctionBatch

logger = logging.getLogger(__name__)

KERNEL_BLOCK = 1024
DENSITY_BINS = 100
GRID_METRICS_NOTE = (
    "spectra/autocovariance/density MSE are local reconstructions: radially binned mean power "
    "spectrum, inverse transform of the mean power spectrum, 100-bin unit-mass histograms"
)

Samples = Union[FunctionBatch, np.ndarray]


class MetricsConfig(BaseModel):
    """Parameters of the metric suite"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_projections: int = Field(256, ge=1)
    n_run: int = Field(10, ge=1)
    p: int = Field(2, ge=1, le=2)
    seed: int = 0
    bandwidth: Optional[float] = Field(None, gt=0)
    max_bandwidth_points: int = Field(2000, ge=2)
    grid_metrics: bool = True


class MetricReport(BaseModel):
    """Metric values between a generated and a reference batch"""
    model_config = ConfigDict(extra="forbid")

    swd_mean: float = Field(ge=0)
    swd_runs: List[float]
    mmd: float = Field(ge=0)
    mmd_squared: float
    mmd_bandwidth: float = Field(gt=0)
    spectra_mse: Optional[float] = Field(None, ge=0)
    autocov_mse: Optional[float] = Field(None, ge=0)
    density_mse: Optional[float] = Field(None, ge=0)
    metadata: Dict = Field(default_factory=dict)

    @model_validator(mode="after")
    def check_mean(self):
        if not self.swd_runs:
            raise ValueError("swd_runs must not be empty")
        if not math.isclose(self.swd_mean, float(np.mean(self.swd_runs)), rel_tol=1e-12, abs_tol=1e-15):
            raise ValueError("swd_mean must equal the mean of swd_runs")
        return self

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls.model_validate_json(text)


def _flat(samples: Samples) -> np.ndarray:
    if isinstance(samples, FunctionBatch):
        return samples.flatten().astype(np.float64)
    arr = np.asarray(samples, dtype=np.float64)
    return arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr[:, None]


def _check_pair(X: Samples, Y: Samples) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(X, FunctionBatch) and isinstance(Y, FunctionBatch):
        if not X.points.same_discretization(Y.points):
            raise GeometryError("Sample sets are observed on different point sets")
    x, y = _flat(X), _flat(Y)
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"Sample dimensions differ: {x.shape[1]} vs {y.shape[1]}")
    return x, y


def wasserstein_1d(a: np.ndarray, b: np.ndarray, p: int = 2) -> float:
    """
    Wasserstein-p between two equal-size empirical measures on the line

    Args:
        a, b: Samples of equal length
        p: 1 or 2

    Returns:
        ((1/N) sum |a_(i) - b_(i)|^p)^(1/p) over order statistics
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"wasserstein_1d needs equal sample counts, got {a.size} and {b.size}")
    if p not in (1, 2):
        raise ValueError(f"p must be 1 or 2, got {p}")
    diff = np.abs(np.sort(a) - np.sort(b))
    return float(np.mean(diff ** p) ** (1.0 / p))


def random_directions(dim: int, n_projections: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform unit vectors as columns of a [dim, n_projections] matrix"""
    theta = rng.standard_normal((dim, n_projections))
    return theta / np.sqrt((theta * theta).sum(axis=0, keepdims=True))


def sliced_wasserstein(X: Samples, Y: Samples, n_projections: int = 256, p: int = 2, seed: int = 0) -> float:
    """
    Monte Carlo sliced Wasserstein-p distance

    Args:
        X, Y: Equal-size sample sets on a shared discretization
        n_projections: Number of random directions L
        p: Order
        seed: Seed of the direction generator

    Returns:
        ((1/L) sum_l W_p^p(theta_l . X, theta_l . Y))^(1/p)
    """
    x, y = _check_pair(X, Y)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"sliced_wasserstein needs equal sample counts, got {x.shape[0]} and {y.shape[0]}")
    theta = random_directions(x.shape[1], n_projections, np.random.default_rng(seed))
    px = np.sort(x @ theta, axis=0)
    py = np.sort(y @ theta, axis=0)
    per_direction = np.mean(np.abs(px - py) ** p, axis=0)
    return float(np.mean(per_direction) ** (1.0 / p))


def run_seeds(seed: int, n_run: int) -> List[int]:
    """Independent integer seeds derived from one root seed"""
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(n_run)]


def averaged_swd(X: Samples, Y: Samples, n_projections: int = 256, n_run: int = 10, p: int = 2,
                 seed: int = 0) -> Tuple[float, List[float]]:
    """
    Mean of n_run independent SWD estimates

    Returns:
        (mean, per-run values)
    """
    if n_run < 1:
        raise ValueError(f"n_run must be >= 1, got {n_run}")
    runs = [sliced_wasserstein(X, Y, n_projections, p, s) for s in run_seeds(seed, n_run)]
    return float(np.mean(runs)), runs


def _kernel_sum(a: np.ndarray, b: np.ndarray, bandwidth: float) -> float:
    """sum_ij exp(-|a_i - b_j|^2 / (2 h^2)), accumulated block by block"""
    total = 0.0
    gamma = 1.0 / (2.0 * bandwidth * bandwidth)
    for i in range(0, a.shape[0], KERNEL_BLOCK):
        for j in range(0, b.shape[0], KERNEL_BLOCK):
            d2 = cdist(a[i:i + KERNEL_BLOCK], b[j:j + KERNEL_BLOCK], "sqeuclidean")
            total += float(np.exp(-gamma * d2).sum())
    return total


def mmd_unbiased_squared(X: Samples, Y: Samples, bandwidth: float) -> float:
    """Unbiased U-statistic estimate of MMD^2 with a Gaussian RBF kernel"""
    x, y = _check_pair(X, Y)
    n, m = x.shape[0], y.shape[0]
    if n < 2 or m < 2:
        raise ShapeError(f"MMD needs at least two samples per set, got {n} and {m}")
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    # diagonal terms are exp(0) = 1
    kxx = (_kernel_sum(x, x, bandwidth) - n) / (n * (n - 1))
    kyy = (_kernel_sum(y, y, bandwidth) - m) / (m * (m - 1))
    kxy = _kernel_sum(x, y, bandwidth) / (n * m)
    return kxx + kyy - 2.0 * kxy


def mmd_unbiased(X: Samples, Y: Samples, bandwidth: float) -> float:
    """Square root of the positive part of the unbiased MMD^2"""
    return math.sqrt(max(mmd_unbiased_squared(X, Y, bandwidth), 0.0))


def median_bandwidth(X: Samples, Y: Samples, max_points: int = 2000, seed: int = 0) -> float:
    """
    Median pairwise distance of the pooled samples divided by sqrt(2)

    Pools above `max_points` rows are subsampled without replacement.
    A zero median falls back to 1.0.
    """
    x, y = _check_pair(X, Y)
    pooled = np.concatenate([x, y], axis=0)
    if pooled.shape[0] < 2:
        raise ShapeError("Bandwidth heuristic needs at least two samples")
    if pooled.shape[0] > max_points:
        keep = np.random.default_rng(seed).choice(pooled.shape[0], size=max_points, replace=False)
        pooled = pooled[keep]
    median = float(np.median(pdist(pooled)))
    if median <= 0:
        logger.warning("All pooled samples coincide; using bandwidth 1.0")
        return 1.0
    return median / math.sqrt(2.0)


def _grid_values(batch: FunctionBatch, grid: Optional[Tuple[int, ...]]) -> np.ndarray:
    shape = tuple(grid) if grid is not None else batch.points.grid_shape
    if shape is None:
        raise GeometryError("Grid metrics need samples on a declared regular grid")
    if int(np.prod(shape)) != batch.points.n_points:
        raise GeometryError(f"Grid {shape} does not match {batch.points.n_points} points")
    return batch.values.astype(np.float64).reshape((batch.n_samples, batch.f_dim) + tuple(shape))


def mean_power_spectrum(values: np.ndarray) -> np.ndarray:
    """|FFT|^2 / n averaged over samples and channels; input [S, f_dim, *grid]"""
    axes = tuple(range(2, values.ndim))
    n = int(np.prod(values.shape[2:]))
    power = np.abs(np.fft.fftn(values, axes=axes)) ** 2 / n
    return power.mean(axis=(0, 1))


def radial_power_spectrum(values: np.ndarray) -> np.ndarray:
    """Mean power per integer radial wavenumber; input [S, f_dim, *grid]"""
    power = mean_power_spectrum(values)
    freqs = np.meshgrid(*[np.fft.fftfreq(n) * n for n in power.shape], indexing="ij")
    radius = np.rint(np.sqrt(sum(f * f for f in freqs))).astype(np.int64).ravel()
    sums = np.bincount(radius, weights=power.ravel())
    counts = np.bincount(radius)
    return sums / np.maximum(counts, 1)


def autocovariance_map(values: np.ndarray) -> np.ndarray:
    """Spatial autocovariance by lag (lag 0 first); input [S, f_dim, *grid]"""
    return np.fft.ifftn(mean_power_spectrum(values)).real


def density_histograms(x: np.ndarray, y: np.ndarray, bins: int = DENSITY_BINS) -> Tuple[np.ndarray, np.ndarray]:
    """Unit-mass histograms of pooled values over their shared range"""
    x, y = np.ravel(x), np.ravel(y)
    lo = min(x.min(), y.min())
    hi = max(x.max(), y.max())
    if hi <= lo:
        hi = lo + 1.0
    hx, _ = np.histogram(x, bins=bins, range=(lo, hi))
    hy, _ = np.histogram(y, bins=bins, range=(lo, hi))
    return hx / max(hx.sum(), 1), hy / max(hy.sum(), 1)


def grid_metrics(X: FunctionBatch, Y: FunctionBatch, grid: Optional[Tuple[int, ...]] = None) -> Dict[str, float]:
    """
    MSE between spectra, autocovariance maps and value densities

    Args:
        X, Y: Batches on the same regular grid
        grid: Grid shape; defaults to the point set's declared grid_shape

    Returns:
        {"spectra_mse", "autocov_mse", "density_mse"}
    """
    if not X.points.same_discretization(Y.points):
        raise GeometryError("Grid metrics need both batches on the same grid")
    if X.n_samples == 0 or Y.n_samples == 0:
        raise ShapeError("Grid metrics need non-empty batches")
    vx, vy = _grid_values(X, grid), _grid_values(Y, grid)
    hx, hy = density_histograms(vx, vy)
    return {
        "spectra_mse": float(np.mean((radial_power_spectrum(vx) - radial_power_spectrum(vy)) ** 2)),
        "autocov_mse": float(np.mean((autocovariance_map(vx) - autocovariance_map(vy)) ** 2)),
        "density_mse": float(np.mean((hx - hy) ** 2)),
    }


def evaluate(X: FunctionBatch, Y: FunctionBatch, cfg: MetricsConfig = MetricsConfig(),
             grid: Optional[Tuple[int, ...]] = None) -> MetricReport:
    """
    Full metric suite between a generated batch X and a reference batch Y

    SWD uses the first min(|X|, |Y|) samples of each set. Grid metrics are
    added when the point set is a declared regular grid (or `grid` is given).
    """
    if not X.points.same_discretization(Y.points):
        logger.error("Evaluation batches have different discretizations")
        raise GeometryError("Cannot compare batches observed on different point sets")
    n = min(X.n_samples, Y.n_samples)
    swd_mean, runs = averaged_swd(X.take(np.arange(n)), Y.take(np.arange(n)),
                                  cfg.n_projections, cfg.n_run, cfg.p, cfg.seed)

    bandwidth = cfg.bandwidth
    if bandwidth is None:
        bandwidth = median_bandwidth(X, Y, cfg.max_bandwidth_points, cfg.seed)
    mmd2 = mmd_unbiased_squared(X, Y, bandwidth)
    if mmd2 < 0:
        logger.warning(f"Unbiased MMD^2 estimate is negative ({mmd2:.3e}); reporting 0")

    metadata = {
        "n_projections": cfg.n_projections,
        "n_run": cfg.n_run,
        "p": cfg.p,
        "seed": cfg.seed,
        "run_seeds": run_seeds(cfg.seed, cfg.n_run),
        "n_samples_x": X.n_samples,
        "n_samples_y": Y.n_samples,
        "n_samples_swd": n,
        "n_points": X.points.n_points,
        "bandwidth_source": "override" if cfg.bandwidth is not None else "median_heuristic",
        "mmd_squared_negative": mmd2 < 0,
    }
    extra = {}
    if cfg.grid_metrics and (grid is not None or X.points.grid_shape is not None):
        extra = grid_metrics(X, Y, grid)
        metadata["grid_metrics_note"] = GRID_METRICS_NOTE

    report = MetricReport(swd_mean=swd_mean, swd_runs=runs, mmd=math.sqrt(max(mmd2, 0.0)),
                          mmd_squared=mmd2, mmd_bandwidth=bandwidth, metadata=metadata, **extra)
    logger.info(f"SWD={report.swd_mean:.5f} MMD={report.mmd:.5f} (bandwidth {bandwidth:.4g})")
    return report


def swd_variance_study(sample_x: Callable[[int], FunctionBatch], sample_y: Callable[[int], FunctionBatch],
                       n_run_values: Sequence[int] = (5, 10, 20, 40), n_trials: int = 20,
                       n_projections: int = 256, seed: int = 0) -> pd.DataFrame:
    """
    Spread of averaged-SWD across repeated trials

    Each trial draws fresh sample sets via sample_x(trial_seed) /
    sample_y(trial_seed) and computes averaged-SWD for every n_run value.

    Returns:
        DataFrame with columns n_run, mean, std, n_trials
    """
    trial_seeds = run_seeds(seed, 2 * n_trials)
    values: Dict[int, List[float]] = {n: [] for n in n_run_values}
    for trial in range(n_trials):
        X = sample_x(trial_seeds[2 * trial])
        Y = sample_y(trial_seeds[2 * trial + 1])
        for n_run in n_run_values:
            mean, _ = averaged_swd(X, Y, n_projections, n_run, seed=trial_seeds[2 * trial] + n_run)
            values[n_run].append(mean)
        logger.info(f"Variance study trial {trial + 1}/{n_trials} done")

    rows = [{"n_run": n, "mean": float(np.mean(v)), "std": float(np.std(v, ddof=1)) if len(v) > 1 else 0.0,
             "n_trials": n_trials} for n, v in values.items()]
    return pd.DataFrame(rows, columns=["n_run", "mean", "std", "n_trials"])


def metric_consistency_curve(X: FunctionBatch, Y: FunctionBatch,
                             ratios: Sequence[float] = (0.25, 0.5, 0.75, 1.0),
                             cfg: MetricsConfig = MetricsConfig(), seed: int = 0) -> pd.DataFrame:
    """
    SWD and MMD on common random subsets of the observation points

    Returns:
        DataFrame with columns ratio, n_points, swd_mean, swd_std, mmd, mmd_bandwidth
    """
    if not X.points.same_discretization(Y.points):
        raise GeometryError("Consistency curve needs both batches on the same points")
    rng = np.random.default_rng(seed)
    n_points = X.points.n_points
    n = min(X.n_samples, Y.n_samples)
    rows = []
    for ratio in ratios:
        if not 0 < ratio <= 1:
            raise ValueError(f"Subsample ratio must lie in (0, 1], got {ratio}")
        m = max(1, int(round(ratio * n_points)))
        idx = np.sort(rng.choice(n_points, size=m, replace=False))
        xs, ys = X.restrict(idx), Y.restrict(idx)
        swd_mean, runs = averaged_swd(xs.take(np.arange(n)), ys.take(np.arange(n)),
                                      cfg.n_projections, cfg.n_run, cfg.p, cfg.seed)
        bandwidth = cfg.bandwidth or median_bandwidth(xs, ys, cfg.max_bandwidth_points, cfg.seed)
        rows.append({"ratio": ratio, "n_points": m, "swd_mean": swd_mean, "swd_std": float(np.std(runs)),
                     "mmd": mmd_unbiased(xs, ys, bandwidth), "mmd_bandwidth": bandwidth})
        logger.info(f"ratio={ratio}: SWD={swd_mean:.5f}, MMD={rows[-1]['mmd']:.5f}")
    return pd.DataFrame(rows, columns=["ratio", "n_points", "swd_mean", "swd_std", "mmd", "mmd_bandwidth"])
