"""
Matérn Gaussian random fields on arbitrary point sets

Provides the base measure mu_0 used by flow matching and the synthetic
Mesh-GP target measure. Sampling goes through a dense Cholesky factor of the
covariance restricted to the observation points, with jitter escalation for
near-singular matrices.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.spatial.distance import cdist

from .exceptions import FactorizationError, GeometryError
from .geometry import FunctionBatch, PointSet, Sphere

logger = logging.getLogger(__name__)

FIRST_ESCALATION_JITTER = 1e-10
JITTER_GROWTH = 10.0
MAX_JITTER_FRACTION = 1e-2


class Smoothness(str, Enum):
    """Matérn smoothness nu with a closed-form kernel"""
    HALF = "half"
    THREE_HALVES = "three_halves"
    FIVE_HALVES = "five_halves"

    @property
    def nu(self) -> float:
        return {"half": 0.5, "three_halves": 1.5, "five_halves": 2.5}[self.value]


class DistanceMode(str, Enum):
    """How pairwise distances between points are measured"""
    EUCLIDEAN = "euclidean"
    CHORDAL = "chordal"


_NU_ALIASES = {0.5: Smoothness.HALF, 1.5: Smoothness.THREE_HALVES, 2.5: Smoothness.FIVE_HALVES}


class GPSpec(BaseModel):
    """Matérn kernel parameters of a zero-mean Gaussian measure"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    length_scale: float = Field(0.01, gt=0)
    smoothness: Smoothness = Smoothness.HALF
    variance: float = Field(1.0, gt=0)
    distance: DistanceMode = DistanceMode.EUCLIDEAN
    jitter: float = Field(0.0, ge=0)

    @field_validator("smoothness", mode="before")
    @classmethod
    def accept_numeric_nu(cls, v):
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            if float(v) not in _NU_ALIASES:
                raise ValueError(f"smoothness must be one of 0.5, 1.5, 2.5, got {v}")
            return _NU_ALIASES[float(v)]
        return v


@dataclass(frozen=True, eq=False)
class CholFactor:
    """Lower Cholesky factor of C + jitter_used * I"""
    lower: np.ndarray
    jitter_used: float


def matern(d: Union[float, np.ndarray], spec: GPSpec) -> Union[float, np.ndarray]:
    """
    Matérn covariance at distance d

    Args:
        d: Non-negative distance (scalar or array)
        spec: Kernel parameters

    Returns:
        sigma^2 * k_nu(d / l), same shape as d
    """
    dist = np.asarray(d, dtype=np.float64)
    if np.any(dist < 0):
        raise GeometryError("Matérn kernel needs non-negative distances")

    r = dist / spec.length_scale
    if spec.smoothness is Smoothness.HALF:
        k = np.exp(-r)
    elif spec.smoothness is Smoothness.THREE_HALVES:
        s = np.sqrt(3.0) * r
        k = (1.0 + s) * np.exp(-s)
    else:
        s = np.sqrt(5.0) * r
        k = (1.0 + s + s * s / 3.0) * np.exp(-s)
    k = spec.variance * k
    return float(k) if np.ndim(d) == 0 else k


def pairwise_distances(points: PointSet, spec: GPSpec) -> np.ndarray:
    """Distance matrix under the GPSpec distance mode"""
    if spec.distance is DistanceMode.CHORDAL and not isinstance(points.domain, Sphere):
        raise GeometryError("Chordal distance needs points on a sphere domain")
    # chordal distance is the straight-line distance in the R^3 embedding
    return cdist(points.positions, points.positions)


def covariance_matrix(points: PointSet, spec: GPSpec) -> np.ndarray:
    """Covariance of the field restricted to `points`, exactly symmetric"""
    if points.n_points < 1:
        raise GeometryError("Covariance needs at least one point")
    cov = matern(pairwise_distances(points, spec), spec)
    upper = np.triu(cov)
    return upper + np.triu(cov, 1).T


def cholesky_with_jitter(cov: np.ndarray, initial_jitter: float = 0.0) -> CholFactor:
    """
    Cholesky factor with escalating diagonal regularization

    Tries C + j*I for j = initial_jitter, then grows j by x10 (starting at 1e-10
    when the initial jitter is 0) until factorization succeeds or j exceeds
    1e-2 * max(diag C).

    Args:
        cov: Symmetric matrix
        initial_jitter: First diagonal shift to try

    Returns:
        CholFactor with the jitter that was actually needed
    """
    cov = np.asarray(cov, dtype=np.float64)
    n = cov.shape[0]
    max_jitter = MAX_JITTER_FRACTION * float(np.max(np.diag(cov))) if n else 0.0
    jitter = float(initial_jitter)
    eye = np.eye(n)

    while True:
        try:
            lower = np.linalg.cholesky(cov + jitter * eye)
            if jitter > initial_jitter:
                logger.info(f"Cholesky succeeded after raising jitter to {jitter:.1e}")
            return CholFactor(lower=lower, jitter_used=jitter)
        except np.linalg.LinAlgError:
            next_jitter = FIRST_ESCALATION_JITTER if jitter == 0 else jitter * JITTER_GROWTH
            if next_jitter > max_jitter:
                logger.error(f"Cholesky failed at jitter {jitter:.1e}")
                raise FactorizationError(
                    f"Covariance is not positive definite even with jitter {jitter:.1e}", jitter)
            jitter = next_jitter


class GaussianProcessSampler:
    """
    Draws fields from one GP on one point set

    The factorization is computed on first use and reused afterwards, which
    is what training needs: thousands of base batches on the same mesh.
    """

    def __init__(self, spec: GPSpec, points: PointSet):
        self.spec = spec
        self.points = points
        self._factor: Optional[CholFactor] = None

    @property
    def factor(self) -> CholFactor:
        if self._factor is None:
            cov = covariance_matrix(self.points, self.spec)
            self._factor = cholesky_with_jitter(cov, self.spec.jitter)
        return self._factor

    def sample(self, n_samples: int, rng: np.random.Generator, n_channels: int = 1) -> np.ndarray:
        """Array [n_samples, n_channels, N] of independent fields"""
        if n_samples < 0 or n_channels < 1:
            raise GeometryError(
                f"Need n_samples >= 0 and n_channels >= 1, got {n_samples}, {n_channels}")
        z = rng.standard_normal((n_samples, n_channels, self.points.n_points))
        return z @ self.factor.lower.T

    def sample_batch(self, n_samples: int, rng: np.random.Generator, n_channels: int = 1) -> FunctionBatch:
        return FunctionBatch(values=self.sample(n_samples, rng, n_channels), points=self.points)


def sample_gp(spec: GPSpec, points: PointSet, n_samples: int, rng_seed: int,
              n_channels: int = 1) -> FunctionBatch:
    """
    Draw GP samples on a point set

    Args:
        spec: Kernel parameters
        points: Observation positions
        n_samples: Number of samples (>= 1)
        rng_seed: Seed of the generator behind the standard normal draws
        n_channels: Independent channels per sample (f_dim)

    Returns:
        FunctionBatch with values [n_samples, n_channels, N]
    """
    if n_samples < 1:
        raise GeometryError(f"n_samples must be >= 1, got {n_samples}")
    rng = np.random.default_rng(rng_seed)
    return GaussianProcessSampler(spec, points).sample_batch(n_samples, rng, n_channels)
