"""
Operator flow matching: training and ODE sample generation

Training regresses the model velocity onto v = f1 - f0 along the straight
path f_t = (1 - t) f0 + t f1, with base samples f0 drawn fresh from a
Gaussian-process measure on the data mesh every step and (optionally) paired
with the data minibatch by an exact optimal assignment. Generation integrates
df/dt = v(f, t) from t=0 to t=1 with fixed-step RK4 or adaptive
Dormand-Prince 4(5).
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.integrate import solve_ivp
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from . import diff_engine as de
from .exceptions import GeometryError, NumericalError, ShapeError
from .gaussian_field import GaussianProcessSampler, GPSpec
from .geometry import FunctionBatch, PointSet
from .optim import AdamW, StepLR, clip_grad_norm

logger = logging.getLogger(__name__)

RK45_STAGES = 6


class SolverMethod(str, Enum):
    RK4_FIXED = "rk4_fixed"
    DORMAND_PRINCE = "dormand_prince"


class TrainConfig(BaseModel):
    """Optimization settings of a flow-matching run"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(300, ge=1)
    batch_size: int = Field(96, ge=1)
    learning_rate: float = Field(1e-4, gt=0)
    lr_decay_gamma: float = Field(0.8, gt=0, le=1)
    lr_decay_every: int = Field(25, ge=1)
    weight_decay: float = Field(1e-4, ge=0)
    grad_clip: float = Field(1.0, gt=0)
    use_ot_coupling: bool = True
    point_subsample: float = Field(1.0, gt=0, le=1)
    seed: int = 0
    base_gp: GPSpec = GPSpec()

    @model_validator(mode="after")
    def check_coupling_batch(self):
        if self.use_ot_coupling and self.batch_size < 2:
            raise ValueError("OT coupling needs batch_size >= 2")
        return self


class SolverConfig(BaseModel):
    """ODE solver for generation"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    method: SolverMethod = SolverMethod.DORMAND_PRINCE
    steps: int = Field(100, ge=1)
    rtol: float = Field(1e-5, gt=0)
    atol: float = Field(1e-5, gt=0)
    max_steps: int = Field(100000, ge=1)


@dataclass(frozen=True)
class CouplingPlan:
    """Base sample i is paired with data sample permutation[i]"""
    permutation: np.ndarray
    total_cost: float


def ot_couple(base: FunctionBatch, data: FunctionBatch) -> CouplingPlan:
    """
    Exact minibatch optimal assignment under squared L2 cost

    Args:
        base: Base samples f0
        data: Data samples f1 on the same points

    Returns:
        CouplingPlan minimizing sum_i ||f0_i - f1_perm[i]||^2
    """
    if base.n_samples != data.n_samples:
        raise ShapeError(f"Cannot couple {base.n_samples} base samples with {data.n_samples} data samples")
    if base.f_dim != data.f_dim or not base.points.same_discretization(data.points):
        raise GeometryError("Base and data batches must share f_dim and discretization")
    if base.n_samples == 0:
        return CouplingPlan(permutation=np.zeros(0, dtype=np.int64), total_cost=0.0)

    cost = cdist(base.flatten().astype(np.float64), data.flatten().astype(np.float64), "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return CouplingPlan(permutation=cols.astype(np.int64), total_cost=float(cost[rows, cols].sum()))


def path_sample(f0: np.ndarray, f1: np.ndarray, t) -> Tuple[np.ndarray, np.ndarray]:
    """
    Point on the straight path and its velocity target

    Args:
        f0, f1: Arrays of equal shape; a leading axis indexes samples
        t: Scalar, or one time per sample

    Returns:
        (f_t, f1 - f0)
    """
    f0 = np.asarray(f0, dtype=np.float64)
    f1 = np.asarray(f1, dtype=np.float64)
    if f0.shape != f1.shape:
        raise ShapeError(f"Path endpoints differ in shape: {f0.shape} vs {f1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 1:
        if t.shape[0] != f0.shape[0]:
            raise ShapeError(f"Got {t.shape[0]} times for {f0.shape[0]} samples")
        t = t.reshape((-1,) + (1,) * (f0.ndim - 1))
    return (1.0 - t) * f0 + t * f1, f1 - f0


class Trainer:
    """
    Flow-matching trainer for one model on one dataset

    Every epoch draws its own random stream from (seed, epoch), so a run
    resumed at epoch k replays the same batches as an uninterrupted one.
    """

    def __init__(self, model, dataset: FunctionBatch, cfg: TrainConfig):
        if dataset.f_dim != model.config.f_dim:
            raise ShapeError(f"Dataset has f_dim={dataset.f_dim}, model expects {model.config.f_dim}")
        if dataset.n_samples < 1:
            raise ShapeError("Cannot train on an empty dataset")
        if cfg.use_ot_coupling and dataset.n_samples < 2:
            raise ShapeError("OT coupling needs at least two training samples")
        self.model = model
        self.dataset = dataset
        self.cfg = cfg
        self.sampler = GaussianProcessSampler(cfg.base_gp, dataset.points)
        self.optimizer = AdamW(model.params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
        self.schedule = StepLR(cfg.learning_rate, cfg.lr_decay_gamma, cfg.lr_decay_every)
        self.global_step = 0

    def _batches(self, rng: np.random.Generator):
        n, size = self.dataset.n_samples, min(self.cfg.batch_size, self.dataset.n_samples)
        order = rng.permutation(n)
        # trailing partial batch is dropped so every step sees `size` pairs
        for k in range(n // size):
            yield order[k * size:(k + 1) * size]

    def _points_for_step(self, rng: np.random.Generator) -> Optional[np.ndarray]:
        if self.cfg.point_subsample >= 1.0:
            return None
        n = self.dataset.points.n_points
        m = max(1, int(round(self.cfg.point_subsample * n)))
        return np.sort(rng.choice(n, size=m, replace=False))

    def step(self, indices: np.ndarray, rng: np.random.Generator) -> float:
        """One optimization step on the given data samples"""
        f1 = self.dataset.values[indices].astype(np.float64)
        f0 = self.sampler.sample(len(indices), rng, self.dataset.f_dim)
        points = self.dataset.points
        point_idx = self._points_for_step(rng)
        if point_idx is not None:
            points = points.subset(point_idx)
            f0, f1 = f0[..., point_idx], f1[..., point_idx]

        if self.cfg.use_ot_coupling:
            plan = ot_couple(FunctionBatch(values=f0, points=points), FunctionBatch(values=f1, points=points))
            f1 = f1[plan.permutation]

        t = rng.uniform(0.0, 1.0, size=len(indices))
        f_t, target = path_sample(f0, f1, t)
        loss = de.mse(self.model.forward(f_t, points, t), target)
        value = float(loss.value)
        if not np.isfinite(value):
            logger.error(f"Loss became {value} at step {self.global_step}")
            raise NumericalError(f"Non-finite loss at step {self.global_step}", self.global_step)

        de.backward(loss)
        clip_grad_norm(self.model.params, self.cfg.grad_clip)
        self.optimizer.step()
        self.global_step += 1
        return value

    def run_epoch(self, epoch: int) -> float:
        self.optimizer.lr = self.schedule(epoch)
        rng = np.random.default_rng([self.cfg.seed, epoch])
        losses = [self.step(idx, rng) for idx in self._batches(rng)]
        return float(np.mean(losses))

    def fit(self, start_epoch: int = 0,
            on_epoch_end: Optional[Callable[[int, float], None]] = None) -> pd.DataFrame:
        """
        Train from `start_epoch` to cfg.epochs

        Returns:
            DataFrame with columns epoch, mean_loss, learning_rate
        """
        rows = []
        for epoch in range(start_epoch, self.cfg.epochs):
            mean_loss = self.run_epoch(epoch)
            rows.append({"epoch": epoch, "mean_loss": mean_loss, "learning_rate": self.optimizer.lr})
            logger.info(f"Epoch {epoch}: loss={mean_loss:.6f} lr={self.optimizer.lr:.2e}")
            if on_epoch_end is not None:
                on_epoch_end(epoch, mean_loss)
        return pd.DataFrame(rows, columns=["epoch", "mean_loss", "learning_rate"])


def train(model, dataset: FunctionBatch, cfg: TrainConfig, start_epoch: int = 0,
          optimizer_state: Optional[dict] = None) -> pd.DataFrame:
    """
    Flow-matching training loop

    Args:
        model: VelocityModel to update in place
        dataset: Target samples
        cfg: Training settings
        start_epoch: First epoch to run (resume)
        optimizer_state: Optional {"m", "v", "step_count"} from a checkpoint

    Returns:
        Per-epoch loss history
    """
    trainer = Trainer(model, dataset, cfg)
    if optimizer_state is not None:
        trainer.optimizer.load_state(optimizer_state["m"], optimizer_state["v"], optimizer_state["step_count"])
        trainer.global_step = int(optimizer_state["step_count"])
    logger.info(f"Training for epochs {start_epoch}..{cfg.epochs - 1} on {dataset.n_samples} samples "
                f"({dataset.points.n_points} points)")
    return trainer.fit(start_epoch)


def loss_table(history: pd.DataFrame) -> str:
    """Two-column (epoch, mean_loss) text form of a loss history"""
    return history[["epoch", "mean_loss"]].to_csv(index=False)


def _rk4(field, y: np.ndarray, steps: int) -> np.ndarray:
    h = 1.0 / steps
    for k in range(steps):
        t = k * h
        k1 = field(t, y)
        k2 = field(t + h / 2, y + h / 2 * k1)
        k3 = field(t + h / 2, y + h / 2 * k2)
        k4 = field(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def _dormand_prince(field, y: np.ndarray, rtol: float, atol: float, max_steps: int) -> np.ndarray:
    shape = y.shape
    # RK45 evaluates the field six times per attempted step
    max_evaluations = RK45_STAGES * max_steps + 2
    evaluations = 0

    def flat_field(t, y_flat):
        nonlocal evaluations
        evaluations += 1
        if evaluations > max_evaluations:
            raise NumericalError(f"Dormand-Prince exceeded {max_steps} steps at t={t:.6f}", evaluations)
        return field(t, y_flat.reshape(shape)).ravel()

    sol = solve_ivp(flat_field, (0.0, 1.0), y.ravel(), method="RK45", rtol=rtol, atol=atol)
    if sol.status != 0:
        t_fail = float(sol.t[-1]) if sol.t.size else 0.0
        raise NumericalError(f"Dormand-Prince failed at t={t_fail:.6f}: {sol.message}", int(sol.nfev))
    y_end = sol.y[:, -1]
    if not np.all(np.isfinite(y_end)):
        raise NumericalError("Dormand-Prince produced non-finite values", int(sol.nfev))

    logger.debug(f"Dormand-Prince finished: {sol.t.size - 1} accepted steps, {sol.nfev} field evaluations")
    return y_end.reshape(shape)


def integrate(model, f0: np.ndarray, pos: PointSet, solver: SolverConfig) -> np.ndarray:
    """
    Solve df/dt = model.velocity(f, pos, t) from t=0 to t=1

    Args:
        model: Anything with a velocity(f, pos, t) method
        f0: Initial values [..., f_dim, N]
        pos: Points the values live on
        solver: Method and step / tolerance settings

    Returns:
        f at t=1, same shape as f0
    """
    y0 = np.asarray(f0, dtype=np.float64)

    def field(t, y):
        return np.asarray(model.velocity(y, pos, t), dtype=np.float64)

    if solver.method == SolverMethod.RK4_FIXED:
        return _rk4(field, y0, solver.steps)
    return _dormand_prince(field, y0, solver.rtol, solver.atol, solver.max_steps)


def generate(model, base_gp: GPSpec, pos: PointSet, n: int, solver: SolverConfig, seed: int,
             batch_size: int = 64) -> FunctionBatch:
    """
    Push n base samples on `pos` through the learned flow

    Samples are generated in chunks of `batch_size`; chunk i draws its base
    samples from the i-th stream spawned from `seed`. `pos` need not be the
    training discretization.
    """
    f_dim = model.config.f_dim
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    if n == 0:
        return FunctionBatch.empty(pos, f_dim)

    sampler = GaussianProcessSampler(base_gp, pos)
    n_chunks = math.ceil(n / batch_size)
    streams = np.random.SeedSequence(seed).spawn(n_chunks)
    chunks = []
    for i, stream in enumerate(streams):
        size = min(batch_size, n - i * batch_size)
        f0 = sampler.sample(size, np.random.default_rng(stream), f_dim)
        chunks.append(integrate(model, f0, pos, solver))
        logger.info(f"Generated {i * batch_size + size}/{n} samples")
    return FunctionBatch(values=np.concatenate(chunks, axis=0), points=pos)
