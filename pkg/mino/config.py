"""
Run configuration

One JSON document describes a complete run: point set, dataset generation,
model, training, solver, metrics, plotting and file names. Every field can be
overridden from the command line with its dotted name, e.g.
``--train.epochs=30`` or ``--model.latent_grid.shape=[8,8]``.
"""

import json
import logging
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .data_io import read_mesh
from .exceptions import ConfigError
from .flow_matching import SolverConfig, TrainConfig
from .gaussian_field import GPSpec, Smoothness
from .geometry import Box, PointSet, make_grid_point_set, make_spherical_point_set, random_box_point_set
from .metrics import MetricsConfig
from .model import ModelConfig

logger = logging.getLogger(__name__)

DEFAULT_OUTPUT_DIR = "runs"


class PointsKind(str, Enum):
    RANDOM_BOX = "random_box"
    GRID = "grid"
    SPHERE = "sphere"
    FILE = "file"


class PlotKind(str, Enum):
    LOSS = "loss"
    CONSISTENCY = "consistency"
    SPECTRA = "spectra"
    HEATMAP = "heatmap"
    SWD_VARIANCE = "swd-variance"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PointsConfig(_Section):
    """Observation mesh used for data generation and GP sampling"""
    kind: PointsKind = PointsKind.RANDOM_BOX
    n_points: int = Field(500, ge=1)
    shape: Tuple[int, ...] = (64, 64)
    lower: Tuple[float, ...] = (0.0, 0.0)
    upper: Tuple[float, ...] = (1.0, 1.0)
    n_lon: int = Field(32, ge=1)
    n_lat: int = Field(16, ge=1)
    file: Optional[str] = None
    seed: int = 0

    @model_validator(mode="before")
    @classmethod
    def file_selects_kind(cls, data: Any) -> Any:
        """A given points.file replaces the default random mesh"""
        if not isinstance(data, dict) or not data.get("file"):
            return data
        kind = data.get("kind", PointsKind.RANDOM_BOX)
        if PointsKind(kind) not in (PointsKind.RANDOM_BOX, PointsKind.FILE):
            raise ValueError(f"points.file cannot be combined with points.kind={PointsKind(kind).value}")
        return {**data, "kind": PointsKind.FILE}

    @model_validator(mode="after")
    def check_file(self):
        if self.kind == PointsKind.FILE and not self.file:
            raise ValueError("points.kind=file needs points.file")
        return self

    def build(self) -> PointSet:
        if self.kind == PointsKind.FILE:
            return read_mesh(self.file)
        if self.kind == PointsKind.SPHERE:
            return make_spherical_point_set(self.n_lon, self.n_lat)
        box = Box(lower=self.lower, upper=self.upper)
        if self.kind == PointsKind.GRID:
            return make_grid_point_set(self.shape, box)
        return random_box_point_set(self.n_points, box, self.seed)


class DataConfig(_Section):
    """Mesh-GP dataset generation"""
    n_train: int = Field(2000, ge=0)
    n_test: int = Field(500, ge=0)
    seed: int = 0
    target_gp: GPSpec = GPSpec(length_scale=0.4, smoothness=Smoothness.THREE_HALVES)


class SampleConfig(_Section):
    """Plain GP sampling (sample-gp command)"""
    gp: GPSpec = GPSpec()
    n_samples: int = Field(100, ge=1)
    n_channels: int = Field(1, ge=1)
    seed: int = 0


class GenerateConfig(_Section):
    n_samples: int = Field(100, ge=0)
    seed: int = 1
    batch_size: int = Field(64, ge=1)


class PathsConfig(_Section):
    """File names, relative to the output directory unless absolute"""
    mesh: str = "mesh.mino"
    train: str = "train.mino"
    test: str = "test.mino"
    gp_samples: str = "gp_samples.mino"
    checkpoint: str = "model.ckpt"
    loss_history: str = "loss_history.csv"
    generated: str = "generated.mino"
    report: str = "report.json"
    plots: str = "plots"


class PlotConfig(_Section):
    kind: PlotKind = PlotKind.LOSS
    input: Optional[str] = None
    reference: Optional[str] = None
    sample_index: int = Field(0, ge=0)
    ratios: List[float] = [0.25, 0.5, 0.75, 1.0]
    n_run_values: List[int] = [5, 10, 20, 40]
    n_trials: int = Field(20, ge=2)
    n_samples: int = Field(500, ge=2)
    grid: Tuple[int, int] = (64, 64)
    gp_x: GPSpec = GPSpec(length_scale=0.3, smoothness=Smoothness.THREE_HALVES)
    gp_y: GPSpec = GPSpec(length_scale=0.01, smoothness=Smoothness.HALF)
    seed: int = 0


class RunConfig(_Section):
    """Complete resolved configuration of one command invocation"""
    output_dir: Optional[str] = None
    resume: bool = False
    points: PointsConfig = PointsConfig()
    data: DataConfig = DataConfig()
    sample: SampleConfig = SampleConfig()
    model: ModelConfig = ModelConfig.desk(pos_dim=2, latent_grid={"shape": (8, 8)})
    train: TrainConfig = TrainConfig(epochs=30, batch_size=32, learning_rate=1e-3)
    solver: SolverConfig = SolverConfig()
    generate: GenerateConfig = GenerateConfig()
    metrics: MetricsConfig = MetricsConfig()
    plot: PlotConfig = PlotConfig()
    paths: PathsConfig = PathsConfig()


def parse_value(text: str) -> Any:
    """JSON literal if it parses, raw string otherwise"""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """
    Apply ``section.field=value`` overrides to a nested config dict

    Args:
        raw: Parsed config document (modified copy is returned)
        overrides: Items like "train.epochs=5" (leading dashes allowed)

    Returns:
        The updated dict
    """
    result = json.loads(json.dumps(raw))
    for item in overrides:
        key, sep, value = item.lstrip("-").partition("=")
        if not sep or not key:
            raise ConfigError(f"Override must look like --section.field=value, got {item!r}")
        parts = key.split(".")
        node = result
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Cannot override {key!r}: {part!r} is not a section")
            node = child
        node[parts[-1]] = parse_value(value)
    return result


def load_run_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """
    Read a JSON config (or start from defaults) and apply overrides

    Raises:
        ConfigError: Unreadable file, malformed JSON or override
        pydantic.ValidationError: Unknown keys or invalid values
    """
    raw: Dict[str, Any] = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"Cannot read config {path}: {e.strerror}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config {path} is not valid JSON: {e}")
        if not isinstance(raw, dict):
            raise ConfigError(f"Config {path} must be a JSON object")
    if overrides:
        # overrides land on top of the defaults, so materialize them first
        raw = apply_overrides(RunConfig.model_validate(raw).model_dump(mode="json"), overrides)
    return RunConfig.model_validate(raw)


def resolve_output_dir(cfg: RunConfig, flag: Optional[str] = None) -> Path:
    """--output-dir flag, then the config, then MINO_OUTPUT_DIR"""
    return Path(flag or cfg.output_dir or os.getenv("MINO_OUTPUT_DIR", DEFAULT_OUTPUT_DIR))


def resolve_path(out_dir: Path, name: str) -> Path:
    path = Path(name)
    return path if path.is_absolute() else out_dir / path


def write_resolved_config(cfg: RunConfig, out_dir: Path, command: str) -> Path:
    """Echo the resolved config as config.<command>.json"""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"config.{command}.json"
    path.write_text(cfg.model_dump_json(indent=2))
    logger.info(f"Resolved config written to {path}")
    return path
