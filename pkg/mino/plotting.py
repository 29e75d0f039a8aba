"""
Plot-data emission

Every plot kind writes its numbers as a CSV table (pandas) and, where a
picture makes sense, a small SVG rendered with matplotlib's Agg backend.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .exceptions import GeometryError, ShapeError  # noqa: E402
from .geometry import FunctionBatch  # noqa: E402
from .metrics import radial_power_spectrum  # noqa: E402

logger = logging.getLogger(__name__)


def write_table(df: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False)
    logger.info(f"Wrote {len(df)} rows to {path}")
    return path


def _save_svg(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg")
    plt.close(fig)
    logger.info(f"Wrote {path}")
    return path


def loss_curve(history: pd.DataFrame, out_dir: Path) -> List[Path]:
    """loss.csv (one row per epoch) and loss.svg"""
    out_dir = Path(out_dir)
    table = write_table(history[["epoch", "mean_loss"]], out_dir / "loss.csv")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(history["epoch"], history["mean_loss"], marker="o", markersize=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    fig.tight_layout()
    return [table, _save_svg(fig, out_dir / "loss.svg")]


def consistency_curve(curve: pd.DataFrame, out_dir: Path) -> List[Path]:
    """consistency.csv and a two-panel SVG of SWD / MMD against subsample ratio"""
    out_dir = Path(out_dir)
    table = write_table(curve, out_dir / "consistency.csv")
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    axes[0].errorbar(curve["ratio"], curve["swd_mean"], yerr=curve["swd_std"], marker="o")
    axes[0].set_ylabel("averaged SWD")
    axes[1].plot(curve["ratio"], curve["mmd"], marker="o")
    axes[1].set_ylabel("MMD")
    for ax in axes:
        ax.set_xlabel("subsample ratio")
        ax.set_ylim(bottom=0)
    fig.tight_layout()
    return [table, _save_svg(fig, out_dir / "consistency.svg")]


def spectra_table(batches: Dict[str, FunctionBatch]) -> pd.DataFrame:
    """Radial power spectra of several grid batches side by side"""
    columns = {}
    for name, batch in batches.items():
        shape = batch.points.grid_shape
        if shape is None:
            raise GeometryError(f"Spectra need a declared regular grid ({name} has none)")
        values = batch.values.astype(np.float64).reshape((batch.n_samples, batch.f_dim) + tuple(shape))
        columns[f"power_{name}"] = radial_power_spectrum(values)
    n_bins = min(len(c) for c in columns.values())
    df = pd.DataFrame({k: v[:n_bins] for k, v in columns.items()})
    df.insert(0, "wavenumber", np.arange(n_bins))
    return df


def spectra_plot(batches: Dict[str, FunctionBatch], out_dir: Path) -> List[Path]:
    out_dir = Path(out_dir)
    df = spectra_table(batches)
    table = write_table(df, out_dir / "spectra.csv")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for column in df.columns[1:]:
        ax.loglog(df["wavenumber"][1:], df[column][1:], label=column.replace("power_", ""))
    ax.set_xlabel("radial wavenumber")
    ax.set_ylabel("mean power")
    ax.legend()
    fig.tight_layout()
    return [table, _save_svg(fig, out_dir / "spectra.svg")]


def sample_table(batch: FunctionBatch, index: int, channel: int = 0) -> pd.DataFrame:
    """Per-point coordinates and value of one sample"""
    if not 0 <= index < batch.n_samples:
        raise ShapeError(f"Sample index {index} out of range for {batch.n_samples} samples")
    coords = batch.points.positions
    df = pd.DataFrame(coords, columns=["x", "y", "z"][:coords.shape[1]])
    df["value"] = batch.values[index, channel].astype(np.float64)
    return df


def heatmap(batch: FunctionBatch, index: int, out_dir: Path, channel: int = 0) -> List[Path]:
    """
    One sample as a picture

    2D grids become an SVG heatmap; every point set also gets a per-point
    CSV so irregular meshes can be plotted externally.
    """
    out_dir = Path(out_dir)
    paths = [write_table(sample_table(batch, index, channel), out_dir / f"sample_{index}.csv")]
    shape = batch.points.grid_shape
    if shape is not None and len(shape) == 2:
        image = batch.values[index, channel].astype(np.float64).reshape(shape)
        fig, ax = plt.subplots(figsize=(4, 4))
        # first grid axis is x, so transpose to put it horizontal
        lo, hi = batch.points.positions.min(axis=0), batch.points.positions.max(axis=0)
        mesh = ax.imshow(image.T, origin="lower", cmap="viridis", extent=(lo[0], hi[0], lo[1], hi[1]))
        fig.colorbar(mesh, ax=ax, shrink=0.8)
        fig.tight_layout()
        paths.append(_save_svg(fig, out_dir / f"sample_{index}.svg"))
    return paths


def swd_variance_plot(study: pd.DataFrame, out_dir: Path, label: Optional[str] = None) -> List[Path]:
    out_dir = Path(out_dir)
    table = write_table(study, out_dir / "swd_variance.csv")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(study["n_run"], study["mean"], yerr=study["std"], marker="o", capsize=3, label=label)
    ax.set_xlabel("n_run")
    ax.set_ylabel("averaged SWD")
    fig.tight_layout()
    return [table, _save_svg(fig, out_dir / "swd_variance.svg")]
