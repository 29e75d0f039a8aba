"""
Geometry for mesh-informed operators

Point sets (where function samples are observed), latent query grids (where
the encoder tokenizes them), fixed-radius neighbor search between the two and
sinusoidal embeddings of positions and time.

Conventions:
- Regular grids are cell-centered: along an axis split into n cells the points
  sit at lower + (i + 1/2) * width / n, so no point lies on the box boundary.
- Multi-axis grids are flattened with the first axis slowest (numpy "ij").
- Spherical grids use latitude band centers (no pole points) and longitudes
  2*pi*i / n_lon, latitude slowest.
"""

import hashlib
import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from .exceptions import GeometryError

logger = logging.getLogger(__name__)

SPHERE_RADIUS_RTOL = 1e-9
EMBED_BASE = 10000.0
EMBED_SCALE = 1000.0


@dataclass(frozen=True)
class Box:
    """Axis-aligned box domain"""
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]

    def __post_init__(self):
        lower = tuple(float(v) for v in self.lower)
        upper = tuple(float(v) for v in self.upper)
        if len(lower) != len(upper) or len(lower) not in (1, 2, 3):
            raise GeometryError(
                f"Box bounds must share a dimension in 1..3, got {lower} / {upper}")
        if not all(lo < hi for lo, hi in zip(lower, upper)):
            raise GeometryError(
                f"Box lower bound must be below upper bound: {lower} / {upper}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def unit(cls, dim: int) -> "Box":
        return cls(lower=(0.0,) * dim, upper=(1.0,) * dim)

    @property
    def dim(self) -> int:
        return len(self.lower)

    def to_dict(self) -> dict:
        return {"kind": "box", "lower": list(self.lower), "upper": list(self.upper)}


@dataclass(frozen=True)
class Sphere:
    """Sphere of the given radius embedded in R^3"""
    radius: float = 1.0

    def __post_init__(self):
        if not self.radius > 0:
            raise GeometryError(f"Sphere radius must be positive, got {self.radius}")
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self) -> int:
        return 3

    def to_dict(self) -> dict:
        return {"kind": "sphere", "radius": self.radius}


Domain = Union[Box, Sphere]


def domain_from_dict(payload: dict) -> Domain:
    """Rebuild a domain from its `to_dict` form"""
    kind = payload.get("kind")
    if kind == "box":
        return Box(lower=tuple(payload["lower"]), upper=tuple(payload["upper"]))
    if kind == "sphere":
        return Sphere(radius=payload["radius"])
    raise GeometryError(f"Unknown domain kind: {kind!r}")


@dataclass(frozen=True, eq=False)
class PointSet:
    """Observation positions of a function discretization

    Args:
        positions: Array [N, P_dim] of coordinates
        domain: Box or Sphere the positions live in
        grid_shape: Set when the points form a declared regular grid
    """
    positions: np.ndarray
    domain: Domain
    grid_shape: Optional[Tuple[int, ...]] = None
    _hash: Optional[str] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        positions = np.array(self.positions, dtype=np.float64, order="C", copy=True)
        if positions.ndim != 2 or positions.shape[1] not in (1, 2, 3):
            raise GeometryError(
                f"Positions must be an [N, P_dim] array with P_dim in 1..3, got shape {positions.shape}")
        if not np.all(np.isfinite(positions)):
            raise GeometryError("Positions contain non-finite coordinates")
        if positions.shape[1] != self.domain.dim:
            raise GeometryError(
                f"Positions have P_dim={positions.shape[1]} but the domain is {self.domain.dim}-dimensional")

        if isinstance(self.domain, Box) and len(positions):
            lower = np.asarray(self.domain.lower)
            upper = np.asarray(self.domain.upper)
            outside = np.any((positions < lower) | (positions > upper), axis=1)
            if outside.any():
                raise GeometryError(
                    f"{int(outside.sum())} positions lie outside the box {self.domain.lower} / {self.domain.upper}")
        elif isinstance(self.domain, Sphere) and len(positions):
            norms = np.linalg.norm(positions, axis=1)
            off = np.abs(norms - self.domain.radius) > SPHERE_RADIUS_RTOL * self.domain.radius
            if off.any():
                raise GeometryError(
                    f"{int(off.sum())} positions are off the sphere of radius {self.domain.radius}")

        if self.grid_shape is not None:
            grid_shape = tuple(int(n) for n in self.grid_shape)
            if int(np.prod(grid_shape)) != positions.shape[0]:
                raise GeometryError(
                    f"grid_shape {grid_shape} does not match {positions.shape[0]} points")
            object.__setattr__(self, "grid_shape", grid_shape)

        positions.setflags(write=False)
        object.__setattr__(self, "positions", positions)

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def content_hash(self) -> str:
        """Stable digest of the coordinates and domain"""
        if self._hash is None:
            digest = hashlib.sha1(self.positions.tobytes())
            digest.update(repr(self.domain.to_dict()).encode())
            object.__setattr__(self, "_hash", digest.hexdigest())
        return self._hash

    def subset(self, indices: np.ndarray) -> "PointSet":
        """Restrict to the given point indices (drops any grid declaration)"""
        return PointSet(positions=self.positions[np.asarray(indices)], domain=self.domain)

    def same_discretization(self, other: "PointSet") -> bool:
        return self.positions.shape == other.positions.shape and np.array_equal(
            self.positions, other.positions)


@dataclass(frozen=True)
class RegularSpec:
    """Tensor-product latent grid, one cell count per axis"""
    shape: Tuple[int, ...]


@dataclass(frozen=True)
class SphericalSpec:
    """Latitude/longitude latent grid on the unit sphere"""
    n_lon: int
    n_lat: int


@dataclass(frozen=True, eq=False)
class LatentGrid:
    """Fixed query points the encoder maps every input function onto"""
    query_positions: np.ndarray
    spec: Union[RegularSpec, SphericalSpec]

    @property
    def n_nodes(self) -> int:
        return self.query_positions.shape[0]

    @property
    def dim(self) -> int:
        return self.query_positions.shape[1]


@dataclass(frozen=True, eq=False)
class EdgeList:
    """Radius-graph edges from latent queries to input points

    pairs[:, 0] is the query index, pairs[:, 1] the input index; rows are
    sorted by (query, input).
    """
    pairs: np.ndarray
    degree: np.ndarray
    n_inputs: int
    radius: float
    warning: Optional[str] = None

    @property
    def n_edges(self) -> int:
        return self.pairs.shape[0]

    @property
    def n_queries(self) -> int:
        return self.degree.shape[0]

    @property
    def empty_queries(self) -> int:
        """Number of queries without any neighbor"""
        return int(np.count_nonzero(self.degree == 0))


def _cell_centers(lower: float, upper: float, n: int) -> np.ndarray:
    return lower + (np.arange(n) + 0.5) * (upper - lower) / n


def _tensor_grid(shape: Tuple[int, ...], box: Box) -> np.ndarray:
    axes = [_cell_centers(lo, hi, n) for lo, hi, n in zip(box.lower, box.upper, shape)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _grid_shape(nx: int, ny: Optional[int], nz: Optional[int], dim: int) -> Tuple[int, ...]:
    counts = [nx, 1 if ny is None else ny, 1 if nz is None else nz]
    if any(int(n) < 1 for n in counts):
        raise GeometryError(f"Grid cell counts must be >= 1, got {counts}")
    if dim == 1 and counts[1] != 1 or dim < 3 and counts[2] != 1:
        raise GeometryError(
            f"Grid counts {counts} do not fit a {dim}-dimensional box")
    return tuple(int(n) for n in counts[:dim])


def make_regular_grid(nx: int, ny: Optional[int], box: Box, nz: Optional[int] = None) -> LatentGrid:
    """
    Build a cell-centered regular latent grid over a box

    Args:
        nx, ny, nz: Cells per axis (ny/nz only for 2D/3D boxes)
        box: Domain box

    Returns:
        LatentGrid with prod(shape) query points
    """
    shape = _grid_shape(nx, ny, nz, box.dim)
    return LatentGrid(query_positions=_tensor_grid(shape, box), spec=RegularSpec(shape=shape))


def make_grid_point_set(shape: Tuple[int, ...], box: Box) -> PointSet:
    """Regular cell-centered observation grid that declares its grid shape"""
    shape = tuple(int(n) for n in shape)
    if len(shape) != box.dim or any(n < 1 for n in shape):
        raise GeometryError(f"Grid shape {shape} does not fit a {box.dim}-dimensional box")
    return PointSet(positions=_tensor_grid(shape, box), domain=box, grid_shape=shape)


def latlon_to_xyz(lat_deg: np.ndarray, lon_deg: np.ndarray, radius: float = 1.0) -> np.ndarray:
    """Convert latitude/longitude in degrees to R^3 coordinates"""
    lat = np.deg2rad(np.asarray(lat_deg, dtype=np.float64))
    lon = np.deg2rad(np.asarray(lon_deg, dtype=np.float64))
    return radius * np.stack(
        [np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1)


def _spherical_positions(n_lon: int, n_lat: int) -> np.ndarray:
    if n_lon < 1 or n_lat < 1:
        raise GeometryError(f"Spherical grid needs n_lon, n_lat >= 1, got {n_lon}, {n_lat}")
    lat = -90.0 + 180.0 * (np.arange(n_lat) + 0.5) / n_lat
    lon = 360.0 * np.arange(n_lon) / n_lon
    lat_grid, lon_grid = np.meshgrid(lat, lon, indexing="ij")
    xyz = latlon_to_xyz(lat_grid.ravel(), lon_grid.ravel())
    # project back onto the unit sphere to keep norms exact to rounding
    return xyz / np.linalg.norm(xyz, axis=1, keepdims=True)


def make_spherical_grid(n_lon: int, n_lat: int) -> LatentGrid:
    """Latent query grid of n_lon * n_lat unit vectors"""
    return LatentGrid(query_positions=_spherical_positions(n_lon, n_lat),
                      spec=SphericalSpec(n_lon=n_lon, n_lat=n_lat))


def make_spherical_point_set(n_lon: int, n_lat: int) -> PointSet:
    """Observation grid on the unit sphere (lat/lon converted to R^3)"""
    return PointSet(positions=_spherical_positions(n_lon, n_lat), domain=Sphere(1.0))


def random_box_point_set(n_points: int, box: Box, seed: int) -> PointSet:
    """Irregular mesh of uniformly random points in a box"""
    if n_points < 1:
        raise GeometryError(f"n_points must be >= 1, got {n_points}")
    rng = np.random.default_rng(seed)
    lower = np.asarray(box.lower)
    upper = np.asarray(box.upper)
    return PointSet(positions=rng.uniform(lower, upper, size=(n_points, box.dim)), domain=box)


def _finish_edges(pairs: np.ndarray, n_queries: int, n_inputs: int, radius: float) -> EdgeList:
    if pairs.shape[0]:
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        pairs = pairs[order]
    degree = np.bincount(pairs[:, 0], minlength=n_queries).astype(np.int64)
    warning = None
    if pairs.shape[0] == 0:
        warning = f"radius graph with r={radius} has no edges; the encoder sees no input"
        logger.warning(warning)
    return EdgeList(pairs=pairs, degree=degree, n_inputs=n_inputs, radius=radius, warning=warning)


def _check_graph_inputs(input_points: PointSet, query: LatentGrid, radius: float):
    if not radius > 0:
        raise GeometryError(f"radius must be positive, got {radius}")
    if input_points.dim != query.dim:
        raise GeometryError(
            f"Input points are {input_points.dim}-D but queries are {query.dim}-D")


def build_radius_graph(input_points: PointSet, query: LatentGrid, radius: float) -> EdgeList:
    """
    All (query, input) pairs within Euclidean distance `radius`

    Uses uniform spatial hashing with cells of side ~radius, so every neighbor
    of a query lies in the 3^P_dim cells around the query's own cell.

    Args:
        input_points: Observation positions
        query: Latent query grid
        radius: Search radius r > 0

    Returns:
        EdgeList sorted by (query, input); `warning` is set when empty
    """
    _check_graph_inputs(input_points, query, radius)
    pos = input_points.positions
    qpos = query.query_positions
    n_queries = qpos.shape[0]
    if pos.shape[0] == 0 or n_queries == 0:
        return _finish_edges(np.zeros((0, 2), dtype=np.int64), n_queries, pos.shape[0], radius)

    # padded cell size so a neighbor at distance exactly r never lands two cells away
    cell = radius * (1.0 + 1e-9)
    origin = np.minimum(pos.min(axis=0), qpos.min(axis=0))
    in_cells = np.floor((pos - origin) / cell).astype(np.int64) + 1
    q_cells = np.floor((qpos - origin) / cell).astype(np.int64) + 1
    dims = tuple(int(d) for d in np.maximum(in_cells.max(axis=0), q_cells.max(axis=0)) + 2)

    keys = np.ravel_multi_index(in_cells.T, dims)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    offsets = np.array(list(itertools.product((-1, 0, 1), repeat=pos.shape[1])), dtype=np.int64)

    chunks = []
    for q in range(n_queries):
        neighbor_keys = np.ravel_multi_index((q_cells[q] + offsets).T, dims)
        lo = np.searchsorted(sorted_keys, neighbor_keys, side="left")
        hi = np.searchsorted(sorted_keys, neighbor_keys, side="right")
        candidates = np.concatenate([order[a:b] for a, b in zip(lo, hi)])
        if candidates.size == 0:
            continue
        dist = np.sqrt(((pos[candidates] - qpos[q]) ** 2).sum(axis=1))
        hits = np.sort(candidates[dist <= radius])
        if hits.size:
            chunks.append(np.stack([np.full(hits.size, q, dtype=np.int64), hits], axis=1))

    pairs = np.concatenate(chunks) if chunks else np.zeros((0, 2), dtype=np.int64)
    return _finish_edges(pairs, n_queries, pos.shape[0], radius)


def radius_graph_oracle(input_points: PointSet, query: LatentGrid, radius: float) -> EdgeList:
    """Reference all-pairs O(N * M) version of build_radius_graph"""
    _check_graph_inputs(input_points, query, radius)
    pos = input_points.positions
    qpos = query.query_positions
    dist = np.sqrt(((pos[None, :, :] - qpos[:, None, :]) ** 2).sum(axis=-1))
    q_idx, i_idx = np.nonzero(dist <= radius)
    pairs = np.stack([q_idx, i_idx], axis=1).astype(np.int64)
    return _finish_edges(pairs, qpos.shape[0], pos.shape[0], radius)


def embedding_frequencies(embed_dim: int, base: float = EMBED_BASE,
                          scale: float = EMBED_SCALE) -> np.ndarray:
    """Geometric ladder w_k = scale * base^(-2k / embed_dim), k = 1..embed_dim/2"""
    if embed_dim < 2 or embed_dim % 2:
        raise GeometryError(f"embed_dim must be even and >= 2, got {embed_dim}")
    k = np.arange(1, embed_dim // 2 + 1, dtype=np.float64)
    return scale * base ** (-2.0 * k / embed_dim)


def sinusoidal_embed(values, embed_dim: int, base: float = EMBED_BASE,
                     scale: float = EMBED_SCALE) -> np.ndarray:
    """
    Sinusoidal embedding of scalars or of multi-dimensional positions

    Each scalar v becomes [sin(w_1 v) .. sin(w_K v), cos(w_1 v) .. cos(w_K v)].
    For an [N, P] input every coordinate is embedded and the P blocks are
    concatenated, giving [N, P * embed_dim].

    Args:
        values: Scalar, vector [N] or matrix [N, P]
        embed_dim: Width per coordinate (even)

    Returns:
        Matrix [N, embed_dim] or [N, P * embed_dim]
    """
    freqs = embedding_frequencies(embed_dim, base, scale)
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr[:, None]
    elif arr.ndim != 2:
        raise GeometryError(f"Cannot embed an array of shape {arr.shape}")

    phase = arr[:, :, None] * freqs[None, None, :]
    emb = np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)
    return emb.reshape(arr.shape[0], arr.shape[1] * embed_dim)


@dataclass(frozen=True, eq=False)
class FunctionBatch:
    """S function samples observed on one point set

    values has shape [S, f_dim, N] (sample-major, channels, points).
    """
    values: np.ndarray
    points: PointSet

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise GeometryError(f"Function values must be [S, f_dim, N], got shape {values.shape}")
        if values.shape[2] != self.points.n_points:
            raise GeometryError(
                f"Values cover {values.shape[2]} points but the point set has {self.points.n_points}")
        object.__setattr__(self, "values", values)

    @classmethod
    def empty(cls, points: PointSet, f_dim: int = 1) -> "FunctionBatch":
        return cls(values=np.zeros((0, f_dim, points.n_points)), points=points)

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def f_dim(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.n_samples

    def flatten(self) -> np.ndarray:
        """Samples as rows of length f_dim * N"""
        return self.values.reshape(self.n_samples, self.f_dim * self.points.n_points)

    def take(self, indices) -> "FunctionBatch":
        """Select samples"""
        return FunctionBatch(values=self.values[np.asarray(indices)], points=self.points)

    def restrict(self, point_indices) -> "FunctionBatch":
        """Observe every sample on a subset of the points"""
        point_indices = np.asarray(point_indices)
        return FunctionBatch(values=self.values[:, :, point_indices],
                             points=self.points.subset(point_indices))
