"""
Self-describing binary containers for function datasets and meshes

Layout (all integers little-endian, see docs/CONTAINER_FORMAT.md):

    magic        4 bytes   b"MINO"
    header_len   uint32
    header       header_len bytes of UTF-8 JSON (sorted keys)
    positions    float64[N * P_dim]
    values       float32[S * f_dim * N], sample-major

A mesh file is a container with S = 0. The same framing (magic, length,
JSON header, blobs) is reused for model checkpoints.
"""

import json
import logging
import struct
import zlib
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from .exceptions import ContainerError, GeometryError
from .gaussian_field import GPSpec, Smoothness, sample_gp
from .geometry import FunctionBatch, PointSet, domain_from_dict

logger = logging.getLogger(__name__)

CONTAINER_MAGIC = b"MINO"
FORMAT_VERSION = 1
PREFIX = struct.Struct("<4sI")

MESH_GP_SPEC = GPSpec(length_scale=0.4, smoothness=Smoothness.THREE_HALVES, variance=1.0)

PathLike = Union[str, Path]


def header_checksum(header: Dict[str, Any]) -> int:
    """CRC-32 of the canonical JSON of every header field except the checksum"""
    fields = {k: v for k, v in header.items() if k != "checksum"}
    canonical = json.dumps(fields, sort_keys=True, separators=(",", ":"))
    return zlib.crc32(canonical.encode("utf-8"))


def encode_header(magic: bytes, header: Dict[str, Any]) -> bytes:
    """Magic, length prefix and JSON header with its checksum filled in"""
    header = dict(header)
    header["checksum"] = header_checksum(header)
    body = json.dumps(header, sort_keys=True).encode("utf-8")
    return PREFIX.pack(magic, len(body)) + body


def decode_header(raw: bytes, magic: bytes, path: PathLike) -> Tuple[Dict[str, Any], int]:
    """
    Parse the framing prefix and header of a file image

    Args:
        raw: Leading bytes of the file (at least the prefix and header)
        magic: Expected 4-byte magic
        path: File name used in error messages

    Returns:
        (header dict, offset of the first blob byte)
    """
    if len(raw) < PREFIX.size:
        raise ContainerError(f"File is truncated: missing {PREFIX.size - len(raw)} bytes of prefix", str(path))
    found, length = PREFIX.unpack_from(raw)
    if found != magic:
        if found == magic[::-1]:
            raise ContainerError("Byte order mismatch: magic constant is byte-swapped", str(path))
        raise ContainerError(f"Bad magic {found!r}, expected {magic!r}", str(path))
    end = PREFIX.size + length
    if len(raw) < end:
        raise ContainerError(f"File is truncated: missing {end - len(raw)} bytes of header", str(path))

    try:
        header = json.loads(raw[PREFIX.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"Header is not valid JSON: {e}", str(path))
    if header.get("format_version") != FORMAT_VERSION:
        raise ContainerError(
            f"Unsupported format_version {header.get('format_version')}, expected {FORMAT_VERSION}", str(path))
    if header.get("checksum") != header_checksum(header):
        raise ContainerError("Header checksum mismatch", str(path))
    return header, end


def require_bytes(raw: bytes, needed: int, path: PathLike) -> None:
    if len(raw) < needed:
        raise ContainerError(f"File is truncated: missing {needed - len(raw)} bytes", str(path))


def write_bytes(path: PathLike, payload: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as e:
        logger.error(f"Failed to write {path}: {e}")
        raise ContainerError(f"Cannot write file: {e.strerror}", str(path))


def read_bytes(path: PathLike, limit: Optional[int] = None) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read() if limit is None else fh.read(limit)
    except OSError as e:
        raise ContainerError(f"Cannot read file: {e.strerror}", str(path))


def write_container(path: PathLike, batch: FunctionBatch,
                    provenance: Optional[Dict[str, Any]] = None) -> None:
    """
    Write a FunctionBatch (or a mesh, when it has no samples)

    Args:
        path: Destination file
        batch: Samples and their shared point set
        provenance: Free-form JSON-serializable notes stored in the header
    """
    points = batch.points
    header = {
        "format_version": FORMAT_VERSION,
        "P_dim": points.dim,
        "f_dim": batch.f_dim,
        "N": points.n_points,
        "S": batch.n_samples,
        "domain": points.domain.to_dict(),
        "grid_shape": list(points.grid_shape) if points.grid_shape is not None else None,
        "provenance": provenance or {},
    }
    payload = b"".join([
        encode_header(CONTAINER_MAGIC, header),
        np.ascontiguousarray(points.positions, dtype="<f8").tobytes(),
        np.ascontiguousarray(batch.values, dtype="<f4").tobytes(),
    ])
    write_bytes(path, payload)
    logger.info(f"Wrote {batch.n_samples} samples on {points.n_points} points to {path}")


def read_container_header(path: PathLike) -> Dict[str, Any]:
    """Header of a container without reading the blobs"""
    prefix = read_bytes(path, PREFIX.size)
    if len(prefix) == PREFIX.size:
        length = PREFIX.unpack(prefix)[1]
        # a byte-swapped file has a garbage length; let decode_header report the magic
        if prefix[:4] == CONTAINER_MAGIC:
            prefix = read_bytes(path, PREFIX.size + length)
    header, _ = decode_header(prefix, CONTAINER_MAGIC, path)
    return header


def read_container(path: PathLike) -> FunctionBatch:
    """Inverse of write_container"""
    raw = read_bytes(path)
    header, offset = decode_header(raw, CONTAINER_MAGIC, path)
    n, p, f, s = header["N"], header["P_dim"], header["f_dim"], header["S"]
    pos_bytes = 8 * n * p
    val_bytes = 4 * s * f * n
    require_bytes(raw, offset + pos_bytes + val_bytes, path)

    positions = np.frombuffer(raw, dtype="<f8", count=n * p, offset=offset).reshape(n, p)
    values = np.frombuffer(raw, dtype="<f4", count=s * f * n, offset=offset + pos_bytes)
    try:
        grid_shape = tuple(header["grid_shape"]) if header.get("grid_shape") else None
        points = PointSet(positions=positions.astype(np.float64),
                          domain=domain_from_dict(header["domain"]), grid_shape=grid_shape)
    except GeometryError as e:
        raise ContainerError(f"Invalid point set in container: {e}", str(path))
    return FunctionBatch(values=values.astype(np.float32).reshape(s, f, n), points=points)


def write_mesh(path: PathLike, points: PointSet, provenance: Optional[Dict[str, Any]] = None) -> None:
    write_container(path, FunctionBatch.empty(points), provenance)


def read_mesh(path: PathLike) -> PointSet:
    return read_container(path).points


def gen_mesh_gp(points: PointSet, n_train: int, n_test: int, seed: int,
                spec: GPSpec = MESH_GP_SPEC, n_channels: int = 1) -> Tuple[FunctionBatch, FunctionBatch]:
    """
    Synthetic Mesh-GP dataset on an arbitrary point set

    All n_train + n_test samples are drawn from one seeded stream and split by
    a seeded permutation into disjoint train and test batches.

    Args:
        points: Observation mesh
        n_train, n_test: Split sizes
        seed: Seed of both the sample stream and the split
        spec: Matérn target measure (length scale 0.4, nu 1.5 by default)

    Returns:
        (train, test)
    """
    if n_train < 0 or n_test < 0 or n_train + n_test < 1:
        raise GeometryError(f"Need a non-empty dataset, got n_train={n_train}, n_test={n_test}")
    sample_seed, split_seed = np.random.SeedSequence(seed).spawn(2)
    total = n_train + n_test
    batch = sample_gp(spec, points, total, rng_seed=sample_seed, n_channels=n_channels)
    order = np.random.default_rng(split_seed).permutation(total)
    logger.info(f"Generated Mesh-GP data: {n_train} train / {n_test} test on {points.n_points} points")
    return batch.take(order[:n_train]), batch.take(order[n_train:])
