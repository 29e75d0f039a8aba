"""
MINO velocity-field operator

Geometry encoder (GNO onto a latent query grid, then cross-attention blocks
whose keys/values stay fixed to the GNO output), an optional latent
processor, and a cross-attention decoder queried by the input function at its
own observation points. The whole map v(f_t, t) works for any discretization
of the input: latent size depends only on the query grid.

Arrays are [..., channels, points]; a leading batch axis is optional.
"""

import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import diff_engine as de
from .data_io import decode_header, encode_header, read_bytes, require_bytes, write_bytes
from .diff_engine import (AttentionTrace, CrossAttentionBlock, EdgeOperators, GNOLayer, LayerNorm, Linear,
                          MLP, AdaptiveModulation, ParamStore, Tensor)
from .exceptions import ContainerError, ShapeError
from .geometry import (Box, EdgeList, LatentGrid, PointSet, build_radius_graph, make_regular_grid,
                       make_spherical_grid, sinusoidal_embed)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MCKP"
EDGE_CACHE_SIZE = 64


class LatentGridKind(str, Enum):
    REGULAR = "regular"
    SPHERICAL = "spherical"


class ProcessorKind(str, Enum):
    NONE = "none"
    SMALL_MLP_MIXER = "small_mlp_mixer"


class EncoderAttention(str, Enum):
    CROSS_FIXED_KV = "cross_fixed_kv"
    SELF_ATTENTION = "self_attention"


class DecoderQuery(str, Enum):
    FUNCTION_PLUS_POSITION = "function_plus_position"
    POSITION_ONLY = "position_only"


class EncoderInput(str, Enum):
    """How f_t and the position embedding are combined before the GNO"""
    ADD = "add"
    CONCAT = "concat"


class LatentGridConfig(BaseModel):
    """Latent query grid: regular cells over a box, or a lat/lon sphere grid"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: LatentGridKind = LatentGridKind.REGULAR
    shape: Tuple[int, ...] = (16, 16)
    lower: Optional[Tuple[float, ...]] = None
    upper: Optional[Tuple[float, ...]] = None
    n_lon: int = Field(32, ge=1)
    n_lat: int = Field(16, ge=1)

    @model_validator(mode="after")
    def check_shape(self):
        if self.kind == LatentGridKind.REGULAR:
            if not 1 <= len(self.shape) <= 3 or any(n < 1 for n in self.shape):
                raise ValueError(f"Regular latent grid shape must have 1..3 positive entries, got {self.shape}")
        return self

    @property
    def dim(self) -> int:
        return 3 if self.kind == LatentGridKind.SPHERICAL else len(self.shape)

    @property
    def n_nodes(self) -> int:
        if self.kind == LatentGridKind.SPHERICAL:
            return self.n_lon * self.n_lat
        return int(np.prod(self.shape))

    def build(self) -> LatentGrid:
        if self.kind == LatentGridKind.SPHERICAL:
            return make_spherical_grid(self.n_lon, self.n_lat)
        box = Box(lower=self.lower or (0.0,) * self.dim, upper=self.upper or (1.0,) * self.dim)
        shape = tuple(self.shape) + (None,) * (3 - self.dim)
        return make_regular_grid(shape[0], shape[1], box, nz=shape[2])


class ModelConfig(BaseModel):
    """Architecture hyperparameters of the velocity model"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    latent_dim: int = Field(256, ge=1)
    encoder_blocks: int = Field(5, ge=1)
    decoder_blocks: int = Field(2, ge=1)
    heads: int = Field(4, ge=1)
    radius: float = Field(0.07, gt=0)
    latent_grid: LatentGridConfig = LatentGridConfig()
    pos_dim: int = Field(2, ge=1, le=3)
    f_dim: int = Field(1, ge=1)
    pos_embed_dim: int = Field(32, ge=2)
    time_embed_dim: int = Field(64, ge=2)
    # t lives in [0, 1]; the top frequency stays a few periods over that range
    time_embed_scale: float = Field(20.0, gt=0)
    gno_hidden: int = Field(64, ge=1)
    mlp_ratio: int = Field(4, ge=1)
    processor: ProcessorKind = ProcessorKind.NONE
    processor_blocks: int = Field(2, ge=1)
    processor_hidden: int = Field(128, ge=1)
    encoder_attention: EncoderAttention = EncoderAttention.CROSS_FIXED_KV
    decoder_query: DecoderQuery = DecoderQuery.FUNCTION_PLUS_POSITION
    encoder_input: EncoderInput = EncoderInput.ADD
    zero_init_gates: bool = True
    init_seed: int = 0

    @model_validator(mode="after")
    def check_layout(self):
        if self.latent_dim % self.heads:
            raise ValueError(f"latent_dim {self.latent_dim} is not divisible by heads {self.heads}")
        if self.pos_embed_dim % 2 or self.time_embed_dim % 2:
            raise ValueError("Embedding widths must be even")
        if self.latent_grid.dim != self.pos_dim:
            raise ValueError(
                f"Latent grid is {self.latent_grid.dim}-D but pos_dim is {self.pos_dim}")
        return self

    @classmethod
    def mino_t(cls, **overrides) -> "ModelConfig":
        """Transformer-only layout: 256 wide, 4 heads, 5 encoder / 2 decoder blocks"""
        base = dict(latent_dim=256, heads=4, encoder_blocks=5, decoder_blocks=2, radius=0.07,
                    latent_grid=LatentGridConfig(shape=(16, 16)), pos_dim=2)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Reduced layout that trains on one core in minutes"""
        base = dict(latent_dim=32, heads=4, encoder_blocks=2, decoder_blocks=1, radius=0.1,
                    latent_grid=LatentGridConfig(shape=(16,)), pos_dim=1, pos_embed_dim=16,
                    time_embed_dim=32, gno_hidden=32, mlp_ratio=2)
        base.update(overrides)
        return cls(**base)

    @property
    def embed_width(self) -> int:
        return self.pos_dim * self.pos_embed_dim


def expected_parameter_count(config: ModelConfig) -> int:
    """Number of scalars in the parameter layout of `config`"""
    L, E, c = config.latent_dim, config.embed_width, config.f_dim
    count = Linear.n_params(config.time_embed_dim, L) + Linear.n_params(L, L)

    if config.encoder_input == EncoderInput.ADD:
        count += Linear.n_params(c, E)
        gno_in = E
    else:
        gno_in = c + E
    count += GNOLayer.n_params(gno_in, L, config.pos_dim, config.gno_hidden)
    count += Linear.n_params(L, L)
    count += config.encoder_blocks * CrossAttentionBlock.n_params(L, L, config.mlp_ratio)

    if config.processor == ProcessorKind.SMALL_MLP_MIXER:
        count += config.processor_blocks * MixerBlock.n_params(
            config.latent_grid.n_nodes, L, config.processor_hidden, L, config.mlp_ratio)

    if config.decoder_query == DecoderQuery.FUNCTION_PLUS_POSITION:
        count += MLP.n_params(c, L, L) + MLP.n_params(L + E, L, L)
    else:
        count += MLP.n_params(E, L, L)
    count += config.decoder_blocks * CrossAttentionBlock.n_params(L, L, config.mlp_ratio)
    count += LayerNorm.n_params(L) + Linear.n_params(L, c)
    return count


class MixerBlock:
    """Conditioned token-mixing block over the latent nodes"""

    def __init__(self, store: ParamStore, name: str, n_tokens: int, dim: int, hidden: int,
                 cond_dim: int, rng: np.random.Generator, mlp_ratio: int = 4, zero_init_gates: bool = True):
        self.ada = AdaptiveModulation(store, f"{name}.ada", cond_dim, dim, 6, rng, zero_init_gates)
        self.token_mlp = MLP(store, f"{name}.token", n_tokens, hidden, n_tokens, rng)
        self.channel_mlp = MLP(store, f"{name}.channel", dim, mlp_ratio * dim, dim, rng)

    @staticmethod
    def n_params(n_tokens: int, dim: int, hidden: int, cond_dim: int, mlp_ratio: int = 4) -> int:
        return (AdaptiveModulation.n_params(cond_dim, dim, 6) + MLP.n_params(n_tokens, hidden, n_tokens)
                + MLP.n_params(dim, mlp_ratio * dim, dim))

    def __call__(self, h: Tensor, cond: Tensor) -> Tensor:
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(cond)
        x = de.modulate(de.layer_norm(h), shift1, scale1)
        mixed = de.swapaxes(self.token_mlp(de.swapaxes(x, -1, -2)), -1, -2)
        h = de.add(h, de.mul(gate1, mixed))
        y = de.modulate(de.layer_norm(h), shift2, scale2)
        return de.add(h, de.mul(gate2, self.channel_mlp(y)))


@dataclass
class Checkpoint:
    """Everything stored next to the parameters"""
    model: "VelocityModel"
    training_state: Dict[str, Any] = field(default_factory=dict)
    optimizer_m: Optional[np.ndarray] = None
    optimizer_v: Optional[np.ndarray] = None
    optimizer_step: int = 0


class VelocityModel:
    """
    v_theta(f_t, t) on arbitrary point sets

    Args:
        config: Architecture hyperparameters
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.latent_grid = config.latent_grid.build()
        self.params = ParamStore()
        self._edge_cache: "OrderedDict[Tuple[str, float], Tuple[EdgeList, EdgeOperators]]" = OrderedDict()
        self._cache_lock = threading.Lock()

        rng = np.random.default_rng(config.init_seed)
        store = self.params
        L, E, c = config.latent_dim, config.embed_width, config.f_dim
        zero = config.zero_init_gates

        self.time_fc1 = Linear(store, "time.fc1", config.time_embed_dim, L, rng)
        self.time_fc2 = Linear(store, "time.fc2", L, L, rng)

        if config.encoder_input == EncoderInput.ADD:
            self.lift = Linear(store, "encoder.lift", c, E, rng)
            gno_in = E
        else:
            self.lift = None
            gno_in = c + E
        self.gno = GNOLayer(store, "encoder.gno", gno_in, L, config.pos_dim, config.gno_hidden, rng)
        self.gno_proj = Linear(store, "encoder.proj", L, L, rng)
        self.encoder = [CrossAttentionBlock(store, f"encoder.block{j}", L, config.heads, L, rng,
                                            config.mlp_ratio, zero)
                        for j in range(config.encoder_blocks)]

        self.processor: List[MixerBlock] = []
        if config.processor == ProcessorKind.SMALL_MLP_MIXER:
            self.processor = [MixerBlock(store, f"processor.block{j}", self.latent_grid.n_nodes, L,
                                         config.processor_hidden, L, rng, config.mlp_ratio, zero)
                              for j in range(config.processor_blocks)]

        if config.decoder_query == DecoderQuery.FUNCTION_PLUS_POSITION:
            self.query_f = MLP(store, "decoder.query_f", c, L, L, rng)
            self.query = MLP(store, "decoder.query", L + E, L, L, rng)
        else:
            self.query_f = None
            self.query = MLP(store, "decoder.query", E, L, L, rng)
        self.decoder = [CrossAttentionBlock(store, f"decoder.block{j}", L, config.heads, L, rng,
                                            config.mlp_ratio, zero)
                        for j in range(config.decoder_blocks)]
        self.out_norm = LayerNorm(store, "decoder.norm", L)
        self.out = Linear(store, "decoder.out", L, c, rng, zero_init=zero)

        store.finalize()
        if len(store) != expected_parameter_count(config):
            raise ShapeError(
                f"Parameter layout has {len(store)} entries, expected {expected_parameter_count(config)}")
        logger.info(f"Built velocity model with {len(store)} parameters "
                    f"({self.latent_grid.n_nodes} latent nodes)")

    def edges_for(self, points: PointSet) -> Tuple[EdgeList, EdgeOperators]:
        """Radius graph from the latent grid to `points`, LRU-cached by content"""
        key = (points.content_hash(), self.config.radius)
        with self._cache_lock:
            if key in self._edge_cache:
                self._edge_cache.move_to_end(key)
                return self._edge_cache[key]

        edges = build_radius_graph(points, self.latent_grid, self.config.radius)
        entry = (edges, EdgeOperators(edges))
        if edges.empty_queries:
            logger.warning(f"{edges.empty_queries} of {edges.n_queries} latent nodes have no input "
                           f"point within r={self.config.radius}")
        with self._cache_lock:
            self._edge_cache[key] = entry
            self._edge_cache.move_to_end(key)
            while len(self._edge_cache) > EDGE_CACHE_SIZE:
                self._edge_cache.popitem(last=False)
        return entry

    def _check_input(self, f_t: Tensor, points: PointSet) -> None:
        if points.n_points == 0:
            raise ShapeError("Cannot encode a function observed at zero points")
        if points.dim != self.config.pos_dim:
            raise ShapeError(f"Model expects {self.config.pos_dim}-D positions, got {points.dim}-D")
        if f_t.ndim < 2 or f_t.shape[-2] != self.config.f_dim or f_t.shape[-1] != points.n_points:
            raise ShapeError(
                f"Expected values [..., {self.config.f_dim}, {points.n_points}], got {f_t.shape}")

    def position_embedding(self, points: PointSet) -> np.ndarray:
        """p_emb as [P_dim * pos_embed_dim, N]"""
        return sinusoidal_embed(points.positions, self.config.pos_embed_dim).T

    def time_embedding(self, t) -> np.ndarray:
        """Raw sinusoidal features of t as [n_times, time_embed_dim]"""
        t = np.asarray(t, dtype=np.float64)
        return sinusoidal_embed(t.reshape(-1), self.config.time_embed_dim, scale=self.config.time_embed_scale)

    def time_condition(self, t) -> Tensor:
        """t_emb through the time MLP: [L] for scalar t, [B, L] for a vector"""
        t = np.asarray(t, dtype=np.float64)
        emb = self.time_embedding(t)
        column = Tensor(emb.reshape(emb.shape + (1,)))
        cond = self.time_fc2(de.silu(self.time_fc1(column)))
        return de.reshape(cond, (self.config.latent_dim,) if t.ndim == 0 else (t.shape[0], self.config.latent_dim))

    def encode(self, f_t, pos: PointSet, t=None, cond: Optional[Tensor] = None,
               trace: Optional[List[AttentionTrace]] = None) -> Tensor:
        """Latent tokens [..., L, N_node] of the input function"""
        f_t = de.as_tensor(f_t)
        self._check_input(f_t, pos)
        cond = self.time_condition(t) if cond is None else cond
        lead = f_t.shape[:-2]
        p_emb = self.position_embedding(pos)

        if self.config.encoder_input == EncoderInput.ADD:
            x = de.add(self.lift(f_t), p_emb)
        else:
            x = de.concat([f_t, de.broadcast_to(p_emb, lead + p_emb.shape)], axis=-2)

        edges, operators = self.edges_for(pos)
        h0 = self.gno_proj(self.gno(x, pos, self.latent_grid, edges, operators))
        h = h0
        for block in self.encoder:
            kv = h0 if self.config.encoder_attention == EncoderAttention.CROSS_FIXED_KV else h
            h = block(h, kv, cond, trace)
        return h

    def process(self, h: Tensor, cond: Tensor) -> Tensor:
        for block in self.processor:
            h = block(h, cond)
        return h

    def decode(self, f_t, pos: PointSet, h_latent: Tensor, cond: Tensor,
               trace: Optional[List[AttentionTrace]] = None) -> Tensor:
        """Velocity [..., f_dim, N_in] at the input's own points"""
        f_t = de.as_tensor(f_t)
        lead = f_t.shape[:-2]
        p_emb = self.position_embedding(pos)
        if self.config.decoder_query == DecoderQuery.FUNCTION_PLUS_POSITION:
            f_proj = self.query_f(f_t)
            query = self.query(de.concat([f_proj, de.broadcast_to(p_emb, lead + p_emb.shape)], axis=-2))
        else:
            query = self.query(Tensor(p_emb))
            query = de.broadcast_to(query, lead + query.shape)

        kv = h_latent
        for block in self.decoder:
            kv = block(query, kv, cond, trace)
        return self.out(self.out_norm(kv))

    def forward(self, f_t, pos: PointSet, t, trace: Optional[List[AttentionTrace]] = None) -> Tensor:
        """Differentiable v_theta(f_t, t); t is a scalar or one value per sample"""
        f_t = de.as_tensor(f_t)
        cond = self.time_condition(t)
        h = self.encode(f_t, pos, cond=cond, trace=trace)
        h = self.process(h, cond)
        return self.decode(f_t, pos, h, cond, trace)

    def velocity(self, f_t: np.ndarray, pos: PointSet, t) -> np.ndarray:
        """Inference-only velocity as a plain array"""
        with de.no_grad():
            return self.forward(np.asarray(f_t, dtype=np.float64), pos, t).value

    def save(self, path: Union[str, Path], training_state: Optional[Dict[str, Any]] = None,
             optimizer=None) -> None:
        """
        Write a checkpoint: framed JSON header, float32 parameters and,
        when an optimizer is given, its two moment vectors
        """
        header = {
            "format_version": 1,
            "config": self.config.model_dump(mode="json"),
            "n_params": len(self.params),
            "training_state": training_state or {},
            "has_optimizer": optimizer is not None,
            "optimizer_step": int(optimizer.step_count) if optimizer is not None else 0,
        }
        blobs = [self.params.data]
        if optimizer is not None:
            blobs += [optimizer.m, optimizer.v]
        payload = encode_header(CHECKPOINT_MAGIC, header) + b"".join(
            np.ascontiguousarray(b, dtype="<f4").tobytes() for b in blobs)
        write_bytes(path, payload)
        logger.info(f"Saved checkpoint to {path}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "VelocityModel":
        return load_checkpoint(path).model


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read a checkpoint written by VelocityModel.save"""
    raw = read_bytes(path)
    header, offset = decode_header(raw, CHECKPOINT_MAGIC, path)
    try:
        config = ModelConfig.model_validate(header["config"])
    except (KeyError, ValueError) as e:
        raise ContainerError(f"Checkpoint carries an invalid model config: {e}", str(path))

    n = int(header["n_params"])
    n_blobs = 3 if header.get("has_optimizer") else 1
    require_bytes(raw, offset + 4 * n * n_blobs, path)
    model = _model_for_checkpoint(config, n, path)
    blobs = [np.frombuffer(raw, dtype="<f4", count=n, offset=offset + 4 * n * i).astype(np.float64)
             for i in range(n_blobs)]
    model.params.load_flat(blobs[0])

    checkpoint = Checkpoint(model=model, training_state=header.get("training_state") or {})
    if n_blobs == 3:
        checkpoint.optimizer_m, checkpoint.optimizer_v = blobs[1], blobs[2]
        checkpoint.optimizer_step = int(header.get("optimizer_step", 0))
    logger.info(f"Loaded checkpoint {path} ({n} parameters)")
    return checkpoint


def _model_for_checkpoint(config: ModelConfig, n_params: int, path) -> VelocityModel:
    model = VelocityModel(config)
    if len(model.params) != n_params:
        raise ContainerError(
            f"Checkpoint holds {n_params} parameters but its config needs {len(model.params)}", str(path))
    return model
