"""
Memory-augmented Q-Former.

A stack of L blocks refines N learned queries. Every block has a
self-attention sublayer whose keys/values are the block's own query memory
bank (the queries that entered the block at every past and present
timestep), a cross-attention sublayer whose keys/values are the single
shared visual memory bank, and a feed-forward sublayer. Sublayers use
pre-layer-norm with residual connections.

Frames are processed one at a time by ``step``; the state (all banks and the
timestep) lives in ``QFormerState`` and the learned weights in
``QFormerParams``.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .memory_bank import CompressionPolicy, MemoryBank, TokenGrid
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    add,
    gelu,
    layer_norm,
    matmul,
    scale,
    softmax_rows,
    transpose,
)
from .utils import ensure_directory_exists, safe_open_text

logger = logging.getLogger(__name__)

SUBLAYER_ORDERS = ("self_first", "cross_first")
POSITION_EMBEDDINGS = ("sinusoidal", "learned")
CHECKPOINT_FORMAT = "malmm-params/1"
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"


@dataclass
class QFormerConfig:
    """Shape and behaviour of a memory-augmented Q-Former."""

    num_blocks: int = 2
    num_queries: int = 8
    channels: int = 16
    num_heads: int = 2
    ffn_hidden: int = 32
    visual_tokens_per_frame: int = 4
    bank_capacity: int = 20
    policy: CompressionPolicy = field(default_factory=CompressionPolicy)
    num_classes: int = 2
    sublayer_order: str = "self_first"
    use_visual_bank: bool = True
    use_query_bank: bool = True
    position_embedding: str = "sinusoidal"
    max_frames: int = 2048
    layer_norm_eps: float = 1e-6

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        for name in (
            "num_blocks",
            "num_queries",
            "channels",
            "num_heads",
            "ffn_hidden",
            "visual_tokens_per_frame",
            "bank_capacity",
            "max_frames",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.channels % self.num_heads != 0:
            raise ValueError(
                f"channels ({self.channels}) must be divisible by "
                f"num_heads ({self.num_heads})"
            )
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.sublayer_order not in SUBLAYER_ORDERS:
            raise ValueError(f"Unknown sublayer order: {self.sublayer_order}")
        if self.position_embedding not in POSITION_EMBEDDINGS:
            raise ValueError(f"Unknown position embedding: {self.position_embedding}")
        if self.layer_norm_eps <= 0:
            raise ValueError("layer_norm_eps must be > 0")

    @property
    def head_dim(self) -> int:
        return self.channels // self.num_heads


@dataclass
class AttentionWeights:
    """Per-head projections: q/k/v are C×(C/H), o is (C/H)×C."""

    q: List[Tensor]
    k: List[Tensor]
    v: List[Tensor]
    o: List[Tensor]


def _attention_names(prefix: str, num_heads: int) -> List[str]:
    return [f"{prefix}.{p}.{h}" for p in ("q", "k", "v", "o") for h in range(num_heads)]


def expected_shapes(config: QFormerConfig) -> Dict[str, Tuple[int, ...]]:
    """Parameter names and shapes implied by ``config``, in checkpoint order."""
    c, d, f = config.channels, config.head_dim, config.ffn_hidden
    shapes: Dict[str, Tuple[int, ...]] = {"queries": (config.num_queries, c)}
    for l in range(config.num_blocks):
        prefix = f"blocks.{l}"
        for norm in ("ln_self", "ln_cross", "ln_ffn"):
            shapes[f"{prefix}.{norm}.gamma"] = (c,)
            shapes[f"{prefix}.{norm}.beta"] = (c,)
        for attn in ("self_attn", "cross_attn"):
            for name in _attention_names(f"{prefix}.{attn}", config.num_heads):
                shapes[name] = (d, c) if ".o." in name else (c, d)
        shapes[f"{prefix}.ffn.w1"] = (c, f)
        shapes[f"{prefix}.ffn.w2"] = (f, c)
    shapes["head.w"] = (c, config.num_classes)
    shapes["head.b"] = (1, config.num_classes)
    if config.position_embedding == "learned":
        shapes["pe.table"] = (config.max_frames, c)
    return shapes


@dataclass
class QFormerParams:
    """Named parameter tensors of a Q-Former and its classifier head."""

    tensors: Dict[str, Tensor]

    @classmethod
    def initialize(cls, config: QFormerConfig, seed: int = 0) -> "QFormerParams":
        """
        Random initialization from a seeded generator.

        Matrices are drawn from N(0, 1/fan_in), layer-norm gains start at 1
        and biases, shifts and the learned position table at 0.
        """
        rng = np.random.default_rng(seed)
        tensors: Dict[str, Tensor] = {}
        for name, shape in expected_shapes(config).items():
            if name.endswith(".gamma"):
                value = np.ones(shape)
            elif name.endswith(".beta") or name in ("head.b", "pe.table"):
                value = np.zeros(shape)
            elif name == "queries":
                value = rng.normal(0.0, 1.0, shape)
            else:
                value = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
            tensors[name] = Tensor(value)
        return cls(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> List[str]:
        return list(self.tensors)

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def traced(self, tape: Tape) -> "QFormerParams":
        """Copy whose tensors are leaves on ``tape``."""
        return QFormerParams({name: tape.watch(t) for name, t in self.tensors.items()})

    def detached(self) -> "QFormerParams":
        return QFormerParams({name: t.detach() for name, t in self.tensors.items()})

    def replace(self, updates: Dict[str, np.ndarray]) -> "QFormerParams":
        """New params with some tensors replaced by new values."""
        tensors = dict(self.tensors)
        for name, value in updates.items():
            if tuple(np.shape(value)) != tensors[name].shape:
                raise ShapeError(
                    f"{name}: update shape {np.shape(value)} != {tensors[name].shape}"
                )
            tensors[name] = Tensor(value)
        return QFormerParams(tensors)

    def attention(self, prefix: str, num_heads: int) -> AttentionWeights:
        return AttentionWeights(
            *[
                [self.tensors[f"{prefix}.{p}.{h}"] for h in range(num_heads)]
                for p in ("q", "k", "v", "o")
            ]
        )

    def validate(self, config: QFormerConfig) -> None:
        expected = expected_shapes(config)
        missing = set(expected) - set(self.tensors)
        extra = set(self.tensors) - set(expected)
        if missing or extra:
            raise ValueError(
                f"Parameter names do not match config: missing={sorted(missing)}, "
                f"unexpected={sorted(extra)}"
            )
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(
                    f"{name}: shape {self.tensors[name].shape}, config expects {shape}"
                )
            if not np.all(np.isfinite(self.tensors[name].data)):
                raise ValueError(f"{name} contains non-finite values")


def _bank(
    capacity: int, positions: int, config: QFormerConfig, enabled: bool, name: str
) -> MemoryBank:
    if not enabled:
        # A disabled bank keeps only the present timestep.
        fifo = CompressionPolicy("fifo")
        return MemoryBank(1, positions, config.channels, fifo, name)
    return MemoryBank(capacity, positions, config.channels, config.policy, name)


@dataclass
class QFormerState:
    """Per-stream runtime state: one visual bank, L query banks, the timestep."""

    visual_bank: MemoryBank
    query_banks: List[MemoryBank]
    timestep: int = 0

    @classmethod
    def create(cls, config: QFormerConfig) -> "QFormerState":
        visual = _bank(
            config.bank_capacity,
            config.visual_tokens_per_frame,
            config,
            config.use_visual_bank,
            "visual",
        )
        queries = [
            _bank(
                config.bank_capacity,
                config.num_queries,
                config,
                config.use_query_bank,
                f"query.{l}",
            )
            for l in range(config.num_blocks)
        ]
        return cls(visual, queries)

    @property
    def visual_kv_rows(self) -> int:
        return self.visual_bank.kv_rows

    @property
    def query_kv_rows(self) -> List[int]:
        return [bank.kv_rows for bank in self.query_banks]

    @property
    def resident_floats(self) -> int:
        return self.visual_bank.resident_floats + sum(
            bank.resident_floats for bank in self.query_banks
        )


def attention(
    queries: Tensor,
    kv: Tensor,
    weights: AttentionWeights,
    num_heads: int,
    return_weights: bool = False,
) -> Union[Tensor, Tuple[Tensor, List[Tensor]]]:
    """
    Multi-head scaled dot-product attention of ``queries[N×C]`` over ``kv[R×C]``.

    Each head scores with ``softmax(QK^T / sqrt(C/H))``; head outputs are
    projected back to C channels and summed.
    """
    if len(kv.shape) != 2 or kv.shape[1] != queries.shape[1]:
        raise ShapeError(f"attention: kv shape {kv.shape} vs queries {queries.shape}")
    head_dim = queries.shape[1] // num_heads
    factor = 1.0 / math.sqrt(head_dim)
    out: Optional[Tensor] = None
    maps: List[Tensor] = []
    for h in range(num_heads):
        q = matmul(queries, weights.q[h])
        k = matmul(kv, weights.k[h])
        v = matmul(kv, weights.v[h])
        probs = softmax_rows(scale(matmul(q, transpose(k)), factor))
        head = matmul(matmul(probs, v), weights.o[h])
        out = head if out is None else add(out, head)
        maps.append(probs)
    assert out is not None
    if return_weights:
        return out, maps
    return out


def block_forward(
    block_index: int,
    z_in: Tensor,
    state: QFormerState,
    params: QFormerParams,
    config: QFormerConfig,
) -> Tensor:
    """
    One Q-Former block over the current bank contents.

    Args:
        block_index: Block l (0-based)
        z_in: Queries entering the block, N×C (already in query_banks[l])
        state: Stream state; the current frame is already in the visual bank
        params: Model parameters
        config: Model configuration

    Returns:
        Queries leaving the block, N×C
    """
    prefix = f"blocks.{block_index}"
    eps = config.layer_norm_eps

    def norm(x: Tensor, name: str) -> Tensor:
        return layer_norm(
            x, params[f"{prefix}.{name}.gamma"], params[f"{prefix}.{name}.beta"], eps
        )

    def self_sublayer(x: Tensor) -> Tensor:
        kv = norm(state.query_banks[block_index].flatten(), "ln_self")
        weights = params.attention(f"{prefix}.self_attn", config.num_heads)
        return add(x, attention(norm(x, "ln_self"), kv, weights, config.num_heads))

    def cross_sublayer(x: Tensor) -> Tensor:
        kv = state.visual_bank.flatten()
        weights = params.attention(f"{prefix}.cross_attn", config.num_heads)
        return add(x, attention(norm(x, "ln_cross"), kv, weights, config.num_heads))

    x = z_in
    if config.sublayer_order == "self_first":
        x = cross_sublayer(self_sublayer(x))
    else:
        x = self_sublayer(cross_sublayer(x))
    hidden = gelu(matmul(norm(x, "ln_ffn"), params[f"{prefix}.ffn.w1"]))
    return add(x, matmul(hidden, params[f"{prefix}.ffn.w2"]))


def step(
    state: QFormerState,
    params: QFormerParams,
    config: QFormerConfig,
    frame_feature: Tensor,
) -> Tensor:
    """
    Ingest one position-embedded frame and return the final queries z_t.

    The frame is appended to the visual bank, then each block first appends
    its input queries to its own query bank and runs over the banks.
    """
    expected = (config.visual_tokens_per_frame, config.channels)
    if frame_feature.shape != expected:
        raise ShapeError(
            f"Frame feature shape {frame_feature.shape}, expected {expected}"
        )

    state.visual_bank.append(TokenGrid.fresh(frame_feature))
    z = params["queries"]
    for l in range(config.num_blocks):
        state.query_banks[l].append(TokenGrid.fresh(z))
        z = block_forward(l, z, state, params, config)
    state.timestep += 1
    return z


def causality_probe(
    frames_a: Sequence[Tensor],
    frames_b: Sequence[Tensor],
    params: QFormerParams,
    config: QFormerConfig,
    prefix_length: Optional[int] = None,
) -> bool:
    """
    Check that two streams produce bit-identical outputs over a shared prefix.

    Args:
        frames_a: Position-embedded frames of stream A
        frames_b: Position-embedded frames of stream B
        params: Model parameters
        config: Model configuration
        prefix_length: Length t0 of the shared prefix; defaults to the longest
            prefix over which the inputs are bit-identical

    Returns:
        True iff outputs at every timestep <= t0 are bit-identical
    """
    if prefix_length is None:
        prefix_length = 0
        for a, b in zip(frames_a, frames_b):
            if not np.array_equal(a.data, b.data):
                break
            prefix_length += 1

    state_a = QFormerState.create(config)
    state_b = QFormerState.create(config)
    for t in range(min(prefix_length, len(frames_a), len(frames_b))):
        out_a = step(state_a, params, config, frames_a[t])
        out_b = step(state_b, params, config, frames_b[t])
        if not np.array_equal(out_a.data, out_b.data):
            logger.warning("Causality violated at timestep %d", t + 1)
            return False
    return True


def save_checkpoint(params: QFormerParams, directory: Union[str, Path]) -> Path:
    """
    Write ``manifest.json`` and a little-endian f64 ``params.bin`` blob.

    Returns:
        The checkpoint directory
    """
    directory = ensure_directory_exists(directory)
    manifest = {"format": CHECKPOINT_FORMAT, "dtype": "<f8", "tensors": []}
    offset = 0
    with open(directory / BLOB_NAME, "wb") as blob:
        for name, tensor in params.tensors.items():
            raw = np.ascontiguousarray(tensor.data, dtype="<f8").tobytes()
            blob.write(raw)
            manifest["tensors"].append(
                {"name": name, "shape": list(tensor.shape), "offset": offset}
            )
            offset += len(raw)
    with safe_open_text(directory / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=2)
    logger.info("Saved %d tensors to %s", len(params.tensors), directory)
    return directory


def load_checkpoint(
    directory: Union[str, Path], config: QFormerConfig
) -> QFormerParams:
    """Load a checkpoint and validate every tensor against ``config``."""
    directory = Path(directory)
    with safe_open_text(directory / MANIFEST_NAME) as f:
        manifest = json.load(f)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"Unsupported checkpoint format: {manifest.get('format')}")
    blob = (directory / BLOB_NAME).read_bytes()

    tensors: Dict[str, Tensor] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        start = int(entry["offset"])
        stop = start + 8 * int(np.prod(shape))
        if stop > len(blob):
            raise ValueError(
                f"{entry['name']}: blob holds {len(blob)} bytes, need {stop}"
            )
        values = np.frombuffer(blob[start:stop], dtype="<f8").reshape(shape)
        tensors[entry["name"]] = Tensor(values)

    params = QFormerParams(tensors)
    params.validate(config)
    return params
