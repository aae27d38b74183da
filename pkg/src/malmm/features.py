"""
Frame feature ingestion for streaming runs.

This module provides the ``FeatureStream`` abstraction consumed by the
pipeline, the temporal position embedding, a seeded synthetic generator of
segment-structured streams, the MAFB1 binary feature-file format and labeled
dataset manifests.

MAFB1 layout: 5 magic bytes ``MAFB1``, then ``T``, ``P``, ``C`` as
little-endian u32, then ``T·P·C`` little-endian f32 values ordered by frame,
then position, then channel.
"""

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Union

import numpy as np

from .tensor import Tensor, add, slice_rows, tile_rows
from .utils import safe_open_text

logger = logging.getLogger(__name__)

MAGIC = b"MAFB1"
HEADER = struct.Struct("<III")
HEADER_SIZE = len(MAGIC) + HEADER.size


class FeatureFormatError(ValueError):
    """Raised when a feature file does not conform to MAFB1."""


class FeatureStream:
    """
    A re-iterable stream of raw (pre position embedding) frame features.

    Each iteration calls the frame factory again, so file-backed streams
    re-read their file and synthetic streams regenerate from their seed.
    """

    def __init__(
        self,
        num_frames: int,
        num_positions: int,
        channels: int,
        frames: Callable[[], Iterator[np.ndarray]],
    ):
        if num_frames < 1:
            raise ValueError(f"A feature stream needs T >= 1, got {num_frames}")
        self.num_frames = num_frames
        self.num_positions = num_positions
        self.channels = channels
        self._frames = frames

    @classmethod
    def from_frames(cls, frames: Iterable[Any]) -> "FeatureStream":
        """Build an in-memory stream from P×C arrays or tensors."""
        arrays = [
            np.array(f.data if isinstance(f, Tensor) else f, dtype=np.float64)
            for f in frames
        ]
        if not arrays:
            raise ValueError("A feature stream needs at least one frame")
        shape = arrays[0].shape
        for array in arrays:
            if array.shape != shape or array.ndim != 2:
                raise ValueError(f"Frame shape {array.shape} does not match {shape}")
        return cls(len(arrays), shape[0], shape[1], lambda: iter(arrays))

    def __len__(self) -> int:
        return self.num_frames

    def __iter__(self) -> Iterator[Tensor]:
        count = 0
        for frame in self._frames():
            if frame.shape != (self.num_positions, self.channels):
                raise ValueError(
                    f"Frame {count + 1} has shape {frame.shape}, expected "
                    f"{(self.num_positions, self.channels)}"
                )
            count += 1
            yield Tensor(frame)
        if count != self.num_frames:
            raise ValueError(
                f"Stream yielded {count} frames, expected {self.num_frames}"
            )


def sinusoidal_embedding(t: int, channels: int) -> np.ndarray:
    """Sinusoidal embedding of timestep ``t``: sin on even channels, cos on odd."""
    index = np.arange(channels)
    angle = t / np.power(10000.0, (index - index % 2) / channels)
    return np.where(index % 2 == 0, np.sin(angle), np.cos(angle))


def position_embed(v_t: Tensor, t: int, table: Optional[Tensor] = None) -> Tensor:
    """
    Add the temporal embedding of timestep ``t`` to every position of ``v_t``.

    Args:
        v_t: Raw frame feature, P×C
        t: 1-based timestep
        table: Optional learned embedding table (max_frames×C); sinusoidal
            embedding is used when omitted

    Returns:
        Position-embedded frame feature f_t
    """
    if t < 1:
        raise ValueError(f"Timesteps start at 1, got {t}")
    num_positions, channels = v_t.shape
    if table is None:
        pe = np.tile(sinusoidal_embedding(t, channels), (num_positions, 1))
        return add(v_t, Tensor(pe))
    if t > table.shape[0]:
        raise ValueError(
            f"Timestep {t} exceeds learned position table size {table.shape[0]}"
        )
    return add(v_t, tile_rows(slice_rows(table, t - 1, t), num_positions))


@dataclass
class Segment:
    """A run of frames around one embedding basis vector."""

    length: int
    basis: int
    noise: float = 0.0


@dataclass
class SyntheticSpec:
    """Seeded description of a synthetic segment-structured stream."""

    seed: int
    num_frames: int
    num_positions: int
    channels: int
    segments: List[Segment] = field(default_factory=list)
    label: int = 0

    def __post_init__(self) -> None:
        self.segments = [
            s if isinstance(s, Segment) else Segment(**s) for s in self.segments
        ]
        self.validate()

    def validate(self) -> None:
        if self.num_frames < 1 or self.num_positions < 1 or self.channels < 1:
            raise ValueError(
                f"Invalid synthetic dimensions T={self.num_frames}, "
                f"P={self.num_positions}, C={self.channels}"
            )
        total = sum(s.length for s in self.segments)
        if total != self.num_frames:
            raise ValueError(
                f"Segment lengths sum to {total}, expected {self.num_frames}"
            )
        for segment in self.segments:
            if segment.length < 1:
                raise ValueError(f"Segment length must be >= 1, got {segment.length}")
            if not 0 <= segment.basis < self.channels:
                raise ValueError(
                    f"Segment basis {segment.basis} out of range for C={self.channels}"
                )
            if segment.noise < 0:
                raise ValueError(f"Segment noise must be >= 0, got {segment.noise}")

    def segment_intervals(self) -> List[tuple]:
        """1-based inclusive (first, last) timestep of every segment."""
        intervals = []
        start = 1
        for segment in self.segments:
            intervals.append((start, start + segment.length - 1))
            start += segment.length
        return intervals

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SyntheticSpec":
        return cls(**data)


def generate_synthetic(spec: SyntheticSpec) -> FeatureStream:
    """
    Generate the stream described by ``spec``.

    Frames of a segment are the unit basis vector ``e_basis`` replicated over
    all P positions plus i.i.d. Gaussian noise of the segment's sigma, drawn
    from a generator seeded with ``spec.seed``.
    """
    spec.validate()

    def frames() -> Iterator[np.ndarray]:
        rng = np.random.default_rng(spec.seed)
        for segment in spec.segments:
            base = np.zeros((spec.num_positions, spec.channels))
            base[:, segment.basis] = 1.0
            for _ in range(segment.length):
                if segment.noise > 0:
                    yield base + rng.normal(0.0, segment.noise, base.shape)
                else:
                    yield base.copy()

    return FeatureStream(spec.num_frames, spec.num_positions, spec.channels, frames)


def write_features(path: Union[str, Path], stream: Iterable[Any]) -> int:
    """
    Write frames to a MAFB1 file.

    Args:
        path: Destination file
        stream: FeatureStream, or any iterable of P×C arrays/tensors

    Returns:
        Number of frames written
    """
    frames = [
        np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64)
        for f in stream
    ]
    if not frames:
        raise ValueError("Refusing to write a feature file with zero frames")
    num_positions, channels = frames[0].shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(HEADER.pack(len(frames), num_positions, channels))
        for frame in frames:
            if frame.shape != (num_positions, channels):
                raise ValueError(f"Frame shape {frame.shape} differs from first frame")
            f.write(frame.astype("<f4").tobytes())
    return len(frames)


def load_features(path: Union[str, Path]) -> FeatureStream:
    """
    Open a MAFB1 file as a lazily read feature stream.

    The header and file size are validated up front; frames are then read
    one at a time on every iteration, so the whole file is never resident.
    """
    path = Path(path)
    with open(path, "rb") as f:
        header = f.read(HEADER_SIZE)
    if len(header) < HEADER_SIZE:
        raise FeatureFormatError(
            f"{path}: header truncated, expected {HEADER_SIZE} bytes, got {len(header)}"
        )
    if header[: len(MAGIC)] != MAGIC:
        raise FeatureFormatError(
            f"{path}: bad magic {header[:len(MAGIC)]!r} at byte offset 0"
        )
    num_frames, num_positions, channels = HEADER.unpack(header[len(MAGIC) :])
    if num_frames == 0:
        raise FeatureFormatError(f"{path}: T=0 at byte offset {len(MAGIC)}")
    if num_positions == 0 or channels == 0:
        raise FeatureFormatError(
            f"{path}: invalid shape P={num_positions}, C={channels} "
            f"at byte offset {len(MAGIC) + 4}"
        )
    frame_bytes = num_positions * channels * 4
    expected = HEADER_SIZE + num_frames * frame_bytes
    actual = path.stat().st_size
    if actual != expected:
        raise FeatureFormatError(
            f"{path}: expected {expected} bytes for T={num_frames}, P={num_positions}, "
            f"C={channels}, found {actual}"
        )

    def frames() -> Iterator[np.ndarray]:
        with open(path, "rb") as f:
            f.seek(HEADER_SIZE)
            for index in range(num_frames):
                raw = f.read(frame_bytes)
                if len(raw) != frame_bytes:
                    raise FeatureFormatError(
                        f"{path}: frame {index + 1} truncated at byte offset "
                        f"{HEADER_SIZE + index * frame_bytes}"
                    )
                values = np.frombuffer(raw, dtype="<f4").astype(np.float64)
                yield values.reshape(num_positions, channels)

    logger.debug("Opened %s: T=%d P=%d C=%d", path, num_frames, num_positions, channels)
    return FeatureStream(num_frames, num_positions, channels, frames)


@dataclass
class DatasetItem:
    """One labeled stream: either a synthetic spec or a MAFB1 file path."""

    source: Union[SyntheticSpec, Path]
    label: int
    split: str = "train"

    def stream(self) -> FeatureStream:
        if isinstance(self.source, SyntheticSpec):
            return generate_synthetic(self.source)
        return load_features(self.source)


@dataclass
class LabeledDataset:
    """Labeled streams for closed-set classification."""

    items: List[DatasetItem]
    num_classes: int

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError(
                f"A dataset needs at least 2 classes, got {self.num_classes}"
            )
        for item in self.items:
            if not 0 <= item.label < self.num_classes:
                raise ValueError(
                    f"Label {item.label} out of range for {self.num_classes} classes"
                )

    def __len__(self) -> int:
        return len(self.items)

    def split(self, name: str) -> "LabeledDataset":
        """Items of one split; the full dataset if the split is empty."""
        items = [item for item in self.items if item.split == name]
        return LabeledDataset(items or list(self.items), self.num_classes)


def load_manifest(path: Union[str, Path]) -> LabeledDataset:
    """
    Load a dataset manifest.

    The manifest is either a JSON list of items or an object with
    ``num_classes`` and ``items``. Each item has a ``label`` plus either a
    ``path`` (relative paths resolve against the manifest directory) or a
    ``synthetic`` spec, and an optional ``split``.
    """
    path = Path(path)
    try:
        with safe_open_text(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ValueError(f"Invalid dataset manifest {path}: {e}")

    raw_items = data["items"] if isinstance(data, dict) else data
    items = []
    for raw in raw_items:
        if "synthetic" in raw:
            source: Union[SyntheticSpec, Path] = SyntheticSpec.from_dict(
                raw["synthetic"]
            )
        elif "path" in raw:
            source = Path(raw["path"])
            if not source.is_absolute():
                source = path.parent / source
        else:
            raise ValueError(f"Manifest item needs 'path' or 'synthetic': {raw}")
        items.append(DatasetItem(source, int(raw["label"]), raw.get("split", "train")))

    if isinstance(data, dict) and "num_classes" in data:
        num_classes = int(data["num_classes"])
    else:
        num_classes = max((item.label for item in items), default=0) + 1
    return LabeledDataset(items, num_classes)


def save_manifest(dataset: LabeledDataset, path: Union[str, Path]) -> None:
    items = []
    for item in dataset.items:
        entry: Dict[str, Any] = {"label": item.label, "split": item.split}
        if isinstance(item.source, SyntheticSpec):
            entry["synthetic"] = item.source.to_dict()
        else:
            entry["path"] = str(item.source)
        items.append(entry)
    with safe_open_text(path, "w") as f:
        json.dump({"num_classes": dataset.num_classes, "items": items}, f, indent=2)


def segment_coverage_spec(
    num_segments: int,
    segment_length: int,
    num_positions: int = 1,
    channels: Optional[int] = None,
    noise: float = 0.0,
    seed: int = 0,
) -> SyntheticSpec:
    """K consecutive segments on orthogonal bases 0..K-1."""
    channels = channels or num_segments
    return SyntheticSpec(
        seed=seed,
        num_frames=num_segments * segment_length,
        num_positions=num_positions,
        channels=channels,
        segments=[Segment(segment_length, k, noise) for k in range(num_segments)],
    )


def first_segment_recall_dataset(
    num_classes: int,
    items_per_class: int,
    num_frames: int,
    bank_capacity: int,
    num_blocks: int,
    num_positions: int,
    channels: int,
    noise: float = 0.0,
    seed: int = 0,
    eval_items_per_class: int = 0,
) -> LabeledDataset:
    """
    The "identify the first segment's basis" task.

    Every stream starts with a segment on basis ``label`` and ends with a
    label-independent tail on basis ``num_classes``. The tail spans
    ``num_blocks * bank_capacity`` frames, the reach of a stack of FIFO banks,
    so a FIFO model never receives label information.
    """
    tail = num_blocks * bank_capacity
    if num_frames <= tail:
        raise ValueError(
            f"First-segment recall needs T > L·M = {tail}, got T={num_frames}"
        )
    if channels <= num_classes:
        raise ValueError(f"Need C > K for a separate tail basis, got C={channels}")

    items = []
    index = 0
    splits = (("train", items_per_class), ("eval", eval_items_per_class))
    for split, per_class in splits:
        for _ in range(per_class):
            for label in range(num_classes):
                spec = SyntheticSpec(
                    seed=seed + index,
                    num_frames=num_frames,
                    num_positions=num_positions,
                    channels=channels,
                    segments=[
                        Segment(num_frames - tail, label, noise),
                        Segment(tail, num_classes, noise),
                    ],
                    label=label,
                )
                items.append(DatasetItem(spec, label, split))
                index += 1
    return LabeledDataset(items, num_classes)


def segment_sequence_dataset(
    num_classes: int,
    num_segments: int,
    segment_length: int,
    num_positions: int,
    channels: int,
    items_per_class: int = 1,
    eval_items_per_class: int = 1,
    noise: float = 0.0,
    seed: int = 0,
) -> LabeledDataset:
    """
    K equal segments where only the first one depends on the label.

    Segment 0 sits on basis ``label``; segment j > 0 sits on basis
    ``num_classes + j - 1``. The stream length K·S does not depend on any bank
    setting, so one dataset serves every bank length.
    """
    if num_segments < 1 or segment_length < 1:
        raise ValueError(
            f"Need K >= 1 segments of length >= 1, got {num_segments}, "
            f"{segment_length}"
        )
    needed = num_classes + num_segments - 1
    if channels < needed:
        raise ValueError(
            f"{num_segments} segments over {num_classes} classes need C >= "
            f"{needed}, got C={channels}"
        )

    items = []
    index = 0
    splits = (("train", items_per_class), ("eval", eval_items_per_class))
    for split, per_class in splits:
        for _ in range(per_class):
            for label in range(num_classes):
                bases = [label] + [num_classes + j for j in range(num_segments - 1)]
                spec = SyntheticSpec(
                    seed=seed + index,
                    num_frames=num_segments * segment_length,
                    num_positions=num_positions,
                    channels=channels,
                    segments=[Segment(segment_length, b, noise) for b in bases],
                    label=label,
                )
                items.append(DatasetItem(spec, label, split))
                index += 1
    return LabeledDataset(items, num_classes)
