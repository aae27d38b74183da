"""
Benchmark harness: scaling, timing, ablation and bank-length sweeps.

Every sweep returns a ``RunReport``: an append-only list of records, each
carrying the model and bank shape that produced it, plus an echo of the full
configuration so the run can be repeated exactly. Reports render as CSV (the
column order of each sweep is fixed) or JSON.
"""

import copy
import csv
import io
import json
import logging
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import (
    Any,
    Callable,
    Dict,
    List,
    Optional,
    Sequence,
    Tuple,
    TypeVar,
    Union,
)

import numpy as np

from .config import BASELINE_POLICIES, MalmmConfig
from .features import (
    FeatureStream,
    LabeledDataset,
    Segment,
    SyntheticSpec,
    first_segment_recall_dataset,
    generate_synthetic,
    segment_coverage_spec,
    segment_sequence_dataset,
)
from .memory_bank import CompressionPolicy, MemoryBank, TokenGrid
from .pipeline import (
    StepTrace,
    baseline_avgpool,
    baseline_concat,
    evaluate,
    run_stream,
    train,
)
from .qformer import QFormerConfig, QFormerParams
from .utils import safe_open_text

logger = logging.getLogger(__name__)

BYTES_PER_FLOAT = 8

STREAM_POLICIES = ("mbc", "mbc_frame", "fifo", "none")
ALL_POLICIES = STREAM_POLICIES + BASELINE_POLICIES
SWEEP_READOUTS = ("recall", "trained")

SHAPE_COLUMNS = ["policy", "T", "M", "N", "P", "C", "L", "H", "seed"]
SCALING_COLUMNS = SHAPE_COLUMNS + [
    "downstream_token_rows",
    "peak_kv_rows",
    "peak_resident_floats",
    "peak_resident_bytes",
    "wall_clock_ms",
]
TIMING_COLUMNS = SHAPE_COLUMNS + [
    "repeats",
    "median_ms",
    "min_ms",
    "max_ms",
    "repeat_ms",
]
ABLATION_COLUMNS = SHAPE_COLUMNS + [
    "visual_bank",
    "query_bank",
    "train_loss",
    "train_accuracy",
    "eval_loss",
    "eval_accuracy",
    "steps",
    "downstream_token_rows",
    "peak_kv_rows",
    "peak_query_kv_rows",
    "peak_resident_floats",
]
BANKLEN_COLUMNS = ["M", "accuracy"]

_In = TypeVar("_In")
_Out = TypeVar("_Out")


class RunReport:
    """Append-only collection of metric records with a configuration echo."""

    def __init__(
        self,
        command: str,
        columns: Sequence[str],
        config: Optional[Dict[str, Any]] = None,
    ):
        self.command = command
        self.columns = list(columns)
        self.config = config or {}
        self.summary: Dict[str, Any] = {}
        self._records: List[Dict[str, Any]] = []

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> Tuple[Dict[str, Any], ...]:
        return tuple(dict(r) for r in self._records)

    def append(self, record: Dict[str, Any]) -> None:
        missing = [c for c in self.columns if c not in record]
        if missing:
            raise ValueError(f"{self.command} record is missing columns: {missing}")
        self._records.append(dict(record))

    def column(self, name: str) -> List[Any]:
        return [r[name] for r in self._records]

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.DictWriter(
            buffer, fieldnames=self.columns, extrasaction="ignore", lineterminator="\n"
        )
        writer.writeheader()
        for record in self._records:
            writer.writerow(record)
        return buffer.getvalue()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "config": self.config,
            "columns": self.columns,
            "records": list(self.records),
            "summary": self.summary,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def save(self, path: Union[str, Path]) -> Path:
        """Write JSON for ``.json`` paths, CSV otherwise."""
        path = Path(path)
        text = self.to_json() if path.suffix.lower() == ".json" else self.to_csv()
        with safe_open_text(path, "w") as f:
            f.write(text)
        return path


@dataclass
class LinearFit:
    slope: float
    intercept: float
    r_squared: float


def linear_fit(xs: Sequence[float], ys: Sequence[float]) -> LinearFit:
    """Least-squares line through ``(xs, ys)`` and its coefficient of determination."""
    if len(xs) < 2 or len(xs) != len(ys):
        raise ValueError("A linear fit needs at least two (x, y) points")
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    residual = float(np.sum((y - (slope * x + intercept)) ** 2))
    total = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1.0 if total == 0.0 else 1.0 - residual / total
    return LinearFit(float(slope), float(intercept), r_squared)


def _map(
    fn: Callable[[_In], _Out], items: Sequence[_In], workers: int
) -> List[_Out]:
    """Map in order, optionally on a thread pool; results keep input order."""
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def validate_frames_list(frames_list: Sequence[int]) -> List[int]:
    frames = [int(t) for t in frames_list]
    if not frames:
        raise ValueError("frames list is empty")
    if frames[0] < 1:
        raise ValueError(f"frame counts must be >= 1, got {frames[0]}")
    if any(b <= a for a, b in zip(frames, frames[1:])):
        raise ValueError(f"frames list must be strictly increasing, got {frames}")
    return frames


def validate_policies(policies: Sequence[str]) -> List[str]:
    names = [p.strip().lower() for p in policies if p.strip()]
    if not names:
        raise ValueError("No policies given")
    for name in names:
        if name in BASELINE_POLICIES:
            continue
        try:
            CompressionPolicy.from_name(name)
        except ValueError:
            raise ValueError(f"Unknown policy: {name} (expected one of {ALL_POLICIES})")
    return names


def _shape(policy: str, num_frames: int, qconfig: QFormerConfig, seed: int):
    return {
        "policy": policy,
        "T": num_frames,
        "M": qconfig.bank_capacity,
        "N": qconfig.num_queries,
        "P": qconfig.visual_tokens_per_frame,
        "C": qconfig.channels,
        "L": qconfig.num_blocks,
        "H": qconfig.num_heads,
        "seed": seed,
    }


def noise_stream(config: QFormerConfig, num_frames: int, seed: int) -> FeatureStream:
    """Seeded unit-variance stream used for scaling and timing runs."""
    spec = SyntheticSpec(
        seed=seed,
        num_frames=num_frames,
        num_positions=config.visual_tokens_per_frame,
        channels=config.channels,
        segments=[Segment(num_frames, 0, 1.0)],
    )
    return generate_synthetic(spec)


def measure_stream(
    stream: FeatureStream, params: QFormerParams, qconfig: QFormerConfig, policy: str
) -> Dict[str, Any]:
    """Token and memory columns of one run under ``policy``."""
    started = time.perf_counter()
    if policy in BASELINE_POLICIES:
        trace: List[StepTrace] = []
        baseline = baseline_concat if policy == "concat" else baseline_avgpool
        tokens = baseline(stream, params, qconfig, trace)
        token_rows = tokens.shape[0]
    else:
        result = run_stream(stream, params, qconfig)
        trace = result.trace
        token_rows = result.downstream_token_rows
    elapsed = (time.perf_counter() - started) * 1000.0
    peak_floats = max(s.resident_floats for s in trace)
    return {
        "downstream_token_rows": token_rows,
        "peak_kv_rows": max(s.visual_kv_rows for s in trace),
        "peak_query_kv_rows": max(max(s.query_kv_rows) for s in trace),
        "peak_resident_floats": peak_floats,
        "peak_resident_bytes": peak_floats * BYTES_PER_FLOAT,
        "wall_clock_ms": elapsed,
    }


def _echo(config: MalmmConfig, **arguments: Any) -> Dict[str, Any]:
    echo = config.to_dict()
    echo["arguments"] = arguments
    return echo


def scaling(
    config: MalmmConfig,
    policies: Sequence[str] = ("mbc", "fifo", "concat"),
    frames_list: Optional[Sequence[int]] = None,
    seed: Optional[int] = None,
    workers: int = 1,
) -> RunReport:
    """
    Downstream tokens and peak memory against stream length.

    Args:
        config: Model and bank configuration
        policies: Bank policies and/or baselines to run
        frames_list: Strictly increasing stream lengths
        seed: Seeds parameters and streams (defaults to the training seed)
        workers: Run independent (policy, T) points on this many threads

    Returns:
        RunReport with SCALING_COLUMNS, one row per (policy, T)
    """
    policies = validate_policies(policies)
    frames = validate_frames_list(frames_list or config.bench.frames_list)
    seed = config.training.seed if seed is None else seed
    report = RunReport(
        "scaling",
        SCALING_COLUMNS,
        _echo(config, policies=policies, frames_list=frames, seed=seed),
    )

    def point(job: Tuple[str, int]) -> Dict[str, Any]:
        policy, num_frames = job
        qconfig = config.to_qformer_config(policy)
        params = QFormerParams.initialize(qconfig, seed)
        stream = noise_stream(qconfig, num_frames, seed)
        record = _shape(policy, num_frames, qconfig, seed)
        record.update(measure_stream(stream, params, qconfig, policy))
        logger.info(
            "scaling %s T=%d: %d tokens, %d KV rows",
            policy,
            num_frames,
            record["downstream_token_rows"],
            record["peak_kv_rows"],
        )
        return record

    jobs = [(policy, t) for policy in policies for t in frames]
    for record in _map(point, jobs, workers):
        report.append(record)
    return report


def timing(
    config: MalmmConfig,
    frames_list: Optional[Sequence[int]] = None,
    repeats: Optional[int] = None,
    policy: str = "mbc",
    seed: Optional[int] = None,
) -> RunReport:
    """
    Median wall-clock of full streaming runs against stream length.

    Points run sequentially so they do not compete for the CPU. The summary
    holds a least-squares line through (T, median_ms).
    """
    policy = validate_policies([policy])[0]
    frames = validate_frames_list(frames_list or config.bench.frames_list)
    repeats = config.bench.repeats if repeats is None else repeats
    if repeats < 3:
        raise ValueError(f"timing needs at least 3 repeats, got {repeats}")
    if len(frames) < 2:
        raise ValueError("timing needs at least two frame counts for a linear fit")
    seed = config.training.seed if seed is None else seed
    qconfig = config.to_qformer_config(policy)
    params = QFormerParams.initialize(qconfig, seed)
    report = RunReport(
        "timing",
        TIMING_COLUMNS,
        _echo(config, frames_list=frames, repeats=repeats, policy=policy, seed=seed),
    )

    for num_frames in frames:
        stream = noise_stream(qconfig, num_frames, seed)
        samples = [
            measure_stream(stream, params, qconfig, policy)["wall_clock_ms"]
            for _ in range(repeats)
        ]
        record = _shape(policy, num_frames, qconfig, seed)
        record.update(
            repeats=repeats,
            median_ms=statistics.median(samples),
            min_ms=min(samples),
            max_ms=max(samples),
            repeat_ms=";".join(f"{s:.3f}" for s in samples),
        )
        logger.info("timing T=%d: median %.2f ms", num_frames, record["median_ms"])
        report.append(record)

    fit = linear_fit(frames, report.column("median_ms"))
    report.summary = {
        "slope_ms_per_frame": fit.slope,
        "intercept_ms": fit.intercept,
        "r_squared": fit.r_squared,
    }
    return report


def default_ablation_dataset(
    config: MalmmConfig, items_per_class: int = 1, seed: int = 0
) -> LabeledDataset:
    """
    First-segment recall task sized to the configured model.

    The first segment spans M+1 frames and the tail L·M frames, so T > 2M and
    the tail covers everything a stack of FIFO banks can still see.
    """
    model, capacity = config.model, config.bank.capacity
    return first_segment_recall_dataset(
        num_classes=model.num_classes,
        items_per_class=items_per_class,
        num_frames=(model.num_blocks + 1) * capacity + 1,
        bank_capacity=capacity,
        num_blocks=model.num_blocks,
        num_positions=model.visual_tokens_per_frame,
        channels=model.channels,
        seed=seed,
        eval_items_per_class=items_per_class,
    )


def ablate(
    config: MalmmConfig,
    dataset: Optional[LabeledDataset] = None,
    policies: Sequence[str] = ("mbc", "fifo", "concat", "avgpool", "none"),
    epochs: Optional[int] = None,
    learning_rate: Optional[float] = None,
    seed: Optional[int] = None,
    workers: int = 1,
) -> RunReport:
    """
    Train and evaluate one model per temporal modeling policy.

    Args:
        config: Model, bank (including the bank switches) and training settings
        dataset: Labeled streams; the first-segment recall task if None
        policies: Bank policies and/or baselines
        epochs: Training epochs (defaults to the training config)
        learning_rate: Step size (defaults to the training config)
        seed: Parameter and shuffle seed (defaults to the training config)
        workers: Train independent policies on this many threads

    Returns:
        RunReport with ABLATION_COLUMNS, one row per policy
    """
    policies = validate_policies(policies)
    training = config.training
    epochs = training.epochs if epochs is None else epochs
    learning_rate = training.learning_rate if learning_rate is None else learning_rate
    seed = training.seed if seed is None else seed
    if dataset is None:
        dataset = default_ablation_dataset(config, seed=seed)
    train_set, eval_set = dataset.split("train"), dataset.split("eval")
    report = RunReport(
        "ablate",
        ABLATION_COLUMNS,
        _echo(
            config,
            policies=policies,
            epochs=epochs,
            learning_rate=learning_rate,
            seed=seed,
            items=len(dataset),
        ),
    )

    def run(policy: str) -> Dict[str, Any]:
        qconfig = config.to_qformer_config(policy)
        mode = policy if policy in BASELINE_POLICIES else "stream"
        trained = train(
            train_set,
            qconfig,
            epochs,
            learning_rate,
            optimizer=training.optimizer,
            seed=seed,
            mode=mode,
            weight_decay=training.weight_decay,
            shuffle=training.shuffle,
            max_grad_norm=training.max_grad_norm,
        )
        on_train = evaluate(train_set, trained.params, qconfig, mode)
        on_eval = evaluate(eval_set, trained.params, qconfig, mode)
        first = dataset.items[0].stream()
        record = _shape(policy, len(first), qconfig, seed)
        record.update(
            visual_bank=qconfig.use_visual_bank,
            query_bank=qconfig.use_query_bank,
            train_loss=on_train.loss,
            train_accuracy=on_train.accuracy,
            eval_loss=on_eval.loss,
            eval_accuracy=on_eval.accuracy,
            steps=trained.steps,
        )
        record.update(measure_stream(first, trained.params, qconfig, policy))
        logger.info(
            "ablate %s: train acc %.3f, eval acc %.3f",
            policy,
            on_train.accuracy,
            on_eval.accuracy,
        )
        return record

    for record in _map(run, policies, workers):
        report.append(record)
    return report


def decode_bank_bases(bank: MemoryBank) -> List[int]:
    """Argmax channel of every entry, averaged over positions."""
    return [int(np.argmax(entry.mean(axis=0))) for entry in bank.token_array()]


def recall_accuracy(
    num_segments: int,
    segment_length: int,
    capacity: int,
    policy: str = "mbc",
    num_positions: int = 1,
    seed: int = 0,
) -> float:
    """
    Fraction of segment bases still decodable from a bank after the stream.

    Frames go straight into a bank of capacity ``capacity`` (no model), then
    every entry is decoded to its dominant basis.
    """
    spec = segment_coverage_spec(
        num_segments, segment_length, num_positions, seed=seed
    )
    bank = MemoryBank(
        capacity, num_positions, spec.channels, CompressionPolicy.from_name(policy)
    )
    for frame in generate_synthetic(spec):
        bank.append(TokenGrid.fresh(frame))
    recovered = set(decode_bank_bases(bank)) & set(range(num_segments))
    return len(recovered) / num_segments


def banklen_sweep(
    config: MalmmConfig,
    lengths: Sequence[int],
    readout: str = "recall",
    num_segments: int = 5,
    segment_length: int = 4,
    epochs: Optional[int] = None,
    learning_rate: Optional[float] = None,
    seed: Optional[int] = None,
    workers: int = 1,
) -> RunReport:
    """
    Accuracy against bank length M.

    ``recall`` decodes which of ``num_segments`` orthogonal segments survive
    in the bank; ``trained`` trains and evaluates the full model at every M on
    one fixed dataset of ``num_segments`` segments whose first segment holds
    the label.
    """
    if readout not in SWEEP_READOUTS:
        raise ValueError(
            f"Unknown readout: {readout} (expected one of {SWEEP_READOUTS})"
        )
    if config.bank.policy in BASELINE_POLICIES:
        raise ValueError("banklen-sweep needs a bank policy, not a baseline")
    lengths = [int(m) for m in lengths]
    if not lengths or min(lengths) < 1:
        raise ValueError(f"bank lengths must be >= 1, got {lengths}")
    seed = config.training.seed if seed is None else seed
    policy = config.bank.policy
    dataset = None
    if readout == "trained":
        model = config.model
        dataset = segment_sequence_dataset(
            model.num_classes,
            num_segments,
            segment_length,
            model.visual_tokens_per_frame,
            model.channels,
            seed=seed,
        )
    report = RunReport(
        "banklen-sweep",
        BANKLEN_COLUMNS,
        _echo(
            config,
            lengths=lengths,
            readout=readout,
            num_segments=num_segments,
            segment_length=segment_length,
            seed=seed,
        ),
    )

    def point(capacity: int) -> Dict[str, Any]:
        if readout == "recall":
            accuracy = recall_accuracy(
                num_segments,
                segment_length,
                capacity,
                policy,
                config.model.visual_tokens_per_frame,
                seed,
            )
        else:
            swept = copy.deepcopy(config)
            swept.bank.capacity = capacity
            trained = ablate(
                swept,
                dataset=dataset,
                policies=[policy],
                epochs=epochs,
                learning_rate=learning_rate,
                seed=seed,
            )
            accuracy = trained.records[0]["eval_accuracy"]
        logger.info("banklen M=%d: accuracy %.3f", capacity, accuracy)
        return {"M": capacity, "accuracy": accuracy}

    for record in _map(point, lengths, workers):
        report.append(record)
    return report
