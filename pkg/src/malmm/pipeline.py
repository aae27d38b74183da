"""
End-to-end streaming runs, classification and training.

``run_stream`` position-embeds every frame and feeds it through the
memory-augmented Q-Former one step at a time, keeping a per-step trace of
bank sizes and timings. The final N query tokens are mean-pooled and mapped
to class logits by a linear head, supervised with cross entropy.

Two memory-free baselines run the Q-Former on every frame independently:
``baseline_concat`` keeps all N·T output tokens and ``baseline_avgpool``
averages them over time.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .features import FeatureStream, LabeledDataset, position_embed
from .qformer import QFormerConfig, QFormerParams, QFormerState, step
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    concat_rows,
    log_softmax_rows,
    matmul,
    mean_rows,
    mul,
    scale,
    sum_all,
)

logger = logging.getLogger(__name__)

MODES = ("stream", "concat", "avgpool")


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass
class StepTrace:
    """Bank sizes and timing after one step has completed."""

    timestep: int
    visual_bank_len: int
    query_bank_lens: Tuple[int, ...]
    visual_kv_rows: int
    query_kv_rows: Tuple[int, ...]
    resident_floats: int
    wall_clock_ms: float


@dataclass
class StreamResult:
    """Final tokens of a run plus its per-step trace."""

    tokens: Tensor
    trace: List[StepTrace] = field(default_factory=list)

    @property
    def downstream_token_rows(self) -> int:
        return self.tokens.shape[0]

    @property
    def peak_kv_rows(self) -> int:
        return max((s.visual_kv_rows for s in self.trace), default=0)

    @property
    def peak_query_kv_rows(self) -> int:
        return max((max(s.query_kv_rows) for s in self.trace), default=0)

    @property
    def peak_resident_floats(self) -> int:
        return max((s.resident_floats for s in self.trace), default=0)

    @property
    def wall_clock_ms(self) -> float:
        return sum(s.wall_clock_ms for s in self.trace)


def _position_table(params: QFormerParams, config: QFormerConfig) -> Optional[Tensor]:
    if config.position_embedding == "learned":
        return params["pe.table"]
    return None


def run_stream(
    stream: FeatureStream,
    params: QFormerParams,
    config: QFormerConfig,
    state: Optional[QFormerState] = None,
) -> StreamResult:
    """
    Process a stream frame by frame and return the final-step queries.

    Args:
        stream: Raw frame features
        params: Model parameters (traced params make the run differentiable)
        config: Model configuration
        state: Optional existing state to continue from

    Returns:
        StreamResult with the N×C tokens of the last step and the trace
    """
    state = state or QFormerState.create(config)
    table = _position_table(params, config)
    trace: List[StepTrace] = []
    z: Optional[Tensor] = None
    for v_t in stream:
        started = time.perf_counter()
        t = state.timestep + 1
        z = step(state, params, config, position_embed(v_t, t, table))
        trace.append(
            StepTrace(
                timestep=t,
                visual_bank_len=len(state.visual_bank),
                query_bank_lens=tuple(len(b) for b in state.query_banks),
                visual_kv_rows=state.visual_kv_rows,
                query_kv_rows=tuple(state.query_kv_rows),
                resident_floats=state.resident_floats,
                wall_clock_ms=(time.perf_counter() - started) * 1000.0,
            )
        )
    if z is None:
        raise ValueError("run_stream needs a non-empty stream")
    logger.debug("Stream done: T=%d, KV rows=%d", len(trace), trace[-1].visual_kv_rows)
    return StreamResult(z, trace)


def _single_frame(
    v_t: Tensor, params: QFormerParams, config: QFormerConfig
) -> Tuple[Tensor, QFormerState]:
    state = QFormerState.create(config)
    frame = position_embed(v_t, 1, _position_table(params, config))
    return step(state, params, config, frame), state


def _per_frame_outputs(
    stream: FeatureStream,
    params: QFormerParams,
    config: QFormerConfig,
    trace: Optional[List[StepTrace]] = None,
) -> List[Tensor]:
    outputs: List[Tensor] = []
    for t, v_t in enumerate(stream, start=1):
        started = time.perf_counter()
        z, state = _single_frame(v_t, params, config)
        outputs.append(z)
        if trace is not None:
            kept = sum(o.data.size for o in outputs)
            trace.append(
                StepTrace(
                    timestep=t,
                    visual_bank_len=len(state.visual_bank),
                    query_bank_lens=tuple(len(b) for b in state.query_banks),
                    visual_kv_rows=state.visual_kv_rows,
                    query_kv_rows=tuple(state.query_kv_rows),
                    resident_floats=state.resident_floats + kept,
                    wall_clock_ms=(time.perf_counter() - started) * 1000.0,
                )
            )
    return outputs


def baseline_concat(
    stream: FeatureStream,
    params: QFormerParams,
    config: QFormerConfig,
    trace: Optional[List[StepTrace]] = None,
) -> Tensor:
    """Run every frame as its own one-frame clip and stack all N·T outputs."""
    return concat_rows(_per_frame_outputs(stream, params, config, trace))


def baseline_avgpool(
    stream: FeatureStream,
    params: QFormerParams,
    config: QFormerConfig,
    trace: Optional[List[StepTrace]] = None,
) -> Tensor:
    """Run every frame as its own one-frame clip and average the outputs over time."""
    outputs = _per_frame_outputs(stream, params, config, trace)
    total = outputs[0]
    for z in outputs[1:]:
        total = add(total, z)
    return scale(total, 1.0 / len(outputs))


def encode(
    stream: FeatureStream,
    params: QFormerParams,
    config: QFormerConfig,
    mode: str = "stream",
) -> Tensor:
    """Downstream tokens for a stream under one temporal modeling mode."""
    if mode == "stream":
        return run_stream(stream, params, config).tokens
    if mode == "concat":
        return baseline_concat(stream, params, config)
    if mode == "avgpool":
        return baseline_avgpool(stream, params, config)
    raise ValueError(f"Unknown mode: {mode} (expected one of {MODES})")


def classify(final_tokens: Tensor, params: QFormerParams) -> Tensor:
    """Mean-pool the tokens and map them to ``1×K`` logits."""
    w, b = params["head.w"], params["head.b"]
    if final_tokens.shape[1] != w.shape[0]:
        raise ShapeError(
            f"classify: tokens {final_tokens.shape} do not match head {w.shape}"
        )
    return add(matmul(mean_rows(final_tokens), w), b)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Negative log-likelihood of ``label`` under ``softmax(logits)``."""
    num_classes = logits.shape[-1]
    if not 0 <= label < num_classes:
        raise ValueError(f"Label {label} out of range for {num_classes} classes")
    onehot = np.zeros(logits.shape)
    onehot[..., label] = 1.0
    return scale(sum_all(mul(log_softmax_rows(logits), Tensor(onehot))), -1.0)


def stream_loss(
    stream: FeatureStream,
    label: int,
    params: QFormerParams,
    config: QFormerConfig,
    mode: str = "stream",
) -> Tuple[Tensor, Tensor]:
    """Logits and cross-entropy loss of one labeled stream."""
    logits = classify(encode(stream, params, config, mode), params)
    return logits, cross_entropy(logits, label)


class SGD:
    """Plain stochastic gradient descent."""

    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def update(
        self, params: QFormerParams, grads: Dict[str, np.ndarray]
    ) -> QFormerParams:
        return params.replace(
            {
                name: params[name].data - self.learning_rate * g
                for name, g in grads.items()
            }
        )


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(
        self,
        learning_rate: float,
        weight_decay: float = 0.01,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}
        self._steps = 0

    def update(
        self, params: QFormerParams, grads: Dict[str, np.ndarray]
    ) -> QFormerParams:
        self._steps += 1
        b1, b2 = self.betas
        updates = {}
        for name, g in grads.items():
            m = b1 * self._m.get(name, np.zeros_like(g)) + (1 - b1) * g
            v = b2 * self._v.get(name, np.zeros_like(g)) + (1 - b2) * g * g
            self._m[name], self._v[name] = m, v
            m_hat = m / (1 - b1**self._steps)
            v_hat = v / (1 - b2**self._steps)
            value = params[name].data
            value = value - self.learning_rate * self.weight_decay * value
            delta = m_hat / (np.sqrt(v_hat) + self.eps)
            updates[name] = value - self.learning_rate * delta
        return params.replace(updates)


def clip_grad_norm(
    grads: Dict[str, np.ndarray], max_norm: Optional[float]
) -> Tuple[Dict[str, np.ndarray], float]:
    """Rescale gradients so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or total <= max_norm:
        return grads, total
    factor = max_norm / total
    return {name: g * factor for name, g in grads.items()}, total


def make_optimizer(name: str, learning_rate: float, weight_decay: float = 0.01):
    if name == "sgd":
        return SGD(learning_rate)
    if name == "adamw":
        return AdamW(learning_rate, weight_decay)
    raise ValueError(f"Unknown optimizer: {name}")


@dataclass
class TrainResult:
    """Trained parameters and the per-step loss curve."""

    params: QFormerParams
    loss_curve: List[float]
    epoch_losses: List[float]

    @property
    def steps(self) -> int:
        return len(self.loss_curve)


def train(
    dataset: LabeledDataset,
    config: QFormerConfig,
    epochs: int,
    learning_rate: float,
    optimizer: str = "sgd",
    seed: int = 0,
    params: Optional[QFormerParams] = None,
    mode: str = "stream",
    weight_decay: float = 0.01,
    shuffle: bool = False,
    max_steps: Optional[int] = None,
    max_grad_norm: Optional[float] = None,
) -> TrainResult:
    """
    Train the Q-Former and head with one update per labeled stream.

    Args:
        dataset: Training items
        config: Model configuration
        epochs: Passes over the dataset
        learning_rate: Optimizer step size
        optimizer: ``sgd`` or ``adamw``
        seed: Seeds parameter initialization and shuffling
        params: Starting parameters (freshly initialized if None)
        mode: ``stream``, ``concat`` or ``avgpool``
        weight_decay: AdamW decoupled weight decay
        shuffle: Shuffle item order every epoch
        max_steps: Stop after this many updates
        max_grad_norm: Clip the global gradient norm to this value (off if None)

    Returns:
        TrainResult with final parameters and loss curve
    """
    if len(dataset) == 0:
        raise ValueError("Cannot train on an empty dataset")
    if dataset.num_classes != config.num_classes:
        raise ValueError(
            f"Dataset has {dataset.num_classes} classes, config expects "
            f"{config.num_classes}"
        )
    params = params or QFormerParams.initialize(config, seed)
    opt = make_optimizer(optimizer, learning_rate, weight_decay)
    rng = np.random.default_rng(seed)
    loss_curve: List[float] = []
    epoch_losses: List[float] = []

    for epoch in range(epochs):
        order = list(range(len(dataset)))
        if shuffle:
            order = [int(i) for i in rng.permutation(len(dataset))]
        epoch_total = 0.0
        for index in order:
            item = dataset.items[index]
            step_number = len(loss_curve) + 1
            tape = Tape()
            traced = params.traced(tape)
            try:
                _, loss = stream_loss(item.stream(), item.label, traced, config, mode)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteError(f"loss is {value}")
                grads = backward(tape, loss)
            except NonFiniteError as e:
                logger.warning("Training diverged at step %d: %s", step_number, e)
                raise TrainingDivergedError(
                    f"Non-finite values at step {step_number}: {e}"
                ) from e
            named = {
                name: grads[t.node_id].data
                for name, t in traced.tensors.items()
                if t.node_id in grads
            }
            named, norm = clip_grad_norm(named, max_grad_norm)
            if not math.isfinite(norm):
                raise TrainingDivergedError(
                    f"Non-finite gradient norm at step {step_number}"
                )
            params = opt.update(params, named)
            loss_curve.append(value)
            epoch_total += value
            if max_steps is not None and len(loss_curve) >= max_steps:
                break
        epoch_losses.append(epoch_total / len(order))
        logger.info("Epoch %d/%d: mean loss %.6f", epoch + 1, epochs, epoch_losses[-1])
        if max_steps is not None and len(loss_curve) >= max_steps:
            break

    return TrainResult(params, loss_curve, epoch_losses)


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    predictions: List[int]


def evaluate(
    dataset: LabeledDataset,
    params: QFormerParams,
    config: QFormerConfig,
    mode: str = "stream",
    workers: int = 1,
) -> EvalResult:
    """
    Mean loss and accuracy over a dataset.

    Items may run on a thread pool; results are reduced in dataset order.
    """
    if len(dataset) == 0:
        raise ValueError("Cannot evaluate an empty dataset")

    def score(index: int) -> Tuple[float, int]:
        item = dataset.items[index]
        logits, loss = stream_loss(item.stream(), item.label, params, config, mode)
        return loss.item(), int(np.argmax(logits.data))

    indices = range(len(dataset))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(score, indices))
    else:
        results = [score(i) for i in indices]

    predictions = [p for _, p in results]
    correct = sum(p == item.label for p, item in zip(predictions, dataset.items))
    return EvalResult(
        loss=sum(loss for loss, _ in results) / len(results),
        accuracy=correct / len(results),
        predictions=predictions,
    )
