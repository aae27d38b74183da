"""
Seeded property and oracle suite.

Each ``check_*`` function runs one family of checks on generated instances
and returns a ``PropertyResult``; ``run_verification`` runs them all and
collects a ``VerificationReport`` whose JSON form is what ``malmm-py verify``
prints. Instances are derived from ``(seed, suite, index)`` so a given seed
always reproduces the same failure set.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from .features import (
    FeatureStream,
    Segment,
    SyntheticSpec,
    generate_synthetic,
    position_embed,
)
from .memory_bank import CompressionPolicy, MemoryBank, TokenGrid, oracle_compress
from .pipeline import stream_loss
from .qformer import (
    AttentionWeights,
    QFormerConfig,
    QFormerParams,
    attention,
    causality_probe,
)
from .tensor import Tape, Tensor, backward, concat_rows, softmax_rows

logger = logging.getLogger(__name__)

ORACLE_TOLERANCE = 1e-12
SOFTMAX_TOLERANCE = 1e-12
DUPLICATION_TOLERANCE = 1e-10
GRADIENT_TOLERANCE = 1e-4
GRADIENT_STEP = 1e-5
MIN_TIE_INSTANCES = 50
MAX_REPORTED_FAILURES = 20


@dataclass
class PropertyResult:
    """Outcome of one property family."""

    name: str
    checked: int = 0
    failures: List[Dict[str, Any]] = field(default_factory=list)
    detail: Dict[str, Any] = field(default_factory=dict)
    seconds: float = 0.0
    failed: int = 0

    @property
    def passed(self) -> bool:
        return self.failed == 0

    def record_failure(self, **info: Any) -> None:
        self.failed += 1
        if len(self.failures) < MAX_REPORTED_FAILURES:
            self.failures.append(info)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["passed"] = self.passed
        return data


@dataclass
class VerificationReport:
    seed: int
    instances: int
    tie_break: str
    results: List[PropertyResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failed_suites(self) -> List[str]:
        return [r.name for r in self.results if not r.passed]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "instances": self.instances,
            "tie_break": self.tie_break,
            "passed": self.passed,
            "failed_suites": self.failed_suites,
            "results": [r.to_dict() for r in self.results],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _rng(seed: int, suite: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, suite, index])


def _random_grids(rng: np.random.Generator, count: int, positions: int, channels: int):
    return [
        TokenGrid.fresh(Tensor(rng.normal(0.0, 1.0, (positions, channels))))
        for _ in range(count)
    ]


def _run_bank(grids: Sequence[TokenGrid], capacity: int, policy: CompressionPolicy):
    positions, channels = grids[0].tokens.shape
    bank = MemoryBank(capacity, positions, channels, policy)
    for grid in grids:
        bank.append(grid)
    return bank


def tie_instance(rng: np.random.Generator, index: int) -> Dict[str, Any]:
    """
    A stream with exactly tied adjacent similarities.

    Even indices repeat one grid for the whole stream; odd indices embed a run
    of at least three copies of one grid among random grids. Tied pairs are
    always copies of the same vector, so every similarity in a tie is the same
    floating-point number.
    """
    capacity = int(rng.integers(2, 9))
    num_frames = int(rng.integers(capacity + 2, 13))
    positions = int(rng.integers(1, 5))
    channels = int(rng.integers(1, 7))
    repeated = TokenGrid.fresh(Tensor(rng.normal(0.0, 1.0, (positions, channels))))
    if index % 2 == 0:
        grids = [repeated] * num_frames
    else:
        grids = _random_grids(rng, num_frames, positions, channels)
        run = int(rng.integers(3, min(6, num_frames) + 1))
        start = int(rng.integers(0, num_frames - run + 1))
        grids[start : start + run] = [repeated] * run
    return {"grids": grids, "capacity": capacity}


def random_instance(rng: np.random.Generator) -> Dict[str, Any]:
    """T <= 12, P <= 4, C <= 6, M <= 8 with i.i.d. Gaussian grids."""
    num_frames = int(rng.integers(2, 13))
    capacity = int(rng.integers(1, min(8, num_frames - 1) + 1))
    positions = int(rng.integers(1, 5))
    channels = int(rng.integers(1, 7))
    return {
        "grids": _random_grids(rng, num_frames, positions, channels),
        "capacity": capacity,
    }


def compare_with_oracle(
    grids: Sequence[TokenGrid],
    capacity: int,
    policy: CompressionPolicy,
) -> Optional[Dict[str, Any]]:
    """
    Run one instance through a bank and the oracle.

    Returns:
        None on agreement, otherwise a dict describing the first mismatch
    """
    level = "frame" if policy.kind == "mbc_frame" else "token"
    bank = _run_bank(grids, capacity, policy)
    expected = oracle_compress(grids, capacity, level)

    if bank.provenance != expected.provenance:
        return {
            "field": "provenance",
            "bank": bank.provenance,
            "oracle": expected.provenance,
        }
    if bank.weights != expected.weights:
        return {"field": "weights", "bank": bank.weights, "oracle": expected.weights}
    diff = float(np.max(np.abs(bank.token_array() - np.asarray(expected.tokens))))
    if diff >= ORACLE_TOLERANCE:
        return {"field": "tokens", "max_abs_diff": diff}
    return None


def check_mbc_oracle(
    seed: int = 0, instances: int = 1000, tie_break: str = "earliest"
) -> PropertyResult:
    """Token-level MBC against the exhaustive oracle, plus constructed tie instances."""
    result = PropertyResult("mbc_oracle")
    policy = CompressionPolicy("mbc_token", tie_break)
    num_ties = max(MIN_TIE_INSTANCES, instances // 20)
    ties_failed = 0
    for index in range(instances + num_ties):
        rng = _rng(seed, 1, index)
        is_tie = index >= instances
        instance = tie_instance(rng, index) if is_tie else random_instance(rng)
        mismatch = compare_with_oracle(instance["grids"], instance["capacity"], policy)
        result.checked += 1
        if mismatch is not None:
            ties_failed += int(is_tie)
            result.record_failure(instance=index, tie=is_tie, **mismatch)
    result.detail = {
        "random_instances": instances,
        "tie_instances": num_ties,
        "tie_failures": ties_failed,
        "tie_break": tie_break,
    }
    return result


def frame_token_divergence_example() -> List[TokenGrid]:
    """
    P=3, C=2 stream on which frame-level and token-level MBC disagree (M=2).

    Positions 0 and 2 repeat e0, e0, e1 and position 1 runs e0, e1, e1. Token
    level merges pair (1, 2) at position 1 and pair (0, 1) elsewhere; frame
    level scores the pairs 2/3 and 1/3 and merges (0, 1) everywhere.
    """
    e0, e1 = [1.0, 0.0], [0.0, 1.0]
    frames = [[e0, e0, e0], [e0, e1, e0], [e1, e1, e1]]
    return [TokenGrid.fresh(Tensor(np.array(f))) for f in frames]


def check_frame_token_equivalence(
    seed: int = 0, instances: int = 200
) -> PropertyResult:
    """Frame- and token-level MBC agree bit for bit whenever P=1."""
    result = PropertyResult("frame_token_equivalence")
    for index in range(instances):
        rng = _rng(seed, 2, index)
        num_frames = int(rng.integers(2, 13))
        capacity = int(rng.integers(1, min(8, num_frames - 1) + 1))
        grids = _random_grids(rng, num_frames, 1, int(rng.integers(1, 7)))
        token = _run_bank(grids, capacity, CompressionPolicy("mbc_token"))
        frame = _run_bank(grids, capacity, CompressionPolicy("mbc_frame"))
        result.checked += 1
        if token.provenance != frame.provenance or not np.array_equal(
            token.token_array(), frame.token_array()
        ):
            result.record_failure(instance=index)

    example = frame_token_divergence_example()
    token = _run_bank(example, 2, CompressionPolicy("mbc_token"))
    frame = _run_bank(example, 2, CompressionPolicy("mbc_frame"))
    result.checked += 1
    if token.provenance == frame.provenance:
        result.record_failure(instance="divergence_example")
    result.detail = {
        "divergence_example": {
            "token_provenance": token.provenance,
            "frame_provenance": frame.provenance,
        }
    }
    return result


def check_order_preservation(seed: int = 0, instances: int = 1000) -> PropertyResult:
    """Provenance stays a contiguous ascending partition under every bounded policy."""
    result = PropertyResult("order_preservation")
    kinds = ("mbc_token", "mbc_frame", "fifo")
    for index in range(instances):
        instance = random_instance(_rng(seed, 1, index))
        for kind in kinds:
            policy = CompressionPolicy(kind)
            bank = _run_bank(instance["grids"], instance["capacity"], policy)
            result.checked += 1
            try:
                bank.check_invariants()
            except ValueError as e:
                result.record_failure(instance=index, policy=kind, error=str(e))
                continue
            expected_len = min(len(instance["grids"]), instance["capacity"])
            if len(bank) != expected_len:
                result.record_failure(instance=index, policy=kind, length=len(bank))
    return result


def check_fifo_exactness(seed: int = 0, instances: int = 200) -> PropertyResult:
    """A FIFO bank holds exactly the last M grids, untouched."""
    result = PropertyResult("fifo_exactness")
    for index in range(instances):
        instance = random_instance(_rng(seed, 3, index))
        grids, capacity = instance["grids"], instance["capacity"]
        bank = _run_bank(grids, capacity, CompressionPolicy("fifo"))
        kept = grids[-capacity:]
        first = len(grids) - len(kept) + 1
        expected_prov = [
            [(t,)] * bank.num_positions for t in range(first, len(grids) + 1)
        ]
        result.checked += 1
        if bank.provenance != expected_prov or not np.array_equal(
            bank.token_array(), np.stack([g.tokens.data for g in kept])
        ):
            result.record_failure(instance=index)
    return result


def check_segment_coverage(seed: int = 0, instances: int = 50) -> PropertyResult:
    """
    With K noiseless orthogonal segments and M=K, every MBC entry is one
    whole segment and a FIFO bank covers only the last M frames.
    """
    result = PropertyResult("segment_coverage")
    for index in range(instances):
        rng = _rng(seed, 4, index)
        num_segments = int(rng.integers(2, 7))
        lengths = [int(n) for n in rng.integers(1, 6, num_segments)]
        positions = int(rng.integers(1, 4))
        spec = SyntheticSpec(
            seed=seed,
            num_frames=sum(lengths),
            num_positions=positions,
            channels=num_segments,
            segments=[Segment(n, k) for k, n in enumerate(lengths)],
        )
        frames = [TokenGrid.fresh(v) for v in generate_synthetic(spec)]
        intervals = [tuple(range(a, b + 1)) for a, b in spec.segment_intervals()]
        mbc = _run_bank(frames, num_segments, CompressionPolicy("mbc_token"))
        fifo = _run_bank(frames, num_segments, CompressionPolicy("fifo"))
        result.checked += 1
        if mbc.provenance != [[iv] * positions for iv in intervals]:
            result.record_failure(
                instance=index, policy="mbc", provenance=mbc.provenance
            )
        covered = {t for entry in fifo.provenance for prov in entry for t in prov}
        tail = set(range(spec.num_frames - num_segments + 1, spec.num_frames + 1))
        if covered != tail:
            result.record_failure(
                instance=index, policy="fifo", covered=sorted(covered)
            )
    return result


def _small_config(**overrides: Any) -> QFormerConfig:
    settings: Dict[str, Any] = dict(
        num_blocks=2,
        num_queries=4,
        channels=8,
        num_heads=2,
        ffn_hidden=16,
        visual_tokens_per_frame=2,
        bank_capacity=3,
        num_classes=2,
    )
    settings.update(overrides)
    return QFormerConfig(**settings)


def check_causality(seed: int = 0, instances: int = 100) -> PropertyResult:
    """Streams that share a prefix give bit-identical outputs over that prefix."""
    result = PropertyResult("causality")
    config = _small_config()
    params = QFormerParams.initialize(config, seed)
    shape = (config.visual_tokens_per_frame, config.channels)
    for index in range(instances):
        rng = _rng(seed, 5, index)
        num_frames = int(rng.integers(2, 9))
        prefix = int(rng.integers(1, num_frames + 1))
        raw_a = [rng.normal(0.0, 1.0, shape) for _ in range(num_frames)]
        suffix = [rng.normal(0.0, 1.0, shape) for _ in range(num_frames - prefix)]
        raw_b = raw_a[:prefix] + suffix
        frames_a = [position_embed(Tensor(v), t) for t, v in enumerate(raw_a, start=1)]
        frames_b = [position_embed(Tensor(v), t) for t, v in enumerate(raw_b, start=1)]
        result.checked += 1
        if not causality_probe(frames_a, frames_b, params, config, prefix):
            result.record_failure(instance=index, prefix=prefix, frames=num_frames)
    return result


def _random_attention(rng: np.random.Generator, channels: int, num_heads: int):
    d = channels // num_heads
    shapes = ((channels, d), (channels, d), (channels, d), (d, channels))
    return AttentionWeights(
        *[
            [
                Tensor(rng.normal(0.0, 1.0 / np.sqrt(rows), (rows, cols)))
                for _ in range(num_heads)
            ]
            for rows, cols in shapes
        ]
    )


def check_softmax_rows(seed: int = 0, instances: int = 100) -> PropertyResult:
    """Softmax and attention probability rows sum to one."""
    result = PropertyResult("softmax_rows")
    worst = 0.0
    largest = 0.0
    for index in range(instances):
        rng = _rng(seed, 6, index)
        rows, cols = int(rng.integers(1, 9)), int(rng.integers(1, 17))
        magnitude = float(10.0 ** rng.uniform(-2, 3))
        largest = max(largest, magnitude)
        probs = softmax_rows(Tensor(rng.normal(0.0, magnitude, (rows, cols))))
        channels = 2 * int(rng.integers(1, 5))
        queries = Tensor(rng.normal(0.0, 1.0, (int(rng.integers(1, 6)), channels)))
        kv = Tensor(rng.normal(0.0, 1.0, (int(rng.integers(1, 10)), channels)))
        _, maps = attention(queries, kv, _random_attention(rng, channels, 2), 2, True)
        result.checked += 1
        for p in [probs, *maps]:
            err = float(np.max(np.abs(p.data.sum(axis=1) - 1.0)))
            worst = max(worst, err)
            if err > SOFTMAX_TOLERANCE:
                result.record_failure(instance=index, error=err)
                break
    result.detail = {"max_row_sum_error": worst, "max_logit_scale": largest}
    return result


def check_duplication_invariance(seed: int = 0, instances: int = 100) -> PropertyResult:
    """Single-head attention is unchanged when every key/value row is duplicated."""
    result = PropertyResult("duplication_invariance")
    worst = 0.0
    for index in range(instances):
        rng = _rng(seed, 7, index)
        channels = int(rng.integers(1, 9))
        queries = Tensor(rng.normal(0.0, 1.0, (int(rng.integers(1, 6)), channels)))
        kv = Tensor(rng.normal(0.0, 1.0, (int(rng.integers(1, 10)), channels)))
        weights = _random_attention(rng, channels, 1)
        once = attention(queries, kv, weights, 1)
        twice = attention(queries, concat_rows([kv, kv]), weights, 1)
        err = float(np.max(np.abs(once.data - twice.data)))
        worst = max(worst, err)
        result.checked += 1
        if err > DUPLICATION_TOLERANCE:
            result.record_failure(instance=index, error=err)
    result.detail = {"max_abs_error": worst}
    return result


def finite_difference_errors(
    params: QFormerParams,
    config: QFormerConfig,
    stream: FeatureStream,
    label: int,
    step: float = GRADIENT_STEP,
) -> Dict[str, float]:
    """
    Relative error between reverse-mode and central-difference gradients.

    Returns:
        Per parameter tensor, ``||g_a - g_n|| / max(||g_a||, ||g_n||, 1e-8)``
    """
    tape = Tape()
    traced = params.traced(tape)
    _, loss = stream_loss(stream, label, traced, config)
    grads = backward(tape, loss)

    def loss_at(name: str, value: np.ndarray) -> float:
        _, perturbed = stream_loss(stream, label, params.replace({name: value}), config)
        return perturbed.item()

    errors: Dict[str, float] = {}
    for name in params.names():
        base = params[name].data
        analytic = (
            grads[traced[name].node_id].data
            if traced[name].node_id in grads
            else np.zeros(base.shape)
        )
        numeric = np.zeros(base.shape)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += step
            minus[idx] -= step
            numeric[idx] = (loss_at(name, plus) - loss_at(name, minus)) / (2 * step)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
        errors[name] = float(np.linalg.norm(analytic - numeric) / denom)
    return errors


def check_gradients(
    seed: int = 0, config: Optional[QFormerConfig] = None, num_frames: int = 4
) -> PropertyResult:
    """Full forward and loss: reverse-mode gradients against central differences."""
    result = PropertyResult("gradients")
    config = config or _small_config()
    rng = _rng(seed, 8, 0)
    params = QFormerParams.initialize(config, seed)
    # Non-trivial layer-norm and head parameters exercise every gradient path.
    params = params.replace(
        {
            name: params[name].data + rng.normal(0.0, 0.1, params[name].shape)
            for name in params.names()
            if name.endswith((".gamma", ".beta")) or name == "head.b"
        }
    )
    shape = (config.visual_tokens_per_frame, config.channels)
    stream = FeatureStream.from_frames(
        [rng.normal(0.0, 1.0, shape) for _ in range(num_frames)]
    )
    errors = finite_difference_errors(params, config, stream, int(rng.integers(0, 2)))
    result.checked = len(errors)
    for name, err in errors.items():
        if not err < GRADIENT_TOLERANCE:
            result.record_failure(parameter=name, relative_error=err)
    result.detail = {
        "max_relative_error": max(errors.values()),
        "parameters": len(errors),
    }
    return result


def run_verification(
    seed: int = 0,
    instances: int = 1000,
    tie_break: str = "earliest",
    include_gradients: bool = True,
) -> VerificationReport:
    """
    Run every property family.

    Args:
        seed: Base seed for instance generation
        instances: Oracle instances; the other families scale from it
            (200 equivalence and 100 causality cases at the default 1000)
        tie_break: Tie break of the bank under test; ``latest`` is a
            deliberate mutation the oracle family must reject
        include_gradients: Run the finite-difference gradient check

    Returns:
        VerificationReport
    """
    if instances < 1:
        raise ValueError(f"instances must be >= 1, got {instances}")
    small = max(1, instances // 10)
    suites: List[Callable[[], PropertyResult]] = [
        lambda: check_mbc_oracle(seed, instances, tie_break),
        lambda: check_frame_token_equivalence(seed, max(1, instances // 5)),
        lambda: check_order_preservation(seed, instances),
        lambda: check_fifo_exactness(seed, max(1, instances // 5)),
        lambda: check_segment_coverage(seed, max(1, instances // 20)),
        lambda: check_causality(seed, small),
        lambda: check_softmax_rows(seed, small),
        lambda: check_duplication_invariance(seed, small),
    ]
    if include_gradients:
        suites.append(lambda: check_gradients(seed))

    report = VerificationReport(seed, instances, tie_break)
    for suite in suites:
        started = time.perf_counter()
        outcome = suite()
        outcome.seconds = time.perf_counter() - started
        report.results.append(outcome)
        if outcome.passed:
            logger.info("%s: %d checks passed", outcome.name, outcome.checked)
        else:
            logger.warning(
                "%s: %d of %d checks failed",
                outcome.name,
                outcome.failed,
                outcome.checked,
            )
    return report
