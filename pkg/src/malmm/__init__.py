"""
malmm-py: a desk-scale memory-augmented streaming Q-Former.

Frames are consumed one at a time. Each frame is added to a bounded visual
memory bank, each Q-Former block keeps a bounded bank of its past input
queries, and when a bank overflows its most similar adjacent tokens are
averaged (memory bank compression). The output is always N query tokens,
however long the stream.

Run a synthetic stream through a model:

    from malmm import (
        QFormerConfig, QFormerParams, SyntheticSpec, Segment,
        generate_synthetic, run_stream,
    )

    config = QFormerConfig(bank_capacity=20)
    params = QFormerParams.initialize(config, seed=0)
    spec = SyntheticSpec(seed=0, num_frames=100, num_positions=4, channels=16,
                         segments=[Segment(50, 0), Segment(50, 1)])
    result = run_stream(generate_synthetic(spec), params, config)
    print(result.tokens.shape, result.peak_kv_rows)

Train a classifier on the first-segment recall task:

    from malmm import first_segment_recall_dataset, train, evaluate

    dataset = first_segment_recall_dataset(2, 1, 61, 20, 2, 4, 16)
    trained = train(dataset, config, epochs=20, learning_rate=0.1)
    print(evaluate(dataset, trained.params, config).accuracy)

Check the memory bank against the exhaustive oracle:

    from malmm import run_verification

    report = run_verification(seed=0, instances=1000)
    print(report.passed)
"""

__version__ = "0.1.0"
__author__ = "Peter Bowen"

# Benchmarks and verification
from .bench import RunReport, ablate, banklen_sweep, scaling, timing
from .config import ConfigManager, MalmmConfig

# Streams, datasets and training
from .features import (
    FeatureFormatError,
    FeatureStream,
    LabeledDataset,
    Segment,
    SyntheticSpec,
    first_segment_recall_dataset,
    generate_synthetic,
    load_features,
    position_embed,
    segment_coverage_spec,
    segment_sequence_dataset,
    write_features,
)

# Memory banks
from .memory_bank import (
    BankError,
    CompressionPolicy,
    MemoryBank,
    TokenGrid,
    fifo_evict,
    mbc_compress_frame_level,
    mbc_compress_token_level,
    mbc_similarities,
    oracle_compress,
)
from .pipeline import (
    TrainingDivergedError,
    baseline_avgpool,
    baseline_concat,
    classify,
    cross_entropy,
    evaluate,
    run_stream,
    train,
)

# Model
from .qformer import (
    QFormerConfig,
    QFormerParams,
    QFormerState,
    block_forward,
    causality_probe,
    load_checkpoint,
    save_checkpoint,
    step,
)
from .tensor import NonFiniteError, ShapeError, Tape, Tensor, backward
from .verify import VerificationReport, run_verification

__all__ = [
    # Tensors
    "Tensor",
    "Tape",
    "backward",
    "ShapeError",
    "NonFiniteError",
    # Memory banks
    "MemoryBank",
    "TokenGrid",
    "CompressionPolicy",
    "BankError",
    "mbc_similarities",
    "mbc_compress_token_level",
    "mbc_compress_frame_level",
    "fifo_evict",
    "oracle_compress",
    # Model
    "QFormerConfig",
    "QFormerParams",
    "QFormerState",
    "block_forward",
    "step",
    "causality_probe",
    "save_checkpoint",
    "load_checkpoint",
    # Streams, datasets and training
    "FeatureStream",
    "FeatureFormatError",
    "SyntheticSpec",
    "Segment",
    "LabeledDataset",
    "generate_synthetic",
    "load_features",
    "write_features",
    "position_embed",
    "segment_coverage_spec",
    "first_segment_recall_dataset",
    "segment_sequence_dataset",
    "run_stream",
    "classify",
    "cross_entropy",
    "train",
    "evaluate",
    "baseline_concat",
    "baseline_avgpool",
    "TrainingDivergedError",
    # Configuration
    "MalmmConfig",
    "ConfigManager",
    # Benchmarks and verification
    "RunReport",
    "scaling",
    "timing",
    "ablate",
    "banklen_sweep",
    "run_verification",
    "VerificationReport",
]
