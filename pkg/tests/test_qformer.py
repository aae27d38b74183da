"""Tests for the memory-augmented Q-Former."""

import json
import math
import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest

import malmm.qformer as qformer
from malmm.features import position_embed
from malmm.memory_bank import CompressionPolicy, TokenGrid
from malmm.qformer import (
    AttentionWeights,
    QFormerConfig,
    QFormerParams,
    QFormerState,
    attention,
    block_forward,
    causality_probe,
    expected_shapes,
    load_checkpoint,
    save_checkpoint,
    step,
)
from malmm.tensor import ShapeError, Tensor


def small_config(**overrides):
    settings = dict(
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


def frames(config, count, seed=0):
    """Position-embedded random frames."""
    rng = np.random.default_rng(seed)
    shape = (config.visual_tokens_per_frame, config.channels)
    return [
        position_embed(Tensor(rng.normal(size=shape)), t)
        for t in range(1, count + 1)
    ]


def np_layer_norm(x, gamma, beta, eps=1e-6):
    centered = x - x.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=1, keepdims=True) + eps)
    return centered * inv_std * gamma + beta


def np_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def np_attention(queries, kv, params, prefix, num_heads):
    """Multi-head attention written directly in numpy."""
    out = np.zeros_like(queries)
    for h in range(num_heads):
        q = queries @ params[f"{prefix}.q.{h}"].data
        k = kv @ params[f"{prefix}.k.{h}"].data
        v = kv @ params[f"{prefix}.v.{h}"].data
        scores = q @ k.T / np.sqrt(q.shape[1])
        probs = np.exp(scores - scores.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        out += probs @ v @ params[f"{prefix}.o.{h}"].data
    return out


class TestQFormerConfig:
    """Test cases for model configuration."""

    def test_defaults(self):
        """Test default model shape."""
        config = QFormerConfig()

        assert config.num_queries == 8
        assert config.head_dim == config.channels // config.num_heads
        assert config.policy == CompressionPolicy("mbc_token", "earliest")

    def test_validation(self):
        """Test rejected configurations."""
        with pytest.raises(ValueError):
            QFormerConfig(channels=10, num_heads=3)
        with pytest.raises(ValueError):
            QFormerConfig(bank_capacity=0)
        with pytest.raises(ValueError):
            QFormerConfig(num_classes=1)
        with pytest.raises(ValueError):
            QFormerConfig(sublayer_order="sideways")
        with pytest.raises(ValueError):
            QFormerConfig(position_embedding="rotary")


class TestQFormerParams:
    """Test cases for parameter naming and initialization."""

    def test_expected_shapes(self):
        """Test per-head projection shapes and the classifier head."""
        config = small_config()
        shapes = expected_shapes(config)

        assert shapes["queries"] == (4, 8)
        assert shapes["blocks.0.self_attn.q.0"] == (8, 4)
        assert shapes["blocks.1.cross_attn.o.1"] == (4, 8)
        assert shapes["blocks.0.ffn.w1"] == (8, 16)
        assert shapes["head.w"] == (8, 2)
        assert shapes["head.b"] == (1, 2)
        assert "pe.table" not in shapes
        # queries + per block (6 norm + 2 attn × 4 proj × H + 2 ffn) + head
        assert len(shapes) == 1 + 2 * (6 + 2 * 4 * 2 + 2) + 2

    def test_learned_position_table(self):
        """Test that a learned embedding adds a max_frames×C table."""
        config = small_config(position_embedding="learned", max_frames=16)

        assert expected_shapes(config)["pe.table"] == (16, 8)
        params = QFormerParams.initialize(config)
        assert np.all(params["pe.table"].data == 0.0)

    def test_initialization_is_seeded(self):
        """Test that the same seed gives the same parameters."""
        config = small_config()
        a = QFormerParams.initialize(config, seed=3)
        b = QFormerParams.initialize(config, seed=3)
        c = QFormerParams.initialize(config, seed=4)

        for name in a.names():
            np.testing.assert_array_equal(a[name].data, b[name].data)
        assert not np.array_equal(a["queries"].data, c["queries"].data)
        assert np.all(a["blocks.0.ln_self.gamma"].data == 1.0)
        assert np.all(a["head.b"].data == 0.0)

    def test_validate(self):
        """Test name and shape validation against a config."""
        config = small_config()
        params = QFormerParams.initialize(config)
        params.validate(config)

        with pytest.raises(ValueError):
            params.validate(small_config(num_queries=5))
        tensors = dict(params.tensors)
        del tensors["head.b"]
        with pytest.raises(ValueError):
            QFormerParams(tensors).validate(config)

    def test_replace(self):
        """Test functional parameter replacement."""
        params = QFormerParams.initialize(small_config())
        updated = params.replace({"head.b": np.ones((1, 2))})

        assert updated["head.b"].tolist() == [[1.0, 1.0]]
        assert params["head.b"].tolist() == [[0.0, 0.0]]
        with pytest.raises(ShapeError):
            params.replace({"head.b": np.ones((2, 1))})


class TestAttention:
    """Test cases for multi-head attention."""

    def test_weights_are_distributions(self):
        """Test output shape and row-stochastic attention maps."""
        config = small_config()
        params = QFormerParams.initialize(config)
        rng = np.random.default_rng(0)
        queries = Tensor(rng.normal(size=(4, 8)))
        kv = Tensor(rng.normal(size=(6, 8)))
        out, maps = attention(
            queries, kv, params.attention("blocks.0.cross_attn", 2), 2, True
        )

        assert out.shape == (4, 8)
        assert len(maps) == 2
        for probs in maps:
            assert probs.shape == (4, 6)
            np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-12)

    def test_channel_mismatch(self):
        """Test that keys/values must have C columns."""
        params = QFormerParams.initialize(small_config())

        with pytest.raises(ShapeError):
            attention(
                Tensor(np.ones((4, 8))),
                Tensor(np.ones((3, 4))),
                params.attention("blocks.0.self_attn", 2),
                2,
            )

    def test_single_key_gets_all_weight(self):
        """Test that one key/value row receives weight exactly 1 from every query."""
        config = small_config()
        params = QFormerParams.initialize(config)
        weights = params.attention("blocks.0.cross_attn", 2)
        rng = np.random.default_rng(1)
        kv = Tensor(rng.normal(size=(1, 8)))
        out, maps = attention(Tensor(rng.normal(size=(4, 8))), kv, weights, 2, True)

        for probs in maps:
            np.testing.assert_array_equal(probs.data, np.ones((4, 1)))
        expected = sum(
            kv.data @ weights.v[h].data @ weights.o[h].data for h in range(2)
        )
        np.testing.assert_allclose(out.data, np.repeat(expected, 4, axis=0))

    def test_hand_computed_mixture(self):
        """Test one query over two keys with identity projections."""
        eye = [Tensor(np.eye(2))]
        weights = AttentionWeights(eye, eye, eye, eye)
        out, maps = attention(
            Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]), weights, 1, True
        )
        a = math.exp(1.0 / math.sqrt(2.0))
        p = [a / (a + 1.0), 1.0 / (a + 1.0)]

        np.testing.assert_allclose(maps[0].data, [p], rtol=1e-12)
        np.testing.assert_allclose(out.data, [p], rtol=1e-12)


class TestBlockForward:
    """Test cases for a single Q-Former block."""

    def zeroed(self, params, config):
        zeros = {
            name: np.zeros(shape)
            for name, shape in expected_shapes(config).items()
            if "_attn." in name or ".ffn." in name
        }
        return params.replace(zeros)

    def test_zero_sublayers_pass_queries_through(self):
        """Test that zero attention and feed-forward weights leave z unchanged."""
        config = small_config()
        params = self.zeroed(QFormerParams.initialize(config), config)
        state = QFormerState.create(config)
        for frame in frames(config, 4):
            z = step(state, params, config, frame)
            np.testing.assert_array_equal(z.data, params["queries"].data)

        z_in = Tensor(np.random.default_rng(2).normal(size=(4, 8)))
        state.query_banks[1].append(TokenGrid.fresh(z_in))
        z_out = block_forward(1, z_in, state, params, config)
        np.testing.assert_array_equal(z_out.data, z_in.data)

    def test_single_frame_matches_plain_block(self):
        """Test one block on one frame against a plain pre-norm transformer block."""
        config = small_config(
            num_blocks=1,
            num_queries=2,
            channels=4,
            ffn_hidden=8,
            visual_tokens_per_frame=3,
        )
        params = QFormerParams.initialize(config, seed=3)
        rng = np.random.default_rng(4)
        params = params.replace(
            {
                name: rng.normal(size=shape)
                for name, shape in expected_shapes(config).items()
                if name.endswith((".gamma", ".beta"))
            }
        )
        frame = frames(config, 1, seed=5)[0]
        z = step(QFormerState.create(config), params, config, frame)

        def ln(x, name):
            p = f"blocks.0.{name}"
            return np_layer_norm(x, params[f"{p}.gamma"].data, params[f"{p}.beta"].data)

        x = params["queries"].data
        normed = ln(x, "ln_self")
        x = x + np_attention(normed, normed, params, "blocks.0.self_attn", 2)
        x = x + np_attention(
            ln(x, "ln_cross"), frame.data, params, "blocks.0.cross_attn", 2
        )
        hidden = np_gelu(ln(x, "ln_ffn") @ params["blocks.0.ffn.w1"].data)
        expected = x + hidden @ params["blocks.0.ffn.w2"].data

        np.testing.assert_allclose(z.data, expected, rtol=1e-10, atol=1e-12)

    def test_kv_rows_at_second_step(self, monkeypatch):
        """Test that at t=2 self-attention sees 2N rows and cross-attention 2P."""
        config = small_config()
        params = QFormerParams.initialize(config)
        state = QFormerState.create(config)
        stream = frames(config, 2)
        step(state, params, config, stream[0])
        rows = []

        def recording(queries, kv, weights, num_heads, return_weights=False):
            rows.append(kv.shape[0])
            return attention(queries, kv, weights, num_heads, return_weights)

        monkeypatch.setattr(qformer, "attention", recording)
        step(state, params, config, stream[1])

        n, p = config.num_queries, config.visual_tokens_per_frame
        assert rows == [2 * n, 2 * p, 2 * n, 2 * p]


class TestStep:
    """Test cases for streaming steps and bank state."""

    def test_output_shape_and_bank_growth(self):
        """Test that outputs stay N×C while banks fill up to M."""
        config = small_config()
        params = QFormerParams.initialize(config)
        state = QFormerState.create(config)
        lengths = []
        for frame in frames(config, 6):
            z = step(state, params, config, frame)
            assert z.shape == (4, 8)
            lengths.append(len(state.visual_bank))

        assert lengths == [1, 2, 3, 3, 3, 3]
        assert [len(b) for b in state.query_banks] == [3, 3]
        assert state.timestep == 6
        assert state.visual_kv_rows == 3 * 2
        assert state.query_kv_rows == [3 * 4, 3 * 4]
        assert state.resident_floats == (3 * 2 + 2 * 3 * 4) * 8

    def test_frame_shape_checked(self):
        """Test that a wrongly shaped frame is rejected."""
        config = small_config()
        state = QFormerState.create(config)

        with pytest.raises(ShapeError):
            step(
                state,
                QFormerParams.initialize(config),
                config,
                Tensor(np.ones((3, 8))),
            )

    def test_query_bank_holds_block_inputs(self):
        """Test that block 0's bank stores the learned queries every step."""
        config = small_config()
        params = QFormerParams.initialize(config)
        state = QFormerState.create(config)
        for frame in frames(config, 2):
            step(state, params, config, frame)

        for entry in state.query_banks[0].entries:
            np.testing.assert_array_equal(entry.tokens.data, params["queries"].data)

    def test_disabled_banks_keep_one_timestep(self):
        """Test that switching banks off leaves only the current step."""
        config = small_config(use_visual_bank=False, use_query_bank=False)
        params = QFormerParams.initialize(config)
        state = QFormerState.create(config)
        for frame in frames(config, 5):
            step(state, params, config, frame)

        assert state.visual_kv_rows == config.visual_tokens_per_frame
        assert state.query_kv_rows == [config.num_queries] * 2
        assert state.visual_bank.provenance[0][0] == (5,)

    def test_sublayer_order_changes_output(self):
        """Test that cross-first blocks compute something different."""
        outputs = []
        for order in ("self_first", "cross_first"):
            config = small_config(sublayer_order=order)
            params = QFormerParams.initialize(config, seed=1)
            state = QFormerState.create(config)
            for frame in frames(config, 3):
                z = step(state, params, config, frame)
            outputs.append(z.data)

        assert not np.allclose(outputs[0], outputs[1])


class TestCausality:
    """Test cases for the causality probe."""

    def test_shared_prefix_is_identical(self):
        """Test that streams agreeing up to t0 agree in output up to t0."""
        config = small_config()
        params = QFormerParams.initialize(config)
        a = frames(config, 6, seed=1)
        b = a[:3] + frames(config, 6, seed=2)[3:]

        assert causality_probe(a, b, params, config)
        assert causality_probe(a, b, params, config, prefix_length=3)

    def test_divergent_step_is_detected(self):
        """Test that outputs differ once the inputs do."""
        config = small_config()
        params = QFormerParams.initialize(config)
        a = frames(config, 4, seed=1)
        b = a[:2] + frames(config, 4, seed=2)[2:]

        assert not causality_probe(a, b, params, config, prefix_length=3)


class TestCheckpoint:
    """Test cases for saving and loading parameters."""

    def setup_method(self):
        """Set up test fixtures."""
        self.temp_dir = Path(tempfile.mkdtemp())

    def teardown_method(self):
        """Clean up test fixtures."""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_round_trip_is_exact(self):
        """Test that a checkpoint reloads bit-identically."""
        config = small_config(position_embedding="learned", max_frames=8)
        params = QFormerParams.initialize(config, seed=7)
        directory = save_checkpoint(params, self.temp_dir / "ckpt")
        loaded = load_checkpoint(directory, config)

        assert loaded.names() == params.names()
        for name in params.names():
            np.testing.assert_array_equal(loaded[name].data, params[name].data)

    def test_config_mismatch(self):
        """Test that loading under a different shape fails."""
        directory = save_checkpoint(
            QFormerParams.initialize(small_config()), self.temp_dir / "ckpt"
        )

        with pytest.raises(ValueError):
            load_checkpoint(directory, small_config(num_classes=3))

    def test_unknown_format(self):
        """Test that a foreign manifest is refused."""
        directory = save_checkpoint(
            QFormerParams.initialize(small_config()), self.temp_dir / "ckpt"
        )
        manifest = directory / "manifest.json"
        data = json.loads(manifest.read_text())
        data["format"] = "other/2"
        manifest.write_text(json.dumps(data))

        with pytest.raises(ValueError):
            load_checkpoint(directory, small_config())

    def test_short_blob(self):
        """Test that a truncated blob is reported."""
        directory = save_checkpoint(
            QFormerParams.initialize(small_config()), self.temp_dir / "ckpt"
        )
        blob = directory / "params.bin"
        blob.write_bytes(blob.read_bytes()[:-8])

        with pytest.raises(ValueError):
            load_checkpoint(directory, small_config())
