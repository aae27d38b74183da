"""
Configuration management for malmm-py.

This module handles configuration loading, validation, and management
for streaming runs, training and the benchmark harness.
"""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

from .memory_bank import CompressionPolicy
from .qformer import QFormerConfig
from .utils import get_default_seed, safe_open_text

BASELINE_POLICIES = ("concat", "avgpool")


@dataclass
class ModelConfig:
    """Q-Former shape settings."""

    num_blocks: int = 2
    num_queries: int = 8
    channels: int = 16
    num_heads: int = 2
    ffn_hidden: int = 32
    visual_tokens_per_frame: int = 4
    num_classes: int = 2
    sublayer_order: str = "self_first"  # self_first, cross_first
    position_embedding: str = "sinusoidal"  # sinusoidal, learned
    max_frames: int = 2048
    layer_norm_eps: float = 1e-6


@dataclass
class BankConfig:
    """Memory bank settings."""

    capacity: int = 20
    policy: str = "mbc"  # mbc, mbc_frame, fifo, none
    tie_break: str = "earliest"
    use_visual_bank: bool = True
    use_query_bank: bool = True


@dataclass
class TrainingConfig:
    """Optimization settings."""

    epochs: int = 20
    learning_rate: float = 0.1
    optimizer: str = "sgd"  # sgd, adamw
    weight_decay: float = 0.01
    max_grad_norm: Optional[float] = 1.0
    shuffle: bool = False
    seed: int = field(default_factory=get_default_seed)


@dataclass
class BenchConfig:
    """Benchmark harness settings."""

    frames_list: List[int] = field(default_factory=lambda: [10, 100, 1000])
    repeats: int = 5
    workers: int = 1


@dataclass
class MalmmConfig:
    """Main configuration class for malmm-py."""

    model: ModelConfig = field(default_factory=ModelConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    # Global settings
    verbose: bool = False
    debug: bool = False

    def to_qformer_config(self, policy: Optional[str] = None) -> QFormerConfig:
        """
        Convert to the runtime QFormerConfig.

        Args:
            policy: Optional policy name overriding ``bank.policy``; the
                baseline names ``concat``/``avgpool`` map to ``none``

        Returns:
            Validated QFormerConfig
        """
        name = policy or self.bank.policy
        if name in BASELINE_POLICIES:
            name = "none"
        return QFormerConfig(
            num_blocks=self.model.num_blocks,
            num_queries=self.model.num_queries,
            channels=self.model.channels,
            num_heads=self.model.num_heads,
            ffn_hidden=self.model.ffn_hidden,
            visual_tokens_per_frame=self.model.visual_tokens_per_frame,
            bank_capacity=self.bank.capacity,
            policy=CompressionPolicy.from_name(name, self.bank.tie_break),
            num_classes=self.model.num_classes,
            sublayer_order=self.model.sublayer_order,
            use_visual_bank=self.bank.use_visual_bank,
            use_query_bank=self.bank.use_query_bank,
            position_embedding=self.model.position_embedding,
            max_frames=self.model.max_frames,
            layer_norm_eps=self.model.layer_norm_eps,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": asdict(self.model),
            "bank": asdict(self.bank),
            "training": asdict(self.training),
            "bench": asdict(self.bench),
            "verbose": self.verbose,
            "debug": self.debug,
        }


_SECTIONS = {
    "model": ModelConfig,
    "bank": BankConfig,
    "training": TrainingConfig,
    "bench": BenchConfig,
}


class ConfigManager:
    """
    Manages configuration loading, saving, and validation.

    Supports loading configuration from:
    - JSON files
    - Environment variables (``MALMM_SEED``)
    - Command line arguments
    - Default values
    """

    def __init__(self, config_file: Optional[Path] = None):
        """
        Initialize configuration manager.

        Args:
            config_file: Optional path to configuration file
        """
        self.config_file = config_file
        self._config: MalmmConfig = MalmmConfig()

    def load_config(self, config_file: Optional[Path] = None) -> MalmmConfig:
        """
        Load configuration from file or create default.

        Args:
            config_file: Optional path to configuration file

        Returns:
            MalmmConfig object
        """
        if config_file:
            self.config_file = config_file

        if self.config_file and self.config_file.exists():
            self._config = self._load_from_file(self.config_file)
        else:
            self._config = MalmmConfig()

        return self._config

    def save_config(
        self, config: MalmmConfig, config_file: Optional[Path] = None
    ) -> None:
        """
        Save configuration to file.

        Args:
            config: Configuration to save
            config_file: Optional path to save to (uses default if None)
        """
        if config_file:
            self.config_file = config_file

        if not self.config_file:
            raise ValueError("No configuration file specified")

        self.config_file.parent.mkdir(parents=True, exist_ok=True)
        with safe_open_text(self.config_file, "w") as f:
            json.dump(config.to_dict(), f, indent=2)

    def get_config(self) -> MalmmConfig:
        """Get current configuration."""
        return self._config

    def update_from_args(self, args: Dict[str, Any]) -> None:
        """
        Update configuration from command line arguments.

        Args:
            args: Dictionary of command line arguments
        """
        arg_mappings = {
            # Global settings
            "verbose": ("verbose",),
            "debug": ("debug",),
            # Model settings
            "num_blocks": ("model", "num_blocks"),
            "num_queries": ("model", "num_queries"),
            "channels": ("model", "channels"),
            "num_heads": ("model", "num_heads"),
            "ffn_hidden": ("model", "ffn_hidden"),
            "tokens_per_frame": ("model", "visual_tokens_per_frame"),
            "num_classes": ("model", "num_classes"),
            "sublayer_order": ("model", "sublayer_order"),
            "position_embedding": ("model", "position_embedding"),
            # Bank settings
            "bank_size": ("bank", "capacity"),
            "policy": ("bank", "policy"),
            "tie_break": ("bank", "tie_break"),
            "use_visual_bank": ("bank", "use_visual_bank"),
            "use_query_bank": ("bank", "use_query_bank"),
            # Training settings
            "epochs": ("training", "epochs"),
            "learning_rate": ("training", "learning_rate"),
            "optimizer": ("training", "optimizer"),
            "seed": ("training", "seed"),
            # Bench settings
            "frames_list": ("bench", "frames_list"),
            "repeats": ("bench", "repeats"),
            "workers": ("bench", "workers"),
        }

        for arg_name, value in args.items():
            if value is not None and arg_name in arg_mappings:
                self._set_nested_value(self._config, arg_mappings[arg_name], value)

    def overlay_file(self, config_file: Path) -> MalmmConfig:
        """
        Apply the values present in a JSON file on top of the current config.

        Keys missing from the file keep their current value, so a file given
        with ``--config`` overrides only what it names.
        """
        data = self._read_json(config_file)
        try:
            for section, cls in _SECTIONS.items():
                if section not in data:
                    continue
                allowed = {f.name for f in fields(cls)}
                unknown = set(data[section]) - allowed
                if unknown:
                    raise ValueError(f"unknown keys in {section}: {sorted(unknown)}")
                for key, value in data[section].items():
                    setattr(getattr(self._config, section), key, value)
            for key in ("verbose", "debug"):
                if key in data:
                    setattr(self._config, key, bool(data[key]))
        except (TypeError, AttributeError) as e:
            raise ValueError(f"Invalid configuration file {config_file}: {e}")
        return self._config

    def apply_preset(self, preset_name: str) -> None:
        """
        Apply a configuration preset.

        Args:
            preset_name: Name of the preset to apply
        """
        presets = {
            "toy": self._apply_toy_preset,
            "tiny": self._apply_tiny_preset,
            "full-shape": self._apply_full_shape_preset,
        }

        if preset_name in presets:
            presets[preset_name]()
        else:
            raise ValueError(f"Unknown preset: {preset_name}")

    def _read_json(self, config_file: Path) -> Dict[str, Any]:
        try:
            with safe_open_text(config_file) as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"Invalid configuration file {config_file}: {e}")
        if not isinstance(data, dict):
            raise ValueError(f"Invalid configuration file {config_file}: not an object")
        return data

    def _load_from_file(self, config_file: Path) -> MalmmConfig:
        """Load configuration from JSON file."""
        try:
            return self._dict_to_config(self._read_json(config_file))
        except (KeyError, TypeError) as e:
            raise ValueError(f"Invalid configuration file {config_file}: {e}")

    def _dict_to_config(self, config_dict: Dict[str, Any]) -> MalmmConfig:
        """Convert dictionary to configuration."""
        config = MalmmConfig()
        for section, cls in _SECTIONS.items():
            if section in config_dict:
                setattr(config, section, cls(**config_dict[section]))
        config.verbose = config_dict.get("verbose", False)
        config.debug = config_dict.get("debug", False)
        return config

    def _set_nested_value(self, obj: Any, path: tuple, value: Any) -> None:
        """Set a nested value in an object."""
        current = obj
        for key in path[:-1]:
            current = getattr(current, key)
        setattr(current, path[-1], value)

    def _apply_toy_preset(self) -> None:
        """Default desk-scale model."""
        self._config.model = ModelConfig()
        self._config.bank.capacity = 20

    def _apply_tiny_preset(self) -> None:
        """Smallest model that still learns the synthetic tasks quickly."""
        self._config.model.num_blocks = 1
        self._config.model.num_queries = 2
        self._config.model.channels = 8
        self._config.model.num_heads = 1
        self._config.model.ffn_hidden = 16
        self._config.model.visual_tokens_per_frame = 1
        self._config.bank.capacity = 4
        self._config.training.max_grad_norm = None

    def _apply_full_shape_preset(self) -> None:
        """32 output queries and a 20-entry bank, as in the full-size model."""
        self._config.model.num_queries = 32
        self._config.model.channels = 64
        self._config.model.num_heads = 4
        self._config.model.ffn_hidden = 128
        self._config.model.visual_tokens_per_frame = 16
        self._config.bank.capacity = 20


def get_default_config_path() -> Path:
    """Get the default configuration file path."""
    return Path.home() / ".malmm-py" / "config.json"


def load_config(config_file: Optional[Path] = None) -> MalmmConfig:
    """
    Load configuration from file or create default.

    Args:
        config_file: Optional path to configuration file

    Returns:
        MalmmConfig object
    """
    if config_file is None:
        config_file = get_default_config_path()

    manager = ConfigManager(config_file)
    return manager.load_config()


def save_config(config: MalmmConfig, config_file: Optional[Path] = None) -> None:
    """
    Save configuration to file.

    Args:
        config: Configuration to save
        config_file: Optional path to save to
    """
    if config_file is None:
        config_file = get_default_config_path()

    manager = ConfigManager(config_file)
    manager.save_config(config)
