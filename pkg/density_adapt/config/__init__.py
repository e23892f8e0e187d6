"""Configuration management for density-adapt."""

import hashlib
import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from density_adapt.errors import ConfigError

CONFIG_DIR = Path(__file__).parent
DEFAULT_CONFIG = CONFIG_DIR / "default.yaml"
SCENE_RULES = CONFIG_DIR / "scene_rules.yaml"

FeatureTap = Literal["backbone", "dilation", "spatial"]

REFINER_KERNEL_PRESETS: dict[str, tuple[int, int, int, int, int]] = {
    "large": (13, 9, 5, 9, 13),
    "medium": (9, 5, 3, 5, 9),
    "small": (7, 5, 3, 5, 7),
}


def parse_clock(value: Union[str, int]) -> int:
    """Convert ``"HH:MM"`` (or minutes) to minutes since midnight."""
    if isinstance(value, int):
        minutes = value
    else:
        try:
            hours, mins = str(value).split(":")
            minutes = int(hours) * 60 + int(mins)
        except ValueError as e:
            raise ValueError(f"time must look like HH:MM, got {value!r}") from e
    if not 0 <= minutes < 1440:
        raise ValueError(f"time out of range: {value!r}")
    return minutes


def format_clock(minutes: int) -> str:
    """Inverse of :func:`parse_clock`."""
    return f"{minutes // 60:02d}:{minutes % 60:02d}"


class FilterRule(BaseModel):
    """One row of the scene-regularization table."""

    levels: frozenset[int]
    time_window: tuple[int, int]
    weathers: frozenset[int]
    count_range: tuple[int, int]
    ratio_range: tuple[float, float]

    @field_validator("time_window", mode="before")
    @classmethod
    def _parse_window(cls, value):
        start, end = value
        return parse_clock(start), parse_clock(end)

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.time_window[0] > self.time_window[1]:
            raise ValueError("time_window start must not exceed end")
        if self.count_range[0] > self.count_range[1]:
            raise ValueError("count_range lo must not exceed hi")
        if self.ratio_range[0] > self.ratio_range[1]:
            raise ValueError("ratio_range lo must not exceed hi")
        return self


class CounterConfig(BaseModel):
    """Counter network G."""

    backbone: Literal["small", "vgg16"] = "small"
    in_channels: Literal[1, 3] = 1
    block_channels: list[int] = Field(default_factory=lambda: [32, 64, 128])
    convs_per_block: int = Field(default=2, ge=1)
    dilation_channels: int = Field(default=128, ge=1)
    spatial_channels: int = Field(default=128, ge=1)
    spatial_kernel: int = Field(default=9, ge=3)
    pad_to_multiple: bool = True

    @field_validator("block_channels")
    @classmethod
    def _check_blocks(cls, value):
        if not 1 <= len(value) <= 3 or min(value) < 1:
            raise ValueError("block_channels needs 1-3 positive widths")
        return value

    @field_validator("spatial_kernel")
    @classmethod
    def _odd_kernel(cls, value):
        if value % 2 == 0:
            raise ValueError("spatial_kernel must be odd")
        return value

    @property
    def downsample(self) -> int:
        """Total stride of the backbone."""
        return 8 if self.backbone == "vgg16" else 2 ** len(self.block_channels)

    @property
    def out_scale(self) -> float:
        return 1.0 / self.downsample


class DiscriminatorConfig(BaseModel):
    """Pixel-wise feature discriminators and the map discriminator."""

    feature_channels: list[int] = Field(default_factory=lambda: [64, 64, 64])
    map_channels: list[int] = Field(default_factory=lambda: [32, 64, 64])
    map_kernel: int = Field(default=4, ge=2)
    negative_slope: float = Field(default=0.2, ge=0.0)


class RefinerConfig(BaseModel):
    """Map refiner R."""

    kernels: tuple[int, int, int, int, int] = REFINER_KERNEL_PRESETS["large"]
    channels: tuple[int, int, int] = (16, 32, 32)
    zero_init_regression: bool = True

    @field_validator("kernels", mode="before")
    @classmethod
    def _resolve_preset(cls, value):
        if isinstance(value, str):
            if value not in REFINER_KERNEL_PRESETS:
                raise ValueError(f"unknown refiner preset {value!r}")
            return REFINER_KERNEL_PRESETS[value]
        return value

    @field_validator("kernels")
    @classmethod
    def _odd_kernels(cls, value):
        if any(k % 2 == 0 or k < 1 for k in value):
            raise ValueError("refiner kernels must be positive odd sizes")
        return value


class NetworkConfig(BaseModel):
    """All network architectures."""

    counter: CounterConfig = Field(default_factory=CounterConfig)
    discriminator: DiscriminatorConfig = Field(default_factory=DiscriminatorConfig)
    refiner: RefinerConfig = Field(default_factory=RefinerConfig)
    feature_taps: list[FeatureTap] = Field(default_factory=lambda: ["dilation", "spatial"])

    @field_validator("feature_taps")
    @classmethod
    def _unique_taps(cls, value):
        if not value or len(set(value)) != len(value):
            raise ValueError("feature_taps must be a non-empty list without repeats")
        return value


class LossWeights(BaseModel):
    """Weights of the combined objective."""

    model_config = ConfigDict(populate_by_name=True)

    lambda_: float = Field(default=1e-3, ge=0.0, alias="lambda")
    beta: float = Field(default=1e-3, ge=0.0)
    gamma: float = Field(default=1e-1, ge=0.0)


class TrainConfig(BaseModel):
    """Optimization settings for counters, discriminators and the refiner."""

    lr_g: float = Field(default=1e-5, gt=0.0)
    lr_d: float = Field(default=1e-5, gt=0.0)
    lr_r: float = Field(default=1e-4, gt=0.0)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(default=1e-8, gt=0.0)
    weights: LossWeights = Field(default_factory=LossWeights)
    loss_reduction: Literal["mean", "sum"] = "mean"
    batch_size: int = Field(default=4, ge=1)
    max_steps: int = Field(default=5000, ge=1)
    eval_every: int = Field(default=200, ge=1)
    patience: int = Field(default=5, ge=1)
    d_updates_per_iter: int = Field(default=1, ge=1)
    g_updates_per_iter: int = Field(default=1, ge=1)
    val_fraction: float = Field(default=0.1, gt=0.0, lt=1.0)
    seed: int = Field(default=0, ge=0)
    device: str = "cpu"
    deterministic: bool = False
    show_progress: bool = False
    oscillation_window: int = Field(default=50, ge=2)
    oscillation_threshold: float = Field(default=1.0, gt=0.0)
    refiner_batch_size: int = Field(default=8, ge=1)
    refiner_max_steps: int = Field(default=2000, ge=1)
    refiner_eval_every: int = Field(default=50, ge=1)
    refiner_patience: int = Field(default=5, ge=1)


class GapConfig(BaseModel):
    """Appearance shift applied to the toy target domain."""

    texture_amplitude: float = Field(default=0.0, ge=0.0)
    invert_contrast: bool = False
    noise_sigma: float = Field(default=0.0, ge=0.0)
    brightness_offset: float = 0.0

    @classmethod
    def zero(cls) -> "GapConfig":
        return cls()

    @classmethod
    def standard(cls) -> "GapConfig":
        return cls(
            texture_amplitude=0.25,
            invert_contrast=True,
            noise_sigma=0.1,
            brightness_offset=0.1,
        )


class ToyConfig(BaseModel):
    """Procedural two-domain generator."""

    n_images: int = Field(default=200, ge=1)
    size: tuple[int, int] = (64, 64)
    channels: Literal[1, 3] = 1
    count_range: tuple[int, int] = (5, 40)
    blob_sigma: float = Field(default=1.5, gt=0.0)
    blob_amplitude: float = Field(default=0.5, gt=0.0)
    background_level: float = Field(default=0.3, ge=0.0, le=1.0)
    source_texture_amplitude: float = Field(default=0.05, ge=0.0)
    gap: GapConfig = Field(default_factory=GapConfig.standard)

    @field_validator("gap", mode="before")
    @classmethod
    def _gap_preset(cls, value):
        if value == "zero":
            return GapConfig.zero()
        if value == "standard":
            return GapConfig.standard()
        return value


class DataConfig(BaseModel):
    """Dataset locations and ground-truth generation."""

    source_root: Optional[Path] = None
    target_root: Optional[Path] = None
    source_test_root: Optional[Path] = None
    eval_root: Optional[Path] = None
    scene_rule: Optional[Union[str, FilterRule]] = None
    keep_unlabeled_meta: bool = False
    sigma: float = Field(default=4.0, gt=0.0)
    toy: ToyConfig = Field(default_factory=ToyConfig)


class ExperimentConfig(BaseModel):
    """Everything one command needs."""

    name: str = "experiment"
    output_dir: Path = Path("runs")
    data: DataConfig = Field(default_factory=DataConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)

    def resolved_scene_rule(self) -> Optional[FilterRule]:
        """Resolve ``data.scene_rule`` (preset name or inline rule)."""
        rule = self.data.scene_rule
        if rule is None or isinstance(rule, FilterRule):
            return rule
        presets = load_scene_rules()
        if rule not in presets:
            raise ConfigError(f"Unknown scene rule preset {rule!r}; known: {sorted(presets)}")
        return presets[rule]

    def config_hash(self) -> str:
        """Short stable hash of the resolved config."""
        payload = json.dumps(self.model_dump(mode="json", by_alias=True), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:10]


def _read_mapping(path: Path) -> dict:
    """Read a YAML or TOML file into a dict."""
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    if path.suffix == ".toml":
        with open(path, "rb") as f:
            return tomllib.load(f)
    with open(path) as f:
        return yaml.safe_load(f) or {}


def apply_overrides(data: dict, overrides: Optional[list[str]]) -> dict:
    """
    Apply ``section.key=value`` overrides to a nested mapping.

    Values are parsed as YAML scalars so ``train.seed=7`` yields an int.

    Args:
        data: Nested mapping, modified in place
        overrides: Override strings

    Returns:
        The updated mapping
    """
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"Override must look like key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        node = data
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"Cannot override inside non-mapping key {dotted!r}")
        node[keys[-1]] = yaml.safe_load(raw)
    return data


def load_config(
    config_path: Optional[Path] = None, overrides: Optional[list[str]] = None
) -> ExperimentConfig:
    """
    Load and validate an experiment configuration.

    Args:
        config_path: Optional path to a YAML or TOML file. Defaults to default.yaml in this directory.
        overrides: Optional dotted ``key=value`` overrides applied before validation.

    Returns:
        ExperimentConfig instance
    """
    if config_path is None:
        config_path = DEFAULT_CONFIG
    data = apply_overrides(_read_mapping(Path(config_path)), overrides)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid config {config_path}: {e}") from e


def dump_config(config: ExperimentConfig, path: Path) -> None:
    """Write the resolved config as YAML; it re-parses to an equal config."""
    data = config.model_dump(mode="json", by_alias=True)
    rule = data["data"].get("scene_rule")
    if isinstance(rule, dict):
        rule["time_window"] = [format_clock(t) for t in rule["time_window"]]
    with open(path, "w") as f:
        yaml.safe_dump(data, f, sort_keys=False)


def load_scene_rules(path: Optional[Path] = None) -> dict[str, FilterRule]:
    """
    Load the scene-regularization presets.

    Args:
        path: Optional path to a rules file. Defaults to scene_rules.yaml in this directory.

    Returns:
        Mapping of preset name to FilterRule
    """
    data = _read_mapping(Path(path) if path else SCENE_RULES)
    try:
        return {name: FilterRule.model_validate(rule) for name, rule in data["rules"].items()}
    except (KeyError, ValidationError) as e:
        raise ConfigError(f"Invalid scene rules: {e}") from e
