"""Application configuration."""
import json
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.exceptions import ConfigError

HeadKind = Literal["linear", "mlp", "cos_proj_proj", "cos_proj_orig"]
KVChoice = Literal["global", "local", "both"]
TemplateId = Literal["P1", "P2"]
Direction = Literal["mean", "t2i", "i2t"]


class Settings(BaseSettings):
    """Process-level settings read from the environment and ``.env``."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="SIMR_",
        env_ignore_empty=True,
        extra="ignore",
    )

    app_name: str = "SimR Alignment Lab"
    app_version: str = "1.0.0"
    log_level: str = "INFO"
    debug: bool = False
    cors_origins: List[str] = ["*"]

    # Remote prompt rewriter
    rewriter_endpoint: Optional[str] = None
    rewriter_timeout_s: float = 5.0
    rewriter_retries: int = 2
    rewriter_backoff_s: float = 0.5


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()


class DataConfig(BaseModel):
    """Parameters of the synthetic dataset generator."""

    model_config = ConfigDict(extra="forbid")

    k: int = Field(8, description="number of concepts (K)")
    grid_rows: int = Field(4, gt=0)
    grid_cols: int = Field(4, gt=0)
    p: int = Field(16, gt=0, description="raw features per patch (P)")
    max_len: int = Field(24, gt=1, description="maximum text length (M)")
    n_train: int = Field(2000, ge=0)
    n_val: int = Field(300, ge=0)
    n_test: int = Field(500, ge=0)
    seed: int = 0
    noise_sigma: float = Field(0.3, ge=0.0)
    max_concepts_per_image: int = Field(3, ge=1)

    @property
    def l(self) -> int:
        return self.grid_rows * self.grid_cols

    @model_validator(mode="after")
    def _check_concepts(self) -> "DataConfig":
        if self.k < 2:
            raise ValueError(f"K must be >= 2 (got {self.k})")
        if self.max_concepts_per_image > self.k:
            raise ValueError(
                f"max_concepts_per_image ({self.max_concepts_per_image}) must not exceed K ({self.k})"
            )
        if self.max_concepts_per_image > self.l:
            raise ValueError(
                f"max_concepts_per_image ({self.max_concepts_per_image}) exceeds the patch count L ({self.l})"
            )
        return self


class ModelConfig(BaseModel):
    """Encoder and alignment dimensions plus the SimR variant flags."""

    model_config = ConfigDict(extra="forbid")

    dim: int = Field(32, gt=0, description="shared feature dimension D")
    heads: int = Field(4, gt=0)
    enc_layers: int = Field(2, ge=0, description="self-attention blocks per encoder")
    enc_heads: int = Field(4, gt=0)
    ff_dim: Optional[int] = Field(None, gt=0, description="feedforward width, defaults to 2D")
    mlp_hidden: Optional[int] = Field(None, gt=0, description="MLP head width, defaults to D/2")
    head_kind: HeadKind = "linear"
    kv_choice: KVChoice = "both"
    residual: bool = True
    cross_attention: bool = True

    @model_validator(mode="after")
    def _check_heads(self) -> "ModelConfig":
        if self.dim % self.heads:
            raise ValueError(f"D ({self.dim}) must be divisible by heads ({self.heads})")
        if self.dim % self.enc_heads:
            raise ValueError(f"D ({self.dim}) must be divisible by enc_heads ({self.enc_heads})")
        return self

    @property
    def resolved_ff_dim(self) -> int:
        return self.ff_dim or 2 * self.dim

    @property
    def resolved_mlp_hidden(self) -> int:
        return self.mlp_hidden or max(1, self.dim // 2)


class OptimConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["adam", "sgd"] = "adam"
    lr: float = Field(5e-4, gt=0)
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(32)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)

    @field_validator("batch_size")
    @classmethod
    def _batch_needs_negatives(cls, value: int) -> int:
        if value < 2:
            raise ValueError(
                f"batch_size must be >= 2 (got {value}): InfoNCE needs in-batch negatives, "
                "a single pair has nothing to contrast against"
            )
        return value


class RunConfig(BaseModel):
    """Everything that determines a run; echoed into every artifact."""

    model_config = ConfigDict(extra="forbid")

    dataset: Optional[Path] = None
    output_dir: Path = Path("runs/default")
    seed: int = 0
    prompt_align: bool = True
    template: TemplateId = "P1"
    direction: Direction = "mean"
    augment_flip: bool = False
    rewriter_endpoint: Optional[str] = None
    model: ModelConfig = Field(default_factory=ModelConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)

    def echo(self) -> Dict[str, Any]:
        """JSON-safe config dump embedded into artifacts."""
        return json.loads(self.model_dump_json())


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if value is None:
            continue
        if isinstance(value, dict):
            lower = merged.get(key)
            merged[key] = _deep_merge(lower if isinstance(lower, dict) else {}, value)
        else:
            merged[key] = value
    return merged


def load_config_file(path: Optional[Path]) -> Dict[str, Any]:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None


def resolve_run_config(
    cli_overrides: Dict[str, Any],
    config_file: Optional[Path] = None,
    settings: Optional[Settings] = None,
) -> RunConfig:
    """Merge defaults < environment < JSON file < CLI flags and validate once."""
    settings = settings or get_settings()
    layers = {"rewriter_endpoint": settings.rewriter_endpoint}
    layers = _deep_merge(layers, load_config_file(config_file))
    layers = _deep_merge(layers, cli_overrides)
    try:
        return RunConfig.model_validate(layers)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None


def build_data_config(values: Dict[str, Any]) -> DataConfig:
    try:
        return DataConfig.model_validate({k: v for k, v in values.items() if v is not None})
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None


def _format_validation(exc: ValidationError) -> str:
    parts: Tuple[str, ...] = tuple(
        f"{'.'.join(str(x) for x in err['loc']) or 'config'}: {err['msg']}" for err in exc.errors()
    )
    return "invalid configuration: " + "; ".join(parts)
