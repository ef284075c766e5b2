import os
import logging
from pathlib import Path
from typing import Literal

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, model_validator

logger = logging.getLogger(__name__)

# Load environment variables from .env file
env_path = Path(__file__).resolve().parent.parent.parent / '.env'
load_dotenv(dotenv_path=env_path)

log_level = os.getenv("MARMAER_LOG_LEVEL", "INFO")
num_threads = int(os.getenv("MARMAER_NUM_THREADS", "1"))
output_dir = os.getenv("MARMAER_OUTPUT_DIR", "runs")


class Settings:
    LOG_LEVEL: str = log_level
    NUM_THREADS: int = num_threads
    OUTPUT_DIR: Path = Path(output_dir)

    # Shown by --help and written into report headers
    APP_TITLE: str = "marmaer"
    APP_DESCRIPTION: str = "Metric-aware, ambiguity-adaptive hierarchical AR token generator"
    APP_VERSION: str = "0.1.0"


settings = Settings()


class TrainConfig(BaseModel):
    """
    Every hyperparameter of a run. Config files are JSON objects with these
    field names; anything else is rejected.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    # Composite objective
    lambda1: float = Field(0.05, ge=0.0, description="Weight of the metric-aware term")
    lambda2: float = Field(1e-4, ge=0.0, description="Weight of the KL term")
    use_maer: bool = True
    use_ambiguity: bool = True
    target_metric: Literal["alignment", "preference"] = "alignment"

    # Optimizer
    learning_rate: float = Field(1e-4, ge=0.0)
    weight_decay: float = Field(0.05, ge=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)

    # Loop
    batch_size: int = Field(64, ge=1)
    steps: int = Field(2000, ge=0)
    log_interval: int = Field(50, ge=1)
    seed: int = 0
    text_seed: int = 1234
    embed_seed: int = 5678

    # Model dims (per stage)
    d_model: int = Field(64, ge=1)
    n_layers: int = Field(2, ge=1)
    n_heads: int = Field(4, ge=1)
    ff_width: int = Field(128, ge=1)
    latent_dim: int = Field(8, ge=1)
    head_hidden: int = Field(32, ge=1)
    embed_dim: int = Field(64, ge=1)

    # Numerical guards
    bandwidth_floor: float = Field(1e-3, gt=0.0)
    logvar_clamp: float = Field(10.0, gt=0.0)
    dtype: Literal["float32", "float64"] = "float32"

    @model_validator(mode="after")
    def check_consistency(self) -> "TrainConfig":
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.use_maer and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 when use_maer is enabled")
        return self

    @property
    def variant(self) -> str:
        return variant_name(self.use_maer, self.use_ambiguity)


VARIANTS = {
    (False, False): "baseline",
    (True, False): "+MAER",
    (False, True): "+ambiguity",
    (True, True): "full",
}


def variant_name(use_maer: bool, use_ambiguity: bool) -> str:
    return VARIANTS[(use_maer, use_ambiguity)]


def load_config(path: Path | str | None, **overrides) -> TrainConfig:
    """
    Read a TrainConfig from a JSON file and apply keyword overrides on top.

    Args:
        path: JSON config file, or None for defaults
        overrides: field values taking precedence over the file

    Returns:
        TrainConfig: the validated configuration
    """
    from pydantic import ValidationError
    from App.core.errors import ConfigError

    try:
        if path is None:
            data = {}
        else:
            import json
            data = json.loads(Path(path).read_text())
            if not isinstance(data, dict):
                raise ConfigError(f"Config file {path} must hold a JSON object")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig.model_validate(data)
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}")
    except ValueError as e:
        # json.JSONDecodeError and pydantic's ValidationError both land here
        if isinstance(e, ValidationError):
            detail = "; ".join(
                f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in e.errors()
            )
        else:
            detail = str(e)
        raise ConfigError(f"Invalid config {path or '<defaults>'}: {detail}")
