import json
import os
from pathlib import Path
from typing import Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field, model_validator

load_dotenv()

LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
MSVLM_DEVICE = os.getenv("MSVLM_DEVICE", "cpu")

CELERY_BROKER_URL = os.getenv("CELERY_BROKER_URL", "redis://localhost:6379/0")
CELERY_RESULT_BACKEND = os.getenv("CELERY_RESULT_BACKEND", "redis://localhost:6379/0")
CELERY_TASK_ALWAYS_EAGER = os.getenv("CELERY_TASK_ALWAYS_EAGER", "true").lower() in ("1", "true", "yes")

LLM_ENDPOINT = os.getenv("LLM_ENDPOINT", "")
LLM_API_KEY = os.getenv("LLM_API_KEY", "")
LLM_MAX_IN_FLIGHT = int(os.getenv("LLM_MAX_IN_FLIGHT", "4"))
LLM_TIMEOUT_S = float(os.getenv("LLM_TIMEOUT_S", "30"))

PROMPTS_DIR = Path(__file__).resolve().parent.parent / "prompts"

StageId = Literal["lm", "0", "1", "2", "3"]


class ViTConfig(BaseModel):
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0

    @model_validator(mode="after")
    def check_dims(self) -> "ViTConfig":
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        return self


class DinoConfig(BaseModel):
    out_dim: int = 256
    hidden_dim: int = 128
    bottleneck_dim: int = 32
    n_global: int = 2
    n_local: int = 4
    global_area: tuple[float, float] = (0.8, 1.0)
    local_area: tuple[float, float] = (0.1, 0.3)
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9
    teacher_momentum: float = 0.996

    @model_validator(mode="after")
    def check_temps(self) -> "DinoConfig":
        if self.student_temp <= 0 or self.teacher_temp <= 0:
            raise ValueError("DINO temperatures must be positive")
        if not 0.0 <= self.teacher_momentum <= 1.0:
            raise ValueError("teacher_momentum must lie in [0, 1]")
        return self


class ZFormerConfig(BaseModel):
    depth: int = 4
    dim: int = 64
    heads: int = 4
    window_size: int = 16
    num_random_blocks: int = 3
    use_global: bool = False
    max_len: int = 64
    mask_prob: float = 0.3
    pattern_seed: int = 0

    @model_validator(mode="after")
    def check_pattern(self) -> "ZFormerConfig":
        if self.num_random_blocks < 0:
            raise ValueError("num_random_blocks must be >= 0")
        if self.use_global:
            raise ValueError("global attention blocks are not supported")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        return self


class ResamplerConfig(BaseModel):
    num_queries: int = 8
    query_dim: int = 64
    depth: int = 2
    heads: int = 4
    use_feed_forward: bool = True
    query_self_attention: bool = False

    @model_validator(mode="after")
    def check_queries(self) -> "ResamplerConfig":
        if self.num_queries < 1:
            raise ValueError("num_queries must be >= 1")
        if self.query_dim % self.heads:
            raise ValueError("query_dim must be divisible by heads")
        return self


class DecoderConfig(BaseModel):
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    max_positions: int = 256


class LoRAConfig(BaseModel):
    rank: int = 4
    alpha: float = 8.0
    targets: tuple[str, ...] = ("q_proj", "v_proj")


class PreprocessConfig(BaseModel):
    target_spacing: Optional[tuple[float, float, float]] = (1.5, 0.75, 0.75)
    channel_mode: Literal["replicate", "window"] = "replicate"
    phases_needed: int = 6
    slices_per_phase: int = 20
    fixed_z_length: Optional[int] = None
    min_report_words: int = 0


class StageConfig(BaseModel):
    stage: StageId
    epochs: int = 1
    optimizer: Literal["adam", "adamw"] = "adam"
    lr: float = 1e-4
    weight_decay: float = 0.0
    warmup_steps: int = 50
    warmup_start_lr: float = 1e-5
    batch_size: int = 4
    seed: int = 0
    grad_clip: float = 1.0
    max_steps: Optional[int] = None

    @model_validator(mode="after")
    def check_schedule(self) -> "StageConfig":
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        return self

    @classmethod
    def full_scale_default(cls, stage: StageId) -> "StageConfig":
        """Schedules as reported for the full-scale chest CT runs."""
        match stage:
            case "0":
                return cls(stage="0", epochs=50, optimizer="adam")
            case "1":
                return cls(stage="1", epochs=20, optimizer="adam")
            case "2":
                return cls(stage="2", epochs=1, optimizer="adamw", weight_decay=0.05)
            case "3":
                return cls(stage="3", epochs=5, optimizer="adamw", weight_decay=0.05)
            case _:
                return cls(stage="lm", epochs=20, optimizer="adamw", weight_decay=0.05)


class PathsConfig(BaseModel):
    data_dir: Path = Path("data")
    checkpoint_dir: Path = Path("checkpoints")
    output_dir: Path = Path("outputs")

    @property
    def manifest_path(self) -> Path:
        return self.data_dir / "manifest.jsonl"


def _default_stages() -> dict[str, StageConfig]:
    return {stage: StageConfig.full_scale_default(stage) for stage in ("lm", "0", "1", "2", "3")}


class RunConfig(BaseModel):
    paths: PathsConfig = Field(default_factory=PathsConfig)
    vit: ViTConfig = Field(default_factory=ViTConfig)
    dino: DinoConfig = Field(default_factory=DinoConfig)
    zformer: ZFormerConfig = Field(default_factory=ZFormerConfig)
    resampler: ResamplerConfig = Field(default_factory=ResamplerConfig)
    decoder: DecoderConfig = Field(default_factory=DecoderConfig)
    lora: LoRAConfig = Field(default_factory=LoRAConfig)
    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)
    stages: dict[str, StageConfig] = Field(default_factory=_default_stages)
    seed: int = 0
    client_mode: Literal["mock", "http"] = "mock"

    @model_validator(mode="after")
    def check_dims(self) -> "RunConfig":
        if self.zformer.dim != self.vit.embed_dim:
            raise ValueError("zformer.dim must equal vit.embed_dim")
        return self

    def stage(self, stage: StageId) -> StageConfig:
        config = self.stages.get(stage) or StageConfig.full_scale_default(stage)
        return config.model_copy(update={"seed": self.seed})


def load_run_config(path: Optional[Path], seed: Optional[int] = None) -> RunConfig:
    """Load a run configuration; an explicit seed overrides the file."""
    if path is None:
        config = RunConfig()
    else:
        config = RunConfig.model_validate(json.loads(Path(path).read_text()))
    if seed is not None:
        config = config.model_copy(update={"seed": seed})
    return config
