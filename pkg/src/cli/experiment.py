"""Experiment configuration, output layout and run manifests."""
import time
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.data.processors.matting import PreprocessConfig
from src.evaluation.metrics import FlowParams
from src.models.attention import MaskMode
from src.models.diffusion import Objective, SamplerConfig
from src.models.dit import DiTConfig, JointDesign
from src.models.training import TrainingConfig
from src.utils.config import apply_overrides, load_yaml, settings
from src.utils.exceptions import ConfigurationError
from src.utils.helpers import atomic_write_json, ensure_dir


class DatasetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_scenes: int = Field(512, ge=1)
    frames: int = Field(8, ge=2)
    height: int = Field(16, ge=1)
    width: int = Field(16, ge=1)
    fps: int = Field(8, ge=1)
    seed: int = 7
    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)


class EvaluationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_videos: int = Field(16, ge=1)
    iou_threshold: float = Field(0.5, gt=0, lt=1)
    flow: FlowParams = Field(default_factory=FlowParams)
    coarse_steps: Optional[int] = Field(None, ge=1)
    workers: int = Field(1, ge=1)


class ExperimentConfig(BaseModel):
    """Everything one run of the lab needs, validated before any work starts."""

    model_config = ConfigDict(extra="forbid")

    version: Literal[1] = 1
    model: DiTConfig = Field(default_factory=DiTConfig)
    objective: Objective = Field(default_factory=Objective)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    mask_mode: MaskMode = MaskMode.TEXT_TO_ALPHA_BLOCKED
    joint_design: JointDesign = JointDesign.SEQUENCE_EXTENSION
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    output_dir: str = Field(default_factory=lambda: settings.output_root)

    @model_validator(mode="after")
    def _check_consistency(self) -> "ExperimentConfig":
        model, data = self.model, self.dataset
        if (data.frames, data.height, data.width) != (model.frames, model.height, model.width):
            raise ConfigurationError(
                f"Dataset dims {data.frames}x{data.height}x{data.width} differ from model dims "
                f"{model.frames}x{model.height}x{model.width}"
            )
        if self.sampler.objective != self.objective:
            self.sampler = self.sampler.model_copy(update={"objective": self.objective})
        return self

    def echo(self) -> Dict[str, Any]:
        """JSON-ready copy embedded in every artifact."""
        return self.model_dump(mode="json")


def load_experiment_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """
    Load a YAML experiment file, apply ``key.path=value`` overrides and validate.

    Args:
        path: YAML file; ``settings.config_path`` when omitted, defaults when that is absent too
        overrides: Override expressions
    """
    source = path or settings.config_path
    data: Dict[str, Any] = {}
    if path is not None or Path(source).exists():
        data = load_yaml(source)
    apply_overrides(data, overrides)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid experiment config: {e}") from e


class ExperimentPaths:
    """Output layout below ``output_dir``."""

    def __init__(self, output_dir: str):
        self.root = Path(output_dir)

    @property
    def dataset(self) -> Path:
        return self.root / "dataset"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def base_checkpoint(self) -> Path:
        return self.checkpoints / "base.pt"

    def finetune_checkpoint(self, design: JointDesign, mode: MaskMode) -> Path:
        return self.checkpoints / f"finetune_{JointDesign(design).value}_{MaskMode(mode).value}.pt"

    @property
    def samples(self) -> Path:
        return self.root / "samples"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics"

    @property
    def manifests(self) -> Path:
        return self.root / "manifests"

    @property
    def ablation(self) -> Path:
        return self.root / "ablation"


class RunManifest(BaseModel):
    """Provenance record written atomically at the end of every command."""

    command: str
    config: Dict[str, Any]
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    started_at: float = Field(default_factory=time.time)
    wall_time: float = 0.0
    losses: List[float] = Field(default_factory=list)
    metrics: Dict[str, Any] = Field(default_factory=dict)
    details: Dict[str, Any] = Field(default_factory=dict)

    def finish(self, paths: ExperimentPaths, name: Optional[str] = None) -> Path:
        self.wall_time = time.time() - self.started_at
        target = ensure_dir(paths.manifests) / f"{name or self.command}.json"
        return atomic_write_json(target, self.model_dump(mode="json"))
