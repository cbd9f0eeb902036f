"""
Checkpoint container for the video DiT.

A checkpoint is a ``torch.save`` dictionary::

    {
        "format": "rgba-lab-checkpoint",
        "version": 1,
        "config": {...DiTConfig...},
        "regime": "pretrain" | "finetune",
        "design": null | "<JointDesign value>",
        "parameters": {name: float64 tensor},
        "content_hash": sha256 over sorted (name, shape, bytes) + config JSON,
        "base_hash": sha256 over the base parameters only,
        "metadata": {...}
    }
"""
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Union

import torch
from torch import Tensor

from src.models.dit import DiTConfig, JointDesign, VideoDiT
from src.models.numerics import DTYPE
from src.utils.exceptions import ConfigurationError, IngestionError
from src.utils.helpers import ensure_dir
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

CHECKPOINT_FORMAT = "rgba-lab-checkpoint"
CHECKPOINT_VERSION = 1


def parameter_hash(named: Iterable[Tuple[str, Tensor]], config_json: str = "") -> str:
    """SHA-256 over parameters in sorted-name order, optionally followed by a config echo."""
    digest = hashlib.sha256()
    for name, tensor in sorted(named, key=lambda item: item[0]):
        data = tensor.detach().to(DTYPE).contiguous()
        digest.update(name.encode())
        digest.update(str(tuple(data.shape)).encode())
        digest.update(data.numpy().tobytes())
    digest.update(config_json.encode())
    return digest.hexdigest()


def base_hash(model: VideoDiT) -> str:
    """Hash of the pretrained (non fine-tune) parameters of ``model``."""
    return parameter_hash(model.base_parameters())


def _config_json(config: DiTConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), sort_keys=True)


@dataclass
class Checkpoint:
    config: DiTConfig
    regime: str
    parameters: Dict[str, Tensor]
    content_hash: str
    base_hash: str
    design: Optional[JointDesign] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def build_model(self) -> VideoDiT:
        """Instantiate a model carrying exactly these parameter values."""
        model = VideoDiT(self.config)
        if self.design is not None:
            model.attach_design(self.design)
        model.load_state_dict(self.parameters, strict=True)
        return model


def save_checkpoint(
    model: VideoDiT,
    path: Union[str, Path],
    regime: str,
    metadata: Optional[Dict[str, Any]] = None,
) -> Checkpoint:
    """
    Persist ``model`` atomically and return the in-memory container.

    Args:
        model: Model to persist
        path: Destination file
        regime: "pretrain" or "finetune"
        metadata: Extra JSON-serialisable record (loss curve, dataset hash, ...)
    """
    parameters = {name: p.detach().clone() for name, p in model.state_dict().items()}
    config_json = _config_json(model.config)
    checkpoint = Checkpoint(
        config=model.config,
        regime=regime,
        parameters=parameters,
        content_hash=parameter_hash(parameters.items(), config_json),
        base_hash=base_hash(model),
        design=model.design,
        metadata=dict(metadata or {}),
    )

    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": json.loads(config_json),
        "regime": regime,
        "design": model.design.value if model.design is not None else None,
        "parameters": parameters,
        "content_hash": checkpoint.content_hash,
        "base_hash": checkpoint.base_hash,
        "metadata": json.dumps(checkpoint.metadata, sort_keys=True),
    }

    target = Path(path)
    ensure_dir(target.parent)
    fd, tmp_name = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp_name)
        os.replace(tmp_name, target)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise

    logger.info(f"Saved {regime} checkpoint to {target} (hash {checkpoint.content_hash[:12]})")
    return checkpoint


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Load and verify a checkpoint file."""
    source = Path(path)
    if not source.is_file():
        raise IngestionError(f"Checkpoint not found: {source}")
    try:
        payload = torch.load(source, map_location="cpu", weights_only=True)
    except Exception as e:
        raise IngestionError(f"Unreadable checkpoint {source}: {e}") from e

    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise IngestionError(f"{source} is not an rgba-lab checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise IngestionError(f"{source}: unsupported checkpoint version {payload.get('version')}")

    try:
        config = DiTConfig.from_mapping(payload["config"])
    except ConfigurationError as e:
        raise IngestionError(f"{source}: {e}") from e
    parameters = payload["parameters"]
    content = parameter_hash(parameters.items(), _config_json(config))
    if content != payload["content_hash"]:
        raise IngestionError(f"{source}: content hash mismatch")

    design = payload.get("design")
    return Checkpoint(
        config=config,
        regime=payload["regime"],
        parameters=parameters,
        content_hash=content,
        base_hash=payload["base_hash"],
        design=JointDesign(design) if design else None,
        metadata=json.loads(payload.get("metadata") or "{}"),
    )
