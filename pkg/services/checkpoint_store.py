"""
Checkpoint Persistence Service

Saves and restores every learned head of a dynamics model as flat float64 lists together with
the system description needed to rebuild it.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union

import numpy as np

from core.config.systems import SystemRegistry
from core.constants import CHECKPOINT_FORMAT_VERSION, HEAD_POTENTIAL, HEAD_RESIDUAL_STATE, VARIANT_RESNN
from core.dynamics_model import DynamicsModel
from core.exceptions import ConfigError, PersistenceError
from utils.math_utils import MathUtils

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class CheckpointStore:
    """Reads and writes model checkpoints"""

    @staticmethod
    def to_payload(model: DynamicsModel, metadata: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        system = model.system
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "variant": model.variant,
            "system": system.name,
            "observation": system.observation,
            "h": float(system.h),
            "system_params": system.params.model_dump() if system.params is not None else {},
            "heads": {name: head.state_dict() for name, head in sorted(model.params.named_heads().items())},
            "metadata": metadata or {},
        }

    @staticmethod
    def save(path: PathLike, model: DynamicsModel, values: Optional[Sequence[np.ndarray]] = None,
             metadata: Optional[Dict[str, Any]] = None) -> str:
        """
        Write a checkpoint

        Args:
            path: Target JSON file
            model: Model whose heads are stored
            values: Parameter snapshot to store instead of the current weights (e.g. the best epoch)
            metadata: Extra run facts (dataset size, seed, epoch)

        Returns:
            SHA-256 of the written file
        """
        path = Path(path)
        current = model.params.snapshot() if values is not None else None
        try:
            if values is not None:
                model.params.restore(values)
            payload = CheckpointStore.to_payload(model, metadata)
        finally:
            if current is not None:
                model.params.restore(current)

        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w") as f:
                json.dump(payload, f, sort_keys=True)
        except OSError as e:
            raise PersistenceError(f"cannot write checkpoint: {e}", path=str(path)) from e
        digest = MathUtils.file_hash(path)
        logger.info(f"Saved {model.variant} checkpoint to {path} ({digest[:12]})")
        return digest

    @staticmethod
    def read_payload(path: PathLike) -> Dict[str, Any]:
        path = Path(path)
        try:
            with open(path, "r") as f:
                payload = json.load(f)
        except FileNotFoundError as e:
            raise PersistenceError("checkpoint not found", path=str(path)) from e
        except (OSError, json.JSONDecodeError) as e:
            raise PersistenceError(f"unreadable checkpoint: {e}", path=str(path)) from e
        if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise PersistenceError(f"unsupported checkpoint format version {payload.get('format_version')}",
                                   path=str(path))
        return payload

    @staticmethod
    def load(path: PathLike) -> DynamicsModel:
        """Rebuild a model from a checkpoint; head names and shapes are validated"""
        payload = CheckpointStore.read_payload(path)
        try:
            system = SystemRegistry.get(payload["system"], payload["observation"],
                                        payload.get("system_params") or None, h=payload["h"])
        except (KeyError, ConfigError) as e:
            raise PersistenceError(f"checkpoint describes an unusable system: {e}", path=str(path)) from e

        heads = payload.get("heads", {})
        anchor = HEAD_RESIDUAL_STATE if payload.get("variant") == VARIANT_RESNN else HEAD_POTENTIAL
        if anchor not in heads:
            raise PersistenceError(f"checkpoint has no '{anchor}' head", path=str(path))
        hidden = tuple(heads[anchor]["hidden"])

        try:
            model = DynamicsModel.build(payload["variant"], system, hidden)
        except ConfigError as e:
            raise PersistenceError(f"checkpoint variant is unusable: {e.message}", path=str(path)) from e
        expected = model.params.named_heads()
        if set(expected) != set(heads):
            raise PersistenceError(f"checkpoint heads {sorted(heads)} do not match {sorted(expected)}",
                                   path=str(path))
        for name, head in expected.items():
            head.load_state_dict(heads[name])
        return model

    @staticmethod
    def metadata(path: PathLike) -> Dict[str, Any]:
        return CheckpointStore.read_payload(path).get("metadata", {})
