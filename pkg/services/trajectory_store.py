"""
Trajectory Persistence Service

JSON-Lines trajectory files: a header record, one record per observation and an optional
episode summary. Files are written deterministically so reruns are byte-identical.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.constants import TRAJECTORY_FORMAT_VERSION
from core.exceptions import PersistenceError
from core.simulators import Trajectory

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _floats(values) -> List[float]:
    return [float(v) for v in np.asarray(values, dtype=np.float64).reshape(-1)]


class TrajectoryStore:
    """Reads and writes trajectories in the JSON-Lines format"""

    @staticmethod
    def write(path: PathLike, trajectory: Trajectory, summary: Optional[Dict[str, Any]] = None) -> Path:
        """
        Write one trajectory

        Args:
            path: Target .jsonl file (parents are created)
            trajectory: Observations, controls and optional ground-truth states
            summary: Episode summary appended as the last record

        Returns:
            Path written
        """
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w") as f:
                header = {
                    "system": trajectory.system,
                    "h": float(trajectory.h),
                    "seed": trajectory.seed,
                    "format_version": TRAJECTORY_FORMAT_VERSION,
                }
                f.write(json.dumps(header, sort_keys=True) + "\n")
                for k, obs in enumerate(trajectory.observations):
                    record: Dict[str, Any] = {
                        "k": k,
                        "obs": _floats(obs),
                        "u": _floats(trajectory.controls[k]) if k < trajectory.length else None,
                    }
                    if trajectory.states is not None:
                        record["state"] = _floats(trajectory.states[k])
                    f.write(json.dumps(record, sort_keys=True) + "\n")
                if summary is not None:
                    f.write(json.dumps({"summary": summary}, sort_keys=True) + "\n")
        except OSError as e:
            raise PersistenceError(f"cannot write trajectory file: {e}", path=str(path)) from e
        return path

    @staticmethod
    def read_with_summary(path: PathLike) -> Tuple[Trajectory, Optional[Dict[str, Any]]]:
        path = Path(path)
        try:
            with open(path, "r") as f:
                lines = [line for line in f.read().splitlines() if line.strip()]
        except OSError as e:
            raise PersistenceError(f"cannot read trajectory file: {e}", path=str(path)) from e
        if not lines:
            raise PersistenceError("trajectory file is empty", path=str(path))

        try:
            header = json.loads(lines[0])
            records = [json.loads(line) for line in lines[1:]]
        except json.JSONDecodeError as e:
            raise PersistenceError(f"malformed JSON-Lines record: {e}", path=str(path)) from e

        if header.get("format_version") != TRAJECTORY_FORMAT_VERSION:
            raise PersistenceError(f"unsupported trajectory format version {header.get('format_version')}",
                                   path=str(path))
        summary = None
        if records and "summary" in records[-1]:
            summary = records.pop()["summary"]

        observations, controls, states = [], [], []
        for expected, record in enumerate(records):
            if record.get("k") != expected:
                raise PersistenceError(f"record {expected} is out of order (k={record.get('k')})", path=str(path))
            observations.append(record["obs"])
            if record.get("u") is not None:
                controls.append(record["u"])
            elif expected != len(records) - 1:
                raise PersistenceError(f"record {expected} has no control but is not terminal", path=str(path))
            if "state" in record:
                states.append(record["state"])
        if len(observations) < 2:
            raise PersistenceError("trajectory needs at least two observations", path=str(path))

        try:
            trajectory = Trajectory(
                h=float(header["h"]),
                observations=np.array(observations),
                controls=np.array(controls).reshape(len(controls), -1),
                states=np.array(states) if len(states) == len(observations) else None,
                system=header.get("system", ""),
                seed=header.get("seed"),
            )
        except (KeyError, ValueError) as e:
            raise PersistenceError(f"inconsistent trajectory file: {e}", path=str(path)) from e
        return trajectory, summary

    @staticmethod
    def read(path: PathLike) -> Trajectory:
        return TrajectoryStore.read_with_summary(path)[0]

    @staticmethod
    def write_dataset(out_dir: PathLike, trajectories: Sequence[Trajectory], prefix: str = "traj") -> List[Path]:
        out_dir = Path(out_dir)
        return [TrajectoryStore.write(out_dir / f"{prefix}_{i:03d}.jsonl", t) for i, t in enumerate(trajectories)]

    @staticmethod
    def read_dataset(path: PathLike, system: Optional[str] = None) -> List[Trajectory]:
        """
        Read a single file or every *.jsonl file of a directory (sorted by name)

        Args:
            path: File or directory
            system: When given, every trajectory must come from this system
        """
        path = Path(path)
        files = sorted(path.glob("*.jsonl")) if path.is_dir() else [path]
        if not files:
            raise PersistenceError("no trajectory files found", path=str(path))
        trajectories = [TrajectoryStore.read(f) for f in files]
        if system is not None:
            foreign = [str(f) for f, t in zip(files, trajectories) if t.system and t.system != system]
            if foreign:
                raise PersistenceError(f"trajectories from another system than '{system}': {foreign}",
                                       path=str(path))
        logger.info(f"Loaded {len(trajectories)} trajectories from {path}")
        return trajectories
