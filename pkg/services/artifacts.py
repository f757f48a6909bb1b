"""
Run artifact helpers: tidy CSV tables and the manifest linking outputs to their config
"""
import csv
import json
import logging
from pathlib import Path
from typing import Any, Iterable, List, Optional, Sequence, Union

from core.constants import MANIFEST_FORMAT_VERSION
from core.exceptions import PersistenceError
from utils.math_utils import MathUtils

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _cell(value: Any) -> Any:
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, float):
        return repr(value)
    return value


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """Write a CSV table; floats use repr so values round-trip exactly"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_cell(v) for v in row])
    except OSError as e:
        raise PersistenceError(f"cannot write CSV: {e}", path=str(path)) from e
    return path


def read_csv(path: PathLike) -> List[dict]:
    with open(path, "r", newline="") as f:
        return list(csv.DictReader(f))


def write_manifest(out_dir: PathLike, command: str, config_hash: str, artifacts: Sequence[PathLike],
                   checkpoint_hash: Optional[str] = None) -> Path:
    """
    Write manifest.json listing every artifact with its SHA-256

    Paths are stored relative to out_dir and sorted; there are no wall-clock fields.
    """
    out_dir = Path(out_dir)
    entries = []
    for artifact in artifacts:
        artifact = Path(artifact)
        try:
            relative = artifact.resolve().relative_to(out_dir.resolve())
        except ValueError:
            relative = artifact
        entries.append({"path": relative.as_posix(), "sha256": MathUtils.file_hash(artifact)})
    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "command": command,
        "config_hash": config_hash,
        "checkpoint_hash": checkpoint_hash,
        "artifacts": sorted(entries, key=lambda e: e["path"]),
    }
    path = out_dir / "manifest.json"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise PersistenceError(f"cannot write manifest: {e}", path=str(path)) from e
    logger.debug(f"Wrote manifest with {len(entries)} artifacts to {path}")
    return path
