"""
Unified math utilities for dynamics learning diagnostics
Angle handling, error measures, drift fits and content hashing in one place
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)


class MathUtils:
    """Centralized numerical helpers shared by simulators, training, control and the CLI"""

    @staticmethod
    def wrap_angle(theta):
        """
        Map angles to (-pi, pi]
        Formula: atan2(sin theta, cos theta)
        """
        return np.arctan2(np.sin(theta), np.cos(theta))

    @staticmethod
    def relative_error(estimate: np.ndarray, reference: np.ndarray, floor: float = 1e-12) -> float:
        """
        Relative error of an estimate against a reference
        Formula: |a - b|_2 / max(|b|_2, floor)
        """
        estimate = np.asarray(estimate, dtype=np.float64)
        reference = np.asarray(reference, dtype=np.float64)
        return float(np.linalg.norm(estimate - reference) / max(np.linalg.norm(reference), floor))

    @staticmethod
    def l2_error_curve(predicted: np.ndarray, actual: np.ndarray) -> np.ndarray:
        """Per-step Euclidean distance between two (T, d) sequences"""
        return np.linalg.norm(np.asarray(predicted) - np.asarray(actual), axis=-1)

    @staticmethod
    def linear_fit(times: np.ndarray, values: np.ndarray) -> Tuple[float, float]:
        """Least-squares line through (t, value) pairs; returns (slope, intercept)"""
        slope, intercept = np.polyfit(np.asarray(times, dtype=np.float64), np.asarray(values, dtype=np.float64), 1)
        return float(slope), float(intercept)

    @staticmethod
    def secular_drift(times: np.ndarray, energies: np.ndarray) -> float:
        """
        Systematic energy drift relative to the initial energy
        Formula: |slope| * t_total / |E_0|
        """
        slope, _ = MathUtils.linear_fit(times, energies)
        e0 = abs(float(energies[0])) or 1.0
        return abs(slope) * float(times[-1] - times[0]) / e0

    @staticmethod
    def max_relative_deviation(energies: np.ndarray) -> float:
        """Largest |E_k - E_0| / |E_0| along a series"""
        energies = np.asarray(energies, dtype=np.float64)
        e0 = abs(float(energies[0])) or 1.0
        return float(np.max(np.abs(energies - energies[0])) / e0)

    @staticmethod
    def canonical_json(payload: Any) -> str:
        """Key-sorted compact JSON used for hashing"""
        return json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)

    @staticmethod
    def content_hash(payload: Union[dict, list, str, bytes]) -> str:
        """SHA-256 of a JSON-able payload or raw bytes"""
        if isinstance(payload, bytes):
            data = payload
        elif isinstance(payload, str):
            data = payload.encode("utf-8")
        else:
            data = MathUtils.canonical_json(payload).encode("utf-8")
        return hashlib.sha256(data).hexdigest()

    @staticmethod
    def file_hash(path: Union[str, Path]) -> str:
        digest = hashlib.sha256()
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 16), b""):
                digest.update(chunk)
        return digest.hexdigest()

    @staticmethod
    def grid(low: float, high: float, count: int) -> np.ndarray:
        """Inclusive evenly spaced grid; a single point sits at the midpoint"""
        if count == 1:
            return np.array([(low + high) / 2.0])
        return np.linspace(low, high, count)

    @staticmethod
    def fraction(flags: Sequence[bool]) -> float:
        flags = list(flags)
        return float(sum(bool(f) for f in flags)) / len(flags) if flags else 0.0
