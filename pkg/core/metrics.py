"""
Prometheus metrics for training and planning runs
Series live on a module registry and are dumped as a text file next to run artifacts
"""
import logging
from pathlib import Path
from typing import Optional

from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, write_to_textfile

from core.settings import get_settings

logger = logging.getLogger(__name__)

REGISTRY = CollectorRegistry()

RUN_METRICS = {
    'training_epochs': Counter(
        'fvin_training_epochs_total',
        'Completed training epochs',
        ['variant'],
        registry=REGISTRY,
    ),
    'training_loss': Gauge(
        'fvin_training_loss',
        'Open-loop loss of the most recent epoch',
        ['variant'],
        registry=REGISTRY,
    ),
    'training_divergences': Counter(
        'fvin_training_divergences_total',
        'Training runs aborted because the loss exploded',
        registry=REGISTRY,
    ),
    'skipped_steps': Counter(
        'fvin_optimizer_skipped_steps_total',
        'Adam steps skipped on non-finite gradients',
        registry=REGISTRY,
    ),
    'cem_plan_seconds': Histogram(
        'fvin_cem_plan_seconds',
        'Wall time of one CEM planning call',
        buckets=[0.01, 0.05, 0.1, 0.25, 0.5, 1.0, 2.5, 5.0, 10.0],
        registry=REGISTRY,
    ),
    'cem_replans': Counter(
        'fvin_cem_replans_total',
        'CEM re-initializations after a failed model rollout',
        registry=REGISTRY,
    ),
    'mpc_episodes': Counter(
        'fvin_mpc_episodes_total',
        'Closed-loop MPC episodes',
        ['success'],
        registry=REGISTRY,
    ),
}


def write_metrics(out_dir: str) -> Optional[Path]:
    """Write the registry in Prometheus text format to <out_dir>/metrics.prom"""
    if not get_settings().metrics_enabled:
        return None
    path = Path(out_dir) / "metrics.prom"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_to_textfile(str(path), REGISTRY)
    logger.debug(f"Wrote metrics to {path}")
    return path
