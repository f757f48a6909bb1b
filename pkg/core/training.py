"""
Multi-step open-loop training
Window slicing, the rollout loss, the Adam epoch loop and open-loop prediction scoring
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from core import diffcore as dc
from core.constants import DIVERGENCE_LOSS, MODE_FORCED, MODE_ZERO_CONTROL, VARIANT_SV
from core.diffcore import AdamState, Tensor
from core.dynamics_model import DynamicsModel
from core.exceptions import ConfigError, DivergenceError, NonFiniteError, RolloutError, TrainingError
from core.metrics import RUN_METRICS
from core.simulators import Trajectory
from utils.math_utils import MathUtils

logger = logging.getLogger(__name__)

# gradients smaller than this are compared absolutely
GRADIENT_CHECK_FLOOR = 1e-3


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings; epochs=5000 for initial fits, 1000 for incremental ones"""
    horizon: int = 10
    batch_size: int = 2048
    learning_rate: float = 5e-4
    epochs: int = 5000
    seed: int = 0
    clip_norm: Optional[float] = None
    log_every: int = 100

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("training horizon T must be at least 1", field="training.horizon")
        if self.batch_size < 1:
            raise ConfigError("batch size must be at least 1", field="training.batch_size")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive", field="training.learning_rate")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative", field="training.epochs")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive", field="training.clip_norm")


@dataclass
class Batch:
    """
    Overlapping T-step windows

    initial: (B, obs_dim) start observations, or (B, 2, p) position pairs for the two-step variant
    controls: (B, T, m) controls u_k..u_{k+T-1}
    targets: (B, T, d) observations y_{k+1}..y_{k+T} (position channels only for the two-step variant)
    """
    initial: np.ndarray
    controls: np.ndarray
    targets: np.ndarray
    h: float

    def __len__(self) -> int:
        return len(self.initial)

    @property
    def horizon(self) -> int:
        return self.controls.shape[1]

    def subset(self, index: np.ndarray) -> "Batch":
        return Batch(self.initial[index], self.controls[index], self.targets[index], self.h)


@dataclass
class TrainResult:
    model: DynamicsModel
    loss_curve: List[float]
    best_loss: float
    best_epoch: int
    best_params: List[np.ndarray]
    skipped_steps: int = 0


@dataclass
class PredictionResult:
    """Open-loop prediction against one test trajectory; step k error is ||y_hat_k - y_k||_2"""
    steps: np.ndarray
    errors: np.ndarray
    predicted: np.ndarray
    actual: np.ndarray
    baseline_errors: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def error_at(self, step: int) -> float:
        return float(self.errors[np.searchsorted(self.steps, step)])


def window_count(observations: int, horizon: int, variant: str) -> int:
    """Windows per trajectory: N - T for one-step variants, N - T - 1 for the two-step variant"""
    return max(0, observations - horizon - (1 if variant == VARIANT_SV else 0))


def make_windows(trajectories: Sequence[Trajectory], horizon: int, variant: str,
                 position_channels: Optional[int] = None) -> Batch:
    """
    Slice every T-step window out of a dataset

    Args:
        trajectories: Trajectories sharing one step h
        horizon: Rollout length T
        variant: Model variant; the two-step variant gets position pairs and position targets
        position_channels: Leading observation channels that hold positions

    Returns:
        Batch of all windows in trajectory order
    """
    if not trajectories:
        raise TrainingError("dataset is empty")
    steps = {round(t.h, 12) for t in trajectories}
    if len(steps) != 1:
        raise TrainingError(f"dataset mixes step sizes {sorted(steps)}")
    two_step = variant == VARIANT_SV
    p = position_channels if position_channels is not None else trajectories[0].observations.shape[1]

    initial, controls, targets = [], [], []
    for traj in trajectories:
        obs, us = traj.observations, traj.controls
        first = 1 if two_step else 0
        for k in range(first, first + window_count(len(obs), horizon, variant)):
            if two_step:
                initial.append(obs[k - 1:k + 1, :p])
                targets.append(obs[k + 1:k + 1 + horizon, :p])
            else:
                initial.append(obs[k])
                targets.append(obs[k + 1:k + 1 + horizon])
            controls.append(us[k:k + horizon])

    if not initial:
        raise TrainingError(f"no {horizon}-step windows fit trajectories of {len(trajectories[0].observations)} "
                            f"observations")
    return Batch(np.array(initial), np.array(controls), np.array(targets), trajectories[0].h)


def open_loop_loss(batch: Batch, model: DynamicsModel, horizon: Optional[int] = None) -> Tensor:
    """
    Sum over k of ||y_hat_{k+1} - y_{k+1}||^2 along a T-step rollout, averaged over the batch

    Evaluated on the active tape, so backward() gives exact gradients for every head.
    """
    horizon = horizon or batch.horizon
    if horizon > batch.horizon:
        raise ConfigError(f"loss horizon {horizon} exceeds window length {batch.horizon}", field="training.horizon")
    predictions = model.rollout(batch.initial, batch.controls[:, :horizon, :])
    total = None
    for k, y_hat in enumerate(predictions):
        residual = y_hat - dc.constant(batch.targets[:, k, :])
        term = dc.sum_all(dc.square(residual))
        total = term if total is None else total + term
    return total * (1.0 / len(batch))


class Trainer:
    """
    Adam on every head of a dynamics model

    One Trainer keeps its optimizer moments across fit() calls, so incremental refits continue the same run.
    """

    def __init__(self, model: DynamicsModel, config: TrainConfig):
        self.model = model
        self.config = config
        self.params = model.parameters()
        self.optimizer = AdamState.for_params(self.params, lr=config.learning_rate)
        self.rng = np.random.default_rng(config.seed)
        self.epochs_done = 0
        self.skipped_steps = 0

    def _minibatches(self, count: int) -> List[np.ndarray]:
        order = self.rng.permutation(count)
        size = min(self.config.batch_size, count)
        return [order[i:i + size] for i in range(0, count, size)]

    def _step(self, batch: Batch, epoch: int, index: int) -> float:
        try:
            with dc.Tape() as tape:
                loss = open_loop_loss(batch, self.model)
        except (RolloutError, NonFiniteError) as e:
            raise DivergenceError(f"rollout failed in epoch {epoch}, batch {index}: {e.message}", epoch=epoch,
                                  details={"batch": index, "step": getattr(e, "step", -1)}) from e
        value = loss.item()
        if not np.isfinite(value) or value > DIVERGENCE_LOSS:
            raise DivergenceError(f"loss {value:.4g} in epoch {epoch}, batch {index}", epoch=epoch, loss=value,
                                  details={"batch": index})
        grads = dc.backward(tape, loss, self.params)
        if self.config.clip_norm is not None:
            grads = dc.clip_by_global_norm(grads, self.config.clip_norm)
        if not dc.adam_step(self.params, grads, self.optimizer):
            self.skipped_steps += 1
            RUN_METRICS['skipped_steps'].inc()
        return value

    def fit(self, dataset: Sequence[Trajectory], epochs: Optional[int] = None,
            on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainResult:
        """
        Run `epochs` full passes over all windows of the dataset

        Returns:
            TrainResult with the per-epoch mean loss (the loss seen before each update) and the best snapshot
        """
        epochs = self.config.epochs if epochs is None else epochs
        batch = make_windows(dataset, self.config.horizon, self.model.variant, self.model.system.position_channels)
        variant = self.model.variant
        logger.info(f"Training {variant} on {len(dataset)} trajectories ({len(batch)} windows, T={batch.horizon}) "
                    f"for {epochs} epochs")

        curve: List[float] = []
        best_loss, best_epoch, best_params = float("inf"), -1, self.model.params.snapshot()
        for epoch in range(epochs):
            # the epoch loss is measured before its updates, so it scores these weights
            before = self.model.params.snapshot()
            total = 0.0
            try:
                for index, rows in enumerate(self._minibatches(len(batch))):
                    total += self._step(batch.subset(rows), epoch, index) * len(rows)
            except DivergenceError:
                RUN_METRICS['training_divergences'].inc()
                logger.error(f"Training diverged at epoch {epoch}")
                raise
            epoch_loss = total / len(batch)
            curve.append(epoch_loss)
            self.epochs_done += 1
            RUN_METRICS['training_epochs'].labels(variant=variant).inc()
            RUN_METRICS['training_loss'].labels(variant=variant).set(epoch_loss)
            if epoch_loss < best_loss:
                best_loss, best_epoch, best_params = epoch_loss, epoch, before
            if on_epoch is not None:
                on_epoch(epoch, epoch_loss)
            if epoch % self.config.log_every == 0 or epoch == epochs - 1:
                logger.info(f"epoch {epoch}: loss={epoch_loss:.6g}")

        return TrainResult(self.model, curve, best_loss, best_epoch, best_params, self.skipped_steps)


def train(dataset: Sequence[Trajectory], config: TrainConfig, model: DynamicsModel) -> TrainResult:
    """Fit a model from scratch; deterministic given config.seed and the model's init seed"""
    if not dataset:
        raise TrainingError("dataset is empty")
    return Trainer(model, config).fit(dataset)


def evaluate_prediction(model: DynamicsModel, trajectory: Trajectory, mode: str = MODE_FORCED,
                        alpha: float = 1.0, steps: Optional[int] = None,
                        ablate_control: bool = False) -> PredictionResult:
    """
    One open-loop rollout over a held-out trajectory

    Args:
        model: Trained model
        trajectory: Test trajectory (its controls drive the rollout in forced mode)
        mode: forced | zero-control (controls replaced by zeros)
        alpha: Damping head scale
        steps: Prediction length (defaults to the whole trajectory)
        ablate_control: Zero the control head as well

    Returns:
        PredictionResult with model errors and persistence-baseline errors per step
    """
    if mode not in (MODE_FORCED, MODE_ZERO_CONTROL):
        raise ConfigError(f"unknown prediction mode '{mode}'", field="predict.mode")
    steps = trajectory.length if steps is None else steps
    if steps < 1 or steps > trajectory.length:
        raise ConfigError(f"prediction length {steps} does not fit a trajectory of {trajectory.length} steps",
                          field="predict.steps")

    view = model.with_damping_scale(alpha) if alpha != 1.0 else model
    if ablate_control:
        view = view.without_control()
    controls = trajectory.controls[:steps].copy()
    if mode == MODE_ZERO_CONTROL:
        if np.any(controls != 0.0):
            logger.warning("zero-control prediction on a trajectory recorded with nonzero controls")
        controls = np.zeros_like(controls)

    obs = trajectory.observations
    if view.position_only:
        p = view.system.position_channels
        if steps < 2:
            raise ConfigError("two-step prediction needs at least 2 steps", field="predict.steps")
        # seeded by the observed pair (y_0, y_1); predictions start at y_2
        initial = obs[None, 0:2, :p]
        predicted = view.predict(initial, controls[None, 1:steps])[0]
        actual = obs[2:steps + 1, :p]
        baseline = np.repeat(obs[1:2, :p], len(actual), axis=0)
        step_index = np.arange(2, steps + 1)
    else:
        predicted = view.predict(obs[None, 0], controls[None])[0]
        actual = obs[1:steps + 1]
        baseline = np.repeat(obs[0:1], len(actual), axis=0)
        step_index = np.arange(1, steps + 1)

    return PredictionResult(
        steps=step_index,
        errors=MathUtils.l2_error_curve(predicted, actual),
        predicted=predicted,
        actual=actual,
        baseline_errors=MathUtils.l2_error_curve(baseline, actual),
    )


def persistence_errors(trajectory: Trajectory, one_step: bool = False) -> np.ndarray:
    """
    Errors of the training-free persistence predictor

    Open loop (default): every prediction is y_0. One-step: y_hat_{k+1} = y_k.
    """
    obs = trajectory.observations
    if one_step:
        return MathUtils.l2_error_curve(obs[:-1], obs[1:])
    return MathUtils.l2_error_curve(np.repeat(obs[0:1], len(obs) - 1, axis=0), obs[1:])


def gradient_check(model: DynamicsModel, batch: Batch, draws: int = 10, eps: float = 1e-6,
                   seed: int = 0) -> float:
    """
    Largest relative error between backward() and central differences over random parameter entries
    """
    rng = np.random.default_rng(seed)
    params = model.parameters()
    with dc.Tape() as tape:
        loss = open_loop_loss(batch, model)
    grads = dc.backward(tape, loss, params)

    worst = 0.0
    for _ in range(draws):
        i = int(rng.integers(len(params)))
        flat_index = int(rng.integers(params[i].size))
        flat = params[i].data.reshape(-1)
        original = flat[flat_index]
        try:
            flat[flat_index] = original + eps
            plus = open_loop_loss(batch, model).item()
            flat[flat_index] = original - eps
            minus = open_loop_loss(batch, model).item()
        finally:
            flat[flat_index] = original
        numeric = (plus - minus) / (2.0 * eps)
        analytic = grads[i].reshape(-1)[flat_index]
        worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic), GRADIENT_CHECK_FLOOR))
    return worst
