"""
Experiment Service

Runs the CLI commands end to end: data generation, training, open-loop prediction, MPC evaluation,
energy audits and the collect-then-refit loop. Every command writes tidy CSV/JSON-Lines artifacts,
a metrics file and a manifest into the configured output directory.
"""
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from core.config.experiment import ExperimentConfig, config_hash
from core.config.systems import SystemConfig
from core.constants import (
    CONTROL_RANDOM,
    CONTROL_RANDOM_THEN_ZERO,
    CONTROL_ZERO,
    MODE_FORCED,
    MODE_ZERO_CONTROL,
    SYSTEM_PENDULUM,
    VARIANT_RESNN,
)
from core.control import (
    CemPlanner,
    CostSpec,
    GridResult,
    SimulatorPlanningModel,
    mpc_grid,
    train_with_mpc,
)
from core.diffcore import constant
from core.dynamics_model import DynamicsModel
from core.exceptions import ConfigError
from core.integrators import AnalyticPendulumForces, ConfigState, euler_step, vv_step
from core.logging import get_logger
from core.metrics import write_metrics
from core.simulators import (
    Trajectory,
    energy,
    observe,
    sample_initial_state,
    sample_trajectories,
    simulate,
    state_from_observation,
)
from core.training import PredictionResult, Trainer, evaluate_prediction
from services.artifacts import write_csv, write_manifest
from services.checkpoint_store import CheckpointStore
from services.trajectory_store import TrajectoryStore
from utils.math_utils import MathUtils

logger = get_logger(__name__)

STEP_MAPS = {"vv": vv_step, "euler": euler_step}


class ExperimentService:
    """One experiment configuration, many commands"""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.out_dir = Path(config.out_dir)
        self.config_hash = config_hash(config)
        self.artifacts: List[Path] = []

    # --- shared helpers -------------------------------------------------

    def _system(self) -> SystemConfig:
        return self.config.system_config()

    def _track(self, path: Path) -> Path:
        self.artifacts.append(Path(path))
        return Path(path)

    def _finish(self, command: str, checkpoint_hash: Optional[str] = None, **extra) -> Dict[str, Any]:
        # metrics.prom carries timings and creation stamps, so it stays out of the manifest
        metrics_path = write_metrics(str(self.out_dir))
        manifest = write_manifest(self.out_dir, command, self.config_hash, self.artifacts, checkpoint_hash)
        result = {
            "status": "success",
            "command": command,
            "out_dir": str(self.out_dir),
            "config_hash": self.config_hash,
            "manifest": str(manifest),
            "metrics": str(metrics_path) if metrics_path else None,
            "artifacts": [str(p) for p in self.artifacts],
        }
        result.update(extra)
        logger.info("Command finished", command=command, artifacts=len(self.artifacts))
        return result

    def _dataset(self, system: SystemConfig, count: Optional[int] = None) -> List[Trajectory]:
        spec = self.config.dataset
        if spec.path:
            trajectories = TrajectoryStore.read_dataset(spec.path, system=system.name)
            return trajectories if count is None else trajectories[:count]
        if not system.simulated:
            raise ConfigError(f"system '{system.name}' needs dataset.path", field="dataset.path")
        return sample_trajectories(system, spec.count if count is None else count, spec.length, spec.control_law,
                                   seed=self.config.dataset_seed, zero_after=spec.zero_after)

    def _build_model(self, system: SystemConfig) -> DynamicsModel:
        return DynamicsModel.build(self.config.variant, system, tuple(self.config.model.hidden),
                                   self.config.init_seed)

    @staticmethod
    def _load_model(checkpoint: Optional[str], system: SystemConfig) -> Tuple[DynamicsModel, str]:
        if not checkpoint:
            raise ConfigError("this command needs --checkpoint", field="checkpoint")
        model = CheckpointStore.load(checkpoint)
        if model.system.name != system.name or model.system.observation != system.observation:
            raise ConfigError(f"checkpoint is for {model.system.name}/{model.system.observation}, config is for "
                              f"{system.name}/{system.observation}", field="checkpoint")
        return model, MathUtils.file_hash(checkpoint)

    def _save_checkpoints(self, model: DynamicsModel, best_params, dataset_size: int,
                          best_epoch: int) -> str:
        metadata = {"dataset_size": dataset_size, "seed": self.config.seed, "config_hash": self.config_hash}
        final_hash = CheckpointStore.save(self.out_dir / "checkpoint.json", model, metadata=metadata)
        self._track(self.out_dir / "checkpoint.json")
        CheckpointStore.save(self.out_dir / "checkpoint_best.json", model, values=best_params,
                             metadata={**metadata, "epoch": best_epoch})
        self._track(self.out_dir / "checkpoint_best.json")
        return final_hash

    # --- simulate -------------------------------------------------------

    def simulate(self) -> Dict[str, Any]:
        """Write the configured dataset as JSON-Lines trajectories"""
        system = self._system()
        if not system.simulated:
            raise ConfigError(f"system '{system.name}' is an offline data source and cannot be simulated",
                              field="system")
        spec = self.config.dataset
        trajectories = sample_trajectories(system, spec.count, spec.length, spec.control_law,
                                           seed=self.config.dataset_seed, zero_after=spec.zero_after)
        for path in TrajectoryStore.write_dataset(self.out_dir / "data", trajectories):
            self._track(path)
        logger.info("Simulated dataset", count=len(trajectories), length=spec.length)
        return self._finish("simulate", trajectories=len(trajectories))

    # --- train ----------------------------------------------------------

    def train(self) -> Dict[str, Any]:
        """Fit the configured variant and write final/best checkpoints plus the loss curve"""
        system = self._system()
        dataset = self._dataset(system)
        model = self._build_model(system)
        result = Trainer(model, self.config.train_config()).fit(dataset)

        checkpoint_hash = self._save_checkpoints(model, result.best_params, len(dataset), result.best_epoch)
        self._track(write_csv(self.out_dir / "loss.csv", ["epoch", "loss"], enumerate(result.loss_curve)))
        return self._finish(
            "train",
            checkpoint_hash=checkpoint_hash,
            parameters=model.parameter_count,
            epochs=len(result.loss_curve),
            final_loss=result.loss_curve[-1] if result.loss_curve else None,
            best_loss=result.best_loss,
            best_epoch=result.best_epoch,
        )

    # --- predict --------------------------------------------------------

    def _test_trajectories(self, system: SystemConfig) -> Dict[str, Trajectory]:
        spec = self.config.predict
        if spec.test_path:
            tests = TrajectoryStore.read_dataset(spec.test_path, system=system.name)
            return {f"{MODE_FORCED}_{i:03d}" if len(tests) > 1 else MODE_FORCED: t for i, t in enumerate(tests)}
        if not system.simulated:
            raise ConfigError(f"system '{system.name}' needs predict.test_path", field="predict.test_path")

        rng = np.random.default_rng(self.config.test_seed)
        start = sample_initial_state(system, rng)
        tests = {}
        for mode in spec.modes:
            if mode == MODE_FORCED:
                law = CONTROL_RANDOM_THEN_ZERO if spec.zero_after is not None else CONTROL_RANDOM
                tests[mode] = simulate(system, start, spec.test_length, law, rng=np.random.default_rng(
                    [self.config.test_seed, 1]), zero_after=spec.zero_after, seed=self.config.test_seed)
            else:
                tests[mode] = simulate(system, start, spec.test_length, CONTROL_ZERO, seed=self.config.test_seed)
        return tests

    @staticmethod
    def _energy_series(system: SystemConfig, observations: np.ndarray) -> Optional[np.ndarray]:
        if not system.simulated or observations.shape[-1] != system.obs_dim:
            return None
        return energy(system, state_from_observation(system, observations))

    def _write_prediction(self, label: str, system: SystemConfig, test: Trajectory,
                          prediction: PredictionResult, reference: Optional[Trajectory] = None) -> Dict[str, Any]:
        self._track(write_csv(
            self.out_dir / f"error_{label}.csv",
            ["step", "l2_error", "baseline_error"],
            zip(prediction.steps.tolist(), prediction.errors.tolist(), prediction.baseline_errors.tolist()),
        ))

        d = prediction.predicted.shape[-1]
        lead = test.observations[:len(test.observations) - len(prediction.predicted), :d]
        predicted_obs = np.concatenate([lead, prediction.predicted])
        used = test.controls[:len(predicted_obs) - 1]
        if label.startswith(MODE_ZERO_CONTROL) or label.startswith("alpha"):
            used = np.zeros_like(used)
        self._track(TrajectoryStore.write(
            self.out_dir / f"predicted_{label}.jsonl",
            Trajectory(test.h, predicted_obs, used, system=system.name, seed=self.config.seed),
        ))

        summary: Dict[str, Any] = {
            "terminal_error": float(prediction.errors[-1]),
            "mean_error": float(np.mean(prediction.errors)),
        }
        if 100 in prediction.steps:
            summary["error_at_100"] = prediction.error_at(100)

        reference = reference or test
        predicted_energy = self._energy_series(system, predicted_obs)
        true_energy = self._energy_series(system, reference.observations[:len(predicted_obs)])
        if predicted_energy is not None and true_energy is not None:
            self._track(write_csv(
                self.out_dir / f"energy_{label}.csv",
                ["step", "predicted_energy", "true_energy"],
                zip(range(len(predicted_energy)), predicted_energy.tolist(), true_energy.tolist()),
            ))
            summary["terminal_energy_error"] = float(abs(predicted_energy[-1] - true_energy[-1]))
            summary["terminal_energy"] = float(predicted_energy[-1])
            summary["initial_energy"] = float(predicted_energy[0])
        return summary

    def predict(self, checkpoint: Optional[str]) -> Dict[str, Any]:
        """
        Open-loop prediction against held-out trajectories

        Writes error_<mode>.csv, predicted_<mode>.jsonl and (for simulated systems) energy_<mode>.csv;
        with a damping sweep configured, one alpha_<value> set per scale compared against matched-damping
        zero-control simulations.
        """
        system = self._system()
        model, checkpoint_hash = self._load_model(checkpoint, system)
        spec = self.config.predict
        summaries: Dict[str, Any] = {}

        for label, test in self._test_trajectories(system).items():
            mode = MODE_ZERO_CONTROL if label.startswith(MODE_ZERO_CONTROL) else MODE_FORCED
            rollout_test = test
            if spec.test_path and spec.zero_after is not None:
                # controls are switched off after zero_after steps
                controls = test.controls.copy()
                controls[spec.zero_after:] = 0.0
                rollout_test = Trajectory(test.h, test.observations, controls, test.states, test.system, test.seed)
            prediction = evaluate_prediction(model, rollout_test, mode)
            summaries[label] = self._write_prediction(label, system, rollout_test, prediction)
            logger.info("Prediction scored", label=label, terminal_error=summaries[label]["terminal_error"])

        if spec.alphas != [1.0]:
            summaries.update(self._damping_sweep(system, model, spec.alphas))

        return self._finish("predict", checkpoint_hash=checkpoint_hash, predictions=summaries)

    def _damping_sweep(self, system: SystemConfig, model: DynamicsModel, alphas: List[float]) -> Dict[str, Any]:
        """Control head ablated, damping head scaled by alpha, scored against a damping-scaled simulation"""
        if not system.simulated:
            raise ConfigError("the damping sweep needs a simulated system", field="predict.alphas")
        rng = np.random.default_rng(self.config.test_seed)
        start = sample_initial_state(system, rng)
        summaries = {}
        for alpha in alphas:
            matched = self.config.system_config(scaled_damping(system, alpha))
            reference = simulate(matched, start, self.config.predict.test_length, CONTROL_ZERO,
                                 seed=self.config.test_seed)
            prediction = evaluate_prediction(model, reference, MODE_ZERO_CONTROL, alpha=alpha, ablate_control=True)
            label = f"alpha_{alpha:g}"
            summaries[label] = self._write_prediction(label, system, reference, prediction, reference)
            logger.info("Damping sweep point", alpha=alpha,
                        terminal_energy=summaries[label].get("terminal_energy"))
        return summaries

    # --- mpc ------------------------------------------------------------

    def _planner(self, system: SystemConfig, model, seed_offset: int = 0) -> CemPlanner:
        rng = np.random.default_rng([self.config.seed, seed_offset])
        return CemPlanner(system, model, CostSpec.for_system(system), self.config.cem_config(), rng)

    def _write_grid(self, name: str, grid: GridResult) -> Path:
        rows = []
        for i, angle in enumerate(grid.angles):
            for j, rate in enumerate(grid.rates):
                rows.append([float(angle), float(rate), bool(grid.success[i, j]), float(grid.total_cost[i, j]),
                             float(grid.control_effort[i, j])])
        return self._track(write_csv(self.out_dir / name,
                                     ["angle", "rate", "success", "total_cost", "control_effort"], rows))

    def _run_grid(self, system: SystemConfig, model, tag: str, seed_offset: int = 0) -> GridResult:
        spec = self.config.mpc
        planner = self._planner(system, model, seed_offset)

        def log_episode(index: int, episode):
            path = self.out_dir / "episodes" / tag / f"episode_{index:03d}.jsonl"
            episode.trajectory.seed = self.config.seed
            self._track(TrajectoryStore.write(path, episode.trajectory, episode.summary()))

        return mpc_grid(system, planner, spec.grid_size, spec.episode_length, spec.epsilon, on_episode=log_episode)

    @staticmethod
    def _table_row(variant: str, trajectories: Any, grid: GridResult) -> List[Any]:
        monotone = float(np.mean([e.monotone_fraction for e in grid.episodes])) if grid.episodes else 1.0
        return [variant, trajectories, grid.success_rate, grid.mean_cost, float(np.mean(grid.control_effort)),
                monotone]

    def mpc(self, checkpoint: Optional[str]) -> Dict[str, Any]:
        """
        MPC over a grid of initial conditions

        With mpc.regimes set, one model per data regime is grown with the collect-then-refit loop and
        evaluated; otherwise the checkpoint (or the simulator when mpc.planner is 'simulator') is evaluated.
        """
        system = self._system()
        if not system.simulated:
            raise ConfigError(f"system '{system.name}' has no simulator to run MPC in", field="system")
        spec = self.config.mpc
        header = ["variant", "trajectories", "success_rate", "mean_cost", "mean_control_effort",
                  "monotone_elite_fraction"]
        rows = []
        checkpoint_hash = None
        grids: Dict[str, GridResult] = {}

        if spec.regimes:
            for regime in spec.regimes:
                collected = self._collect(system, regime)
                grid = self._run_grid(system, collected.model, f"regime_{regime}", seed_offset=regime)
                self._write_grid(f"mpc_grid_{regime}.csv", grid)
                rows.append(self._table_row(self.config.variant, regime, grid))
                grids[str(regime)] = grid
        elif spec.planner == "simulator":
            grid = self._run_grid(system, SimulatorPlanningModel(system), "simulator")
            self._write_grid("mpc_grid.csv", grid)
            rows.append(self._table_row("simulator", "", grid))
            grids["simulator"] = grid
        else:
            model, checkpoint_hash = self._load_model(checkpoint, system)
            if model.position_only:
                raise ConfigError("sv-fvin is prediction-only and cannot be used for MPC", field="variant")
            grid = self._run_grid(system, model, "model")
            self._write_grid("mpc_grid.csv", grid)
            size = CheckpointStore.metadata(checkpoint).get("dataset_size", "")
            rows.append(self._table_row(model.variant, size, grid))
            grids["model"] = grid

            if spec.compare_checkpoint:
                other, _ = self._load_model(spec.compare_checkpoint, system)
                other_grid = self._run_grid(system, other, "compare")
                self._write_grid("mpc_grid_compare.csv", other_grid)
                rows.append(self._table_row(other.variant,
                                            CheckpointStore.metadata(spec.compare_checkpoint).get("dataset_size", ""),
                                            other_grid))
                self._write_cost_difference(grid, other_grid)

        self._track(write_csv(self.out_dir / "success_table.csv", header, rows))
        return self._finish("mpc", checkpoint_hash=checkpoint_hash,
                            success_rates={k: g.success_rate for k, g in grids.items()})

    def _write_cost_difference(self, grid: GridResult, other: GridResult):
        rows = []
        for i, angle in enumerate(grid.angles):
            for j, rate in enumerate(grid.rates):
                a, b = float(grid.total_cost[i, j]), float(other.total_cost[i, j])
                rows.append([float(angle), float(rate), a, b, a - b])
        self._track(write_csv(self.out_dir / "cost_difference.csv",
                              ["angle", "rate", "cost", "compare_cost", "difference"], rows))

    # --- train-with-mpc -------------------------------------------------

    def _collect(self, system: SystemConfig, total: int):
        spec = self.config.mpc
        initial = min(spec.initial_count, total)
        model = self._build_model(system)
        if model.position_only:
            raise ConfigError("sv-fvin is prediction-only and cannot collect MPC data", field="variant")
        logger.info("Collect-then-refit", initial=initial, collect=total - initial)
        return train_with_mpc(system, model, self.config.train_config(), self.config.cem_config(),
                              initial_count=initial, collect=total - initial,
                              incremental_epochs=self.config.training.incremental_epochs,
                              trajectory_length=spec.collect_length, noise_fraction=spec.noise_fraction,
                              seed=self.config.dataset_seed)

    def train_with_mpc(self) -> Dict[str, Any]:
        """Grow the dataset with noisy MPC episodes and refit after each one"""
        system = self._system()
        spec = self.config.mpc
        collected = self._collect(system, spec.initial_count + spec.collect)
        best = collected.fits[-1]
        checkpoint_hash = self._save_checkpoints(collected.model, best.best_params, len(collected.dataset),
                                                 best.best_epoch)
        for path in TrajectoryStore.write_dataset(self.out_dir / "data", collected.dataset):
            self._track(path)
        rows = [[fit, epoch, loss] for fit, curve in enumerate(collected.loss_curves)
                for epoch, loss in enumerate(curve)]
        self._track(write_csv(self.out_dir / "loss.csv", ["fit", "epoch", "loss"], rows))
        return self._finish("train-with-mpc", checkpoint_hash=checkpoint_hash, trajectories=len(collected.dataset))

    # --- energy audit ---------------------------------------------------

    def energy_audit(self, checkpoint: Optional[str]) -> Dict[str, Any]:
        """
        Energy-versus-time series for long unforced rollouts

        analytic: the true pendulum terms under each configured integrator, plus a damped ground-truth
        simulation. checkpoint: the learned model with its control head ablated and damping scaled.
        """
        spec = self.config.energy_audit
        system = self._system()
        if not system.simulated:
            raise ConfigError("energy audits need an analytic energy", field="system")
        checkpoint_hash = None
        series: Dict[str, np.ndarray] = {}

        if spec.source == "analytic":
            if system.name != SYSTEM_PENDULUM:
                raise ConfigError("the analytic energy audit covers the pendulum", field="system")
            if len(spec.initial_state) != 2:
                raise ConfigError("pendulum initial_state is [theta, theta_dot]", field="energy_audit.initial_state")
            heads = AnalyticPendulumForces(system.params, damping_scale=spec.damping_scale, control_enabled=False)
            x0 = ConfigState(constant([[spec.initial_state[0]]]), constant([[spec.initial_state[1]]]))
            for name in spec.integrators:
                states = integrate_unforced(STEP_MAPS[name], x0, heads, spec.h, spec.steps, system.control_dim)
                series[name] = energy(system, states)
            if spec.simulate_steps:
                reference = simulate(system, np.array(spec.initial_state), spec.simulate_steps, CONTROL_ZERO,
                                     seed=self.config.seed)
                series["simulation"] = energy(system, reference.states)
            steps_h = {name: spec.h for name in spec.integrators}
            steps_h["simulation"] = system.h
        else:
            model, checkpoint_hash = self._load_model(checkpoint, system)
            if model.variant == VARIANT_RESNN or model.position_only:
                raise ConfigError("the checkpoint energy audit needs a velocity-verlet model", field="variant")
            view = model.with_damping_scale(spec.damping_scale).without_control()
            if len(spec.initial_state) != 2 * system.config_dim:
                raise ConfigError("initial_state must be a full [q, q_dot] state", field="energy_audit.initial_state")
            x0 = view.latent_state(observe(system, np.array(spec.initial_state)))
            for name in spec.integrators:
                states = integrate_unforced(STEP_MAPS[name], x0, view.params, system.h, spec.steps,
                                            system.control_dim)
                decoded = view.params.decode(ConfigState(constant(states[:, :system.config_dim]),
                                                         constant(states[:, system.config_dim:]))).data
                series[name] = energy(system, state_from_observation(system, decoded))
            steps_h = {name: system.h for name in spec.integrators}

        rows, summary_rows, summary = [], [], {}
        for name, values in series.items():
            times = np.arange(len(values)) * steps_h[name]
            rows.extend([name, k, float(t), float(e)] for k, (t, e) in enumerate(zip(times, values)))
            deviation = MathUtils.max_relative_deviation(values)
            drift = MathUtils.secular_drift(times, values)
            summary_rows.append([name, deviation, drift, float(values[0]), float(values[-1])])
            summary[name] = {"max_relative_deviation": deviation, "secular_drift": drift}
        self._track(write_csv(self.out_dir / "energy.csv", ["integrator", "step", "time", "energy"], rows))
        self._track(write_csv(self.out_dir / "energy_summary.csv",
                              ["integrator", "max_relative_deviation", "secular_drift", "initial_energy",
                               "final_energy"], summary_rows))
        return self._finish("energy-audit", checkpoint_hash=checkpoint_hash, energy=summary)


def integrate_unforced(step, x0: ConfigState, heads, h: float, steps: int, control_dim: int) -> np.ndarray:
    """Iterate a one-step map with zero control; returns (steps + 1, 2n) states for a single trajectory"""
    u = constant(np.zeros((x0.q.shape[0], control_dim)))
    states = [np.concatenate([x0.q.data[0], x0.qdot.data[0]])]
    x = x0
    for _ in range(steps):
        x = step(x, u, heads, h)
        states.append(np.concatenate([x.q.data[0], x.qdot.data[0]]))
    return np.array(states)


def scaled_damping(system: SystemConfig, alpha: float) -> Dict[str, float]:
    """Physical damping overrides for a damping scale alpha"""
    params = system.params
    if system.name == SYSTEM_PENDULUM:
        return {"mu": alpha * params.mu}
    return {"mu_c": alpha * params.mu_c, "mu_p": alpha * params.mu_p}
